//! Flow maps, finite-time Lyapunov exponents and coherent-region labelling.
//!
//! A lattice of seeds is advected through a window of flow fields; the
//! largest stretching rate of the resulting map marks the boundaries between
//! regions that move coherently.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::Matrix2;
use rayon::prelude::*;
use thiserror::Error;

use crate::image::FlowField;
use crate::netpbm;
use crate::stats;

pub use crate::netpbm::sidecar_path;

pub const DEFAULT_TAU: usize = 10;
pub const DEFAULT_SPACING: usize = 4;
pub const DEFAULT_RIDGE_QUANTILE: f64 = 0.9;

#[derive(Debug, Error)]
pub enum LcsError {
    #[error("window needs flows {t0}..{end} but only {available} are available")]
    InsufficientFrames { t0: usize, end: usize, available: usize },
    #[error("flow map grid {width}x{height} is smaller than 3x3")]
    DegenerateGrid { width: usize, height: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Final positions of a seed lattice after advection over `tau` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    width: usize,
    height: usize,
    spacing: f64,
    t0: usize,
    tau: usize,
    initial: Vec<(f64, f64)>,
    positions: Vec<(f64, f64)>,
}

impl FlowMap {
    /// Lattice seeds at `(i·spacing, j·spacing)` with final positions from `f`.
    pub fn from_fn(
        width: usize,
        height: usize,
        spacing: f64,
        t0: usize,
        tau: usize,
        mut f: impl FnMut(f64, f64) -> (f64, f64),
    ) -> Result<Self, LcsError> {
        if tau == 0 || !(spacing > 0.0) {
            return Err(LcsError::InvalidParams(format!("tau {tau} and spacing {spacing} must be positive")));
        }
        let initial: Vec<(f64, f64)> =
            (0..height).flat_map(|j| (0..width).map(move |i| (i as f64 * spacing, j as f64 * spacing))).collect();
        let positions = initial.iter().map(|&(x, y)| f(x, y)).collect();
        Ok(Self { width, height, spacing, t0, tau, initial, positions })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn initial(&self, i: usize, j: usize) -> (f64, f64) {
        self.initial[j * self.width + i]
    }

    pub fn position(&self, i: usize, j: usize) -> (f64, f64) {
        self.positions[j * self.width + i]
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|(x, y)| x.is_finite() && y.is_finite())
    }

    /// Same map with every final position moved by `(dx, dy)`.
    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        let mut out = self.clone();
        out.positions.iter_mut().for_each(|p| *p = (p.0 + dx, p.1 + dy));
        out
    }
}

/// Advects a lattice of pitch `spacing` through `flows[t0..t0 + tau]` with one
/// forward-Euler step per frame and bilinear flow sampling.
pub fn build_flow_map(flows: &[FlowField], t0: usize, tau: usize, spacing: usize) -> Result<FlowMap, LcsError> {
    if spacing == 0 || tau == 0 {
        return Err(LcsError::InvalidParams(format!("tau {tau} and spacing {spacing} must be at least 1")));
    }
    if t0 + tau > flows.len() {
        return Err(LcsError::InsufficientFrames { t0, end: t0 + tau, available: flows.len() });
    }
    let first = &flows[t0];
    let (w, h) = (first.width(), first.height());
    for f in &flows[t0..t0 + tau] {
        f.check_dims(w, h).map_err(|e| LcsError::InvalidParams(e.to_string()))?;
    }
    let gw = (w - 1) / spacing + 1;
    let gh = (h - 1) / spacing + 1;
    let window = &flows[t0..t0 + tau];
    FlowMap::from_fn(gw, gh, spacing as f64, t0, tau, |x, y| {
        window.iter().fold((x, y), |(px, py), f| {
            let (u, v) = f.sample(px, py);
            (px + u, py + v)
        })
    })
}

/// FTLE values on the seed lattice plus optional region labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FtleField {
    width: usize,
    height: usize,
    spacing: f64,
    values: Vec<f64>,
    labels: Vec<usize>,
    regions: usize,
}

impl FtleField {
    pub fn from_values(width: usize, height: usize, spacing: f64, values: Vec<f64>) -> Result<Self, LcsError> {
        if values.len() != width * height {
            return Err(LcsError::InvalidParams(format!("{} values for a {width}x{height} grid", values.len())));
        }
        Ok(Self { width, height, spacing, values, labels: vec![0; width * height], regions: 1 })
    }

    /// Replaces the labels; the region count becomes the largest label plus one.
    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self, LcsError> {
        if labels.len() != self.width * self.height {
            return Err(LcsError::InvalidParams(format!("{} labels for a {}x{} grid", labels.len(), self.width, self.height)));
        }
        self.regions = labels.iter().max().map_or(1, |m| m + 1);
        self.labels = labels;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.width + i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize, j: usize) -> usize {
        self.labels[j * self.width + i]
    }

    pub fn region_count(&self) -> usize {
        self.regions
    }

    /// Label of the lattice cell nearest to pixel position `(x, y)`.
    pub fn label_at(&self, x: f64, y: f64) -> usize {
        let i = (x / self.spacing).round().clamp(0.0, (self.width - 1) as f64) as usize;
        let j = (y / self.spacing).round().clamp(0.0, (self.height - 1) as f64) as usize;
        self.label(i, j)
    }

    /// Cell count per region id.
    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.regions];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// 16-bit PGM of the values scaled linearly from `min` to `max`, returned with that range.
    pub fn to_pgm16(&self) -> (Vec<u8>, f64, f64) {
        let (lo, hi) = self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        let samples: Vec<u16> = self
            .values
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span * 65535.0).round() as u16 } else { 0 })
            .collect();
        (netpbm::encode_pgm(self.width, self.height, 65535, &samples), lo, hi)
    }

    /// Writes `<path>` as a 16-bit PGM and `<path>.txt` holding `min=… max=…`.
    pub fn save_pgm16(&self, path: &Path) -> Result<(), LcsError> {
        let (bytes, lo, hi) = self.to_pgm16();
        netpbm::write_bytes(path, &bytes)?;
        std::fs::write(sidecar_path(path), format!("min={lo} max={hi}\n"))?;
        Ok(())
    }

    /// Labels as whitespace-separated rows.
    pub fn write_labels(&self, w: &mut impl Write) -> std::io::Result<()> {
        for row in self.labels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|l| l.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// `σ = ln √λmax(∇Φᵀ∇Φ) / τ` with ∇Φ from central differences of the final
/// positions; border cells copy their nearest interior neighbour.
pub fn ftle(map: &FlowMap) -> Result<FtleField, LcsError> {
    let (w, h) = (map.width, map.height);
    if w < 3 || h < 3 {
        return Err(LcsError::DegenerateGrid { width: w, height: h });
    }
    let d = 2.0 * map.spacing;
    let tau = map.tau as f64;
    let mut values = vec![0.0; w * h];
    values.par_chunks_mut(w).enumerate().for_each(|(j, row)| {
        let jj = j.clamp(1, h - 2);
        for (i, out) in row.iter_mut().enumerate() {
            let ii = i.clamp(1, w - 2);
            let (xr, yr) = map.position(ii + 1, jj);
            let (xl, yl) = map.position(ii - 1, jj);
            let (xd, yd) = map.position(ii, jj + 1);
            let (xu, yu) = map.position(ii, jj - 1);
            let grad = Matrix2::new((xr - xl) / d, (xd - xu) / d, (yr - yl) / d, (yd - yu) / d);
            let cg = grad.transpose() * grad;
            // largest eigenvalue of a symmetric 2x2
            let (a, b, c) = (cg[(0, 0)], cg[(0, 1)], cg[(1, 1)]);
            let lmax = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
            *out = 0.5 * lmax.max(f64::MIN_POSITIVE).ln() / tau;
        }
    });
    FtleField::from_values(w, h, map.spacing, values)
}

/// Labels coherent regions: cells above the `quantile` value are ridges, the
/// remaining cells are split into 4-connected components (ids in scan order),
/// and ridge cells then take the most common label among their labelled
/// 8-neighbours, growing inward from the ridge edges.
pub fn segment(field: &FtleField, quantile: f64) -> Result<FtleField, LcsError> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(LcsError::InvalidParams(format!("ridge quantile {quantile} outside (0, 1)")));
    }
    let (w, h) = (field.width, field.height);
    let cut = stats::quantile(&field.values, quantile);
    const NONE: usize = usize::MAX;
    let mut labels = vec![NONE; w * h];
    let ridge: Vec<bool> = field.values.iter().map(|&v| v > cut).collect();
    let mut regions = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if ridge[start] || labels[start] != NONE {
            continue;
        }
        labels[start] = regions;
        queue.push_back(start);
        while let Some(c) = queue.pop_front() {
            let (x, y) = (c % w, c / w);
            let mut visit = |n: usize| {
                if !ridge[n] && labels[n] == NONE {
                    labels[n] = regions;
                    queue.push_back(n);
                }
            };
            if x > 0 {
                visit(c - 1);
            }
            if x + 1 < w {
                visit(c + 1);
            }
            if y > 0 {
                visit(c - w);
            }
            if y + 1 < h {
                visit(c + w);
            }
        }
        regions += 1;
    }
    // ridge cells: layer-by-layer majority vote
    loop {
        let pending: Vec<usize> = (0..w * h).filter(|&c| labels[c] == NONE).collect();
        if pending.is_empty() {
            break;
        }
        let mut updates = Vec::new();
        for &c in &pending {
            let (x, y) = ((c % w) as isize, (c / w) as isize);
            let mut votes: Vec<usize> = Vec::with_capacity(8);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize {
                        let l = labels[ny as usize * w + nx as usize];
                        if l != NONE {
                            votes.push(l);
                        }
                    }
                }
            }
            if votes.is_empty() {
                continue;
            }
            votes.sort_unstable();
            let mut best = (0, votes[0]);
            let mut run = (0, votes[0]);
            for &v in &votes {
                if v == run.1 {
                    run.0 += 1;
                } else {
                    run = (1, v);
                }
                if run.0 > best.0 {
                    best = run;
                }
            }
            updates.push((c, best.1));
        }
        for (c, l) in updates {
            labels[c] = l;
        }
    }
    Ok(FtleField { labels, regions, ..field.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_map_requires_frames() {
        let flows = vec![FlowField::zeros(16, 16); 3];
        assert!(matches!(build_flow_map(&flows, 1, 3, 2), Err(LcsError::InsufficientFrames { end: 4, available: 3, .. })));
        assert!(build_flow_map(&flows, 0, 3, 0).is_err());
    }

    #[test]
    fn lattice_covers_image() {
        let flows = vec![FlowField::zeros(17, 10)];
        let m = build_flow_map(&flows, 0, 1, 4).unwrap();
        assert_eq!((m.width(), m.height()), (5, 3));
        assert_eq!(m.position(4, 2), (16.0, 8.0));
    }

    #[test]
    fn small_grid_is_degenerate() {
        let m = FlowMap::from_fn(2, 5, 1.0, 0, 1, |x, y| (x, y)).unwrap();
        assert!(matches!(ftle(&m), Err(LcsError::DegenerateGrid { .. })));
    }

    #[test]
    fn segment_quantile_range() {
        let f = FtleField::from_values(3, 3, 1.0, vec![0.0; 9]).unwrap();
        assert!(segment(&f, 0.0).is_err());
        assert!(segment(&f, 1.0).is_err());
    }

    #[test]
    fn ridge_ties_resolve_to_majority() {
        // one ridge column splitting two regions; ridge joins the left one where it has more neighbours
        let mut v = vec![0.0; 25];
        for y in 0..5 {
            v[y * 5 + 2] = 1.0;
        }
        let f = FtleField::from_values(5, 5, 1.0, v).unwrap();
        let s = segment(&f, 0.5).unwrap();
        assert_eq!(s.region_count(), 2);
        assert_eq!(s.label(0, 0), 0);
        assert_eq!(s.label(4, 0), 1);
        // ties go to the lower id
        assert!((0..5).all(|y| s.label(2, y) == 0));
    }

    #[test]
    fn labels_ascii() {
        let f = FtleField::from_values(3, 2, 1.0, vec![0.0; 6]).unwrap();
        let mut buf = Vec::new();
        f.write_labels(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0 0 0\n0 0 0\n");
    }
}
