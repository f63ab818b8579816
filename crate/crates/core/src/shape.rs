//! New-object capture: motion masks, boundary tracing, Fourier descriptors
//! and a coarse gist signature used as a change gate.

use std::collections::VecDeque;
use std::io::Write;

pub use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::filter;
use crate::image::{FlowField, Frame};
use crate::netpbm;
use crate::stats;

/// Side of the gist cell grid.
pub const GIST_CELLS: usize = 4;
pub const GIST_ORIENTATIONS: usize = 4;
pub const GIST_LEN: usize = GIST_CELLS * GIST_CELLS * GIST_ORIENTATIONS;
/// EMA rate of the gist reference.
pub const GIST_RATE: f64 = 0.05;
pub const MIN_COMPONENT_AREA: usize = 4;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("largest component has {0} pixels, need at least {MIN_COMPONENT_AREA}")]
    TooSmallComponent(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("frame {0}x{1} is smaller than 16x16")]
    FrameTooSmall(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, ShapeError> {
        if bits.len() != width * height {
            return Err(ShapeError::DimensionMismatch { expected: width * height, got: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Intersection over union; 1 when both masks are empty.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count();
        let union = self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// 3×3 min (`erode`) or max filter over in-bounds pixels.
    fn filter3(&self, erode: bool) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            let mut hood = (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dx, dy))).filter_map(|(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                (nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height).then(|| self.get(nx as usize, ny as usize))
            });
            if erode {
                hood.all(|b| b)
            } else {
                hood.any(|b| b)
            }
        })
    }

    /// Morphological opening with a 3×3 square.
    pub fn open(&self) -> Self {
        self.filter3(true).filter3(false)
    }

    /// 8-connected components as `(label per pixel, sizes)`; labels follow scan order.
    pub fn components(&self) -> (Vec<Option<usize>>, Vec<usize>) {
        let mut labels = vec![None; self.bits.len()];
        let mut sizes = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || labels[start].is_some() {
                continue;
            }
            let id = sizes.len();
            let mut size = 0;
            let mut queue = VecDeque::from([start]);
            labels[start] = Some(id);
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (x, y) = ((i % self.width) as isize, (i / self.width) as isize);
                for (dx, dy) in MOORE {
                    let (nx, ny) = (x + dx, y + dy);
                    if self.get_signed(nx, ny) {
                        let j = ny as usize * self.width + nx as usize;
                        if labels[j].is_none() {
                            labels[j] = Some(id);
                            queue.push_back(j);
                        }
                    }
                }
            }
            sizes.push(size);
        }
        (labels, sizes)
    }

    /// P4 bitmap bytes.
    pub fn to_pbm(&self) -> Vec<u8> {
        netpbm::encode_pbm(self.width, self.height, &self.bits)
    }
}

/// Pixels whose flow, minus the field's median vector, exceeds `threshold`, then opened with a 3×3 square.
pub fn motion_mask(flow: &FlowField, threshold: f64) -> Result<BinaryMask, ShapeError> {
    if !(threshold > 0.0) {
        return Err(ShapeError::InvalidParams(format!("threshold must be positive, got {threshold}")));
    }
    let (mu, mv) = flow.median();
    let raw = BinaryMask::from_fn(flow.width(), flow.height(), |x, y| {
        let (u, v) = flow.get(x, y);
        (u - mu).hypot(v - mv) > threshold
    });
    Ok(raw.open())
}

/// Clockwise neighbour offsets (y down), starting west.
const MOORE: [(isize, isize); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

fn moore_index(d: (isize, isize)) -> usize {
    MOORE.iter().position(|&m| m == d).expect("offset is a Moore neighbour")
}

/// Closed pixel contour; the last point is adjacent to the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundary {
    pub points: Vec<(usize, usize)>,
}

impl Boundary {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_f64(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|&(x, y)| (x as f64, y as f64)).collect()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_points(w, &self.to_f64())
    }
}

/// `k,x,y` rows.
pub fn write_points(w: &mut impl Write, points: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "k,x,y")?;
    for (k, (x, y)) in points.iter().enumerate() {
        writeln!(w, "{k},{x},{y}")?;
    }
    Ok(())
}

/// Moore-neighbour trace of the largest 8-connected component (ties go to
/// the first in scan order), clockwise from its top-left pixel.
pub fn trace_boundary(mask: &BinaryMask) -> Result<Boundary, ShapeError> {
    let (labels, sizes) = mask.components();
    let Some((best, &area)) = sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) else {
        return Err(ShapeError::EmptyMask);
    };
    if area < MIN_COMPONENT_AREA {
        return Err(ShapeError::TooSmallComponent(area));
    }
    let w = mask.width as isize;
    let inside = |x: isize, y: isize| mask.get_signed(x, y) && labels[(y * w + x) as usize] == Some(best);
    let first = labels.iter().position(|&l| l == Some(best)).expect("component is non-empty");
    let start = ((first % mask.width) as isize, (first / mask.width) as isize);

    // from `cur` with backtrack direction `back`, find the next contour pixel and its backtrack
    let step = |cur: (isize, isize), back: usize| -> Option<((isize, isize), usize)> {
        for i in 1..=8 {
            let d = (back + i) % 8;
            let n = (cur.0 + MOORE[d].0, cur.1 + MOORE[d].1);
            if inside(n.0, n.1) {
                let p = (back + i - 1) % 8;
                let prev = (cur.0 + MOORE[p].0, cur.1 + MOORE[p].1);
                return Some((n, moore_index((prev.0 - n.0, prev.1 - n.1))));
            }
        }
        None
    };

    let mut points = vec![start];
    let Some(mut state) = step(start, 0) else {
        return Ok(Boundary { points: vec![(start.0 as usize, start.1 as usize)] });
    };
    let second = state.0;
    let limit = 4 * area + 8;
    while points.len() <= limit {
        let (cur, back) = state;
        let next = step(cur, back).expect("a connected component of area >= 4 has neighbours");
        // closed once the walk leaves the start toward the same second pixel
        if cur == start && next.0 == second {
            break;
        }
        points.push(cur);
        state = next;
    }
    Ok(Boundary { points: points.into_iter().map(|(x, y)| (x as usize, y as usize)).collect() })
}

/// Fourier coefficients `a(n) = (1/N) Σ z(k) e^{-j2πnk/N}` of `z(k) = x(k) + j y(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeDescriptor {
    pub coefficients: Vec<Complex64>,
}

impl ShapeDescriptor {
    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Coefficient at signed frequency `n`.
    pub fn at(&self, n: isize) -> Complex64 {
        let len = self.coefficients.len() as isize;
        self.coefficients[n.rem_euclid(len) as usize]
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "n,re,im")?;
        for (n, c) in self.coefficients.iter().enumerate() {
            writeln!(w, "{n},{},{}", c.re, c.im)?;
        }
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self, ShapeError> {
        let mut coefficients = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            if i == 0 && line.trim() == "n,re,im" {
                continue;
            }
            let err = |msg: &str| ShapeError::Parse { line: i + 1, msg: msg.into() };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [n, re, im] = cols[..] else {
                return Err(err("expected n,re,im"));
            };
            let n: usize = n.parse().map_err(|_| err("bad index"))?;
            if n != coefficients.len() {
                return Err(err("indices must be consecutive from 0"));
            }
            let re: f64 = re.parse().map_err(|_| err("bad real part"))?;
            let im: f64 = im.parse().map_err(|_| err("bad imaginary part"))?;
            coefficients.push(Complex64::new(re, im));
        }
        if coefficients.is_empty() {
            return Err(ShapeError::Parse { line: 0, msg: "no coefficients".into() });
        }
        Ok(Self { coefficients })
    }
}

pub fn fourier_descriptors(points: &[(f64, f64)]) -> Result<ShapeDescriptor, ShapeError> {
    if points.len() < 3 {
        return Err(ShapeError::InvalidParams(format!("need at least 3 boundary points, got {}", points.len())));
    }
    let n = points.len();
    let mut buf: Vec<Complex64> = points.iter().map(|&(x, y)| Complex64::new(x, y)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    Ok(ShapeDescriptor { coefficients: buf })
}

/// Signed frequencies kept when retaining `keep` coefficients: 0, +1, −1, +2, −2, …
pub fn kept_frequencies(keep: usize) -> Vec<isize> {
    (0..keep).map(|i| if i % 2 == 1 { (i / 2 + 1) as isize } else { -((i / 2) as isize) }).collect()
}

/// Inverse transform using only the `keep` lowest frequencies.
pub fn reconstruct_boundary(d: &ShapeDescriptor, keep: usize) -> Result<Vec<(f64, f64)>, ShapeError> {
    let n = d.len();
    if keep == 0 || keep > n {
        return Err(ShapeError::InvalidParams(format!("keep must be in 1..={n}, got {keep}")));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for f in kept_frequencies(keep) {
        let i = f.rem_euclid(n as isize) as usize;
        buf[i] = d.coefficients[i];
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    Ok(buf.iter().map(|c| (c.re, c.im)).collect())
}

/// Gradient-orientation energies on a 4×4 cell grid, L1-normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct GistVector {
    pub values: Vec<f64>,
    /// Set when the image has no gradient energy; `values` are then all zero.
    pub degenerate: bool,
}

impl GistVector {
    /// Index of cell `(cx, cy)`, orientation bin `o` (0°, 45°, 90°, 135°).
    pub fn index(cx: usize, cy: usize, o: usize) -> usize {
        (cy * GIST_CELLS + cx) * GIST_ORIENTATIONS + o
    }

    pub fn distance(&self, other: &GistVector) -> Result<f64, ShapeError> {
        if self.values.len() != other.values.len() {
            return Err(ShapeError::DimensionMismatch { expected: self.values.len(), got: other.values.len() });
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
    }

    /// `(1 - rate)·self + rate·other`.
    pub fn blend(&self, other: &GistVector, rate: f64) -> GistVector {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| (1.0 - rate) * a + rate * b).collect();
        GistVector { values, degenerate: self.degenerate && other.degenerate }
    }
}

pub fn gist(frame: &Frame) -> Result<GistVector, ShapeError> {
    let (w, h) = (frame.width(), frame.height());
    if w < 16 || h < 16 {
        return Err(ShapeError::FrameTooSmall(w, h));
    }
    let (gx, gy) = filter::gradients(frame.grid());
    let mut values = vec![0.0; GIST_LEN];
    let bin_width = std::f64::consts::PI / GIST_ORIENTATIONS as f64;
    for y in 0..h {
        let cy = y * GIST_CELLS / h;
        for x in 0..w {
            let cx = x * GIST_CELLS / w;
            let (dx, dy) = (gx.get(x, y), gy.get(x, y));
            let energy = dx * dx + dy * dy;
            if energy == 0.0 {
                continue;
            }
            let theta = dy.atan2(dx).rem_euclid(std::f64::consts::PI);
            let o = (theta / bin_width).round() as usize % GIST_ORIENTATIONS;
            values[GistVector::index(cx, cy, o)] += energy;
        }
    }
    let total: f64 = values.iter().sum();
    if total <= 1e-300 {
        return Ok(GistVector { values: vec![0.0; GIST_LEN], degenerate: true });
    }
    values.iter_mut().for_each(|v| *v /= total);
    Ok(GistVector { values, degenerate: false })
}

/// Whether `current` is farther than `theta` from `reference` (L2).
pub fn new_object_hit(current: &GistVector, reference: &GistVector, theta: f64) -> Result<bool, ShapeError> {
    Ok(current.distance(reference)? > theta)
}

/// Stateful change gate: an EMA reference that is reset to the current
/// signature whenever a hit fires, so one appearance yields one hit.
#[derive(Debug, Clone)]
pub struct GistGate {
    pub theta: f64,
    pub rate: f64,
    reference: Option<GistVector>,
}

impl GistGate {
    pub fn new(theta: f64) -> Self {
        Self { theta, rate: GIST_RATE, reference: None }
    }

    pub fn reference(&self) -> Option<&GistVector> {
        self.reference.as_ref()
    }

    /// Distance of `g` to the current reference, if any.
    pub fn distance(&self, g: &GistVector) -> Result<Option<f64>, ShapeError> {
        self.reference.as_ref().map(|r| g.distance(r)).transpose()
    }

    /// Feeds one frame's signature; returns whether it is a hit.
    pub fn observe(&mut self, g: &GistVector) -> Result<bool, ShapeError> {
        let Some(reference) = &self.reference else {
            self.reference = Some(g.clone());
            return Ok(false);
        };
        let hit = new_object_hit(g, reference, self.theta)?;
        self.reference = Some(if hit { g.clone() } else { reference.blend(g, self.rate) });
        Ok(hit)
    }
}

/// Threshold from a change-free prefix: mean plus three standard deviations
/// of the distances between each signature and the running reference.
pub fn calibrate_theta(prefix: &[GistVector]) -> Result<f64, ShapeError> {
    if prefix.len() < 3 {
        return Err(ShapeError::InvalidParams(format!("calibration needs at least 3 frames, got {}", prefix.len())));
    }
    let mut gate = GistGate::new(f64::INFINITY);
    let mut dists = Vec::with_capacity(prefix.len() - 1);
    for g in prefix {
        if let Some(d) = gate.distance(g)? {
            dists.push(d);
        }
        gate.observe(g)?;
    }
    Ok(stats::mean(&dists) + 3.0 * stats::std_dev(&dists))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order() {
        assert_eq!(kept_frequencies(5), vec![0, 1, -1, 2, -2]);
        assert_eq!(kept_frequencies(1), vec![0]);
    }

    #[test]
    fn open_removes_speckle() {
        let m = BinaryMask::from_fn(10, 10, |x, y| (x, y) == (2, 2) || (5..9).contains(&x) && (5..9).contains(&y));
        let o = m.open();
        assert!(!o.get(2, 2));
        assert_eq!(o.count(), 16);
    }

    #[test]
    fn gate_needs_reference() {
        let mut gate = GistGate::new(0.0);
        let g = GistVector { values: vec![0.1; GIST_LEN], degenerate: false };
        assert!(!gate.observe(&g).unwrap());
        assert!(!gate.observe(&g).unwrap());
    }
}
