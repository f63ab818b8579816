//! Dense two-frame optical flow by polynomial expansion, plus flow algebra.
//!
//! Each pixel neighbourhood is approximated by a quadratic polynomial
//! `x^T A x + b^T x + c` fitted with a Gaussian applicability. A displacement
//! `d` between two frames shows up as `b2 = b1 - 2 A d`; the per-pixel
//! equations are averaged over a Gaussian window and solved coarse to fine.
//!
//! Convention: the returned field satisfies `next(x + u, y + v) ≈ prev(x, y)`.

use std::io::{BufRead, Write};
use std::path::Path;

use log::warn;
use nalgebra::{Matrix6, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::filter::{gaussian_kernel, pyr_down, separable};
use crate::image::{bilinear, FlowField, Frame, Grid, ImageError};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(#[from] ImageError),
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error("flow file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Parameters of [`estimate_flow`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    /// Pyramid levels including full resolution.
    pub levels: usize,
    /// Side of the Gaussian window averaging the displacement equations (odd, ≥ 5).
    pub window: usize,
    /// Side of the polynomial-expansion neighbourhood (odd, ≥ 5).
    pub poly_window: usize,
    /// Refinement passes per pyramid level.
    pub iterations: usize,
    /// Component bound; `None` means a quarter of the shorter frame side.
    pub max_displacement: Option<f64>,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self { levels: 3, window: 15, poly_window: 7, iterations: 3, max_displacement: None }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.levels < 1 {
            return Err(FlowError::InvalidParams("levels must be >= 1".into()));
        }
        for (name, w) in [("window", self.window), ("poly_window", self.poly_window)] {
            if w < 5 || w % 2 == 0 {
                return Err(FlowError::InvalidParams(format!("{name} must be odd and >= 5, got {w}")));
            }
        }
        if self.iterations < 1 {
            return Err(FlowError::InvalidParams("iterations must be >= 1".into()));
        }
        if let Some(m) = self.max_displacement {
            if !(m > 0.0) {
                return Err(FlowError::InvalidParams("max_displacement must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Result of [`estimate_flow`] with its warning flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowEstimate {
    pub flow: FlowField,
    /// One of the frames had zero variance; the field is all zeros.
    pub degenerate: bool,
    /// Number of pixels whose displacement hit the `max_displacement` bound.
    pub clamped: usize,
}

/// Quadratic-model coefficient planes of one image.
struct Expansion {
    width: usize,
    height: usize,
    bx: Vec<f64>,
    by: Vec<f64>,
    axx: Vec<f64>,
    ayy: Vec<f64>,
    axy: Vec<f64>,
}

/// Dual filters mapping a neighbourhood to the 6 polynomial coefficients
/// `[c, bx, by, axx, ayy, 2·axy]`.
fn expansion_filters(size: usize) -> Vec<[f64; 6]> {
    let r = (size / 2) as isize;
    let sigma = size as f64 / 5.0;
    let mut g = Matrix6::<f64>::zeros();
    let mut taps = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            let (fx, fy) = (dx as f64, dy as f64);
            let a = (-(fx * fx + fy * fy) / (2.0 * sigma * sigma)).exp();
            let b = Vector6::new(1.0, fx, fy, fx * fx, fy * fy, fx * fy);
            g += a * b * b.transpose();
            taps.push((a, b));
        }
    }
    let g_inv = g.try_inverse().expect("applicability normal matrix is positive definite");
    taps.into_iter()
        .map(|(a, b)| {
            let d = g_inv * (a * b);
            [d[0], d[1], d[2], d[3], d[4], d[5]]
        })
        .collect()
}

fn expand(grid: &Grid, filters: &[[f64; 6]], size: usize) -> Expansion {
    let (w, h) = (grid.width(), grid.height());
    let r = (size / 2) as isize;
    let rows: Vec<Vec<[f64; 5]>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let mut acc = [0.0; 6];
                let mut t = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let f = grid.get_clamped(x as isize + dx, y as isize + dy);
                        let d = &filters[t];
                        for k in 1..6 {
                            acc[k] += d[k] * f;
                        }
                        t += 1;
                    }
                }
                row.push([acc[1], acc[2], acc[3], acc[4], acc[5] * 0.5]);
            }
            row
        })
        .collect();
    let n = w * h;
    let mut e = Expansion {
        width: w,
        height: h,
        bx: Vec::with_capacity(n),
        by: Vec::with_capacity(n),
        axx: Vec::with_capacity(n),
        ayy: Vec::with_capacity(n),
        axy: Vec::with_capacity(n),
    };
    for c in rows.into_iter().flatten() {
        e.bx.push(c[0]);
        e.by.push(c[1]);
        e.axx.push(c[2]);
        e.ayy.push(c[3]);
        e.axy.push(c[4]);
    }
    e
}

/// Regularization pulling ill-conditioned pixels toward the prior estimate.
const PRIOR_WEIGHT: f64 = 1e-6;

fn refine(e1: &Expansion, e2: &Expansion, u: &mut [f64], v: &mut [f64], avg_kernel: &[f64]) {
    let (w, h) = (e1.width, e1.height);
    let n = w * h;
    let mut planes = vec![vec![0.0; n]; 5];
    {
        let (g11, rest) = planes.split_at_mut(1);
        let (g12, rest) = rest.split_at_mut(1);
        let (g22, rest) = rest.split_at_mut(1);
        let (h1, h2) = rest.split_at_mut(1);
        g11[0]
            .par_chunks_mut(w)
            .zip(g12[0].par_chunks_mut(w))
            .zip(g22[0].par_chunks_mut(w))
            .zip(h1[0].par_chunks_mut(w))
            .zip(h2[0].par_chunks_mut(w))
            .enumerate()
            .for_each(|(y, ((((r11, r12), r22), rh1), rh2))| {
                for x in 0..w {
                    let i = y * w + x;
                    let (du, dv) = (u[i], v[i]);
                    let qx = x as f64 + du;
                    let qy = y as f64 + dv;
                    let s = |p: &[f64]| bilinear(p, w, h, qx, qy);
                    let a11 = 0.5 * (e1.axx[i] + s(&e2.axx));
                    let a22 = 0.5 * (e1.ayy[i] + s(&e2.ayy));
                    let a12 = 0.5 * (e1.axy[i] + s(&e2.axy));
                    let db1 = -0.5 * (s(&e2.bx) - e1.bx[i]) + a11 * du + a12 * dv;
                    let db2 = -0.5 * (s(&e2.by) - e1.by[i]) + a12 * du + a22 * dv;
                    r11[x] = a11 * a11 + a12 * a12;
                    r12[x] = a11 * a12 + a12 * a22;
                    r22[x] = a12 * a12 + a22 * a22;
                    rh1[x] = a11 * db1 + a12 * db2;
                    rh2[x] = a12 * db1 + a22 * db2;
                }
            });
    }
    let avg: Vec<Vec<f64>> = planes.par_iter().map(|p| separable(p, w, h, avg_kernel)).collect();
    let mean_trace = avg[0].iter().zip(&avg[2]).map(|(a, b)| a + b).sum::<f64>() / n as f64;
    let eps = PRIOR_WEIGHT * mean_trace.max(1e-12);
    u.par_iter_mut().zip(v.par_iter_mut()).enumerate().for_each(|(i, (ui, vi))| {
        let g11 = avg[0][i] + eps;
        let g12 = avg[1][i];
        let g22 = avg[2][i] + eps;
        let h1 = avg[3][i] + eps * *ui;
        let h2 = avg[4][i] + eps * *vi;
        let det = g11 * g22 - g12 * g12;
        if det.abs() > f64::MIN_POSITIVE && det.is_finite() {
            *ui = (g22 * h1 - g12 * h2) / det;
            *vi = (g11 * h2 - g12 * h1) / det;
        }
    });
}

/// Coarse-to-fine dense flow from `prev` to `next`.
pub fn estimate_flow(prev: &Frame, next: &Frame, params: &FlowParams) -> Result<FlowEstimate, FlowError> {
    params.validate()?;
    let (w, h) = (prev.width(), prev.height());
    if !prev.grid().same_dims(next.grid()) {
        return Err(ImageError::DimensionMismatch {
            a_w: w,
            a_h: h,
            b_w: next.width(),
            b_h: next.height(),
        }
        .into());
    }
    if prev.variance() < 1e-14 || next.variance() < 1e-14 {
        warn!("degenerate frame (zero variance); returning a zero flow field");
        return Ok(FlowEstimate { flow: FlowField::zeros(w, h), degenerate: true, clamped: 0 });
    }

    let mut pyr1 = vec![prev.grid().clone()];
    let mut pyr2 = vec![next.grid().clone()];
    while pyr1.len() < params.levels {
        let last = pyr1.last().unwrap();
        if last.width().min(last.height()) / 2 < 16 {
            break;
        }
        let d1 = pyr_down(last);
        let d2 = pyr_down(pyr2.last().unwrap());
        pyr1.push(d1);
        pyr2.push(d2);
    }

    let filters = expansion_filters(params.poly_window);
    let sigma = params.window as f64 / 5.0;
    let avg_kernel = gaussian_kernel(sigma, params.window / 2);

    let mut u: Vec<f64> = Vec::new();
    let mut v: Vec<f64> = Vec::new();
    let mut lw = 0;
    let mut lh = 0;
    for level in (0..pyr1.len()).rev() {
        let (g1, g2) = (&pyr1[level], &pyr2[level]);
        let (cw, ch) = (g1.width(), g1.height());
        if u.is_empty() {
            u = vec![0.0; cw * ch];
            v = vec![0.0; cw * ch];
        } else {
            let mut nu = Vec::with_capacity(cw * ch);
            let mut nv = Vec::with_capacity(cw * ch);
            for y in 0..ch {
                for x in 0..cw {
                    let (sx, sy) = (x as f64 / 2.0, y as f64 / 2.0);
                    nu.push(2.0 * bilinear(&u, lw, lh, sx, sy));
                    nv.push(2.0 * bilinear(&v, lw, lh, sx, sy));
                }
            }
            u = nu;
            v = nv;
        }
        let e1 = expand(g1, &filters, params.poly_window);
        let e2 = expand(g2, &filters, params.poly_window);
        for _ in 0..params.iterations {
            refine(&e1, &e2, &mut u, &mut v, &avg_kernel);
        }
        lw = cw;
        lh = ch;
    }

    let bound = params.max_displacement.unwrap_or(0.25 * w.min(h) as f64);
    let mut clamped = 0;
    for c in u.iter_mut().chain(v.iter_mut()) {
        if !c.is_finite() {
            *c = 0.0;
            clamped += 1;
        } else if c.abs() > bound {
            *c = c.signum() * bound;
            clamped += 1;
        }
    }
    if clamped > 0 {
        warn!("{clamped} flow components clamped to ±{bound}");
    }
    let flow = FlowField::new(w, h, u, v).expect("flow dims match frame");
    Ok(FlowEstimate { flow, degenerate: false, clamped })
}

/// Samples `frame` at `(x + u, y + v)` for every pixel.
pub fn warp(frame: &Frame, flow: &FlowField) -> Result<Frame, FlowError> {
    flow.check_dims(frame.width(), frame.height())?;
    let g = frame.grid();
    let data: Vec<f64> = (0..frame.height())
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..frame.width()).map(move |x| {
                let (du, dv) = flow.get(x, y);
                g.sample(x as f64 + du, y as f64 + dv)
            })
        })
        .collect();
    let grid = Grid::new(frame.width(), frame.height(), data).expect("dims");
    Ok(Frame::from_grid_unchecked(grid))
}

/// `first` followed by `second`: `first(p) + second(p + first(p))`.
pub fn compose(first: &FlowField, second: &FlowField) -> Result<FlowField, FlowError> {
    second.check_dims(first.width(), first.height())?;
    Ok(FlowField::from_fn(first.width(), first.height(), |x, y| {
        let (u1, v1) = first.get(x, y);
        let (u2, v2) = second.sample(x as f64 + u1, y as f64 + v1);
        (u1 + u2, v1 + v2)
    }))
}

pub fn write_flow(w: &mut impl Write, flow: &FlowField) -> std::io::Result<()> {
    writeln!(w, "FLOW2 {} {}", flow.width(), flow.height())?;
    for (u, v) in flow.u().iter().zip(flow.v()) {
        writeln!(w, "{u} {v}")?;
    }
    Ok(())
}

pub fn read_flow(r: impl BufRead) -> Result<FlowField, FlowError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| FlowError::Format("empty file".into()))??;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("FLOW2") {
        return Err(FlowError::Format("missing FLOW2 header".into()));
    }
    let mut dim = || -> Result<usize, FlowError> {
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| FlowError::Format("bad dimensions in header".into()))
    };
    let (w, h) = (dim()?, dim()?);
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(|s| s.parse::<f64>());
        match (it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b))) => {
                u.push(a);
                v.push(b);
            }
            _ => return Err(FlowError::Format(format!("bad flow line {:?}", line))),
        }
    }
    if u.len() != w * h {
        return Err(FlowError::Format(format!("expected {} vectors, found {}", w * h, u.len())));
    }
    Ok(FlowField::new(w, h, u, v)?)
}

pub fn save_flow(path: &Path, flow: &FlowField) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_flow(&mut f, flow)?;
    f.flush()
}

pub fn load_flow(path: &Path) -> Result<FlowField, FlowError> {
    let f = std::fs::File::open(path)?;
    read_flow(std::io::BufReader::new(f))
}

/// HSV rendering: hue encodes direction, value encodes magnitude relative to the maximum.
pub fn visualize(flow: &FlowField) -> Vec<u8> {
    let max_mag = flow
        .u()
        .iter()
        .zip(flow.v())
        .map(|(u, v)| u.hypot(*v))
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let mut rgb = Vec::with_capacity(flow.u().len() * 3);
    for (u, v) in flow.u().iter().zip(flow.v()) {
        let hue = (v.atan2(*u).to_degrees() + 360.0) % 360.0;
        let val = u.hypot(*v) / max_mag;
        let [r, g, b] = hsv_to_rgb(hue, 1.0, val);
        rgb.extend_from_slice(&[r, g, b]);
    }
    rgb
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}
