//! Instantaneous-motion model of a multi-camera rig and ego-motion recovery.
//!
//! A scene point `r` seen from a rig moving with translation `T` and angular
//! velocity `ω` has velocity `-T - ω × r`. Camera `k`, mounted at `s_k` with
//! rotation `m_k` (rig → camera), therefore moves with
//! `t_k = m_k (ω × s_k + T)` and `ω_k = m_k ω`. Its image flow at normalized
//! coordinates `(x, y)` and depth `Z` is
//!
//! ```text
//! u = (-t_x + x t_z) / Z + x y ω_x - (1 + x²) ω_y + y ω_z
//! v = (-t_y + y t_z) / Z + (1 + y²) ω_x - x y ω_y - x ω_z
//! ```
//!
//! Estimation correlates opposing cameras' mean flows for a seed, then runs
//! Levenberg–Marquardt over every pixel of every camera.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::image::{FlowField, Grid, ImageError};
use crate::lm::{self, LmOptions, Normal, Termination};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Error)]
pub enum EgoError {
    #[error("camera index {index} out of range (rig has {count})")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("depth must be strictly positive and finite (pixel {index} is {value})")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error(transparent)]
    DimensionMismatch(#[from] ImageError),
    #[error("both mean flows are below {0} px; motion cannot be classified")]
    DegenerateFlow(f64),
    #[error("need one flow per camera and at least 2 cameras, got {flows} flows for {cameras} cameras")]
    TooFewCameras { flows: usize, cameras: usize },
    #[error("least-squares refinement diverged after {iterations} iterations")]
    SolverDiverged { iterations: usize },
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("rig file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace frame {got} does not follow {last}")]
    NonMonotonicFrame { last: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Rig-relative velocity of a point at `r`.
pub fn velocity_of_point(r: &Vec3, translation: &Vec3, rotation: &Vec3) -> Vec3 {
    -translation - rotation.cross(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Offset from the rig origin, scene units.
    pub position: Vec3,
    /// Rig-to-camera rotation; rows are the camera axes in rig coordinates.
    pub orientation: Mat3,
    /// Focal length, pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera looking along `facing` (rig frame) with image "up" along rig +z.
    pub fn facing(facing: Vec3, position: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let z = facing.normalize();
        let y = -Vec3::z();
        let x = y.cross(&z);
        let orientation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self { position, orientation, focal, width, height }
    }

    fn principal_point(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Normalized image coordinates of pixel `(px, py)`.
    pub fn normalized(&self, px: usize, py: usize) -> (f64, f64) {
        let (cx, cy) = self.principal_point();
        ((px as f64 - cx) / self.focal, (py as f64 - cy) / self.focal)
    }
}

/// Camera placements of a rig. Cameras `2i` and `2i + 1` form opposing pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RigConfig {
    cameras: Vec<Camera>,
}

impl RigConfig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self, EgoError> {
        if cameras.len() < 2 {
            return Err(EgoError::InvalidRig(format!("need at least 2 cameras, got {}", cameras.len())));
        }
        for (k, c) in cameras.iter().enumerate() {
            let err = (c.orientation.transpose() * c.orientation - Mat3::identity()).amax();
            if err > 1e-9 {
                return Err(EgoError::InvalidRig(format!("camera {k} orientation is not orthonormal (error {err:e})")));
            }
            if !(c.focal > 0.0) || c.width < 2 || c.height < 2 {
                return Err(EgoError::InvalidRig(format!("camera {k} needs positive focal length and size")));
            }
        }
        Ok(Self { cameras })
    }

    /// Two opposing pairs facing ±x and ±y, each mounted one unit out along its axis.
    pub fn four_camera(width: usize, height: usize, focal: f64) -> Self {
        let axes = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y()];
        Self { cameras: axes.iter().map(|a| Camera::facing(*a, *a, focal, width, height)).collect() }
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, k: usize) -> Result<&Camera, EgoError> {
        self.cameras.get(k).ok_or(EgoError::IndexOutOfRange { index: k, count: self.cameras.len() })
    }

    pub fn opposing_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.cameras.len() / 2).map(|i| (2 * i, 2 * i + 1)).collect()
    }

    /// Parses `camera.N.s = x y z`, `camera.N.m = <9 floats>`, `camera.N.focal = f`
    /// and `camera.N.size = w h`. Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, EgoError> {
        #[derive(Default)]
        struct Partial {
            s: Option<Vec3>,
            m: Option<Mat3>,
            focal: Option<f64>,
            size: Option<(usize, usize)>,
        }
        let mut parts: BTreeMap<usize, Partial> = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| EgoError::Parse { line: ln + 1, msg };
            let (key, value) = line.split_once('=').ok_or_else(|| perr("expected key = value".into()))?;
            let mut kp = key.trim().split('.');
            let (Some("camera"), Some(idx), Some(field), None) = (kp.next(), kp.next(), kp.next(), kp.next()) else {
                return Err(perr(format!("unknown key {:?}", key.trim())));
            };
            let idx: usize = idx.parse().map_err(|_| perr(format!("bad camera index {idx:?}")))?;
            let nums: Vec<f64> = value
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| perr(format!("non-numeric value {:?}", value.trim())))?;
            let p = parts.entry(idx).or_default();
            match (field, nums.len()) {
                ("s", 3) => p.s = Some(Vec3::new(nums[0], nums[1], nums[2])),
                ("m", 9) => p.m = Some(Mat3::from_row_slice(&nums)),
                ("focal", 1) => p.focal = Some(nums[0]),
                ("size", 2) => p.size = Some((nums[0] as usize, nums[1] as usize)),
                (f, n) => return Err(perr(format!("field {f:?} with {n} values"))),
            }
        }
        let mut cameras = Vec::new();
        for (expect, (idx, p)) in parts.into_iter().enumerate() {
            if idx != expect {
                return Err(EgoError::InvalidRig(format!("camera indices must be contiguous from 0, missing {expect}")));
            }
            let missing = |f: &str| EgoError::InvalidRig(format!("camera {idx} is missing `{f}`"));
            let (width, height) = p.size.unwrap_or((64, 48));
            cameras.push(Camera {
                position: p.s.ok_or_else(|| missing("s"))?,
                orientation: p.m.ok_or_else(|| missing("m"))?,
                focal: p.focal.ok_or_else(|| missing("focal"))?,
                width,
                height,
            });
        }
        Self::new(cameras)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, c) in self.cameras.iter().enumerate() {
            let s = c.position;
            let _ = writeln!(out, "camera.{k}.s = {} {} {}", s.x, s.y, s.z);
            let m: Vec<String> = (0..3).flat_map(|r| (0..3).map(move |col| (r, col))).map(|(r, col)| c.orientation[(r, col)].to_string()).collect();
            let _ = writeln!(out, "camera.{k}.m = {}", m.join(" "));
            let _ = writeln!(out, "camera.{k}.focal = {}", c.focal);
            let _ = writeln!(out, "camera.{k}.size = {} {}", c.width, c.height);
        }
        out
    }
}

/// Translation and angular velocity of a camera mounted on the rig.
pub fn camera_motion(rig: &RigConfig, k: usize, translation: &Vec3, rotation: &Vec3) -> Result<(Vec3, Vec3), EgoError> {
    let cam = rig.camera(k)?;
    Ok((cam.orientation * (rotation.cross(&cam.position) + translation), cam.orientation * rotation))
}

/// Normalized image velocity of the instantaneous model.
#[inline]
fn model_flow(x: f64, y: f64, inv_depth: f64, t: &Vec3, w: &Vec3) -> (f64, f64) {
    let u = (-t.x + x * t.z) * inv_depth + x * y * w.x - (1.0 + x * x) * w.y + y * w.z;
    let v = (-t.y + y * t.z) * inv_depth + (1.0 + y * y) * w.x - x * y * w.y - x * w.z;
    (u, v)
}

fn check_depth(depth: &Grid, cam: &Camera) -> Result<(), EgoError> {
    if depth.width() != cam.width || depth.height() != cam.height {
        return Err(ImageError::DimensionMismatch { a_w: depth.width(), a_h: depth.height(), b_w: cam.width, b_h: cam.height }.into());
    }
    if let Some((index, &value)) = depth.data().iter().enumerate().find(|(_, d)| !(d.is_finite() && **d > 0.0)) {
        return Err(EgoError::NonPositiveDepth { index, value });
    }
    Ok(())
}

/// Flow (pixels) camera `k` observes for rig motion `(T, ω)` over a per-pixel depth map.
pub fn synthesize_flow(rig: &RigConfig, k: usize, translation: &Vec3, rotation: &Vec3, depth: &Grid) -> Result<FlowField, EgoError> {
    let cam = rig.camera(k)?;
    check_depth(depth, cam)?;
    let (t, w) = camera_motion(rig, k, translation, rotation)?;
    Ok(FlowField::from_fn(cam.width, cam.height, |px, py| {
        let (x, y) = cam.normalized(px, py);
        let (u, v) = model_flow(x, y, 1.0 / depth.get(px, py), &t, &w);
        (cam.focal * u, cam.focal * v)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionClass {
    Translational,
    Rotational,
    Mixed,
}

/// Mean flows below this magnitude (pixels) count as no motion.
pub const DEGENERATE_FLOW: f64 = 1e-9;

/// Opposing-camera test: equal and opposite mean flows mean translation,
/// equal and aligned mean flows mean rotation.
pub fn classify_motion(flow_a: &FlowField, flow_b: &FlowField) -> Result<MotionClass, EgoError> {
    flow_b.check_dims(flow_a.width(), flow_a.height())?;
    let (ax, ay) = flow_a.mean();
    let (bx, by) = flow_b.mean();
    let na = ax.hypot(ay);
    let nb = bx.hypot(by);
    if na < DEGENERATE_FLOW && nb < DEGENERATE_FLOW {
        return Err(EgoError::DegenerateFlow(DEGENERATE_FLOW));
    }
    if na < DEGENERATE_FLOW || nb < DEGENERATE_FLOW {
        return Ok(MotionClass::Mixed);
    }
    let cos = (ax * bx + ay * by) / (na * nb);
    let ratio = na / nb;
    let similar = (0.8..=1.25).contains(&ratio);
    Ok(if similar && -cos > 0.9 {
        MotionClass::Translational
    } else if similar && cos > 0.9 {
        MotionClass::Rotational
    } else {
        MotionClass::Mixed
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionEstimate {
    /// Rig translation per frame; unit length when `scale_known` is false.
    pub translation: Vec3,
    /// Rig angular velocity, radians per frame.
    pub rotation: Vec3,
    /// True iff depth was supplied.
    pub scale_known: bool,
}

impl MotionEstimate {
    pub fn zero(scale_known: bool) -> Self {
        Self { translation: Vec3::zeros(), rotation: Vec3::zeros(), scale_known }
    }
}

/// Per-pixel Jacobian rows of the normalized flow w.r.t. the rig parameters `(T, ω)`.
struct PixelModel {
    /// d(t_k, ω_k) / d(T, ω): 6×6 block for this camera.
    chain: SMatrix<f64, 6, 6>,
}

impl PixelModel {
    fn new(cam: &Camera) -> Self {
        let m = cam.orientation;
        let s = cam.position;
        // ω × s = -[s]× ω
        let s_cross = Mat3::new(0.0, -s.z, s.y, s.z, 0.0, -s.x, -s.y, s.x, 0.0);
        let mut chain = SMatrix::<f64, 6, 6>::zeros();
        chain.fixed_view_mut::<3, 3>(0, 0).copy_from(&m);
        chain.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-m * s_cross));
        chain.fixed_view_mut::<3, 3>(3, 3).copy_from(&m);
        Self { chain }
    }
}

/// Rows `[du/d(t,ω_k); dv/d(t,ω_k)]` of the camera-local model.
#[inline]
fn local_jacobian(x: f64, y: f64, inv_depth: f64) -> SMatrix<f64, 2, 6> {
    SMatrix::<f64, 2, 6>::new(
        -inv_depth, 0.0, x * inv_depth, x * y, -(1.0 + x * x), y,
        0.0, -inv_depth, y * inv_depth, 1.0 + y * y, -x * y, -x,
    )
}

fn validate_inputs<'a>(flows: &[FlowField], rig: &RigConfig, depth: Option<&'a [Grid]>) -> Result<Option<&'a [Grid]>, EgoError> {
    if flows.len() != rig.len() || rig.len() < 2 {
        return Err(EgoError::TooFewCameras { flows: flows.len(), cameras: rig.len() });
    }
    for (f, c) in flows.iter().zip(rig.cameras()) {
        f.check_dims(c.width, c.height)?;
    }
    if let Some(d) = depth {
        if d.len() != rig.len() {
            return Err(EgoError::TooFewCameras { flows: d.len(), cameras: rig.len() });
        }
        for (g, c) in d.iter().zip(rig.cameras()) {
            check_depth(g, c)?;
        }
    }
    Ok(depth)
}

/// Seed from mean flows: each opposing pair contributes the half-sum of its
/// mean-flow equations (the common, rotation-dominated component) and the
/// half-difference (the opposed, translation-dominated component).
fn polar_correlation_seed(flows: &[FlowField], rig: &RigConfig, depth: Option<&[Grid]>) -> SVector<f64, 6> {
    let mut rows: Vec<(SMatrix<f64, 2, 6>, nalgebra::Vector2<f64>)> = Vec::new();
    for (k, (flow, cam)) in flows.iter().zip(rig.cameras()).enumerate() {
        let chain = PixelModel::new(cam).chain;
        let mut jac = SMatrix::<f64, 2, 6>::zeros();
        let mut obs = nalgebra::Vector2::zeros();
        let n = (cam.width * cam.height) as f64;
        for py in 0..cam.height {
            for px in 0..cam.width {
                let (x, y) = cam.normalized(px, py);
                let inv = depth.map_or(1.0, |d| 1.0 / d[k].get(px, py));
                jac += local_jacobian(x, y, inv) * chain;
                let (u, v) = flow.get(px, py);
                obs += nalgebra::Vector2::new(u, v) / cam.focal;
            }
        }
        rows.push((jac / n, obs / n));
    }
    let mut eqs: Vec<(SMatrix<f64, 2, 6>, nalgebra::Vector2<f64>)> = Vec::new();
    let mut used = vec![false; rows.len()];
    for (a, b) in rig.opposing_pairs() {
        let (ja, oa) = rows[a];
        let (jb, ob) = rows[b];
        eqs.push(((ja + jb) * 0.5, (oa + ob) * 0.5));
        eqs.push(((ja - jb) * 0.5, (oa - ob) * 0.5));
        used[a] = true;
        used[b] = true;
    }
    for (k, r) in rows.iter().enumerate() {
        if !used[k] {
            eqs.push(*r);
        }
    }
    let mut a = DMatrix::<f64>::zeros(2 * eqs.len(), 6);
    let mut b = DVector::<f64>::zeros(2 * eqs.len());
    for (i, (j, o)) in eqs.iter().enumerate() {
        for c in 0..6 {
            a[(2 * i, c)] = j[(0, c)];
            a[(2 * i + 1, c)] = j[(1, c)];
        }
        b[2 * i] = o[0];
        b[2 * i + 1] = o[1];
    }
    let svd = a.svd(true, true);
    match svd.solve(&b, 1e-12) {
        Ok(x) if x.iter().all(|v| v.is_finite()) => SVector::<f64, 6>::from_iterator(x.iter().copied()),
        _ => SVector::zeros(),
    }
}

/// Normal equations of the depth-known problem (linear in `(T, ω)`).
fn known_depth_normal(p: &SVector<f64, 6>, flows: &[FlowField], rig: &RigConfig, depth: &[Grid]) -> Normal<6> {
    let mut jtj = SMatrix::<f64, 6, 6>::zeros();
    let mut jtr = SVector::<f64, 6>::zeros();
    let mut cost = 0.0;
    for (k, (flow, cam)) in flows.iter().zip(rig.cameras()).enumerate() {
        let chain = PixelModel::new(cam).chain;
        let local = chain * p;
        let t = Vec3::new(local[0], local[1], local[2]);
        let w = Vec3::new(local[3], local[4], local[5]);
        let mut cam_jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut cam_jtr = SVector::<f64, 6>::zeros();
        for py in 0..cam.height {
            for px in 0..cam.width {
                let (x, y) = cam.normalized(px, py);
                let inv = 1.0 / depth[k].get(px, py);
                let (mu, mv) = model_flow(x, y, inv, &t, &w);
                let (ou, ov) = flow.get(px, py);
                let r = nalgebra::Vector2::new(cam.focal * mu - ou, cam.focal * mv - ov);
                let j = local_jacobian(x, y, inv) * cam.focal;
                cam_jtj += j.transpose() * j;
                cam_jtr += j.transpose() * r;
                cost += 0.5 * r.norm_squared();
            }
        }
        jtj += chain.transpose() * cam_jtj * chain;
        jtr += chain.transpose() * cam_jtr;
    }
    Normal { cost, jtj, jtr }
}

/// Depth-free residual: distance of the derotated flow from the translational
/// direction `A(x) t_k`, i.e. the residual after the per-pixel depth is optimized out.
fn unknown_depth_residuals(p: &SVector<f64, 6>, flows: &[FlowField], rig: &RigConfig, out: &mut Vec<f64>) {
    out.clear();
    for (flow, cam) in flows.iter().zip(rig.cameras()) {
        let local = PixelModel::new(cam).chain * p;
        let t = Vec3::new(local[0], local[1], local[2]);
        let w = Vec3::new(local[3], local[4], local[5]);
        for py in 0..cam.height {
            for px in 0..cam.width {
                let (x, y) = cam.normalized(px, py);
                let (ru, rv) = model_flow(x, y, 0.0, &t, &w);
                let (ou, ov) = flow.get(px, py);
                let (du, dv) = (ou / cam.focal - ru, ov / cam.focal - rv);
                let (ax, ay) = (-t.x + x * t.z, -t.y + y * t.z);
                let norm = (ax * ax + ay * ay + 1e-18).sqrt();
                out.push(cam.focal * (-ay * du + ax * dv) / norm);
            }
        }
    }
}

fn unknown_depth_normal(p: &SVector<f64, 6>, flows: &[FlowField], rig: &RigConfig) -> Normal<6> {
    let mut r0 = Vec::new();
    unknown_depth_residuals(p, flows, rig, &mut r0);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(6);
    let mut rp = Vec::new();
    let mut rm = Vec::new();
    for i in 0..6 {
        let h = 1e-7 * (1.0 + p[i].abs());
        let mut pp = *p;
        pp[i] += h;
        let mut pm = *p;
        pm[i] -= h;
        unknown_depth_residuals(&pp, flows, rig, &mut rp);
        unknown_depth_residuals(&pm, flows, rig, &mut rm);
        cols.push(rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    let mut jtj = SMatrix::<f64, 6, 6>::zeros();
    let mut jtr = SVector::<f64, 6>::zeros();
    for a in 0..6 {
        for b in a..6 {
            let s: f64 = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
            jtj[(a, b)] = s;
            jtj[(b, a)] = s;
        }
        jtr[a] = cols[a].iter().zip(&r0).map(|(x, y)| x * y).sum();
    }
    Normal { cost: 0.5 * r0.iter().map(|r| r * r).sum::<f64>(), jtj, jtr }
}

/// Fraction of pixels whose implied inverse depth is positive.
fn positive_depth_fraction(p: &SVector<f64, 6>, flows: &[FlowField], rig: &RigConfig) -> f64 {
    let mut pos = 0usize;
    let mut total = 0usize;
    for (flow, cam) in flows.iter().zip(rig.cameras()) {
        let local = PixelModel::new(cam).chain * p;
        let t = Vec3::new(local[0], local[1], local[2]);
        let w = Vec3::new(local[3], local[4], local[5]);
        for py in 0..cam.height {
            for px in 0..cam.width {
                let (x, y) = cam.normalized(px, py);
                let (ru, rv) = model_flow(x, y, 0.0, &t, &w);
                let (ou, ov) = flow.get(px, py);
                let (ax, ay) = (-t.x + x * t.z, -t.y + y * t.z);
                let rho = ax * (ou / cam.focal - ru) + ay * (ov / cam.focal - rv);
                if rho.abs() > 1e-15 {
                    total += 1;
                    if rho > 0.0 {
                        pos += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        pos as f64 / total as f64
    }
}

/// Details of an estimation run, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct EgoSolve {
    pub estimate: MotionEstimate,
    pub seed: MotionEstimate,
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

pub fn estimate_egomotion(flows: &[FlowField], rig: &RigConfig, depth: Option<&[Grid]>) -> Result<MotionEstimate, EgoError> {
    estimate_egomotion_detailed(flows, rig, depth).map(|s| s.estimate)
}

pub fn estimate_egomotion_detailed(flows: &[FlowField], rig: &RigConfig, depth: Option<&[Grid]>) -> Result<EgoSolve, EgoError> {
    let depth = validate_inputs(flows, rig, depth)?;
    let scale_known = depth.is_some();
    let split = |p: &SVector<f64, 6>| (Vec3::new(p[0], p[1], p[2]), Vec3::new(p[3], p[4], p[5]));

    if flows.iter().all(|f| f.max_abs() == 0.0) {
        let zero = MotionEstimate::zero(scale_known);
        return Ok(EgoSolve { estimate: zero, seed: zero, cost_history: vec![0.0], iterations: 0 });
    }

    let seed = polar_correlation_seed(flows, rig, depth);
    let (st, sw) = split(&seed);
    let seed_est = MotionEstimate { translation: st, rotation: sw, scale_known };
    let opts = LmOptions::default();

    let report = match depth {
        Some(d) => lm::minimize(seed, |p| known_depth_normal(p, flows, rig, d), &opts),
        None => {
            let mut start = seed;
            if start.fixed_rows::<3>(0).norm() < 1e-12 {
                start[2] = 1.0;
            }
            let mut rep = lm::minimize(start, |p| unknown_depth_normal(p, flows, rig), &opts);
            if rep.termination != Termination::Diverged && positive_depth_fraction(&rep.params, flows, rig) < 0.5 {
                let mut flipped = rep.params;
                for i in 0..3 {
                    flipped[i] = -flipped[i];
                }
                let mut history = rep.cost_history.clone();
                let rerun = lm::minimize(flipped, |p| unknown_depth_normal(p, flows, rig), &opts);
                history.extend(rerun.cost_history.iter().skip(1));
                rep = lm::LmReport { cost_history: history, ..rerun };
            }
            rep
        }
    };
    if report.termination == Termination::Diverged {
        return Err(EgoError::SolverDiverged { iterations: report.iterations });
    }
    let (mut t, w) = split(&report.params);
    if !scale_known {
        let n = t.norm();
        if n > 0.0 {
            t /= n;
        }
    }
    Ok(EgoSolve {
        estimate: MotionEstimate { translation: t, rotation: w, scale_known },
        seed: seed_est,
        cost_history: report.cost_history,
        iterations: report.iterations,
    })
}

/// Per-frame motion estimates plus the accumulated heading graph.
///
/// Rig axes: +x lateral, +y forward, +z up. The graph's x-axis accumulates
/// lateral translation and its y-axis accumulates forward translation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EgoTrace {
    entries: Vec<(usize, MotionEstimate)>,
    heading: Vec<(usize, f64, f64)>,
}

impl EgoTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: usize, estimate: MotionEstimate) -> Result<(), EgoError> {
        if let Some(&(last, _)) = self.entries.last() {
            if frame <= last {
                return Err(EgoError::NonMonotonicFrame { last, got: frame });
            }
        }
        let (px, py) = self.heading.last().map_or((0.0, 0.0), |&(_, x, y)| (x, y));
        self.entries.push((frame, estimate));
        self.heading.push((frame, px + estimate.translation.x, py + estimate.translation.y));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, MotionEstimate)] {
        &self.entries
    }

    /// `(frame, x-axis drift, y-axis drift)` samples.
    pub fn heading(&self) -> &[(usize, f64, f64)] {
        &self.heading
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lateral (x-axis) translation per entry.
    pub fn lateral(&self) -> Vec<(usize, f64)> {
        self.entries.iter().map(|(f, e)| (*f, e.translation.x)).collect()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "frame,Tx,Ty,Tz,wx,wy,wz,scale_known")?;
        for (f, e) in &self.entries {
            let (t, o) = (e.translation, e.rotation);
            writeln!(w, "{f},{},{},{},{},{},{},{}", t.x, t.y, t.z, o.x, o.y, o.z, e.scale_known as u8)?;
        }
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self, EgoError> {
        let mut trace = Self::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: &str| EgoError::Parse { line: ln + 1, msg: msg.to_string() };
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 8 {
                return Err(perr("expected 8 columns"));
            }
            let frame: usize = cols[0].parse().map_err(|_| perr("bad frame index"))?;
            let v: Vec<f64> = cols[1..7].iter().map(|c| c.parse()).collect::<Result<_, _>>().map_err(|_| perr("bad number"))?;
            let scale_known = matches!(cols[7], "1" | "true");
            trace.push(frame, MotionEstimate { translation: Vec3::new(v[0], v[1], v[2]), rotation: Vec3::new(v[3], v[4], v[5]), scale_known })?;
        }
        Ok(trace)
    }
}
