//! Two-dimensional SPH fluid with detail-preserving shape control.
//!
//! Density uses the poly6 kernel, pressure the spiky gradient and viscosity
//! the viscosity Laplacian, all normalised for 2-D. Pair forces are written
//! in antisymmetric form so linear momentum is conserved up to round-off.
//! Control acts on the kernel-smoothed (coarse) velocity only; the residual
//! (fine) velocity passes through untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::Write;

use delaunator::{triangulate, Point};
use log::warn;
use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::scenestate::FrozenVolume;
use crate::spatial::PointGrid;
use crate::stats::mean;

pub type Vec2 = Vector2<f64>;

/// Lattice pitch of a freshly poured block, as a fraction of `h`.
pub const REST_SPACING_RATIO: f64 = 1.0 / 1.3;
pub const DEFAULT_STIFFNESS: f64 = 50.0;
pub const DEFAULT_RESTITUTION: f64 = 0.5;
pub const CFL: f64 = 0.4;

#[derive(Debug, Error)]
pub enum FluidError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("non-finite {quantity} at particle {index}")]
    NumericalBlowup { quantity: &'static str, index: usize },
    #[error("control set has no targets")]
    NoTargets,
}

/// Axis-aligned simulation box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: Vec2,
    pub max: Vec2,
}

impl Bounds {
    pub fn new(min: (f64, f64), max: (f64, f64)) -> Self {
        Self { min: Vec2::new(min.0, min.1), max: Vec2::new(max.0, max.1) }
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

pub fn poly6(r2: f64, h: f64) -> f64 {
    let h2 = h * h;
    if r2 >= h2 {
        0.0
    } else {
        4.0 / (PI * h.powi(8)) * (h2 - r2).powi(3)
    }
}

/// Gradient of the spiky kernel with respect to `x_i` for `r = x_i - x_j`.
pub fn spiky_grad(r: &Vec2, h: f64) -> Vec2 {
    let d = r.norm();
    if d >= h || d == 0.0 {
        Vec2::zeros()
    } else {
        r * (-30.0 / (PI * h.powi(5)) * (h - d).powi(2) / d)
    }
}

pub fn viscosity_laplacian(d: f64, h: f64) -> f64 {
    if d >= h {
        0.0
    } else {
        40.0 / (PI * h.powi(5)) * (h - d)
    }
}

/// Density of an infinite square lattice of unit-mass particles at pitch `h / 1.3`.
pub fn lattice_density(h: f64) -> f64 {
    let s = h * REST_SPACING_RATIO;
    let reach = (h / s).ceil() as i64;
    let mut rho = 0.0;
    for j in -reach..=reach {
        for i in -reach..=reach {
            rho += poly6(((i * i + j * j) as f64) * s * s, h);
        }
    }
    rho
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidState {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    densities: Vec<f64>,
    pressures: Vec<f64>,
    mass: f64,
    h: f64,
    pub bounds: Bounds,
    pub rest_density: f64,
    pub stiffness: f64,
    /// Fraction of normal velocity kept on wall contact.
    pub restitution: f64,
}

/// `n` particles poured as a block at the top (largest y) of `bounds`,
/// centred horizontally, at pitch `h / 1.3` with zero velocity.
pub fn init_fluid(n: usize, bounds: Bounds, h: f64) -> Result<FluidState, FluidError> {
    if n == 0 || !(h > 0.0) {
        return Err(FluidError::InvalidParams(format!("need n >= 1 and h > 0, got n = {n}, h = {h}")));
    }
    let s = h * REST_SPACING_RATIO;
    let cols = (n as f64).sqrt().ceil() as usize;
    let centre = (bounds.min.x + bounds.max.x) / 2.0;
    let origin = Vec2::new(centre - (cols - 1) as f64 * s / 2.0, bounds.max.y - s / 2.0);
    let positions: Vec<Vec2> = (0..n).map(|k| origin + Vec2::new((k % cols) as f64 * s, -((k / cols) as f64) * s)).collect();
    Ok(FluidState::from_particles(positions, vec![Vec2::zeros(); n], bounds, h))
}

impl FluidState {
    /// Unit-mass particles with the lattice rest density and default stiffness.
    pub fn from_particles(positions: Vec<Vec2>, velocities: Vec<Vec2>, bounds: Bounds, h: f64) -> Self {
        assert_eq!(positions.len(), velocities.len(), "one velocity per particle");
        let n = positions.len();
        Self {
            positions,
            velocities,
            densities: vec![0.0; n],
            pressures: vec![0.0; n],
            mass: 1.0,
            h,
            bounds,
            rest_density: lattice_density(h),
            stiffness: DEFAULT_STIFFNESS,
            restitution: DEFAULT_RESTITUTION,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn pressures(&self) -> &[f64] {
        &self.pressures
    }

    pub fn momentum(&self) -> Vec2 {
        self.velocities.iter().fold(Vec2::zeros(), |acc, v| acc + v * self.mass)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities.iter().map(|v| 0.5 * self.mass * v.norm_squared()).sum()
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    fn grid(&self, cell: f64) -> PointGrid {
        let pts: Vec<(f64, f64)> = self.positions.iter().map(|p| (p.x, p.y)).collect();
        PointGrid::new(&pts, cell)
    }

    /// Neighbour lists within `radius` (self included), sorted by index.
    fn neighbours(&self, radius: f64) -> Vec<Vec<usize>> {
        let grid = self.grid(radius);
        self.positions
            .par_iter()
            .map(|p| {
                let mut out = Vec::new();
                grid.for_each_within((p.x, p.y), radius, |j, _| out.push(j));
                out.sort_unstable();
                out
            })
            .collect()
    }

    /// Recomputes densities and pressures.
    pub fn update_density(&mut self) {
        let hood = self.neighbours(self.h);
        let (m, h) = (self.mass, self.h);
        let pos = &self.positions;
        self.densities = hood.par_iter().enumerate().map(|(i, js)| js.iter().map(|&j| m * poly6((pos[i] - pos[j]).norm_squared(), h)).sum()).collect();
        self.pressures = self.densities.iter().map(|rho| self.stiffness * (rho - self.rest_density)).collect();
    }

    /// `id,x,y,vx,vy,density`.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "id,x,y,vx,vy,density")?;
        for (i, (p, v)) in self.positions.iter().zip(&self.velocities).enumerate() {
            writeln!(w, "{i},{},{},{},{},{}", p.x, p.y, v.x, v.y, self.densities[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Time step actually taken.
    pub dt: f64,
    /// Whether the CFL bound shortened the requested step.
    pub clamped: bool,
}

/// One symplectic-Euler step: densities, pressure and viscosity forces,
/// gravity, then damped reflection at the walls. Nothing is committed if
/// any quantity turns non-finite.
pub fn sph_step(state: &mut FluidState, dt: f64, gravity: Vec2, viscosity: f64) -> Result<StepReport, FluidError> {
    if !(dt > 0.0) || !(viscosity >= 0.0) {
        return Err(FluidError::InvalidParams(format!("dt {dt} must be positive and viscosity {viscosity} non-negative")));
    }
    let h = state.h;
    let speed = state.max_speed();
    let limit = if speed > 0.0 { CFL * h / speed } else { f64::INFINITY };
    let clamped = dt > limit;
    let dt = if clamped {
        warn!("time step {dt} exceeds CFL bound {limit}; clamping");
        limit
    } else {
        dt
    };

    state.update_density();
    if let Some(i) = state.densities.iter().position(|r| !r.is_finite()) {
        return Err(FluidError::NumericalBlowup { quantity: "density", index: i });
    }
    let hood = state.neighbours(h);
    let (m, pos, vel, rho, p) = (state.mass, &state.positions, &state.velocities, &state.densities, &state.pressures);
    let accel: Vec<Vec2> = hood
        .par_iter()
        .enumerate()
        .map(|(i, js)| {
            let mut f = Vec2::zeros();
            for &j in js {
                if j == i {
                    continue;
                }
                let r = pos[i] - pos[j];
                let shared = p[i] / (rho[i] * rho[i]) + p[j] / (rho[j] * rho[j]);
                f -= spiky_grad(&r, h) * (m * m * shared);
                f += (vel[j] - vel[i]) * (viscosity * m * m / (rho[i] * rho[j]) * viscosity_laplacian(r.norm(), h));
            }
            f / m + gravity
        })
        .collect();

    let mut velocities: Vec<Vec2> = vel.iter().zip(&accel).map(|(v, a)| v + a * dt).collect();
    let mut positions: Vec<Vec2> = pos.iter().zip(&velocities).map(|(x, v)| x + v * dt).collect();
    let b = state.bounds;
    for (x, v) in positions.iter_mut().zip(velocities.iter_mut()) {
        for axis in 0..2 {
            let (lo, hi) = (b.min[axis], b.max[axis]);
            if x[axis] < lo {
                x[axis] = (2.0 * lo - x[axis]).min(hi);
                v[axis] = -v[axis] * state.restitution;
            } else if x[axis] > hi {
                x[axis] = (2.0 * hi - x[axis]).max(lo);
                v[axis] = -v[axis] * state.restitution;
            }
        }
    }
    if let Some(i) = positions.iter().zip(&velocities).position(|(x, v)| !(x.iter().chain(v.iter()).all(|c| c.is_finite()))) {
        return Err(FluidError::NumericalBlowup { quantity: "position or velocity", index: i });
    }
    state.positions = positions;
    state.velocities = velocities;
    Ok(StepReport { dt, clamped })
}

/// Splits velocities into a poly6-weighted neighbourhood average over
/// `radius` (coarse) and the remainder (fine).
pub fn decompose_velocity(state: &FluidState, radius: f64) -> Result<(Vec<Vec2>, Vec<Vec2>), FluidError> {
    if !(radius >= state.h) {
        return Err(FluidError::InvalidParams(format!("smoothing radius {radius} must be at least h = {}", state.h)));
    }
    let hood = state.neighbours(radius);
    let (pos, vel) = (&state.positions, &state.velocities);
    let coarse: Vec<Vec2> = hood
        .par_iter()
        .enumerate()
        .map(|(i, js)| {
            let (mut acc, mut wsum) = (Vec2::zeros(), 0.0);
            for &j in js {
                let w = poly6((pos[i] - pos[j]).norm_squared(), radius);
                acc += vel[j] * w;
                wsum += w;
            }
            acc / wsum
        })
        .collect();
    let fine = vel.iter().zip(&coarse).map(|(v, c)| v - c).collect();
    Ok((coarse, fine))
}

/// Target points with a spring gain and an influence radius.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    pub targets: Vec<Vec2>,
    pub gain: f64,
    pub radius: f64,
}

impl ControlSet {
    pub fn new(targets: Vec<Vec2>, gain: f64, radius: f64) -> Result<Self, FluidError> {
        if targets.is_empty() {
            return Err(FluidError::NoTargets);
        }
        if !(gain >= 0.0) || !(radius > 0.0) {
            return Err(FluidError::InvalidParams(format!("gain {gain} must be >= 0 and radius {radius} > 0")));
        }
        Ok(Self { targets, gain, radius })
    }

    /// Targets at the planar footprint of a frozen volume.
    pub fn from_volume(volume: &FrozenVolume, gain: f64, radius: f64) -> Result<Self, FluidError> {
        Self::new(volume.footprint().into_iter().map(|(x, y)| Vec2::new(x, y)).collect(), gain, radius)
    }

    fn grid(&self) -> PointGrid {
        let pts: Vec<(f64, f64)> = self.targets.iter().map(|p| (p.x, p.y)).collect();
        let span = |f: fn(&(f64, f64)) -> f64| {
            let (lo, hi) = pts.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            hi - lo
        };
        let extent = span(|p| p.0).max(span(|p| p.1));
        let cell = (extent / (pts.len() as f64).sqrt()).max(1e-9);
        PointGrid::new(&pts, cell)
    }

    /// Distance from each position to its nearest target.
    pub fn distances(&self, positions: &[Vec2]) -> Vec<f64> {
        let grid = self.grid();
        positions.par_iter().map(|p| grid.nearest((p.x, p.y)).map_or(f64::INFINITY, |(_, d)| d)).collect()
    }
}

/// Decomposition and per-particle control force from one control application.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlReport {
    pub coarse: Vec<Vec2>,
    pub fine: Vec<Vec2>,
    pub force: Vec<Vec2>,
}

/// Critically damped attraction of each particle's coarse velocity toward
/// its nearest target within range: `F = g (t - x) - 2 √g · coarse`. The new
/// velocity is `(coarse + F·dt) + fine`.
pub fn apply_control(state: &mut FluidState, control: &ControlSet, smoothing_radius: f64, dt: f64) -> Result<ControlReport, FluidError> {
    let (coarse, fine) = decompose_velocity(state, smoothing_radius)?;
    let grid = control.grid();
    let damping = 2.0 * control.gain.sqrt();
    let force: Vec<Vec2> = state
        .positions
        .par_iter()
        .zip(&coarse)
        .map(|(x, c)| match grid.nearest((x.x, x.y)) {
            Some((t, d)) if d <= control.radius && control.gain > 0.0 => (control.targets[t] - x) * control.gain - c * damping,
            _ => Vec2::zeros(),
        })
        .collect();
    if control.gain > 0.0 {
        for (i, v) in state.velocities.iter_mut().enumerate() {
            *v = (coarse[i] + force[i] * dt) + fine[i];
        }
    }
    Ok(ControlReport { coarse, fine, force })
}

/// Simulation settings for [`mold`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoldParams {
    pub dt: f64,
    pub gravity: Vec2,
    pub viscosity: f64,
    /// Coarse-velocity smoothing radius, at least `h`.
    pub smoothing_radius: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoldOutcome {
    pub converged: bool,
    pub steps: usize,
    /// Mean nearest-target distance of the returned state.
    pub mean_distance: f64,
    /// Alpha-shape outline (radius 2h) of the returned state.
    pub cross_section: Vec<Vec2>,
}

/// Steps and controls the fluid until the mean nearest-target distance
/// drops below `h` or `max_steps` pass. Without convergence the state with
/// the smallest mean distance seen is restored.
pub fn mold(state: &mut FluidState, control: &ControlSet, params: &MoldParams) -> Result<MoldOutcome, FluidError> {
    let h = state.h;
    let mut best = (mean(&control.distances(&state.positions)), state.clone());
    let mut steps = 0;
    let mut converged = best.0 < h;
    while !converged && steps < params.max_steps {
        let report = sph_step(state, params.dt, params.gravity, params.viscosity)?;
        apply_control(state, control, params.smoothing_radius, report.dt)?;
        steps += 1;
        let d = mean(&control.distances(&state.positions));
        if d < best.0 {
            best = (d, state.clone());
        }
        converged = d < h;
    }
    if !converged {
        *state = best.1;
    }
    let mean_distance = mean(&control.distances(&state.positions));
    Ok(MoldOutcome { converged, steps, mean_distance, cross_section: alpha_outline(&state.positions, 2.0 * h) })
}

/// Longest closed boundary loop of the alpha shape: Delaunay triangles with
/// circumradius at most `alpha`, boundary edges being those used once.
pub fn alpha_outline(points: &[Vec2], alpha: f64) -> Vec<Vec2> {
    let pts: Vec<Point> = points.iter().map(|p| Point { x: p.x, y: p.y }).collect();
    let tri = triangulate(&pts);
    let mut edge_use: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in tri.triangles.chunks(3) {
        let (a, b, c) = (points[t[0]], points[t[1]], points[t[2]]);
        let (la, lb, lc) = ((b - c).norm(), (a - c).norm(), (a - b).norm());
        let area2 = ((b - a).perp(&(c - a))).abs();
        if area2 == 0.0 || la * lb * lc / (2.0 * area2) > alpha {
            continue;
        }
        for (u, v) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            *edge_use.entry((u.min(v), u.max(v))).or_default() += 1;
        }
    }
    let mut adj: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&(u, v), &n) in &edge_use {
        if n == 1 {
            adj.entry(u).or_default().insert(v);
            adj.entry(v).or_default().insert(u);
        }
    }
    let mut best: Vec<usize> = Vec::new();
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &start in adj.keys() {
        for &first in &adj[&start] {
            if used.contains(&(start.min(first), start.max(first))) {
                continue;
            }
            let mut chain = vec![start];
            let (mut prev, mut cur) = (start, first);
            used.insert((start.min(first), start.max(first)));
            while cur != start {
                chain.push(cur);
                let next = adj[&cur].iter().copied().find(|&n| n != prev && !used.contains(&(cur.min(n), cur.max(n))));
                let Some(next) = next else { break };
                used.insert((cur.min(next), cur.max(next)));
                prev = cur;
                cur = next;
            }
            if chain.len() > best.len() {
                best = chain;
            }
        }
    }
    best.into_iter().map(|i| points[i]).collect()
}
