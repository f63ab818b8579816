//! Four-layer Lagrangian particle grid.
//!
//! Layer 1 holds positions advected by the flow and refined by energy
//! minimisation, layer 2 the coherent-region label of each particle, layer 3
//! its group weight, and layer 4 positions moved by the weighted average
//! motion of the particle's linked neighbourhood. All layers share one id
//! space: a particle's id is its index and is never reused.
//!
//! The set is kept healthy by the propagate → link → optimize → prune → add
//! loop. Particle energy is
//! `E_i = (I(x_i) - a_i)² + α Σ_{j ∈ links(i)} ‖Δp_i - Δp_j‖²`
//! with `Δp` the displacement since the previous frame.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use delaunator::{triangulate, Point};
use rayon::prelude::*;
use thiserror::Error;

use crate::image::{FlowField, Frame, ImageError};
use crate::lcs::FtleField;
use crate::netpbm;
use crate::spatial::PointGrid;
use crate::stats;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_MAX_NEIGHBORS: usize = 6;
pub const DEFAULT_PRUNE_QUANTILE: f64 = 0.98;
pub const APPEARANCE_RATE: f64 = 0.1;
/// Gap, in units of ε, beyond which [`LayerStack::add_particles`] inserts.
pub const ADD_THRESHOLD: f64 = 1.5;

#[derive(Debug, Error)]
pub enum ParticleError {
    #[error("image has zero area")]
    EmptyImage,
    #[error("epsilon must be >= 1, got {0}")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    DimensionMismatch(#[from] ImageError),
    #[error("linking needs at least 2 alive particles, found {0}")]
    TooFewParticles(usize),
    #[error("particle {0} is alive but has no links")]
    UnlinkedParticle(usize),
    #[error("particle {0} is dead or unknown")]
    UnknownParticle(usize),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub id: usize,
    /// Layer-1 position, pixels.
    pub position: (f64, f64),
    /// Layer-1 position one frame earlier.
    pub previous: (f64, f64),
    /// Layer-4 position.
    pub smoothed: (f64, f64),
    /// Reference grey level (one channel).
    pub appearance: f64,
    pub energy: f64,
    pub lcs_label: usize,
    pub weight: f64,
    pub alive: bool,
    /// Frame index at which the particle was created.
    pub born: usize,
    /// Position at creation.
    pub origin: (f64, f64),
}

impl Particle {
    /// Layer-1 displacement over the last frame.
    pub fn displacement(&self) -> (f64, f64) {
        (self.position.0 - self.previous.0, self.position.1 - self.previous.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Outcome of linking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkMode {
    Delaunay,
    /// Points were collinear; consecutive particles along the line were chained.
    CollinearChain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    width: usize,
    height: usize,
    epsilon: f64,
    alpha: f64,
    frame: usize,
    particles: Vec<Particle>,
    links: Vec<BTreeSet<usize>>,
}

/// Regular lattice at pitch ε with appearance sampled from `frame`.
pub fn init_layers(frame: &Frame, epsilon: f64) -> Result<LayerStack, ParticleError> {
    let mut stack = LayerStack::empty(frame.width(), frame.height(), epsilon)?;
    stack.seed_lattice(frame);
    Ok(stack)
}

fn lattice_axis(len: usize, epsilon: f64) -> Vec<f64> {
    let n = ((len as f64 / epsilon).floor() as usize).max(1);
    let offset = (len as f64 - (n - 1) as f64 * epsilon) / 2.0;
    (0..n).map(|i| offset + i as f64 * epsilon).collect()
}

impl LayerStack {
    pub fn empty(width: usize, height: usize, epsilon: f64) -> Result<Self, ParticleError> {
        if width == 0 || height == 0 {
            return Err(ParticleError::EmptyImage);
        }
        if !(epsilon >= 1.0) || !epsilon.is_finite() {
            return Err(ParticleError::InvalidEpsilon(epsilon));
        }
        Ok(Self { width, height, epsilon, alpha: DEFAULT_ALPHA, frame: 0, particles: Vec::new(), links: Vec::new() })
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    fn seed_lattice(&mut self, frame: &Frame) {
        let xs = lattice_axis(self.width, self.epsilon);
        let ys = lattice_axis(self.height, self.epsilon);
        for &y in &ys {
            for &x in &xs {
                self.spawn((x, y), frame.sample(x, y), (0.0, 0.0), 0, 1.0);
            }
        }
    }

    fn spawn(&mut self, position: (f64, f64), appearance: f64, motion: (f64, f64), label: usize, weight: f64) -> usize {
        let id = self.particles.len();
        self.particles.push(Particle {
            id,
            position,
            previous: (position.0 - motion.0, position.1 - motion.1),
            smoothed: position,
            appearance,
            energy: 0.0,
            lcs_label: label,
            weight,
            alive: true,
            born: self.frame,
            origin: position,
        });
        self.links.push(BTreeSet::new());
        id
    }

    /// Adds an alive particle with label 0 and weight 1; `motion` is its displacement over the last frame.
    pub fn insert(&mut self, position: (f64, f64), appearance: f64, motion: (f64, f64)) -> usize {
        self.spawn(position, appearance, motion, 0, 1.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Frame index the layer-1 positions refer to.
    pub fn frame_index(&self) -> usize {
        self.frame
    }

    /// Every particle ever created, indexed by id.
    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn particle(&self, id: usize) -> Option<&Particle> {
        self.particles.get(id)
    }

    pub fn particle_mut(&mut self, id: usize) -> Option<&mut Particle> {
        self.particles.get_mut(id)
    }

    pub fn alive(&self) -> impl Iterator<Item = &Particle> {
        self.particles.iter().filter(|p| p.alive)
    }

    pub fn alive_count(&self) -> usize {
        self.particles.iter().filter(|p| p.alive).count()
    }

    /// Upper bound on the alive count, twice the initial lattice size.
    pub fn capacity(&self) -> usize {
        2 * (self.width as f64 / self.epsilon).ceil() as usize * (self.height as f64 / self.epsilon).ceil() as usize
    }

    pub fn links_of(&self, id: usize) -> &BTreeSet<usize> {
        &self.links[id]
    }

    /// Undirected links as `(a, b)` with `a < b`, sorted.
    pub fn link_pairs(&self) -> Vec<(usize, usize)> {
        self.links
            .iter()
            .enumerate()
            .flat_map(|(a, set)| set.iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect()
    }

    fn in_bounds(&self, (x, y): (f64, f64)) -> bool {
        x >= -0.5 && y >= -0.5 && x <= self.width as f64 - 0.5 && y <= self.height as f64 - 0.5
    }

    pub fn add_link(&mut self, a: usize, b: usize) {
        if a != b {
            self.links[a].insert(b);
            self.links[b].insert(a);
        }
    }

    pub fn clear_links(&mut self) {
        self.links.iter_mut().for_each(BTreeSet::clear);
    }

    fn kill(&mut self, id: usize) {
        self.particles[id].alive = false;
        for other in std::mem::take(&mut self.links[id]) {
            self.links[other].remove(&id);
        }
    }

    /// Moves layer-1 positions one frame along the flow (`Forward`, using
    /// `flow_fwd`) or back (`Backward`, using `flow_bwd`). Particles carried
    /// outside the frame die.
    pub fn propagate(&mut self, flow_fwd: &FlowField, flow_bwd: &FlowField, direction: Direction) -> Result<(), ParticleError> {
        flow_fwd.check_dims(self.width, self.height)?;
        flow_bwd.check_dims(self.width, self.height)?;
        let flow = match direction {
            Direction::Forward => flow_fwd,
            Direction::Backward => flow_bwd,
        };
        let mut leaving = Vec::new();
        for p in self.particles.iter_mut().filter(|p| p.alive) {
            let (u, v) = flow.sample(p.position.0, p.position.1);
            p.previous = p.position;
            p.position = (p.position.0 + u, p.position.1 + v);
            leaving.push(p.id);
        }
        leaving.retain(|&id| !self.in_bounds(self.particles[id].position));
        for id in leaving {
            self.kill(id);
        }
        match direction {
            Direction::Forward => self.frame += 1,
            Direction::Backward => self.frame = self.frame.saturating_sub(1),
        }
        Ok(())
    }

    /// Rebuilds the link graph from a Delaunay triangulation of alive
    /// positions. Each particle nominates its `max_neighbors` shortest
    /// Delaunay edges; an edge is kept when both ends nominate it, and a
    /// particle left without links keeps its single shortest edge.
    pub fn link(&mut self, max_neighbors: usize) -> Result<LinkMode, ParticleError> {
        if max_neighbors == 0 {
            return Err(ParticleError::InvalidParams("max_neighbors must be >= 1".into()));
        }
        let ids: Vec<usize> = self.alive().map(|p| p.id).collect();
        if ids.len() < 2 {
            return Err(ParticleError::TooFewParticles(ids.len()));
        }
        self.clear_links();
        let pts: Vec<Point> = ids.iter().map(|&i| Point { x: self.particles[i].position.0, y: self.particles[i].position.1 }).collect();
        let tri = triangulate(&pts);
        let dist = |a: usize, b: usize| {
            let (pa, pb) = (&pts[a], &pts[b]);
            (pa.x - pb.x).hypot(pa.y - pb.y)
        };
        let mut mode = LinkMode::Delaunay;
        let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
        if tri.triangles.is_empty() {
            mode = LinkMode::CollinearChain;
            // chain along the principal direction
            let (ox, oy) = (pts[0].x, pts[0].y);
            let far = (1..pts.len()).max_by(|&a, &b| dist(0, a).total_cmp(&dist(0, b))).unwrap_or(0);
            let (dx, dy) = (pts[far].x - ox, pts[far].y - oy);
            let mut order: Vec<usize> = (0..pts.len()).collect();
            order.sort_by(|&a, &b| {
                let ta = (pts[a].x - ox) * dx + (pts[a].y - oy) * dy;
                let tb = (pts[b].x - ox) * dx + (pts[b].y - oy) * dy;
                ta.total_cmp(&tb).then(a.cmp(&b))
            });
            for w in order.windows(2) {
                candidates[w[0]].push(w[1]);
                candidates[w[1]].push(w[0]);
            }
        } else {
            for t in tri.triangles.chunks(3) {
                for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                    candidates[a].push(b);
                    candidates[b].push(a);
                }
            }
        }
        for (a, c) in candidates.iter_mut().enumerate() {
            c.sort_unstable();
            c.dedup();
            c.sort_by(|&x, &y| dist(a, x).total_cmp(&dist(a, y)).then(x.cmp(&y)));
        }
        let nominated: Vec<BTreeSet<usize>> = candidates.iter().map(|c| c.iter().take(max_neighbors).copied().collect()).collect();
        for (a, noms) in nominated.iter().enumerate() {
            for &b in noms {
                if a < b && nominated[b].contains(&a) {
                    self.add_link(ids[a], ids[b]);
                }
            }
        }
        // rescue: duplicates get no triangles, and mutual selection can strand a particle
        let grid = PointGrid::new(&pts.iter().map(|p| (p.x, p.y)).collect::<Vec<_>>(), self.epsilon);
        for a in 0..ids.len() {
            if self.links[ids[a]].is_empty() {
                let b = candidates[a].first().copied().or_else(|| grid.nearest_filtered((pts[a].x, pts[a].y), |j| j != a).map(|(j, _)| j));
                if let Some(b) = b {
                    self.add_link(ids[a], ids[b]);
                }
            }
        }
        Ok(mode)
    }

    fn data_term(&self, p: &Particle, pos: (f64, f64), frame: &Frame) -> f64 {
        (frame.sample(pos.0, pos.1) - p.appearance).powi(2)
    }

    fn distortion(&self, id: usize, disp: (f64, f64)) -> f64 {
        self.links[id]
            .iter()
            .map(|&j| {
                let d = self.particles[j].displacement();
                (disp.0 - d.0).powi(2) + (disp.1 - d.1).powi(2)
            })
            .sum()
    }

    /// Energy of one particle against `frame` with distortion weight `alpha`.
    pub fn particle_energy(&self, id: usize, frame: &Frame, alpha: f64) -> Result<f64, ParticleError> {
        let p = self.particles.get(id).filter(|p| p.alive).ok_or(ParticleError::UnknownParticle(id))?;
        if self.links[id].is_empty() && self.alive_count() > 1 {
            return Err(ParticleError::UnlinkedParticle(id));
        }
        Ok(self.data_term(p, p.position, frame) + alpha * self.distortion(id, p.displacement()))
    }

    /// Recomputes and stores every alive particle's energy; returns the total.
    pub fn compute_energies(&mut self, frame: &Frame, alpha: f64) -> Result<f64, ParticleError> {
        self.check_frame(frame)?;
        let ids: Vec<usize> = self.alive().map(|p| p.id).collect();
        let energies: Result<Vec<f64>, ParticleError> = ids.par_iter().map(|&i| self.particle_energy(i, frame, alpha)).collect();
        let energies = energies?;
        for (&i, &e) in ids.iter().zip(&energies) {
            self.particles[i].energy = e;
        }
        Ok(energies.iter().sum())
    }

    fn check_frame(&self, frame: &Frame) -> Result<(), ParticleError> {
        if frame.width() != self.width || frame.height() != self.height {
            return Err(ImageError::DimensionMismatch { a_w: frame.width(), a_h: frame.height(), b_w: self.width, b_h: self.height }.into());
        }
        Ok(())
    }

    /// Change in total energy if particle `id` moved to `pos`. Its data term
    /// changes, and each of its links contributes twice (once from each end).
    fn move_delta(&self, id: usize, pos: (f64, f64), frame: &Frame, alpha: f64) -> f64 {
        let p = &self.particles[id];
        let old_disp = p.displacement();
        let new_disp = (pos.0 - p.previous.0, pos.1 - p.previous.1);
        let data = self.data_term(p, pos, frame) - self.data_term(p, p.position, frame);
        data + 2.0 * alpha * (self.distortion(id, new_disp) - self.distortion(id, old_disp))
    }

    /// Coordinate descent over `iters` sweeps. Each particle tries a 3×3
    /// candidate set at ±0.5 px, then ±0.25 px around the best, and moves only
    /// when the total energy drops. Returns the total energy before the first
    /// sweep followed by the total after each sweep.
    pub fn optimize(&mut self, frame: &Frame, alpha: f64, iters: usize) -> Result<Vec<f64>, ParticleError> {
        let mut totals = vec![self.compute_energies(frame, alpha)?];
        let ids: Vec<usize> = self.alive().map(|p| p.id).collect();
        for _ in 0..iters {
            let mut moved = false;
            for &id in &ids {
                for step in [0.5, 0.25] {
                    let base = self.particles[id].position;
                    let mut best = (0.0, base);
                    for dy in [-step, 0.0, step] {
                        for dx in [-step, 0.0, step] {
                            if dx == 0.0 && dy == 0.0 {
                                continue;
                            }
                            let cand = (base.0 + dx, base.1 + dy);
                            if !self.in_bounds(cand) {
                                continue;
                            }
                            let delta = self.move_delta(id, cand, frame, alpha);
                            if delta < best.0 {
                                best = (delta, cand);
                            }
                        }
                    }
                    if best.0 < 0.0 {
                        self.particles[id].position = best.1;
                        moved = true;
                    }
                }
            }
            totals.push(self.compute_energies(frame, alpha)?);
            if !moved {
                break;
            }
        }
        Ok(totals)
    }

    /// Kills particles whose stored energy is strictly above the `quantile`
    /// of alive energies. Returns the ids removed.
    pub fn prune(&mut self, quantile: f64) -> Result<Vec<usize>, ParticleError> {
        if !(0.0..=1.0).contains(&quantile) {
            return Err(ParticleError::InvalidParams(format!("prune quantile {quantile} outside [0, 1]")));
        }
        let energies: Vec<f64> = self.alive().map(|p| p.energy).collect();
        if energies.is_empty() {
            return Ok(Vec::new());
        }
        let cut = stats::quantile(&energies, quantile);
        let doomed: Vec<usize> = self.alive().filter(|p| p.energy > cut).map(|p| p.id).collect();
        for &id in &doomed {
            self.kill(id);
        }
        Ok(doomed)
    }

    /// Per-pixel distance to the nearest alive particle. With no particles every entry is infinite.
    pub fn scale_map(&self) -> Vec<f64> {
        let pts: Vec<(f64, f64)> = self.alive().map(|p| p.position).collect();
        let grid = PointGrid::new(&pts, self.epsilon);
        let w = self.width;
        let mut out = vec![f64::INFINITY; self.width * self.height];
        if pts.is_empty() {
            return out;
        }
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, d) in row.iter_mut().enumerate() {
                *d = grid.nearest((x as f64, y as f64)).map_or(f64::INFINITY, |(_, d)| d);
            }
        });
        out
    }

    /// Fills gaps: while some pixel lies more than 1.5ε from every alive
    /// particle, a particle is inserted at the farthest such pixel. New
    /// particles take appearance from `frame`, motion from nearby particles
    /// and the label and weight of the dominant nearby group. An empty stack
    /// is re-seeded with the initial lattice. Returns the ids added.
    pub fn add_particles(&mut self, frame: &Frame) -> Result<Vec<usize>, ParticleError> {
        self.check_frame(frame)?;
        let first_new = self.particles.len();
        if self.alive_count() == 0 {
            self.seed_lattice(frame);
            return Ok((first_new..self.particles.len()).collect());
        }
        let limit = ADD_THRESHOLD * self.epsilon;
        let mut dist = self.scale_map();
        let w = self.width;
        let cap = self.capacity();
        let mut alive = self.alive_count();
        while alive < cap {
            let (idx, &far) = dist
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("frame is non-empty");
            if far <= limit {
                break;
            }
            let pos = ((idx % w) as f64, (idx / w) as f64);
            let (label, weight, motion) = self.neighbourhood_summary(pos);
            self.spawn(pos, frame.sample(pos.0, pos.1), motion, label, weight);
            alive += 1;
            dist.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
                for (x, d) in row.iter_mut().enumerate() {
                    *d = d.min((x as f64 - pos.0).hypot(y as f64 - pos.1));
                }
            });
        }
        Ok((first_new..self.particles.len()).collect())
    }

    /// Dominant label (by count, ties to the lower id), its weight and the mean motion of alive particles near `pos`.
    fn neighbourhood_summary(&self, pos: (f64, f64)) -> (usize, f64, (f64, f64)) {
        let mut near: Vec<(f64, usize)> = self
            .alive()
            .map(|p| ((p.position.0 - pos.0).hypot(p.position.1 - pos.1), p.id))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(6);
        let mut counts: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        let mut motion = (0.0, 0.0);
        for &(_, id) in &near {
            let p = &self.particles[id];
            let e = counts.entry(p.lcs_label).or_insert((0, p.weight));
            e.0 += 1;
            let d = p.displacement();
            motion = (motion.0 + d.0, motion.1 + d.1);
        }
        let n = near.len().max(1) as f64;
        let (label, (_, weight)) = counts
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.0.cmp(a.0)))
            .map(|(l, v)| (*l, *v))
            .unwrap_or((0, (0, 1.0)));
        (label, weight, (motion.0 / n, motion.1 / n))
    }

    /// Layer 2 and 3: each particle takes the region label under it; weights are `1 / group size`.
    pub fn assign_weights(&mut self, labels: &FtleField) {
        let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
        for p in self.particles.iter_mut().filter(|p| p.alive) {
            p.lcs_label = labels.label_at(p.position.0, p.position.1);
            *sizes.entry(p.lcs_label).or_default() += 1;
        }
        for p in self.particles.iter_mut().filter(|p| p.alive) {
            p.weight = 1.0 / sizes[&p.lcs_label] as f64;
        }
    }

    /// Layer 4: moves each smoothed position by the weighted mean layer-1
    /// displacement over the particle and its links.
    pub fn layer4_update(&mut self) -> Result<(), ParticleError> {
        let alive = self.alive_count();
        let mut moves = Vec::with_capacity(alive);
        for p in self.alive() {
            if self.links[p.id].is_empty() && alive > 1 {
                return Err(ParticleError::UnlinkedParticle(p.id));
            }
            let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
            for q in std::iter::once(p.id).chain(self.links[p.id].iter().copied()) {
                let q = &self.particles[q];
                let d = q.displacement();
                sx += q.weight * d.0;
                sy += q.weight * d.1;
                sw += q.weight;
            }
            let step = if sw > 0.0 { (sx / sw, sy / sw) } else { p.displacement() };
            moves.push((p.id, step));
        }
        for (id, (dx, dy)) in moves {
            let p = &mut self.particles[id];
            p.smoothed = (p.smoothed.0 + dx, p.smoothed.1 + dy);
        }
        Ok(())
    }

    /// Exponential moving average of each reference grey level toward the frame.
    pub fn refresh_appearance(&mut self, frame: &Frame, rate: f64) -> Result<(), ParticleError> {
        self.check_frame(frame)?;
        for p in self.particles.iter_mut().filter(|p| p.alive) {
            p.appearance = (1.0 - rate) * p.appearance + rate * frame.sample(p.position.0, p.position.1);
        }
        Ok(())
    }

    /// `id,x,y,energy,label,weight,alive` for every particle ever created.
    pub fn write_snapshot(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "id,x,y,energy,label,weight,alive")?;
        for p in &self.particles {
            writeln!(w, "{},{},{},{},{},{},{}", p.id, p.position.0, p.position.1, p.energy, p.lcs_label, p.weight, p.alive as u8)?;
        }
        Ok(())
    }

    pub fn write_links(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "id_a,id_b")?;
        for (a, b) in self.link_pairs() {
            writeln!(w, "{a},{b}")?;
        }
        Ok(())
    }

    /// Grey frame with alive particles drawn as red dots (PPM bytes).
    pub fn overlay(&self, frame: &Frame) -> Vec<u8> {
        let (w, h) = (frame.width(), frame.height());
        let mut rgb: Vec<u8> = frame.data().iter().flat_map(|&v| [(v * 255.0).round() as u8; 3]).collect();
        for p in self.alive() {
            let (x, y) = (p.position.0.round() as isize, p.position.1.round() as isize);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                let i = 3 * (y as usize * w + x as usize);
                rgb[i..i + 3].copy_from_slice(&[255, 0, 0]);
            }
        }
        netpbm::encode_ppm(w, h, &rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(w: usize, h: usize) -> Frame {
        Frame::from_fn(w, h, |_, _| 0.5).unwrap()
    }

    #[test]
    fn init_rejects_bad_epsilon() {
        assert!(matches!(init_layers(&flat(16, 16), 0.5), Err(ParticleError::InvalidEpsilon(_))));
        assert!(matches!(LayerStack::empty(0, 4, 2.0), Err(ParticleError::EmptyImage)));
    }

    #[test]
    fn link_requires_two() {
        let mut s = init_layers(&flat(16, 16), 20.0).unwrap();
        assert!(matches!(s.link(6), Err(ParticleError::TooFewParticles(1))));
    }

    #[test]
    fn duplicates_are_rescued() {
        let mut s = LayerStack::empty(16, 16, 4.0).unwrap();
        for pos in [(2.0, 2.0), (10.0, 2.0), (6.0, 9.0), (6.0, 9.0)] {
            s.spawn(pos, 0.5, (0.0, 0.0), 0, 1.0);
        }
        s.link(6).unwrap();
        assert!(s.alive().all(|p| !s.links_of(p.id).is_empty()));
    }

    #[test]
    fn collinear_points_are_chained() {
        let mut s = LayerStack::empty(32, 16, 4.0).unwrap();
        for x in [20.0, 4.0, 12.0, 28.0] {
            s.spawn((x, 8.0), 0.5, (0.0, 0.0), 0, 1.0);
        }
        assert_eq!(s.link(6).unwrap(), LinkMode::CollinearChain);
        assert_eq!(s.link_pairs(), vec![(0, 2), (0, 3), (1, 2)]);
    }

    #[test]
    fn particles_leaving_frame_die() {
        let mut s = init_layers(&flat(16, 16), 4.0).unwrap();
        let f = FlowField::constant(16, 16, 3.0, 0.0);
        s.propagate(&f, &f, Direction::Forward).unwrap();
        // x = 14 + 3 lies outside
        assert_eq!(s.alive_count(), 12);
        assert_eq!(s.frame_index(), 1);
    }
}
