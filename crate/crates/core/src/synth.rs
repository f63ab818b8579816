//! Deterministic synthetic fixtures with known ground truth.
//!
//! These back the test suites and the `synth` CLI command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::filter::blur;
use crate::image::{FlowField, Frame, Grid};

/// Band-limited random texture in `[0, 1]`, periodic in both axes.
pub fn noise_texture(width: usize, height: usize, smoothing: f64, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Grid::from_fn(width, height, |_, _| rng.random::<f64>());
    if smoothing <= 0.0 {
        return normalize(&raw);
    }
    // blur on a tiled copy so the texture wraps seamlessly
    let pad = (4.0 * smoothing).ceil() as usize + 1;
    let (tw, th) = (width + 2 * pad, height + 2 * pad);
    let tiled = Grid::from_fn(tw, th, |x, y| {
        raw.get((x + width - pad % width) % width, (y + height - pad % height) % height)
    });
    let b = blur(&tiled, smoothing);
    let g = Grid::from_fn(width, height, |x, y| b.get(x + pad, y + pad));
    normalize(&g)
}

fn normalize(g: &Grid) -> Grid {
    let (lo, hi) = g.min_max();
    let span = (hi - lo).max(1e-12);
    Grid::from_fn(g.width(), g.height(), |x, y| 0.05 + 0.9 * (g.get(x, y) - lo) / span)
}

/// Integer circular shift: `out(x + dx, y + dy) = src(x, y)`.
pub fn shift_wrap(src: &Grid, dx: isize, dy: isize) -> Grid {
    let (w, h) = (src.width() as isize, src.height() as isize);
    Grid::from_fn(src.width(), src.height(), |x, y| {
        let sx = (x as isize - dx).rem_euclid(w) as usize;
        let sy = (y as isize - dy).rem_euclid(h) as usize;
        src.get(sx, sy)
    })
}

/// Rotates content by `angle` radians about the image centre (bilinear resampling).
pub fn rotate(src: &Grid, angle: f64) -> Grid {
    let cx = (src.width() as f64 - 1.0) / 2.0;
    let cy = (src.height() as f64 - 1.0) / 2.0;
    let (s, c) = angle.sin_cos();
    Grid::from_fn(src.width(), src.height(), |x, y| {
        // inverse map: output pixel p came from R^-1 (p - c) + c
        let (px, py) = (x as f64 - cx, y as f64 - cy);
        let sx = c * px + s * py + cx;
        let sy = -s * px + c * py + cy;
        src.sample(sx, sy)
    })
}

pub fn to_frame(g: &Grid) -> Frame {
    Frame::from_fn(g.width(), g.height(), |x, y| g.get(x, y)).expect("fixture frames are valid")
}

/// Textured square translating over a static textured background.
#[derive(Debug, Clone)]
pub struct TranslatingSquare {
    pub width: usize,
    pub height: usize,
    /// Top-left corner at frame 0.
    pub origin: (f64, f64),
    pub side: f64,
    /// Displacement per frame.
    pub velocity: (f64, f64),
    pub seed: u64,
}

impl Default for TranslatingSquare {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            origin: (64.0, 64.0),
            side: 96.0,
            velocity: (1.0, 0.5),
            seed: 7,
        }
    }
}

impl TranslatingSquare {
    pub fn corner_at(&self, t: usize) -> (f64, f64) {
        (self.origin.0 + self.velocity.0 * t as f64, self.origin.1 + self.velocity.1 * t as f64)
    }

    /// Whether `(x, y)` lies on the square at frame `t`.
    pub fn covers(&self, t: usize, x: f64, y: f64) -> bool {
        let (ox, oy) = self.corner_at(t);
        x >= ox && x < ox + self.side && y >= oy && y < oy + self.side
    }

    pub fn frames(&self, count: usize) -> Vec<Frame> {
        let bg = noise_texture(self.width, self.height, 2.0, self.seed);
        let tex_side = self.side.ceil() as usize + 2;
        let fg = noise_texture(tex_side, tex_side, 1.5, self.seed ^ 0x5eed);
        (0..count)
            .map(|t| {
                let (ox, oy) = self.corner_at(t);
                let g = Grid::from_fn(self.width, self.height, |x, y| {
                    let (fx, fy) = (x as f64, y as f64);
                    if self.covers(t, fx, fy) {
                        1.0 - fg.sample(fx - ox, fy - oy)
                    } else {
                        bg.get(x, y)
                    }
                });
                to_frame(&g)
            })
            .collect()
    }
}

/// Static noisy scene in which a striped block appears at a given frame.
#[derive(Debug, Clone)]
pub struct AppearingBlock {
    pub width: usize,
    pub height: usize,
    pub appear_at: usize,
    /// Top-left corner and side of the block.
    pub block: (usize, usize, usize),
    /// Standard deviation of per-frame sensor noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for AppearingBlock {
    fn default() -> Self {
        Self { width: 64, height: 64, appear_at: 40, block: (20, 24, 20), noise: 0.01, seed: 11 }
    }
}

impl AppearingBlock {
    pub fn frames(&self, count: usize) -> Vec<Frame> {
        let bg = noise_texture(self.width, self.height, 3.0, self.seed);
        let normal = Normal::new(0.0, self.noise).expect("finite noise level");
        let (bx, by, side) = self.block;
        (0..count)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(1000).wrapping_add(t as u64));
                let g = Grid::from_fn(self.width, self.height, |x, y| {
                    let inside = t >= self.appear_at && x >= bx && x < bx + side && y >= by && y < by + side;
                    let base = if inside {
                        if ((x - bx) / 2 + (y - by) / 2) % 2 == 0 {
                            0.95
                        } else {
                            0.05
                        }
                    } else {
                        bg.get(x, y)
                    };
                    base + normal.sample(&mut rng)
                });
                to_frame(&g)
            })
            .collect()
    }
}

/// Flow field with a block of side `side` at `(x0, y0)` moving by `motion`; zero elsewhere.
pub fn moving_block_flow(width: usize, height: usize, x0: usize, y0: usize, side: usize, motion: (f64, f64)) -> FlowField {
    FlowField::from_fn(width, height, |x, y| {
        if x >= x0 && x < x0 + side && y >= y0 && y < y0 + side {
            motion
        } else {
            (0.0, 0.0)
        }
    })
}

/// Uniform random unit vector.
pub fn random_unit3(rng: &mut impl Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}


/// Rig sequence on disk: `rig.txt`, flows `<pair>.<camera>.flo` for each
/// `(T, ω)` in `motions` over a constant `depth`, and `depth.<camera>.pgm`.
pub fn write_rig_sequence(dir: &std::path::Path, rig: &crate::egomotion::RigConfig, motions: &[([f64; 3], [f64; 3])], depth: f64) -> Result<(), Box<dyn std::error::Error>> {
    use crate::egomotion::{synthesize_flow, Vec3};
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("rig.txt"), rig.to_text())?;
    for (k, cam) in rig.cameras().iter().enumerate() {
        let d = crate::scenestate::DepthMap::constant(cam.width, cam.height, depth)?;
        d.save(&dir.join(format!("depth.{k}.pgm")))?;
    }
    for (i, (t, w)) in motions.iter().enumerate() {
        for k in 0..rig.len() {
            let cam = &rig.cameras()[k];
            let flow = synthesize_flow(rig, k, &Vec3::from(*t), &Vec3::from(*w), &Grid::filled(cam.width, cam.height, depth))?;
            crate::flowfield::save_flow(&dir.join(format!("{:04}.{k}.flo", i + 1)), &flow)?;
        }
    }
    Ok(())
}
