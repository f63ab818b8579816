//! Per-pixel depth, frozen particle volumes and background-change handling.
//!
//! The reference plane is the image plane of frame 0 at depth 0 with normal
//! +z; a frozen particle sits at `(x, y, depth(x, y))`.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::egomotion::EgoTrace;
use crate::image::Grid;
use crate::netpbm::{self, PnmError};
use crate::particlegrid::LayerStack;

pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("depth {value} at pixel {index} is not positive and finite")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Pnm(#[from] PnmError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot freeze a stack with no alive particles")]
    EmptyStack,
    #[error("depth map is {depth_w}x{depth_h} but the stack is {stack_w}x{stack_h}")]
    DimensionMismatch { depth_w: usize, depth_h: usize, stack_w: usize, stack_h: usize },
    #[error("a scene sourced from frame {0} is already registered")]
    DuplicateScene(usize),
    #[error("invalid background event: {0}")]
    InvalidEvent(String),
}

/// Strictly positive depth per pixel, distance from the reference plane.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    grid: Grid,
}

impl DepthMap {
    pub fn new(grid: Grid) -> Result<Self, SceneError> {
        if let Some((index, &value)) = grid.data().iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(SceneError::NonPositiveDepth { index, value });
        }
        Ok(Self { grid })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self, SceneError> {
        Self::new(Grid::filled(width, height, depth))
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.grid.get(x, y)
    }

    /// Bilinear sample with edge clamping.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        self.grid.sample(x, y)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.grid.min_max()
    }

    /// Writes a 16-bit PGM plus the `min=… max=…` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        let samples: Vec<u16> =
            self.grid.data().iter().map(|&d| if span > 0.0 { ((d - lo) / span * 65535.0).round() as u16 } else { 0 }).collect();
        netpbm::write_bytes(path, &netpbm::encode_pgm(self.width(), self.height(), 65535, &samples))?;
        std::fs::write(netpbm::sidecar_path(path), format!("min={lo} max={hi}\n"))?;
        Ok(())
    }
}

/// Parses `min=<f> max=<f>` (whitespace separated, any order).
pub fn parse_range(text: &str) -> Result<(f64, f64), SceneError> {
    let (mut lo, mut hi) = (None, None);
    for token in text.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(|| SceneError::Parse(format!("expected key=value, got {token:?}")))?;
        let v: f64 = value.parse().map_err(|_| SceneError::Parse(format!("bad number {value:?}")))?;
        match key {
            "min" => lo = Some(v),
            "max" => hi = Some(v),
            _ => return Err(SceneError::Parse(format!("unknown key {key:?}"))),
        }
    }
    match (lo, hi) {
        (Some(lo), Some(hi)) if lo <= hi => Ok((lo, hi)),
        (Some(_), Some(_)) => Err(SceneError::Parse("min exceeds max".into())),
        _ => Err(SceneError::Parse("sidecar needs both min and max".into())),
    }
}

/// Reads a PGM depth map; samples map linearly onto the sidecar's `[min, max]`.
pub fn load_depth(path: &Path) -> Result<DepthMap, SceneError> {
    let raster = netpbm::read(path)?;
    if raster.channels != 1 {
        return Err(SceneError::Parse("depth maps must be single-channel PGM".into()));
    }
    let side = std::fs::read_to_string(netpbm::sidecar_path(path))?;
    let (lo, hi) = parse_range(&side)?;
    let scale = raster.maxval as f64;
    let data = raster.samples.iter().map(|&s| lo + (hi - lo) * s as f64 / scale).collect();
    DepthMap::new(Grid::new(raster.width, raster.height, data).map_err(|e| SceneError::Parse(e.to_string()))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenParticle {
    pub id: usize,
    /// Layer-4 position on the reference plane.
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub weight: f64,
    pub label: usize,
}

/// Layer-4 snapshot lifted by depth. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenVolume {
    frame: usize,
    /// Offset of the scene's reference plane along the rig's lateral axis.
    plane_offset: f64,
    particles: Vec<FrozenParticle>,
}

impl FrozenVolume {
    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn plane_offset(&self) -> f64 {
        self.plane_offset
    }

    pub fn particles(&self) -> &[FrozenParticle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Copy placed on the reference plane of a scene at `offset`.
    pub fn relocated(&self, offset: f64) -> FrozenVolume {
        FrozenVolume { plane_offset: offset, ..self.clone() }
    }

    /// `(x, y, depth)` per particle.
    pub fn points(&self) -> Vec<[f64; 3]> {
        self.particles.iter().map(|p| [p.x, p.y, p.depth]).collect()
    }

    /// Planar layout, the 2-D footprint used as a fluid target.
    pub fn footprint(&self) -> Vec<(f64, f64)> {
        self.particles.iter().map(|p| (p.x, p.y)).collect()
    }

    /// Pose header lines followed by `id,x,y,depth,weight,label` rows.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# frame={} plane_offset={} normal=0,0,1", self.frame, self.plane_offset)?;
        writeln!(w, "id,x,y,depth,weight,label")?;
        for p in &self.particles {
            writeln!(w, "{},{},{},{},{},{}", p.id, p.x, p.y, p.depth, p.weight, p.label)?;
        }
        Ok(())
    }

    /// Inverse of [`FrozenVolume::write_csv`].
    pub fn parse_csv(text: &str) -> Result<Self, SceneError> {
        let mut lines = text.lines();
        let pose = lines.next().and_then(|l| l.strip_prefix("# ")).ok_or_else(|| SceneError::Parse("missing pose header".into()))?;
        let (mut frame, mut plane_offset) = (None, None);
        for kv in pose.split_whitespace() {
            match kv.split_once('=') {
                Some(("frame", v)) => frame = v.parse().ok(),
                Some(("plane_offset", v)) => plane_offset = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(frame), Some(plane_offset)) = (frame, plane_offset) else {
            return Err(SceneError::Parse(format!("bad pose header {pose:?}")));
        };
        if lines.next() != Some("id,x,y,depth,weight,label") {
            return Err(SceneError::Parse("missing column header".into()));
        }
        let particles = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || SceneError::Parse(format!("bad particle row {l:?}"));
                if f.len() != 6 {
                    return Err(bad());
                }
                let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
                Ok(FrozenParticle {
                    id: f[0].parse().map_err(|_| bad())?,
                    x: num(1)?,
                    y: num(2)?,
                    depth: num(3)?,
                    weight: num(4)?,
                    label: f[5].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if particles.is_empty() {
            return Err(SceneError::EmptyStack);
        }
        Ok(Self { frame, plane_offset, particles })
    }

    /// Subset of the particles accepted by `keep`, or `None` if none are.
    pub fn filtered(&self, keep: impl Fn(&FrozenParticle) -> bool) -> Option<FrozenVolume> {
        let particles: Vec<FrozenParticle> = self.particles.iter().filter(|p| keep(p)).cloned().collect();
        (!particles.is_empty()).then(|| FrozenVolume { particles, ..self.clone() })
    }
}

/// Snapshots alive layer-4 positions with bilinearly sampled depth.
pub fn freeze(stack: &LayerStack, depth: &DepthMap, frame_idx: usize) -> Result<FrozenVolume, SceneError> {
    if (depth.width(), depth.height()) != (stack.width(), stack.height()) {
        return Err(SceneError::DimensionMismatch {
            depth_w: depth.width(),
            depth_h: depth.height(),
            stack_w: stack.width(),
            stack_h: stack.height(),
        });
    }
    let particles: Vec<FrozenParticle> = stack
        .alive()
        .map(|p| {
            let (x, y) = p.smoothed;
            FrozenParticle { id: p.id, x, y, depth: depth.sample(x, y), weight: p.weight, label: p.lcs_label }
        })
        .collect();
    if particles.is_empty() {
        return Err(SceneError::EmptyStack);
    }
    Ok(FrozenVolume { frame: frame_idx, plane_offset: 0.0, particles })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundEvent {
    pub frame: usize,
    /// Signed lateral displacement accumulated over the window.
    pub direction: f64,
    /// Frame whose depth should be ingested for the new scene.
    pub new_scene_frame: usize,
}

/// Every window crossing in the trace. The sum covers up to `window` most
/// recent lateral translations; after an event, accumulation restarts.
pub fn background_events(trace: &EgoTrace, window: usize, threshold: f64) -> Vec<BackgroundEvent> {
    let lateral = trace.lateral();
    let mut events = Vec::new();
    let mut start = 0;
    for i in 0..lateral.len() {
        let lo = start.max((i + 1).saturating_sub(window));
        let sum: f64 = lateral[lo..=i].iter().map(|(_, x)| x).sum();
        if sum.abs() > threshold {
            let frame = lateral[i].0;
            events.push(BackgroundEvent { frame, direction: sum, new_scene_frame: frame });
            start = i + 1;
        }
    }
    events
}

/// First background change in the trace, if any.
pub fn detect_background_change(trace: &EgoTrace, window: usize, threshold: f64) -> Option<BackgroundEvent> {
    background_events(trace, window, threshold).into_iter().next()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: usize,
    /// Lateral offset of the reference plane from scene 0.
    pub offset: f64,
    pub source_frame: usize,
    pub depth_size: (usize, usize),
    pub depth_range: (f64, f64),
}

/// Scene poses; scene 0 is the starting view at offset 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRegistry {
    scenes: Vec<SceneRecord>,
}

impl SceneRegistry {
    pub fn new(initial_depth: &DepthMap) -> Self {
        Self {
            scenes: vec![SceneRecord {
                id: 0,
                offset: 0.0,
                source_frame: 0,
                depth_size: (initial_depth.width(), initial_depth.height()),
                depth_range: initial_depth.min_max(),
            }],
        }
    }

    pub fn scenes(&self) -> &[SceneRecord] {
        &self.scenes
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// One line per scene: `scene <id> offset=<f> frame=<n> depth=<w>x<h> range=<min>,<max>`.
    pub fn write_manifest(&self, w: &mut impl Write) -> std::io::Result<()> {
        for s in &self.scenes {
            writeln!(
                w,
                "scene {} offset={} frame={} depth={}x{} range={},{}",
                s.id, s.offset, s.source_frame, s.depth_size.0, s.depth_size.1, s.depth_range.0, s.depth_range.1
            )?;
        }
        Ok(())
    }
}

/// Registers the scene seen after `event`, placed `event.direction` from scene 0. Returns its id.
pub fn relocate_scene(event: &BackgroundEvent, new_depth: &DepthMap, world: &mut SceneRegistry) -> Result<usize, SceneError> {
    if !(event.direction.is_finite() && event.direction != 0.0) {
        return Err(SceneError::InvalidEvent(format!("direction {} is not a displacement", event.direction)));
    }
    if world.scenes.iter().any(|s| s.source_frame == event.new_scene_frame) {
        return Err(SceneError::DuplicateScene(event.new_scene_frame));
    }
    let id = world.scenes.len();
    world.scenes.push(SceneRecord {
        id,
        offset: event.direction,
        source_frame: event.new_scene_frame,
        depth_size: (new_depth.width(), new_depth.height()),
        depth_range: new_depth.min_max(),
    });
    Ok(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("min=0.5 max=3").unwrap(), (0.5, 3.0));
        assert_eq!(parse_range("max=3\nmin=1\n").unwrap(), (1.0, 3.0));
        assert!(parse_range("min=1").is_err());
        assert!(parse_range("min=4 max=3").is_err());
        assert!(parse_range("lo=1 max=3").is_err());
    }

    #[test]
    fn depth_rejects_nonpositive() {
        let g = Grid::from_fn(4, 4, |x, _| x as f64);
        assert!(matches!(DepthMap::new(g), Err(SceneError::NonPositiveDepth { index: 0, .. })));
    }
}
