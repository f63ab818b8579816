//! Frame-directory orchestration: flow, tracking, coherent regions, the
//! new-object gate with shape capture, ego-motion and scene changes, freeze
//! and fluid molding. Every stage is also exposed as a function so single
//! stages can run in isolation on explicit inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::egomotion::{estimate_egomotion, EgoTrace, RigConfig};
use crate::flowfield::{estimate_flow, load_flow, save_flow, visualize, FlowParams};
use crate::fluidctl::{init_fluid, mold, Bounds, ControlSet, FluidState, MoldOutcome, MoldParams, Vec2, REST_SPACING_RATIO};
use crate::image::{FlowField, Frame, Grid};
use crate::lcs::{build_flow_map, ftle, segment, FtleField};
use crate::netpbm::{self, encode_ppm, read_frame};
use crate::particlegrid::{init_layers, Direction, LayerStack, APPEARANCE_RATE, DEFAULT_MAX_NEIGHBORS, DEFAULT_PRUNE_QUANTILE};
use crate::scenestate::{background_events, freeze, load_depth, relocate_scene, DepthMap, FrozenVolume, SceneRegistry};
use crate::shape::{self, calibrate_theta, fourier_descriptors, gist, motion_mask, trace_boundary, BinaryMask, GistGate, ShapeDescriptor, ShapeError};

const FRAME_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("path does not exist: {0}")]
    MissingPath(PathBuf),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("need at least 2 frames in {dir}, found {found}")]
    TooFewFrames { dir: PathBuf, found: usize },
    #[error("freeze frame {frame} is outside 0..{frames}")]
    FreezeOutOfRange { frame: usize, frames: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{stage} stage failed: {msg}")]
    Stage { stage: Stage, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn stage_err(stage: Stage) -> impl Fn(&dyn fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage { stage, msg: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Flow,
    Track,
    Lcs,
    Gist,
    Shape,
    Ego,
    Scene,
    Freeze,
    Fluid,
}

impl Stage {
    pub const ALL: [Stage; 9] = [Stage::Flow, Stage::Track, Stage::Lcs, Stage::Gist, Stage::Shape, Stage::Ego, Stage::Scene, Stage::Freeze, Stage::Fluid];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Flow => "flow",
            Stage::Track => "track",
            Stage::Lcs => "lcs",
            Stage::Gist => "gist",
            Stage::Shape => "shape",
            Stage::Ego => "ego",
            Stage::Scene => "scene",
            Stage::Freeze => "freeze",
            Stage::Fluid => "fluid",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fluid settings in units of the fluid smoothing length.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidConfig {
    pub gain: f64,
    pub dt: f64,
    pub viscosity: f64,
    /// Downward acceleration in image space.
    pub gravity: f64,
    /// Coarse-velocity smoothing radius as a multiple of `h`.
    pub smoothing: f64,
    pub max_steps: usize,
}

impl Default for FluidConfig {
    fn default() -> Self {
        Self { gain: 16.0, dt: 0.005, viscosity: 2.0, gravity: 9.81, smoothing: 2.0, max_steps: 4000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Toggles {
    pub lcs: bool,
    pub gist: bool,
    pub shape: bool,
    pub ego: bool,
    pub freeze: bool,
    pub fluid: bool,
    /// Write every dense flow field and its colour rendering.
    pub write_flows: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { lcs: true, gist: true, shape: true, ego: true, freeze: true, fluid: true, write_flows: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub frames_dir: PathBuf,
    pub out_dir: PathBuf,
    pub depth: Option<PathBuf>,
    pub rig: Option<PathBuf>,
    /// Directory of rig flows `<pair>.<camera>.flo`, grouped by the stem and
    /// matched to frame pairs in lexicographic order, plus optional
    /// `depth.<camera>.pgm` maps.
    pub rig_flows: Option<PathBuf>,
    pub flow: FlowParams,
    pub epsilon: f64,
    pub alpha: Option<f64>,
    pub max_neighbors: usize,
    pub sweeps: usize,
    pub prune_quantile: f64,
    pub tau: usize,
    pub lcs_spacing: usize,
    pub ridge_quantile: f64,
    /// Fixed gist threshold; calibrated on the first frames when absent.
    pub gist_theta: Option<f64>,
    pub gist_calibration: usize,
    pub motion_threshold: f64,
    /// Grey-level difference used when an appearing object has no motion.
    pub change_threshold: f64,
    pub scene_window: usize,
    pub scene_threshold: f64,
    pub fluid: FluidConfig,
    pub seed: u64,
    pub freeze_at: Option<usize>,
    pub stages: Toggles,
}

impl PipelineConfig {
    /// Defaults for a frame directory and output directory.
    pub fn new(frames_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            frames_dir: frames_dir.into(),
            out_dir: out_dir.into(),
            depth: None,
            rig: None,
            rig_flows: None,
            flow: FlowParams::default(),
            epsilon: 4.0,
            alpha: None,
            max_neighbors: DEFAULT_MAX_NEIGHBORS,
            sweeps: 3,
            prune_quantile: DEFAULT_PRUNE_QUANTILE,
            tau: crate::lcs::DEFAULT_TAU,
            lcs_spacing: crate::lcs::DEFAULT_SPACING,
            ridge_quantile: crate::lcs::DEFAULT_RIDGE_QUANTILE,
            gist_theta: None,
            gist_calibration: 10,
            motion_threshold: 0.5,
            change_threshold: 0.1,
            scene_window: crate::scenestate::DEFAULT_WINDOW,
            scene_threshold: crate::scenestate::DEFAULT_THRESHOLD,
            fluid: FluidConfig::default(),
            seed: 0,
            freeze_at: None,
            stages: Toggles::default(),
        }
    }

    /// Parses `section.key = value` lines; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::new(PathBuf::new(), PathBuf::new());
        let (mut frames, mut out) = (None, None);
        for (ln, raw) in text.lines().enumerate() {
            let line = ln + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Parse { line, msg: "expected `section.key = value`".into() })?;
            let (key, value) = (key.trim(), value.trim());
            let perr = |msg: String| ConfigError::Parse { line, msg };
            let num = |v: &str| v.parse::<f64>().map_err(|_| perr(format!("{key}: {v:?} is not a number")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| perr(format!("{key}: {v:?} is not a non-negative integer")));
            let flag = |v: &str| match v {
                "true" | "on" | "yes" => Ok(true),
                "false" | "off" | "no" => Ok(false),
                _ => Err(perr(format!("{key}: {v:?} is not a boolean"))),
            };
            let path = |v: &str| base.join(v);
            match key {
                "paths.frames" => frames = Some(path(value)),
                "paths.out" => out = Some(path(value)),
                "paths.depth" => cfg.depth = Some(path(value)),
                "paths.rig" => cfg.rig = Some(path(value)),
                "paths.rig_flows" => cfg.rig_flows = Some(path(value)),
                "flow.levels" => cfg.flow.levels = int(value)?,
                "flow.window" => cfg.flow.window = int(value)?,
                "flow.poly_window" => cfg.flow.poly_window = int(value)?,
                "flow.iterations" => cfg.flow.iterations = int(value)?,
                "flow.max_displacement" => cfg.flow.max_displacement = Some(num(value)?),
                "particles.epsilon" => cfg.epsilon = num(value)?,
                "particles.alpha" => cfg.alpha = Some(num(value)?),
                "particles.max_neighbors" => cfg.max_neighbors = int(value)?,
                "particles.sweeps" => cfg.sweeps = int(value)?,
                "particles.prune_quantile" => cfg.prune_quantile = num(value)?,
                "lcs.tau" => cfg.tau = int(value)?,
                "lcs.spacing" => cfg.lcs_spacing = int(value)?,
                "lcs.ridge_quantile" => cfg.ridge_quantile = num(value)?,
                "gist.theta" => cfg.gist_theta = Some(num(value)?),
                "gist.calibration" => cfg.gist_calibration = int(value)?,
                "shape.motion_threshold" => cfg.motion_threshold = num(value)?,
                "shape.change_threshold" => cfg.change_threshold = num(value)?,
                "scene.window" => cfg.scene_window = int(value)?,
                "scene.threshold" => cfg.scene_threshold = num(value)?,
                "fluid.gain" => cfg.fluid.gain = num(value)?,
                "fluid.dt" => cfg.fluid.dt = num(value)?,
                "fluid.viscosity" => cfg.fluid.viscosity = num(value)?,
                "fluid.gravity" => cfg.fluid.gravity = num(value)?,
                "fluid.smoothing" => cfg.fluid.smoothing = num(value)?,
                "fluid.max_steps" => cfg.fluid.max_steps = int(value)?,
                "run.seed" => cfg.seed = value.parse().map_err(|_| perr(format!("run.seed: {value:?} is not an integer")))?,
                "run.freeze_at" => cfg.freeze_at = Some(int(value)?),
                "stages.lcs" => cfg.stages.lcs = flag(value)?,
                "stages.gist" => cfg.stages.gist = flag(value)?,
                "stages.shape" => cfg.stages.shape = flag(value)?,
                "stages.ego" => cfg.stages.ego = flag(value)?,
                "stages.freeze" => cfg.stages.freeze = flag(value)?,
                "stages.fluid" => cfg.stages.fluid = flag(value)?,
                "stages.write_flows" => cfg.stages.write_flows = flag(value)?,
                _ => return Err(ConfigError::UnknownKey { line, key: key.to_string() }),
            }
        }
        cfg.frames_dir = frames.ok_or(ConfigError::Missing("paths.frames"))?;
        cfg.out_dir = out.ok_or(ConfigError::Missing("paths.out"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self::parse(&text, base)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for p in [Some(&self.frames_dir), self.depth.as_ref(), self.rig.as_ref(), self.rig_flows.as_ref()].into_iter().flatten() {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.clone()));
            }
        }
        self.flow.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let checks: [(bool, &str); 12] = [
            (self.epsilon >= 1.0, "particles.epsilon must be >= 1"),
            (self.alpha.is_none_or(|a| a >= 0.0), "particles.alpha must be >= 0"),
            (self.max_neighbors >= 1, "particles.max_neighbors must be >= 1"),
            (self.prune_quantile > 0.0 && self.prune_quantile < 1.0, "particles.prune_quantile must lie in (0, 1)"),
            (self.tau >= 1 && self.lcs_spacing >= 1, "lcs.tau and lcs.spacing must be >= 1"),
            (self.ridge_quantile > 0.0 && self.ridge_quantile < 1.0, "lcs.ridge_quantile must lie in (0, 1)"),
            (self.gist_theta.is_none_or(|t| t > 0.0) && self.gist_calibration >= 2, "gist.theta must be > 0 and gist.calibration >= 2"),
            (self.motion_threshold > 0.0 && self.change_threshold > 0.0, "shape thresholds must be positive"),
            (self.scene_window >= 1 && self.scene_threshold > 0.0, "scene.window must be >= 1 and scene.threshold > 0"),
            (self.fluid.gain >= 0.0 && self.fluid.dt > 0.0 && self.fluid.viscosity >= 0.0, "fluid gain, dt and viscosity must be non-negative (dt positive)"),
            (self.fluid.smoothing >= 1.0 && self.fluid.gravity.is_finite(), "fluid.smoothing must be >= 1"),
            (self.rig.is_some() == self.rig_flows.is_some(), "paths.rig and paths.rig_flows go together"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(ConfigError::Invalid(msg.to_string())),
            None => Ok(()),
        }
    }
}

/// Frame files of `dir` in lexicographic filename order.
pub fn discover_frames(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str())))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    pub name: String,
    pub timings: Vec<(Stage, Duration)>,
    pub alive: usize,
    pub pruned: usize,
    pub added: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub frame: usize,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub frames: Vec<FrameRecord>,
    pub events: Vec<Event>,
    pub statuses: BTreeMap<Stage, StageStatus>,
    pub manifest: Vec<ManifestEntry>,
    /// Seed recorded for reproduction; every stage is deterministic.
    pub seed: u64,
    pub gist_theta: Option<f64>,
    pub mold: Option<MoldOutcome>,
}

impl RunReport {
    pub fn success(&self) -> bool {
        !self.statuses.values().any(|s| matches!(s, StageStatus::Failed(_)))
    }

    pub fn events_of(&self, stage: Stage) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.stage == stage)
    }

    fn log(&mut self, frame: usize, stage: Stage, message: impl Into<String>) {
        let message = message.into();
        info!("frame {frame} {stage}: {message}");
        self.events.push(Event { frame, stage, message });
    }

    fn fail(&mut self, frame: usize, stage: Stage, err: impl fmt::Display) {
        let msg = err.to_string();
        warn!("frame {frame} {stage} failed: {msg}");
        self.events.push(Event { frame, stage, message: format!("error: {msg}") });
        self.statuses.entry(stage).or_insert(StageStatus::Failed(msg));
    }

    fn ok(&mut self, stage: Stage) {
        self.statuses.entry(stage).or_insert(StageStatus::Ok);
    }

    pub fn write_text(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "status {}", if self.success() { "ok" } else { "failed" })?;
        writeln!(w, "seed {}", self.seed)?;
        for (stage, s) in &self.statuses {
            match s {
                StageStatus::Ok => writeln!(w, "stage {stage} ok")?,
                StageStatus::Skipped => writeln!(w, "stage {stage} skipped")?,
                StageStatus::Failed(m) => writeln!(w, "stage {stage} failed: {m}")?,
            }
        }
        if let Some(t) = self.gist_theta {
            writeln!(w, "gist theta {t}")?;
        }
        for e in &self.events {
            writeln!(w, "event frame={} stage={} {}", e.frame, e.stage, e.message)?;
        }
        writeln!(w, "manifest {} files", self.manifest.len())
    }

    /// Per-frame timings in milliseconds, one column per stage.
    pub fn write_csv(&self, w: &mut impl Write) -> io::Result<()> {
        write!(w, "frame,name,alive,pruned,added")?;
        for s in Stage::ALL {
            write!(w, ",{s}_ms")?;
        }
        writeln!(w)?;
        for f in &self.frames {
            write!(w, "{},{},{},{},{}", f.index, f.name, f.alive, f.pruned, f.added)?;
            for s in Stage::ALL {
                let ms: f64 = f.timings.iter().filter(|(t, _)| *t == s).map(|(_, d)| d.as_secs_f64() * 1e3).sum();
                write!(w, ",{ms:.3}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Records every file written below the output directory.
struct Outputs {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    fn path(&self, rel: &str) -> Result<PathBuf, PipelineError> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(p)
    }

    fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).map_err(io_err(&p))?;
        self.written.push(p);
        Ok(())
    }

    fn with(&mut self, rel: &str, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), PipelineError> {
        let p = self.path(rel)?;
        let mut w = BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err(&p))?;
        self.written.push(p);
        Ok(())
    }

    /// Registers a file written by a library routine.
    fn mark(&mut self, rel: &str) {
        self.written.push(self.root.join(rel));
    }

    fn manifest(&self) -> Result<Vec<ManifestEntry>, PipelineError> {
        let mut paths = self.written.clone();
        paths.sort();
        paths.dedup();
        paths
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(io_err(p))?;
                let rel = p.strip_prefix(&self.root).unwrap_or(p);
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                Ok(ManifestEntry { path: rel, bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) })
            })
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `<sha256>  <bytes>  <path>` per line, sorted by path.
pub fn write_manifest(w: &mut impl Write, entries: &[ManifestEntry]) -> io::Result<()> {
    for e in entries {
        writeln!(w, "{}  {}  {}", e.sha256, e.bytes, e.path)?;
    }
    Ok(())
}

fn tag(t: usize) -> String {
    format!("{t:04}")
}

/// Dense flow between two frames.
pub fn flow_stage(prev: &Frame, next: &Frame, params: &FlowParams) -> Result<FlowField, PipelineError> {
    let est = estimate_flow(prev, next, params).map_err(|e| stage_err(Stage::Flow)(&e))?;
    if est.degenerate {
        warn!("flow: a frame has zero variance; using zero flow");
    }
    Ok(est.flow)
}

/// Labelled FTLE over `flows[t0..t0 + tau]`.
pub fn lcs_stage(flows: &[FlowField], t0: usize, tau: usize, spacing: usize, ridge_quantile: f64) -> Result<FtleField, PipelineError> {
    let err = stage_err(Stage::Lcs);
    let map = build_flow_map(flows, t0, tau, spacing).map_err(|e| err(&e))?;
    let field = ftle(&map).map_err(|e| err(&e))?;
    segment(&field, ridge_quantile).map_err(|e| err(&e))
}

/// Mask, boundary and descriptors of a newly appeared object.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCapture {
    pub mask: BinaryMask,
    /// Whether the grey-level change mask replaced an empty motion mask.
    pub from_change: bool,
    pub boundary: shape::Boundary,
    pub descriptor: ShapeDescriptor,
}

/// Thresholded, opened absolute grey-level difference.
pub fn change_mask(prev: &Frame, next: &Frame, threshold: f64) -> BinaryMask {
    BinaryMask::from_fn(next.width(), next.height(), |x, y| (next.get(x, y) - prev.get(x, y)).abs() > threshold).open()
}

/// Motion mask of `flow`, falling back to the grey-level change between
/// `prev` and `frame` when the object does not move; then the boundary of
/// the largest component and its Fourier descriptors.
pub fn shape_stage(flow: &FlowField, frame: &Frame, prev: Option<&Frame>, motion_threshold: f64, change_threshold: f64) -> Result<ShapeCapture, PipelineError> {
    let err = stage_err(Stage::Shape);
    let moving = motion_mask(flow, motion_threshold);
    let (mask, from_change) = match (moving, prev) {
        (Ok(m), _) if m.count() >= shape::MIN_COMPONENT_AREA => (m, false),
        (Ok(_) | Err(ShapeError::EmptyMask), Some(p)) => (change_mask(p, frame, change_threshold), true),
        (Ok(_), None) => return Err(err(&ShapeError::EmptyMask)),
        (Err(e), _) => return Err(err(&e)),
    };
    let boundary = trace_boundary(&mask).map_err(|e| err(&e))?;
    let descriptor = fourier_descriptors(&boundary.to_f64()).map_err(|e| err(&e))?;
    Ok(ShapeCapture { mask, from_change, boundary, descriptor })
}

/// Molding of a fluid into a planar target set given in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MoldResult {
    pub outcome: MoldOutcome,
    /// Fluid state in simulation units (y up, `h = 1`).
    pub state: FluidState,
    /// Pixels per simulation unit.
    pub scale: f64,
    pub height: usize,
}

impl MoldResult {
    pub fn to_pixels(&self, p: &Vec2) -> (f64, f64) {
        (p.x * self.scale, self.height as f64 - p.y * self.scale)
    }

    /// `id,x,y,vx,vy,density` in pixels and pixels per unit time.
    pub fn write_state(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "id,x,y,vx,vy,density")?;
        for (i, (p, v)) in self.state.positions.iter().zip(&self.state.velocities).enumerate() {
            let (x, y) = self.to_pixels(p);
            writeln!(w, "{i},{x},{y},{},{},{}", v.x * self.scale, -v.y * self.scale, self.state.densities()[i])?;
        }
        Ok(())
    }

    pub fn cross_section(&self) -> Vec<(f64, f64)> {
        self.outcome.cross_section.iter().map(|p| self.to_pixels(p)).collect()
    }

    /// Fluid particles in white and the cross-section in red on black.
    pub fn render(&self, width: usize) -> Vec<u8> {
        let h = self.height;
        let mut rgb = vec![0u8; width * h * 3];
        let mut put = |(x, y): (f64, f64), c: [u8; 3]| {
            let (x, y) = (x.round(), y.round());
            if x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < h {
                let i = 3 * (y as usize * width + x as usize);
                rgb[i..i + 3].copy_from_slice(&c);
            }
        };
        for p in &self.state.positions {
            put(self.to_pixels(p), [255, 255, 255]);
        }
        for p in self.cross_section() {
            put(p, [255, 0, 0]);
        }
        encode_ppm(width, h, &rgb)
    }
}

/// Pours a block of as many particles as targets from the top of a
/// `width x height` frame and molds it onto the footprint of `volume`.
/// The fluid rest pitch equals the particle spacing `epsilon`.
pub fn fluid_stage(volume: &FrozenVolume, width: usize, height: usize, epsilon: f64, cfg: &FluidConfig) -> Result<MoldResult, PipelineError> {
    let err = stage_err(Stage::Fluid);
    let scale = epsilon / REST_SPACING_RATIO;
    let to_sim = |(x, y): (f64, f64)| Vec2::new(x / scale, (height as f64 - y) / scale);
    let targets: Vec<Vec2> = volume.footprint().into_iter().map(to_sim).collect();
    let control = ControlSet::new(targets, cfg.gain, f64::INFINITY).map_err(|e| err(&e))?;
    let bounds = Bounds::new((0.0, 0.0), (width as f64 / scale, height as f64 / scale));
    let mut state = init_fluid(control.targets.len(), bounds, 1.0).map_err(|e| err(&e))?;
    let params = MoldParams { dt: cfg.dt, gravity: Vec2::new(0.0, -cfg.gravity), viscosity: cfg.viscosity, smoothing_radius: cfg.smoothing, max_steps: cfg.max_steps };
    let outcome = mold(&mut state, &control, &params).map_err(|e| err(&e))?;
    state.update_density();
    Ok(MoldResult { outcome, state, scale, height })
}

/// Rig flows grouped by the filename stem before the first `.`, each group
/// ordered by camera.
pub fn discover_rig_flows(dir: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>, PipelineError> {
    let mut groups: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        if p.extension().and_then(|e| e.to_str()) != Some("flo") {
            continue;
        }
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let stem = name.split('.').next().unwrap_or_default().to_string();
        groups.entry(stem).or_default().push(p);
    }
    for files in groups.values_mut() {
        files.sort();
    }
    Ok(groups)
}

/// Per-camera depth maps `depth.<k>.pgm` next to the rig flows; `None`
/// unless every camera has one, in which case translation is metric.
pub fn load_rig_depth(dir: &Path, cameras: usize) -> Result<Option<Vec<Grid>>, PipelineError> {
    let paths: Vec<PathBuf> = (0..cameras).map(|k| dir.join(format!("depth.{k}.pgm"))).collect();
    if !paths.iter().all(|p| p.is_file()) {
        return Ok(None);
    }
    let maps = paths
        .iter()
        .map(|p| load_depth(p).map(|d| d.grid().clone()).map_err(|e| PipelineError::Stage { stage: Stage::Ego, msg: format!("{}: {e}", p.display()) }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(maps))
}

struct Tracker {
    stack: LayerStack,
    alpha: f64,
}

/// Runs the whole pipeline and writes every artifact under `out_dir`.
pub fn run(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let mut report = RunReport { seed: cfg.seed, ..RunReport::default() };
    let frame_paths = discover_frames(&cfg.frames_dir)?;
    let n = frame_paths.len();
    if n < 2 {
        return Err(PipelineError::TooFewFrames { dir: cfg.frames_dir.clone(), found: n });
    }
    if let Some(f) = cfg.freeze_at {
        if f >= n {
            return Err(PipelineError::FreezeOutOfRange { frame: f, frames: n });
        }
    }
    let names: Vec<String> = frame_paths.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect();
    let frames: Vec<Frame> = frame_paths.iter().map(|p| read_frame(p).map_err(|e| PipelineError::Stage { stage: Stage::Flow, msg: format!("{}: {e}", p.display()) })).collect::<Result<_, _>>()?;
    let (width, height) = (frames[0].width(), frames[0].height());
    let mut out = Outputs::new(&cfg.out_dir)?;
    for s in Stage::ALL {
        let on = match s {
            Stage::Flow | Stage::Track => true,
            Stage::Lcs => cfg.stages.lcs,
            Stage::Gist => cfg.stages.gist,
            Stage::Shape => cfg.stages.gist && cfg.stages.shape,
            Stage::Ego | Stage::Scene => cfg.stages.ego && cfg.rig.is_some(),
            Stage::Freeze => cfg.stages.freeze,
            Stage::Fluid => cfg.stages.freeze && cfg.stages.fluid,
        };
        if !on {
            report.statuses.insert(s, StageStatus::Skipped);
        }
    }
    let mut records: Vec<FrameRecord> = names.iter().enumerate().map(|(i, name)| FrameRecord { index: i, name: name.clone(), timings: Vec::new(), alive: 0, pruned: 0, added: 0 }).collect();

    // dense flow per adjacent pair, buffered for every later stage
    let mut flows = Vec::with_capacity(n - 1);
    for t in 1..n {
        let clock = Instant::now();
        let flow = flow_stage(&frames[t - 1], &frames[t], &cfg.flow)?;
        if cfg.stages.write_flows {
            let rel = format!("flow/{}.flo", tag(t));
            let p = out.path(&rel)?;
            save_flow(&p, &flow).map_err(io_err(&p))?;
            out.mark(&rel);
            out.bytes(&format!("flow/{}.ppm", tag(t)), &encode_ppm(width, height, &visualize(&flow)))?;
        }
        flows.push(flow);
        records[t].timings.push((Stage::Flow, clock.elapsed()));
    }
    report.ok(Stage::Flow);

    let clock = Instant::now();
    let stack = init_layers(&frames[0], cfg.epsilon).map_err(|e| stage_err(Stage::Track)(&e))?;
    let alpha = cfg.alpha.unwrap_or_else(|| stack.alpha());
    let mut tracker = Tracker { stack, alpha };
    records[0].alive = tracker.stack.alive_count();
    records[0].timings.push((Stage::Track, clock.elapsed()));
    out.with(&format!("particles/{}.csv", tag(0)), |w| tracker.stack.write_snapshot(w))?;

    // gist gate
    let mut gate = None;
    let mut gist_rows: Vec<(usize, Option<f64>, bool)> = Vec::new();
    if cfg.stages.gist {
        let clock = Instant::now();
        let gists: Result<Vec<_>, _> = frames.iter().map(gist).collect();
        match gists.and_then(|g| {
            let theta = match cfg.gist_theta {
                Some(t) => t,
                None => calibrate_theta(&g[..cfg.gist_calibration.min(n)])?,
            };
            Ok((g, theta))
        }) {
            Ok((g, theta)) => {
                report.gist_theta = Some(theta);
                report.log(0, Stage::Gist, format!("armed with theta {theta}"));
                let mut armed = GistGate::new(theta);
                if let Err(e) = armed.observe(&g[0]) {
                    report.fail(0, Stage::Gist, e);
                }
                gist_rows.push((0, None, false));
                gate = Some((armed, g));
            }
            Err(e) => report.fail(0, Stage::Gist, e),
        }
        records[0].timings.push((Stage::Gist, clock.elapsed()));
    }

    let depth = match &cfg.depth {
        Some(p) => load_depth(p).map_err(|e| stage_err(Stage::Freeze)(&e))?,
        None => DepthMap::constant(width, height, 1.0).map_err(|e| stage_err(Stage::Freeze)(&e))?,
    };

    // ego-motion inputs
    let rig = match (&cfg.rig, cfg.stages.ego) {
        (Some(p), true) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Some(RigConfig::parse(&text).map_err(|e| stage_err(Stage::Ego)(&e))?)
        }
        _ => None,
    };
    let rig_flows = match (&rig, &cfg.rig_flows) {
        (Some(_), Some(dir)) => discover_rig_flows(dir)?.into_values().collect::<Vec<_>>(),
        _ => Vec::new(),
    };
    let rig_depth = match (&rig, &cfg.rig_flows) {
        (Some(rig), Some(dir)) => load_rig_depth(dir, rig.len())?,
        _ => None,
    };
    let mut trace = EgoTrace::new();
    let mut registry = SceneRegistry::new(&depth);

    let freeze_frame = cfg.freeze_at.unwrap_or(n - 1);
    let mut last_capture: Option<ShapeCapture> = None;
    for t in 1..n {
        let flow = &flows[t - 1];
        let frame = &frames[t];
        let err = |s| stage_err(s);

        let clock = Instant::now();
        let s = &mut tracker.stack;
        s.propagate(flow, flow, Direction::Forward).map_err(|e| err(Stage::Track)(&e))?;
        s.link(cfg.max_neighbors).map_err(|e| err(Stage::Track)(&e))?;
        records[t].timings.push((Stage::Track, clock.elapsed()));

        if cfg.stages.lcs {
            let clock = Instant::now();
            let tau = cfg.tau.min(t);
            match lcs_stage(&flows, t - tau, tau, cfg.lcs_spacing, cfg.ridge_quantile) {
                Ok(labels) => {
                    tracker.stack.assign_weights(&labels);
                    let rel = format!("lcs/{}.pgm", tag(t));
                    let p = out.path(&rel)?;
                    labels.save_pgm16(&p).map_err(|e| err(Stage::Lcs)(&e))?;
                    out.mark(&rel);
                    out.mark(&format!("{rel}.txt"));
                    out.with(&format!("lcs/{}_labels.txt", tag(t)), |w| labels.write_labels(w))?;
                    report.ok(Stage::Lcs);
                }
                Err(e) => report.fail(t, Stage::Lcs, e),
            }
            records[t].timings.push((Stage::Lcs, clock.elapsed()));
        }

        let clock = Instant::now();
        let s = &mut tracker.stack;
        s.optimize(frame, tracker.alpha, cfg.sweeps).map_err(|e| err(Stage::Track)(&e))?;
        let pruned = s.prune(cfg.prune_quantile).map_err(|e| err(Stage::Track)(&e))?;
        let added = s.add_particles(frame).map_err(|e| err(Stage::Track)(&e))?;
        s.link(cfg.max_neighbors).map_err(|e| err(Stage::Track)(&e))?;
        s.layer4_update().map_err(|e| err(Stage::Track)(&e))?;
        s.refresh_appearance(frame, APPEARANCE_RATE).map_err(|e| err(Stage::Track)(&e))?;
        records[t].alive = s.alive_count();
        records[t].pruned = pruned.len();
        records[t].added = added.len();
        if !pruned.is_empty() || !added.is_empty() {
            report.log(t, Stage::Track, format!("pruned {} added {}", pruned.len(), added.len()));
        }
        out.with(&format!("particles/{}.csv", tag(t)), |w| s.write_snapshot(w))?;
        records[t].timings.push((Stage::Track, clock.elapsed()));

        if let Some((armed, gists)) = gate.as_mut() {
            let clock = Instant::now();
            let distance = armed.distance(&gists[t]).ok().flatten();
            match armed.observe(&gists[t]) {
                Ok(hit) => {
                    gist_rows.push((t, distance, hit));
                    if hit {
                        report.log(t, Stage::Gist, format!("new object, distance {}", distance.unwrap_or(f64::NAN)));
                        if cfg.stages.shape {
                            let sclock = Instant::now();
                            match shape_stage(flow, frame, Some(&frames[t - 1]), cfg.motion_threshold, cfg.change_threshold) {
                                Ok(cap) => {
                                    let base = format!("shape/{}", tag(t));
                                    out.bytes(&format!("{base}_mask.pbm"), &cap.mask.to_pbm())?;
                                    out.with(&format!("{base}_boundary.csv"), |w| cap.boundary.write_csv(w))?;
                                    out.with(&format!("{base}_descriptors.csv"), |w| cap.descriptor.write_csv(w))?;
                                    let source = if cap.from_change { "grey-level change" } else { "motion" };
                                    report.log(t, Stage::Shape, format!("{} boundary points from {source} mask", cap.boundary.len()));
                                    report.ok(Stage::Shape);
                                    last_capture = Some(cap);
                                }
                                Err(e) => report.fail(t, Stage::Shape, e),
                            }
                            records[t].timings.push((Stage::Shape, sclock.elapsed()));
                        }
                    }
                    report.ok(Stage::Gist);
                }
                Err(e) => report.fail(t, Stage::Gist, e),
            }
            records[t].timings.push((Stage::Gist, clock.elapsed()));
        }

        if let (Some(rig), Some(files)) = (&rig, rig_flows.get(t - 1)) {
            let clock = Instant::now();
            let estimate = files
                .iter()
                .map(|p| load_flow(p).map_err(|e| format!("{}: {e}", p.display())))
                .collect::<Result<Vec<_>, _>>()
                .and_then(|fl| estimate_egomotion(&fl, rig, rig_depth.as_deref()).map_err(|e| e.to_string()));
            match estimate.and_then(|m| trace.push(t, m).map_err(|e| e.to_string())) {
                Ok(()) => {
                    report.ok(Stage::Ego);
                    for ev in background_events(&trace, cfg.scene_window, cfg.scene_threshold).into_iter().filter(|e| e.frame == t) {
                        match relocate_scene(&ev, &depth, &mut registry) {
                            Ok(id) => report.log(t, Stage::Scene, format!("background change {:+}, scene {id}", ev.direction)),
                            Err(e) => report.fail(t, Stage::Scene, e),
                        }
                    }
                    report.ok(Stage::Scene);
                }
                Err(e) => report.fail(t, Stage::Ego, e),
            }
            records[t].timings.push((Stage::Ego, clock.elapsed()));
        }

        if cfg.stages.freeze && t == freeze_frame {
            let clock = Instant::now();
            let offset = registry.scenes().last().map_or(0.0, |s| s.offset);
            match freeze(&tracker.stack, &depth, t) {
                Ok(vol) => {
                    let vol = vol.relocated(offset);
                    out.with("freeze/volume.csv", |w| vol.write_csv(w))?;
                    report.log(t, Stage::Freeze, format!("{} particles frozen", vol.len()));
                    report.ok(Stage::Freeze);
                    records[t].timings.push((Stage::Freeze, clock.elapsed()));
                    if cfg.stages.fluid {
                        let clock = Instant::now();
                        // mold into the captured object when there is one
                        let targets = last_capture
                            .as_ref()
                            .and_then(|c| vol.filtered(|p| in_mask(&c.mask, p.x, p.y)).filter(|v| v.len() >= 3))
                            .unwrap_or(vol);
                        match fluid_stage(&targets, width, height, cfg.epsilon, &cfg.fluid) {
                            Ok(res) => {
                                write_mold(&mut out, &res, width)?;
                                let o = &res.outcome;
                                let verdict = if o.converged { "converged" } else { "did not converge" };
                                report.log(t, Stage::Fluid, format!("mold {verdict} after {} steps, {} targets, mean distance {:.4} h", o.steps, targets.len(), o.mean_distance));
                                if o.converged {
                                    report.ok(Stage::Fluid);
                                } else {
                                    report.fail(t, Stage::Fluid, "mold did not converge");
                                }
                                report.mold = Some(res.outcome);
                            }
                            Err(e) => report.fail(t, Stage::Fluid, e),
                        }
                        records[t].timings.push((Stage::Fluid, clock.elapsed()));
                    }
                }
                Err(e) => report.fail(t, Stage::Freeze, e),
            }
        }
    }
    report.ok(Stage::Track);

    out.with("particles/links.csv", |w| tracker.stack.write_links(w))?;
    out.bytes("particles/overlay.ppm", &tracker.stack.overlay(&frames[n - 1]))?;
    if gate.is_some() {
        out.with("gist.csv", |w| {
            writeln!(w, "frame,distance,hit")?;
            for (t, d, hit) in &gist_rows {
                writeln!(w, "{t},{},{}", d.map_or(String::new(), |d| d.to_string()), *hit as u8)?;
            }
            Ok(())
        })?;
    }
    if rig.is_some() {
        out.with("ego.csv", |w| trace.write_csv(w))?;
        out.with("scenes.txt", |w| registry.write_manifest(w))?;
    }
    for s in Stage::ALL {
        report.statuses.entry(s).or_insert(StageStatus::Ok);
    }
    report.frames = records;
    report.manifest = out.manifest()?;

    let root = &cfg.out_dir;
    let write = |name: &str, f: &dyn Fn(&mut BufWriter<fs::File>) -> io::Result<()>| -> Result<(), PipelineError> {
        let p = root.join(name);
        let mut w = BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?);
        f(&mut w).and_then(|_| w.flush()).map_err(io_err(&p))
    };
    write("manifest.txt", &|w| write_manifest(w, &report.manifest))?;
    write("report.txt", &|w| report.write_text(w))?;
    write("report.csv", &|w| report.write_csv(w))?;
    Ok(report)
}

fn in_mask(mask: &BinaryMask, x: f64, y: f64) -> bool {
    let (x, y) = (x.round(), y.round());
    x >= 0.0 && y >= 0.0 && (x as usize) < mask.width() && (y as usize) < mask.height() && mask.get(x as usize, y as usize)
}

fn write_mold(out: &mut Outputs, res: &MoldResult, width: usize) -> Result<(), PipelineError> {
    out.with("fluid/state.csv", |w| res.write_state(w))?;
    out.with("fluid/cross_section.csv", |w| shape::write_points(w, &res.cross_section()))?;
    out.bytes("fluid/frame.ppm", &res.render(width))
}

/// Writes a mold result as the `fluid` subcommand does.
pub fn write_mold_outputs(dir: &Path, res: &MoldResult, width: usize) -> Result<Vec<ManifestEntry>, PipelineError> {
    let mut out = Outputs::new(dir)?;
    write_mold(&mut out, res, width)?;
    out.manifest()
}

/// Writes an image at `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    netpbm::write_bytes(path, bytes).map_err(io_err(path))
}
