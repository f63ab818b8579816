use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use sceneflux_core::egomotion::{estimate_egomotion, EgoTrace, RigConfig};
use sceneflux_core::flowfield::{load_flow, save_flow};
use sceneflux_core::netpbm::{read_frame, write_frame};
use sceneflux_core::pipeline::{
    fluid_stage, flow_stage, lcs_stage, load_rig_depth, run, shape_stage, write_file, write_manifest, write_mold_outputs, PipelineConfig, RunReport, Stage,
};
use sceneflux_core::scenestate::FrozenVolume;
use sceneflux_core::synth::{AppearingBlock, TranslatingSquare};

#[derive(Parser)]
#[command(name = "sceneflux", version, about = "Scene-change modelling for image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Freeze the particle state at this frame index instead of the last one.
        #[arg(long)]
        freeze_at: Option<usize>,
    },
    /// Dense flow between two frames.
    Flow {
        #[arg(long)]
        prev: PathBuf,
        #[arg(long)]
        next: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Rig ego-motion from one flow per camera.
    Ego {
        #[arg(long)]
        rig: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        flows: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding `depth.<camera>.pgm` maps for metric translation.
        #[arg(long)]
        depth_dir: Option<PathBuf>,
    },
    /// FTLE field and coherent-region labels over a run of flows.
    Lcs {
        #[arg(long, num_args = 1.., required = true)]
        flows: Vec<PathBuf>,
        #[arg(long)]
        tau: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = sceneflux_core::lcs::DEFAULT_SPACING)]
        spacing: usize,
        #[arg(long, default_value_t = sceneflux_core::lcs::DEFAULT_RIDGE_QUANTILE)]
        ridge_quantile: f64,
    },
    /// Particle tracking over a frame directory.
    Track {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Object mask, boundary and Fourier descriptors from a flow.
    Shape {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        /// Previous frame, used when the object does not move.
        #[arg(long)]
        prev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Track a frame directory and freeze the particle state with depth.
    Freeze {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        freeze_at: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mold a fluid onto the footprint of a frozen volume.
    Fluid {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Frame size; defaults to the target extent plus a margin.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Write a synthetic fixture as numbered PGM frames.
    Synth {
        #[arg(long, value_enum)]
        fixture: Fixture,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    Square,
    Block,
}

fn config_or_default(config: Option<&Path>, frames: &Path, out: &Path) -> Result<PipelineConfig> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            // paths in a stage config are optional; the flags supply them
            let text = format!("paths.frames = {}\npaths.out = {}\n{text}", frames.display(), out.display());
            PipelineConfig::parse(&text, p.parent().unwrap_or(Path::new(".")))?
        }
        None => PipelineConfig::new(frames, out),
    };
    cfg.frames_dir = frames.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn summarize(report: &RunReport) {
    for (stage, status) in &report.statuses {
        println!("{stage:>7}: {status:?}");
    }
    for e in report.events.iter().filter(|e| e.stage != Stage::Track) {
        println!("frame {:>4} {:>7}: {}", e.frame, e.stage, e.message);
    }
    println!("{} files in manifest", report.manifest.len());
}

fn finish(report: &RunReport) -> ExitCode {
    summarize(report);
    if report.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, freeze_at } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if freeze_at.is_some() {
                cfg.freeze_at = freeze_at;
            }
            let report = run(&cfg)?;
            Ok(finish(&report))
        }
        Command::Flow { prev, next, out, config } => {
            let params = match config {
                Some(c) => config_or_default(Some(&c), Path::new("."), Path::new("."))?.flow,
                None => Default::default(),
            };
            let flow = flow_stage(&read_frame(&prev)?, &read_frame(&next)?, &params)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_flow(&out, &flow).with_context(|| format!("writing {}", out.display()))?;
            info!("flow written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Ego { rig, flows, out, depth_dir } => {
            let rig = RigConfig::parse(&fs::read_to_string(&rig).with_context(|| format!("reading {}", rig.display()))?)?;
            let fields = flows.iter().map(|p| load_flow(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<Vec<_>>>()?;
            let depth = match depth_dir {
                Some(d) => match load_rig_depth(&d, rig.len())? {
                    Some(maps) => Some(maps),
                    None => bail!("{} lacks depth.<camera>.pgm for some of the {} cameras", d.display(), rig.len()),
                },
                None => None,
            };
            let estimate = estimate_egomotion(&fields, &rig, depth.as_deref())?;
            let mut trace = EgoTrace::new();
            trace.push(1, estimate)?;
            let mut w = create(&out)?;
            trace.write_csv(&mut w)?;
            w.flush()?;
            println!("T = {:?}, w = {:?}", estimate.translation.as_slice(), estimate.rotation.as_slice());
            Ok(ExitCode::SUCCESS)
        }
        Command::Lcs { flows, tau, out, spacing, ridge_quantile } => {
            let fields = flows.iter().map(|p| load_flow(p).with_context(|| format!("reading {}", p.display()))).collect::<Result<Vec<_>>>()?;
            let labels = lcs_stage(&fields, 0, tau, spacing, ridge_quantile)?;
            fs::create_dir_all(&out)?;
            labels.save_pgm16(&out.join("ftle.pgm"))?;
            let mut w = create(&out.join("labels.txt"))?;
            labels.write_labels(&mut w)?;
            w.flush()?;
            println!("{} regions", labels.region_count());
            Ok(ExitCode::SUCCESS)
        }
        Command::Track { frames, config, out } => {
            let mut cfg = config_or_default(config.as_deref(), &frames, &out)?;
            let s = &mut cfg.stages;
            (s.gist, s.shape, s.ego, s.freeze, s.fluid) = (false, false, false, false, false);
            Ok(finish(&run(&cfg)?))
        }
        Command::Shape { flow, frame, prev, out, config } => {
            let cfg = config_or_default(config.as_deref(), Path::new("."), &out)?;
            let prev = prev.map(|p| read_frame(&p)).transpose()?;
            let cap = shape_stage(&load_flow(&flow)?, &read_frame(&frame)?, prev.as_ref(), cfg.motion_threshold, cfg.change_threshold)?;
            fs::create_dir_all(&out)?;
            write_file(&out.join("mask.pbm"), &cap.mask.to_pbm())?;
            let mut w = create(&out.join("boundary.csv"))?;
            cap.boundary.write_csv(&mut w)?;
            w.flush()?;
            let mut w = create(&out.join("descriptors.csv"))?;
            cap.descriptor.write_csv(&mut w)?;
            w.flush()?;
            println!("{} boundary points{}", cap.boundary.len(), if cap.from_change { " (grey-level change mask)" } else { "" });
            Ok(ExitCode::SUCCESS)
        }
        Command::Freeze { frames, config, depth, freeze_at, out } => {
            let mut cfg = config_or_default(config.as_deref(), &frames, &out)?;
            if depth.is_some() {
                cfg.depth = depth;
            }
            if freeze_at.is_some() {
                cfg.freeze_at = freeze_at;
            }
            let s = &mut cfg.stages;
            (s.gist, s.shape, s.ego, s.freeze, s.fluid) = (false, false, false, true, false);
            Ok(finish(&run(&cfg)?))
        }
        Command::Fluid { targets, out, config, width, height } => {
            let cfg = config_or_default(config.as_deref(), Path::new("."), &out)?;
            let vol = FrozenVolume::parse_csv(&fs::read_to_string(&targets).with_context(|| format!("reading {}", targets.display()))?)?;
            let margin = 2.0 * cfg.epsilon;
            let extent = |f: fn(&(f64, f64)) -> f64| vol.footprint().iter().map(f).fold(0.0, f64::max);
            let width = width.unwrap_or((extent(|p| p.0) + margin).ceil() as usize);
            let height = height.unwrap_or((extent(|p| p.1) + margin).ceil() as usize);
            let res = fluid_stage(&vol, width, height, cfg.epsilon, &cfg.fluid)?;
            let manifest = write_mold_outputs(&out, &res, width)?;
            let mut w = create(&out.join("manifest.txt"))?;
            write_manifest(&mut w, &manifest)?;
            w.flush()?;
            let o = &res.outcome;
            println!("mold {} after {} steps, mean distance {:.4} h", if o.converged { "converged" } else { "did not converge" }, o.steps, o.mean_distance);
            Ok(if o.converged { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Synth { fixture, frames, out } => {
            if frames == 0 {
                bail!("--frames must be at least 1");
            }
            let list = match fixture {
                Fixture::Square => TranslatingSquare::default().frames(frames),
                Fixture::Block => AppearingBlock::default().frames(frames),
            };
            fs::create_dir_all(&out)?;
            for (i, f) in list.iter().enumerate() {
                write_frame(&out.join(format!("frame_{i:04}.pgm")), f)?;
            }
            println!("{} frames written to {}", list.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
