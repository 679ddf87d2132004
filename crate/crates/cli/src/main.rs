//! `surfelsim`: build surfel maps from driving logs, render novel views and
//! evaluate them.
//!
//! Exit status: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use surfelsim::pipeline::{cmd_build, cmd_eval, cmd_render, export_gan, PipelineConfig, PoseSource};
use surfelsim::scenario::IntensityScale;
use surfelsim::{Error, Execution};

#[derive(Debug, Parser)]
#[command(name = "surfelsim", version, about = "Surfel-based camera simulation")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// Pipeline configuration (.toml or .json). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// The single RNG seed all randomness derives from.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    /// Scene voxel size in meters.
    #[arg(long, global = true)]
    voxel_size: Option<f64>,

    /// Render resolution as WIDTHxHEIGHT.
    #[arg(long, global = true, value_parser = parse_resolution)]
    resolution: Option<(u32, u32)>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reconstruct a scene directory into a map directory.
    Build { scene_dir: PathBuf, out_dir: PathBuf },

    /// Render a map directory along its trajectory, at given poses, or at
    /// perturbed poses.
    Render {
        map_dir: PathBuf,
        out_dir: PathBuf,
        /// JSON array of 12-number camera-to-world poses.
        #[arg(long, conflicts_with = "perturb")]
        poses: Option<PathBuf>,
        /// Perturb every captured ego pose.
        #[arg(long)]
        perturb: bool,
        /// Horizontal perturbation radius, meters.
        #[arg(long)]
        max_translation: Option<f64>,
        /// Yaw perturbation bound, radians.
        #[arg(long)]
        max_yaw: Option<f64>,
    },

    /// Report deviation, coverage and (with --real) covered-pixel L1.
    Eval {
        render_dir: PathBuf,
        /// Directory of real images named NNNNNN.png or NNNNNN.rgb.png.
        #[arg(long)]
        real: Option<PathBuf>,
        #[arg(long, value_enum)]
        scale: Option<Scale>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Write the paired/unpaired dataset layout for image refinement.
    ExportGan {
        /// Render directory rendered at the captured poses.
        paired_renders: PathBuf,
        /// Real images matching `paired_renders` by index.
        real_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long = "unpaired-renders")]
        unpaired_renders: Vec<PathBuf>,
        #[arg(long = "unpaired-reals")]
        unpaired_reals: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scale {
    Normalized,
    Raw,
}

fn parse_resolution(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn load_config(path: &Path) -> Result<PipelineConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|x| x.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn resolve_config(opts: &GlobalOpts) -> Result<PipelineConfig> {
    let mut config = match &opts.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(v) = opts.voxel_size {
        config.surfel = config.surfel.with_voxel_size(v);
    }
    if let Some((w, h)) = opts.resolution {
        config.render_width = Some(w);
        config.render_height = Some(h);
    }
    Ok(config)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = resolve_config(&cli.global)?;
    let exec = if cli.global.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    surfelsim::par::with_threads(cli.global.jobs, move || match cli.command {
        Command::Build { scene_dir, out_dir } => {
            let report = cmd_build(&scene_dir, &out_dir, &config, exec)
                .with_context(|| format!("building {}", scene_dir.display()))?;
            print_json(&report)
        }
        Command::Render {
            map_dir,
            out_dir,
            poses,
            perturb,
            max_translation,
            max_yaw,
        } => {
            if let Some(v) = max_translation {
                config.perturb.max_translation = v;
            }
            if let Some(v) = max_yaw {
                config.perturb.max_yaw = v;
            }
            let source = match (poses, perturb) {
                (Some(p), _) => PoseSource::File(p),
                (None, true) => PoseSource::Perturb,
                (None, false) => PoseSource::Trajectory,
            };
            let index = cmd_render(&map_dir, &source, &out_dir, &config, exec)
                .with_context(|| format!("rendering {}", map_dir.display()))?;
            let failed = index.frames.iter().filter(|f| f.error.is_some()).count();
            eprintln!(
                "rendered {} of {} poses into {}",
                index.frames.len() - failed,
                index.frames.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Eval {
            render_dir,
            real,
            scale,
            out,
        } => {
            let scale = match scale {
                Some(Scale::Normalized) => IntensityScale::Normalized,
                Some(Scale::Raw) => IntensityScale::Raw,
                None => config.l1_scale,
            };
            let report = cmd_eval(&render_dir, real.as_deref(), scale)
                .with_context(|| format!("evaluating {}", render_dir.display()))?;
            if let Some(path) = out {
                let text = serde_json::to_string_pretty(&report)? + "\n";
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            print_json(&report)
        }
        Command::ExportGan {
            paired_renders,
            real_dir,
            out_dir,
            unpaired_renders,
            unpaired_reals,
        } => {
            let export = export_gan(&paired_renders, &real_dir, &unpaired_renders, &unpaired_reals, &out_dir)
                .with_context(|| format!("exporting to {}", out_dir.display()))?;
            print_json(&export)
        }
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let invalid = err
        .chain()
        .any(|e| e.downcast_ref::<Error>().is_some_and(Error::is_validation));
    if invalid {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
