use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use healvit::evaluation::{acc, bias, compute_climatology, latitude_weights, rmse, spectrum_svg, zonal_spectrum};
use healvit::graphs::{build_graph, GraphKind};
use healvit::grid::{state_manifest, GridField, GridSpec};
use healvit::healpix::{num_pixels, pixel_solid_angle, MeshLevel};
use healvit::io::{
    grid_files, load_dataset, load_grid_field, mesh_csv, save_dataset, save_grid_field, windows_csv, RunConfig,
};
use healvit::model::{Model, MAX_ROLLOUT_STEPS};
use healvit::nn::checkpoint::{load_checkpoint, save_checkpoint};
use healvit::training::{fit_normalization, parse_phases, train_curriculum, write_trace, SynthGenerator, TrainOptions};
use healvit::windowing::{build_shifted_windows, build_windows};

/// HEALPix mesh tools, synthetic data, training and verification.
#[derive(Parser, Debug)]
#[command(name = "healvit", version)]
struct Cli {
    /// Worker threads for internal parallelism (0 = one per core). Results do
    /// not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Seed; overrides HV_SEED and any config file seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pixel count of a mesh level, optionally with a CSV of centres and corners.
    Mesh {
        #[arg(long)]
        level: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Window partition of a mesh level.
    Windows {
        #[arg(long)]
        level: u8,
        #[arg(long)]
        window: u8,
        /// Build the shifted partition instead of the plain one.
        #[arg(long)]
        shifted: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bipartite graph between the grid and a mesh level, or between levels.
    Graph {
        /// g2m, m2g, down or up.
        #[arg(long)]
        kind: GraphKind,
        #[arg(long, default_value = "721x1440")]
        grid: GridSpec,
        #[arg(long)]
        level: u8,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthetic advection dataset written as grid-tensor files.
    Synth {
        #[arg(long, default_value = "46x90")]
        grid: GridSpec,
        #[arg(long)]
        length: usize,
        /// First time index, so validation spans can follow training spans.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curriculum training from a config file.
    Train(TrainArgs),
    /// Autoregressive forecast from two initial states.
    Rollout(RolloutArgs),
    /// RMSE, ACC and bias per channel and lead step.
    Evaluate(EvaluateArgs),
    /// Zonal power spectrum over the 30-60 degree bands.
    Spectra {
        #[arg(long)]
        field: PathBuf,
        /// Channel name or index.
        #[arg(long)]
        channel: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; overrides `data_dir` in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Phase list such as `1x500@cosine:3e-3,2x50@fixed:2e-4`.
    #[arg(long)]
    phases: Option<String>,
    /// Checkpoint path; overrides `checkpoint` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss trace CSV; overrides `trace` in the config.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Suppress per-step progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    init_prev: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Static fields; defaults to the ones stored in the checkpoint.
    #[arg(long)]
    statics: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of predicted states, one file per lead step.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of verifying states in the same order.
    #[arg(long)]
    truth: PathBuf,
    /// Comma-separated channel names, or `all`.
    #[arg(long, default_value = "all")]
    channels: String,
    /// Climatology file; defaults to the mean of the truth files.
    #[arg(long)]
    climatology: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("HV_SEED") {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .with_context(|| format!("HV_SEED=`{v}` is not a seed"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn level(n: u8) -> Result<MeshLevel> {
    Ok(MeshLevel::try_new(n)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let seed = seed_override(cli.seed)?;
    match cli.command {
        Command::Mesh { level: n, out } => {
            let l = level(n)?;
            let px = num_pixels(l);
            let area = pixel_solid_angle(l).to_degrees().to_degrees();
            println!("level {n}: {px} pixels");
            println!("node area {area:.4} sq deg, angular size {:.4} deg", area.sqrt());
            if let Some(out) = out {
                write_text(&out, &mesh_csv(l))?;
            }
        }
        Command::Windows {
            level: n,
            window,
            shifted,
            out,
        } => {
            let l = level(n)?;
            let p = if shifted {
                build_shifted_windows(l, window)?
            } else {
                build_windows(l, window)?
            };
            let kind = if shifted { "shifted" } else { "plain" };
            println!(
                "level {n} w={window} {kind}: {} pixels, {} windows x {} pixels",
                p.num_pixels(),
                p.num_windows(),
                p.max_window_size()
            );
            if shifted {
                println!("three-quadrant windows: {}", p.three_quadrant_windows());
            }
            if let Some(out) = out {
                write_text(&out, &windows_csv(&p))?;
            }
        }
        Command::Graph {
            kind,
            grid,
            level: n,
            out,
        } => {
            let g = build_graph(kind, &grid, level(n)?)?;
            let deg = g.in_degrees();
            let (lo, hi) = (
                deg.iter().min().copied().unwrap_or(0),
                deg.iter().max().copied().unwrap_or(0),
            );
            println!(
                "{kind} grid {grid} level {n}: {} edges, {} sources, {} targets, in-degree {lo}..{hi}",
                g.num_edges(),
                g.source_count(),
                g.target_count()
            );
            if let Some(out) = out {
                g.save(&out)?;
            }
        }
        Command::Synth {
            grid,
            length,
            start,
            out,
        } => {
            let gen = SynthGenerator::new(seed.unwrap_or(0));
            let data = gen.dataset(grid, start, length)?;
            save_dataset(&data, &out)?;
            println!("wrote {length} states on {grid} to {}", out.display());
        }
        Command::Train(a) => train(a, seed)?,
        Command::Rollout(a) => rollout(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Spectra {
            field,
            channel,
            out,
            svg,
        } => {
            let f = load_grid_field(&field)?;
            let c = match f.channel_index(&channel) {
                Some(c) => c,
                None => channel
                    .parse::<usize>()
                    .ok()
                    .filter(|&c| c < f.channels())
                    .with_context(|| format!("no channel `{channel}` in {}", field.display()))?,
            };
            f.check_finite(&field.display().to_string())?;
            let s = zonal_spectrum(&f, c)?;
            let mut csv = String::from("wavenumber,power\n");
            for (k, p) in s.power.iter().enumerate() {
                let _ = writeln!(csv, "{k},{p:e}");
            }
            write_text(&out, &csv)?;
            if let Some(svg) = svg {
                write_text(&svg, &spectrum_svg(&s, &f.manifest()[c]))?;
            }
            println!("spectrum of `{}` over {} rows", f.manifest()[c], s.rows.len());
        }
    }
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.phases {
        cfg.phases = parse_phases(p)?;
    }
    let data_dir = a
        .data
        .or(cfg.data_dir.clone())
        .context("no dataset: pass --data or set data_dir")?;
    let out = a
        .out
        .or(cfg.checkpoint.clone())
        .context("no checkpoint path: pass --out or set checkpoint")?;
    let trace_path = a.trace.or(cfg.trace.clone());
    let data = load_dataset(&data_dir)?;
    if data.grid() != cfg.model.grid {
        bail!(
            "dataset grid {} does not match config grid {}",
            data.grid(),
            cfg.model.grid
        );
    }
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    fit_normalization(&mut model, &data)?;
    let opts = TrainOptions {
        optimizer: cfg.optimizer,
        seed: cfg.seed,
        warmup: cfg.warmup,
        checkpoint: None,
    };
    let total: usize = cfg.phases.iter().map(|p| p.train_steps).sum();
    let quiet = a.quiet;
    let trace = train_curriculum(&mut model, &data, &cfg.phases, &opts, |r| {
        if !quiet && (r.global_step % 50 == 0 || r.global_step + 1 == total) {
            eprintln!(
                "step {} k={} lr={:.3e} loss={:.5}",
                r.global_step, r.ar_steps, r.lr, r.loss
            );
        }
    })?;
    save_checkpoint(model.params(), &out)?;
    if let Some(t) = trace_path {
        let file = fs::File::create(&t).with_context(|| format!("writing {}", t.display()))?;
        write_trace(&trace, std::io::BufWriter::new(file))?;
    }
    let last = trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps, final loss {last:.5}, checkpoint {}",
        trace.len(),
        out.display()
    );
    Ok(())
}

fn rollout(a: RolloutArgs) -> Result<()> {
    if a.steps == 0 || a.steps > MAX_ROLLOUT_STEPS {
        bail!("--steps must be in 1..={MAX_ROLLOUT_STEPS}, got {}", a.steps);
    }
    let cfg = RunConfig::load(&a.config)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let model = Model::from_params(cfg.model, &params)?;
    let manifest = state_manifest();
    let init = load_grid_field(&a.init)?;
    init.expect_manifest(&manifest, &a.init.display().to_string())?;
    let prev = load_grid_field(&a.init_prev)?;
    prev.expect_manifest(&manifest, &a.init_prev.display().to_string())?;
    let statics = match &a.statics {
        Some(p) => load_grid_field(p)?,
        None => model.statics(),
    };
    let states = model.rollout(&init, &prev, &statics, a.steps)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (j, s) in states.iter().enumerate() {
        save_grid_field(s, &a.out.join(format!("step_{:02}.gt", j + 1)))?;
    }
    println!("wrote {} steps to {}", states.len(), a.out.display());
    Ok(())
}

fn load_series(dir: &Path) -> Result<Vec<GridField>> {
    let files = grid_files(dir)?;
    if files.is_empty() {
        bail!("no .gt files in {}", dir.display());
    }
    files
        .iter()
        .map(|p| {
            let f = load_grid_field(p)?;
            f.check_finite(&p.display().to_string())?;
            Ok(f)
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let pred = load_series(&a.pred)?;
    let truth = load_series(&a.truth)?;
    if pred.len() > truth.len() {
        bail!("{} predictions but only {} truth files", pred.len(), truth.len());
    }
    let truth = &truth[..pred.len()];
    for (p, t) in pred.iter().zip(truth) {
        p.check_compatible(t, "prediction and truth")?;
    }
    let clim = match &a.climatology {
        Some(p) => load_grid_field(p)?,
        None => compute_climatology(truth)?,
    };
    clim.check_compatible(&truth[0], "climatology")?;
    let manifest = truth[0].manifest();
    let channels: Vec<usize> = if a.channels.trim() == "all" {
        (0..manifest.len()).collect()
    } else {
        a.channels
            .split(',')
            .map(|c| {
                let c = c.trim();
                manifest
                    .iter()
                    .position(|m| m == c)
                    .with_context(|| format!("no channel `{c}` in the truth manifest"))
            })
            .collect::<Result<_>>()?
    };
    let w = latitude_weights(&truth[0].grid());
    let mut csv = String::from("channel,lead_step,rmse,acc,bias\n");
    for &c in &channels {
        for j in 0..pred.len() {
            let (p, t) = (&pred[j..=j], &truth[j..=j]);
            // A vanishing anomaly leaves the correlation undefined.
            let r = match acc(p, t, &clim, &w, c) {
                Ok(v) => v,
                Err(healvit::Error::ZeroAnomaly(_)) => f64::NAN,
                Err(e) => return Err(e.into()),
            };
            let _ = writeln!(
                csv,
                "{},{},{:e},{:e},{:e}",
                manifest[c],
                j + 1,
                rmse(p, t, &w, c)?,
                r,
                bias(p, t, &w, c)?
            );
        }
    }
    write_text(&a.out, &csv)?;
    println!(
        "{} channels x {} lead steps to {}",
        channels.len(),
        pred.len(),
        a.out.display()
    );
    Ok(())
}
