use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use cdr_core::config::PipelineConfig;
use cdr_core::dataset::{Dataset, GT_MESH_FILE};
use cdr_core::generate::{synth_scene, write_synthetic};
use cdr_core::gradcheck::pipeline_grad_check;
use cdr_core::mesh::{read_ply, write_ply};
use cdr_core::metrics::{MeshMetrics, PerceptionEfficiency};
use cdr_core::pipeline::{extract_mesh, init_params};
use cdr_core::train::{evaluate, load_samples, load_weights, reconstruct, train, write_loss_rows};
use cdr_core::{CdrError, ParamStore, Result};

#[derive(Parser)]
#[command(name = "cdr", version, about = "Sparse TSDF and semantic reconstruction from posed RGB frames")]
struct Cli {
    /// Key=value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for scene generation, initialisation and evaluation sampling.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Boolean override, repeatable.
    #[arg(long = "toggle", value_name = "NAME=on|off")]
    toggles: Vec<String>,
    /// Any configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic rooms with ground truth.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of rooms; more than one writes DIR/scene_NN.
        #[arg(long, default_value_t = 1)]
        scenes: usize,
    },
    /// Train on one or more datasets and write a checkpoint.
    Train {
        #[arg(long = "in", value_name = "DIR", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Loss log; defaults to the checkpoint path with a `.loss.csv` suffix.
        #[arg(long, value_name = "PATH")]
        loss_log: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
    },
    /// Stream a sequence through the pipeline and write the mesh.
    Reconstruct {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
        /// Write the global volume as text.
        #[arg(long, value_name = "PATH")]
        dump: Option<PathBuf>,
        /// Extract a mesh after every fragment (the final mesh is unchanged).
        #[arg(long)]
        mesh_every_fragment: bool,
    },
    /// Compare a predicted mesh with ground truth.
    Eval {
        #[arg(long = "in", value_name = "PLY")]
        input: PathBuf,
        #[arg(long, value_name = "PLY")]
        gt: PathBuf,
        /// Append a CSV row here instead of printing key=value lines.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        #[arg(long, default_value = "scene")]
        scene: String,
    },
    /// Finite-difference check of the end-to-end gradients on a tiny fragment.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        entries: usize,
    },
    /// Time a reconstruction and report FPS over all frames and over key frames.
    Bench {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        weights: Option<PathBuf>,
        /// Write the report here as well as to stdout.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CdrError::Config(format!("override {s:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for t in &cli.toggles {
        cfg.apply_toggle(t)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CdrError + '_ {
    move |e| CdrError::Data(format!("{}: {e}", path.display()))
}

fn make_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    make_parent(path)?;
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn weights_for(cfg: &PipelineConfig, flag: &Option<PathBuf>) -> Result<ParamStore> {
    match flag.as_ref().or(cfg.weights.as_ref()) {
        Some(p) => load_weights(p, cfg),
        None => {
            warn!("no weights given; using the seed-{} initialisation", cfg.seed);
            Ok(init_params(cfg, cfg.seed))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth { out, scenes } => {
            for i in 0..*scenes {
                let dir = if *scenes == 1 { out.clone() } else { out.join(format!("scene_{i:02}")) };
                let scene = synth_scene(cfg.seed + i as u64, &cfg)?;
                let n = write_synthetic(&dir, &scene, &cfg)?;
                info!("wrote {n} frames to {}", dir.display());
            }
        }
        Command::Train {
            inputs,
            out,
            steps,
            loss_log,
            weights,
        } => {
            let mut samples = Vec::new();
            for (i, dir) in inputs.iter().enumerate() {
                samples.extend(load_samples(&Dataset::open(dir)?, &cfg, i)?);
            }
            info!("{} training fragments", samples.len());
            let mut params = match weights {
                Some(p) => load_weights(p, &cfg)?,
                None => init_params(&cfg, cfg.seed),
            };
            let steps = steps.unwrap_or(cfg.train_steps);
            let log_path = loss_log.clone().unwrap_or_else(|| {
                let mut s = out.clone().into_os_string();
                s.push(".loss.csv");
                PathBuf::from(s)
            });
            make_parent(out)?;
            let mut log = create(&log_path)?;
            let every = cfg.checkpoint_every;
            train(&mut params, &samples, &cfg, steps, |step, report, p| {
                write_loss_rows(&mut log, step, report, cfg.log_terms).map_err(io_err(&log_path))?;
                if every > 0 && (step + 1) % every == 0 {
                    p.save(out).map_err(|e| CdrError::Data(format!("{}: {e}", out.display())))?;
                }
                Ok(())
            })?;
            log.flush().map_err(io_err(&log_path))?;
            params.save(out).map_err(|e| CdrError::Data(format!("{}: {e}", out.display())))?;
        }
        Command::Reconstruct {
            input,
            out,
            weights,
            dump,
            mesh_every_fragment,
        } => {
            let ds = Dataset::open(input)?;
            let params = weights_for(&cfg, weights)?;
            let rec = reconstruct(&ds, &params, &cfg, |idx, global| {
                if *mesh_every_fragment {
                    let mesh = extract_mesh(global, &cfg)?;
                    info!("fragment {idx}: {} faces", mesh.faces.len());
                }
                Ok(())
            })?;
            make_parent(out)?;
            write_ply(out, &rec.mesh)?;
            if let Some(path) = dump {
                let mut w = create(path)?;
                rec.global.dump(&mut w).map_err(io_err(path))?;
                w.flush().map_err(io_err(path))?;
            }
            info!(
                "{} faces from {} fragments ({} skipped)",
                rec.mesh.faces.len(),
                rec.throughput.fragments,
                rec.skipped
            );
        }
        Command::Eval { input, gt, out, scene } => {
            let (m, miou) = evaluate(&read_ply(input)?, &read_ply(gt)?, &cfg)?;
            match out {
                Some(path) => {
                    let fresh = !path.exists();
                    let mut f = fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(path)
                        .map_err(io_err(path))?;
                    if fresh {
                        writeln!(f, "{}", MeshMetrics::CSV_HEADER).map_err(io_err(path))?;
                    }
                    writeln!(f, "{}", m.csv_row(scene, miou)).map_err(io_err(path))?;
                }
                None => print!("{}miou={miou:.6}\n", m.to_key_values()),
            }
        }
        Command::Gradcheck { entries } => {
            let r = pipeline_grad_check(cfg.seed, *entries)?;
            println!(
                "checked={}\nkinked={}\nmax_rel_error={:.3e}",
                r.checked, r.kinked, r.max_rel_error
            );
            if r.max_rel_error >= 1e-3 {
                return Err(CdrError::InvalidArgument(format!(
                    "gradient check failed: max relative error {:.3e}",
                    r.max_rel_error
                )));
            }
        }
        Command::Bench { input, weights, out } => {
            let ds = Dataset::open(input)?;
            let params = weights_for(&cfg, weights)?;
            let rec = reconstruct(&ds, &params, &cfg, |_, _| Ok(()))?;
            let t = rec.throughput;
            let mut report = format!(
                "frames={}\nkeyframes={}\nfragments={}\nseconds={:.6}\nfps={:.6}\nkfps={:.6}\n",
                t.frames,
                t.keyframes,
                t.fragments,
                t.seconds,
                t.fps(),
                t.kfps()
            );
            let gt_path = input.join(GT_MESH_FILE);
            if gt_path.exists() && !rec.mesh.is_empty() {
                let (m, miou) = evaluate(&rec.mesh, &read_ply(&gt_path)?, &cfg)?;
                let e = PerceptionEfficiency::new(t.fps(), miou, m.fscore);
                report.push_str(&format!(
                    "fscore={:.6}\nmiou={:.6}\neta3d={:.6}\nrealtime={}\n",
                    m.fscore, miou, e.eta3d, e.realtime
                ));
            }
            print!("{report}");
            if let Some(path) = out {
                let mut w = create(path)?;
                w.write_all(report.as_bytes()).map_err(io_err(path))?;
                w.flush().map_err(io_err(path))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CDR_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}
