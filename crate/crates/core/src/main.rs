use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use lipose::camera::{Camera, ImageNormalizer};
use lipose::checkpoint::Checkpoint;
use lipose::config::{DomainSource, RunConfig};
use lipose::diffusion::{ddim_sample, train_sampler, NoisePredictor};
use lipose::error::Result;
use lipose::estimator::{pretrain_source, LiftingModel, PretrainConfig};
use lipose::lifelong::{evaluate_model, load_run, render_records, render_table, run_experiment, RunOptions};
use lipose::posefile::{read_dataset, write_dataset, write_pose_file, PoseFile, PoseHeader, PoseRecord};
use lipose::probes::run_probes;
use lipose::seeding::{derive_seed, rng_for};
use lipose::skeleton::Skeleton;
use lipose::synth::synth_domain;

/// Lifelong domain-adaptive 2D-to-3D pose lifting.
#[derive(Parser, Debug)]
#[command(name = "lipose", version)]
struct Cli {
    /// Run seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (TOML). The built-in demo config is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write every synthetic domain of the config as pose-file pairs.
    Synth,
    /// Supervised source pretraining to an estimator checkpoint.
    Pretrain {
        /// Labelled source pose files (`<stem>`, `<stem>.2d` or `<stem>.3d`).
        #[arg(long)]
        source: PathBuf,
    },
    /// Run the next adaptation phase(s) of the run for this config and seed.
    Adapt {
        #[arg(long, default_value_t = 1)]
        phases: usize,
    },
    /// Pretraining, all adaptation phases and reports.
    Run,
    /// Evaluate a run's current estimator on labelled pose files.
    Eval {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        domains: Vec<PathBuf>,
    },
    /// Print a run's report series.
    Report {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Fit the 2D pose diffusion sampler on a domain's centre frames.
    DiffuseTrain {
        #[arg(long)]
        domain: PathBuf,
        /// Continue from this sampler checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Draw 2D poses from a sampler checkpoint into a pose file.
    DiffuseSample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 40)]
        steps: usize,
        #[arg(long, default_value_t = 0.2)]
        eta: f64,
    },
    /// Run the invariant probe suite.
    Check,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Records,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn pose_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("2d" | "3d") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

/// Missing `--out` is a usage error (exit 2).
fn required_out(out: &Option<PathBuf>, what: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| {
        Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                format!("--out <PATH> is required for {what}"),
            )
            .exit()
    })
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::demo(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.seed = seed;
    let skel = Skeleton::canonical();
    let runs = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    match cli.command {
        Command::Check => {
            let results = run_probes();
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            println!("{} probes, {failed} failed", results.len());
            return Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            });
        }
        Command::Synth => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let hash = cfg.hash();
            for d in std::iter::once(&cfg.source).chain(&cfg.targets) {
                let DomainSource::Synth(spec) = d else { continue };
                let mut eval_spec = spec.clone();
                eval_spec.seed = derive_seed(spec.seed, "eval", 0);
                for (split, s, n) in [
                    ("train", spec, cfg.clips_per_domain),
                    ("eval", &eval_spec, cfg.eval_clips),
                ] {
                    let ds = synth_domain(s, &skel, n)?;
                    let stem = out.join(&spec.name).join(split);
                    write_dataset(&stem, &ds, &skel, &hash, seed)?;
                    println!("{}: {} clips", stem.display(), ds.clip_count());
                }
            }
        }
        Command::Pretrain { source } => {
            let out = required_out(&cli.out, "pretrain");
            let ds = read_dataset(&pose_stem(&source), &skel)?;
            let init = LiftingModel::new(
                cfg.frames,
                &cfg.estimator,
                skel.joint_count(),
                &ds.camera,
                &mut rng_for(seed, "init", 0),
            )?;
            let pre = PretrainConfig {
                epochs: cfg.training.pretrain_epochs,
                learning_rate: cfg.training.lr_pretrain.unwrap_or(cfg.training.lr_estimator),
                batch_size: cfg.training.batch_size,
            };
            let outcome = pretrain_source(&init, &ds, &pre, &mut rng_for(seed, "pretrain", 0))?;
            for (e, l) in outcome.epoch_losses.iter().enumerate() {
                println!("epoch {e} mse {l:.6}");
            }
            outcome
                .model
                .to_checkpoint(seed, pre.epochs as u64, &cfg.hash())
                .save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Adapt { phases } => {
            let dir = runs.join(cfg.run_dir_name(seed));
            let start = if dir.join("checkpoints").exists() {
                load_run(&dir)?.0.phase
            } else {
                0
            };
            let opts = RunOptions {
                seed,
                out: runs,
                force: false,
                resume: true,
                stop_after: Some(start + phases),
            };
            let outcome = run_experiment(&cfg, &opts)?;
            print!("{}", render_table(&outcome.history));
            println!("phase {} written to {}", outcome.state.phase, outcome.dir.display());
        }
        Command::Run => {
            let opts = RunOptions {
                seed,
                out: runs,
                force: cli.force,
                resume: false,
                stop_after: None,
            };
            let outcome = run_experiment(&cfg, &opts)?;
            print!("{}", render_table(&outcome.history));
            println!("run written to {}", outcome.dir.display());
        }
        Command::Eval { state, domains } => {
            let (st, _) = load_run(&state)?;
            println!("{:<16} {:>10} {:>10}", "domain", "MPJPE", "PA-MPJPE");
            let mut sums = (0.0, 0.0);
            for d in &domains {
                let ds = read_dataset(&pose_stem(d), &skel)?;
                let m = evaluate_model(&st.anchor, &ds)?;
                sums = (sums.0 + m.mpjpe, sums.1 + m.pa_mpjpe);
                println!("{:<16} {:>10.2} {:>10.2}", m.domain, m.mpjpe, m.pa_mpjpe);
            }
            let n = domains.len() as f64;
            println!("{:<16} {:>10.2} {:>10.2}", "avg", sums.0 / n, sums.1 / n);
        }
        Command::Report { state, format } => {
            let (_, history) = load_run(&state)?;
            match format {
                Format::Table => print!("{}", render_table(&history)),
                Format::Records => print!("{}", render_records(&history)),
            }
        }
        Command::DiffuseTrain { domain, init } => {
            let out = required_out(&cli.out, "diffuse-train");
            let ds = read_dataset(&pose_stem(&domain), &skel)?;
            let norm = ImageNormalizer::from_camera(&ds.camera);
            let poses: Vec<_> = ds
                .all_2d()
                .into_iter()
                .map(|p| {
                    let mut v = p.to_flat();
                    norm.normalize(&mut v);
                    lipose::pose::Pose2D::from_flat(&v)
                })
                .collect::<Result<_>>()?;
            let start = match &init {
                Some(p) => NoisePredictor::from_checkpoint(&Checkpoint::load(p)?)?,
                None => NoisePredictor::new(
                    cfg.diffusion.clone(),
                    skel.joint_count() * 2,
                    &mut rng_for(seed, "init", 3),
                )?,
            };
            let trained = train_sampler(&poses, &start, cfg.diffusion.epochs, &mut rng_for(seed, "sampler", 0))?;
            for (e, l) in trained.epoch_losses.iter().enumerate() {
                println!("epoch {e} loss {l:.6}");
            }
            let mut ck = trained.predictor.to_checkpoint(seed, &cfg.hash());
            ck.extra["camera"] = serde_json::to_value(ds.camera).expect("json");
            ck.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::DiffuseSample { ckpt, n, steps, eta } => {
            let out = required_out(&cli.out, "diffuse-sample");
            let ck = Checkpoint::load(&ckpt)?;
            let pred = NoisePredictor::from_checkpoint(&ck)?;
            let camera: Camera = serde_json::from_value(ck.extra["camera"].clone()).unwrap_or_default();
            let norm = ImageNormalizer::from_camera(&camera);
            let poses = ddim_sample(&pred, n, steps, eta, seed)?;
            let mut header = PoseHeader::new(&skel, 2, 50.0, "sampled", &ck.config_hash, seed);
            header.camera = Some(camera);
            let records = poses
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut values = p.to_flat();
                    norm.denormalize(&mut values);
                    PoseRecord {
                        sequence: i,
                        frame: 0,
                        values,
                    }
                })
                .collect();
            write_pose_file(&out, &PoseFile { header, records })?;
            println!("wrote {n} poses to {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
