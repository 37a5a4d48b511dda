use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hfsgm::checkpoint;
use hfsgm::config::{Binarization, RefineMode, RunConfig};
use hfsgm::episodes::{build_splits, load_dataset, sample_episode, ClassIndexedDataset, ClassSplits, Split};
use hfsgm::evaluation::{cardinality_sweep, classify_episode, csv_header, draw_episodes, evaluate_episodes, ClassifyMethod, ClassifyOptions, MetricsRow};
use hfsgm::model::Model;
use hfsgm::rng::seeded;
use hfsgm::sampling::{sample_conditional, sample_refined, sample_unconditional, write_grid, write_manifest, write_pgm, ManifestEntry};
use hfsgm::verify::{run_battery, Profile};
use hfsgm::Error;

#[derive(Parser)]
#[command(name = "hfsgm", version, about = "Few-shot generative models over sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Trained {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic training; writes metrics.csv, last.ckpt and best.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// NELBO, per-layer KL and importance-weighted likelihood on one split.
    Eval {
        #[command(flatten)]
        run: Trained,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        set_size: Option<usize>,
        #[arg(long = "is")]
        importance_samples: Option<usize>,
        /// Write the CSV here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unconditional, conditional or refined samples as PGM files.
    Sample {
        #[command(flatten)]
        run: Trained,
        #[arg(long, value_enum, default_value = "refined")]
        mode: SampleMode,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        set_size: Option<usize>,
        /// Number of conditioning sets (conditional modes).
        #[arg(long, default_value_t = 4)]
        sets: usize,
        #[arg(long)]
        refine_mode: Option<String>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value = "runs/samples")]
        out: PathBuf,
    },
    /// Bound terms across conditioning-set sizes.
    Sweep {
        #[command(flatten)]
        run: Trained,
        /// Comma-separated set sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long = "is", default_value_t = 0)]
        importance_samples: usize,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adaptation-free few-shot classification.
    Classify {
        #[command(flatten)]
        run: Trained,
        #[arg(long, default_value = "elbo_diff")]
        method: String,
        #[arg(long)]
        split: Option<String>,
        /// Independent classification episodes to pool.
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the closed-form verification battery; exits 3 on any failure.
    OracleCheck {
        #[arg(long, value_enum, default_value = "default")]
        profile: ProfileName,
        /// Multiplies every repetition count.
        #[arg(long, default_value_t = 1.0)]
        trials: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SampleMode {
    Uncond,
    Cond,
    Refined,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileName {
    Default,
    Quick,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Variant(_) => 1,
        Error::Data(_) | Error::Io { .. } | Error::Corrupt { .. } | Error::ConfigMismatch(_) => 2,
        Error::Verification(_) => 3,
    }
}

fn load_config(c: &Common) -> hfsgm::Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

struct Loaded {
    cfg: RunConfig,
    model: Model,
    dataset: ClassIndexedDataset,
    splits: ClassSplits,
    seed: u64,
}

fn load_trained(run: &Trained) -> hfsgm::Result<Loaded> {
    let cfg = load_config(&run.common)?;
    let model = checkpoint::load_matching(&run.checkpoint, &cfg.model)?.model;
    let dataset = load_dataset(&cfg.data, cfg.model.image_size)?;
    let splits = build_splits(&dataset, cfg.data.splits, cfg.data.split_seed)?;
    Ok(Loaded {
        seed: run.common.seed.unwrap_or(0),
        cfg,
        model,
        dataset,
        splits,
    })
}

fn split_arg(arg: &Option<String>, default: &str) -> hfsgm::Result<Split> {
    arg.as_deref().unwrap_or(default).parse()
}

fn write_file(path: &Path, text: &str) -> hfsgm::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn emit_rows(layers: usize, rows: &[MetricsRow], out: &Option<PathBuf>) -> hfsgm::Result<()> {
    let mut text = csv_header(layers);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    print!("{text}");
    match out {
        Some(p) => write_file(p, &text),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> hfsgm::Result<()> {
    match cli.command {
        Command::Train { common, out, checkpoint } => {
            let cfg = load_config(&common)?;
            let dataset = load_dataset(&cfg.data, cfg.model.image_size)?;
            let outputs = hfsgm::train::train(cfg, dataset, &out, checkpoint.as_deref(), |r| {
                eprintln!(
                    "epoch {:>4}  loss {:.4}  train nelbo {:.4}  val nelbo {:.4}  lr {:.2e}  alpha {:.4}{}",
                    r.epoch,
                    r.loss,
                    r.train.nelbo,
                    r.val.nelbo,
                    r.lr,
                    r.alpha,
                    if r.improved { "  *" } else { "" }
                )
            })?;
            eprintln!("wrote {}, {} and {}", outputs.metrics.display(), outputs.last.display(), outputs.best.display());
            Ok(())
        }
        Command::Eval {
            run,
            split,
            set_size,
            importance_samples,
            out,
        } => {
            let l = load_trained(&run)?;
            let split = split_arg(&split, &l.cfg.eval.split)?;
            let size = set_size.unwrap_or(l.cfg.eval.set_size);
            let is = importance_samples.unwrap_or(l.cfg.eval.importance_samples);
            let mut rng = seeded(l.seed);
            let episodes = draw_episodes(&l.dataset, &l.splits, split, size, l.cfg.eval.episodes, Binarization::Static, &mut rng)?;
            let row = evaluate_episodes(&l.model, &episodes, is, split.name(), &mut rng)?;
            emit_rows(l.cfg.model.layers, &[row], &out)
        }
        Command::Sample {
            run,
            mode,
            iters,
            set_size,
            sets,
            refine_mode,
            split,
            out,
        } => {
            let l = load_trained(&run)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let side = l.cfg.model.image_size;
            let refine_mode: RefineMode = match refine_mode {
                Some(m) => m.parse()?,
                None => l.cfg.eval.refine_mode,
            };
            let iters = iters.unwrap_or(l.cfg.eval.refine_iters);
            let size = set_size.unwrap_or(l.cfg.eval.set_size);
            let split = split_arg(&split, &l.cfg.eval.split)?;
            let mut rng = seeded(l.seed);
            let mut manifest = Vec::new();
            let mut grid = Vec::new();
            let mut save = |file: String, kind: &str, class_id: &str, iteration: usize, pixels: &[f64]| -> hfsgm::Result<()> {
                write_pgm(&out.join(&file), pixels, side)?;
                manifest.push(ManifestEntry {
                    file,
                    kind: kind.to_string(),
                    class_id: class_id.to_string(),
                    seed: l.seed,
                    iteration,
                });
                Ok(())
            };
            match mode {
                SampleMode::Uncond => {
                    let draws = sample_unconditional(&l.model, l.cfg.eval.samples, &mut rng)?;
                    for (i, d) in draws.iter().enumerate() {
                        save(format!("uncond_{i:03}.pgm"), "uncond", "", i, &d.mean)?;
                    }
                    grid.push(draws.into_iter().map(|d| d.mean).collect());
                }
                SampleMode::Cond | SampleMode::Refined => {
                    for k in 0..sets {
                        let ep = sample_episode(&l.dataset, &l.splits, split, size, Binarization::Static, &mut rng)?;
                        for (i, x) in ep.observations.iter().enumerate() {
                            save(format!("set{k:02}_x{i:02}.pgm"), "context", &ep.class_id, i, x)?;
                        }
                        let (kind, draws) = match mode {
                            SampleMode::Cond => ("cond", sample_conditional(&l.model, &ep.observations, l.cfg.eval.samples, &mut rng)?),
                            _ => ("refined", sample_refined(&l.model, &ep.observations, iters, refine_mode, l.cfg.eval.refine_hard, &mut rng)?),
                        };
                        for (i, d) in draws.iter().enumerate() {
                            save(format!("set{k:02}_{kind}_{i:03}.pgm"), kind, &ep.class_id, i, &d.mean)?;
                        }
                        let mut row = ep.observations.clone();
                        row.extend(draws.into_iter().map(|d| d.mean));
                        grid.push(row);
                    }
                }
            }
            write_grid(&out.join("grid.pgm"), &grid, side)?;
            write_manifest(&out.join("manifest.csv"), &manifest)?;
            eprintln!("wrote {} images and {}", manifest.len(), out.join("manifest.csv").display());
            Ok(())
        }
        Command::Sweep {
            run,
            sizes,
            episodes,
            importance_samples,
            split,
            out,
        } => {
            let l = load_trained(&run)?;
            let sizes = sizes.unwrap_or_else(|| l.cfg.eval.sweep_sizes.clone());
            if sizes.is_empty() {
                return Err(Error::Config("sweep needs at least one set size".into()));
            }
            let split = split_arg(&split, &l.cfg.eval.split)?;
            let rows = cardinality_sweep(
                &l.model,
                &l.dataset,
                &l.splits,
                split,
                &sizes,
                episodes.unwrap_or(l.cfg.eval.episodes),
                importance_samples,
                &mut seeded(l.seed),
            )?;
            emit_rows(l.cfg.model.layers, &rows, &out)
        }
        Command::Classify {
            run,
            method,
            split,
            episodes,
            out,
        } => {
            let l = load_trained(&run)?;
            let method: ClassifyMethod = method.parse()?;
            let split = split_arg(&split, &l.cfg.eval.split)?;
            let e = &l.cfg.eval;
            let opts = ClassifyOptions {
                method,
                draws: e.predictive_draws,
                argmin: e.kl_argmin,
            };
            let mut rng = seeded(l.seed);
            let mut confusion = vec![vec![0usize; e.classify_ways]; e.classify_ways];
            for _ in 0..episodes.max(1) {
                let r = classify_episode(&l.model, &l.dataset, &l.splits, split, e.classify_ways, e.classify_shots, e.classify_queries, opts, &mut rng)?;
                for (row, add) in confusion.iter_mut().zip(&r.confusion) {
                    row.iter_mut().zip(add).for_each(|(a, b)| *a += b);
                }
            }
            let correct: usize = (0..e.classify_ways).map(|i| confusion[i][i]).sum();
            let total: usize = confusion.iter().flatten().sum();
            let report = serde_json::json!({
                "method": method,
                "ways": e.classify_ways,
                "shots": e.classify_shots,
                "accuracy": correct as f64 / total as f64,
                "correct": correct,
                "total": total,
                "confusion": confusion,
            });
            let text = serde_json::to_string_pretty(&report).expect("json value");
            println!("{text}");
            match out {
                Some(p) => write_file(&p, &text),
                None => Ok(()),
            }
        }
        Command::OracleCheck { profile, trials, seed } => {
            if !(trials > 0.0) {
                return Err(Error::Config(format!("--trials must be positive, got {trials}")));
            }
            let base = match profile {
                ProfileName::Default => Profile::default(),
                ProfileName::Quick => Profile::quick(),
            };
            let outcomes = run_battery(base.scaled(trials), seed);
            for o in &outcomes {
                println!("{o}");
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Verification(failed.join(", ")))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
