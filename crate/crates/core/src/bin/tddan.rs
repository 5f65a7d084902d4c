use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tddan::harness::{self, compare, dataset, evaluate, Baseline, EvalOptions, ExperimentConfig, Manifest, Split};
use tddan::io::write_atomic;
use tddan::nn::{AttractorMode, Model};
use tddan::Result;

#[derive(Parser)]
#[command(name = "tddan", version, about = "Reverberant speech separation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Oracle,
    Kmeans,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize scenes and write WAVs plus a manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model on the train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the epoch log goes next to it as CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint and write per-scene metrics.
    Evaluate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "oracle")]
        attractor: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also score the mixture and the two oracle ratio masks.
        #[arg(long)]
        baselines: bool,
        /// Experiment config supplying eval settings (filter length, seed).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score candidate learning targets against the clean sources.
    CompareTargets {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = tddan::metrics::SDR_FILTER_LEN)]
        filter_len: usize,
    },
    /// Finite-difference check of every operation and of the model losses.
    GradCheck,
}

fn scenes(data: &Path, manifest: &Manifest, split: SplitArg) -> Result<Vec<harness::SceneData>> {
    match split {
        SplitArg::Train => dataset::load_split(data, manifest, Split::Train),
        SplitArg::Valid => dataset::load_split(data, manifest, Split::Valid),
        SplitArg::Test => dataset::load_split(data, manifest, Split::Test),
        SplitArg::All => manifest.scenes.iter().map(|r| harness::SceneData::load(data, r)).collect(),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let m = harness::generate(&cfg.dataset, &out)?;
            for split in [Split::Train, Split::Valid, Split::Test] {
                println!("{split}: {} scenes", m.split(split).count());
            }
        }
        Command::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let manifest = Manifest::load(&data)?;
            let train_set = dataset::load_split(&data, &manifest, Split::Train)?;
            let valid_set = dataset::load_split(&data, &manifest, Split::Valid)?;
            let mut model = Model::new(cfg.model_config()?)?;
            let outputs = harness::TrainOutputs {
                checkpoint: Some(out.clone()),
                log_csv: Some(out.with_extension("log.csv")),
            };
            let report = harness::train(&mut model, &train_set, &valid_set, &cfg.training, &outputs, |e| {
                println!("epoch {:>3}  train {:.5}  valid {:.5}  lr {:.2e}", e.epoch, e.train_loss, e.valid_loss, e.lr);
            })?;
            println!("{} steps, best validation loss {:.5}", report.steps, report.best_valid);
        }
        Command::Evaluate {
            ckpt,
            data,
            attractor,
            out,
            split,
            baselines,
            config,
        } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let model = ckpt.as_deref().map(Model::load).transpose()?;
            let manifest = Manifest::load(&data)?;
            let scenes = scenes(&data, &manifest, split)?;
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "metrics".into());
            let opts = EvalOptions {
                modes: match attractor {
                    ModeArg::Oracle => vec![AttractorMode::Oracle],
                    ModeArg::Kmeans => vec![AttractorMode::Kmeans],
                    ModeArg::Both => vec![AttractorMode::Oracle, AttractorMode::Kmeans],
                },
                metrics: cfg.eval.metrics.clone(),
                sdr_filter_len: cfg.eval.sdr_filter_len,
                kmeans_seed: cfg.eval.kmeans_seed,
                baselines: if baselines || model.is_none() {
                    vec![Baseline::Mixture, Baseline::Irm, Baseline::IrmDerevb]
                } else {
                    Vec::new()
                },
                estimates_dir: Some(out.with_file_name(format!("{stem}_estimates"))),
            };
            let rows = evaluate::evaluate(model.as_ref(), &scenes, &opts)?;
            evaluate::write_metrics_csv(&out, &rows)?;
            let summary = evaluate::format_summary(&harness::summarize(&rows));
            write_atomic(&out.with_extension("summary.txt"), summary.as_bytes())?;
            print!("{summary}");
        }
        Command::CompareTargets { data, out, filter_len } => {
            let manifest = Manifest::load(&data)?;
            let scenes = scenes(&data, &manifest, SplitArg::All)?;
            let scores = harness::compare_targets(&scenes, filter_len)?;
            let report = compare::format_report(&scores, filter_len);
            write_atomic(&out, report.as_bytes())?;
            print!("{report}");
        }
        Command::GradCheck => {
            let mut ok = true;
            for r in harness::gradcheck::full_suite()? {
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                ok &= r.passed();
                println!("{verdict}  {:<32} {:.3e} (tol {:.0e})", r.name, r.error, r.tolerance);
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
