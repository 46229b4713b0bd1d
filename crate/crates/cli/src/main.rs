//! The `hica` command-line tool.
//!
//! Exit status is 0 on success, 1 when an input fails validation and 2 on a usage
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hica_vqa::config::RunConfig;
use hica_vqa::hierarchy::{generate_dataset, Dataset, Split};
use hica_vqa::inference::save_predictions;
use hica_vqa::metrics::{compute_metrics_at, MacroMode};
use hica_vqa::model::{HicaModel, ABLATIONS};
use hica_vqa::numerics::GradCheckConfig;
use hica_vqa::prompting::Level;
use hica_vqa::trainer::{
    gradient_suite, predict_reports, threads_from_env, train, Checkpoint, FORMAT_VERSION,
};

/// Maximum relative error accepted by `gradcheck`.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser, Debug)]
#[command(
    name = "hica",
    version,
    about = "Hierarchical cross-attention VQA over structured report trees"
)]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted answers.
    GenData {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Number of reports; defaults to the configured count.
        #[arg(long)]
        reports: Option<usize>,
    },
    /// Train a model and write a checkpoint plus its epoch history.
    Train {
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        /// Checkpoint path; the history goes next to it as `<out>.history.json`.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        toggles: Toggles,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Answer a split autoregressively and score it.
    Eval {
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Directory receiving `predictions.json` and `metrics.json`.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Restrict macro scores and the per-class table to one level.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        level_filter: Option<u8>,
        #[arg(long = "macro", value_enum, default_value_t = MacroArg::Class)]
        macro_mode: MacroArg,
    },
    /// Finite-difference check of every trainable module on a fresh model.
    Gradcheck {
        /// Dataset providing the sample questions; a small synthetic one otherwise.
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        toggles: Toggles,
        /// Coordinates probed per module.
        #[arg(long, default_value_t = 200)]
        coords: usize,
    },
    /// Summarise a dataset or a checkpoint.
    Inspect {
        #[arg(
            long,
            value_name = "FILE",
            conflicts_with = "checkpoint",
            required_unless_present = "checkpoint"
        )]
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct Toggles {
    /// One of: none, shared-decoder, no-alignment, no-prompts, no-history, self-fusion, text-as-query.
    #[arg(long, value_name = "NAME")]
    ablation: Vec<String>,
    #[arg(long)]
    no_history: bool,
    #[arg(long)]
    no_prompts: bool,
    #[arg(long)]
    shared_decoder: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MacroArg {
    Class,
    Question,
}

/// Error raised for invalid user input, reported with exit status 1.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
        cfg.synthetic.featurizer.seed = seed;
    }
    Ok(cfg)
}

fn apply_toggles(cfg: &mut RunConfig, t: &Toggles) -> Result<()> {
    for name in &t.ablation {
        cfg.model
            .apply_ablation(name)
            .map_err(|e| Invalid(format!("--ablation: {e}")))?;
    }
    cfg.model.use_history &= !t.no_history;
    cfg.model.use_prompts &= !t.no_prompts;
    cfg.model.shared_decoder |= t.shared_decoder;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn fresh_model(cfg: &RunConfig, dataset: &Dataset) -> Result<HicaModel> {
    Ok(HicaModel::new(
        cfg.model.clone(),
        dataset.featurizer(&cfg.featurizer),
        cfg.prompts.clone(),
        dataset.tree.vocabulary().clone(),
        cfg.init_seed,
    )?)
}

fn history_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".history.json");
    PathBuf::from(name)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData { out, reports } => {
            if let Some(n) = reports {
                cfg.synthetic.reports = n;
            }
            let seed = cli.seed.unwrap_or(cfg.init_seed);
            let dataset = generate_dataset(&cfg.synthetic, seed)?;
            dataset
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} reports, {} questions, {} classes to {}",
                dataset.len(),
                dataset.tree.len(),
                dataset.tree.vocabulary().len(),
                out.display()
            );
        }
        Command::Train {
            dataset,
            out,
            toggles,
            epochs,
            learning_rate,
        } => {
            apply_toggles(&mut cfg, &toggles)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            cfg.validate()?;
            let data = load_dataset(&dataset)?;
            let mut model = fresh_model(&cfg, &data)?;
            let outcome = train(&mut model, &data, &cfg.train)?;
            for r in &outcome.history {
                println!(
                    "epoch {:>3}  loss {:.5}  val report accuracy {:.4}",
                    r.epoch, r.mean_loss, r.val_report_accuracy
                );
            }
            println!(
                "kept epoch {} (initial val report accuracy {:.4}){}",
                outcome.best_epoch,
                outcome.initial_val_report_accuracy,
                if outcome.stopped_early {
                    ", stopped early"
                } else {
                    ""
                }
            );
            let checkpoint = Checkpoint::from_training(model, &cfg.train, &outcome);
            checkpoint
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            write_json(&history_path(&out), &outcome.history)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            dataset,
            checkpoint,
            out,
            split,
            level_filter,
            macro_mode,
        } => {
            let data = load_dataset(&dataset)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            ckpt.model.check_vocabulary(&data.tree).map_err(|e| {
                Invalid(format!(
                    "{} does not match {}: {e}",
                    checkpoint.display(),
                    dataset.display()
                ))
            })?;
            let reports = data.split_indices(split.into());
            if reports.is_empty() {
                bail!(Invalid(format!(
                    "split {split:?} of {} is empty",
                    dataset.display()
                )));
            }
            let mode = match macro_mode {
                MacroArg::Class => MacroMode::Class,
                MacroArg::Question => MacroMode::Question,
            };
            let level = level_filter.map(Level::new).transpose()?;
            let preds = predict_reports(
                &ckpt.model,
                &ckpt.model.prompts,
                &data,
                &reports,
                threads_from_env(),
            )?;
            let golds: Vec<_> = reports.iter().map(|&i| data.reports[i].clone()).collect();
            let metrics = compute_metrics_at(&preds, &golds, &data.tree, mode, level)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_predictions(&out.join("predictions.json"), &preds)?;
            write_json(&out.join("metrics.json"), &metrics)?;
            println!("reports {}  paths {}", metrics.reports, metrics.paths);
            println!("report accuracy {:.4}", metrics.report_accuracy);
            for (name, l) in &metrics.levels {
                let acc = l.accuracy.map_or("n/a".into(), |a| format!("{a:.4}"));
                let f1 = l.macro_prf.map_or("n/a".into(), |p| format!("{:.4}", p.f1));
                println!(
                    "level {name}: {} questions, accuracy {acc}, macro F1 {f1}",
                    l.questions
                );
            }
        }
        Command::Gradcheck {
            dataset,
            toggles,
            coords,
        } => {
            apply_toggles(&mut cfg, &toggles)?;
            cfg.validate()?;
            let data = match dataset {
                Some(path) => load_dataset(&path)?,
                None => {
                    let mut syn = cfg.synthetic.clone();
                    syn.reports = syn.reports.min(24);
                    generate_dataset(&syn, cfg.init_seed)?
                }
            };
            let model = fresh_model(&cfg, &data)?;
            let gc = GradCheckConfig {
                samples: coords,
                seed: cfg.init_seed,
                ..GradCheckConfig::default()
            };
            let checks = gradient_suite(&model, &data, gc)?;
            let mut worst: f64 = 0.0;
            for c in &checks {
                worst = worst.max(c.report.max_rel_error);
                println!(
                    "{:<24} coords {:>4}  max rel err {:.3e}  max abs err {:.3e}",
                    c.module, c.report.checked, c.report.max_rel_error, c.report.max_abs_error
                );
            }
            println!("max rel err {worst:.3e}");
            if !(worst < GRADCHECK_TOLERANCE) {
                bail!(Invalid(format!(
                    "max relative error {worst:.3e} is not below {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
        Command::Inspect {
            dataset,
            checkpoint,
        } => {
            if let Some(path) = dataset {
                let data = load_dataset(&path)?;
                let tree = &data.tree;
                println!("dataset {}", path.display());
                println!(
                    "reports {} (train {}, val {}, test {})",
                    data.len(),
                    data.split_indices(Split::Train).len(),
                    data.split_indices(Split::Val).len(),
                    data.split_indices(Split::Test).len()
                );
                for level in Level::ALL {
                    println!("level {level}: {} questions", tree.count_at_level(level));
                }
                println!(
                    "vocabulary {}: {}",
                    tree.vocabulary().len(),
                    tree.vocabulary().names().join(", ")
                );
                let fc = data.featurizer(&cfg.featurizer);
                println!(
                    "featurizer d_model {} image_tokens {} seed {}",
                    fc.d_model, fc.image_tokens, fc.seed
                );
            }
            if let Some(path) = checkpoint {
                let ckpt = load_checkpoint(&path)?;
                let m = &ckpt.model;
                println!("checkpoint {} (format {FORMAT_VERSION})", path.display());
                println!(
                    "d_model {} heads {} ffn_hidden {} decoders {} vocabulary {}",
                    m.d_model(),
                    m.config.heads,
                    m.config.ffn_hidden,
                    m.decoders.len(),
                    m.vocabulary.len()
                );
                println!("ablations: {}", describe_ablations(m));
                println!(
                    "arrays {} scalars {}",
                    m.store.len(),
                    m.store.scalar_count()
                );
                println!("epochs trained {}", ckpt.history.len());
                if let Some(last) = ckpt.history.last() {
                    println!("last val report accuracy {:.4}", last.val_report_accuracy);
                }
            }
        }
    }
    Ok(())
}

fn describe_ablations(m: &HicaModel) -> String {
    let c = &m.config;
    let mut on = Vec::new();
    if c.shared_decoder {
        on.push("shared-decoder");
    }
    if !c.use_alignment {
        on.push("no-alignment");
    }
    if !c.use_prompts {
        on.push("no-prompts");
    }
    if !c.use_history {
        on.push("no-history");
    }
    match c.fusion {
        hica_vqa::decoders::FusionMode::Cross => {}
        hica_vqa::decoders::FusionMode::SelfAttention => on.push("self-fusion"),
        hica_vqa::decoders::FusionMode::TextAsQuery => on.push("text-as-query"),
    }
    debug_assert!(on.iter().all(|n| ABLATIONS.contains(n)));
    if on.is_empty() {
        "none".into()
    } else {
        on.join(", ")
    }
}
