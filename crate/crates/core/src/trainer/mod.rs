//! Teacher-forced training, validation-driven early stopping and evaluation.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{augment, dataset_samples, AugmentConfig, Dataset, Sample, Split};
use crate::inference::{answer_report, Answerer, PredictedReport};
use crate::metrics::{compute_metrics, MacroMode, MetricsReport};
use crate::model::HicaModel;
use crate::numerics::{
    finite_diff_check, AdamWConfig, AdamWState, GradCheckConfig, GradCheckReport, Gradients, Graph,
    ParamId, ParamStore, Tensor2, Var,
};
use crate::objective::{bce_on, class_weights, ClassWeights, DEFAULT_MAX_WEIGHT};
use crate::prompting::{Level, PromptTable};

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};

/// Learning rate of record for the full-scale model.
pub const FULL_SCALE_LEARNING_RATE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub max_class_weight: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 5,
            max_class_weight: DEFAULT_MAX_WEIGHT,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        self.augment.validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_report_accuracy: f64,
    pub val_level_accuracy: [Option<f64>; 3],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub initial_val_report_accuracy: f64,
    pub stopped_early: bool,
}

fn mix(seed: u64, epoch: usize, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 8) ^ tag
}

/// Loss and gradients of one sample at the current parameters.
pub fn sample_gradients(
    model: &HicaModel,
    sample: &Sample,
    weights: &ClassWeights,
) -> Result<(f64, Gradients)> {
    let inputs = model.encode_sample(sample)?;
    let (g, root, breakdown) = model
        .loss_graph(&model.store, &inputs, &sample.gold, weights, &sample.mask)
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!(
                "loss on {} question {}#{}",
                sample.image_id, sample.node_id, sample.instance
            )),
            other => other,
        })?;
    Ok((breakdown.loss, g.backward(root)?))
}

/// One optimiser step on the mean gradient of `batch`; returns the mean loss.
pub fn train_step(
    model: &mut HicaModel,
    optimizer: &mut AdamWState,
    batch: &[&Sample],
    weights: &ClassWeights,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for s in batch {
        let (l, g) = sample_gradients(model, s, weights)?;
        loss += l;
        total.accumulate(g);
    }
    if batch.len() > 1 {
        total.scale(1.0 / batch.len() as f64);
    }
    optimizer.step(&mut model.store, &total)?;
    Ok(loss / batch.len() as f64)
}

/// Worker count from `HICA_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("HICA_THREADS")
        .ok()?
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

/// Answers the listed reports autoregressively. Reports are processed in parallel
/// and returned in input order.
pub fn predict_reports<A: Answerer + Sync + ?Sized>(
    answerer: &A,
    prompts: &PromptTable,
    dataset: &Dataset,
    reports: &[usize],
    threads: Option<usize>,
) -> Result<Vec<PredictedReport>> {
    use rayon::prelude::*;
    let run = || {
        reports
            .par_iter()
            .map(|&i| {
                answer_report(
                    &dataset.reports[i].image_id,
                    &dataset.tree,
                    answerer,
                    prompts,
                )
            })
            .collect::<Result<Vec<_>>>()
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Autoregressive evaluation of `model` on the listed reports. Gold answers are
/// used only for scoring.
pub fn evaluate(
    model: &HicaModel,
    dataset: &Dataset,
    reports: &[usize],
    mode: MacroMode,
    threads: Option<usize>,
) -> Result<(MetricsReport, Vec<PredictedReport>)> {
    model.check_vocabulary(&dataset.tree)?;
    evaluate_with(model, &model.prompts, dataset, reports, mode, threads)
}

pub fn evaluate_with<A: Answerer + Sync + ?Sized>(
    answerer: &A,
    prompts: &PromptTable,
    dataset: &Dataset,
    reports: &[usize],
    mode: MacroMode,
    threads: Option<usize>,
) -> Result<(MetricsReport, Vec<PredictedReport>)> {
    let preds = predict_reports(answerer, prompts, dataset, reports, threads)?;
    let golds: Vec<_> = reports
        .iter()
        .map(|&i| dataset.reports[i].clone())
        .collect();
    let metrics = compute_metrics(&preds, &golds, &dataset.tree, mode)?;
    Ok((metrics, preds))
}

fn level_accuracy(m: &MetricsReport) -> [Option<f64>; 3] {
    Level::ALL.map(|l| m.level(l).accuracy)
}

/// Trains `model` on the training split with validation-driven early stopping and
/// leaves the best parameters seen (including the initial ones) in place.
pub fn train(model: &mut HicaModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_vocabulary(&dataset.tree)?;
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut val_idx = dataset.split_indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let samples = dataset_samples(dataset, &train_idx, &model.prompts)?;
    let weights = class_weights(&samples, model.vocabulary.len(), cfg.max_class_weight)?;
    let mut optimizer = AdamWState::new(cfg.adamw());
    let threads = threads_from_env();

    let initial = evaluate(model, dataset, &val_idx, MacroMode::Class, threads)?.0;
    let mut best_accuracy = initial.report_accuracy;
    let mut best_store = model.store.clone();
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let epoch_samples = augment(&samples, &cfg.augment, mix(cfg.seed, epoch, 1));
        let mut order: Vec<usize> = (0..epoch_samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch, 2)));
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &epoch_samples[i]).collect();
            let loss = train_step(model, &mut optimizer, &batch, &weights)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("mean loss at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            steps += 1;
        }
        let val = evaluate(model, dataset, &val_idx, MacroMode::Class, threads)?.0;
        history.push(EpochRecord {
            epoch,
            steps,
            mean_loss: if epoch_samples.is_empty() {
                0.0
            } else {
                loss_sum / epoch_samples.len() as f64
            },
            val_report_accuracy: val.report_accuracy,
            val_level_accuracy: level_accuracy(&val),
        });
        if val.report_accuracy > best_accuracy {
            best_accuracy = val.report_accuracy;
            best_store = model.store.clone();
            best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.store.load_from(&best_store)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        initial_val_report_accuracy: initial.report_accuracy,
        stopped_early,
    })
}

impl Checkpoint {
    pub fn from_training(model: HicaModel, cfg: &TrainConfig, outcome: &TrainOutcome) -> Self {
        Self {
            model,
            train: Some(cfg.clone()),
            rng: RngState {
                seed: cfg.seed,
                epochs_completed: outcome.history.len(),
            },
            history: outcome.history.clone(),
        }
    }

    pub fn untrained(model: HicaModel) -> Self {
        Self {
            model,
            train: None,
            rng: RngState::default(),
            history: Vec::new(),
        }
    }
}

/// The loss of `sample` as a function of the parameter store.
pub fn sample_loss<'a>(
    model: &'a HicaModel,
    sample: &'a Sample,
    weights: &'a ClassWeights,
) -> Result<impl Fn(&ParamStore) -> Result<(Graph, Var)> + 'a> {
    let inputs = model.encode_sample(sample)?;
    Ok(move |store: &ParamStore| {
        let (g, root, _) = model.loss_graph(store, &inputs, &sample.gold, weights, &sample.mask)?;
        Ok((g, root))
    })
}

/// Finite-difference result for one group of parameters.
#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: String,
    pub report: GradCheckReport,
}

/// Finite-difference verification of the alignment module and every decoder, each
/// on a sample of the matching level drawn from `dataset`, followed by the loss.
///
/// The loss check perturbs the stacked logits of several samples and differentiates
/// their summed loss.
pub fn gradient_suite(
    model: &HicaModel,
    dataset: &Dataset,
    cfg: GradCheckConfig,
) -> Result<Vec<ModuleCheck>> {
    model.check_vocabulary(&dataset.tree)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let samples = dataset_samples(dataset, &all, &model.prompts)?;
    let weights = class_weights(&samples, model.vocabulary.len(), DEFAULT_MAX_WEIGHT)?;
    let pick = |level: Level| {
        samples
            .iter()
            .find(|s| s.level == level)
            .ok_or_else(|| Error::Config(format!("dataset has no level-{level} question")))
    };
    let mut out = Vec::new();
    if let Some(a) = &model.alignment {
        let build = sample_loss(model, pick(Level::ONE)?, &weights)?;
        out.push(ModuleCheck {
            module: "alignment".into(),
            report: finite_diff_check(&model.store, &a.ids(), cfg, build)?,
        });
    }
    for level in Level::ALL {
        let index = model.decoder_index(level);
        let name = if model.decoders.len() == 1 {
            format!("decoder.shared@level{level}")
        } else {
            format!("decoder.level{level}")
        };
        let build = sample_loss(model, pick(level)?, &weights)?;
        out.push(ModuleCheck {
            module: name,
            report: finite_diff_check(&model.store, &model.decoders[index].ids(), cfg, build)?,
        });
    }

    // one logits row per sample, enough rows to cover the requested coordinates
    let v = model.vocabulary.len();
    let rows = cfg.samples.div_ceil(v).clamp(1, samples.len());
    let mut logits_store = ParamStore::new();
    let mut rows_used = Vec::with_capacity(rows);
    for (i, sample) in samples.iter().take(rows).enumerate() {
        let inputs = model.encode_sample(sample)?;
        let id = logits_store.insert(
            format!("logits{i}"),
            Tensor2::row_vector(&model.logits(&inputs)?.0),
        );
        rows_used.push((id, sample));
    }
    let ids: Vec<ParamId> = rows_used.iter().map(|(id, _)| *id).collect();
    let report = finite_diff_check(&logits_store, &ids, cfg, |store| {
        let mut g = Graph::new();
        let mut total: Option<Var> = None;
        for (id, sample) in &rows_used {
            let z = g.param(store, *id);
            let (root, _) = bce_on(&mut g, z, &sample.gold, &weights, &sample.mask)?;
            total = Some(match total {
                Some(t) => g.add(t, root)?,
                None => root,
            });
        }
        Ok((g, total.expect("at least one logits row")))
    })?;
    out.push(ModuleCheck {
        module: "loss".into(),
        report,
    });
    Ok(out)
}
