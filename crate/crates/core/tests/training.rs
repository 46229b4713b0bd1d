//! Training-time properties of the objective and the optimiser.

use hica_vqa::featurizers::{encode_image, FeaturizerConfig};
use hica_vqa::hierarchy::{dataset_samples, generate_dataset, Dataset, Split, SyntheticConfig};
use hica_vqa::metrics::MacroMode;
use hica_vqa::model::{HicaModel, ModelConfig};
use hica_vqa::numerics::{AdamWState, ParamStore};
use hica_vqa::objective::{class_weights, sigmoid, weighted_masked_bce, AnswerMask, ClassWeights};
use hica_vqa::prompting::{Level, PromptTable};
use hica_vqa::trainer::{evaluate, train, train_step, Checkpoint, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_dataset(reports: usize) -> Dataset {
    let cfg = SyntheticConfig {
        reports,
        featurizer: FeaturizerConfig {
            d_model: 8,
            image_tokens: 2,
            seed: 3,
        },
        ..SyntheticConfig::default()
    };
    generate_dataset(&cfg, 4).unwrap()
}

fn small_model(dataset: &Dataset, shared: bool) -> HicaModel {
    HicaModel::new(
        ModelConfig {
            heads: 2,
            ffn_hidden: 16,
            shared_decoder: shared,
            ..ModelConfig::default()
        },
        dataset.featurizer(&FeaturizerConfig::default()),
        PromptTable::default(),
        dataset.tree.vocabulary().clone(),
        6,
    )
    .unwrap()
}

fn bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .map(|(_, name, t)| {
            (
                name.to_string(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn zero_logits_give_ln2_for_any_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let v = rng.random_range(1..=12);
        let gt: Vec<f64> = (0..v)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        let mut bits: Vec<bool> = (0..v).map(|_| rng.random_bool(0.6)).collect();
        bits[rng.random_range(0..v)] = true;
        let mask = AnswerMask::new(bits).unwrap();
        let b = weighted_masked_bce(&vec![0.0; v], &gt, &ClassWeights::uniform(v), &mask).unwrap();
        assert!((b.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

#[test]
fn masked_entries_have_zero_gradient_and_no_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..50 {
        let v = rng.random_range(2..=10);
        let z: Vec<f64> = (0..v).map(|_| rng.random_range(-30.0..30.0)).collect();
        let gt: Vec<f64> = (0..v).map(|_| rng.random_range(0..2) as f64).collect();
        let mut bits: Vec<bool> = (0..v).map(|_| rng.random_bool(0.5)).collect();
        bits[0] = true;
        let mask = AnswerMask::new(bits.clone()).unwrap();
        let w = ClassWeights::new((0..v).map(|_| rng.random_range(1.0..100.0)).collect()).unwrap();
        let b = weighted_masked_bce(&z, &gt, &w, &mask).unwrap();
        for i in 0..v {
            if !bits[i] {
                assert_eq!(b.grad[i], 0.0);
                assert_eq!(b.masked[i], 0.0);
            }
        }
        let valid: f64 = b.masked.iter().sum();
        assert!((b.loss - valid / b.valid_count as f64).abs() < 1e-12);
    }
}

#[test]
fn stable_form_matches_naive_form_and_survives_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..200 {
        let z: f64 = rng.random_range(-8.0..8.0);
        let w: f64 = rng.random_range(1.0..50.0);
        for gt in [0.0, 1.0] {
            let s = sigmoid(z);
            let naive = -(w * gt * s.ln() + (1.0 - gt) * (1.0 - s).ln());
            let b = weighted_masked_bce(
                &[z],
                &[gt],
                &ClassWeights::new(vec![w]).unwrap(),
                &AnswerMask::new(vec![true]).unwrap(),
            )
            .unwrap();
            assert!(
                (b.loss - naive).abs() <= 1e-9 * naive.abs().max(1.0),
                "z={z} gt={gt}"
            );
        }
    }
    for z in [-1e4, -800.0, 800.0, 1e4] {
        for gt in [0.0, 1.0] {
            let b = weighted_masked_bce(
                &[z],
                &[gt],
                &ClassWeights::uniform(1),
                &AnswerMask::new(vec![true]).unwrap(),
            )
            .unwrap();
            assert!(b.loss.is_finite() && b.grad[0].is_finite());
            let wrong = (z > 0.0) != (gt > 0.5);
            if wrong {
                assert!((b.loss - z.abs()).abs() < 1e-9);
            } else {
                assert!(b.loss < 1e-300);
            }
        }
    }
}

#[test]
fn class_weight_scales_positive_terms_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mask = AnswerMask::new(vec![true, true]).unwrap();
    for _ in 0..100 {
        let z = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let w: f64 = rng.random_range(1.0..100.0);
        let base = weighted_masked_bce(&z, &[1.0, 0.0], &ClassWeights::uniform(2), &mask).unwrap();
        let scaled = weighted_masked_bce(
            &z,
            &[1.0, 0.0],
            &ClassWeights::new(vec![w, w]).unwrap(),
            &mask,
        )
        .unwrap();
        assert!((scaled.raw[0] - w * base.raw[0]).abs() < 1e-12 * scaled.raw[0].max(1.0));
        assert_eq!(scaled.raw[1], base.raw[1]);
        assert!((scaled.grad[0] - w * base.grad[0]).abs() < 1e-12);
    }
}

#[test]
fn class_weights_follow_clamped_ratio() {
    let dataset = small_dataset(40);
    let samples = dataset_samples(
        &dataset,
        &(0..dataset.len()).collect::<Vec<_>>(),
        &PromptTable::default(),
    )
    .unwrap();
    let v = dataset.tree.vocabulary().len();
    let w = class_weights(&samples, v, 100.0).unwrap();
    for c in 0..v {
        let relevant: Vec<_> = samples.iter().filter(|s| s.mask.is_valid(c)).collect();
        let pos = relevant.iter().filter(|s| s.gold[c] > 0.5).count();
        let neg = relevant.len() - pos;
        let expected = if pos == 0 {
            100.0
        } else {
            (neg as f64 / pos as f64).clamp(1.0, 100.0)
        };
        assert_eq!(
            w.values()[c],
            expected,
            "class {}",
            dataset.tree.vocabulary().name(c)
        );
    }
}

#[test]
fn decoder_updates_stay_in_their_level() {
    let dataset = small_dataset(30);
    let mut model = small_model(&dataset, false);
    let samples = dataset_samples(
        &dataset,
        &(0..dataset.len()).collect::<Vec<_>>(),
        &PromptTable::default(),
    )
    .unwrap();
    let weights = class_weights(&samples, model.vocabulary.len(), 100.0).unwrap();
    let mut opt = AdamWState::new(TrainConfig::default().adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for step in 0..100 {
        let s = &samples[rng.random_range(0..samples.len())];
        let before = bits(&model.store);
        let steps_before: Vec<u64> = model.store.ids().map(|id| opt.param_steps(id)).collect();
        train_step(&mut model, &mut opt, &[s], &weights).unwrap();
        let after = bits(&model.store);
        let own = format!("decoder.level{}.", s.level.get());
        for (i, ((name, a), (_, b))) in before.iter().zip(&after).enumerate() {
            let id = model.store.find(name).unwrap();
            if name.starts_with("decoder.") && !name.starts_with(&own) {
                assert_eq!(
                    a,
                    b,
                    "step {step}: {name} moved on a level-{} sample",
                    s.level.get()
                );
                assert_eq!(opt.param_steps(id), steps_before[i]);
            }
            if name.starts_with(&own) && name.ends_with("classifier") {
                assert_ne!(a, b, "step {step}: own classifier did not move");
            }
        }
    }
}

#[test]
fn featurizer_output_is_unchanged_by_training() {
    let dataset = small_dataset(20);
    let mut model = small_model(&dataset, false);
    let before: Vec<_> = dataset
        .reports
        .iter()
        .map(|r| encode_image(&r.image_id, &model.featurizer).unwrap())
        .collect();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    train(&mut model, &dataset, &cfg).unwrap();
    for (r, b) in dataset.reports.iter().zip(&before) {
        assert_eq!(&encode_image(&r.image_id, &model.featurizer).unwrap(), b);
    }
    for (_, name, _) in model.store.iter() {
        assert!(
            name.starts_with("align.") || name.starts_with("decoder."),
            "unexpected trainable {name}"
        );
    }
}

#[test]
fn zero_learning_rate_keeps_initial_metrics() {
    let dataset = small_dataset(40);
    let mut model = small_model(&dataset, false);
    let before = bits(&model.store);
    let val = dataset.split_indices(Split::Val);
    let val = if val.is_empty() {
        dataset.split_indices(Split::Train)
    } else {
        val
    };
    let initial = evaluate(&model, &dataset, &val, MacroMode::Class, None)
        .unwrap()
        .0;
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &dataset, &cfg).unwrap();
    assert_eq!(bits(&model.store), before);
    assert_eq!(outcome.history.len(), 1);
    assert_eq!(
        outcome.history[0].val_report_accuracy,
        initial.report_accuracy
    );
    assert_eq!(outcome.initial_val_report_accuracy, initial.report_accuracy);
    let after = evaluate(&model, &dataset, &val, MacroMode::Class, None)
        .unwrap()
        .0;
    assert_eq!(
        serde_json::to_string(&after).unwrap(),
        serde_json::to_string(&initial).unwrap()
    );
}

#[test]
fn identical_runs_give_identical_checkpoints_and_metrics() {
    let dataset = small_dataset(30);
    let run = || {
        let mut model = small_model(&dataset, false);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 8,
            ..TrainConfig::default()
        };
        let outcome = train(&mut model, &dataset, &cfg).unwrap();
        let test = dataset.split_indices(Split::Test);
        let metrics = evaluate(&model, &dataset, &test, MacroMode::Class, Some(1))
            .unwrap()
            .0;
        let bytes = Checkpoint::from_training(model, &cfg, &outcome)
            .to_bytes()
            .unwrap();
        (bytes, serde_json::to_string(&metrics).unwrap())
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn evaluation_does_not_depend_on_thread_count() {
    let dataset = small_dataset(30);
    let model = small_model(&dataset, true);
    let all: Vec<usize> = (0..dataset.len()).collect();
    let (m1, p1) = evaluate(&model, &dataset, &all, MacroMode::Question, Some(1)).unwrap();
    let (m3, p3) = evaluate(&model, &dataset, &all, MacroMode::Question, Some(3)).unwrap();
    assert_eq!(p1, p3);
    assert_eq!(
        serde_json::to_string(&m1).unwrap(),
        serde_json::to_string(&m3).unwrap()
    );
}

#[test]
fn shared_decoder_receives_every_level() {
    let dataset = small_dataset(20);
    let model = small_model(&dataset, true);
    for l in 1..=3 {
        assert_eq!(model.decoder_index(Level::new(l).unwrap()), 0);
    }
    assert_eq!(model.decoders.len(), 1);
}
