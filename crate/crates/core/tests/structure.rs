//! Tree walks and metrics against brute-force oracles.

mod support;

use std::cell::RefCell;
use std::collections::BTreeSet;

use hica_vqa::hierarchy::{
    enumerate_paths, generate_dataset, load_template, GoldReport, SyntheticConfig,
};
use hica_vqa::inference::{answer_report, PredictedReport};
use hica_vqa::metrics::{
    assignment_score, compute_metrics, match_instances, report_accuracy, set_f1, MacroMode,
};
use hica_vqa::model::{HicaModel, ModelConfig};
use hica_vqa::prompting::PromptTable;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::trees::*;

#[test]
fn report_accuracy_matches_brute_force_on_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for t in 0..50 {
        let doc = random_tree(&mut rng, false);
        let tree = load_template(&doc).unwrap();
        let golds: Vec<GoldReport> = (0..rng.random_range(1..=12))
            .map(|i| random_gold(&mut rng, &tree, &format!("img{i}")))
            .collect();
        let preds: Vec<PredictedReport> = golds
            .iter()
            .map(|g| {
                if rng.random_bool(0.5) {
                    random_pred(&mut rng, &tree, &g.image_id)
                } else {
                    perturbed_pred(&mut rng, &tree, g, 0.15)
                }
            })
            .collect();
        let expected = brute_force_accuracy(&doc, &preds, &golds);
        let got = report_accuracy(&preds, &golds, &tree).unwrap();
        assert_eq!(got, expected, "tree {t}");
    }
}

#[test]
fn perfect_predictions_score_one_with_repeatable_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let tree = load_template(&random_tree(&mut rng, true)).unwrap();
        let golds: Vec<GoldReport> = (0..8)
            .map(|i| random_gold(&mut rng, &tree, &format!("i{i}")))
            .collect();
        let preds: Vec<PredictedReport> = golds
            .iter()
            .map(|g| perturbed_pred(&mut rng, &tree, g, 0.0))
            .collect();
        assert_eq!(report_accuracy(&preds, &golds, &tree).unwrap(), 1.0);
    }
}

#[test]
fn match_instances_is_optimal_against_exhaustive_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..500 {
        let (np, ng) = (rng.random_range(0..=4), rng.random_range(0..=4));
        let pred = random_sets(&mut rng, np);
        let gold = random_sets(&mut rng, ng);
        let scores: Vec<Vec<f64>> = pred
            .iter()
            .map(|p| gold.iter().map(|g| set_f1(p, g)).collect())
            .collect();
        // every injective partial map of rows into columns, via permutations of padded columns
        let width = np.max(ng);
        let mut best = 0.0f64;
        for perm in permutations(width) {
            let s: f64 = (0..np)
                .filter(|&i| perm[i] < ng)
                .map(|i| scores[i][perm[i]])
                .sum();
            best = best.max(s);
        }
        let got = match_instances(&pred, &gold);
        let used: Vec<usize> = got.iter().flatten().copied().collect();
        let distinct: BTreeSet<usize> = used.iter().copied().collect();
        assert_eq!(
            used.len(),
            distinct.len(),
            "assignment reuses a gold instance"
        );
        assert!((assignment_score(&scores, &got) - best).abs() < 1e-12);
    }
}

#[test]
fn hungarian_matches_exhaustive_beyond_the_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..200 {
        let (np, ng) = (rng.random_range(1..=7), rng.random_range(1..=7));
        if np.max(ng) <= 4 {
            continue;
        }
        let pred = random_sets(&mut rng, np);
        let gold = random_sets(&mut rng, ng);
        let scores: Vec<Vec<f64>> = pred
            .iter()
            .map(|p| gold.iter().map(|g| set_f1(p, g)).collect())
            .collect();
        let mut best = 0.0f64;
        for perm in permutations(np.max(ng)) {
            let s: f64 = (0..np)
                .filter(|&i| perm[i] < ng)
                .map(|i| scores[i][perm[i]])
                .sum();
            best = best.max(s);
        }
        let got = match_instances(&pred, &gold);
        assert!((assignment_score(&scores, &got) - best).abs() < 1e-9);
    }
}

#[test]
fn metrics_ignore_report_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..20 {
        let tree = load_template(&random_tree(&mut rng, true)).unwrap();
        let golds: Vec<GoldReport> = (0..10)
            .map(|i| random_gold(&mut rng, &tree, &format!("r{i}")))
            .collect();
        let preds: Vec<PredictedReport> = golds
            .iter()
            .map(|g| perturbed_pred(&mut rng, &tree, g, 0.3))
            .collect();
        let base = compute_metrics(&preds, &golds, &tree, MacroMode::Class).unwrap();
        let mut shuffled_preds = preds.clone();
        shuffled_preds.shuffle(&mut rng);
        let mut shuffled_golds = golds.clone();
        shuffled_golds.shuffle(&mut rng);
        let other =
            compute_metrics(&shuffled_preds, &shuffled_golds, &tree, MacroMode::Class).unwrap();
        assert_eq!(base.report_accuracy, other.report_accuracy);
        let a = serde_json::to_value(&base).unwrap();
        let b = serde_json::to_value(&other).unwrap();
        for key in ["overall", "levels", "per_class"] {
            let (x, y) = (&a[key], &b[key]);
            assert!(json_close(x, y), "{key} differs: {x} vs {y}");
        }
    }
}

fn json_close(a: &serde_json::Value, b: &serde_json::Value) -> bool {
    use serde_json::Value;
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() < 1e-12
        }
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| json_close(p, q))
        }
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len()
                && x.iter()
                    .all(|(k, v)| y.get(k).is_some_and(|w| json_close(v, w)))
        }
        _ => a == b,
    }
}

#[test]
fn random_answerers_never_violate_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..200 {
        let tree = load_template(&random_tree(&mut rng, true)).unwrap();
        for p_yes in [0.2, 0.8, 1.0] {
            let answerer = RandomAnswerer {
                rng: RefCell::new(ChaCha8Rng::seed_from_u64(rng.random())),
                p_yes,
            };
            let pred = answer_report("x", &tree, &answerer, &PromptTable::default()).unwrap();
            assert_eq!(violations(&tree, &pred), Vec::<String>::new());
            pred.to_answer_map(&tree).unwrap();
        }
    }
}

#[test]
fn always_yes_reaches_every_occurrence_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    for _ in 0..50 {
        let tree = load_template(&random_tree(&mut rng, true)).unwrap();
        let answerer = RandomAnswerer {
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(1)),
            p_yes: 1.0,
        };
        let pred = answer_report("x", &tree, &answerer, &PromptTable::default()).unwrap();
        for (i, n) in tree.nodes().iter().enumerate() {
            let max = pred
                .answers
                .iter()
                .filter(|a| a.node_id == n.id)
                .map(|a| a.instance)
                .max()
                .unwrap();
            assert_eq!(max + 1, tree.instance_bound(i), "{}", n.id);
        }
    }
}

#[test]
fn random_model_sweep_is_consistent() {
    let cfg = SyntheticConfig {
        reports: 1000,
        ..SyntheticConfig::default()
    };
    let dataset = generate_dataset(&cfg, 5).unwrap();
    let model = HicaModel::new(
        ModelConfig {
            heads: 2,
            ffn_hidden: 16,
            ..ModelConfig::default()
        },
        dataset.featurizer(&cfg.featurizer),
        PromptTable::default(),
        dataset.tree.vocabulary().clone(),
        9,
    )
    .unwrap();
    let mut invocations = 0;
    for g in &dataset.reports {
        let pred =
            answer_report(&g.image_id, &dataset.tree, &model, &PromptTable::default()).unwrap();
        assert_eq!(
            violations(&dataset.tree, &pred),
            Vec::<String>::new(),
            "{}",
            g.image_id
        );
        invocations += pred.model_invocations();
    }
    assert!(invocations >= dataset.reports.len() * dataset.tree.roots().len());
}

proptest! {
    #[test]
    fn enumerate_paths_are_maximal_chains(seed in any::<u64>(), repeats in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let doc = random_tree(&mut rng, repeats);
        let tree = load_template(&doc).unwrap();
        let paths = enumerate_paths(&tree);
        let mut expected = Vec::new();
        doc_paths(&doc.roots, &mut Vec::new(), &mut expected);
        let ids: Vec<Vec<String>> = paths
            .iter()
            .map(|p| p.iter().map(|&n| tree.node(n).id.clone()).collect())
            .collect();
        prop_assert_eq!(ids, expected);
        let leaves = tree.nodes().iter().filter(|n| n.children.is_empty()).count();
        prop_assert_eq!(paths.len(), leaves);
        for p in &paths {
            prop_assert!(tree.roots().contains(&p[0]));
            prop_assert!(tree.node(*p.last().unwrap()).children.is_empty());
            for w in p.windows(2) {
                prop_assert_eq!(tree.node(w[1]).parent, Some(w[0]));
                prop_assert_eq!(tree.node(w[1]).level.get(), tree.node(w[0]).level.get() + 1);
            }
        }
    }
}
