//! Random question trees with brute-force path scoring.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use hica_vqa::hierarchy::{
    walk, AnswerEntry, AnswerSet, ChoiceKind, GoldReport, NodeDoc, QuestionTree, TreeDoc, Visit,
    NO, NO_SELECTION, YES,
};
use hica_vqa::inference::{answer_report, Answerer, PredictedAnswer, PredictedReport};
use hica_vqa::prompting::PromptTable;
use hica_vqa::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn yes_no(id: String, level: u8, children: Vec<NodeDoc>, max_occurrences: u32) -> NodeDoc {
    NodeDoc {
        text: format!("is there {id}"),
        follow_up_text: if max_occurrences > 1 {
            format!("another {id}")
        } else {
            String::new()
        },
        id,
        level,
        kind: ChoiceKind::Single,
        candidates: vec![YES.into(), NO.into()],
        children,
        max_occurrences,
    }
}

pub fn leaf(rng: &mut ChaCha8Rng, id: String) -> NodeDoc {
    let n = rng.random_range(1..=4);
    let mut candidates: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
    candidates.push(NO_SELECTION.into());
    NodeDoc {
        text: format!("what is {id}"),
        id,
        level: 3,
        kind: if rng.random_bool(0.5) {
            ChoiceKind::Multi
        } else {
            ChoiceKind::Single
        },
        candidates,
        children: vec![],
        max_occurrences: 1,
        follow_up_text: String::new(),
    }
}

/// Random three-level template. With `repeats`, some level-1 or level-2 nodes
/// become repeatable (never two on one chain).
pub fn random_tree(rng: &mut ChaCha8Rng, repeats: bool) -> TreeDoc {
    let roots = (0..rng.random_range(1..=3))
        .map(|r| {
            let root_repeats = repeats && rng.random_bool(0.3);
            let children = (0..rng.random_range(0..=3))
                .map(|c| {
                    let leaves = (0..rng.random_range(0..=2))
                        .map(|l| leaf(rng, format!("n{r}.{c}.{l}")))
                        .collect();
                    let occ = if repeats && !root_repeats && rng.random_bool(0.4) {
                        rng.random_range(2..=4)
                    } else {
                        1
                    };
                    yes_no(format!("n{r}.{c}"), 2, leaves, occ)
                })
                .collect();
            let occ = if root_repeats {
                rng.random_range(2..=3)
            } else {
                1
            };
            yes_no(format!("n{r}"), 1, children, occ)
        })
        .collect();
    TreeDoc { roots }
}

pub fn random_answer(
    rng: &mut ChaCha8Rng,
    tree: &QuestionTree,
    node: usize,
    p_yes: f64,
) -> AnswerSet {
    let n = tree.node(node);
    if n.level.is_binary() {
        return if rng.random_bool(p_yes) {
            vec![0]
        } else {
            vec![1]
        };
    }
    let ns = tree.vocabulary().no_selection().unwrap();
    let real: Vec<usize> = n
        .candidate_ids
        .iter()
        .copied()
        .filter(|&c| c != ns)
        .collect();
    if rng.random_bool(0.25) {
        return vec![ns];
    }
    let mut set: Vec<usize> = match n.kind {
        ChoiceKind::Single => vec![real[rng.random_range(0..real.len())]],
        ChoiceKind::Multi => {
            let picked: Vec<usize> = real
                .iter()
                .copied()
                .filter(|_| rng.random_bool(0.5))
                .collect();
            if picked.is_empty() {
                vec![real[0]]
            } else {
                picked
            }
        }
    };
    set.sort_unstable();
    set
}

pub struct RandomAnswerer {
    pub rng: RefCell<ChaCha8Rng>,
    pub p_yes: f64,
}

impl Answerer for RandomAnswerer {
    fn answer(
        &self,
        _: &str,
        _: &PromptTable,
        visit: &Visit,
        tree: &QuestionTree,
    ) -> Result<AnswerSet> {
        Ok(random_answer(
            &mut self.rng.borrow_mut(),
            tree,
            visit.node,
            self.p_yes,
        ))
    }
}

pub fn random_gold(rng: &mut ChaCha8Rng, tree: &QuestionTree, image_id: &str) -> GoldReport {
    let records = walk(tree, |v| Ok(random_answer(rng, tree, v.node, 0.6))).unwrap();
    GoldReport {
        image_id: image_id.into(),
        answers: records
            .into_iter()
            .map(|r| AnswerEntry {
                node_id: tree.node(r.node).id.clone(),
                instance: r.instance,
                answer: tree.answer_names(&r.answer),
            })
            .collect(),
    }
}

pub fn random_pred(rng: &mut ChaCha8Rng, tree: &QuestionTree, image_id: &str) -> PredictedReport {
    let answerer = RandomAnswerer {
        rng: RefCell::new(ChaCha8Rng::seed_from_u64(rng.random())),
        p_yes: 0.6,
    };
    answer_report(image_id, tree, &answerer, &PromptTable::default()).unwrap()
}

/// Prediction that copies the gold report, then flips each answer with probability `p`.
pub fn perturbed_pred(
    rng: &mut ChaCha8Rng,
    tree: &QuestionTree,
    gold: &GoldReport,
    p: f64,
) -> PredictedReport {
    let gold_map: BTreeMap<(String, u32), Vec<String>> = gold
        .answers
        .iter()
        .map(|a| ((a.node_id.clone(), a.instance), a.answer.clone()))
        .collect();
    let records = walk(tree, |v| {
        let id = &tree.node(v.node).id;
        let g = gold_map.get(&(id.clone(), v.instance));
        match g {
            Some(names) if !rng.random_bool(p) => tree.parse_answer(v.node, names),
            _ => Ok(random_answer(rng, tree, v.node, 0.5)),
        }
    })
    .unwrap();
    PredictedReport {
        image_id: gold.image_id.clone(),
        answers: records
            .into_iter()
            .map(|r| PredictedAnswer {
                node_id: tree.node(r.node).id.clone(),
                instance: r.instance,
                answer: tree.answer_names(&r.answer),
                forced: r.forced,
            })
            .collect(),
    }
}

pub fn doc_paths(nodes: &[NodeDoc], prefix: &mut Vec<String>, out: &mut Vec<Vec<String>>) {
    for n in nodes {
        prefix.push(n.id.clone());
        if n.children.is_empty() {
            out.push(prefix.clone());
        } else {
            doc_paths(&n.children, prefix, out);
        }
        prefix.pop();
    }
}

/// Brute force over the document for trees without repeatable nodes: a path is
/// correct iff each node on it carries the same answer set in both reports.
pub fn brute_force_accuracy(doc: &TreeDoc, preds: &[PredictedReport], golds: &[GoldReport]) -> f64 {
    let mut paths = Vec::new();
    doc_paths(&doc.roots, &mut Vec::new(), &mut paths);
    let mut correct = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        let as_sets =
            |entries: Vec<(&String, &Vec<String>)>| -> BTreeMap<String, BTreeSet<String>> {
                entries
                    .into_iter()
                    .map(|(k, v)| (k.clone(), v.iter().cloned().collect()))
                    .collect()
            };
        let pm = as_sets(p.answers.iter().map(|a| (&a.node_id, &a.answer)).collect());
        let gm = as_sets(g.answers.iter().map(|a| (&a.node_id, &a.answer)).collect());
        correct += paths
            .iter()
            .filter(|path| path.iter().all(|id| pm[id] == gm[id]))
            .count();
    }
    correct as f64 / (paths.len() * golds.len()) as f64
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn random_sets(rng: &mut ChaCha8Rng, n: usize) -> Vec<BTreeSet<u8>> {
    (0..n)
        .map(|_| {
            (0..rng.random_range(0..5))
                .map(|_| rng.random_range(0..6))
                .collect()
        })
        .collect()
}

/// Consistency of a predicted report, checked from its answer list alone.
pub fn violations(tree: &QuestionTree, pred: &PredictedReport) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen: BTreeMap<(usize, u32), AnswerSet> = BTreeMap::new();
    for a in &pred.answers {
        let node = tree.index_of(&a.node_id).unwrap();
        let set = tree.parse_answer(node, &a.answer).unwrap();
        if a.instance >= tree.instance_bound(node) {
            out.push(format!("{}#{} beyond bound", a.node_id, a.instance));
        }
        if a.forced && set != tree.negative_answer(node) {
            out.push(format!(
                "{}#{} forced to a positive answer",
                a.node_id, a.instance
            ));
        }
        if seen.insert((node, a.instance), set).is_some() {
            out.push(format!("{}#{} answered twice", a.node_id, a.instance));
        }
    }
    for (&(node, k), set) in &seen {
        if !tree.is_positive(node, set) {
            continue;
        }
        if let Some(parent) = tree.parent_key(node, k) {
            if seen.get(&parent).map(|a| a.as_slice()) != Some(&[0][..]) {
                out.push(format!(
                    "{}#{k} positive under a non-yes parent",
                    tree.node(node).id
                ));
            }
        }
        if k > 0
            && tree.node(node).is_repeatable()
            && !seen
                .get(&(node, k - 1))
                .is_some_and(|a| tree.is_positive(node, a))
        {
            out.push(format!(
                "{}#{k} follow-up without a positive predecessor",
                tree.node(node).id
            ));
        }
    }
    for n in 0..tree.len() {
        if !seen.contains_key(&(n, 0)) {
            out.push(format!("{} never answered", tree.node(n).id));
        }
    }
    out
}
