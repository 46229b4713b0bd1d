//! Report accuracy, macro precision/recall/F1, and instance matching.
//!
//! Predictions and gold reports are first normalised into one list of decisions per
//! report. Instances of a repeatable node are paired by [`match_instances`] and the
//! predicted instances renumbered onto their gold partners; every unanswered
//! question takes its negative answer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{
    enumerate_paths, validate_answers, AnswerMap, AnswerSet, GoldReport, QuestionTree,
};
use crate::inference::PredictedReport;
use crate::prompting::Level;

/// Instance counts up to this size are matched by exhaustive search.
pub const EXHAUSTIVE_LIMIT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MacroMode {
    /// Unweighted mean over answer classes.
    #[default]
    Class,
    /// Unweighted mean over question nodes.
    Question,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, gold: bool, pred: bool) {
        match (gold, pred) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    /// Scored question instances.
    pub questions: usize,
    pub accuracy: Option<f64>,
    #[serde(rename = "macro")]
    pub macro_prf: Option<Prf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub reports: usize,
    pub paths: usize,
    pub report_accuracy: f64,
    pub macro_mode: MacroMode,
    pub overall: Option<Prf>,
    pub levels: BTreeMap<String, LevelMetrics>,
    pub per_class: BTreeMap<String, ClassStats>,
}

/// `2|A∩B| / (|A|+|B|)`; two empty sets score 1.
pub fn set_f1<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

/// Pairs predicted with gold instances to maximise the summed pairwise F1.
///
/// Returns, for each predicted instance, its gold partner. Exhaustive search with a
/// lexicographic tie-break up to [`EXHAUSTIVE_LIMIT`] instances, the Hungarian
/// method beyond.
pub fn match_instances<T: Ord>(pred: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Vec<Option<usize>> {
    let scores: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| gold.iter().map(|g| set_f1(p, g)).collect())
        .collect();
    best_assignment(&scores, gold.len())
}

/// Maximum-weight partial assignment of rows to `cols` columns.
pub fn best_assignment(scores: &[Vec<f64>], cols: usize) -> Vec<Option<usize>> {
    if scores.is_empty() || cols == 0 {
        return vec![None; scores.len()];
    }
    if scores.len().max(cols) <= EXHAUSTIVE_LIMIT {
        exhaustive(scores, cols)
    } else {
        hungarian(scores, cols)
    }
}

/// Total score of an assignment.
pub fn assignment_score(scores: &[Vec<f64>], assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| scores[i][j]))
        .sum()
}

fn exhaustive(scores: &[Vec<f64>], cols: usize) -> Vec<Option<usize>> {
    fn go(
        i: usize,
        scores: &[Vec<f64>],
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        total: f64,
        best: &mut (f64, Vec<Option<usize>>),
    ) {
        if i == scores.len() {
            if total > best.0 + 1e-12 {
                *best = (total, current.clone());
            }
            return;
        }
        current.push(None);
        go(i + 1, scores, used, current, total, best);
        current.pop();
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                current.push(Some(j));
                go(i + 1, scores, used, current, total + scores[i][j], best);
                current.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(
        0,
        scores,
        &mut vec![false; cols],
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    best.1
}

/// Square Hungarian method on the negated, zero-padded score matrix.
fn hungarian(scores: &[Vec<f64>], cols: usize) -> Vec<Option<usize>> {
    let rows = scores.len();
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -scores[i][j]
        } else {
            0.0
        }
    };
    // 1-based potentials and matching, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// One scored question instance after normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub node: usize,
    pub instance: u32,
    pub gold: AnswerSet,
    pub pred: AnswerSet,
}

fn subtree(tree: &QuestionTree, root: usize) -> Vec<usize> {
    let mut out = vec![root];
    let mut i = 0;
    while i < out.len() {
        out.extend(tree.node(out[i]).children.iter().copied());
        i += 1;
    }
    out
}

fn yes_instances(tree: &QuestionTree, map: &AnswerMap, node: usize) -> Vec<u32> {
    (0..tree.node(node).max_occurrences)
        .take_while(|&k| map.get(&(node, k)).is_some_and(|a| QuestionTree::is_yes(a)))
        .collect()
}

fn findings(
    tree: &QuestionTree,
    map: &AnswerMap,
    nodes: &[usize],
    instance: u32,
) -> BTreeSet<(usize, usize)> {
    let mut set = BTreeSet::new();
    for &n in nodes {
        if let Some(a) = map.get(&(n, instance)) {
            if tree.is_positive(n, a) {
                set.extend(a.iter().map(|&c| (n, c)));
            }
        }
    }
    set
}

/// Aligns one predicted report with its gold report.
pub fn normalize(tree: &QuestionTree, gold: &AnswerMap, pred: &AnswerMap) -> Vec<Decision> {
    // instance keys scored for each repeatable node, and predicted-instance renumbering
    let mut keys: HashMap<usize, Vec<u32>> = HashMap::new();
    let mut renumber: HashMap<usize, HashMap<u32, u32>> = HashMap::new();
    for (r, node) in tree.nodes().iter().enumerate() {
        if !node.is_repeatable() {
            continue;
        }
        let members = subtree(tree, r);
        let g = yes_instances(tree, gold, r);
        let p = yes_instances(tree, pred, r);
        let g_sets: Vec<_> = g
            .iter()
            .map(|&k| findings(tree, gold, &members, k))
            .collect();
        let p_sets: Vec<_> = p
            .iter()
            .map(|&k| findings(tree, pred, &members, k))
            .collect();
        let pairing = match_instances(&p_sets, &g_sets);
        let mut next = g.len() as u32;
        let mut map = HashMap::new();
        for (i, partner) in pairing.iter().enumerate() {
            let to = match partner {
                Some(j) => g[*j],
                None => {
                    next += 1;
                    next - 1
                }
            };
            map.insert(p[i], to);
        }
        let mut k: BTreeSet<u32> = BTreeSet::from([0]);
        k.extend(g.iter().copied());
        k.extend(map.values().copied());
        keys.insert(r, k.into_iter().collect());
        renumber.insert(r, map);
    }

    let mut remapped = AnswerMap::new();
    for (&(n, k), a) in pred {
        match tree.repeat_scope(n) {
            None => {
                remapped.insert((n, k), a.clone());
            }
            Some(r) => {
                if let Some(&to) = renumber[&r].get(&k) {
                    remapped.insert((n, to), a.clone());
                }
            }
        }
    }
    let gold_kept = |n: usize, k: u32| -> AnswerSet {
        let scope_ok = match tree.repeat_scope(n) {
            None => true,
            Some(r) => yes_instances(tree, gold, r).contains(&k),
        };
        match gold.get(&(n, k)) {
            Some(a) if scope_ok => a.clone(),
            _ => tree.negative_answer(n),
        }
    };

    let mut out = Vec::new();
    for n in 0..tree.len() {
        let instances = match tree.repeat_scope(n) {
            None => vec![0],
            Some(r) => keys[&r].clone(),
        };
        for k in instances {
            out.push(Decision {
                node: n,
                instance: k,
                gold: gold_kept(n, k),
                pred: remapped
                    .get(&(n, k))
                    .cloned()
                    .unwrap_or_else(|| tree.negative_answer(n)),
            });
        }
    }
    out
}

/// Pairs predictions with gold reports by image id and normalises each pair.
pub fn align_reports(
    preds: &[PredictedReport],
    golds: &[GoldReport],
    tree: &QuestionTree,
) -> Result<Vec<Vec<Decision>>> {
    if preds.len() != golds.len() {
        return Err(Error::Config(format!(
            "{} predicted reports for {} gold reports",
            preds.len(),
            golds.len()
        )));
    }
    let mut by_id: HashMap<&str, &PredictedReport> = HashMap::new();
    for p in preds {
        if by_id.insert(p.image_id.as_str(), p).is_some() {
            return Err(Error::Config(format!(
                "duplicate prediction for {}",
                p.image_id
            )));
        }
    }
    golds
        .iter()
        .map(|g| {
            let p = by_id
                .get(g.image_id.as_str())
                .ok_or_else(|| Error::Config(format!("no prediction for {}", g.image_id)))?;
            let gold = validate_answers(tree, &g.image_id, &g.answers)?;
            let pred = p.to_answer_map(tree)?;
            Ok(normalize(tree, &gold, &pred))
        })
        .collect()
}

fn path_stats(tree: &QuestionTree, decisions: &[Vec<Decision>]) -> (usize, usize) {
    let paths = enumerate_paths(tree);
    let mut correct = 0;
    for report in decisions {
        let mut ok = vec![true; tree.len()];
        for d in report {
            if d.gold != d.pred {
                ok[d.node] = false;
            }
        }
        correct += paths.iter().filter(|p| p.iter().all(|&n| ok[n])).count();
    }
    (correct, paths.len() * decisions.len())
}

/// Fraction of root-to-leaf paths whose every question instance is answered correctly.
pub fn report_accuracy(
    preds: &[PredictedReport],
    golds: &[GoldReport],
    tree: &QuestionTree,
) -> Result<f64> {
    let decisions = align_reports(preds, golds, tree)?;
    let (correct, total) = path_stats(tree, &decisions);
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

fn class_counts(
    tree: &QuestionTree,
    decisions: &[Vec<Decision>],
    level: Option<Level>,
) -> (BTreeMap<usize, Counts>, BTreeMap<usize, Counts>) {
    let mut by_class: BTreeMap<usize, Counts> = BTreeMap::new();
    let mut by_node: BTreeMap<usize, Counts> = BTreeMap::new();
    for d in decisions.iter().flatten() {
        let node = tree.node(d.node);
        if level.is_some_and(|l| l != node.level) {
            continue;
        }
        for &c in &node.candidate_ids {
            let (g, p) = (d.gold.contains(&c), d.pred.contains(&c));
            by_class.entry(c).or_default().add(g, p);
            by_node.entry(d.node).or_default().add(g, p);
        }
    }
    (by_class, by_node)
}

fn macro_of(counts: &BTreeMap<usize, Counts>) -> Option<Prf> {
    let present: Vec<Prf> = counts
        .values()
        .filter(|c| !c.is_empty())
        .map(Counts::prf)
        .collect();
    if present.is_empty() {
        return None;
    }
    let n = present.len() as f64;
    Some(Prf {
        precision: present.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: present.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: present.iter().map(|p| p.f1).sum::<f64>() / n,
    })
}

fn macro_from(
    tree: &QuestionTree,
    decisions: &[Vec<Decision>],
    level: Option<Level>,
    mode: MacroMode,
) -> Option<Prf> {
    let (by_class, by_node) = class_counts(tree, decisions, level);
    match mode {
        MacroMode::Class => macro_of(&by_class),
        MacroMode::Question => macro_of(&by_node),
    }
}

/// Class-level macro P/R/F1 over the decisions at `level` (all levels when `None`).
/// `None` when no class has any gold or predicted occurrence.
pub fn macro_prf(
    preds: &[PredictedReport],
    golds: &[GoldReport],
    tree: &QuestionTree,
    level: Option<Level>,
) -> Result<Option<Prf>> {
    let decisions = align_reports(preds, golds, tree)?;
    Ok(macro_from(tree, &decisions, level, MacroMode::Class))
}

/// Every metric at once.
pub fn compute_metrics(
    preds: &[PredictedReport],
    golds: &[GoldReport],
    tree: &QuestionTree,
    mode: MacroMode,
) -> Result<MetricsReport> {
    compute_metrics_at(preds, golds, tree, mode, None)
}

/// Like [`compute_metrics`], with the overall macro scores, the per-class table and
/// the level breakdown restricted to `level` when one is given. Report accuracy
/// always covers whole paths.
pub fn compute_metrics_at(
    preds: &[PredictedReport],
    golds: &[GoldReport],
    tree: &QuestionTree,
    mode: MacroMode,
    level: Option<Level>,
) -> Result<MetricsReport> {
    let decisions = align_reports(preds, golds, tree)?;
    Ok(metrics_from_decisions(tree, &decisions, mode, level))
}

pub fn metrics_from_decisions(
    tree: &QuestionTree,
    decisions: &[Vec<Decision>],
    mode: MacroMode,
    level_filter: Option<Level>,
) -> MetricsReport {
    let (correct, total) = path_stats(tree, decisions);
    let mut levels = BTreeMap::new();
    for level in Level::ALL
        .into_iter()
        .filter(|l| level_filter.is_none_or(|f| f == *l))
    {
        let scored: Vec<&Decision> = decisions
            .iter()
            .flatten()
            .filter(|d| tree.node(d.node).level == level)
            .collect();
        let right = scored.iter().filter(|d| d.gold == d.pred).count();
        levels.insert(
            level.to_string(),
            LevelMetrics {
                questions: scored.len(),
                accuracy: (!scored.is_empty()).then(|| right as f64 / scored.len() as f64),
                macro_prf: macro_from(tree, decisions, Some(level), mode),
            },
        );
    }
    let (by_class, _) = class_counts(tree, decisions, level_filter);
    let per_class = by_class
        .iter()
        .filter(|(_, c)| !c.is_empty())
        .map(|(&c, counts)| {
            let prf = counts.prf();
            (
                tree.vocabulary().name(c).to_string(),
                ClassStats {
                    counts: *counts,
                    precision: prf.precision,
                    recall: prf.recall,
                    f1: prf.f1,
                },
            )
        })
        .collect();
    MetricsReport {
        reports: decisions.len(),
        paths: total,
        report_accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        macro_mode: mode,
        overall: macro_from(tree, decisions, level_filter, mode),
        levels,
        per_class,
    }
}

impl MetricsReport {
    /// Metrics of `level`; panics when a level filter excluded it.
    pub fn level(&self, level: Level) -> &LevelMetrics {
        &self.levels[&level.to_string()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[u32]) -> BTreeSet<u32> {
        items.iter().copied().collect()
    }

    #[test]
    fn crossed_pairing_wins() {
        let pred = vec![set(&[1, 2]), set(&[3, 4])];
        let gold = vec![set(&[3, 4]), set(&[1, 2])];
        assert_eq!(match_instances(&pred, &gold), vec![Some(1), Some(0)]);
    }

    #[test]
    fn empty_sides() {
        let none: Vec<BTreeSet<u32>> = vec![];
        assert!(match_instances(&none, &[set(&[1])]).is_empty());
        assert_eq!(match_instances(&[set(&[1])], &none), vec![None]);
    }

    #[test]
    fn hungarian_matches_exhaustive_on_small_cases() {
        let scores = vec![
            vec![0.1, 0.9, 0.3],
            vec![0.8, 0.2, 0.4],
            vec![0.5, 0.6, 0.7],
            vec![0.3, 0.3, 0.3],
        ];
        let h = hungarian(&scores, 3);
        let e = exhaustive(&scores, 3);
        assert!((assignment_score(&scores, &h) - assignment_score(&scores, &e)).abs() < 1e-12);
        assert!((assignment_score(&scores, &e) - 2.4).abs() < 1e-12);
    }

    #[test]
    fn counts_conventions() {
        let c = Counts {
            tp: 0,
            fp: 3,
            fn_: 0,
        };
        assert_eq!(
            c.prf(),
            Prf {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0
            }
        );
        let perfect = Counts {
            tp: 2,
            fp: 0,
            fn_: 0,
        };
        let mut m = BTreeMap::new();
        m.insert(0, c);
        m.insert(1, perfect);
        m.insert(2, Counts::default());
        assert_eq!(macro_of(&m).unwrap().precision, 0.5);
        assert!(macro_of(&BTreeMap::new()).is_none());
    }
}
