//! Synthetic structured-report generator with planted, feature-recoverable answers.
//!
//! Answers are a function of the mean image token `m` produced by the frozen image
//! featurizer. Each yes/no question instance owns a unit direction `u` and is answered
//! `yes` iff `m·u > 0`; level-3 candidates own directions of their own, combined by
//! the configured [`Level3Rule`].

use serde::{Deserialize, Serialize};

use super::report::{AnswerEntry, Dataset, GoldReport};
use super::tree::{
    load_template, ChoiceKind, NodeDoc, QuestionTree, TreeDoc, Vocabulary, NO, NO_SELECTION, YES,
};
use super::walk::walk;
use crate::error::{Error, Result};
use crate::featurizers::{encode_image, gaussian_row, FeaturizerConfig};
use crate::numerics::Tensor2;

const TOPICS: &[&str] = &[
    "opacity",
    "lesion",
    "device",
    "fracture",
    "effusion",
    "nodule",
    "calcification",
    "deformity",
];
const ORGANS: &[&str] = &[
    "lung",
    "heart",
    "spine",
    "rib",
    "diaphragm",
    "mediastinum",
    "pleura",
    "hilum",
];
const ATTRIBUTES: &[&str] = &[
    "severity", "shape", "density", "margin", "extent", "pattern",
];
const DEGREES: &[&str] = &[
    "mild",
    "moderate",
    "severe",
    "round",
    "irregular",
    "patchy",
    "focal",
    "diffuse",
    "small",
    "large",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level3Rule {
    /// Same sign rule as levels 1–2, one direction per candidate.
    Linear,
    /// Selects candidates whose projection magnitude exceeds its median.
    Magnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level3Kinds {
    Single,
    Multi,
    /// Alternates single and multi in document order.
    Alternate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub reports: usize,
    pub roots: usize,
    pub children_per_root: usize,
    pub leaves_per_child: usize,
    pub level3_candidates: usize,
    pub level3_kinds: Level3Kinds,
    pub level3_rule: Level3Rule,
    /// Every `repeat_every`-th level-2 node is repeatable; 0 disables repeats.
    pub repeat_every: usize,
    pub max_occurrences: u32,
    pub featurizer: FeaturizerConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            reports: 300,
            roots: 3,
            children_per_root: 2,
            leaves_per_child: 1,
            level3_candidates: 3,
            level3_kinds: Level3Kinds::Alternate,
            level3_rule: Level3Rule::Linear,
            repeat_every: 3,
            max_occurrences: 2,
            featurizer: FeaturizerConfig::default(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        if self.reports == 0 || self.roots == 0 || self.level3_candidates == 0 {
            return Err(Error::Config("synthetic sizes must be >= 1".into()));
        }
        if self.repeat_every > 0 && self.max_occurrences < 2 {
            return Err(Error::Config(
                "repeatable nodes need max_occurrences >= 2".into(),
            ));
        }
        Ok(())
    }
}

fn word(list: &[&str], i: usize) -> String {
    if i < list.len() {
        list[i].to_string()
    } else {
        format!("{}{}", list[i % list.len()], i / list.len())
    }
}

/// Builds the template: ids `n1`, `n1.2`, `n1.2.1`.
pub fn synthetic_template(cfg: &SyntheticConfig) -> Result<QuestionTree> {
    let mut level2_count = 0usize;
    let mut level3_count = 0usize;
    let mut roots = Vec::with_capacity(cfg.roots);
    for r in 0..cfg.roots {
        let topic = word(TOPICS, r);
        let mut children = Vec::with_capacity(cfg.children_per_root);
        for c in 0..cfg.children_per_root {
            let organ = word(ORGANS, c);
            let mut leaves = Vec::with_capacity(cfg.leaves_per_child);
            for l in 0..cfg.leaves_per_child {
                let attribute = word(ATTRIBUTES, l);
                let kind = match cfg.level3_kinds {
                    Level3Kinds::Single => ChoiceKind::Single,
                    Level3Kinds::Multi => ChoiceKind::Multi,
                    Level3Kinds::Alternate if level3_count % 2 == 0 => ChoiceKind::Single,
                    Level3Kinds::Alternate => ChoiceKind::Multi,
                };
                level3_count += 1;
                let mut candidates: Vec<String> = (0..cfg.level3_candidates)
                    .map(|k| {
                        word(
                            DEGREES,
                            (l * cfg.level3_candidates + k) % (DEGREES.len() * 4),
                        )
                    })
                    .collect();
                candidates.dedup();
                candidates.push(NO_SELECTION.to_string());
                leaves.push(NodeDoc {
                    id: format!("n{}.{}.{}", r + 1, c + 1, l + 1),
                    level: 3,
                    text: format!("what is the {attribute} of the {topic} in the {organ}"),
                    kind,
                    candidates,
                    children: vec![],
                    max_occurrences: 1,
                    follow_up_text: String::new(),
                });
            }
            level2_count += 1;
            let repeatable = cfg.repeat_every > 0 && level2_count % cfg.repeat_every == 0;
            children.push(NodeDoc {
                id: format!("n{}.{}", r + 1, c + 1),
                level: 2,
                text: format!("{topic} {organ}"),
                kind: ChoiceKind::Single,
                candidates: vec![YES.into(), NO.into()],
                children: leaves,
                max_occurrences: if repeatable { cfg.max_occurrences } else { 1 },
                follow_up_text: if repeatable {
                    format!("are there any other {topic} findings in the {organ}")
                } else {
                    String::new()
                },
            });
        }
        roots.push(NodeDoc {
            id: format!("n{}", r + 1),
            level: 1,
            text: format!("{topic}"),
            kind: ChoiceKind::Single,
            candidates: vec![YES.into(), NO.into()],
            children,
            max_occurrences: 1,
            follow_up_text: String::new(),
        });
    }
    load_template(&TreeDoc { roots })
}

/// Unit direction keyed by generator seed, label and instance, orthogonal to the
/// all-ones vector.
pub fn rule_direction(seed: u64, label: &str, instance: u32, d: usize) -> Vec<f64> {
    let mut v = gaussian_row(
        &[
            b"rule",
            &seed.to_le_bytes(),
            label.as_bytes(),
            &instance.to_le_bytes(),
        ],
        d,
        1.0,
    );
    let mean = v.iter().sum::<f64>() / d as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Column mean of the image tokens.
pub fn mean_image_token(image_id: &str, cfg: &FeaturizerConfig) -> Result<Vec<f64>> {
    let img = encode_image(image_id, cfg)?;
    Ok(img.values().mean_rows().into_data())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The planted answer of every question instance of one image.
#[derive(Clone, Debug)]
pub struct PlantedRule<'a> {
    pub tree: &'a QuestionTree,
    pub seed: u64,
    pub rule: Level3Rule,
    pub featurizer: FeaturizerConfig,
}

impl PlantedRule<'_> {
    /// Level-3 answers depend on the node only; yes/no answers on node and instance.
    pub fn answer(&self, mean: &[f64], node: usize, instance: u32) -> Vec<usize> {
        let n = self.tree.node(node);
        let d = mean.len();
        if n.level.is_binary() {
            let u = rule_direction(self.seed, &n.id, instance, d);
            return if dot(mean, &u) > 0.0 {
                vec![Vocabulary::YES]
            } else {
                vec![Vocabulary::NO]
            };
        }
        let no_selection = self
            .tree
            .vocabulary()
            .no_selection()
            .expect("level-3 nodes guarantee a no-selection class");
        let sigma = 1.0 / ((d * self.featurizer.image_tokens) as f64).sqrt();
        let scored: Vec<(usize, f64)> = n
            .candidates
            .iter()
            .zip(&n.candidate_ids)
            .filter(|(name, _)| name.as_str() != NO_SELECTION)
            .map(|(name, &id)| {
                let u = rule_direction(self.seed, &format!("{}/{}", n.id, name), 0, d);
                let s = dot(mean, &u);
                let score = match self.rule {
                    Level3Rule::Linear => s,
                    // |s| exceeds its median 0.6745σ half the time
                    Level3Rule::Magnitude => s.abs() - 0.6745 * sigma,
                };
                (id, score)
            })
            .collect();
        let mut answer: Vec<usize> = match n.kind {
            ChoiceKind::Single => scored
                .iter()
                .filter(|(_, s)| *s > 0.0)
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|&(id, _)| vec![id])
                .unwrap_or_default(),
            ChoiceKind::Multi => scored
                .iter()
                .filter(|(_, s)| *s > 0.0)
                .map(|&(id, _)| id)
                .collect(),
        };
        if answer.is_empty() {
            answer.push(no_selection);
        }
        answer.sort_unstable();
        answer
    }
}

/// Generates a template and `cfg.reports` consistent gold reports.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<(QuestionTree, Vec<GoldReport>)> {
    cfg.validate()?;
    let tree = synthetic_template(cfg)?;
    let rule = PlantedRule {
        tree: &tree,
        seed,
        rule: cfg.level3_rule,
        featurizer: cfg.featurizer,
    };
    let mut reports = Vec::with_capacity(cfg.reports);
    for i in 0..cfg.reports {
        let image_id = format!("syn{seed}-{i:05}");
        let mean = mean_image_token(&image_id, &cfg.featurizer)?;
        let records = walk(&tree, |v| Ok(rule.answer(&mean, v.node, v.instance)))?;
        let answers = records
            .into_iter()
            .filter(|r| !r.forced)
            .map(|r| AnswerEntry {
                node_id: tree.node(r.node).id.clone(),
                instance: r.instance,
                answer: tree.answer_names(&r.answer),
            })
            .collect();
        reports.push(GoldReport { image_id, answers });
    }
    Ok((tree, reports))
}

pub fn generate_dataset(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    let (tree, reports) = generate_synthetic(cfg, seed)?;
    Dataset::new(tree, reports, &cfg.featurizer)
}

/// Mean image tokens of several images stacked as rows.
pub fn mean_token_matrix(image_ids: &[&str], cfg: &FeaturizerConfig) -> Result<Tensor2> {
    let mut data = Vec::with_capacity(image_ids.len() * cfg.d_model);
    for id in image_ids {
        data.extend(mean_image_token(id, cfg)?);
    }
    Tensor2::from_vec(image_ids.len(), cfg.d_model, data)
}
