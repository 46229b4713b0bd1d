//! Filled-in report trees and the dataset file format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tree::{load_template, AnswerSet, QuestionTree, TreeDoc};
use crate::error::{Error, Result};
use crate::featurizers::{stable_hash, FeaturizerConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerEntry {
    pub node_id: String,
    #[serde(default)]
    pub instance: u32,
    pub answer: Vec<String>,
}

/// Gold answers for one image. Questions not listed take their negative answer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldReport {
    pub image_id: String,
    pub answers: Vec<AnswerEntry>,
}

/// Validated answers keyed by `(node index, instance)`.
pub type AnswerMap = BTreeMap<(usize, u32), AnswerSet>;

/// Parses entries and checks them against the tree:
/// known nodes, legal candidates, instances within the occurrence bound, every
/// positive answer under a parent instance answered `yes`, and follow-up instance
/// `k` only after instance `k - 1` answered positively.
pub fn validate_answers(
    tree: &QuestionTree,
    image_id: &str,
    entries: &[AnswerEntry],
) -> Result<AnswerMap> {
    let inconsistent = |message: String| Error::Inconsistent {
        image_id: image_id.to_string(),
        message,
    };
    let mut map = AnswerMap::new();
    for e in entries {
        let node = tree
            .index_of(&e.node_id)
            .ok_or_else(|| inconsistent(format!("unknown node {:?}", e.node_id)))?;
        if e.instance >= tree.instance_bound(node) {
            return Err(inconsistent(format!(
                "{}#{} exceeds the occurrence bound {}",
                e.node_id,
                e.instance,
                tree.instance_bound(node)
            )));
        }
        let answer = tree.parse_answer(node, &e.answer)?;
        if map.insert((node, e.instance), answer).is_some() {
            return Err(inconsistent(format!(
                "duplicate answer for {}#{}",
                e.node_id, e.instance
            )));
        }
    }
    check_consistency(tree, &map).map_err(inconsistent)?;
    Ok(map)
}

/// Ancestor-`yes` and follow-up ordering rules over an answer map.
pub fn check_consistency(tree: &QuestionTree, map: &AnswerMap) -> std::result::Result<(), String> {
    for (&(node, instance), answer) in map {
        let n = tree.node(node);
        if n.is_repeatable() && instance > 0 {
            let prev = map
                .get(&(node, instance - 1))
                .is_some_and(|a| tree.is_positive(node, a));
            if !prev {
                return Err(format!(
                    "{}#{} asked without a positive instance {}",
                    n.id,
                    instance,
                    instance - 1
                ));
            }
        }
        if !tree.is_positive(node, answer) {
            continue;
        }
        if let Some(key) = tree.parent_key(node, instance) {
            let parent_yes = map.get(&key).is_some_and(|a| QuestionTree::is_yes(a));
            if !parent_yes {
                return Err(format!(
                    "{}#{} is positive but its parent {}#{} is not \"yes\"",
                    n.id,
                    instance,
                    tree.node(key.0).id,
                    key.1
                ));
            }
        }
    }
    Ok(())
}

/// Answer for a key, falling back to the negative answer.
pub fn answer_or_negative(tree: &QuestionTree, map: &AnswerMap, key: (usize, u32)) -> AnswerSet {
    map.get(&key)
        .cloned()
        .unwrap_or_else(|| tree.negative_answer(key.0))
}

/// Dataset file: the template with its gold reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDoc {
    pub d_model: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_seed: Option<u64>,
    pub tree: TreeDoc,
    pub reports: Vec<GoldReport>,
}

/// A loaded, validated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub tree: QuestionTree,
    pub reports: Vec<GoldReport>,
    pub answers: Vec<AnswerMap>,
    pub d_model: usize,
    pub image_tokens: Option<usize>,
    pub feature_seed: Option<u64>,
}

impl Dataset {
    pub fn from_doc(doc: DatasetDoc) -> Result<Self> {
        let tree = load_template(&doc.tree)?;
        let mut answers = Vec::with_capacity(doc.reports.len());
        let mut ids = std::collections::BTreeSet::new();
        for (i, r) in doc.reports.iter().enumerate() {
            if r.image_id.is_empty() {
                return Err(Error::schema(format!("reports[{i}].image_id"), "empty"));
            }
            if !ids.insert(r.image_id.as_str()) {
                return Err(Error::schema(
                    format!("reports[{i}].image_id"),
                    format!("duplicate image id {:?}", r.image_id),
                ));
            }
            answers.push(validate_answers(&tree, &r.image_id, &r.answers)?);
        }
        Ok(Self {
            tree,
            reports: doc.reports,
            answers,
            d_model: doc.d_model,
            image_tokens: doc.image_tokens,
            feature_seed: doc.feature_seed,
        })
    }

    pub fn new(
        tree: QuestionTree,
        reports: Vec<GoldReport>,
        featurizer: &FeaturizerConfig,
    ) -> Result<Self> {
        Self::from_doc(DatasetDoc {
            d_model: featurizer.d_model,
            image_tokens: Some(featurizer.image_tokens),
            feature_seed: Some(featurizer.seed),
            tree: tree.to_doc(),
            reports,
        })
    }

    pub fn to_doc(&self) -> DatasetDoc {
        DatasetDoc {
            d_model: self.d_model,
            image_tokens: self.image_tokens,
            feature_seed: self.feature_seed,
            tree: self.tree.to_doc(),
            reports: self.reports.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_doc(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_doc())?)?;
        Ok(())
    }

    /// Featurizer settings recorded in the file, with `fallback` filling gaps.
    pub fn featurizer(&self, fallback: &FeaturizerConfig) -> FeaturizerConfig {
        FeaturizerConfig {
            d_model: self.d_model,
            image_tokens: self.image_tokens.unwrap_or(fallback.image_tokens),
            seed: self.feature_seed.unwrap_or(fallback.seed),
        }
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    /// Report indices belonging to `split`.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.reports.len())
            .filter(|&i| split.contains(Split::of(&self.reports[i].image_id)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl Split {
    /// 80/10/10 assignment by a stable hash of the report id.
    pub fn of(image_id: &str) -> Split {
        match stable_hash(&[b"split", image_id.as_bytes()]) % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }

    fn contains(self, other: Split) -> bool {
        self == Split::All || self == other
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}
