//! Training-time augmentation: sibling reordering and random question dropping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::samples::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_drop: f64,
    pub reorder: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_drop: 0.1,
            reorder: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!(
                "p_drop {} outside [0, 1]",
                self.p_drop
            )));
        }
        Ok(())
    }
}

/// Permutes sibling order within each report, drops samples independently with
/// probability `p_drop`, then rebuilds each sample's sibling history from the
/// surviving order. Gold answers and ancestor chains are untouched.
pub fn augment(samples: &[Sample], cfg: &AugmentConfig, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_report: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_report.entry(s.report).or_default().push(i);
    }
    let mut order = Vec::with_capacity(samples.len());
    for indices in by_report.values() {
        if cfg.reorder {
            order.extend(reorder_group(samples, indices, None, &mut rng));
        } else {
            order.extend(indices.iter().copied());
        }
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|_| cfg.p_drop <= 0.0 || rng.random::<f64>() >= cfg.p_drop)
        .collect();

    let mut asked: BTreeMap<(usize, Option<(usize, u32)>), Vec<(String, String)>> = BTreeMap::new();
    kept.into_iter()
        .map(|i| {
            let mut s = samples[i].clone();
            let group = asked.entry((s.report, s.parent)).or_default();
            s.siblings = group.clone();
            group.push((s.question.clone(), s.answer_text.clone()));
            s
        })
        .collect()
}

/// Shuffles the node blocks of one sibling group. A block holds every instance of a
/// node together with the subtree asked under each instance.
fn reorder_group(
    samples: &[Sample],
    indices: &[usize],
    parent: Option<(usize, u32)>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut blocks: Vec<Vec<Vec<usize>>> = Vec::new();
    let mut current: Option<usize> = None;
    for &i in indices {
        let s = &samples[i];
        if s.parent == parent {
            if current != Some(s.node) || blocks.is_empty() {
                blocks.push(Vec::new());
                current = Some(s.node);
            }
            blocks.last_mut().expect("block pushed").push(vec![i]);
        } else {
            if blocks.is_empty() {
                blocks.push(vec![Vec::new()]);
            }
            let block = blocks.last_mut().expect("block exists");
            if block.is_empty() {
                block.push(Vec::new());
            }
            block.last_mut().expect("segment exists").push(i);
        }
    }
    let mut reordered: Vec<Vec<usize>> = blocks
        .into_iter()
        .map(|block| {
            let mut out = Vec::new();
            for segment in block {
                let Some((&head, rest)) = segment.split_first() else {
                    continue;
                };
                if samples[head].parent != parent {
                    out.extend(segment);
                    continue;
                }
                out.push(head);
                let key = Some((samples[head].node, samples[head].instance));
                out.extend(reorder_group(samples, rest, key, rng));
            }
            out
        })
        .collect();
    reordered.shuffle(rng);
    reordered.into_iter().flatten().collect()
}
