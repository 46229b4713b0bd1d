//! Weighted masked binary cross-entropy on logits and class-weight estimation.

use crate::error::{Error, Result};
use crate::hierarchy::{QuestionTree, Sample};
use crate::numerics::{Graph, Tensor2, Var};

/// Upper clamp for class weights.
pub const DEFAULT_MAX_WEIGHT: f64 = 100.0;

/// Multi-label decision threshold on `σ(z)`.
pub const SIGMOID_THRESHOLD: f64 = 0.5;

/// Validity mask over the answer vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerMask(Vec<bool>);

impl AnswerMask {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        Ok(Self(bits))
    }

    /// The node's own candidates: `{yes, no}` at levels 1–2, the attribute
    /// candidates at level 3.
    pub fn for_node(tree: &QuestionTree, node: usize) -> Self {
        let mut bits = vec![false; tree.vocabulary().len()];
        for &c in &tree.node(node).candidate_ids {
            bits[c] = true;
        }
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn valid_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// Positive-class weights `ω`, all strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Config("class weights must be finite and > 0".into()));
        }
        Ok(Self(values))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub raw: Vec<f64>,
    pub masked: Vec<f64>,
    pub valid_count: usize,
    pub loss: f64,
    pub gold: Vec<f64>,
    /// `∂L/∂z`, exactly zero on masked entries.
    pub grad: Vec<f64>,
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `L_raw = ω·gt·softplus(−z) + (1−gt)·softplus(z)`, masked and averaged over the
/// valid entries.
pub fn weighted_masked_bce(
    z: &[f64],
    gt: &[f64],
    weights: &ClassWeights,
    mask: &AnswerMask,
) -> Result<LossBreakdown> {
    for len in [gt.len(), weights.len(), mask.len()] {
        if len != z.len() {
            return Err(Error::Shape {
                op: "weighted_masked_bce",
                left: (1, z.len()),
                right: (1, len),
            });
        }
    }
    let valid_count = mask.valid_count();
    if valid_count == 0 {
        return Err(Error::EmptyMask);
    }
    let c = valid_count as f64;
    let w = weights.values();
    let mut raw = Vec::with_capacity(z.len());
    let mut masked = Vec::with_capacity(z.len());
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let l = w[i] * gt[i] * softplus(-z[i]) + (1.0 - gt[i]) * softplus(z[i]);
        raw.push(l);
        if mask.is_valid(i) {
            masked.push(l);
            let s = sigmoid(z[i]);
            grad.push((w[i] * gt[i] * (s - 1.0) + (1.0 - gt[i]) * s) / c);
        } else {
            masked.push(0.0);
            grad.push(0.0);
        }
    }
    let loss = masked.iter().sum::<f64>() / c;
    if !loss.is_finite() {
        return Err(Error::NonFinite("weighted_masked_bce".into()));
    }
    Ok(LossBreakdown {
        raw,
        masked,
        valid_count,
        loss,
        gold: gt.to_vec(),
        grad,
    })
}

/// Records the loss on the tape as a scalar root over a `1 × V` logits node.
pub fn bce_on(
    g: &mut Graph,
    logits: Var,
    gt: &[f64],
    weights: &ClassWeights,
    mask: &AnswerMask,
) -> Result<(Var, LossBreakdown)> {
    let breakdown = weighted_masked_bce(g.value(logits).data(), gt, weights, mask)?;
    let root = g.scalar_loss(logits, breakdown.loss, Tensor2::row_vector(&breakdown.grad))?;
    Ok((root, breakdown))
}

/// `ω[c] = clamp(N_neg(c) / max(N_pos(c), 1), 1, w_max)` counted over the samples where
/// `c` is a valid candidate. Classes never seen positive take `w_max`.
pub fn class_weights(samples: &[Sample], classes: usize, w_max: f64) -> Result<ClassWeights> {
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    if w_max < 1.0 {
        return Err(Error::Config("w_max must be >= 1".into()));
    }
    let mut pos = vec![0usize; classes];
    let mut neg = vec![0usize; classes];
    for s in samples {
        if s.gold.len() != classes {
            return Err(Error::Shape {
                op: "class_weights",
                left: (1, classes),
                right: (1, s.gold.len()),
            });
        }
        for c in s.mask.valid_indices() {
            if s.gold[c] > 0.5 {
                pos[c] += 1;
            } else {
                neg[c] += 1;
            }
        }
    }
    let values = (0..classes)
        .map(|c| {
            if pos[c] == 0 {
                w_max
            } else {
                (neg[c] as f64 / pos[c] as f64).clamp(1.0, w_max)
            }
        })
        .collect();
    ClassWeights::new(values)
}
