//! Per-level answer decoders: a fusion block over image-prompt and question features,
//! mean pooling, and an affine classifier onto the global answer vocabulary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignedFeatures;
use crate::error::{Error, Result};
use crate::featurizers::TokenMatrix;
use crate::hierarchy::{AnswerSet, ChoiceKind};
use crate::numerics::{block_on, BlockParams, Graph, ParamId, ParamStore, Tensor2, Var};
use crate::objective::{sigmoid, AnswerMask, SIGMOID_THRESHOLD};

/// How the decoder combines image-prompt features with the question.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Image-prompt rows query the question tokens.
    #[default]
    Cross,
    /// Question tokens query the image-prompt rows.
    TextAsQuery,
    /// Self-attention over the concatenated rows.
    SelfAttention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub blocks: Vec<BlockParams>,
    /// `d_model × |vocabulary|`.
    pub classifier: ParamId,
    pub bias: ParamId,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        depth: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("fusion depth must be >= 1".into()));
        }
        let blocks = (0..depth)
            .map(|i| {
                BlockParams::init(
                    store,
                    &format!("{prefix}.block{i}"),
                    d_model,
                    heads,
                    ffn_hidden,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            classifier: store.insert_xavier(format!("{prefix}.classifier"), d_model, classes, rng),
            bias: store.insert(
                format!("{prefix}.classifier_bias"),
                Tensor2::zeros(1, classes),
            ),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.ids()).collect();
        ids.push(self.classifier);
        ids.push(self.bias);
        ids
    }
}

/// Logits over the global answer vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Vec<f64>);

/// Records the decoder on the tape; returns the `1 × V` logits node.
pub fn fuse_on(
    g: &mut Graph,
    store: &ParamStore,
    f_p: Var,
    v_q: Var,
    d: &DecoderParams,
    mode: FusionMode,
) -> Result<Var> {
    let mut x = match mode {
        FusionMode::Cross => f_p,
        FusionMode::TextAsQuery => v_q,
        FusionMode::SelfAttention => g.concat_rows(f_p, v_q)?,
    };
    for block in &d.blocks {
        let kv = match mode {
            FusionMode::Cross => v_q,
            FusionMode::TextAsQuery => f_p,
            FusionMode::SelfAttention => x,
        };
        x = block_on(g, store, x, kv, block)?.0;
    }
    let pooled = g.mean_rows(x);
    let w = g.param(store, d.classifier);
    let b = g.param(store, d.bias);
    let z = g.matmul(pooled, w)?;
    g.add_row(z, b)
}

/// Cross-attention fusion of `f_p` (queries) with `v_q` (keys and values).
pub fn fuse_and_classify(
    f_p: &AlignedFeatures,
    v_q: &TokenMatrix,
    d: &DecoderParams,
    store: &ParamStore,
) -> Result<Logits> {
    fuse_and_classify_with(f_p, v_q, d, store, FusionMode::Cross)
}

pub fn fuse_and_classify_with(
    f_p: &AlignedFeatures,
    v_q: &TokenMatrix,
    d: &DecoderParams,
    store: &ParamStore,
    mode: FusionMode,
) -> Result<Logits> {
    if f_p.values().d_model() != v_q.d_model() {
        return Err(Error::Shape {
            op: "fuse_and_classify",
            left: f_p.values().values().shape(),
            right: v_q.values().shape(),
        });
    }
    let mut g = Graph::new();
    let fp = g.input(f_p.values().values().clone());
    let vq = g.input(v_q.values().clone());
    let z = fuse_on(&mut g, store, fp, vq, d, mode)?;
    Ok(Logits(g.value(z).data().to_vec()))
}

/// Masked decision rule.
///
/// Single-choice: argmax over valid entries, ties to the lowest vocabulary index.
/// Multi-choice: valid entries with `σ(z) > 0.5`; `no_selection` is exclusive and
/// stands in for an empty selection.
pub fn predict_answer(
    z: &[f64],
    mask: &AnswerMask,
    kind: ChoiceKind,
    no_selection: Option<usize>,
) -> Result<AnswerSet> {
    if z.len() != mask.len() {
        return Err(Error::Shape {
            op: "predict_answer",
            left: (1, z.len()),
            right: (1, mask.len()),
        });
    }
    if mask.valid_count() == 0 {
        return Err(Error::EmptyMask);
    }
    match kind {
        ChoiceKind::Single => {
            let mut best: Option<usize> = None;
            for i in mask.valid_indices() {
                if best.is_none_or(|b| z[i] > z[b]) {
                    best = Some(i);
                }
            }
            Ok(vec![best.expect("mask has a valid entry")])
        }
        ChoiceKind::Multi => {
            let ns = no_selection.filter(|&n| n < mask.len() && mask.is_valid(n));
            let chosen: Vec<usize> = mask
                .valid_indices()
                .filter(|&i| Some(i) != ns && sigmoid(z[i]) > SIGMOID_THRESHOLD)
                .collect();
            if !chosen.is_empty() {
                return Ok(chosen);
            }
            match ns {
                Some(n) => Ok(vec![n]),
                None => predict_answer(z, mask, ChoiceKind::Single, None),
            }
        }
    }
}
