//! Two stacked cross-attention layers aligning image features with the level prompt.
//!
//! Layer 1 queries the prompt with the image tokens; layer 2 queries the same prompt
//! features with the layer-1 output. Each layer is a post-norm block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::featurizers::TokenMatrix;
use crate::numerics::{block_on, BlockParams, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParams {
    pub layer1: BlockParams,
    pub layer2: BlockParams,
}

impl AlignmentParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            layer1: BlockParams::init(
                store,
                &format!("{prefix}.layer1"),
                d_model,
                heads,
                ffn_hidden,
                rng,
            )?,
            layer2: BlockParams::init(
                store,
                &format!("{prefix}.layer2"),
                d_model,
                heads,
                ffn_hidden,
                rng,
            )?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.layer1.ids();
        ids.extend(self.layer2.ids());
        ids
    }
}

/// Image-prompt features; same row count as the image tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedFeatures(pub TokenMatrix);

impl AlignedFeatures {
    pub fn values(&self) -> &TokenMatrix {
        &self.0
    }
}

/// Records both alignment layers on the tape.
pub fn align_on(
    g: &mut Graph,
    store: &ParamStore,
    v_i: Var,
    v_p: Var,
    p: &AlignmentParams,
) -> Result<Var> {
    let (first, _) = block_on(g, store, v_i, v_p, &p.layer1)?;
    let (second, _) = block_on(g, store, first, v_p, &p.layer2)?;
    Ok(second)
}

pub fn align(
    v_i: &TokenMatrix,
    v_p: &TokenMatrix,
    p: &AlignmentParams,
    store: &ParamStore,
) -> Result<AlignedFeatures> {
    if v_i.d_model() != v_p.d_model() {
        return Err(Error::Shape {
            op: "align",
            left: v_i.values().shape(),
            right: v_p.values().shape(),
        });
    }
    let mut g = Graph::new();
    let vi = g.input(v_i.values().clone());
    let vp = g.input(v_p.values().clone());
    let out = align_on(&mut g, store, vi, vp, p)?;
    Ok(AlignedFeatures(TokenMatrix::new(g.value(out).clone())?))
}
