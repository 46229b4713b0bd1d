//! Multi-head attention, feed-forward and post-norm block built on the tape.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projection matrices for one multi-head attention layer. No biases.
///
/// `w_q`, `w_k`, `w_v` are `d_model × (heads·d_k)`; `w_o` is `(heads·d_k) × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible into {heads} heads"
            )));
        }
        let d_k = d_model / heads;
        let inner = heads * d_k;
        Ok(Self {
            w_q: store.insert_xavier(format!("{prefix}.w_q"), d_model, inner, rng),
            w_k: store.insert_xavier(format!("{prefix}.w_k"), d_model, inner, rng),
            w_v: store.insert_xavier(format!("{prefix}.w_v"), d_model, inner, rng),
            w_o: store.insert_xavier(format!("{prefix}.w_o"), inner, d_model, rng),
            heads,
            d_k,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w_q, self.w_k, self.w_v, self.w_o]
    }
}

/// Per-head attention weights and the concatenated pre-projection context.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub scores: Vec<Tensor2>,
    pub context: Tensor2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden: usize,
}

impl FfnParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w1: store.insert_xavier(format!("{prefix}.w1"), d_model, hidden, rng),
            b1: store.insert(format!("{prefix}.b1"), Tensor2::zeros(1, hidden)),
            w2: store.insert_xavier(format!("{prefix}.w2"), hidden, d_model, rng),
            b2: store.insert(format!("{prefix}.b2"), Tensor2::zeros(1, d_model)),
            hidden,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, prefix: &str, d_model: usize) -> Self {
        Self {
            gain: store.insert(format!("{prefix}.gain"), Tensor2::filled(1, d_model, 1.0)),
            bias: store.insert(format!("{prefix}.bias"), Tensor2::zeros(1, d_model)),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Post-norm block: `h = LN(x + MHA(x, kv))`, `out = LN(h + FFN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FfnParams,
    pub norm2: LayerNormParams,
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::init(
                store,
                &format!("{prefix}.attn"),
                d_model,
                heads,
                rng,
            )?,
            norm1: LayerNormParams::init(store, &format!("{prefix}.norm1"), d_model),
            ffn: FfnParams::init(store, &format!("{prefix}.ffn"), d_model, ffn_hidden, rng),
            norm2: LayerNormParams::init(store, &format!("{prefix}.norm2"), d_model),
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.attention.ids().to_vec();
        ids.extend(self.norm1.ids());
        ids.extend(self.ffn.ids());
        ids.extend(self.norm2.ids());
        ids
    }
}

/// Tape nodes produced by [`attention_on`].
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    pub output: Var,
    pub context: Var,
    pub scores: Vec<Var>,
}

/// Records multi-head attention on the tape.
pub fn attention_on(
    g: &mut Graph,
    store: &ParamStore,
    query_in: Var,
    kv_in: Var,
    p: &AttentionParams,
) -> Result<AttentionNodes> {
    let (qc, kc) = (g.value(query_in).cols(), g.value(kv_in).cols());
    if qc != kc {
        return Err(Error::Shape {
            op: "attention",
            left: g.value(query_in).shape(),
            right: g.value(kv_in).shape(),
        });
    }
    let (wq, wk, wv, wo) = (
        g.param(store, p.w_q),
        g.param(store, p.w_k),
        g.param(store, p.w_v),
        g.param(store, p.w_o),
    );
    let q = g.matmul(query_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let scale = 1.0 / (p.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut scores = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let start = h * p.d_k;
        let qh = g.slice_cols(q, start, p.d_k);
        let kh = g.slice_cols(k, start, p.d_k);
        let vh = g.slice_cols(v, start, p.d_k);
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let weights = g.softmax_rows(logits);
        scores.push(weights);
        heads.push(g.matmul(weights, vh)?);
    }
    let context = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok(AttentionNodes {
        output: g.matmul(context, wo)?,
        context,
        scores,
    })
}

/// Stand-alone multi-head attention: `softmax(Q Kᵀ/√d_k) V` per head, concatenated and
/// projected by `w_o`.
pub fn multi_head_attention(
    query_in: &Tensor2,
    kv_in: &Tensor2,
    p: &AttentionParams,
    store: &ParamStore,
) -> Result<(Tensor2, AttentionTrace)> {
    let mut g = Graph::new();
    let q = g.input(query_in.clone());
    let kv = g.input(kv_in.clone());
    let nodes = attention_on(&mut g, store, q, kv, p)?;
    let trace = AttentionTrace {
        scores: nodes.scores.iter().map(|&s| g.value(s).clone()).collect(),
        context: g.value(nodes.context).clone(),
    };
    Ok((g.value(nodes.output).clone(), trace))
}

pub fn ffn_on(g: &mut Graph, store: &ParamStore, x: Var, p: &FfnParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        g.param(store, p.w1),
        g.param(store, p.b1),
        g.param(store, p.w2),
        g.param(store, p.b2),
    );
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let o = g.matmul(h, w2)?;
    g.add_row(o, b2)
}

/// `GELU(x W1 + b1) W2 + b2`.
pub fn ffn(x: &Tensor2, p: &FfnParams, store: &ParamStore) -> Result<Tensor2> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = ffn_on(&mut g, store, xv, p)?;
    Ok(g.value(out).clone())
}

pub fn layer_norm_on(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &LayerNormParams,
) -> Result<Var> {
    let gain = g.param(store, p.gain);
    let bias = g.param(store, p.bias);
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

/// Post-norm attention block. Returns the block output and the attention score nodes.
pub fn block_on(
    g: &mut Graph,
    store: &ParamStore,
    query_in: Var,
    kv_in: Var,
    p: &BlockParams,
) -> Result<(Var, Vec<Var>)> {
    let attn = attention_on(g, store, query_in, kv_in, &p.attention)?;
    let h = g.add(query_in, attn.output)?;
    let h = layer_norm_on(g, store, h, &p.norm1)?;
    let f = ffn_on(g, store, h, &p.ffn)?;
    let o = g.add(h, f)?;
    Ok((layer_norm_on(g, store, o, &p.norm2)?, attn.scores))
}
