//! Frozen pseudo-encoders standing in for the pretrained image and text encoders.
//!
//! Every row is a unit Gaussian scaled by `1/√d_model`, drawn from a generator keyed by
//! SHA-256 of the seed and the row's identity. Nothing here is trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

/// Separator between history questions and answers.
pub const SEPARATOR: &str = "<sep>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizerConfig {
    pub d_model: usize,
    pub image_tokens: usize,
    pub seed: u64,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            image_tokens: 16,
            seed: 0,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 {
            return Err(Error::Config("featurizer d_model must be >= 2".into()));
        }
        if self.image_tokens < 1 {
            return Err(Error::Config("featurizer image_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// A `tokens × d_model` feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(Tensor2);

impl TokenMatrix {
    pub fn new(values: Tensor2) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::Empty("token matrix"));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("token matrix".into()));
        }
        Ok(Self(values))
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn d_model(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Tensor2 {
        &self.0
    }

    pub fn into_values(self) -> Tensor2 {
        self.0
    }
}

/// Deterministic generator keyed by a sequence of byte strings.
pub(crate) fn keyed_rng(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Stable 64-bit hash of a string, used for splits.
pub(crate) fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Unit Gaussian row of width `d`, scaled by `scale`.
pub(crate) fn gaussian_row(parts: &[&[u8]], d: usize, scale: f64) -> Vec<f64> {
    let mut rng = keyed_rng(parts);
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// `image_tokens × d_model` features for an image identifier.
pub fn encode_image(image_id: &str, cfg: &FeaturizerConfig) -> Result<TokenMatrix> {
    if image_id.is_empty() {
        return Err(Error::Empty("image id"));
    }
    let d = cfg.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let seed = cfg.seed.to_le_bytes();
    let mut data = Vec::with_capacity(cfg.image_tokens * d);
    for t in 0..cfg.image_tokens as u64 {
        data.extend(gaussian_row(
            &[b"image", &seed, image_id.as_bytes(), &t.to_le_bytes()],
            d,
            scale,
        ));
    }
    TokenMatrix::new(Tensor2::from_vec(cfg.image_tokens, d, data)?)
}

/// Lower-cases and strips surrounding punctuation. The separator token is kept as is.
pub fn normalize_word(word: &str) -> String {
    if word == SEPARATOR {
        return word.to_string();
    }
    word.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

fn word_row(word: &str, cfg: &FeaturizerConfig) -> Vec<f64> {
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    gaussian_row(
        &[b"word", &cfg.seed.to_le_bytes(), word.as_bytes()],
        cfg.d_model,
        scale,
    )
}

/// One row per normalised whitespace token; equal words give equal rows.
pub fn encode_text(text: &str, cfg: &FeaturizerConfig) -> Result<TokenMatrix> {
    let words = tokenize(text);
    if words.is_empty() {
        return Err(Error::Empty("text"));
    }
    let mut data = Vec::with_capacity(words.len() * cfg.d_model);
    for w in &words {
        data.extend(word_row(w, cfg));
    }
    TokenMatrix::new(Tensor2::from_vec(words.len(), cfg.d_model, data)?)
}

/// Serialises `(question, answer)` pairs as `q <sep> a <sep> q <sep> a`.
pub fn serialize_history(history: &[(String, String)]) -> String {
    history
        .iter()
        .map(|(q, a)| format!("{q} {SEPARATOR} {a}"))
        .collect::<Vec<_>>()
        .join(&format!(" {SEPARATOR} "))
}

/// Question features with the history prepended.
///
/// History rows are the text encoding of the serialised history shifted by a fixed
/// segment row.
pub fn encode_question(
    question: &str,
    history: &[(String, String)],
    cfg: &FeaturizerConfig,
) -> Result<TokenMatrix> {
    let q = encode_text(question, cfg)?;
    if history.is_empty() {
        return Ok(q);
    }
    let mut h = encode_text(&serialize_history(history), cfg)?.into_values();
    let scale = 1.0 / (cfg.d_model as f64).sqrt();
    let segment = gaussian_row(
        &[b"segment", &cfg.seed.to_le_bytes(), b"history"],
        cfg.d_model,
        scale,
    );
    for r in 0..h.rows() {
        for (v, s) in h.row_mut(r).iter_mut().zip(&segment) {
            *v += s;
        }
    }
    TokenMatrix::new(Tensor2::concat_rows(&h, q.values())?)
}
