//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HICA"            magic
//! u32                format version
//! u32 × 6            d_model, heads, ffn_hidden, vocabulary size, decoders, image tokens
//! u32, bytes         metadata length and UTF-8 JSON
//! u32                array count
//! per array:         u32 name length, name bytes, u32 rows, u32 cols, rows·cols f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::featurizers::FeaturizerConfig;
use crate::hierarchy::Vocabulary;
use crate::model::{HicaModel, ModelConfig};
use crate::numerics::Tensor2;
use crate::prompting::PromptTable;

pub const MAGIC: &[u8; 4] = b"HICA";
pub const FORMAT_VERSION: u32 = 1;

/// Generator state sufficient to resume the deterministic epoch schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    featurizer: FeaturizerConfig,
    prompts: PromptTable,
    vocabulary: Vec<String>,
    init_seed: u64,
    train: Option<TrainConfig>,
    rng: RngState,
    history: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HicaModel,
    pub train: Option<TrainConfig>,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [
            m.d_model(),
            m.config.heads,
            m.config.ffn_hidden,
            m.vocabulary.len(),
            m.decoders.len(),
            m.featurizer.image_tokens,
        ] {
            put_u32(&mut out, v)?;
        }
        let meta = serde_json::to_vec(&Metadata {
            model: m.config.clone(),
            featurizer: m.featurizer,
            prompts: m.prompts.clone(),
            vocabulary: m.vocabulary.names().to_vec(),
            init_seed: m.seed,
            train: self.train.clone(),
            rng: self.rng,
            history: self.history.clone(),
        })?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, m.store.len())?;
        for (_, name, t) in m.store.iter() {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows())?;
            put_u32(&mut out, t.cols())?;
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a HICA checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()?;
        }
        let meta_len = r.u32()?;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let vocabulary = Vocabulary::from_names(meta.vocabulary)?;
        let mut model = HicaModel::new(
            meta.model,
            meta.featurizer,
            meta.prompts,
            vocabulary,
            meta.init_seed,
        )?;
        let expected = [
            model.d_model(),
            model.config.heads,
            model.config.ffn_hidden,
            model.vocabulary.len(),
            model.decoders.len(),
            model.featurizer.image_tokens,
        ];
        if dims != expected {
            return Err(Error::Checkpoint(format!(
                "dims header {dims:?} disagrees with metadata {expected:?}"
            )));
        }
        let count = r.u32()?;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{count} arrays, model expects {}",
                model.store.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()?;
            let cols = r.u32()?;
            let raw = r.take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown array {name:?}")))?;
            if !seen.insert(id) {
                return Err(Error::Checkpoint(format!("array {name:?} appears twice")));
            }
            let t = Tensor2::from_vec(rows, cols, data)?;
            if t.shape() != model.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "array {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = t;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            model,
            train: meta.train,
            rng: meta.rng,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
