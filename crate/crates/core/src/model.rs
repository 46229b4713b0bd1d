//! The full model: prompt alignment followed by per-level decoders, all stored in
//! one flat parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_on, AlignmentParams};
use crate::decoders::{fuse_on, predict_answer, DecoderParams, FusionMode, Logits};
use crate::error::{Error, Result};
use crate::featurizers::{
    encode_image, encode_question, encode_text, FeaturizerConfig, TokenMatrix,
};
use crate::hierarchy::{AnswerSet, QuestionTree, Sample, Vocabulary};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::objective::{bce_on, AnswerMask, ClassWeights, LossBreakdown};
use crate::prompting::{Level, PromptTable};

/// Architecture and ablation switches. Width comes from the featurizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub heads: usize,
    pub ffn_hidden: usize,
    pub fusion_depth: usize,
    pub fusion: FusionMode,
    /// One decoder for all levels instead of one per level.
    pub shared_decoder: bool,
    pub use_alignment: bool,
    /// When off, every level receives the level-1 prompt.
    pub use_prompts: bool,
    pub use_history: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn_hidden: 128,
            fusion_depth: 1,
            fusion: FusionMode::Cross,
            shared_decoder: false,
            use_alignment: true,
            use_prompts: true,
            use_history: true,
        }
    }
}

impl ModelConfig {
    /// Applies a named ablation.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "none" => {}
            "shared-decoder" => self.shared_decoder = true,
            "no-alignment" => self.use_alignment = false,
            "no-prompts" => self.use_prompts = false,
            "no-history" => self.use_history = false,
            "self-fusion" => self.fusion = FusionMode::SelfAttention,
            "text-as-query" => self.fusion = FusionMode::TextAsQuery,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }
}

pub const ABLATIONS: &[&str] = &[
    "none",
    "shared-decoder",
    "no-alignment",
    "no-prompts",
    "no-history",
    "self-fusion",
    "text-as-query",
];

/// Encoded inputs for one question.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub image: TokenMatrix,
    pub prompt: TokenMatrix,
    pub question: TokenMatrix,
    pub level: Level,
}

#[derive(Clone, Debug)]
pub struct HicaModel {
    pub config: ModelConfig,
    pub featurizer: FeaturizerConfig,
    pub prompts: PromptTable,
    pub vocabulary: Vocabulary,
    pub store: ParamStore,
    pub alignment: Option<AlignmentParams>,
    pub decoders: Vec<DecoderParams>,
    /// Initialisation seed; with the configs it fixes the parameter layout.
    pub seed: u64,
}

impl HicaModel {
    pub fn new(
        config: ModelConfig,
        featurizer: FeaturizerConfig,
        prompts: PromptTable,
        vocabulary: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        featurizer.validate()?;
        prompts.validate()?;
        let d = featurizer.d_model;
        if config.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let alignment = if config.use_alignment {
            Some(AlignmentParams::init(
                &mut store,
                "align",
                d,
                config.heads,
                config.ffn_hidden,
                &mut rng,
            )?)
        } else {
            None
        };
        let count = if config.shared_decoder { 1 } else { 3 };
        let decoders = (0..count)
            .map(|i| {
                let name = if config.shared_decoder {
                    "decoder.shared".to_string()
                } else {
                    format!("decoder.level{}", i + 1)
                };
                DecoderParams::init(
                    &mut store,
                    &name,
                    d,
                    config.heads,
                    config.ffn_hidden,
                    config.fusion_depth,
                    vocabulary.len(),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            featurizer,
            prompts,
            vocabulary,
            store,
            alignment,
            decoders,
            seed,
        })
    }

    pub fn d_model(&self) -> usize {
        self.featurizer.d_model
    }

    pub fn decoder_index(&self, level: Level) -> usize {
        if self.decoders.len() == 1 {
            0
        } else {
            level.index()
        }
    }

    /// The decoder answering questions of `level`.
    pub fn select_decoder(&self, level: u8) -> Result<&DecoderParams> {
        let level = Level::new(level)?;
        Ok(&self.decoders[self.decoder_index(level)])
    }

    /// Every trainable parameter: alignment, then decoders in level order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = self.alignment.as_ref().map(|a| a.ids()).unwrap_or_default();
        for d in &self.decoders {
            ids.extend(d.ids());
        }
        ids
    }

    /// Fails with a readable difference when `tree` uses another vocabulary.
    pub fn check_vocabulary(&self, tree: &QuestionTree) -> Result<()> {
        let diff = self.vocabulary.diff(tree.vocabulary());
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Vocabulary(diff))
        }
    }

    /// Prompt for `level` from `prompts`, honouring the prompt ablation.
    pub fn prompt_text<'a>(&self, prompts: &'a PromptTable, level: Level) -> &'a str {
        if self.config.use_prompts {
            prompts.prompt_for_level(level)
        } else {
            prompts.prompt_for_level(Level::ONE)
        }
    }

    pub fn encode(
        &self,
        image_id: &str,
        level: Level,
        question: &str,
        history: &[(String, String)],
    ) -> Result<ModelInputs> {
        self.encode_with(&self.prompts, image_id, level, question, history)
    }

    pub fn encode_with(
        &self,
        prompts: &PromptTable,
        image_id: &str,
        level: Level,
        question: &str,
        history: &[(String, String)],
    ) -> Result<ModelInputs> {
        let history = if self.config.use_history {
            history
        } else {
            &[]
        };
        Ok(ModelInputs {
            image: encode_image(image_id, &self.featurizer)?,
            prompt: encode_text(self.prompt_text(prompts, level), &self.featurizer)?,
            question: encode_question(question, history, &self.featurizer)?,
            level,
        })
    }

    pub fn encode_sample(&self, sample: &Sample) -> Result<ModelInputs> {
        self.encode(
            &sample.image_id,
            sample.level,
            &sample.question,
            &sample.history(),
        )
    }

    /// Records the forward pass; returns the `1 × V` logits node.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &ModelInputs,
    ) -> Result<Var> {
        let v_i = g.input(inputs.image.values().clone());
        let v_q = g.input(inputs.question.values().clone());
        let f_p = match &self.alignment {
            Some(a) => {
                let v_p = g.input(inputs.prompt.values().clone());
                align_on(g, store, v_i, v_p, a)?
            }
            None => v_i,
        };
        let decoder = &self.decoders[self.decoder_index(inputs.level)];
        fuse_on(g, store, f_p, v_q, decoder, self.config.fusion)
    }

    pub fn logits(&self, inputs: &ModelInputs) -> Result<Logits> {
        let mut g = Graph::new();
        let z = self.forward_on(&mut g, &self.store, inputs)?;
        let values = g.value(z);
        if !values.is_finite() {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok(Logits(values.data().to_vec()))
    }

    /// Masked prediction for one question of `tree`.
    pub fn predict(
        &self,
        tree: &QuestionTree,
        node: usize,
        inputs: &ModelInputs,
    ) -> Result<AnswerSet> {
        let z = self.logits(inputs)?;
        let n = tree.node(node);
        predict_answer(
            &z.0,
            &AnswerMask::for_node(tree, node),
            n.kind,
            tree.vocabulary().no_selection(),
        )
    }

    /// Loss graph for one sample against parameters in `store`.
    pub fn loss_graph(
        &self,
        store: &ParamStore,
        inputs: &ModelInputs,
        gold: &[f64],
        weights: &ClassWeights,
        mask: &AnswerMask,
    ) -> Result<(Graph, Var, LossBreakdown)> {
        let mut g = Graph::new();
        let z = self.forward_on(&mut g, store, inputs)?;
        let (root, breakdown) = bce_on(&mut g, z, gold, weights, mask)?;
        Ok((g, root, breakdown))
    }
}
