//! Question templates, gold reports, sample construction, synthetic data and
//! augmentation.

mod augment;
mod report;
mod samples;
mod synthetic;
pub(crate) mod tree;
mod walk;

pub use augment::{augment, AugmentConfig};
pub use report::{
    answer_or_negative, check_consistency, validate_answers, AnswerEntry, AnswerMap, Dataset,
    DatasetDoc, GoldReport, Split,
};
pub use samples::{build_samples, dataset_samples, samples_from_answers, Sample};
pub use synthetic::{
    generate_dataset, generate_synthetic, mean_image_token, mean_token_matrix, rule_direction,
    synthetic_template, Level3Kinds, Level3Rule, PlantedRule, SyntheticConfig,
};
pub use tree::{
    enumerate_paths, load_template, AnswerSet, ChoiceKind, NodeDoc, QuestionNode, QuestionTree,
    TreeDoc, Vocabulary, NO, NO_SELECTION, YES,
};
pub use walk::{walk, Visit, WalkRecord};
