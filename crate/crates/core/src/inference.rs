//! Autoregressive report generation under the consistency constraint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::walk;
use crate::hierarchy::{check_consistency, AnswerMap, AnswerSet, QuestionTree, Visit};
use crate::model::HicaModel;
use crate::prompting::PromptTable;

/// Anything that can answer one question of a tree walk.
pub trait Answerer {
    fn answer(
        &self,
        image_id: &str,
        prompts: &PromptTable,
        visit: &Visit,
        tree: &QuestionTree,
    ) -> Result<AnswerSet>;

    /// Class names the answerer was built for, if it has a fixed vocabulary.
    fn vocabulary(&self) -> Option<&[String]> {
        None
    }
}

impl Answerer for HicaModel {
    fn answer(
        &self,
        image_id: &str,
        prompts: &PromptTable,
        visit: &Visit,
        tree: &QuestionTree,
    ) -> Result<AnswerSet> {
        let inputs = self.encode_with(
            prompts,
            image_id,
            visit.level,
            &visit.question,
            &visit.history(),
        )?;
        self.predict(tree, visit.node, &inputs)
    }

    fn vocabulary(&self) -> Option<&[String]> {
        Some(self.vocabulary.names())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedAnswer {
    pub node_id: String,
    pub instance: u32,
    pub answer: Vec<String>,
    pub forced: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedReport {
    pub image_id: String,
    pub answers: Vec<PredictedAnswer>,
}

impl PredictedReport {
    /// Parses the answers against `tree` and checks consistency.
    pub fn to_answer_map(&self, tree: &QuestionTree) -> Result<AnswerMap> {
        let mut map = AnswerMap::new();
        for a in &self.answers {
            let node = tree.index_of(&a.node_id).ok_or_else(|| {
                Error::Vocabulary(format!("prediction names unknown node {:?}", a.node_id))
            })?;
            let set = tree.parse_answer(node, &a.answer)?;
            map.insert((node, a.instance), set);
        }
        check_consistency(tree, &map).map_err(|message| Error::Inconsistent {
            image_id: self.image_id.clone(),
            message,
        })?;
        Ok(map)
    }

    pub fn model_invocations(&self) -> usize {
        self.answers.iter().filter(|a| !a.forced).count()
    }
}

/// Walks `tree` for one image, asking `model` every question not forced by an
/// earlier negative answer. History holds the predicted answers.
pub fn answer_report<A: Answerer + ?Sized>(
    image_id: &str,
    tree: &QuestionTree,
    model: &A,
    prompts: &PromptTable,
) -> Result<PredictedReport> {
    if let Some(names) = model.vocabulary() {
        if names != tree.vocabulary().names() {
            let theirs = crate::hierarchy::Vocabulary::from_names(names.to_vec())?;
            return Err(Error::Vocabulary(theirs.diff(tree.vocabulary())));
        }
    }
    let records = walk(tree, |visit| model.answer(image_id, prompts, visit, tree))?;
    Ok(PredictedReport {
        image_id: image_id.to_string(),
        answers: records
            .into_iter()
            .map(|r| PredictedAnswer {
                node_id: tree.node(r.node).id.clone(),
                instance: r.instance,
                answer: tree.answer_names(&r.answer),
                forced: r.forced,
            })
            .collect(),
    })
}

pub fn save_predictions(path: &Path, preds: &[PredictedReport]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(preds)?)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictedReport>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
