//! Teacher-forced training samples.

use super::report::{answer_or_negative, validate_answers, AnswerMap, Dataset, GoldReport};
use super::tree::{AnswerSet, ChoiceKind, QuestionTree};
use super::walk::walk;
use crate::error::Result;
use crate::objective::AnswerMask;
use crate::prompting::{Level, PromptTable};

/// One question instance asked under teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Index of the source report within its dataset.
    pub report: usize,
    pub image_id: String,
    pub node: usize,
    pub node_id: String,
    pub instance: u32,
    pub parent: Option<(usize, u32)>,
    pub level: Level,
    pub kind: ChoiceKind,
    pub prompt: String,
    pub question: String,
    pub ancestors: Vec<(String, String)>,
    pub siblings: Vec<(String, String)>,
    pub answer: AnswerSet,
    pub answer_text: String,
    pub gold: Vec<f64>,
    pub mask: AnswerMask,
}

impl Sample {
    /// Ancestor chain followed by earlier questions of the same sibling group.
    pub fn history(&self) -> Vec<(String, String)> {
        let mut h = self.ancestors.clone();
        h.extend(self.siblings.iter().cloned());
        h
    }
}

/// Validates `report` and emits one sample per question asked when every earlier
/// answer is the gold one.
pub fn build_samples(
    report: &GoldReport,
    tree: &QuestionTree,
    prompts: &PromptTable,
) -> Result<Vec<Sample>> {
    let answers = validate_answers(tree, &report.image_id, &report.answers)?;
    samples_from_answers(0, &report.image_id, &answers, tree, prompts)
}

pub fn samples_from_answers(
    report: usize,
    image_id: &str,
    answers: &AnswerMap,
    tree: &QuestionTree,
    prompts: &PromptTable,
) -> Result<Vec<Sample>> {
    let classes = tree.vocabulary().len();
    let mut out = Vec::new();
    walk(tree, |v| {
        let answer = answer_or_negative(tree, answers, (v.node, v.instance));
        let node = tree.node(v.node);
        let mut gold = vec![0.0; classes];
        for &a in &answer {
            gold[a] = 1.0;
        }
        out.push(Sample {
            report,
            image_id: image_id.to_string(),
            node: v.node,
            node_id: node.id.clone(),
            instance: v.instance,
            parent: v.parent,
            level: v.level,
            kind: node.kind,
            prompt: prompts.prompt_for_level(v.level).to_string(),
            question: v.question.clone(),
            ancestors: v.ancestors.clone(),
            siblings: v.siblings.clone(),
            answer_text: tree.answer_text(&answer),
            answer: answer.clone(),
            gold,
            mask: AnswerMask::for_node(tree, v.node),
        });
        Ok(answer)
    })?;
    Ok(out)
}

/// Samples for the listed reports of a dataset, in report order.
pub fn dataset_samples(
    dataset: &Dataset,
    reports: &[usize],
    prompts: &PromptTable,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &r in reports {
        out.extend(samples_from_answers(
            r,
            &dataset.reports[r].image_id,
            &dataset.answers[r],
            &dataset.tree,
            prompts,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::report::AnswerEntry;
    use crate::hierarchy::tree::tests::{attribute, yes_no};
    use crate::hierarchy::tree::{load_template, TreeDoc};

    fn entry(node: &str, instance: u32, answer: &[&str]) -> AnswerEntry {
        AnswerEntry {
            node_id: node.into(),
            instance,
            answer: answer.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn report(entries: Vec<AnswerEntry>) -> GoldReport {
        GoldReport {
            image_id: "img".into(),
            answers: entries,
        }
    }

    #[test]
    fn root_no_prunes_subtree() {
        let t = load_template(&TreeDoc {
            roots: vec![yes_no("a", 1, vec![yes_no("b", 2, vec![])])],
        })
        .unwrap();
        let s = build_samples(
            &report(vec![entry("a", 0, &["no"])]),
            &t,
            &PromptTable::default(),
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].gold, vec![0.0, 1.0]);
    }

    #[test]
    fn child_history_contains_root_pair() {
        let t = load_template(&TreeDoc {
            roots: vec![yes_no("a", 1, vec![yes_no("b", 2, vec![])])],
        })
        .unwrap();
        let s = build_samples(
            &report(vec![entry("a", 0, &["yes"]), entry("b", 0, &["no"])]),
            &t,
            &PromptTable::default(),
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(
            s[1].history(),
            vec![("is there a".to_string(), "yes".to_string())]
        );
        assert_eq!(s[1].prompt, "Focus on different organs in the image");
    }

    #[test]
    fn follow_up_sample_uses_follow_up_text() {
        let mut b = yes_no("b", 2, vec![attribute("c", ChoiceKind::Single, &["x"])]);
        b.max_occurrences = 2;
        b.follow_up_text = "are there any other b".into();
        let t = load_template(&TreeDoc {
            roots: vec![yes_no("a", 1, vec![b])],
        })
        .unwrap();
        let s = build_samples(
            &report(vec![
                entry("a", 0, &["yes"]),
                entry("b", 0, &["yes"]),
                entry("c", 0, &["x"]),
                entry("b", 1, &["yes"]),
                entry("c", 1, &["no selection"]),
            ]),
            &t,
            &PromptTable::default(),
        )
        .unwrap();
        let questions: Vec<(&str, u32)> = s
            .iter()
            .map(|x| (x.question.as_str(), x.instance))
            .collect();
        assert_eq!(
            questions,
            vec![
                ("is there a", 0),
                ("is there b", 0),
                ("what is c", 0),
                ("are there any other b", 1),
                ("what is c", 1),
            ]
        );
        let c1 = &s[4];
        assert!(c1.mask.is_valid(t.vocabulary().index_of("x").unwrap()));
        assert!(!c1.mask.is_valid(0));
    }

    #[test]
    fn inconsistent_report_rejected() {
        let t = load_template(&TreeDoc {
            roots: vec![yes_no("a", 1, vec![yes_no("b", 2, vec![])])],
        })
        .unwrap();
        let bad = report(vec![entry("a", 0, &["no"]), entry("b", 0, &["yes"])]);
        assert!(build_samples(&bad, &t, &PromptTable::default()).is_err());
    }
}
