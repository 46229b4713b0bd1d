//! Depth-first traversal of a question tree under the consistency constraint.
//!
//! The same walk drives teacher-forced sample construction (answers come from the
//! gold report) and autoregressive inference (answers come from the model). A
//! negative answer forces the whole subtree to its negative answer without asking;
//! a positive answer at a repeatable node triggers the follow-up question until a
//! negative answer or the occurrence bound.

use super::tree::{AnswerSet, ChoiceKind, QuestionTree};
use crate::error::{Error, Result};
use crate::prompting::Level;

/// One question about to be asked.
#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub node: usize,
    pub instance: u32,
    pub parent: Option<(usize, u32)>,
    pub level: Level,
    pub question: String,
    /// `(question, answer)` for each ancestor instance, root first.
    pub ancestors: Vec<(String, String)>,
    /// `(question, answer)` for questions already asked in the same sibling group.
    pub siblings: Vec<(String, String)>,
}

impl Visit {
    pub fn history(&self) -> Vec<(String, String)> {
        let mut h = self.ancestors.clone();
        h.extend(self.siblings.iter().cloned());
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkRecord {
    pub node: usize,
    pub instance: u32,
    pub answer: AnswerSet,
    pub forced: bool,
}

/// Walks `tree` in document order, calling `ask` for every non-forced question.
pub fn walk<F>(tree: &QuestionTree, mut ask: F) -> Result<Vec<WalkRecord>>
where
    F: FnMut(&Visit) -> Result<AnswerSet>,
{
    let mut out = Vec::new();
    visit_group(tree, tree.roots(), 0, None, &[], &mut ask, &mut out)?;
    Ok(out)
}

fn visit_group<F>(
    tree: &QuestionTree,
    group: &[usize],
    inherited: u32,
    parent: Option<(usize, u32)>,
    ancestors: &[(String, String)],
    ask: &mut F,
    out: &mut Vec<WalkRecord>,
) -> Result<()>
where
    F: FnMut(&Visit) -> Result<AnswerSet>,
{
    let mut siblings: Vec<(String, String)> = Vec::new();
    for &node in group {
        let n = tree.node(node);
        let occurrences = if n.is_repeatable() {
            n.max_occurrences
        } else {
            1
        };
        for k in 0..occurrences {
            let instance = if n.is_repeatable() { k } else { inherited };
            let question = n.question_text(k).to_string();
            let visit = Visit {
                node,
                instance,
                parent,
                level: n.level,
                question: question.clone(),
                ancestors: ancestors.to_vec(),
                siblings: siblings.clone(),
            };
            let answer = ask(&visit)?;
            check_answer(tree, node, &answer)?;
            let text = tree.answer_text(&answer);
            let positive = tree.is_positive(node, &answer);
            out.push(WalkRecord {
                node,
                instance,
                answer,
                forced: false,
            });
            siblings.push((question.clone(), text.clone()));
            if positive {
                let mut chain = ancestors.to_vec();
                chain.push((question, text));
                visit_group(
                    tree,
                    &n.children,
                    instance,
                    Some((node, instance)),
                    &chain,
                    ask,
                    out,
                )?;
            } else {
                force_subtree(tree, &n.children, instance, out);
                break;
            }
        }
    }
    Ok(())
}

fn force_subtree(tree: &QuestionTree, group: &[usize], inherited: u32, out: &mut Vec<WalkRecord>) {
    for &node in group {
        let n = tree.node(node);
        let instance = if n.is_repeatable() { 0 } else { inherited };
        out.push(WalkRecord {
            node,
            instance,
            answer: tree.negative_answer(node),
            forced: true,
        });
        force_subtree(tree, &n.children, instance, out);
    }
}

fn check_answer(tree: &QuestionTree, node: usize, answer: &[usize]) -> Result<()> {
    let n = tree.node(node);
    let legal = !answer.is_empty()
        && answer.windows(2).all(|w| w[0] < w[1])
        && answer.iter().all(|a| n.candidate_ids.contains(a))
        && (n.kind == ChoiceKind::Multi || answer.len() == 1);
    if legal {
        Ok(())
    } else {
        Err(Error::Vocabulary(format!(
            "answer {answer:?} is not a legal selection for {}",
            n.id
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::tree::tests::{attribute, yes_no};
    use crate::hierarchy::tree::{load_template, TreeDoc, Vocabulary};

    fn tree() -> QuestionTree {
        let mut b = yes_no("b", 2, vec![attribute("c", ChoiceKind::Multi, &["x", "y"])]);
        b.max_occurrences = 3;
        b.follow_up_text = "any other b".into();
        load_template(&TreeDoc {
            roots: vec![
                yes_no("a", 1, vec![b, yes_no("d", 2, vec![])]),
                yes_no("e", 1, vec![]),
            ],
        })
        .unwrap()
    }

    #[test]
    fn always_no_asks_only_roots() {
        let t = tree();
        let mut asked = 0;
        let records = walk(&t, |_| {
            asked += 1;
            Ok(vec![Vocabulary::NO])
        })
        .unwrap();
        assert_eq!(asked, t.roots().len());
        assert_eq!(records.iter().filter(|r| r.forced).count(), t.len() - 2);
    }

    #[test]
    fn always_yes_stops_at_bound() {
        let t = tree();
        let x = t.vocabulary().index_of("x").unwrap();
        let b = t.index_of("b").unwrap();
        let c = t.index_of("c").unwrap();
        let records = walk(&t, |v| {
            Ok(if v.level == Level::THREE {
                vec![x]
            } else {
                vec![Vocabulary::YES]
            })
        })
        .unwrap();
        let b_instances: Vec<u32> = records
            .iter()
            .filter(|r| r.node == b)
            .map(|r| r.instance)
            .collect();
        assert_eq!(b_instances, vec![0, 1, 2]);
        let c_instances: Vec<u32> = records
            .iter()
            .filter(|r| r.node == c)
            .map(|r| r.instance)
            .collect();
        assert_eq!(c_instances, vec![0, 1, 2]);
        assert!(records.iter().all(|r| !r.forced));
    }

    #[test]
    fn history_carries_ancestors_and_prior_siblings() {
        let t = tree();
        let mut visits = Vec::new();
        walk(&t, |v| {
            visits.push(v.clone());
            Ok(if v.level == Level::THREE {
                vec![t.vocabulary().no_selection().unwrap()]
            } else if v.instance >= 1 {
                vec![Vocabulary::NO]
            } else {
                vec![Vocabulary::YES]
            })
        })
        .unwrap();
        let follow_up = visits.iter().find(|v| v.question == "any other b").unwrap();
        assert_eq!(follow_up.instance, 1);
        assert_eq!(
            follow_up.ancestors,
            vec![("is there a".into(), "yes".into())]
        );
        assert_eq!(
            follow_up.siblings,
            vec![("is there b".into(), "yes".into())]
        );
        let d = visits.iter().find(|v| v.question == "is there d").unwrap();
        assert_eq!(d.siblings.len(), 2);
        let e = visits.iter().find(|v| v.question == "is there e").unwrap();
        assert_eq!(e.siblings, vec![("is there a".into(), "yes".into())]);
        assert!(e.ancestors.is_empty());
    }

    #[test]
    fn illegal_answers_are_errors() {
        let t = tree();
        assert!(walk(&t, |_| Ok(vec![Vocabulary::YES, Vocabulary::NO])).is_err());
        assert!(walk(&t, |_| Ok(vec![])).is_err());
    }
}
