//! Three-level question templates and the shared answer vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::Level;

pub const YES: &str = "yes";
pub const NO: &str = "no";
pub const NO_SELECTION: &str = "no selection";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChoiceKind {
    Single,
    Multi,
}

/// On-disk form of a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: String,
    pub level: u8,
    pub text: String,
    pub kind: ChoiceKind,
    pub candidates: Vec<String>,
    #[serde(default)]
    pub children: Vec<NodeDoc>,
    #[serde(default = "one")]
    pub max_occurrences: u32,
    #[serde(default)]
    pub follow_up_text: String,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDoc {
    pub roots: Vec<NodeDoc>,
}

/// Canonical answer vocabulary. `yes` and `no` always occupy indices 0 and 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub const YES: usize = 0;
    pub const NO: usize = 1;

    fn new() -> Self {
        Self {
            names: vec![YES.to_string(), NO.to_string()],
        }
    }

    fn intern(&mut self, name: &str) -> usize {
        match self.index_of(name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.names.len() - 1
            }
        }
    }

    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 || names[0] != YES || names[1] != NO {
            return Err(Error::Vocabulary(
                "vocabulary must start with \"yes\", \"no\"".into(),
            ));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn no_selection(&self) -> Option<usize> {
        self.index_of(NO_SELECTION)
    }

    /// Human-readable difference, empty when equal.
    pub fn diff(&self, other: &Vocabulary) -> String {
        let missing: Vec<&str> = self
            .names
            .iter()
            .filter(|n| !other.names.contains(n))
            .map(String::as_str)
            .collect();
        let extra: Vec<&str> = other
            .names
            .iter()
            .filter(|n| !self.names.contains(n))
            .map(String::as_str)
            .collect();
        if missing.is_empty() && extra.is_empty() {
            if self.names == other.names {
                String::new()
            } else {
                "same classes in a different order".into()
            }
        } else {
            format!("only in first: {missing:?}; only in second: {extra:?}")
        }
    }
}

/// Sorted set of vocabulary indices.
pub type AnswerSet = Vec<usize>;

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionNode {
    pub id: String,
    pub level: Level,
    pub text: String,
    pub kind: ChoiceKind,
    pub candidates: Vec<String>,
    /// Vocabulary indices of `candidates`, same order.
    pub candidate_ids: Vec<usize>,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub max_occurrences: u32,
    pub follow_up_text: String,
}

impl QuestionNode {
    pub fn is_repeatable(&self) -> bool {
        self.max_occurrences > 1
    }

    pub fn question_text(&self, instance: u32) -> &str {
        if instance == 0 {
            &self.text
        } else {
            &self.follow_up_text
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionTree {
    nodes: Vec<QuestionNode>,
    roots: Vec<usize>,
    vocabulary: Vocabulary,
    by_id: BTreeMap<String, usize>,
}

impl QuestionTree {
    pub fn nodes(&self) -> &[QuestionNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &QuestionNode {
        &self.nodes[i]
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The repeatable node on the chain from `node` to its root, if any.
    pub fn repeat_scope(&self, node: usize) -> Option<usize> {
        let mut cur = Some(node);
        while let Some(i) = cur {
            if self.nodes[i].is_repeatable() {
                return Some(i);
            }
            cur = self.nodes[i].parent;
        }
        None
    }

    /// Occurrence bound for instances of `node`.
    pub fn instance_bound(&self, node: usize) -> u32 {
        self.repeat_scope(node)
            .map_or(1, |r| self.nodes[r].max_occurrences)
    }

    /// The parent instance of `(node, instance)`.
    pub fn parent_key(&self, node: usize, instance: u32) -> Option<(usize, u32)> {
        let n = &self.nodes[node];
        n.parent
            .map(|p| (p, if n.is_repeatable() { 0 } else { instance }))
    }

    /// Answer implied for unasked questions: `no`, or `no selection` at level 3.
    pub fn negative_answer(&self, node: usize) -> AnswerSet {
        let n = &self.nodes[node];
        if n.level.is_binary() {
            vec![Vocabulary::NO]
        } else {
            vec![self
                .vocabulary
                .no_selection()
                .expect("level-3 nodes guarantee a no-selection class")]
        }
    }

    pub fn is_yes(answer: &[usize]) -> bool {
        answer == [Vocabulary::YES]
    }

    /// Whether the answer asserts a finding (gates children and follow-ups).
    pub fn is_positive(&self, node: usize, answer: &[usize]) -> bool {
        answer != self.negative_answer(node).as_slice()
    }

    pub fn answer_text(&self, answer: &[usize]) -> String {
        answer
            .iter()
            .map(|&i| self.vocabulary.name(i))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Parses candidate names into a canonical answer for `node`.
    pub fn parse_answer(&self, node: usize, names: &[String]) -> Result<AnswerSet> {
        let n = &self.nodes[node];
        let path = format!("answer for {}", n.id);
        if names.is_empty() {
            return Err(Error::schema(path, "empty answer"));
        }
        let mut set = Vec::with_capacity(names.len());
        for name in names {
            let pos = n
                .candidates
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::schema(&path, format!("{name:?} is not a candidate")))?;
            set.push(n.candidate_ids[pos]);
        }
        set.sort_unstable();
        set.dedup();
        if set.len() != names.len() {
            return Err(Error::schema(path, "duplicate candidates"));
        }
        if n.kind == ChoiceKind::Single && set.len() != 1 {
            return Err(Error::schema(
                path,
                "single-choice question with several answers",
            ));
        }
        if let Some(ns) = self.vocabulary.no_selection() {
            if set.len() > 1 && set.contains(&ns) {
                return Err(Error::schema(
                    path,
                    "\"no selection\" combined with other answers",
                ));
            }
        }
        Ok(set)
    }

    pub fn answer_names(&self, answer: &[usize]) -> Vec<String> {
        answer
            .iter()
            .map(|&i| self.vocabulary.name(i).to_string())
            .collect()
    }

    pub fn to_doc(&self) -> TreeDoc {
        TreeDoc {
            roots: self.roots.iter().map(|&r| self.node_doc(r)).collect(),
        }
    }

    fn node_doc(&self, i: usize) -> NodeDoc {
        let n = &self.nodes[i];
        NodeDoc {
            id: n.id.clone(),
            level: n.level.get(),
            text: n.text.clone(),
            kind: n.kind,
            candidates: n.candidates.clone(),
            children: n.children.iter().map(|&c| self.node_doc(c)).collect(),
            max_occurrences: n.max_occurrences,
            follow_up_text: n.follow_up_text.clone(),
        }
    }

    pub fn count_at_level(&self, level: Level) -> usize {
        self.nodes.iter().filter(|n| n.level == level).count()
    }
}

/// Validates a template document and builds the canonical vocabulary.
pub fn load_template(doc: &TreeDoc) -> Result<QuestionTree> {
    if doc.roots.is_empty() {
        return Err(Error::schema("tree.roots", "no root questions"));
    }
    let mut builder = Builder {
        nodes: Vec::new(),
        vocabulary: Vocabulary::new(),
        by_id: BTreeMap::new(),
    };
    let mut roots = Vec::with_capacity(doc.roots.len());
    for (i, r) in doc.roots.iter().enumerate() {
        roots.push(builder.add(r, None, &format!("tree.roots[{i}]"), false)?);
    }
    Ok(QuestionTree {
        nodes: builder.nodes,
        roots,
        vocabulary: builder.vocabulary,
        by_id: builder.by_id,
    })
}

struct Builder {
    nodes: Vec<QuestionNode>,
    vocabulary: Vocabulary,
    by_id: BTreeMap<String, usize>,
}

impl Builder {
    fn add(
        &mut self,
        doc: &NodeDoc,
        parent: Option<usize>,
        path: &str,
        repeat_above: bool,
    ) -> Result<usize> {
        let path = format!("{path} ({})", doc.id);
        if doc.id.is_empty() {
            return Err(Error::schema(path, "empty id"));
        }
        if self.by_id.contains_key(&doc.id) {
            return Err(Error::schema(
                path,
                format!("duplicate node id {:?}", doc.id),
            ));
        }
        let level = Level::new(doc.level)
            .map_err(|_| Error::schema(&path, format!("level {} outside 1..=3", doc.level)))?;
        let expected = parent.map_or(1, |p| self.nodes[p].level.get() + 1);
        if doc.level != expected {
            return Err(Error::schema(
                &path,
                format!("level {} under a level-{} parent", doc.level, expected - 1),
            ));
        }
        if doc.text.trim().is_empty() {
            return Err(Error::schema(&path, "empty question text"));
        }
        if doc.candidates.is_empty() {
            return Err(Error::schema(&path, "no candidates"));
        }
        let mut seen = doc.candidates.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != doc.candidates.len() {
            return Err(Error::schema(&path, "duplicate candidates"));
        }
        if level.is_binary() {
            if doc.candidates != [YES, NO] {
                return Err(Error::schema(
                    &path,
                    "levels 1 and 2 take exactly the candidates [\"yes\", \"no\"]",
                ));
            }
            if doc.kind != ChoiceKind::Single {
                return Err(Error::schema(&path, "levels 1 and 2 are single-choice"));
            }
        } else {
            if doc.candidates.iter().any(|c| c == YES || c == NO) {
                return Err(Error::schema(&path, "level-3 candidates exclude yes/no"));
            }
            if !doc.candidates.iter().any(|c| c == NO_SELECTION) {
                return Err(Error::schema(
                    &path,
                    "level-3 candidates must include \"no selection\"",
                ));
            }
            if !doc.children.is_empty() {
                return Err(Error::schema(&path, "level-3 nodes are leaves"));
            }
        }
        if doc.max_occurrences < 1 {
            return Err(Error::schema(&path, "max_occurrences must be >= 1"));
        }
        let repeatable = doc.max_occurrences > 1;
        if repeatable && repeat_above {
            return Err(Error::schema(
                &path,
                "at most one repeatable node per root-to-leaf chain",
            ));
        }
        if repeatable && doc.follow_up_text.trim().is_empty() {
            return Err(Error::schema(&path, "repeatable node needs follow_up_text"));
        }

        let candidate_ids = doc
            .candidates
            .iter()
            .map(|c| self.vocabulary.intern(c))
            .collect();
        let index = self.nodes.len();
        self.by_id.insert(doc.id.clone(), index);
        self.nodes.push(QuestionNode {
            id: doc.id.clone(),
            level,
            text: doc.text.clone(),
            kind: doc.kind,
            candidates: doc.candidates.clone(),
            candidate_ids,
            children: Vec::new(),
            parent,
            max_occurrences: doc.max_occurrences,
            follow_up_text: doc.follow_up_text.clone(),
        });
        let mut children = Vec::with_capacity(doc.children.len());
        for (i, c) in doc.children.iter().enumerate() {
            children.push(self.add(
                c,
                Some(index),
                &format!("{path}.children[{i}]"),
                repeat_above || repeatable,
            )?);
        }
        self.nodes[index].children = children;
        Ok(index)
    }
}

/// Every maximal root-to-leaf chain, in document order.
pub fn enumerate_paths(tree: &QuestionTree) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for &r in tree.roots() {
        collect_paths(tree, r, &mut stack, &mut out);
    }
    out
}

fn collect_paths(
    tree: &QuestionTree,
    node: usize,
    stack: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    stack.push(node);
    let children = &tree.node(node).children;
    if children.is_empty() {
        out.push(stack.clone());
    } else {
        for &c in children {
            collect_paths(tree, c, stack, out);
        }
    }
    stack.pop();
}
