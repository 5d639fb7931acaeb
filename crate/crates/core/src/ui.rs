//! Page content as UI trees, plus the privacy redaction pass applied before
//! any page text reaches a prompt.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PageError {
    #[error("page_id must be non-empty")]
    EmptyPageId,
    #[error("duplicate node id `{0}`")]
    DuplicateNodeId(String),
    #[error("node id must be non-empty")]
    EmptyNodeId,
}

/// One on-screen element. Coordinates are absolute pixels, origin top-left.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UiNode {
    #[serde(rename = "id")]
    pub node_id: String,
    #[serde(default)]
    pub text: String,
    pub x: i32,
    pub y: i32,
    #[serde(rename = "w")]
    pub width: u32,
    #[serde(rename = "h")]
    pub height: u32,
    #[serde(default)]
    pub color: Option<String>,
    pub clickable: bool,
    pub typeable: bool,
    #[serde(default)]
    pub children: Vec<UiNode>,
}

impl UiNode {
    pub fn new(node_id: impl Into<String>, text: impl Into<String>, x: i32, y: i32, width: u32, height: u32) -> Self {
        Self {
            node_id: node_id.into(),
            text: text.into(),
            x,
            y,
            width,
            height,
            color: None,
            clickable: false,
            typeable: false,
            children: Vec::new(),
        }
    }

    pub fn clickable(mut self) -> Self {
        self.clickable = true;
        self
    }

    pub fn typeable(mut self) -> Self {
        self.typeable = true;
        self
    }

    pub fn with_children(mut self, children: Vec<UiNode>) -> Self {
        self.children = children;
        self
    }

    pub fn is_interactable(&self) -> bool {
        self.clickable || self.typeable
    }

    pub fn is_container(&self) -> bool {
        !self.children.is_empty()
    }
}

/// A node in pre-order position together with its parent's position.
#[derive(Debug, Clone, Copy)]
pub struct FlatNode<'a> {
    pub node: &'a UiNode,
    pub parent: Option<usize>,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageSnapshot {
    pub page_id: String,
    #[serde(rename = "nodes")]
    pub roots: Vec<UiNode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_index: Option<u32>,
}

impl PageSnapshot {
    pub fn new(page_id: impl Into<String>, roots: Vec<UiNode>) -> Result<Self, PageError> {
        let page = Self { page_id: page_id.into(), roots, step_index: None };
        page.validate()?;
        Ok(page)
    }

    pub fn validate(&self) -> Result<(), PageError> {
        if self.page_id.is_empty() {
            return Err(PageError::EmptyPageId);
        }
        let mut seen = BTreeSet::new();
        for node in self.flatten() {
            if node.node_id.is_empty() {
                return Err(PageError::EmptyNodeId);
            }
            if !seen.insert(node.node_id.as_str()) {
                return Err(PageError::DuplicateNodeId(node.node_id.clone()));
            }
        }
        Ok(())
    }

    /// Depth-first pre-order traversal.
    pub fn flatten(&self) -> Vec<&UiNode> {
        self.flatten_indexed().into_iter().map(|f| f.node).collect()
    }

    pub fn flatten_indexed(&self) -> Vec<FlatNode<'_>> {
        fn walk<'a>(node: &'a UiNode, parent: Option<usize>, depth: usize, out: &mut Vec<FlatNode<'a>>) {
            let me = out.len();
            out.push(FlatNode { node, parent, depth });
            for child in &node.children {
                walk(child, Some(me), depth + 1, out);
            }
        }
        let mut out = Vec::new();
        for root in &self.roots {
            walk(root, None, 0, &mut out);
        }
        out
    }

    pub fn node_count(&self) -> usize {
        fn count(node: &UiNode) -> usize {
            1 + node.children.iter().map(count).sum::<usize>()
        }
        self.roots.iter().map(count).sum()
    }

    pub fn find(&self, node_id: &str) -> Option<&UiNode> {
        self.flatten().into_iter().find(|n| n.node_id == node_id)
    }

    pub fn at_step(mut self, step_index: u32) -> Self {
        self.step_index = Some(step_index);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RedactionPattern {
    /// Exact substring.
    Literal { text: String },
    /// Any run of at least `min_len` consecutive ASCII digits.
    DigitRun { min_len: usize },
    /// Mobile numbers (11 digits starting with 1) and dashed numbers of 10 to 12 digits
    /// starting with 0 or 1.
    Phone,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RedactionError {
    #[error("replacement must be non-empty")]
    EmptyReplacement,
    #[error("replacement `{0}` contains a digit")]
    DigitInReplacement(String),
    #[error("replacement `{0}` contains its own pattern")]
    SelfMatchingReplacement(String),
    #[error("pattern matches nothing")]
    EmptyPattern,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedactionRule {
    pub pattern: RedactionPattern,
    pub replacement: String,
}

impl RedactionRule {
    pub fn new(pattern: RedactionPattern, replacement: impl Into<String>) -> Result<Self, RedactionError> {
        let replacement = replacement.into();
        if replacement.is_empty() {
            return Err(RedactionError::EmptyReplacement);
        }
        if replacement.chars().any(|c| c.is_ascii_digit()) {
            return Err(RedactionError::DigitInReplacement(replacement));
        }
        match &pattern {
            RedactionPattern::Literal { text } if text.is_empty() => return Err(RedactionError::EmptyPattern),
            RedactionPattern::Literal { text } if replacement.contains(text.as_str()) => {
                return Err(RedactionError::SelfMatchingReplacement(replacement))
            }
            RedactionPattern::DigitRun { min_len: 0 } => return Err(RedactionError::EmptyPattern),
            _ => {}
        }
        Ok(Self { pattern, replacement })
    }

    /// Byte spans matched in `text`, non-overlapping, left to right.
    fn spans(&self, text: &str) -> Vec<(usize, usize)> {
        match &self.pattern {
            RedactionPattern::Literal { text: lit } => text.match_indices(lit.as_str()).map(|(i, m)| (i, i + m.len())).collect(),
            RedactionPattern::DigitRun { min_len } => digit_runs(text, false)
                .into_iter()
                .filter(|&(s, e)| e - s >= *min_len)
                .collect(),
            RedactionPattern::Phone => digit_runs(text, true)
                .into_iter()
                .filter(|&(s, e)| {
                    let run = &text[s..e];
                    let digits = run.bytes().filter(u8::is_ascii_digit).count();
                    let dashed = run.contains('-');
                    (!dashed && digits == 11 && run.starts_with('1'))
                        || (dashed && (10..=12).contains(&digits) && (run.starts_with('0') || run.starts_with('1')))
                })
                .collect(),
        }
    }

    pub fn apply(&self, text: &str) -> String {
        let spans = self.spans(text);
        if spans.is_empty() {
            return String::from(text);
        }
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for (s, e) in spans {
            out.push_str(&text[last..s]);
            out.push_str(&self.replacement);
            last = e;
        }
        out.push_str(&text[last..]);
        out
    }
}

/// Maximal runs of ASCII digits; with `dashes`, single dashes between digits extend the run.
fn digit_runs(text: &str, dashes: bool) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut runs = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() {
            let joined = dashes && bytes[i] == b'-' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit);
            if !(bytes[i].is_ascii_digit() || joined) {
                break;
            }
            i += 1;
        }
        runs.push((start, i));
    }
    runs
}

/// Phone numbers first, then any remaining run of six or more digits.
pub fn default_redaction_rules() -> Vec<RedactionRule> {
    alloc::vec![
        RedactionRule { pattern: RedactionPattern::Phone, replacement: String::from("⟨PHONE⟩") },
        RedactionRule { pattern: RedactionPattern::DigitRun { min_len: 6 }, replacement: String::from("⟨NUMBER⟩") },
    ]
}

/// Replaces matched spans in every node text. Geometry, flags and order are untouched.
pub fn redact(page: &PageSnapshot, rules: &[RedactionRule]) -> PageSnapshot {
    fn redact_node(node: &UiNode, rules: &[RedactionRule]) -> UiNode {
        let mut text = node.text.clone();
        for rule in rules {
            text = rule.apply(&text);
        }
        UiNode {
            text,
            children: node.children.iter().map(|c| redact_node(c, rules)).collect(),
            ..node.clone()
        }
    }
    PageSnapshot {
        page_id: page.page_id.clone(),
        roots: page.roots.iter().map(|n| redact_node(n, rules)).collect(),
        step_index: page.step_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn calendar() -> PageSnapshot {
        PageSnapshot::new(
            "calendar",
            vec![UiNode::new("cell", "", 96, 196, 48, 48).clickable().with_children(vec![
                UiNode::new("date", "Nov 4", 100, 200, 40, 20).clickable(),
                UiNode::new("price", "¥400", 100, 222, 40, 18),
            ])],
        )
        .unwrap()
    }

    #[test]
    fn flatten_is_preorder() {
        let page = calendar();
        let ids: Vec<_> = page.flatten().iter().map(|n| n.node_id.as_str()).collect();
        assert_eq!(ids, ["cell", "date", "price"]);
        assert_eq!(page.node_count(), 3);
        let texts: Vec<_> = page.flatten().iter().map(|n| n.text.as_str()).collect();
        assert_eq!(texts, ["", "Nov 4", "¥400"]);
    }

    #[test]
    fn flatten_empty_page() {
        let page = PageSnapshot::new("blank", vec![]).unwrap();
        assert!(page.flatten().is_empty());
    }

    #[test]
    fn flatten_parent_indices() {
        let page = calendar();
        let flat = page.flatten_indexed();
        assert_eq!(flat[0].parent, None);
        assert_eq!(flat[1].parent, Some(0));
        assert_eq!(flat[2].parent, Some(0));
        assert_eq!(flat[2].depth, 1);
    }

    #[test]
    fn rejects_duplicate_ids_and_empty_page_id() {
        let dup = PageSnapshot::new("p", vec![UiNode::new("n1", "a", 0, 0, 1, 1), UiNode::new("n1", "b", 0, 0, 1, 1)]);
        assert_eq!(dup, Err(PageError::DuplicateNodeId("n1".into())));
        assert_eq!(PageSnapshot::new("", vec![]), Err(PageError::EmptyPageId));
    }

    #[test]
    fn phone_redaction() {
        let page = PageSnapshot::new("p", vec![UiNode::new("n", "call 13812345678", 0, 0, 10, 10)]).unwrap();
        let out = redact(&page, &default_redaction_rules());
        assert_eq!(out.roots[0].text, "call ⟨PHONE⟩");
        assert_eq!(redact(&out, &default_redaction_rules()), out);
    }

    #[test]
    fn landline_and_long_digit_runs() {
        let rules = default_redaction_rules();
        let apply = |t: &str| rules.iter().fold(String::from(t), |acc, r| r.apply(&acc));
        assert_eq!(apply("tel 0571-88886666"), "tel ⟨PHONE⟩");
        assert_eq!(apply("card 6222021234567890"), "card ⟨NUMBER⟩");
        assert_eq!(apply("Nov 4 ¥400"), "Nov 4 ¥400");
        assert_eq!(apply("2023-11-04"), "2023-11-04");
    }

    #[test]
    fn empty_rules_is_identity() {
        let page = calendar();
        assert_eq!(redact(&page, &[]), page);
    }

    #[test]
    fn rule_validation() {
        assert_eq!(
            RedactionRule::new(RedactionPattern::Phone, ""),
            Err(RedactionError::EmptyReplacement)
        );
        assert!(matches!(
            RedactionRule::new(RedactionPattern::Phone, "<P1>"),
            Err(RedactionError::DigitInReplacement(_))
        ));
        assert!(matches!(
            RedactionRule::new(RedactionPattern::Literal { text: "ab".into() }, "xabx"),
            Err(RedactionError::SelfMatchingReplacement(_))
        ));
        let lit = RedactionRule::new(RedactionPattern::Literal { text: "Zhang San".into() }, "⟨NAME⟩").unwrap();
        assert_eq!(lit.apply("Hi Zhang San!"), "Hi ⟨NAME⟩!");
    }
}
