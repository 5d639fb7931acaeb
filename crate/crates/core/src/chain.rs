//! Instruction chains and alignment of executed progress onto them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{marker_line, BackendError, BackendRequest, LlmBackend, RoleTag, STEP_KEY};
use crate::text::{multiset_overlap, tokens};

/// Default alignment threshold.
pub const DEFAULT_MIN_SCORE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    Abstract,
    Elaborate,
}

impl ChainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChainKind::Abstract => "abstract",
            ChainKind::Elaborate => "elaborate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("task must be non-empty")]
    EmptyTask,
    #[error("chain needs at least one non-empty step")]
    NoSteps,
    #[error("chain reply is not a numbered list of at least 2 steps: {raw:?}")]
    Format { raw: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionChain {
    pub kind: ChainKind,
    pub task: String,
    pub steps: Vec<String>,
}

impl InstructionChain {
    pub fn new(kind: ChainKind, task: impl Into<String>, steps: Vec<String>) -> Result<Self, ChainError> {
        let chain = Self { kind, task: task.into(), steps };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.task.trim().is_empty() {
            return Err(ChainError::EmptyTask);
        }
        if self.steps.is_empty() || self.steps.iter().any(|s| s.trim().is_empty()) {
            return Err(ChainError::NoSteps);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `1. first\n2. second`
pub fn render_chain(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Byte offset of the first `N.`/`N)` list marker that starts the text or follows whitespace.
fn list_start(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let boundary = i == 0 || (bytes[i - 1] as char).is_ascii_whitespace();
        if boundary && bytes[i].is_ascii_digit() {
            let digits = bytes[i..].iter().take_while(|b| b.is_ascii_digit()).count();
            let j = i + digits;
            if j + 1 < bytes.len() && matches!(bytes[j], b'.' | b')') && (bytes[j + 1] as char).is_ascii_whitespace() {
                return Some(i);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    None
}

fn clean_step(step: &str) -> String {
    let s = step.trim();
    String::from(s.strip_suffix('.').unwrap_or(s).trim_end())
}

/// Parses a numbered list. Any prose before the first marker is dropped;
/// the list ends at the first non-blank line without a marker.
pub fn parse_chain_reply(reply: &str) -> Result<Vec<String>, ChainError> {
    let format_error = || ChainError::Format { raw: String::from(reply) };
    let start = list_start(reply).ok_or_else(format_error)?;
    let mut steps = Vec::new();
    for line in reply[start..].lines() {
        if line.trim().is_empty() {
            continue;
        }
        match crate::backend::strip_list_number(line) {
            Some(step) if !step.is_empty() => steps.push(clean_step(step)),
            Some(_) => {}
            None => break,
        }
    }
    steps.retain(|s| !s.is_empty());
    if steps.len() < 2 {
        return Err(format_error());
    }
    Ok(steps)
}

pub fn chain_prompt(task: &str, kind: ChainKind, key: Option<&str>) -> String {
    let style = match kind {
        ChainKind::Abstract => "Give a short, platform-independent plan.",
        ChainKind::Elaborate => "Give a detailed plan whose steps each correspond to concrete actions in the app.",
    };
    let mut prompt = format!(
        "Break the task into a numbered list of steps. {style} Reply with the list only.\n\nKIND: {}\nTASK: {task}\n",
        kind.as_str()
    );
    if let Some(key) = key {
        prompt.push('\n');
        prompt.push_str(&marker_line(STEP_KEY, key));
        prompt.push('\n');
    }
    prompt
}

pub fn generate_chain(
    task: &str,
    kind: ChainKind,
    backend: &dyn LlmBackend,
    key: Option<&str>,
) -> Result<InstructionChain, ChainError> {
    if task.trim().is_empty() {
        return Err(ChainError::EmptyTask);
    }
    let request = BackendRequest::new(RoleTag::ChainGen, chain_prompt(task, kind, key))?;
    let reply = backend.complete(&request)?;
    let steps = parse_chain_reply(&reply)?;
    InstructionChain::new(kind, task, steps)
}

/// Token Dice coefficient over lowercased word multisets. Two token-free
/// strings count as identical.
pub fn similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (tokens(a), tokens(b));
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    2.0 * multiset_overlap(&ta, &tb) as f64 / (ta.len() + tb.len()) as f64
}

/// Pluggable step/description similarity, e.g. cosine over embeddings.
pub trait Similarity {
    fn score(&self, a: &str, b: &str) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokenDice;

impl Similarity for TokenDice {
    fn score(&self, a: &str, b: &str) -> f64 {
        similarity(a, b)
    }
}

impl<F: Fn(&str, &str) -> f64> Similarity for F {
    fn score(&self, a: &str, b: &str) -> f64 {
        self(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadScore {
    pub pad_index: usize,
    /// 1-based chain position the pad consumed, if any.
    pub chain_index: Option<usize>,
    /// Score against the consumed step, or the best score seen when nothing matched.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressAlignment {
    pub matched_prefix_end: usize,
    pub remaining_steps: Vec<String>,
    pub per_pad_scores: Vec<PadScore>,
}

pub fn align_progress(chain: &InstructionChain, pads: &[String], min_score: f64) -> ProgressAlignment {
    align_progress_with(chain, pads, min_score, &TokenDice)
}

/// Each pad consumes the earliest step after the last consumed one scoring at
/// least `min_score`; steps jumped over count as done.
pub fn align_progress_with(
    chain: &InstructionChain,
    pads: &[String],
    min_score: f64,
    measure: &dyn Similarity,
) -> ProgressAlignment {
    let mut m = 0;
    let mut per_pad_scores = Vec::with_capacity(pads.len());
    for (pad_index, pad) in pads.iter().enumerate() {
        let mut best = 0.0_f64;
        let mut hit = None;
        for (k, step) in chain.steps.iter().enumerate().skip(m) {
            let score = measure.score(pad, step);
            if score >= min_score {
                hit = Some((k + 1, score));
                break;
            }
            best = best.max(score);
        }
        match hit {
            Some((index, score)) => {
                m = index;
                per_pad_scores.push(PadScore { pad_index, chain_index: Some(index), score });
            }
            None => per_pad_scores.push(PadScore { pad_index, chain_index: None, score: best }),
        }
    }
    ProgressAlignment { matched_prefix_end: m, remaining_steps: chain.steps[m..].to_vec(), per_pad_scores }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::FixedReplies;
    use alloc::vec;

    fn flight_chain() -> InstructionChain {
        let steps = [
            "Open the Alipay app and log in",
            "Click 'Transport' on the homepage",
            "Input 'Hangzhou' as the departure city",
            "Input 'Beijing' as the destination",
            "Set the date to November 4th",
            "Select the 'Economy' class flight",
            "Search flight and choose an appropriate flight",
        ];
        InstructionChain::new(ChainKind::Elaborate, "book", steps.iter().map(|s| String::from(*s)).collect()).unwrap()
    }

    #[test]
    fn parses_numbered_reply_with_periods() {
        let reply = "1. Open the Alipay app and log in.\n2. Click 'Transport' on the homepage.\n\
                     3. Input 'Hangzhou' as the departure city.\n4. Input 'Beijing' as the destination.\n\
                     5. Set the date to November 4th.\n6. Select the 'Economy' class flight.\n\
                     7. Search flight and choose an appropriate flight.";
        let backend = FixedReplies::new([reply]);
        let chain = generate_chain(
            "Book an economy class flight ticket from Hangzhou to Beijing on November 4th",
            ChainKind::Elaborate,
            &backend,
            None,
        )
        .unwrap();
        assert_eq!(chain.steps, flight_chain().steps);
    }

    #[test]
    fn drops_preamble() {
        assert_eq!(parse_chain_reply("Sure! 1. Open app\n2. Pay").unwrap(), ["Open app", "Pay"]);
    }

    #[test]
    fn prose_is_format_error() {
        assert!(matches!(parse_chain_reply("Just open the app and pay."), Err(ChainError::Format { .. })));
        assert!(matches!(parse_chain_reply("1. only one"), Err(ChainError::Format { .. })));
        assert!(matches!(parse_chain_reply("version 2.5 is out"), Err(ChainError::Format { .. })));
    }

    #[test]
    fn list_ends_at_trailing_prose() {
        let steps = parse_chain_reply("1) a\n\n2) b\nHope this helps!\n3) c").unwrap();
        assert_eq!(steps, ["a", "b"]);
    }

    #[test]
    fn empty_task_rejected() {
        let backend = FixedReplies::new(["1. a\n2. b"]);
        assert_eq!(generate_chain(" ", ChainKind::Abstract, &backend, None), Err(ChainError::EmptyTask));
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn render_then_parse_round_trips() {
        let steps = flight_chain().steps;
        assert_eq!(parse_chain_reply(&render_chain(&steps)).unwrap(), steps);
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity("a b", "a b"), 1.0);
        assert_eq!(similarity("a b", "c d"), 0.0);
        let s = similarity("set the date to November 4th", "Typed 'November 4th' setting the date");
        assert!((s - 2.0 * 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn align_identity_prefix() {
        let chain = flight_chain();
        let pads: Vec<String> = chain.steps[..3].to_vec();
        let a = align_progress(&chain, &pads, 0.5);
        assert_eq!(a.matched_prefix_end, 3);
        assert_eq!(a.remaining_steps, chain.steps[3..]);
        assert_eq!(align_progress(&chain, &[], 0.3).remaining_steps, chain.steps);
    }

    #[test]
    fn align_template_pads_skips_login() {
        let chain = flight_chain();
        let pads = vec![
            String::from("Clicked 'Transport' on page homepage; page changed to transport_page."),
            String::from("Input 'departure city' with value 'Hangzhou' on page search; page changed to search_filled."),
        ];
        let a = align_progress(&chain, &pads, DEFAULT_MIN_SCORE);
        assert_eq!(a.matched_prefix_end, 3);
        assert_eq!(a.per_pad_scores[0].chain_index, Some(2));
        assert_eq!(a.per_pad_scores[1].chain_index, Some(3));
        assert_eq!(a.remaining_steps, chain.steps[3..]);
    }

    #[test]
    fn unmatched_pad_keeps_position() {
        let chain = flight_chain();
        let a = align_progress(&chain, &[String::from("zzz")], 0.3);
        assert_eq!(a.matched_prefix_end, 0);
        assert_eq!(a.per_pad_scores[0].chain_index, None);
    }
}
