//! Candidate sets, prompt assembly, reply parsing and the prediction retry loop.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{marker_line, BackendError, BackendRequest, LlmBackend, RoleTag};
use crate::calibration::{CalibrationOutcome, Verdict};
use crate::history::{Action, Function, KeyPath, PAGE_ELEMENT};
use crate::layout::Section;
use crate::text::quoted_phrases;

pub const DEFAULT_MAX_CANDIDATES: usize = 50;
pub const DEFAULT_PROMPT_BUDGET: usize = 8000;
pub const DEFAULT_MAX_ATTEMPTS: usize = 3;

pub const ANSWER_CONTRACT: &str = "Answer with exactly one line: CLICK <n>, SCROLL <n|PAGE> or TYPE <n> :: <value>, \
where <n> is a candidate number or its exact text.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    HistoryTop,
    TaskText,
    PageSections,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub display_text: String,
    pub source: CandidateSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    pub max_size: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.display_text.as_str())
    }

    pub fn contains(&self, text: &str) -> bool {
        self.texts().any(|t| t == text)
    }

    /// 1-based lookup, as numbered in the prompt.
    pub fn get(&self, number: usize) -> Option<&str> {
        number.checked_sub(1).and_then(|i| self.entries.get(i)).map(|c| c.display_text.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CandidateError {
    #[error("candidate max_size must be at least 1")]
    ZeroMaxSize,
    #[error("no candidate elements: page, task and history are all empty")]
    Empty,
}

/// Merges history elements, quoted task phrases and section texts, in that
/// order, keeping the first copy of each text and at most `max_size` entries.
pub fn build_candidates(
    sections: &[Section],
    task: &str,
    history_top: &[String],
    max_size: usize,
) -> Result<CandidateSet, CandidateError> {
    if max_size == 0 {
        return Err(CandidateError::ZeroMaxSize);
    }
    let sources = history_top
        .iter()
        .map(|t| (t.clone(), CandidateSource::HistoryTop))
        .chain(quoted_phrases(task).into_iter().map(|t| (t, CandidateSource::TaskText)))
        .chain(sections.iter().map(|s| (s.display_text(), CandidateSource::PageSections)));
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (text, source) in sources {
        let text = String::from(text.trim());
        if text.is_empty() || !seen.insert(text.clone()) {
            continue;
        }
        entries.push(Candidate { display_text: text, source });
        if entries.len() == max_size {
            break;
        }
    }
    if entries.is_empty() {
        return Err(CandidateError::Empty);
    }
    Ok(CandidateSet { entries, max_size })
}

/// Elements of the key paths tagged `tag`, most frequent first, ties by first appearance.
pub fn history_top(key_paths: &[KeyPath], tag: &str, limit: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let elements = key_paths.iter().filter(|k| k.task_tag == tag).flat_map(|k| k.actions.iter());
    for (order, action) in elements.filter(|a| a.element() != PAGE_ELEMENT).enumerate() {
        counts.entry(action.element()).or_insert((0, order)).0 += 1;
    }
    let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    ranked.into_iter().take(limit).map(|(e, _)| String::from(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task: String,
    pub chain_remaining: Vec<String>,
    pub history_actions: Vec<Action>,
    /// Either empty or one per history action.
    pub history_descriptions: Vec<String>,
    pub page_digest: String,
    pub candidates: CandidateSet,
    #[serde(default)]
    pub revision_notes: Vec<String>,
    /// `(NAME_KEY, value)` lines appended for script lookup.
    #[serde(default)]
    pub markers: Vec<(String, String)>,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("prompt needs {needed} characters even without history and page text (budget {budget})")]
    OverBudget { needed: usize, budget: usize },
    #[error("history has {actions} actions but {descriptions} descriptions")]
    HistoryMismatch { actions: usize, descriptions: usize },
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn render(bundle: &PromptBundle, history_from: usize, digest: &str) -> String {
    let mut out = format!("TASK:\n{}\n\nPLAN:\n", one_line(&bundle.task));
    if bundle.chain_remaining.is_empty() {
        out.push_str("(none)\n");
    }
    for (i, step) in bundle.chain_remaining.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, one_line(step)));
    }
    out.push_str("\nHISTORY:\n");
    if history_from >= bundle.history_actions.len() {
        out.push_str("(none)\n");
    }
    for (i, action) in bundle.history_actions.iter().enumerate().skip(history_from) {
        out.push_str(&format!("{}. {action}\n", i + 1));
        if let Some(d) = bundle.history_descriptions.get(i) {
            out.push_str(&format!("   {}\n", one_line(d)));
        }
    }
    out.push_str("\nPAGE:\n");
    let digest: Vec<&str> = digest.lines().filter(|l| !l.trim().is_empty()).collect();
    if digest.is_empty() {
        out.push_str("(empty)\n");
    }
    for line in digest {
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("\nCANDIDATES:\n");
    for (i, c) in bundle.candidates.entries.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, c.display_text));
    }
    out.push_str("\nINSTRUCTION:\n");
    out.push_str(ANSWER_CONTRACT);
    out.push('\n');
    if !bundle.revision_notes.is_empty() {
        out.push_str("\nREVISION:\n");
        for note in &bundle.revision_notes {
            out.push_str(&format!("- {}\n", one_line(note)));
        }
    }
    if !bundle.markers.is_empty() {
        out.push('\n');
        for (name, value) in &bundle.markers {
            out.push_str(&marker_line(name, value));
            out.push('\n');
        }
    }
    out
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Renders the prompt. Over budget, the oldest history entries go first,
/// then trailing page-digest lines.
pub fn assemble_prompt(bundle: &PromptBundle) -> Result<String, PromptError> {
    let (actions, descriptions) = (bundle.history_actions.len(), bundle.history_descriptions.len());
    if descriptions != 0 && descriptions != actions {
        return Err(PromptError::HistoryMismatch { actions, descriptions });
    }
    for from in 0..=actions {
        let prompt = render(bundle, from, &bundle.page_digest);
        if char_len(&prompt) <= bundle.budget {
            return Ok(prompt);
        }
    }
    let mut lines: Vec<&str> = bundle.page_digest.lines().collect();
    while !lines.is_empty() {
        lines.pop();
        let prompt = render(bundle, actions, &lines.join("\n"));
        if char_len(&prompt) <= bundle.budget {
            return Ok(prompt);
        }
    }
    let needed = char_len(&render(bundle, actions, ""));
    Err(PromptError::OverBudget { needed, budget: bundle.budget })
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseError {
    #[error("reply {reply:?} is not in the answer format: {reason}")]
    Format { reply: String, reason: String },
    #[error("element {element:?} is not among the candidates")]
    Hallucination { element: String },
}

impl ParseError {
    fn format(reply: &str, reason: &str) -> Self {
        ParseError::Format { reply: String::from(reply), reason: String::from(reason) }
    }

    /// Revision note appended to the next attempt's prompt.
    pub fn revision_note(&self) -> String {
        match self {
            ParseError::Format { reply, reason } => {
                let mut shown: String = one_line(reply).chars().take(80).collect();
                if shown.is_empty() {
                    shown = String::from("(empty)");
                }
                format!("Reply '{shown}' was rejected ({reason}); {ANSWER_CONTRACT}")
            }
            ParseError::Hallucination { element } => {
                format!("Element '{}' is not among the candidates; choose a numbered candidate.", one_line(element))
            }
        }
    }
}

fn resolve_element(token: &str, candidates: &CandidateSet, function: Function) -> Result<String, ParseError> {
    let token = token.trim();
    if function == Function::Scroll && token == PAGE_ELEMENT {
        return Ok(String::from(PAGE_ELEMENT));
    }
    if !token.is_empty() && token.bytes().all(|b| b.is_ascii_digit()) {
        return token
            .parse::<usize>()
            .ok()
            .and_then(|n| candidates.get(n))
            .map(String::from)
            .ok_or_else(|| ParseError::Hallucination { element: String::from(token) });
    }
    if candidates.contains(token) {
        Ok(String::from(token))
    } else {
        Err(ParseError::Hallucination { element: String::from(token) })
    }
}

/// Parses the first non-blank line of a reply. The element is always a
/// candidate text, or `PAGE` for a scroll.
pub fn parse_action_reply(reply: &str, candidates: &CandidateSet) -> Result<Action, ParseError> {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    if line.is_empty() {
        return Err(ParseError::format(reply, "empty reply"));
    }
    let (head, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
    let function = match head {
        "CLICK" => Function::Click,
        "SCROLL" => Function::Scroll,
        "TYPE" => Function::Type,
        _ => return Err(ParseError::format(reply, "unknown function")),
    };
    let rest = rest.trim();
    let (element, value) = match (function, rest.split_once("::")) {
        (Function::Type, Some((e, v))) => {
            let v = v.trim();
            if v.is_empty() {
                return Err(ParseError::format(reply, "TYPE value is empty"));
            }
            (e.trim(), Some(String::from(v)))
        }
        (Function::Type, None) => return Err(ParseError::format(reply, "TYPE needs `:: <value>`")),
        (_, Some(_)) => return Err(ParseError::format(reply, "only TYPE takes a value")),
        (_, None) => (rest, None),
    };
    if element.is_empty() {
        return Err(ParseError::format(reply, "missing element"));
    }
    let element = resolve_element(element, candidates, function)?;
    Action::new(function, element, value).map_err(|e| ParseError::format(reply, &format!("{e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Accepted,
    ParseFailed { error: ParseError },
    Rejected { calibration: CalibrationOutcome },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: usize,
    pub prompt: String,
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationOutcome>,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub action: Action,
    pub attempts: Vec<AttemptRecord>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictionError {
    #[error("max_attempts must be at least 1")]
    NoAttempts,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend failed on attempt {}: {error}", attempts.len() + 1)]
    Backend { error: BackendError, attempts: Vec<AttemptRecord> },
    #[error("no acceptable action after {} attempts", attempts.len())]
    Exhausted { attempts: Vec<AttemptRecord> },
}

impl PredictionError {
    pub fn attempts(&self) -> &[AttemptRecord] {
        match self {
            PredictionError::Backend { attempts, .. } | PredictionError::Exhausted { attempts } => attempts,
            _ => &[],
        }
    }

    /// Raw replies of every attempt made.
    pub fn replies(&self) -> Vec<&str> {
        self.attempts().iter().map(|a| a.reply.as_str()).collect()
    }
}

/// Assemble, ask, parse, then run `check` on the parsed action. Parse errors
/// and failed checks become revision notes for the next attempt; all three
/// kinds of failure share the `max_attempts` budget.
pub fn predict_with(
    bundle: &PromptBundle,
    backend: &dyn LlmBackend,
    max_attempts: usize,
    mut check: impl FnMut(&Action) -> CalibrationOutcome,
) -> Result<Prediction, PredictionError> {
    if max_attempts == 0 {
        return Err(PredictionError::NoAttempts);
    }
    let mut bundle = bundle.clone();
    let mut attempts = Vec::new();
    for attempt in 1..=max_attempts {
        let prompt = assemble_prompt(&bundle)?;
        let reply = BackendRequest::new(RoleTag::ActionPred, prompt.clone()).and_then(|r| backend.complete(&r));
        let reply = match reply {
            Ok(r) => r,
            Err(error) => return Err(PredictionError::Backend { error, attempts }),
        };
        let mut record =
            AttemptRecord { attempt, prompt, reply, action: None, calibration: None, outcome: AttemptOutcome::Accepted };
        match parse_action_reply(&record.reply, &bundle.candidates) {
            Err(error) => {
                bundle.revision_notes.push(error.revision_note());
                record.outcome = AttemptOutcome::ParseFailed { error };
            }
            Ok(action) => {
                let calibration = check(&action);
                record.action = Some(action.clone());
                record.calibration = Some(calibration.clone());
                if calibration.verdict == Verdict::Pass {
                    attempts.push(record);
                    return Ok(Prediction { action, attempts });
                }
                bundle.revision_notes.push(calibration.feedback.clone());
                record.outcome = AttemptOutcome::Rejected { calibration };
            }
        }
        attempts.push(record);
    }
    Err(PredictionError::Exhausted { attempts })
}

/// Prediction without a calibration gate.
pub fn predict_next_action(
    bundle: &PromptBundle,
    backend: &dyn LlmBackend,
    max_attempts: usize,
) -> Result<Prediction, PredictionError> {
    predict_with(bundle, backend, max_attempts, |_| CalibrationOutcome::pass())
}
