//! The language-model abstraction every generator talks to.
//!
//! Prompts carry `*_KEY: <value>` marker lines. Deterministic backends look
//! replies up by these markers instead of by prompt text, so prompt wording
//! can change without invalidating recorded scripts.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{quoted_phrases, tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    ChainGen,
    PadGen,
    ActionPred,
}

impl RoleTag {
    pub const ALL: [RoleTag; 3] = [RoleTag::ChainGen, RoleTag::PadGen, RoleTag::ActionPred];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::ChainGen => "chain_gen",
            RoleTag::PadGen => "pad_gen",
            RoleTag::ActionPred => "action_pred",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub role: RoleTag,
    pub prompt: String,
    pub params: GenerationParams,
}

impl BackendRequest {
    pub fn new(role: RoleTag, prompt: impl Into<String>) -> Result<Self, BackendError> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        Ok(Self { role, prompt, params: GenerationParams::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("no scripted reply for role {role} under keys [{}]", keys.join(", "))]
    ScriptGap { role: RoleTag, keys: Vec<String> },
    #[error("request rejected with status {status}: {body}")]
    Request { status: u16, body: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("{0}")]
    Unsupported(String),
}

pub trait LlmBackend {
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for alloc::boxed::Box<T> {
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

/// Marker line carrying the episode position, `<task_id>/<step_index>`.
pub const STEP_KEY: &str = "STEP_KEY";
/// Marker line carrying the aligned plan position, `<task_id>/plan<n>`.
pub const PLAN_KEY: &str = "PLAN_KEY";

pub fn marker_line(name: &str, value: &str) -> String {
    format!("{name}: {value}")
}

/// Values of all `NAME_KEY: value` lines in prompt order.
pub fn prompt_keys(prompt: &str) -> Vec<&str> {
    prompt
        .lines()
        .filter_map(|line| {
            let (name, value) = line.split_once(": ")?;
            let marker = name.ends_with("_KEY") && name.bytes().all(|b| b.is_ascii_uppercase() || b == b'_');
            (marker && !value.trim().is_empty()).then(|| value.trim())
        })
        .collect()
}

/// Lines of the block that follows `label:` up to the next blank line.
pub(crate) fn prompt_block<'a>(prompt: &'a str, label: &str) -> Vec<&'a str> {
    let header = format!("{label}:");
    let mut lines = prompt.lines();
    if !lines.any(|l| l.trim_end() == header) {
        return Vec::new();
    }
    lines.take_while(|l| !l.trim().is_empty()).collect()
}

fn labelled<'a>(prompt: &'a str, label: &str) -> Option<&'a str> {
    let header = format!("{label}: ");
    prompt.lines().find_map(|l| l.strip_prefix(header.as_str())).map(str::trim)
}

/// Strips a leading `12. ` or `12) ` list marker.
pub(crate) fn strip_list_number(line: &str) -> Option<&str> {
    let trimmed = line.trim_start();
    let digits = trimmed.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &trimmed[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    Some(rest.trim())
}

/// Deterministic, model-free backend.
///
/// * `chain_gen`: a generic two-step abstract plan.
/// * `pad_gen`: the fixed description template, filled from the prompt's
///   `ACTION`, `ELEMENT`, `VALUE`, `PAGE_BEFORE` and `PAGE_AFTER` lines.
/// * `action_pred`: a lexical policy that picks the candidate closest to the
///   first remaining plan step (or to the task when no plan is shown),
///   skipping elements already rejected in revision notes.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateBackend;

impl LlmBackend for TemplateBackend {
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let prompt = request.prompt.as_str();
        match request.role {
            RoleTag::ChainGen => {
                let task = labelled(prompt, "TASK").unwrap_or("complete the task");
                Ok(format!("1. Open the app\n2. {task}"))
            }
            RoleTag::PadGen => template_pad_reply(prompt),
            RoleTag::ActionPred => Ok(template_action_reply(prompt)),
        }
    }
}

fn template_pad_reply(prompt: &str) -> Result<String, BackendError> {
    let missing = |what: &str| BackendError::Response(format!("description prompt lacks {what}"));
    let function = labelled(prompt, "ACTION").ok_or_else(|| missing("ACTION"))?;
    let element = labelled(prompt, "ELEMENT").ok_or_else(|| missing("ELEMENT"))?;
    let value = labelled(prompt, "VALUE").filter(|v| *v != "(none)");
    let before = labelled(prompt, "PAGE_BEFORE").ok_or_else(|| missing("PAGE_BEFORE"))?;
    let after = labelled(prompt, "PAGE_AFTER").ok_or_else(|| missing("PAGE_AFTER"))?;
    let function = crate::history::Function::parse(function).ok_or_else(|| missing("a known ACTION"))?;
    Ok(crate::history::render_template(function, element, value, before, after))
}

fn template_action_reply(prompt: &str) -> String {
    let candidates: Vec<&str> = prompt_block(prompt, "CANDIDATES")
        .into_iter()
        .filter_map(strip_list_number)
        .collect();
    let plan_first = prompt_block(prompt, "PLAN").into_iter().find_map(strip_list_number);
    let target = plan_first
        .map(String::from)
        .or_else(|| prompt_block(prompt, "TASK").first().map(|s| s.to_string()))
        .unwrap_or_default();
    let rejected: Vec<String> = prompt_block(prompt, "REVISION")
        .into_iter()
        .flat_map(quoted_phrases)
        .collect();
    let quoted = quoted_phrases(&target);
    let target_tokens = tokens(&target);

    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        if rejected.iter().any(|r| r == cand) {
            continue;
        }
        let mut score = crate::chain::similarity(cand, &target);
        if quoted.iter().any(|q| q.eq_ignore_ascii_case(cand)) {
            score += 1.0;
        }
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    let Some((index, _)) = best.filter(|&(_, s)| s > 0.0) else {
        return String::from("SCROLL PAGE");
    };
    let is_input = matches!(target_tokens.first().map(String::as_str), Some("input" | "type" | "enter"));
    let value = quoted.iter().find(|q| !q.eq_ignore_ascii_case(candidates[index]));
    match (is_input, value) {
        (true, Some(v)) => format!("TYPE {} :: {v}", index + 1),
        _ => format!("CLICK {}", index + 1),
    }
}

/// Convenience for tests and callers that only need a fixed reply list.
#[derive(Debug, Clone, Default)]
pub struct FixedReplies {
    replies: Vec<String>,
    next: core::cell::Cell<usize>,
}

impl FixedReplies {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { replies: replies.into_iter().map(Into::into).collect(), next: core::cell::Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.next.get()
    }
}

impl LlmBackend for FixedReplies {
    /// Replies in order, repeating the last one once the list is used up.
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let i = self.next.get();
        self.next.set(i + 1);
        self.replies
            .get(i)
            .or_else(|| self.replies.last())
            .cloned()
            .ok_or_else(|| BackendError::ScriptGap { role: request.role, keys: vec![] })
    }
}
