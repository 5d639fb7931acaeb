//! Actions, trajectories, reference key paths, and the recursive previous
//! action description (PAD) generator.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{marker_line, BackendError, BackendRequest, LlmBackend, RoleTag, STEP_KEY};
use crate::layout::{extract_text, page_sections, GroupingParams};
use crate::ui::PageSnapshot;

/// Element sentinel for scrolling the whole page.
pub const PAGE_ELEMENT: &str = "PAGE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Function {
    Click,
    Scroll,
    Type,
}

impl Function {
    pub fn as_str(self) -> &'static str {
        match self {
            Function::Click => "click",
            Function::Scroll => "scroll",
            Function::Type => "type",
        }
    }

    /// Case-insensitive name lookup.
    pub fn parse(s: &str) -> Option<Self> {
        [Function::Click, Function::Scroll, Function::Type]
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s.trim()))
    }

    fn past_tense(self) -> &'static str {
        match self {
            Function::Click => "Clicked",
            Function::Scroll => "Scrolled",
            Function::Type => "Input",
        }
    }
}

impl fmt::Display for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("element must be non-empty")]
    EmptyElement,
    #[error("type actions need a value")]
    MissingValue,
    #[error("only type actions carry a value ({0} given one)")]
    UnexpectedValue(Function),
}

#[derive(Deserialize)]
struct RawAction {
    function: Function,
    element: String,
    #[serde(default)]
    value: Option<String>,
}

/// `a = f(e, v)`: a function applied to an element, with a value only for typing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawAction")]
pub struct Action {
    function: Function,
    element: String,
    value: Option<String>,
}

impl TryFrom<RawAction> for Action {
    type Error = ActionError;

    fn try_from(raw: RawAction) -> Result<Self, Self::Error> {
        Action::new(raw.function, raw.element, raw.value)
    }
}

impl Action {
    pub fn new(function: Function, element: impl Into<String>, value: Option<String>) -> Result<Self, ActionError> {
        let element = element.into();
        if element.trim().is_empty() {
            return Err(ActionError::EmptyElement);
        }
        match (function, &value) {
            (Function::Type, None) => Err(ActionError::MissingValue),
            (Function::Click | Function::Scroll, Some(_)) => Err(ActionError::UnexpectedValue(function)),
            _ => Ok(Self { function, element, value }),
        }
    }

    pub fn click(element: impl Into<String>) -> Result<Self, ActionError> {
        Self::new(Function::Click, element, None)
    }

    pub fn scroll(element: impl Into<String>) -> Result<Self, ActionError> {
        Self::new(Function::Scroll, element, None)
    }

    pub fn typing(element: impl Into<String>, value: impl Into<String>) -> Result<Self, ActionError> {
        Self::new(Function::Type, element, Some(value.into()))
    }

    pub fn function(&self) -> Function {
        self.function
    }

    pub fn element(&self) -> &str {
        &self.element
    }

    pub fn value(&self) -> Option<&str> {
        self.value.as_deref()
    }
}

/// Renders in the predictor's answer grammar, e.g. `TYPE destination :: Beijing`.
impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.function {
            Function::Click => "CLICK",
            Function::Scroll => "SCROLL",
            Function::Type => "TYPE",
        };
        write!(f, "{name} {}", self.element)?;
        if let Some(v) = &self.value {
            write!(f, " :: {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyPathError {
    #[error("key path `{0}` has no actions")]
    Empty(String),
    #[error("key path `{tag}` repeats `{action}` but is not marked cyclic")]
    UnmarkedCycle { tag: String, action: String },
}

/// A reference executable action sequence for a family of tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPath {
    pub task_tag: String,
    pub actions: Vec<Action>,
    /// Set when the reference path legitimately repeats an action; the loop
    /// check is then skipped for trajectories that use it.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub cyclic: bool,
}

impl KeyPath {
    pub fn validate(&self) -> Result<(), KeyPathError> {
        if self.actions.is_empty() {
            return Err(KeyPathError::Empty(self.task_tag.clone()));
        }
        if !self.cyclic {
            if let Some(action) = first_repeat(&self.actions) {
                return Err(KeyPathError::UnmarkedCycle { tag: self.task_tag.clone(), action: format!("{action}") });
            }
        }
        Ok(())
    }

    /// True when no action occurs twice. Key paths carry no page ids, so the
    /// whole action stands in for the page-qualified loop key.
    pub fn is_acyclic(&self) -> bool {
        first_repeat(&self.actions).is_none()
    }
}

fn first_repeat(actions: &[Action]) -> Option<&Action> {
    let mut seen = BTreeSet::new();
    actions.iter().find(|a| !seen.insert(*a))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub index: u32,
    pub action: Action,
    pub page_before: PageSnapshot,
    pub page_after: PageSnapshot,
    pub description: String,
}

impl TrajectoryStep {
    pub fn loop_key(&self) -> LoopKey<'_> {
        LoopKey::new(&self.page_before.page_id, &self.action)
    }
}

/// Identity of a step for loop detection: the page it started on plus what was done there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LoopKey<'a> {
    pub page_id: &'a str,
    pub function: Function,
    pub element: &'a str,
}

impl<'a> LoopKey<'a> {
    pub fn new(page_id: &'a str, action: &'a Action) -> Self {
        Self { page_id, function: action.function, element: &action.element }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("task instruction must be non-empty")]
    EmptyTask,
    #[error("step index {got} does not follow {expected}")]
    NonConsecutive { expected: u32, got: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: String,
    pub steps: Vec<TrajectoryStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<KeyPath>,
}

impl Trajectory {
    pub fn new(task: impl Into<String>, reference_path: Option<KeyPath>) -> Result<Self, TrajectoryError> {
        let task = task.into();
        if task.trim().is_empty() {
            return Err(TrajectoryError::EmptyTask);
        }
        Ok(Self { task, steps: Vec::new(), reference_path })
    }

    pub fn next_index(&self) -> u32 {
        self.steps.len() as u32 + 1
    }

    pub fn push(&mut self, step: TrajectoryStep) -> Result<(), TrajectoryError> {
        let expected = self.next_index();
        if step.index != expected {
            return Err(TrajectoryError::NonConsecutive { expected, got: step.index });
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn descriptions(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.description.clone()).collect()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.steps.iter().map(|s| s.action.clone()).collect()
    }
}

/// True iff no (page, function, element) triple occurs twice.
pub fn check_acyclic(steps: &[TrajectoryStep]) -> bool {
    let mut seen = BTreeSet::new();
    steps.iter().all(|s| seen.insert(s.loop_key()))
}

/// The deterministic description used as fallback and as test oracle.
pub fn render_template(function: Function, element: &str, value: Option<&str>, before: &str, after: &str) -> String {
    let mut s = format!("{} '{element}'", function.past_tense());
    if let Some(v) = value {
        s.push_str(&format!(" with value '{v}'"));
    }
    s.push_str(&format!(" on page {before}; "));
    if before == after {
        s.push_str("page did not change.");
    } else {
        s.push_str(&format!("page changed to {after}."));
    }
    s
}

pub fn template_description(action: &Action, page_before: &PageSnapshot, page_after: &PageSnapshot) -> String {
    render_template(action.function, &action.element, action.value(), &page_before.page_id, &page_after.page_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionSource {
    Backend,
    TemplateFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    pub source: DescriptionSource,
    /// Why the backend reply was not used, when it was not.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

const PAD_DIGEST_BUDGET: usize = 600;

/// The prompt handed to the description model: the action, both pages, and
/// the previous description it continues from.
pub fn description_prompt(
    action: &Action,
    page_before: &PageSnapshot,
    page_after: &PageSnapshot,
    previous_description: Option<&str>,
    step_key: Option<&str>,
) -> String {
    let digest = |p: &PageSnapshot| {
        let d = extract_text(&page_sections(p, &GroupingParams::default()).sections, PAD_DIGEST_BUDGET);
        if d.is_empty() {
            String::from("(empty)")
        } else {
            d
        }
    };
    let mut prompt = String::from(
        "Describe the latest app action in one to three sentences: say what was acted on and how the page changed.\n\n",
    );
    prompt.push_str(&format!("PREVIOUS: {}\n", previous_description.unwrap_or("(none)")));
    prompt.push_str(&format!("ACTION: {}\n", action.function));
    prompt.push_str(&format!("ELEMENT: {}\n", action.element));
    prompt.push_str(&format!("VALUE: {}\n", action.value().unwrap_or("(none)")));
    prompt.push_str(&format!("PAGE_BEFORE: {}\n{}\n", page_before.page_id, digest(page_before)));
    prompt.push_str(&format!("PAGE_AFTER: {}\n{}\n", page_after.page_id, digest(page_after)));
    if let Some(key) = step_key {
        prompt.push('\n');
        prompt.push_str(&marker_line(STEP_KEY, key));
        prompt.push('\n');
    }
    prompt
}

/// `f_i = z(a_i, p_i, p_{i+1}, f_{i-1})`. Backend failures and empty replies
/// fall back to the template, recording why.
pub fn describe_action(
    action: &Action,
    page_before: &PageSnapshot,
    page_after: &PageSnapshot,
    previous_description: Option<&str>,
    backend: &dyn LlmBackend,
    step_key: Option<&str>,
) -> Description {
    let prompt = description_prompt(action, page_before, page_after, previous_description, step_key);
    let reply = BackendRequest::new(RoleTag::PadGen, prompt).and_then(|req| backend.complete(&req));
    let fallback = |reason: String| Description {
        text: template_description(action, page_before, page_after),
        source: DescriptionSource::TemplateFallback,
        fallback_reason: Some(reason),
    };
    match reply {
        Ok(text) if !text.trim().is_empty() => {
            Description { text: String::from(text.trim()), source: DescriptionSource::Backend, fallback_reason: None }
        }
        Ok(_) => fallback(String::from("empty reply")),
        Err(e @ BackendError::ScriptGap { .. }) | Err(e) => fallback(format!("{e}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FixedReplies, TemplateBackend};
    use crate::ui::UiNode;
    use alloc::vec;

    fn page(id: &str) -> PageSnapshot {
        PageSnapshot::new(id, vec![UiNode::new("ok", "ok", 0, 0, 40, 20).clickable()]).unwrap()
    }

    fn step(index: u32, page_id: &str, action: Action) -> TrajectoryStep {
        TrajectoryStep {
            index,
            action,
            page_before: page(page_id),
            page_after: page(page_id),
            description: String::new(),
        }
    }

    #[test]
    fn action_invariants() {
        assert_eq!(Action::new(Function::Type, "city", None), Err(ActionError::MissingValue));
        assert_eq!(
            Action::new(Function::Click, "ok", Some("x".into())),
            Err(ActionError::UnexpectedValue(Function::Click))
        );
        assert_eq!(Action::click(" "), Err(ActionError::EmptyElement));
        let a = Action::typing("departure city", "Hangzhou").unwrap();
        assert_eq!(a.value(), Some("Hangzhou"));
        assert_eq!(format!("{a}"), "TYPE departure city :: Hangzhou");
    }

    #[test]
    fn template_no_change() {
        let a = Action::click("ok").unwrap();
        assert_eq!(
            template_description(&a, &page("cart_page"), &page("cart_page")),
            "Clicked 'ok' on page cart_page; page did not change."
        );
    }

    #[test]
    fn template_type_names_value_and_pages() {
        let a = Action::typing("departure city", "Hangzhou").unwrap();
        let text = template_description(&a, &page("search"), &page("search_filled"));
        assert_eq!(text, "Input 'departure city' with value 'Hangzhou' on page search; page changed to search_filled.");
    }

    #[test]
    fn describe_uses_backend_reply() {
        let backend = FixedReplies::new(["Confirmed the shopping cart items"]);
        let a = Action::click("ok").unwrap();
        let d = describe_action(&a, &page("cart_page"), &page("cart_page"), None, &backend, Some("shop/1"));
        assert_eq!(d.text, "Confirmed the shopping cart items");
        assert_eq!(d.source, DescriptionSource::Backend);
    }

    #[test]
    fn describe_falls_back_on_error() {
        let backend = FixedReplies::new(Vec::<String>::new());
        let a = Action::click("ok").unwrap();
        let d = describe_action(&a, &page("cart_page"), &page("cart_page"), Some("prev"), &backend, None);
        assert_eq!(d.text, "Clicked 'ok' on page cart_page; page did not change.");
        assert_eq!(d.source, DescriptionSource::TemplateFallback);
        assert!(d.fallback_reason.is_some());
    }

    #[test]
    fn template_backend_reproduces_template() {
        let a = Action::typing("destination", "Beijing").unwrap();
        let (before, after) = (page("search_filled"), page("search_ready"));
        let d = describe_action(&a, &before, &after, Some("x"), &TemplateBackend, None);
        assert_eq!(d.source, DescriptionSource::Backend);
        assert_eq!(d.text, template_description(&a, &before, &after));
    }

    #[test]
    fn previous_description_threads_into_prompt() {
        let a = Action::click("ok").unwrap();
        let p = description_prompt(&a, &page("a"), &page("b"), Some("Opened the cart."), Some("t/2"));
        assert!(p.contains("PREVIOUS: Opened the cart.\n"));
        assert!(p.contains("STEP_KEY: t/2"));
        let first = description_prompt(&a, &page("a"), &page("b"), None, None);
        assert!(first.contains("PREVIOUS: (none)\n"));
    }

    #[test]
    fn acyclic_examples() {
        assert!(check_acyclic(&[]));
        let next = Action::click("Next").unwrap();
        let other = Action::click("Other").unwrap();
        let steps = vec![
            step(1, "pageA", other.clone()),
            step(2, "pageB", next.clone()),
            step(3, "pageC", other.clone()),
            step(4, "pageD", other),
            step(5, "pageB", next.clone()),
        ];
        assert!(!check_acyclic(&steps));
        assert!(check_acyclic(&[step(1, "pageA", next.clone()), step(2, "pageB", next)]));
    }

    #[test]
    fn trajectory_indices_consecutive() {
        let mut t = Trajectory::new("task", None).unwrap();
        t.push(step(1, "a", Action::click("ok").unwrap())).unwrap();
        assert_eq!(
            t.push(step(3, "a", Action::click("ok").unwrap())),
            Err(TrajectoryError::NonConsecutive { expected: 2, got: 3 })
        );
        assert_eq!(Trajectory::new(" ", None), Err(TrajectoryError::EmptyTask));
    }

    #[test]
    fn key_path_cycles_must_be_marked() {
        let a = Action::click("Next").unwrap();
        let mut kp = KeyPath { task_tag: "t".into(), actions: vec![a.clone(), a], cyclic: false };
        assert!(matches!(kp.validate(), Err(KeyPathError::UnmarkedCycle { .. })));
        kp.cyclic = true;
        assert!(kp.validate().is_ok());
        assert!(!kp.is_acyclic());
        let empty = KeyPath { task_tag: "t".into(), actions: vec![], cyclic: false };
        assert!(matches!(empty.validate(), Err(KeyPathError::Empty(_))));
    }
}
