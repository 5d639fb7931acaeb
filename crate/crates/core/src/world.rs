//! Page-level app simulator: pages, a transition table, and tasks with gold actions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{Action, Function, PAGE_ELEMENT};
use crate::layout::{GroupingParams, PageIndex};
use crate::ui::{PageError, PageSnapshot};

/// Value pattern matching any typed value.
pub const ANY_VALUE: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub function: Function,
    pub element: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl RuleMatch {
    pub fn matches(&self, action: &Action) -> bool {
        if self.function != action.function() || self.element.trim() != action.element().trim() {
            return false;
        }
        match self.value.as_deref() {
            None | Some(ANY_VALUE) => true,
            Some(pattern) => action.value() == Some(pattern),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRule {
    pub from: String,
    #[serde(rename = "match")]
    pub on: RuleMatch,
    pub to: String,
    #[serde(default)]
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub description: String,
    pub gold_actions: Vec<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_chain: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_path_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("start page `{0}` does not exist")]
    MissingStartPage(String),
    #[error("page stored under `{key}` has page_id `{page_id}`")]
    PageIdMismatch { key: String, page_id: String },
    #[error("page `{page}`: {source}")]
    Page { page: String, source: PageError },
    #[error("transition {rule} refers to missing page `{page}`")]
    DanglingPage { rule: usize, page: String },
    #[error("transition {rule} duplicates transition {first}")]
    DuplicateRule { rule: usize, first: usize },
    #[error("transition {rule}: element `{element}` is not on page `{page}`")]
    UnresolvedRuleElement { rule: usize, element: String, page: String },
    #[error("task id `{0}` is used twice")]
    DuplicateTask(String),
    #[error("task `{task_id}`: {reason}")]
    Task { task_id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_page: String,
    pub terminal: bool,
    /// No rule matched; the page did not change.
    pub no_op: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub world_id: String,
    pub start_page: String,
    pub pages: BTreeMap<String, PageSnapshot>,
    pub transitions: Vec<TransitionRule>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
}

fn element_on_page(page: &PageSnapshot, function: Function, element: &str) -> bool {
    if function == Function::Scroll && element == PAGE_ELEMENT {
        return true;
    }
    PageIndex::build(page, &GroupingParams::default()).resolve(page, element).is_some()
}

impl WorldSpec {
    pub fn page(&self, page_id: &str) -> Option<&PageSnapshot> {
        self.pages.get(page_id)
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Checks every structural invariant, then replays each task's gold actions.
    pub fn validate(&self) -> Result<(), WorldError> {
        for (key, page) in &self.pages {
            if *key != page.page_id {
                return Err(WorldError::PageIdMismatch { key: key.clone(), page_id: page.page_id.clone() });
            }
            page.validate().map_err(|source| WorldError::Page { page: key.clone(), source })?;
        }
        if !self.pages.contains_key(&self.start_page) {
            return Err(WorldError::MissingStartPage(self.start_page.clone()));
        }
        let mut keys = BTreeMap::new();
        for (i, rule) in self.transitions.iter().enumerate() {
            for page in [&rule.from, &rule.to] {
                if !self.pages.contains_key(page) {
                    return Err(WorldError::DanglingPage { rule: i, page: page.clone() });
                }
            }
            let key = (&rule.from, rule.on.function, rule.on.element.trim(), rule.on.value.as_deref());
            if let Some(&first) = keys.get(&key) {
                return Err(WorldError::DuplicateRule { rule: i, first });
            }
            keys.insert(key, i);
            if !element_on_page(&self.pages[&rule.from], rule.on.function, rule.on.element.trim()) {
                return Err(WorldError::UnresolvedRuleElement {
                    rule: i,
                    element: rule.on.element.clone(),
                    page: rule.from.clone(),
                });
            }
        }
        let mut ids = BTreeSet::new();
        for task in &self.tasks {
            if !ids.insert(task.task_id.as_str()) {
                return Err(WorldError::DuplicateTask(task.task_id.clone()));
            }
            self.replay_gold(task)?;
        }
        Ok(())
    }

    /// Page ids visited by the gold actions, starting with the start page.
    pub fn replay_gold(&self, task: &TaskSpec) -> Result<Vec<String>, WorldError> {
        let fail = |reason: String| WorldError::Task { task_id: task.task_id.clone(), reason };
        if task.description.trim().is_empty() {
            return Err(fail(String::from("description is empty")));
        }
        if task.gold_actions.is_empty() {
            return Err(fail(String::from("has no gold actions")));
        }
        let mut current = self.start_page.clone();
        let mut visited = alloc::vec![current.clone()];
        for (i, action) in task.gold_actions.iter().enumerate() {
            let n = i + 1;
            if !element_on_page(&self.pages[&current], action.function(), action.element()) {
                return Err(fail(format!("gold action {n} `{action}` names an element not on page `{current}`")));
            }
            let step = self.apply(&current, action);
            if step.no_op {
                return Err(fail(format!("gold action {n} `{action}` matches no transition on page `{current}`")));
            }
            let last = n == task.gold_actions.len();
            if step.terminal != last {
                let reason = if last {
                    format!("gold replay ends on `{}` without reaching a terminal transition", step.next_page)
                } else {
                    format!("gold action {n} `{action}` is terminal but more actions follow")
                };
                return Err(fail(reason));
            }
            current = step.next_page;
            visited.push(current.clone());
        }
        Ok(visited)
    }

    /// First matching rule wins; no match leaves the page unchanged.
    pub fn apply(&self, current: &str, action: &Action) -> StepResult {
        match self.transitions.iter().find(|r| r.from == current && r.on.matches(action)) {
            Some(rule) => StepResult { next_page: rule.to.clone(), terminal: rule.terminal, no_op: false },
            None => StepResult { next_page: String::from(current), terminal: false, no_op: true },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ui::UiNode;
    use alloc::vec;

    fn page(id: &str, nodes: Vec<UiNode>) -> PageSnapshot {
        PageSnapshot::new(id, nodes).unwrap()
    }

    fn rule(from: &str, on: RuleMatch, to: &str, terminal: bool) -> TransitionRule {
        TransitionRule { from: from.into(), on, to: to.into(), terminal }
    }

    fn click(e: &str) -> RuleMatch {
        RuleMatch { function: Function::Click, element: e.into(), value: None }
    }

    fn minimal() -> WorldSpec {
        let mut pages = BTreeMap::new();
        pages.insert("home".into(), page("home", vec![UiNode::new("t", "Transport", 0, 0, 80, 20).clickable()]));
        pages.insert("search".into(), page("search", vec![UiNode::new("d", "departure city", 0, 0, 80, 20).typeable()]));
        pages.insert("done".into(), page("done", vec![]));
        WorldSpec {
            world_id: "w".into(),
            start_page: "home".into(),
            pages,
            transitions: vec![
                rule("home", click("Transport"), "search", false),
                rule(
                    "search",
                    RuleMatch { function: Function::Type, element: "departure city".into(), value: Some("*".into()) },
                    "done",
                    true,
                ),
            ],
            tasks: vec![TaskSpec {
                task_id: "t1".into(),
                description: "go".into(),
                gold_actions: vec![Action::click("Transport").unwrap(), Action::typing("departure city", "Hangzhou").unwrap()],
                gold_chain: None,
                key_path_tag: None,
            }],
        }
    }

    #[test]
    fn minimal_world_validates() {
        let w = minimal();
        w.validate().unwrap();
        assert_eq!(w.replay_gold(&w.tasks[0]).unwrap(), ["home", "search", "done"]);
    }

    #[test]
    fn apply_examples() {
        let w = minimal();
        let r = w.apply("home", &Action::click("Transport").unwrap());
        assert_eq!((r.next_page.as_str(), r.terminal, r.no_op), ("search", false, false));
        let r = w.apply("search", &Action::typing("departure city", "Hangzhou").unwrap());
        assert_eq!((r.next_page.as_str(), r.terminal), ("done", true));
        let r = w.apply("home", &Action::click("Nothing").unwrap());
        assert_eq!((r.next_page.as_str(), r.terminal, r.no_op), ("home", false, true));
    }

    #[test]
    fn exact_value_pattern() {
        let m = RuleMatch { function: Function::Type, element: "city".into(), value: Some("Beijing".into()) };
        assert!(m.matches(&Action::typing("city", "Beijing").unwrap()));
        assert!(!m.matches(&Action::typing("city", "Hangzhou").unwrap()));
    }

    #[test]
    fn missing_gold_element_names_task() {
        let mut w = minimal();
        w.tasks[0].gold_actions[0] = Action::click("Flights").unwrap();
        match w.validate() {
            Err(WorldError::Task { task_id, reason }) => {
                assert_eq!(task_id, "t1");
                assert!(reason.contains("Flights"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn structural_errors() {
        let mut w = minimal();
        w.start_page = "nowhere".into();
        assert_eq!(w.validate(), Err(WorldError::MissingStartPage("nowhere".into())));

        let mut w = minimal();
        w.transitions.push(rule("home", click("Transport"), "ghost", false));
        assert!(matches!(w.validate(), Err(WorldError::DanglingPage { rule: 2, .. })));

        let mut w = minimal();
        w.transitions.push(rule("home", click("Transport"), "done", false));
        assert_eq!(w.validate(), Err(WorldError::DuplicateRule { rule: 2, first: 0 }));

        let mut w = minimal();
        w.transitions.push(rule("home", click("Flights"), "done", false));
        assert!(matches!(w.validate(), Err(WorldError::UnresolvedRuleElement { rule: 2, .. })));

        let mut w = minimal();
        w.tasks[0].gold_actions.pop();
        assert!(matches!(w.validate(), Err(WorldError::Task { .. })));
    }
}
