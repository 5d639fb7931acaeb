//! Post-prediction gate: is the action executable, and does it keep the path loop-free?

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::history::{Action, Function, LoopKey, Trajectory, PAGE_ELEMENT};
use crate::layout::PageIndex;
use crate::ui::{PageSnapshot, UiNode};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutabilityVerdict {
    pub score: f64,
    pub threshold: f64,
    pub executable: bool,
    pub reason: String,
}

impl ExecutabilityVerdict {
    pub fn new(score: f64, threshold: f64, reason: impl Into<String>) -> Self {
        Self { score, threshold, executable: score >= threshold, reason: reason.into() }
    }
}

/// Scores how likely an action on the resolved nodes is to take effect.
pub trait ExecutabilityClassifier {
    /// `nodes` is non-empty: the node the element names plus the rest of its section.
    fn score(&self, action: &Action, nodes: &[&UiNode]) -> (f64, String);
}

fn affordance(function: Function) -> &'static str {
    match function {
        Function::Click => "clickable",
        Function::Type => "typeable",
        Function::Scroll => "scrollable",
    }
}

/// Exact against the page's affordance flags.
#[derive(Debug, Clone, Copy, Default)]
pub struct FlagClassifier;

impl ExecutabilityClassifier for FlagClassifier {
    fn score(&self, action: &Action, nodes: &[&UiNode]) -> (f64, String) {
        let ok = match action.function() {
            Function::Click => nodes.iter().any(|n| n.clickable),
            Function::Type => nodes.iter().any(|n| n.typeable),
            // Every resolved node sits inside some scrollable container.
            Function::Scroll => true,
        };
        let not = if ok { "" } else { "not " };
        (f64::from(u8::from(ok)), format!("element '{}' is {not}{}", action.element(), affordance(action.function())))
    }
}

/// Logistic model over `[ln(1 + area), is_leaf, ln(1 + text length)]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticClassifier {
    pub weights: [f64; 3],
    pub bias: f64,
}

impl LogisticClassifier {
    pub fn features(node: &UiNode) -> [f64; 3] {
        let area = f64::from(node.width) * f64::from(node.height);
        [
            libm::log1p(area),
            f64::from(u8::from(node.children.is_empty())),
            libm::log1p(node.text.chars().count() as f64),
        ]
    }

    pub fn probability(&self, x: &[f64; 3]) -> f64 {
        let z = self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        1.0 / (1.0 + libm::exp(-z))
    }

    /// Full-batch gradient descent from zero weights; deterministic.
    pub fn train(samples: &[([f64; 3], bool)], epochs: usize, learning_rate: f64) -> Self {
        let mut model = Self { weights: [0.0; 3], bias: 0.0 };
        if samples.is_empty() {
            return model;
        }
        let n = samples.len() as f64;
        for _ in 0..epochs {
            let mut grad = [0.0; 3];
            let mut grad_bias = 0.0;
            for (x, label) in samples {
                let err = model.probability(x) - f64::from(u8::from(*label));
                for (g, v) in grad.iter_mut().zip(x) {
                    *g += err * v;
                }
                grad_bias += err;
            }
            for (w, g) in model.weights.iter_mut().zip(grad) {
                *w -= learning_rate * g / n;
            }
            model.bias -= learning_rate * grad_bias / n;
        }
        model
    }

    /// Trains on every text node of the given pages, labelled by the flag for `function`.
    pub fn fit_pages<'a>(pages: impl IntoIterator<Item = &'a PageSnapshot>, function: Function) -> Self {
        let samples: Vec<([f64; 3], bool)> = pages
            .into_iter()
            .flat_map(|p| p.flatten())
            .filter(|n| !n.text.trim().is_empty())
            .map(|n| {
                let label = match function {
                    Function::Click => n.clickable,
                    Function::Type => n.typeable,
                    Function::Scroll => true,
                };
                (Self::features(n), label)
            })
            .collect();
        Self::train(&samples, 500, 0.5)
    }
}

impl ExecutabilityClassifier for LogisticClassifier {
    fn score(&self, action: &Action, nodes: &[&UiNode]) -> (f64, String) {
        let best = nodes.iter().map(|n| self.probability(&Self::features(n))).fold(0.0, f64::max);
        (best, format!("element '{}' {} score {best:.3}", action.element(), affordance(action.function())))
    }
}

/// Resolves the element on the page and scores it. Unresolvable elements
/// score 0; scrolling the whole page always scores 1.
pub fn score_executability(
    action: &Action,
    page: &PageSnapshot,
    index: &PageIndex,
    classifier: &dyn ExecutabilityClassifier,
    threshold: f64,
) -> ExecutabilityVerdict {
    if action.function() == Function::Scroll && action.element() == PAGE_ELEMENT {
        return ExecutabilityVerdict::new(1.0, threshold, "page scroll");
    }
    let Some(ids) = index.resolve(page, action.element()) else {
        return ExecutabilityVerdict::new(0.0, threshold, "element not on page");
    };
    let nodes: Vec<&UiNode> = ids.iter().filter_map(|id| page.find(id)).collect();
    if nodes.is_empty() {
        return ExecutabilityVerdict::new(0.0, threshold, "element not on page");
    }
    let (score, reason) = classifier.score(action, &nodes);
    ExecutabilityVerdict::new(score.clamp(0.0, 1.0), threshold, reason)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogicCheck {
    Pass,
    /// No acyclic reference path to hold the trajectory to.
    PassVacuous,
    FailLoop,
}

/// Fails when doing `action` on `page_id` would repeat an earlier
/// (page, function, element) triple and the reference path has no loops.
pub fn check_logic(action: &Action, page_id: &str, trajectory: &Trajectory) -> LogicCheck {
    match &trajectory.reference_path {
        Some(path) if !path.cyclic && path.is_acyclic() => {}
        Some(path) => {
            log::info!("loop check skipped: reference path `{}` is cyclic", path.task_tag);
            return LogicCheck::PassVacuous;
        }
        None => {
            log::debug!("loop check skipped: no reference path");
            return LogicCheck::PassVacuous;
        }
    }
    let key = LoopKey::new(page_id, action);
    if trajectory.steps.iter().any(|s| s.loop_key() == key) {
        LogicCheck::FailLoop
    } else {
        LogicCheck::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    FailExecutability,
    FailLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub verdict: Verdict,
    /// Revision note for the next prediction attempt; empty on pass.
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executability: Option<ExecutabilityVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logic: Option<LogicCheck>,
}

impl CalibrationOutcome {
    pub fn pass() -> Self {
        Self { verdict: Verdict::Pass, feedback: String::new(), executability: None, logic: None }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub threshold: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD }
    }
}

pub const LOOP_FEEDBACK: &str = "Action repeats a previous step; the task has no loops; choose a different action.";

pub fn executability_feedback(action: &Action) -> String {
    format!(
        "Element '{}' is not {}; choose a different candidate.",
        action.element(),
        affordance(action.function())
    )
}

/// Executability first, then loop logic.
pub fn calibrate(
    action: &Action,
    page: &PageSnapshot,
    index: &PageIndex,
    trajectory: &Trajectory,
    classifier: &dyn ExecutabilityClassifier,
    config: &CalibrationConfig,
) -> CalibrationOutcome {
    let verdict = score_executability(action, page, index, classifier, config.threshold);
    if !verdict.executable {
        return CalibrationOutcome {
            verdict: Verdict::FailExecutability,
            feedback: executability_feedback(action),
            executability: Some(verdict),
            logic: None,
        };
    }
    let logic = check_logic(action, &page.page_id, trajectory);
    let (v, feedback) = match logic {
        LogicCheck::FailLoop => (Verdict::FailLoop, String::from(LOOP_FEEDBACK)),
        LogicCheck::Pass | LogicCheck::PassVacuous => (Verdict::Pass, String::new()),
    };
    CalibrationOutcome { verdict: v, feedback, executability: Some(verdict), logic: Some(logic) }
}
