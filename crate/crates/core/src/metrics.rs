//! Step SR, Task SR, element accuracy and operation F1.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::Action;
use crate::text::{multiset_overlap, tokens};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub task_id: String,
    pub step_index: u32,
    pub element_match: bool,
    pub operation_match: bool,
    pub success: bool,
    pub operation_f1: f64,
}

impl StepOutcome {
    pub fn new(task_id: impl Into<String>, step_index: u32, element_match: bool, operation_match: bool, operation_f1: f64) -> Self {
        Self {
            task_id: task_id.into(),
            step_index,
            element_match,
            operation_match,
            success: element_match && operation_match,
            operation_f1,
        }
    }

    /// Scores a predicted action against the gold one. A missing prediction matches nothing.
    pub fn score(task_id: impl Into<String>, step_index: u32, predicted: Option<&Action>, gold: Option<&Action>) -> Self {
        match (predicted, gold) {
            (Some(p), Some(g)) => {
                let element = p.element() == g.element();
                let operation = p.function() == g.function() && p.value() == g.value();
                Self::new(task_id, step_index, element, operation, operation_f1(p, g))
            }
            _ => Self::new(task_id, step_index, false, false, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("metric is undefined on an empty outcome set")]
pub struct EmptyOutcomes;

fn fraction(outcomes: &[StepOutcome], pred: impl Fn(&StepOutcome) -> bool) -> Result<f64, EmptyOutcomes> {
    if outcomes.is_empty() {
        return Err(EmptyOutcomes);
    }
    Ok(outcomes.iter().filter(|o| pred(o)).count() as f64 / outcomes.len() as f64)
}

pub fn step_sr(outcomes: &[StepOutcome]) -> Result<f64, EmptyOutcomes> {
    fraction(outcomes, |o| o.success)
}

pub fn element_accuracy(outcomes: &[StepOutcome]) -> Result<f64, EmptyOutcomes> {
    fraction(outcomes, |o| o.element_match)
}

/// `(task_id, all steps succeeded)` in order of first appearance.
pub fn task_results(outcomes: &[StepOutcome]) -> Vec<(&str, bool)> {
    let mut tasks: Vec<(&str, bool)> = Vec::new();
    for o in outcomes {
        match tasks.iter_mut().find(|(id, _)| *id == o.task_id) {
            Some(entry) => entry.1 &= o.success,
            None => tasks.push((&o.task_id, o.success)),
        }
    }
    tasks
}

pub fn task_sr(outcomes: &[StepOutcome]) -> Result<f64, EmptyOutcomes> {
    let tasks = task_results(outcomes);
    if tasks.is_empty() {
        return Err(EmptyOutcomes);
    }
    Ok(tasks.iter().filter(|(_, ok)| *ok).count() as f64 / tasks.len() as f64)
}

/// Function name plus value words; the element is left out.
pub fn operation_tokens(action: &Action) -> Vec<String> {
    let mut t = alloc::vec![String::from(action.function().as_str())];
    if let Some(v) = action.value() {
        t.extend(tokens(v));
    }
    t
}

/// Token-level F1 over operation tokens.
pub fn operation_f1(predicted: &Action, gold: &Action) -> f64 {
    let (p, g) = (operation_tokens(predicted), operation_tokens(gold));
    let overlap = multiset_overlap(&p, &g);
    if overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (p.len() + g.len()) as f64
}

pub fn mean_operation_f1(outcomes: &[StepOutcome]) -> Result<f64, EmptyOutcomes> {
    if outcomes.is_empty() {
        return Err(EmptyOutcomes);
    }
    Ok(outcomes.iter().map(|o| o.operation_f1).sum::<f64>() / outcomes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_label: String,
    pub step_sr: f64,
    pub task_sr: f64,
    pub element_acc: f64,
    pub operation_f1: f64,
    pub tasks: usize,
    pub steps: usize,
    pub successful_steps: usize,
    pub successful_tasks: usize,
}

impl MetricsReport {
    pub fn from_outcomes(label: impl Into<String>, outcomes: &[StepOutcome]) -> Result<Self, EmptyOutcomes> {
        let tasks = task_results(outcomes);
        Ok(Self {
            config_label: label.into(),
            step_sr: step_sr(outcomes)?,
            task_sr: task_sr(outcomes)?,
            element_acc: element_accuracy(outcomes)?,
            operation_f1: mean_operation_f1(outcomes)?,
            tasks: tasks.len(),
            steps: outcomes.len(),
            successful_steps: outcomes.iter().filter(|o| o.success).count(),
            successful_tasks: tasks.iter().filter(|(_, ok)| *ok).count(),
        })
    }
}
