//! The agent loop: group, digest, plan, predict, calibrate, execute, describe.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{LlmBackend, PLAN_KEY, STEP_KEY};
use crate::calibration::{
    calibrate, CalibrationConfig, CalibrationOutcome, ExecutabilityClassifier, DEFAULT_THRESHOLD,
};
use crate::chain::{align_progress, generate_chain, ChainKind, InstructionChain, DEFAULT_MIN_SCORE};
use crate::history::{
    describe_action, template_description, DescriptionSource, KeyPath, Trajectory, TrajectoryStep,
};
use crate::layout::{extract_text, page_sections, singleton_sections, GroupingParams, PageIndex};
use crate::metrics::{EmptyOutcomes, MetricsReport, StepOutcome};
use crate::prediction::{
    build_candidates, history_top, predict_with, AttemptRecord, PredictionError, PromptBundle,
    DEFAULT_MAX_ATTEMPTS, DEFAULT_MAX_CANDIDATES, DEFAULT_PROMPT_BUDGET,
};
use crate::ui::{redact, PageSnapshot, RedactionRule};
use crate::world::{TaskSpec, WorldSpec};

/// Component toggles and knobs for one pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub grouping: bool,
    pub ic_pad: bool,
    pub calibration: bool,
    pub grouping_params: GroupingParams,
    pub max_candidates: usize,
    pub prompt_budget: usize,
    pub max_attempts: usize,
    /// Defaults to `2 * gold + 3` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_cap: Option<usize>,
    pub min_score: f64,
    pub threshold: f64,
    pub history_top: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            label: None,
            grouping: true,
            ic_pad: true,
            calibration: true,
            grouping_params: GroupingParams::default(),
            max_candidates: DEFAULT_MAX_CANDIDATES,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            step_cap: None,
            min_score: DEFAULT_MIN_SCORE,
            threshold: DEFAULT_THRESHOLD,
            history_top: 10,
        }
    }
}

impl PipelineConfig {
    pub fn with_toggles(grouping: bool, ic_pad: bool, calibration: bool) -> Self {
        Self { grouping, ic_pad, calibration, ..Self::default() }
    }

    /// Explicit label, or `LLMPA` followed by the disabled components.
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let off: Vec<&str> = [
            (self.grouping, "Object Detection"),
            (self.ic_pad, "IC & PAD"),
            (self.calibration, "Calibration"),
        ]
        .into_iter()
        .filter(|(on, _)| !on)
        .map(|(_, name)| name)
        .collect();
        if off.is_empty() {
            String::from("LLMPA")
        } else {
            format!("LLMPA w/o {}", off.join(", "))
        }
    }

    pub fn step_cap_for(&self, task: &TaskSpec) -> usize {
        self.step_cap.unwrap_or(2 * task.gold_actions.len() + 3)
    }
}

/// Shared, read-only inputs to every episode.
#[derive(Clone, Copy)]
pub struct EpisodeEnv<'a> {
    pub world: &'a WorldSpec,
    pub key_paths: &'a [KeyPath],
    pub classifier: &'a (dyn ExecutabilityClassifier + Sync),
    pub redaction: &'a [RedactionRule],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Terminal,
    StepCap,
    PredictionFailed,
    BackendError,
    NoCandidates,
    PromptError,
    InvalidTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub page_before: String,
    pub page_after: String,
    pub no_op: bool,
    pub terminal: bool,
    pub description: String,
    pub description_source: DescriptionSource,
}

/// One line of the trace: a single prediction attempt, plus what happened if it was executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub task_id: String,
    pub config_label: String,
    pub step_index: u32,
    pub attempt: AttemptRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<Execution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub config_label: String,
    pub success: bool,
    pub end: EndReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_detail: Option<String>,
    pub outcomes: Vec<StepOutcome>,
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<InstructionChain>,
    pub trace: Vec<TraceRecord>,
}

impl EpisodeResult {
    pub fn steps_taken(&self) -> usize {
        self.trajectory.steps.len()
    }

    /// Attempts used on each executed step.
    pub fn attempts_per_step(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        for r in &self.trace {
            let i = r.step_index as usize;
            if counts.len() < i {
                counts.resize(i, 0);
            }
            counts[i - 1] += 1;
        }
        counts
    }

    /// Page ids visited, starting page first.
    pub fn page_sequence(&self) -> Vec<&str> {
        let mut pages = Vec::new();
        if let Some(first) = self.trajectory.steps.first() {
            pages.push(first.page_before.page_id.as_str());
        }
        pages.extend(self.trajectory.steps.iter().map(|s| s.page_after.page_id.as_str()));
        pages
    }
}

fn resolve_chain(task: &TaskSpec, backend: &dyn LlmBackend, key_paths: &[KeyPath]) -> Option<InstructionChain> {
    if let Some(steps) = &task.gold_chain {
        match InstructionChain::new(ChainKind::Elaborate, task.description.clone(), steps.clone()) {
            Ok(chain) => return Some(chain),
            Err(e) => log::warn!("task {}: bundled chain rejected: {e}", task.task_id),
        }
    }
    let has_paths = task.key_path_tag.as_ref().is_some_and(|tag| key_paths.iter().any(|k| &k.task_tag == tag));
    let kind = if has_paths { ChainKind::Elaborate } else { ChainKind::Abstract };
    let key = format!("{}/chain", task.task_id);
    match generate_chain(&task.description, kind, backend, Some(&key)) {
        Ok(chain) => Some(chain),
        Err(e) => {
            log::warn!("task {}: running without a plan: {e}", task.task_id);
            None
        }
    }
}

fn view(world: &WorldSpec, page_id: &str, rules: &[RedactionRule], step: u32) -> Option<PageSnapshot> {
    world.page(page_id).map(|p| redact(p, rules).at_step(step))
}

/// Runs one task to a terminal transition, a failure, or the step cap.
pub fn run_episode(env: EpisodeEnv<'_>, task: &TaskSpec, config: &PipelineConfig, backend: &dyn LlmBackend) -> EpisodeResult {
    let label = config.label();
    let reference_path = task
        .key_path_tag
        .as_ref()
        .and_then(|tag| env.key_paths.iter().find(|k| &k.task_tag == tag))
        .cloned();
    let mut result = EpisodeResult {
        task_id: task.task_id.clone(),
        config_label: label.clone(),
        success: false,
        end: EndReason::StepCap,
        end_detail: None,
        outcomes: Vec::new(),
        trajectory: Trajectory { task: task.description.clone(), steps: Vec::new(), reference_path },
        chain: None,
        trace: Vec::new(),
    };
    if task.description.trim().is_empty() {
        result.end = EndReason::InvalidTask;
        result.end_detail = Some(String::from("empty task description"));
        return finish(result, task);
    }
    let chain = if config.ic_pad { resolve_chain(task, backend, env.key_paths) } else { None };
    result.chain = chain.clone();
    let top = task
        .key_path_tag
        .as_ref()
        .map(|tag| history_top(env.key_paths, tag, config.history_top))
        .unwrap_or_default();
    let calibration_config = CalibrationConfig { threshold: config.threshold };

    let mut current = env.world.start_page.clone();
    let mut descriptions: Vec<String> = Vec::new();
    for step in 1..=config.step_cap_for(task) as u32 {
        let Some(page) = view(env.world, &current, env.redaction, step) else {
            result.end = EndReason::InvalidTask;
            result.end_detail = Some(format!("page `{current}` is missing from the world"));
            break;
        };
        let sections = if config.grouping {
            page_sections(&page, &config.grouping_params).sections
        } else {
            singleton_sections(&page)
        };
        let candidates = match build_candidates(&sections, &task.description, &top, config.max_candidates) {
            Ok(c) => c,
            Err(e) => {
                result.end = EndReason::NoCandidates;
                result.end_detail = Some(format!("{e}"));
                break;
            }
        };
        let mut markers = Vec::new();
        let mut chain_remaining = Vec::new();
        if let Some(chain) = &chain {
            let aligned = align_progress(chain, &descriptions, config.min_score);
            markers.push((String::from(PLAN_KEY), format!("{}/plan{}", task.task_id, aligned.matched_prefix_end + 1)));
            chain_remaining = aligned.remaining_steps;
        }
        let step_key = format!("{}/{step}", task.task_id);
        markers.push((String::from(STEP_KEY), step_key.clone()));
        let bundle = PromptBundle {
            task: task.description.clone(),
            chain_remaining,
            history_actions: result.trajectory.actions(),
            history_descriptions: if config.ic_pad { descriptions.clone() } else { Vec::new() },
            page_digest: extract_text(&sections, config.prompt_budget),
            candidates,
            revision_notes: Vec::new(),
            markers,
            budget: config.prompt_budget,
        };
        let index = PageIndex { sections };
        let trajectory = &result.trajectory;
        let prediction = predict_with(&bundle, backend, config.max_attempts, |action| {
            if config.calibration {
                calibrate(action, &page, &index, trajectory, env.classifier, &calibration_config)
            } else {
                CalibrationOutcome::pass()
            }
        });
        let record = |attempt: AttemptRecord| TraceRecord {
            task_id: task.task_id.clone(),
            config_label: label.clone(),
            step_index: step,
            attempt,
            execution: None,
        };
        let prediction = match prediction {
            Ok(p) => p,
            Err(e) => {
                result.end = match e {
                    PredictionError::Backend { .. } => EndReason::BackendError,
                    PredictionError::Prompt(_) => EndReason::PromptError,
                    PredictionError::NoAttempts | PredictionError::Exhausted { .. } => EndReason::PredictionFailed,
                };
                result.end_detail = Some(format!("{e}"));
                result.trace.extend(e.attempts().iter().cloned().map(record));
                break;
            }
        };
        let action = prediction.action;
        let transition = env.world.apply(&current, &action);
        let Some(page_after) = view(env.world, &transition.next_page, env.redaction, step + 1) else {
            result.end = EndReason::InvalidTask;
            result.end_detail = Some(format!("page `{}` is missing from the world", transition.next_page));
            break;
        };
        let (description, source) = if config.ic_pad {
            let d = describe_action(&action, &page, &page_after, descriptions.last().map(String::as_str), backend, Some(&step_key));
            (d.text, d.source)
        } else {
            (template_description(&action, &page, &page_after), DescriptionSource::TemplateFallback)
        };
        let mut attempts = prediction.attempts.into_iter().map(record).collect::<Vec<_>>();
        if let Some(last) = attempts.last_mut() {
            last.execution = Some(Execution {
                page_before: current.clone(),
                page_after: transition.next_page.clone(),
                no_op: transition.no_op,
                terminal: transition.terminal,
                description: description.clone(),
                description_source: source,
            });
        }
        result.trace.extend(attempts);
        result
            .outcomes
            .push(StepOutcome::score(&task.task_id, step, Some(&action), task.gold_actions.get(step as usize - 1)));
        let pushed = result.trajectory.push(TrajectoryStep {
            index: step,
            action,
            page_before: page,
            page_after,
            description: description.clone(),
        });
        debug_assert!(pushed.is_ok());
        descriptions.push(description);
        current = transition.next_page;
        if transition.terminal {
            result.end = EndReason::Terminal;
            break;
        }
    }
    finish(result, task)
}

/// Gold steps never reached count as failed steps.
fn finish(mut result: EpisodeResult, task: &TaskSpec) -> EpisodeResult {
    for i in result.outcomes.len()..task.gold_actions.len() {
        result.outcomes.push(StepOutcome::score(&task.task_id, i as u32 + 1, None, task.gold_actions.get(i)));
    }
    result.success = result.end == EndReason::Terminal && result.outcomes.iter().all(|o| o.success);
    result
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SuiteError {
    #[error("configuration matrix is empty")]
    NoConfigs,
    #[error("no tasks to run")]
    NoTasks,
    #[error(transparent)]
    Metrics(#[from] EmptyOutcomes),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeResult>,
}

pub fn summarize(label: &str, episodes: Vec<EpisodeResult>) -> Result<SuiteRun, SuiteError> {
    let outcomes: Vec<StepOutcome> = episodes.iter().flat_map(|e| e.outcomes.iter().cloned()).collect();
    Ok(SuiteRun { report: MetricsReport::from_outcomes(label, &outcomes)?, episodes })
}

/// Builds a fresh backend for each (config, task) episode.
pub type BackendFactory<'a> = dyn Fn(&PipelineConfig, &TaskSpec) -> Box<dyn LlmBackend> + 'a;

/// One report per configuration over the same tasks, run sequentially.
pub fn run_suite(
    env: EpisodeEnv<'_>,
    tasks: &[TaskSpec],
    configs: &[PipelineConfig],
    backends: &BackendFactory<'_>,
) -> Result<Vec<SuiteRun>, SuiteError> {
    if configs.is_empty() {
        return Err(SuiteError::NoConfigs);
    }
    if tasks.is_empty() {
        return Err(SuiteError::NoTasks);
    }
    configs
        .iter()
        .map(|config| {
            let episodes = tasks
                .iter()
                .map(|task| run_episode(env, task, config, backends(config, task).as_ref()))
                .collect();
            summarize(&config.label(), episodes)
        })
        .collect()
}
