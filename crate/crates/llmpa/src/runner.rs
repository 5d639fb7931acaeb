//! Loads a run configuration's fixtures and runs episodes, optionally in parallel.

use std::sync::Arc;
use std::thread;

use anyhow::{bail, Context, Result};
use llmpa_core::backend::{BackendError, BackendRequest, LlmBackend, TemplateBackend};
use llmpa_core::calibration::{ExecutabilityClassifier, FlagClassifier, LogisticClassifier};
use llmpa_core::episode::{run_episode, summarize, EpisodeEnv, EpisodeResult, PipelineConfig, SuiteRun};
use llmpa_core::history::{Function, KeyPath};
use llmpa_core::ui::{default_redaction_rules, RedactionRule};
use llmpa_core::world::{TaskSpec, WorldSpec};

use crate::config::{BackendConfig, ClassifierKind, RunConfig};
use crate::formats::{load_key_paths, load_world, ChainCache};
use crate::http::HttpBackend;
use crate::script::{load_script, ScriptTable, ScriptedBackend};

enum BackendSource {
    Scripted(ScriptTable),
    Template,
    Http(Arc<HttpBackend>),
}

struct Shared(Arc<HttpBackend>);

impl LlmBackend for Shared {
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        self.0.complete(request)
    }
}

pub struct Runner {
    pub world: WorldSpec,
    pub key_paths: Vec<KeyPath>,
    pub tasks: Vec<TaskSpec>,
    classifier: Box<dyn ExecutabilityClassifier + Sync>,
    redaction: Vec<RedactionRule>,
    backend: BackendSource,
    chain_cache: Option<ChainCache>,
    jobs: usize,
}

impl Runner {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        config.check_paths()?;
        let world = load_world(&config.world)?;
        let key_paths = match &config.key_paths {
            Some(p) => load_key_paths(p)?,
            None => Vec::new(),
        };
        let tasks: Vec<TaskSpec> = if config.tasks.is_empty() {
            world.tasks.clone()
        } else {
            config
                .tasks
                .iter()
                .map(|id| {
                    world
                        .task(id)
                        .cloned()
                        .with_context(|| format!("{}: no task `{id}`", config.world.display()))
                })
                .collect::<Result<_>>()?
        };
        if tasks.is_empty() {
            bail!("{}: world has no tasks to run", config.world.display());
        }
        let backend = match &config.backend {
            BackendConfig::Scripted { script } => BackendSource::Scripted(load_script(script)?),
            BackendConfig::Template => BackendSource::Template,
            BackendConfig::Http(http) => BackendSource::Http(Arc::new(HttpBackend::new(http.clone())?)),
        };
        let classifier: Box<dyn ExecutabilityClassifier + Sync> = match config.classifier {
            ClassifierKind::Flag => Box::new(FlagClassifier),
            ClassifierKind::Logistic => Box::new(LogisticClassifier::fit_pages(world.pages.values(), Function::Click)),
        };
        Ok(Self {
            world,
            key_paths,
            tasks,
            classifier,
            redaction: if config.redact { default_redaction_rules() } else { Vec::new() },
            backend,
            chain_cache: config.chain_cache.as_ref().map(ChainCache::new),
            jobs: config.jobs.max(1),
        })
    }

    /// A fresh backend per episode, so scripted cursors never leak between episodes.
    pub fn backend(&self) -> Box<dyn LlmBackend> {
        match &self.backend {
            BackendSource::Scripted(table) => Box::new(ScriptedBackend::new(table.clone())),
            BackendSource::Template => Box::new(TemplateBackend),
            BackendSource::Http(h) => Box::new(Shared(Arc::clone(h))),
        }
    }

    fn env(&self) -> EpisodeEnv<'_> {
        EpisodeEnv {
            world: &self.world,
            key_paths: &self.key_paths,
            classifier: self.classifier.as_ref(),
            redaction: &self.redaction,
        }
    }

    /// Tasks with cached chains filled in for those that lack a bundled one.
    fn prepared_tasks(&self) -> Result<Vec<TaskSpec>> {
        let Some(cache) = &self.chain_cache else {
            return Ok(self.tasks.clone());
        };
        let mut tasks = self.tasks.clone();
        for task in tasks.iter_mut().filter(|t| t.gold_chain.is_none()) {
            if let Some(chain) = cache.load(&task.task_id)? {
                task.gold_chain = Some(chain.steps);
            }
        }
        Ok(tasks)
    }

    fn store_chains(&self, tasks: &[TaskSpec], episodes: &[EpisodeResult]) -> Result<()> {
        let Some(cache) = &self.chain_cache else {
            return Ok(());
        };
        for (task, episode) in tasks.iter().zip(episodes) {
            if let (None, Some(chain)) = (&task.gold_chain, &episode.chain) {
                cache.store(&task.task_id, chain)?;
            }
        }
        Ok(())
    }

    pub fn run_config(&self, config: &PipelineConfig) -> Result<SuiteRun> {
        let tasks = self.prepared_tasks()?;
        let episodes = self.run_episodes(&tasks, config);
        self.store_chains(&tasks, &episodes)?;
        Ok(summarize(&config.label(), episodes)?)
    }

    pub fn run_matrix(&self, configs: &[PipelineConfig]) -> Result<Vec<SuiteRun>> {
        if configs.is_empty() {
            bail!("configuration matrix is empty");
        }
        configs.iter().map(|c| self.run_config(c)).collect()
    }

    /// Episodes in task order regardless of `jobs`.
    fn run_episodes(&self, tasks: &[TaskSpec], config: &PipelineConfig) -> Vec<EpisodeResult> {
        let run = |task: &TaskSpec| run_episode(self.env(), task, config, self.backend().as_ref());
        if self.jobs == 1 || tasks.len() == 1 {
            return tasks.iter().map(run).collect();
        }
        let chunk = tasks.len().div_ceil(self.jobs);
        thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        })
    }
}
