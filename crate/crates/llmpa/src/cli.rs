//! Subcommands: run, eval, inspect-page, validate.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use llmpa_core::episode::SuiteRun;
use llmpa_core::layout::{disambiguate, extract_text, singleton_sections, GroupingParams, Section};
use llmpa_core::prediction::{build_candidates, DEFAULT_MAX_CANDIDATES, DEFAULT_PROMPT_BUDGET};
use llmpa_core::ui::{default_redaction_rules, redact};

use crate::config::{BackendConfig, RunConfig};
use crate::formats::{load_key_paths, load_page, load_world, read_json, FormatError};
use crate::report::{report_table, write_outputs};
use crate::runner::Runner;
use crate::script::load_script;

#[derive(Debug, Parser)]
#[command(name = "llmpa", version, about = "Run and evaluate an LLM-driven app automation agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run tasks with one pipeline configuration.
    Run(RunArgs),
    /// Run every configuration of the matrix over the same tasks.
    Eval(RunArgs),
    /// Show the sections, qualifiers, digest and candidates of a page.
    InspectPage(InspectArgs),
    /// Check fixture files.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Scripted,
    Template,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub key_paths: Option<PathBuf>,
    /// Only run these task ids.
    #[arg(long = "task")]
    pub tasks: Vec<String>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Script file; implies the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub no_grouping: bool,
    #[arg(long)]
    pub no_ic_pad: bool,
    #[arg(long)]
    pub no_calibration: bool,
    #[arg(long)]
    pub max_candidates: Option<usize>,
    #[arg(long)]
    pub prompt_budget: Option<usize>,
    #[arg(long)]
    pub max_attempts: Option<usize>,
    #[arg(long)]
    pub step_cap: Option<usize>,
    #[arg(long)]
    pub chain_cache: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub page: PathBuf,
    /// Skip grouping and list raw node texts.
    #[arg(long)]
    pub no_grouping: bool,
    #[arg(long, default_value_t = DEFAULT_PROMPT_BUDGET)]
    pub budget: usize,
    #[arg(long, default_value_t = 8.0)]
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    World,
    Page,
    Script,
    KeyPaths,
    Config,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Fixture kind; guessed from the content when omitted.
    #[arg(long, value_enum)]
    pub kind: Option<FixtureKind>,
}

/// Config file plus flag overrides; flags win.
pub fn resolve_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = match (&args.config, &args.world) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(world)) => RunConfig::new(world, BackendConfig::Template),
        (None, None) => bail!("pass --config or --world"),
    };
    if let Some(world) = &args.world {
        config.world = world.clone();
    }
    if let Some(p) = &args.key_paths {
        config.key_paths = Some(p.clone());
    }
    if !args.tasks.is_empty() {
        config.tasks = args.tasks.clone();
    }
    match (args.backend, &args.script) {
        (Some(BackendKind::Template), Some(_)) => bail!("--script needs the scripted backend"),
        (Some(BackendKind::Template), None) => config.backend = BackendConfig::Template,
        (_, Some(script)) => config.backend = BackendConfig::Scripted { script: script.clone() },
        (Some(BackendKind::Scripted), None) => {
            if !matches!(config.backend, BackendConfig::Scripted { .. }) {
                bail!("--backend scripted needs --script");
            }
        }
        (None, None) => {}
    }
    let pipelines = std::iter::once(&mut config.pipeline).chain(config.matrix.iter_mut());
    for p in pipelines {
        p.grouping &= !args.no_grouping;
        p.ic_pad &= !args.no_ic_pad;
        p.calibration &= !args.no_calibration;
        if let Some(n) = args.max_candidates {
            p.max_candidates = n;
        }
        if let Some(n) = args.prompt_budget {
            p.prompt_budget = n;
        }
        if let Some(n) = args.max_attempts {
            p.max_attempts = n;
        }
        if args.step_cap.is_some() {
            p.step_cap = args.step_cap;
        }
    }
    if let Some(p) = &args.chain_cache {
        config.chain_cache = Some(p.clone());
    }
    if let Some(p) = &args.output {
        config.output_dir = p.clone();
    }
    if let Some(j) = args.jobs {
        config.jobs = j;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    Ok(config)
}

fn finish(config: &RunConfig, runs: &[SuiteRun], out: &mut dyn Write) -> Result<()> {
    write_outputs(&config.output_dir, runs)?;
    let reports: Vec<_> = runs.iter().map(|r| &r.report).collect();
    out.write_all(report_table(&reports).as_bytes())?;
    for run in runs {
        for e in run.episodes.iter().filter(|e| !e.success) {
            writeln!(out, "{}: task {} failed ({:?})", run.report.config_label, e.task_id, e.end)?;
        }
    }
    writeln!(out, "outputs written to {}", config.output_dir.display())?;
    Ok(())
}

pub fn cmd_run(config: &RunConfig, out: &mut dyn Write) -> Result<Vec<SuiteRun>> {
    let runner = Runner::from_config(config)?;
    let runs = vec![runner.run_config(&config.pipeline)?];
    finish(config, &runs, out)?;
    Ok(runs)
}

pub fn cmd_eval(config: &RunConfig, out: &mut dyn Write) -> Result<Vec<SuiteRun>> {
    if config.matrix.is_empty() {
        bail!("eval needs a non-empty `matrix` of pipeline configurations");
    }
    let runner = Runner::from_config(config)?;
    let runs = runner.run_matrix(&config.matrix)?;
    finish(config, &runs, out)?;
    Ok(runs)
}

fn print_sections(sections: &[Section], out: &mut dyn Write) -> Result<()> {
    for s in sections {
        let q = s.qualifier.as_ref().map(|q| format!("  [{q}]")).unwrap_or_default();
        writeln!(out, "  {}  {:?}  members={:?}{q}", s.section_id, s.display_text(), s.member_texts)?;
    }
    Ok(())
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let page = redact(&load_page(&args.page)?, &default_redaction_rules());
    let params = GroupingParams { gap_threshold: args.gap };
    let (sections, warnings) = if args.no_grouping {
        (singleton_sections(&page), Vec::new())
    } else {
        let d = disambiguate(llmpa_core::layout::group_sections(&page, &params), &page);
        (d.sections, d.warnings)
    };
    writeln!(out, "page {} ({} nodes, {} sections)", page.page_id, page.node_count(), sections.len())?;
    writeln!(out, "sections:")?;
    print_sections(&sections, out)?;
    for w in &warnings {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(out, "digest:")?;
    for line in extract_text(&sections, args.budget).lines() {
        writeln!(out, "  {line}")?;
    }
    writeln!(out, "candidates:")?;
    match build_candidates(&sections, "", &[], DEFAULT_MAX_CANDIDATES) {
        Ok(c) => {
            for (i, text) in c.texts().enumerate() {
                writeln!(out, "  {}. {text}", i + 1)?;
            }
        }
        Err(e) => writeln!(out, "  ({e})")?,
    }
    Ok(())
}

fn guess_kind(path: &Path) -> Result<FixtureKind, FormatError> {
    let value: serde_json::Value = read_json(path)?;
    Ok(match &value {
        serde_json::Value::Array(_) => FixtureKind::KeyPaths,
        v if v.get("world_id").is_some() => FixtureKind::World,
        v if v.get("page_id").is_some() => FixtureKind::Page,
        v if v.get("backend").is_some() => FixtureKind::Config,
        _ => FixtureKind::Script,
    })
}

pub fn validate_file(path: &Path, kind: Option<FixtureKind>) -> Result<String> {
    let kind = match kind {
        Some(k) => k,
        None => guess_kind(path)?,
    };
    let summary = match kind {
        FixtureKind::World => {
            let w = load_world(path)?;
            format!("world {}: {} pages, {} transitions, {} tasks", w.world_id, w.pages.len(), w.transitions.len(), w.tasks.len())
        }
        FixtureKind::Page => {
            let p = load_page(path)?;
            format!("page {}: {} nodes", p.page_id, p.node_count())
        }
        FixtureKind::Script => format!("script: {} entries", load_script(path)?.len()),
        FixtureKind::KeyPaths => format!("key paths: {}", load_key_paths(path)?.len()),
        FixtureKind::Config => {
            let c = RunConfig::load(path)?;
            c.check_paths()?;
            Runner::from_config(&c).with_context(|| format!("{}: referenced fixtures", path.display()))?;
            format!("config: {} matrix rows", c.matrix.len())
        }
    };
    Ok(summary)
}

pub fn cmd_validate(args: &ValidateArgs, out: &mut dyn Write) -> Result<()> {
    let mut failures = 0;
    for path in &args.files {
        match validate_file(path, args.kind) {
            Ok(summary) => writeln!(out, "ok   {}: {summary}", path.display())?,
            Err(e) => {
                failures += 1;
                writeln!(out, "FAIL {:#}", e)?;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} fixture(s) invalid", args.files.len());
    }
    Ok(())
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Run(args) => cmd_run(&resolve_config(args)?, out).map(drop),
        Command::Eval(args) => cmd_eval(&resolve_config(args)?, out).map(drop),
        Command::InspectPage(args) => cmd_inspect(args, out),
        Command::Validate(args) => cmd_validate(args, out),
    }
}
