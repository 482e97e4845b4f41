//! Builds backends, graphs, registries and planners from an [`AppConfig`].

use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use uspilot_core::checkpoint::Checkpoint;
use uspilot_core::embed::{ChatModel, Embedder, HashingEmbedder, RemoteBackend, ScriptedChat};
use uspilot_core::executor::ApiRegistry;
use uspilot_core::graph::ToolGraph;
use uspilot_core::planner::{ArgumentTable, PlanError, Planner, PlannerConfig};
use uspilot_core::synth;

use crate::config::AppConfig;
use crate::error::{CliError, CliResult};

/// Scan scripts for the shipped registry, answered offline.
pub const SHIPPED_SCRIPTS: &str = include_str!("../../../data/uspilot/scripts.json");

pub struct Backends {
    pub embedder: Arc<dyn Embedder>,
    pub chat: Arc<dyn ChatModel>,
}

pub fn backends(cfg: &AppConfig) -> CliResult<Backends> {
    if cfg.is_offline() {
        let mut chat = ScriptedChat::from_json_str(SHIPPED_SCRIPTS).map_err(CliError::config)?;
        if let Some(path) = &cfg.scripts {
            let extra = ScriptedChat::from_json_str(&read(path)?).map_err(CliError::config)?;
            chat.merge(extra);
        }
        // Unscripted prompts get an empty reply, which the planner treats
        // as a failed response and falls back from.
        Ok(Backends {
            embedder: Arc::new(HashingEmbedder::new(cfg.backend.dim)),
            chat: Arc::new(chat.with_default("")),
        })
    } else {
        let remote = Arc::new(RemoteBackend::new(cfg.backend.clone()).map_err(CliError::config)?);
        Ok(Backends {
            embedder: remote.clone(),
            chat: remote,
        })
    }
}

pub fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn registry(cfg: &AppConfig) -> CliResult<ApiRegistry> {
    match &cfg.registry {
        Some(p) => ApiRegistry::from_json_str(&read(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => Ok(ApiRegistry::uspilot()),
    }
}

pub fn graph(cfg: &AppConfig) -> CliResult<ToolGraph> {
    match &cfg.graph {
        Some(p) => ToolGraph::from_reader(open(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => registry(cfg)?.to_tool_graph().map_err(CliError::data),
    }
}

pub fn arguments(cfg: &AppConfig) -> CliResult<ArgumentTable> {
    match &cfg.arguments {
        Some(p) => ArgumentTable::from_json_str(&read(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => Ok(synth::uspilot_argument_table()),
    }
}

pub fn checkpoint(cfg: &AppConfig) -> CliResult<Checkpoint> {
    let path = cfg
        .model
        .as_ref()
        .ok_or_else(|| CliError::Config("a model checkpoint is required (--model)".into()))?;
    Checkpoint::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn planner(cfg: &AppConfig, backends: &Backends) -> CliResult<Planner> {
    let ckpt = checkpoint(cfg)?;
    let defaults = PlannerConfig::default();
    let planner_cfg = PlannerConfig {
        threshold: cfg.threshold.unwrap_or(defaults.threshold),
        strategy: cfg.strategy.unwrap_or(defaults.strategy),
        aggregation: ckpt.config.aggregation,
        adjacency: ckpt.config.adjacency,
    };
    let planner = Planner::new(
        graph(cfg)?,
        ckpt.params,
        backends.embedder.clone(),
        backends.chat.clone(),
        planner_cfg,
    )
    .map_err(plan_error)?;
    Ok(planner.with_arguments(arguments(cfg)?))
}

pub fn plan_error(e: PlanError) -> CliError {
    match e {
        e if e.is_backend() => CliError::backend(e),
        PlanError::EmptyInstruction => CliError::data(e),
        e => CliError::config(e),
    }
}
