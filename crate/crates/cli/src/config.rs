//! Layered configuration: flags, then environment variables (both through
//! clap), then the TOML file, then defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;
use uspilot_core::embed::{BackendConfig, BackendKind};
use uspilot_core::planner::OrderStrategy;
use uspilot_core::router::RouterTrainConfig;
use uspilot_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Hashing,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    LlmOrder,
    Dfs,
}

impl From<StrategyArg> for OrderStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::LlmOrder => OrderStrategy::LlmOrder,
            StrategyArg::Dfs => OrderStrategy::Dfs,
        }
    }
}

/// Options shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true, env = "USPILOT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Tool graph JSON (`nodes`/`links`). Defaults to the graph of the registry.
    #[arg(long, global = true, env = "USPILOT_GRAPH")]
    pub graph: Option<PathBuf>,
    /// API registry JSON. Defaults to the built-in USPilot registry.
    #[arg(long, global = true, env = "USPILOT_REGISTRY")]
    pub registry: Option<PathBuf>,
    /// Selection-model checkpoint.
    #[arg(long, global = true, env = "USPILOT_MODEL")]
    pub model: Option<PathBuf>,
    /// Router checkpoint. Without one, every instruction is planned.
    #[arg(long, global = true, env = "USPILOT_ROUTER")]
    pub router: Option<PathBuf>,
    /// Scripted chat responses (JSON array of entries) for the offline backend.
    #[arg(long, global = true, env = "USPILOT_SCRIPTS")]
    pub scripts: Option<PathBuf>,
    /// Argument keyword table JSON.
    #[arg(long, global = true, env = "USPILOT_ARGUMENTS")]
    pub arguments: Option<PathBuf>,
    /// Embedding and chat backend.
    #[arg(long, global = true, value_enum, env = "USPILOT_BACKEND")]
    pub backend: Option<BackendArg>,
    /// Hashing embedder width.
    #[arg(long, global = true, env = "USPILOT_DIM")]
    pub dim: Option<usize>,
    /// Base URL of the OpenAI-compatible server.
    #[arg(long, global = true, env = "USPILOT_ENDPOINT")]
    pub endpoint: Option<String>,
    /// Remote model name.
    #[arg(long, global = true, env = "USPILOT_MODEL_NAME")]
    pub model_name: Option<String>,
    /// Cache directory for remote responses.
    #[arg(long, global = true, env = "USPILOT_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Selection threshold.
    #[arg(long, global = true, env = "USPILOT_THRESHOLD")]
    pub threshold: Option<f64>,
    /// Ordering strategy.
    #[arg(long, global = true, value_enum, env = "USPILOT_STRATEGY")]
    pub strategy: Option<StrategyArg>,
    /// Run seed (default 42).
    #[arg(long, global = true, env = "USPILOT_SEED")]
    pub seed: Option<u64>,
    /// Directory for evaluation reports.
    #[arg(long, global = true, env = "USPILOT_REPORT_DIR")]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub graph: Option<PathBuf>,
    pub registry: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub router: Option<PathBuf>,
    pub scripts: Option<PathBuf>,
    pub arguments: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub strategy: Option<OrderStrategy>,
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub backend: BackendConfig,
    pub train: TrainConfig,
    pub router_train: RouterTrainConfig,
    pub serve: ServeConfig,
}

impl AppConfig {
    /// Parses a TOML file; relative paths resolve against its directory.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: AppConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.graph,
            &mut cfg.registry,
            &mut cfg.model,
            &mut cfg.router,
            &mut cfg.scripts,
            &mut cfg.arguments,
            &mut cfg.cache_dir,
            &mut cfg.report_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = cfg.backend.cache_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn resolve(args: &GlobalArgs) -> CliResult<Self> {
        let mut cfg = match &args.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        let or = |flag: &Option<PathBuf>, file: &mut Option<PathBuf>| {
            if flag.is_some() {
                file.clone_from(flag);
            }
        };
        or(&args.graph, &mut cfg.graph);
        or(&args.registry, &mut cfg.registry);
        or(&args.model, &mut cfg.model);
        or(&args.router, &mut cfg.router);
        or(&args.scripts, &mut cfg.scripts);
        or(&args.arguments, &mut cfg.arguments);
        or(&args.cache_dir, &mut cfg.cache_dir);
        or(&args.report_dir, &mut cfg.report_dir);
        if let Some(b) = args.backend {
            cfg.backend.kind = match b {
                BackendArg::Hashing => BackendKind::Hashing,
                BackendArg::Remote => BackendKind::Remote,
            };
        }
        if let Some(d) = args.dim {
            cfg.backend.dim = d;
        }
        if let Some(e) = &args.endpoint {
            cfg.backend.endpoint.clone_from(e);
        }
        if let Some(m) = &args.model_name {
            cfg.backend.model.clone_from(m);
        }
        if cfg.cache_dir.is_some() {
            cfg.backend.cache_dir.clone_from(&cfg.cache_dir);
        }
        if args.threshold.is_some() {
            cfg.threshold = args.threshold;
        }
        if let Some(s) = args.strategy {
            cfg.strategy = Some(s.into());
        }
        if args.seed.is_some() {
            cfg.seed = args.seed;
        }
        let seed = cfg.seed.unwrap_or(DEFAULT_SEED);
        cfg.seed = Some(seed);
        cfg.train.seed = seed;
        cfg.router_train.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Input paths must exist; thresholds must lie in (0, 1).
    pub fn validate(&self) -> CliResult<()> {
        let inputs = [
            ("graph", &self.graph),
            ("registry", &self.registry),
            ("model", &self.model),
            ("router", &self.router),
            ("scripts", &self.scripts),
            ("arguments", &self.arguments),
        ];
        for (name, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(CliError::Config(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(CliError::Config(format!("threshold must be in (0, 1), got {t}")));
            }
        }
        self.backend.validate().map_err(CliError::config)?;
        self.train.validate().map_err(CliError::config)?;
        Ok(())
    }

    pub fn is_offline(&self) -> bool {
        self.backend.kind == BackendKind::Hashing
    }
}
