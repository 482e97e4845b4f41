use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use uspilot_core::embed::sha256_hex;
use uspilot_core::eval::{self, load_samples, DatasetFormat, Sample};
use uspilot_core::executor::{execute, ApiRegistry, WorldState};
use uspilot_core::graph::{DirectedPlan, PlanStep, ToolGraph};
use uspilot_core::planner::PlanRequest;
use uspilot_core::router::{self, load_questions, PromptBank, RouterError, RouterParams, QA_CLASS};
use uspilot_core::train::{self, TrainError};

use crate::backend::{self, open, read};
use crate::config::AppConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    InstructionSet,
    Taskbench,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::InstructionSet => DatasetFormat::InstructionSet,
            FormatArg::Taskbench => DatasetFormat::Taskbench,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum OutputArg {
    #[default]
    Text,
    Json,
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{}: {e}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_dataset(path: &Path, format: FormatArg, graph: &ToolGraph) -> CliResult<Vec<Sample>> {
    load_samples(open(path)?, format.into(), Some(graph)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Embed(_) => CliError::backend(e),
        TrainError::Config(_) => CliError::config(e),
        _ => CliError::data(e),
    }
}

fn router_error(e: RouterError) -> CliError {
    match e {
        RouterError::Embed(_) => CliError::backend(e),
        RouterError::Parse { .. } | RouterError::UnknownClass { .. } | RouterError::Empty => CliError::data(e),
        _ => CliError::config(e),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "instruction-set")]
    pub format: FormatArg,
    /// Validation dataset; enables the best-by-vertex-F1 checkpoint.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn train_cmd(cfg: &AppConfig, args: &TrainArgs) -> CliResult<()> {
    let mut tcfg = cfg.train.clone();
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = args.learning_rate {
        tcfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        tcfg.batch_size = b;
    }
    tcfg.validate().map_err(CliError::config)?;
    if !args.data.exists() {
        return Err(CliError::Config(format!("dataset {} does not exist", args.data.display())));
    }
    let graph = backend::graph(cfg)?;
    let samples = load_dataset(&args.data, args.format, &graph)?;
    let validation = match &args.validation {
        Some(p) => Some(load_dataset(p, args.format, &graph)?),
        None => None,
    };
    let backends = backend::backends(cfg)?;
    let out = train::train(
        &samples,
        &graph,
        backends.embedder.as_ref(),
        Some(backends.chat.as_ref()),
        &tcfg,
        validation.as_deref(),
    )
    .map_err(train_error)?;

    out.last.save(&args.out).map_err(CliError::config)?;
    if let Some(best) = &out.best {
        best.save(&with_suffix(&args.out, ".best")).map_err(CliError::config)?;
    }
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    let mut log = create(&log_path)?;
    for entry in &out.log {
        serde_json::to_writer(&mut log, entry).map_err(CliError::config)?;
        writeln!(log).map_err(io(&log_path))?;
    }
    log.flush().map_err(io(&log_path))?;
    match out.final_loss() {
        Some(loss) => println!("trained {} epochs on {} samples, final loss {loss:.6}", out.log.len(), samples.len()),
        None => println!("0 epochs: wrote the initialization"),
    }
    println!("checkpoint: {}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainRouterArgs {
    /// Question Set (JSON lines with instruction, input, output, class).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out Question Set; without it the last `--heldout-fraction` of
    /// `--data` is held out.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub heldout_fraction: f64,
    /// Number of classes; 2 trains the sigmoid gate.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn train_router_cmd(cfg: &AppConfig, args: &TrainRouterArgs) -> CliResult<()> {
    let mut rcfg = cfg.router_train.clone();
    if let Some(e) = args.epochs {
        rcfg.epochs = e;
    }
    if !(0.0..1.0).contains(&args.heldout_fraction) {
        return Err(CliError::Config("--heldout-fraction must be in [0, 1)".into()));
    }
    let questions = load_questions(open(&args.data)?).map_err(router_error)?;
    let (train_set, heldout) = match &args.heldout {
        Some(p) => (questions, load_questions(open(p)?).map_err(router_error)?),
        None => {
            let cut = questions.len() - (questions.len() as f64 * args.heldout_fraction).round() as usize;
            let (a, b) = questions.split_at(cut);
            (a.to_vec(), b.to_vec())
        }
    };
    let backends = backend::backends(cfg)?;
    let out = router::train_router(&train_set, &heldout, backends.embedder.as_ref(), args.classes, &rcfg)
        .map_err(router_error)?;
    out.params.save(&rcfg, &args.out).map_err(router_error)?;
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    let mut log = create(&log_path)?;
    for (i, loss) in out.losses.iter().enumerate() {
        writeln!(log, "{}", json!({"epoch": i + 1, "loss": loss})).map_err(io(&log_path))?;
    }
    log.flush().map_err(io(&log_path))?;
    println!("trained router on {} questions for {} epochs", train_set.len(), out.losses.len());
    if let Some(acc) = out.heldout_accuracy() {
        println!("held-out accuracy {acc:.4} on {} questions", heldout.len());
    }
    println!("checkpoint: {}", args.out.display());
    Ok(())
}

fn load_router(cfg: &AppConfig) -> CliResult<Option<RouterParams>> {
    match &cfg.router {
        Some(p) => RouterParams::load(p)
            .map(|(params, _)| Some(params))
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display()))),
        None => Ok(None),
    }
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub instruction: String,
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputArg,
}

pub fn route_cmd(cfg: &AppConfig, args: &RouteArgs) -> CliResult<()> {
    let params = load_router(cfg)?.ok_or_else(|| CliError::Config("a router checkpoint is required (--router)".into()))?;
    let backends = backend::backends(cfg)?;
    let route = router::route(&args.instruction, &params, backends.embedder.as_ref()).map_err(router_error)?;
    let banks = PromptBank::uspilot_default();
    let label = banks.label(route.class).unwrap_or("unknown");
    match args.format {
        OutputArg::Json => println!("{}", json!({"class": route.class, "label": label, "scores": route.scores})),
        OutputArg::Text => println!("class {} ({label}) scores {:?}", route.class, route.scores),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub instruction: String,
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputArg,
}

pub fn plan_cmd(cfg: &AppConfig, args: &PlanArgs) -> CliResult<()> {
    let backends = backend::backends(cfg)?;
    if let Some(params) = load_router(cfg)? {
        let route = router::route(&args.instruction, &params, backends.embedder.as_ref()).map_err(router_error)?;
        if route.class == QA_CLASS {
            let prefix = PromptBank::uspilot_default().select_bank(route.class).map_err(router_error)?.to_string();
            let prompt = format!("{prefix}{}", args.instruction);
            if cfg.is_offline() {
                println!("[QA path] {prompt}");
            } else {
                println!("{}", backends.chat.complete(&prompt).map_err(CliError::backend)?);
            }
            return Ok(());
        }
    }
    let planner = backend::planner(cfg, &backends)?;
    let result = planner.plan(&PlanRequest::new(&args.instruction)).map_err(backend::plan_error)?;
    match args.format {
        OutputArg::Json => println!("{}", serde_json::to_string_pretty(&result).map_err(CliError::config)?),
        OutputArg::Text => print!("{}", result.to_text()),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "taskbench")]
    pub format: FormatArg,
    /// Output directory for report.csv and report.json; overrides the
    /// configured report directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Dataset name recorded in the report; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
}

pub fn eval_cmd(cfg: &AppConfig, args: &EvalArgs) -> CliResult<()> {
    if !args.data.exists() {
        return Err(CliError::Config(format!("dataset {} does not exist", args.data.display())));
    }
    let backends = backend::backends(cfg)?;
    let planner = backend::planner(cfg, &backends)?;
    let samples = load_dataset(&args.data, args.format, planner.graph())?;
    let model_path = cfg.model.as_ref().expect("planner requires a model");
    let model_bytes = std::fs::read(model_path).map_err(io(model_path))?;
    let fingerprint = format!(
        "model:{} strategy:{:?} threshold:{}",
        &sha256_hex(&model_bytes)[..16],
        planner.config().strategy,
        planner.config().threshold
    );
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| args.data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let report = eval::evaluate(&name, &fingerprint, &samples, |s: &Sample| {
        planner.plan(&PlanRequest::new(&s.instruction)).map(|r| r.plan())
    })
    .map_err(CliError::data)?;
    let dir = args
        .out_dir
        .clone()
        .or_else(|| cfg.report_dir.clone())
        .unwrap_or_else(|| PathBuf::from("reports"));
    let csv_path = dir.join("report.csv");
    let json_path = dir.join("report.json");
    let mut csv = create(&csv_path)?;
    report.write_csv(&mut csv).map_err(CliError::config)?;
    csv.flush().map_err(io(&csv_path))?;
    let mut js = create(&json_path)?;
    report.write_json(&mut js).map_err(CliError::config)?;
    js.flush().map_err(io(&json_path))?;
    println!(
        "{} samples: vertex F1 {:.4}, edge F1 {:.4}, accuracy {:.4}, {} failures",
        report.samples, report.mean_vertex_f1, report.mean_edge_f1, report.accuracy, report.failures
    );
    println!("reports: {} {}", csv_path.display(), json_path.display());
    Ok(())
}

/// Plan files are either a bare plan or a full planning result; only the
/// steps and edges are read.
#[derive(Debug, Deserialize, Serialize)]
struct PlanFile {
    steps: Vec<PlanStep>,
    #[serde(default)]
    edges: Vec<(String, String)>,
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    /// Plan JSON (`steps` and `edges`; `plan --format json` output works).
    #[arg(long)]
    pub plan: PathBuf,
    /// Initial world state JSON; defaults to the idle robot.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Trace output (JSON lines); stdout when absent.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

pub fn exec_cmd(cfg: &AppConfig, args: &ExecArgs) -> CliResult<()> {
    let registry = backend::registry(cfg)?;
    let file: PlanFile =
        serde_json::from_str(&read(&args.plan)?).map_err(|e| CliError::Data(format!("{}: {e}", args.plan.display())))?;
    let plan = DirectedPlan::new(file.steps, file.edges);
    let initial: WorldState = match &args.state {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
        None => WorldState::default(),
    };
    let trace = execute(&plan, &registry, &initial).map_err(CliError::data)?;
    let lines = trace.to_json_lines();
    match &args.trace {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(lines.as_bytes()).map_err(io(p))?;
            w.flush().map_err(io(p))?;
            println!("terminal {:?}; trace: {}", trace.terminal, p.display());
        }
        None => {
            print!("{lines}");
            eprintln!("terminal {:?}", trace.terminal);
        }
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GraphValidateArgs {
    /// Graph or registry JSON; defaults to the configured graph.
    pub path: Option<PathBuf>,
}

pub fn graph_validate_cmd(cfg: &AppConfig, args: &GraphValidateArgs) -> CliResult<()> {
    let (graph, source) = match &args.path {
        Some(p) => {
            let text = read(p)?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let graph = if value.get("apis").is_some() {
                ApiRegistry::from_json_str(&text)
                    .and_then(|r| r.to_tool_graph().map_err(Into::into))
                    .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
            } else {
                ToolGraph::from_json_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
            };
            (graph, p.display().to_string())
        }
        None => (backend::graph(cfg)?, "configured graph".to_string()),
    };
    println!(
        "{source}: ok, {} vertices, {} undirected edges, {} directed links",
        graph.len(),
        graph.edge_count(),
        graph.directed_link_count()
    );
    Ok(())
}
