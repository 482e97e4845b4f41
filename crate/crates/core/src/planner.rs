//! Instruction to directed plan: decompose, embed, select, induce, order.
//!
//! Ordering either asks a chat model for a total order plus directed edges
//! over the selected vertices, or walks the induced subgraph depth-first
//! from its smallest id. A chat answer that fails validation falls back to
//! the DFS plan and sets `order_fallback`.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{ChatModel, EmbedError, Embedder};
use crate::graph::{AdjacencyMode, DirectedPlan, GraphError, PlanStep, ToolGraph};
use crate::llmeg::{self, Aggregation, ModelError, ModelParams};
use crate::train::GraphInputs;

pub const DECOMPOSE_TEMPLATE: &str = include_str!("../../../data/prompts/decompose.txt");
pub const ORDER_TEMPLATE: &str = include_str!("../../../data/prompts/order.txt");

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("empty instruction")]
    EmptyInstruction,
    #[error("decompose: {0}")]
    Decompose(#[source] EmbedError),
    #[error("embed: {0}")]
    Embed(#[source] EmbedError),
    #[error("select: {0}")]
    Model(#[from] ModelError),
    #[error("subgraph: {0}")]
    Graph(#[from] GraphError),
    #[error("order: {0}")]
    Order(#[source] EmbedError),
}

impl PlanError {
    /// True for failures of an external backend (embedding or chat).
    pub fn is_backend(&self) -> bool {
        matches!(self, Self::Decompose(_) | Self::Embed(_) | Self::Order(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub subtasks: Vec<String>,
    pub raw: String,
    /// The completion did not parse; the instruction is the only subtask.
    pub fallback: bool,
}

pub fn decompose_prompt(instruction: &str) -> String {
    DECOMPOSE_TEMPLATE.replace("{instruction}", instruction.trim())
}

/// Strips a surrounding Markdown code fence, if any.
fn strip_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// A JSON array of non-empty strings, trimmed; `None` otherwise.
pub fn parse_subtasks(text: &str) -> Option<Vec<String>> {
    let body = strip_fence(text);
    let (start, end) = (body.find('[')?, body.rfind(']')?);
    if end < start {
        return None;
    }
    let items: Vec<String> = serde_json::from_str(&body[start..=end]).ok()?;
    let items: Vec<String> = items.into_iter().map(|s| s.trim().to_string()).collect();
    if items.is_empty() || items.iter().any(String::is_empty) {
        return None;
    }
    Some(items)
}

pub fn decompose(instruction: &str, chat: &dyn ChatModel) -> Result<Decomposition, EmbedError> {
    if instruction.trim().is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let raw = chat.complete(&decompose_prompt(instruction))?;
    Ok(match parse_subtasks(&raw) {
        Some(subtasks) => Decomposition {
            subtasks,
            raw,
            fallback: false,
        },
        None => Decomposition {
            subtasks: vec![instruction.trim().to_string()],
            raw,
            fallback: true,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderStrategy {
    #[default]
    LlmOrder,
    Dfs,
}

impl std::str::FromStr for OrderStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm_order" | "llm-order" | "llm" => Ok(Self::LlmOrder),
            "dfs" => Ok(Self::Dfs),
            other => Err(format!("unknown strategy '{other}' (llm_order, dfs)")),
        }
    }
}

pub fn order_prompt(subgraph: &ToolGraph, subtasks: &[String], instruction: &str) -> String {
    let mut tools = String::new();
    for v in subgraph.vertices() {
        tools.push_str(&format!("- {}: {}\n", v.id, v.description));
    }
    let edges: Vec<String> = subgraph.edges().map(|(a, b)| format!("{a} -- {b}")).collect();
    if edges.is_empty() {
        tools.push_str("Dependencies: none");
    } else {
        tools.push_str(&format!("Dependencies: {}", edges.join(", ")));
    }
    let subtasks: Vec<String> = subtasks
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect();
    ORDER_TEMPLATE
        .replace("{tools}", &tools)
        .replace("{subtasks}", &subtasks.join("\n"))
        .replace("{instruction}", instruction.trim())
}

#[derive(Deserialize)]
struct OrderReply {
    order: Vec<String>,
    #[serde(default)]
    edges: Vec<(String, String)>,
}

/// Validates a chat ordering against `subgraph`: the order must be a
/// permutation of its ids and the edges an acyclic relation over them.
pub fn parse_order(text: &str, subgraph: &ToolGraph) -> Result<DirectedPlan, String> {
    let body = strip_fence(text);
    let (start, end) = match (body.find('{'), body.rfind('}')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err("no JSON object in reply".into()),
    };
    let reply: OrderReply = serde_json::from_str(&body[start..=end]).map_err(|e| e.to_string())?;
    if reply.order.len() != subgraph.len() {
        return Err(format!(
            "order has {} ids, subgraph has {}",
            reply.order.len(),
            subgraph.len()
        ));
    }
    for id in &reply.order {
        if !subgraph.contains(id) {
            return Err(format!("unknown id '{id}' in order"));
        }
    }
    let mut edges = Vec::new();
    for (a, b) in reply.edges {
        if !subgraph.contains(&a) || !subgraph.contains(&b) {
            return Err(format!("edge ({a}, {b}) leaves the selected set"));
        }
        if !edges.contains(&(a.clone(), b.clone())) {
            edges.push((a, b));
        }
    }
    let plan = DirectedPlan::new(reply.order.into_iter().map(PlanStep::new).collect(), edges);
    plan.validate_dag().map_err(|e| e.to_string())?;
    Ok(plan)
}

/// DFS from the smallest id; tree edges point parent to child and each
/// component's last visited vertex links to the next component's root.
pub fn dfs_plan(subgraph: &ToolGraph) -> DirectedPlan {
    let Some(start) = subgraph.ids().min() else {
        return DirectedPlan::default();
    };
    let forest = subgraph.dfs_forest(start).expect("start is a vertex");
    let mut edges = forest.tree_edges.clone();
    for &k in forest.component_starts.iter().skip(1) {
        edges.push((forest.order[k - 1].clone(), forest.order[k].clone()));
    }
    DirectedPlan::new(forest.order.into_iter().map(PlanStep::new).collect(), edges)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ordered {
    pub plan: DirectedPlan,
    pub fallback: bool,
    pub raw: Option<String>,
}

pub fn order_subgraph(
    subgraph: &ToolGraph,
    decomposition: &Decomposition,
    instruction: &str,
    chat: &dyn ChatModel,
    strategy: OrderStrategy,
) -> Result<Ordered, EmbedError> {
    if strategy == OrderStrategy::Dfs || subgraph.is_empty() {
        return Ok(Ordered {
            plan: dfs_plan(subgraph),
            fallback: false,
            raw: None,
        });
    }
    let raw = chat.complete(&order_prompt(subgraph, &decomposition.subtasks, instruction))?;
    Ok(match parse_order(&raw, subgraph) {
        Ok(plan) => Ordered {
            plan,
            fallback: false,
            raw: Some(raw),
        },
        Err(reason) => {
            tracing::debug!(%reason, "order reply rejected, using DFS");
            Ordered {
                plan: dfs_plan(subgraph),
                fallback: true,
                raw: Some(raw),
            }
        }
    })
}

/// Keyword rule: when `keyword` occurs in an instruction, `api` gets
/// `argument`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentRule {
    pub keyword: String,
    pub api: String,
    pub argument: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArgumentTable {
    pub rules: Vec<ArgumentRule>,
}

impl ArgumentTable {
    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Argument for `api`: the rule whose keyword appears earliest in the
    /// instruction (case-insensitive); equal positions keep table order.
    pub fn lookup(&self, instruction: &str, api: &str) -> Option<&str> {
        let text = instruction.to_lowercase();
        self.rules
            .iter()
            .filter(|r| r.api == api && !r.keyword.is_empty())
            .filter_map(|r| text.find(&r.keyword.to_lowercase()).map(|pos| (pos, r)))
            .min_by_key(|(pos, _)| *pos)
            .map(|(_, r)| r.argument.as_str())
    }
}

/// Fills step arguments from `table`; unmatched steps keep no argument.
pub fn extract_arguments(plan: &DirectedPlan, instruction: &str, table: &ArgumentTable) -> DirectedPlan {
    let steps = plan
        .steps
        .iter()
        .map(|s| match table.lookup(instruction, &s.id) {
            Some(arg) => PlanStep::with_argument(s.id.clone(), arg),
            None => PlanStep::new(s.id.clone()),
        })
        .collect();
    DirectedPlan::new(steps, plan.edges.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub threshold: f64,
    pub strategy: OrderStrategy,
    pub aggregation: Aggregation,
    pub adjacency: AdjacencyMode,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            strategy: OrderStrategy::LlmOrder,
            aggregation: Aggregation::Max,
            adjacency: AdjacencyMode::SymNormalized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<OrderStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl PlanRequest {
    pub fn new(instruction: impl Into<String>) -> Self {
        Self {
            instruction: instruction.into(),
            strategy: None,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexProb {
    pub id: String,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFlags {
    pub argmax_fallback: bool,
    pub order_fallback: bool,
    pub decompose_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub instruction: String,
    pub strategy: OrderStrategy,
    pub steps: Vec<PlanStep>,
    pub edges: Vec<(String, String)>,
    /// Aggregated selection probability per graph vertex, in graph order.
    pub probs: Vec<VertexProb>,
    pub subtasks: Vec<String>,
    pub flags: PlanFlags,
}

impl PlanResult {
    pub fn plan(&self) -> DirectedPlan {
        DirectedPlan::new(self.steps.clone(), self.edges.clone())
    }

    /// One line per step in execution order, e.g. `1. detect_organ(liver)`.
    pub fn to_text(&self) -> String {
        let plan = self.plan();
        let order = plan.topological_order().unwrap_or_else(|_| (0..plan.steps.len()).collect());
        let mut out = String::new();
        for (n, &i) in order.iter().enumerate() {
            let s = &plan.steps[i];
            out.push_str(&format!("{}. {}({})\n", n + 1, s.id, s.argument.as_deref().unwrap_or("")));
        }
        out
    }
}

/// A trained selection model bound to its graph and backends. Graph
/// embeddings are computed once at construction.
pub struct Planner {
    graph: ToolGraph,
    params: ModelParams,
    e_g: Array2<f64>,
    embedder: Arc<dyn Embedder>,
    decomposer: Arc<dyn ChatModel>,
    orderer: Arc<dyn ChatModel>,
    arguments: ArgumentTable,
    config: PlannerConfig,
}

impl Planner {
    pub fn new(
        graph: ToolGraph,
        params: ModelParams,
        embedder: Arc<dyn Embedder>,
        chat: Arc<dyn ChatModel>,
        config: PlannerConfig,
    ) -> Result<Self, PlanError> {
        let inputs = GraphInputs::build(&graph, embedder.as_ref(), config.adjacency).map_err(PlanError::Embed)?;
        let e_g = llmeg::gcn_forward(&params, &inputs.adj, &inputs.feats)?;
        match embedder.dim() {
            Some(dim) if dim != params.dims.word => {
                return Err(ModelError::Dimension {
                    what: "word embedding width",
                    expected: params.dims.word,
                    actual: dim,
                }
                .into())
            }
            _ => {}
        }
        Ok(Self {
            graph,
            params,
            e_g,
            embedder,
            decomposer: chat.clone(),
            orderer: chat,
            arguments: ArgumentTable::default(),
            config,
        })
    }

    /// Uses a separate chat model for ordering.
    pub fn with_orderer(mut self, orderer: Arc<dyn ChatModel>) -> Self {
        self.orderer = orderer;
        self
    }

    pub fn with_arguments(mut self, table: ArgumentTable) -> Self {
        self.arguments = table;
        self
    }

    pub fn graph(&self) -> &ToolGraph {
        &self.graph
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.config
    }

    pub fn plan(&self, request: &PlanRequest) -> Result<PlanResult, PlanError> {
        let instruction = request.instruction.trim();
        if instruction.is_empty() {
            return Err(PlanError::EmptyInstruction);
        }
        let strategy = request.strategy.unwrap_or(self.config.strategy);
        let threshold = request.threshold.unwrap_or(self.config.threshold);

        let decomposition = decompose(instruction, self.decomposer.as_ref()).map_err(PlanError::Decompose)?;
        let subtask_embs = self
            .embedder
            .embed(&decomposition.subtasks)
            .map_err(PlanError::Embed)?;
        let out = llmeg::score_subtasks(&self.params, &self.e_g, &subtask_embs, self.config.aggregation)?;
        let (selected, argmax_fallback) = llmeg::select(&out, &self.graph, threshold);
        let subgraph = self.graph.induced_subgraph(&selected)?;
        let ordered = order_subgraph(
            &subgraph,
            &decomposition,
            instruction,
            self.orderer.as_ref(),
            strategy,
        )
        .map_err(PlanError::Order)?;
        let plan = extract_arguments(&ordered.plan, instruction, &self.arguments);
        plan.validate_dag()?;

        Ok(PlanResult {
            instruction: instruction.to_string(),
            strategy,
            steps: plan.steps,
            edges: plan.edges,
            probs: self
                .graph
                .vertices()
                .iter()
                .zip(out.probs.iter())
                .map(|(v, &prob)| VertexProb {
                    id: v.id.clone(),
                    prob,
                })
                .collect(),
            subtasks: decomposition.subtasks,
            flags: PlanFlags {
                argmax_fallback,
                order_fallback: ordered.fallback,
                decompose_fallback: decomposition.fallback,
            },
        })
    }
}
