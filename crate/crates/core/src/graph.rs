//! Tool graphs: API vertices with description text, undirected dependency
//! edges, adjacency construction, subgraph induction, DFS ordering, and the
//! directed plans produced from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed tool graph JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error reading tool graph: {0}")]
    Io(#[from] std::io::Error),
    #[error("vertex id must be a non-empty string")]
    EmptyId,
    #[error("vertex '{0}' has an empty description")]
    EmptyDescription(String),
    #[error("duplicate vertex id '{0}'")]
    DuplicateId(String),
    #[error("edge references unknown vertex '{0}'")]
    DanglingEdge(String),
    #[error("unknown vertex id '{0}'")]
    UnknownVertex(String),
    #[error("plan contains a cycle through [{}]", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("plan edge references '{0}' which is not a plan step")]
    DanglingPlanEdge(String),
    #[error("plan step '{0}' appears more than once")]
    DuplicateStep(String),
}

/// One API of the tool graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: String,
    pub description: String,
}

/// The fixed tool graph: vertices in a stable order plus undirected
/// dependency edges stored as `(i, j)` position pairs with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolGraph {
    vertices: Vec<Vertex>,
    edges: BTreeSet<(usize, usize)>,
    index: HashMap<String, usize>,
    /// Links as given in the source, deduplicated, kept for serialization.
    directed_links: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyMode {
    Raw,
    #[default]
    SymNormalized,
}

/// Dense `N x N` adjacency matrix in one of the two supported modes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    pub data: Array2<f64>,
    pub mode: AdjacencyMode,
}

#[derive(Deserialize)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    links: Vec<LinkRecord>,
}

#[derive(Deserialize)]
struct NodeRecord {
    id: String,
    #[serde(alias = "description")]
    desc: String,
}

#[derive(Deserialize)]
struct LinkRecord {
    source: String,
    target: String,
}

#[derive(Serialize)]
struct GraphFileOut<'a> {
    nodes: Vec<NodeOut<'a>>,
    links: Vec<LinkOut<'a>>,
}

#[derive(Serialize)]
struct NodeOut<'a> {
    id: &'a str,
    desc: &'a str,
}

#[derive(Serialize)]
struct LinkOut<'a> {
    source: &'a str,
    target: &'a str,
}

impl ToolGraph {
    /// Builds a graph from vertices and (possibly directed, possibly
    /// duplicated) links. Links are symmetrized; self-links are dropped.
    pub fn new<I, A, B>(vertices: Vec<Vertex>, links: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut index = HashMap::with_capacity(vertices.len());
        for (i, v) in vertices.iter().enumerate() {
            if v.id.is_empty() {
                return Err(GraphError::EmptyId);
            }
            if v.description.trim().is_empty() {
                return Err(GraphError::EmptyDescription(v.id.clone()));
            }
            if index.insert(v.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateId(v.id.clone()));
            }
        }
        let mut edges = BTreeSet::new();
        let mut directed = BTreeSet::new();
        for (a, b) in links {
            let (a, b) = (a.as_ref(), b.as_ref());
            let i = *index
                .get(a)
                .ok_or_else(|| GraphError::DanglingEdge(a.to_string()))?;
            let j = *index
                .get(b)
                .ok_or_else(|| GraphError::DanglingEdge(b.to_string()))?;
            if i == j {
                continue;
            }
            directed.insert((i, j));
            edges.insert((i.min(j), i.max(j)));
        }
        Ok(Self {
            vertices,
            edges,
            index,
            directed_links: directed,
        })
    }

    /// Parses the `{"nodes": [...], "links": [...]}` tool-graph format.
    pub fn from_reader<R: Read>(source: R) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_reader(source)?;
        Self::from_file(file)
    }

    pub fn from_json_str(source: &str) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(source)?;
        Self::from_file(file)
    }

    fn from_file(file: GraphFile) -> Result<Self, GraphError> {
        let vertices = file
            .nodes
            .into_iter()
            .map(|n| Vertex {
                id: n.id,
                description: n.desc,
            })
            .collect();
        Self::new(vertices, file.links.into_iter().map(|l| (l.source, l.target)))
    }

    /// Serializes back to the tool-graph JSON format, writing the source
    /// links in their original orientation.
    pub fn to_json(&self) -> String {
        let out = GraphFileOut {
            nodes: self
                .vertices
                .iter()
                .map(|v| NodeOut {
                    id: &v.id,
                    desc: &v.description,
                })
                .collect(),
            links: self
                .directed_links
                .iter()
                .map(|&(i, j)| LinkOut {
                    source: &self.vertices[i].id,
                    target: &self.vertices[j].id,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&out).expect("graph serialization cannot fail")
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Number of distinct directed links in the source, before
    /// symmetrization. This is the figure graph files usually advertise.
    pub fn directed_link_count(&self) -> usize {
        self.directed_links.len()
    }

    /// Undirected edges as id pairs, first id being the earlier vertex.
    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.edges
            .iter()
            .map(|&(i, j)| (self.vertices[i].id.as_str(), self.vertices[j].id.as_str()))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        match (self.position(a), self.position(b)) {
            (Some(i), Some(j)) => self.edges.contains(&(i.min(j), i.max(j))),
            _ => false,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.vertices.iter().map(|v| v.id.as_str())
    }

    pub fn descriptions(&self) -> Vec<String> {
        self.vertices.iter().map(|v| v.description.clone()).collect()
    }

    /// Neighbor ids of every vertex, each list sorted lexicographically.
    fn sorted_neighbors(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> =
            self.vertices.iter().map(|v| (v.id.as_str(), Vec::new())).collect();
        for (a, b) in self.edges() {
            map.get_mut(a).unwrap().push(b);
            map.get_mut(b).unwrap().push(a);
        }
        for list in map.values_mut() {
            list.sort_unstable();
        }
        map
    }

    pub fn adjacency(&self, mode: AdjacencyMode) -> AdjacencyMatrix {
        let n = self.len();
        let mut raw = Array2::<f64>::zeros((n, n));
        for &(i, j) in &self.edges {
            raw[[i, j]] = 1.0;
            raw[[j, i]] = 1.0;
        }
        let data = match mode {
            AdjacencyMode::Raw => raw,
            AdjacencyMode::SymNormalized => {
                // D^{-1/2} (A + I) D^{-1/2}, D the degree matrix of A + I.
                let degree: Vec<f64> = (0..n).map(|i| raw.row(i).sum() + 1.0).collect();
                let mut norm = raw;
                for i in 0..n {
                    norm[[i, i]] = 1.0;
                }
                for ((i, j), value) in norm.indexed_iter_mut() {
                    if *value != 0.0 {
                        *value /= (degree[i] * degree[j]).sqrt();
                    }
                }
                norm
            }
        };
        AdjacencyMatrix { data, mode }
    }

    /// Restricts the graph to `selected`, keeping the original vertex order
    /// and exactly the edges whose endpoints are both selected.
    pub fn induced_subgraph<S: AsRef<str>>(&self, selected: &[S]) -> Result<ToolGraph, GraphError> {
        let mut keep = BTreeSet::new();
        for id in selected {
            let id = id.as_ref();
            let pos = self
                .position(id)
                .ok_or_else(|| GraphError::UnknownVertex(id.to_string()))?;
            keep.insert(pos);
        }
        let vertices: Vec<Vertex> = keep.iter().map(|&i| self.vertices[i].clone()).collect();
        let links = self
            .directed_links
            .iter()
            .filter(|(i, j)| keep.contains(i) && keep.contains(j))
            .map(|&(i, j)| (self.vertices[i].id.as_str(), self.vertices[j].id.as_str()));
        ToolGraph::new(vertices, links)
    }

    /// Preorder DFS from `start`, neighbors visited in ascending id order.
    /// Components not reachable from `start` are appended, each started at
    /// its smallest id.
    pub fn dfs_order(&self, start: &str) -> Result<Vec<String>, GraphError> {
        Ok(self.dfs_forest(start)?.order)
    }

    /// DFS forest rooted at `start` (then at the smallest unvisited id of
    /// each remaining component), recording tree edges and component roots.
    pub fn dfs_forest(&self, start: &str) -> Result<DfsForest, GraphError> {
        if !self.contains(start) {
            return Err(GraphError::UnknownVertex(start.to_string()));
        }
        let neighbors = self.sorted_neighbors();
        let mut visited: BTreeSet<&str> = BTreeSet::new();
        let mut forest = DfsForest::default();

        let roots = std::iter::once(start).chain(neighbors.keys().copied());
        for root in roots {
            if visited.contains(root) {
                continue;
            }
            forest.component_starts.push(forest.order.len());
            visited.insert(root);
            forest.order.push(root.to_string());
            // Stack of (vertex, next neighbor cursor).
            let mut stack: Vec<(&str, usize)> = vec![(root, 0)];
            while let Some(top) = stack.last_mut() {
                let (v, cursor) = *top;
                let list = &neighbors[v];
                if cursor >= list.len() {
                    stack.pop();
                    continue;
                }
                top.1 += 1;
                let w = list[cursor];
                if visited.insert(w) {
                    forest.order.push(w.to_string());
                    forest.tree_edges.push((v.to_string(), w.to_string()));
                    stack.push((w, 0));
                }
            }
        }
        Ok(forest)
    }
}

/// Result of a full DFS sweep over a graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DfsForest {
    pub order: Vec<String>,
    /// Parent to child, in discovery order.
    pub tree_edges: Vec<(String, String)>,
    /// Index into `order` where each component begins.
    pub component_starts: Vec<usize>,
}

/// One API invocation of a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub argument: Option<String>,
}

impl PlanStep {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            argument: None,
        }
    }

    pub fn with_argument(id: impl Into<String>, argument: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            argument: Some(argument.into()),
        }
    }
}

/// Ordered API invocations plus directed dependency edges between them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedPlan {
    pub steps: Vec<PlanStep>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

impl DirectedPlan {
    pub fn new(steps: Vec<PlanStep>, edges: Vec<(String, String)>) -> Self {
        Self { steps, edges }
    }

    /// A plan whose edges chain the steps in the given order.
    pub fn chain<S: AsRef<str>>(ids: &[S]) -> Self {
        let steps = ids.iter().map(|s| PlanStep::new(s.as_ref())).collect();
        let edges = ids
            .windows(2)
            .map(|w| (w[0].as_ref().to_string(), w[1].as_ref().to_string()))
            .collect();
        Self { steps, edges }
    }

    pub fn step_ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.steps.iter().map(|s| s.id.as_str())
    }

    pub fn vertex_set(&self) -> BTreeSet<String> {
        self.step_ids().map(str::to_string).collect()
    }

    pub fn edge_set(&self) -> BTreeSet<(String, String)> {
        self.edges.iter().cloned().collect()
    }

    /// Checks unique steps, edge endpoints, and acyclicity.
    pub fn validate_dag(&self) -> Result<(), GraphError> {
        let mut pos = HashMap::with_capacity(self.steps.len());
        for (i, step) in self.steps.iter().enumerate() {
            if pos.insert(step.id.as_str(), i).is_some() {
                return Err(GraphError::DuplicateStep(step.id.clone()));
            }
        }
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); self.steps.len()];
        for (a, b) in &self.edges {
            let i = *pos
                .get(a.as_str())
                .ok_or_else(|| GraphError::DanglingPlanEdge(a.clone()))?;
            let j = *pos
                .get(b.as_str())
                .ok_or_else(|| GraphError::DanglingPlanEdge(b.clone()))?;
            succ[i].push(j);
        }
        if let Some(cycle) = find_cycle(&succ) {
            return Err(GraphError::Cycle(
                cycle.into_iter().map(|i| self.steps[i].id.clone()).collect(),
            ));
        }
        Ok(())
    }

    /// Topological order of step indices; ready steps are taken in plan
    /// order. Requires a valid DAG.
    pub fn topological_order(&self) -> Result<Vec<usize>, GraphError> {
        self.validate_dag()?;
        let n = self.steps.len();
        let pos: HashMap<&str, usize> = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (a, b) in &self.edges {
            let (i, j) = (pos[a.as_str()], pos[b.as_str()]);
            succ[i].push(j);
            indegree[j] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &succ[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        Ok(order)
    }
}

/// Returns the vertices of one cycle, in edge order, if any exists.
fn find_cycle(succ: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let n = succ.len();
    let mut mark = vec![Mark::New; n];
    for root in 0..n {
        if mark[root] != Mark::New {
            continue;
        }
        let mut path: Vec<usize> = Vec::new();
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        mark[root] = Mark::Active;
        path.push(root);
        while let Some(top) = stack.last_mut() {
            let (v, cursor) = *top;
            if cursor >= succ[v].len() {
                mark[v] = Mark::Done;
                stack.pop();
                path.pop();
                continue;
            }
            top.1 += 1;
            let w = succ[v][cursor];
            match mark[w] {
                Mark::Active => {
                    let start = path.iter().position(|&p| p == w).unwrap();
                    return Some(path[start..].to_vec());
                }
                Mark::New => {
                    mark[w] = Mark::Active;
                    path.push(w);
                    stack.push((w, 0));
                }
                Mark::Done => {}
            }
        }
    }
    None
}
