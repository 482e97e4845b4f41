//! Dataset ingestion, plan metrics, and evaluation reports.
//!
//! Two JSON-lines formats are read. TaskBench-style records carry tool
//! nodes and links explicitly; Instruction Set records carry an `API`
//! string such as `change_probe(curvilinear), execute_robot()` whose calls
//! form a chain.
//!
//! Metrics follow the usual set definitions with three conventions: both
//! sets empty scores 1, an empty prediction against a non-empty gold scores
//! 0, and F1 is 0 when precision and recall are both 0. Reports aggregate
//! per-sample scores by their mean.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::graph::{DirectedPlan, PlanStep, ToolGraph};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("sample {sample}: vertex '{vertex}' is not in the tool graph")]
    UnknownVertex { sample: String, vertex: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("writing JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Taskbench,
    InstructionSet,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "taskbench" => Ok(Self::Taskbench),
            "instruction_set" | "instruction-set" => Ok(Self::InstructionSet),
            other => Err(format!("unknown dataset format '{other}' (taskbench, instruction_set)")),
        }
    }
}

/// One gold-annotated instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub instruction: String,
    /// Gold tools in first-mention order, without duplicates.
    pub gold_vertices: Vec<String>,
    /// Directed gold edges, without duplicates.
    pub gold_edges: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub arguments: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subtasks: Vec<String>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        vertices: impl IntoIterator<Item = impl Into<String>>,
        edges: impl IntoIterator<Item = (impl Into<String>, impl Into<String>)>,
    ) -> Self {
        let mut s = Self {
            id: id.into(),
            instruction: instruction.into(),
            gold_vertices: Vec::new(),
            gold_edges: Vec::new(),
            arguments: BTreeMap::new(),
            subtasks: Vec::new(),
        };
        for v in vertices {
            push_unique(&mut s.gold_vertices, v.into());
        }
        for (a, b) in edges {
            push_unique(&mut s.gold_edges, (a.into(), b.into()));
        }
        s
    }

    pub fn vertex_set(&self) -> BTreeSet<String> {
        self.gold_vertices.iter().cloned().collect()
    }

    pub fn edge_set(&self) -> BTreeSet<(String, String)> {
        self.gold_edges.iter().cloned().collect()
    }

    /// The gold plan: vertices in listed order with the gold edges.
    pub fn gold_plan(&self) -> DirectedPlan {
        DirectedPlan::new(
            self.gold_vertices
                .iter()
                .map(|v| match self.arguments.get(v) {
                    Some(arg) => PlanStep::with_argument(v.clone(), arg.clone()),
                    None => PlanStep::new(v.clone()),
                })
                .collect(),
            self.gold_edges.clone(),
        )
    }

    pub fn check_against(&self, graph: &ToolGraph) -> Result<(), EvalError> {
        match self.gold_vertices.iter().find(|v| !graph.contains(v)) {
            Some(v) => Err(EvalError::UnknownVertex {
                sample: self.id.clone(),
                vertex: v.clone(),
            }),
            None => Ok(()),
        }
    }
}

fn push_unique<T: PartialEq>(items: &mut Vec<T>, item: T) {
    if !items.contains(&item) {
        items.push(item);
    }
}

/// Reads JSON lines in `format`, skipping blank lines. With a graph, every
/// gold vertex must be one of its ids.
pub fn load_samples<R: BufRead>(
    reader: R,
    format: DatasetFormat,
    graph: Option<&ToolGraph>,
) -> Result<Vec<Sample>, EvalError> {
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: line_no,
            detail: e.to_string(),
        })?;
        let sample = match format {
            DatasetFormat::Taskbench => parse_taskbench(&value, line_no),
            DatasetFormat::InstructionSet => parse_instruction_set(&value, line_no),
        }
        .map_err(|detail| EvalError::Parse {
            line: line_no,
            detail,
        })?;
        if let Some(g) = graph {
            sample.check_against(g)?;
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn load_samples_str(
    text: &str,
    format: DatasetFormat,
    graph: Option<&ToolGraph>,
) -> Result<Vec<Sample>, EvalError> {
    load_samples(text.as_bytes(), format, graph)
}

fn sample_id(v: &Value, line: usize) -> String {
    match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => line.to_string(),
    }
}

fn str_field<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| v.get(*k).and_then(Value::as_str))
}

fn string_list(v: Option<&Value>) -> Result<Vec<String>, String> {
    match v {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|x| {
                x.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| format!("expected a string, found {x}"))
            })
            .collect(),
        Some(other) => Err(format!("expected a list of strings, found {other}")),
    }
}

fn parse_taskbench(v: &Value, line: usize) -> Result<Sample, String> {
    let instruction = str_field(v, &["instruction", "user_request"])
        .ok_or("missing 'instruction' / 'user_request'")?;
    let nodes = v
        .get("tool_steps")
        .or_else(|| v.get("task_nodes"))
        .and_then(Value::as_array)
        .ok_or("missing 'tool_steps' / 'task_nodes' list")?;
    let mut sample = Sample::new(
        sample_id(v, line),
        instruction,
        Vec::<String>::new(),
        Vec::<(String, String)>::new(),
    );
    for node in nodes {
        let id = match node {
            Value::String(s) => s.as_str(),
            Value::Object(_) => str_field(node, &["task", "id", "name"])
                .ok_or_else(|| format!("tool node without a name: {node}"))?,
            other => return Err(format!("unexpected tool node {other}")),
        };
        push_unique(&mut sample.gold_vertices, id.to_string());
        if let Some(args) = node.get("arguments").and_then(Value::as_array) {
            let joined: Vec<String> = args
                .iter()
                .map(|a| a.as_str().map_or_else(|| a.to_string(), str::to_string))
                .collect();
            if !joined.is_empty() {
                sample.arguments.insert(id.to_string(), joined.join(", "));
            }
        }
    }
    let links = v.get("links").or_else(|| v.get("task_links"));
    if let Some(links) = links {
        let links = links.as_array().ok_or("'links' must be a list")?;
        for link in links {
            let pair = match link {
                Value::Array(ab) if ab.len() == 2 => (ab[0].as_str(), ab[1].as_str()),
                Value::Object(_) => (
                    str_field(link, &["source", "from"]),
                    str_field(link, &["target", "to"]),
                ),
                _ => (None, None),
            };
            let (Some(a), Some(b)) = pair else {
                return Err(format!("malformed link {link}"));
            };
            for end in [a, b] {
                if !sample.gold_vertices.iter().any(|x| x == end) {
                    return Err(format!("link endpoint '{end}' is not a tool step"));
                }
            }
            push_unique(&mut sample.gold_edges, (a.to_string(), b.to_string()));
        }
    }
    sample.subtasks = string_list(v.get("task_steps").or_else(|| v.get("subtasks")))?;
    Ok(sample)
}

fn parse_instruction_set(v: &Value, line: usize) -> Result<Sample, String> {
    let instruction = str_field(v, &["instruction"]).ok_or("missing 'instruction'")?;
    let calls = match v.get("API").or_else(|| v.get("api")) {
        Some(Value::String(s)) => parse_api_calls(s)?,
        Some(Value::Array(items)) => {
            let mut calls = Vec::new();
            for item in items {
                let s = item.as_str().ok_or_else(|| format!("expected API string, found {item}"))?;
                calls.extend(parse_api_calls(s)?);
            }
            calls
        }
        _ => return Err("missing 'API'".into()),
    };
    let names: Vec<&String> = calls.iter().map(|(n, _)| n).collect();
    let chain = names.windows(2).filter(|w| w[0] != w[1]).map(|w| (w[0].clone(), w[1].clone()));
    let mut sample = Sample::new(sample_id(v, line), instruction, names.iter().cloned().cloned(), chain);
    for (name, arg) in calls {
        if !arg.is_empty() {
            sample.arguments.entry(name).or_insert(arg);
        }
    }
    if let Some(output) = str_field(v, &["output"]) {
        sample.subtasks = split_steps(output);
    }
    Ok(sample)
}

/// `name(arg), name2(), name3` into `(name, arg)` pairs; commas inside
/// parentheses belong to the argument.
pub fn parse_api_calls(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for ch in text.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return Err(format!("unbalanced ')' in API string '{text}'"));
        }
        if ch == ',' && depth == 0 {
            parts.push(std::mem::take(&mut current));
        } else {
            current.push(ch);
        }
    }
    if depth != 0 {
        return Err(format!("unbalanced '(' in API string '{text}'"));
    }
    parts.push(current);
    let mut calls = Vec::new();
    for part in parts {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, arg) = match part.find('(') {
            Some(open) => {
                if !part.ends_with(')') {
                    return Err(format!("trailing text after call '{part}'"));
                }
                (&part[..open], &part[open + 1..part.len() - 1])
            }
            None => (part, ""),
        };
        let name = name.trim().replace("\\_", "_");
        if name.is_empty() {
            return Err(format!("call without a name: '{part}'"));
        }
        calls.push((name, arg.trim().to_string()));
    }
    Ok(calls)
}

/// Splits `Step 1. ... Step 2. ...` text into step bodies, dropping a final
/// `Done` and collapsing whitespace.
pub fn split_steps(output: &str) -> Vec<String> {
    let mut bodies = Vec::new();
    let mut rest = output;
    let mut current: Option<String> = None;
    while let Some(pos) = rest.find("Step ") {
        let after = &rest[pos + 5..];
        let digits = after.chars().take_while(char::is_ascii_digit).count();
        if digits == 0 || !after[digits..].starts_with('.') {
            if let Some(c) = current.as_mut() {
                c.push_str(&rest[..pos + 5]);
            }
            rest = after;
            continue;
        }
        if let Some(c) = current.take() {
            bodies.push(c + &rest[..pos]);
        }
        current = Some(String::new());
        rest = &after[digits + 1..];
    }
    if let Some(c) = current {
        bodies.push(c + rest);
    }
    bodies
        .into_iter()
        .map(|b| b.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|b| !b.is_empty() && b.trim_end_matches('.') != "Done")
        .collect()
}

/// Precision, recall and F1 of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

/// Set precision / recall / F1 with the empty-set conventions above.
pub fn set_f1<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Prf {
    if pred.is_empty() && gold.is_empty() {
        return Prf {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let hits = pred.intersection(gold).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { hits / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { hits / gold.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

pub fn vertex_f1<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Prf {
    set_f1(pred, gold)
}

/// Direction-sensitive: `(a, b)` and `(b, a)` are different edges.
pub fn edge_f1<T: Ord>(pred: &BTreeSet<(T, T)>, gold: &BTreeSet<(T, T)>) -> Prf {
    set_f1(pred, gold)
}

/// 1 when the plan's vertex set and directed edge set both equal the gold.
pub fn accuracy(pred: &DirectedPlan, gold: &Sample) -> u8 {
    u8::from(pred.vertex_set() == gold.vertex_set() && pred.edge_set() == gold.edge_set())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub vertex: Prf,
    pub edge: Prf,
    pub exact: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SampleRecord {
    pub fn score(id: &str, plan: &DirectedPlan, gold: &Sample) -> Self {
        Self {
            id: id.to_string(),
            vertex: vertex_f1(&plan.vertex_set(), &gold.vertex_set()),
            edge: edge_f1(&plan.edge_set(), &gold.edge_set()),
            exact: accuracy(plan, gold) == 1,
            error: None,
        }
    }

    pub fn failed(id: &str, error: String) -> Self {
        Self {
            id: id.to_string(),
            vertex: Prf::ZERO,
            edge: Prf::ZERO,
            exact: false,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub fingerprint: String,
    pub samples: usize,
    pub mean_vertex_f1: f64,
    pub mean_edge_f1: f64,
    pub accuracy: f64,
    pub failures: usize,
    pub records: Vec<SampleRecord>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    vp: f64,
    vr: f64,
    vf1: f64,
    ep: f64,
    er: f64,
    ef1: f64,
    exact: f64,
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

impl MetricsReport {
    pub fn from_records(
        dataset: impl Into<String>,
        fingerprint: impl Into<String>,
        records: Vec<SampleRecord>,
    ) -> Result<Self, EvalError> {
        let n = records.len();
        if n == 0 {
            return Err(EvalError::EmptyDataset);
        }
        Ok(Self {
            dataset: dataset.into(),
            fingerprint: fingerprint.into(),
            samples: n,
            mean_vertex_f1: mean(records.iter().map(|r| r.vertex.f1), n),
            mean_edge_f1: mean(records.iter().map(|r| r.edge.f1), n),
            accuracy: records.iter().filter(|r| r.exact).count() as f64 / n as f64,
            failures: records.iter().filter(|r| r.error.is_some()).count(),
            records,
        })
    }

    /// Columns `id,vp,vr,vf1,ep,er,ef1,exact`; a final `aggregate` row holds
    /// the means and the accuracy.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(CsvRow {
                id: &r.id,
                vp: r.vertex.precision,
                vr: r.vertex.recall,
                vf1: r.vertex.f1,
                ep: r.edge.precision,
                er: r.edge.recall,
                ef1: r.edge.f1,
                exact: if r.exact { 1.0 } else { 0.0 },
            })?;
        }
        let n = self.records.len();
        out.serialize(CsvRow {
            id: "aggregate",
            vp: mean(self.records.iter().map(|r| r.vertex.precision), n),
            vr: mean(self.records.iter().map(|r| r.vertex.recall), n),
            vf1: self.mean_vertex_f1,
            ep: mean(self.records.iter().map(|r| r.edge.precision), n),
            er: mean(self.records.iter().map(|r| r.edge.recall), n),
            ef1: self.mean_edge_f1,
            exact: self.accuracy,
        })?;
        out.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<(), EvalError> {
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

/// Scores every sample with the plan `planner` returns for it. A planner
/// error scores zero and is noted on the record; the run continues.
pub fn evaluate<F, E>(
    dataset: &str,
    fingerprint: &str,
    samples: &[Sample],
    mut planner: F,
) -> Result<MetricsReport, EvalError>
where
    F: FnMut(&Sample) -> Result<DirectedPlan, E>,
    E: std::fmt::Display,
{
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let records = samples
        .iter()
        .map(|s| match planner(s) {
            Ok(plan) => SampleRecord::score(&s.id, &plan, s),
            Err(e) => SampleRecord::failed(&s.id, e.to_string()),
        })
        .collect();
    MetricsReport::from_records(dataset, fingerprint, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn eset(xs: &[(&str, &str)]) -> BTreeSet<(String, String)> {
        xs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn vertex_examples() {
        let p = vertex_f1(&set(&["A", "B"]), &set(&["A", "B"]));
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = vertex_f1(&set(&["A", "B"]), &set(&["B", "C"]));
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        assert_eq!(vertex_f1(&set(&[]), &set(&["A"])), Prf::ZERO);
    }

    #[test]
    fn edge_examples() {
        let p = edge_f1(&eset(&[("A", "B")]), &eset(&[("A", "B"), ("B", "C")]));
        assert_eq!(p.precision, 1.0);
        assert_eq!(p.recall, 0.5);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(edge_f1(&eset(&[("B", "A")]), &eset(&[("A", "B")])), Prf::ZERO);
        assert_eq!(edge_f1(&eset(&[]), &eset(&[])).f1, 1.0);
    }

    #[test]
    fn accuracy_examples() {
        let gold = Sample::new("1", "x", ["a", "b", "c"], [("a", "b"), ("b", "c")]);
        assert_eq!(accuracy(&DirectedPlan::chain(&["a", "b", "c"]), &gold), 1);
        let reversed = DirectedPlan::new(
            gold.gold_plan().steps,
            vec![("b".into(), "a".into()), ("b".into(), "c".into())],
        );
        assert_eq!(accuracy(&reversed, &gold), 0);
    }

    #[test]
    fn taskbench_record() {
        let line = r#"{"id":"7","user_request":"download then caption","task_nodes":[{"task":"download","arguments":["url"]},{"task":"caption"}],"task_links":[{"source":"download","target":"caption"}],"task_steps":["get it","describe it"]}"#;
        let s = &load_samples_str(line, DatasetFormat::Taskbench, None).unwrap()[0];
        assert_eq!(s.id, "7");
        assert_eq!(s.gold_vertices.len(), 2);
        assert_eq!(s.gold_edges.len(), 1);
        assert_eq!(s.arguments["download"], "url");
        assert_eq!(s.subtasks, vec!["get it", "describe it"]);

        let line = r#"{"instruction":"a then b","tool_steps":["a","b"],"links":[["a","b"]]}"#;
        let s = &load_samples_str(line, DatasetFormat::Taskbench, None).unwrap()[0];
        assert_eq!(s.id, "1");
        assert_eq!(s.edge_set(), eset(&[("a", "b")]));
    }

    #[test]
    fn instruction_set_record() {
        let line = r#"{"instruction": "My left side feels tender to the touch.", "input": "", "output": "Step 1. Change the ultrasound probe to curvilinear probe. Step 2. Use camera\nto detect the spleen area on upper left part of abdomen. Step 3. Execute robotic scanning.\nStep 4. Segment spleen from real-time ultrasound image. Step 5. Publish report to\ngastroenterology department. Step 6. Done", "API": "change_probe(curvilinear), detect_organ(spleen), execute_robot(), segment_organ(spleen), publish_report(gastroenterology)"}"#;
        let s = &load_samples_str(line, DatasetFormat::InstructionSet, None).unwrap()[0];
        assert_eq!(
            s.gold_vertices,
            ["change_probe", "detect_organ", "execute_robot", "segment_organ", "publish_report"]
        );
        assert_eq!(s.gold_edges.len(), 4);
        assert_eq!(s.gold_edges[0], ("change_probe".into(), "detect_organ".into()));
        assert_eq!(s.arguments["detect_organ"], "spleen");
        assert!(!s.arguments.contains_key("execute_robot"));
        assert_eq!(s.subtasks.len(), 5);
        assert_eq!(
            s.subtasks[1],
            "Use camera to detect the spleen area on upper left part of abdomen."
        );
    }

    #[test]
    fn unknown_vertex_is_named() {
        let graph = ToolGraph::from_json_str(
            r#"{"nodes":[{"id":"a","desc":"A"}],"links":[]}"#,
        )
        .unwrap();
        let line = r#"{"instruction":"x","tool_steps":["a","ghost"],"links":[]}"#;
        let err = load_samples_str(line, DatasetFormat::Taskbench, Some(&graph)).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "{\"instruction\":\"x\",\"tool_steps\":[\"a\"]}\n\nnot json\n";
        let err = load_samples_str(text, DatasetFormat::Taskbench, None).unwrap_err();
        assert!(matches!(err, EvalError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn api_call_parsing() {
        assert_eq!(
            parse_api_calls(r"change\_probe(linear), execute_robot(), stop").unwrap(),
            vec![
                ("change_probe".to_string(), "linear".to_string()),
                ("execute_robot".to_string(), String::new()),
                ("stop".to_string(), String::new()),
            ]
        );
        assert_eq!(parse_api_calls("f(a, b)").unwrap(), vec![("f".into(), "a, b".into())]);
        assert!(parse_api_calls("f(a").is_err());
    }

    #[test]
    fn aggregation_arithmetic() {
        let s1 = Sample::new("1", "x", ["a"], Vec::<(String, String)>::new());
        let s2 = Sample::new("2", "y", ["b"], Vec::<(String, String)>::new());
        let report = evaluate("t", "f", &[s1, s2], |s| {
            Ok::<_, String>(if s.id == "1" {
                DirectedPlan::chain(&["a"])
            } else {
                DirectedPlan::chain(&["c"])
            })
        })
        .unwrap();
        assert_eq!(report.mean_vertex_f1, 0.5);
        assert_eq!(report.accuracy, 0.5);
        let csv = report.csv_string();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("id,vp,vr,vf1,ep,er,ef1,exact\n"));
        assert!(csv.lines().last().unwrap().starts_with("aggregate,"));
    }

    #[test]
    fn failures_score_zero_and_continue() {
        let s = Sample::new("1", "x", ["a"], Vec::<(String, String)>::new());
        let report = evaluate("t", "f", &[s.clone(), s], |_| Err("boom")).unwrap();
        assert_eq!(report.failures, 2);
        assert_eq!(report.records[0].error.as_deref(), Some("boom"));
        assert_eq!(report.mean_vertex_f1, 0.0);
    }

    #[test]
    fn empty_dataset() {
        let err = evaluate("t", "f", &[], |_| Ok::<_, String>(DirectedPlan::default())).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }
}
