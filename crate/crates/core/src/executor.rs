//! Simulated ultrasound-robot runtime.
//!
//! An [`ApiRegistry`] lists every API with its parameters, the APIs that
//! must have run successfully earlier in the same trace, and its effect on
//! the [`WorldState`]. [`execute`] walks a plan in topological order and
//! records one [`StepRecord`] per step.
//!
//! A step whose requirements are unmet is rejected and execution stops. An
//! `interrupt` step pauses the robot; the steps after it are recorded as
//! halted and not run.
//!
//! Force control is a toy first-order model: each adjustment moves the
//! setpoint by `step` newtons within `[1, 20]`, then ten ticks of
//! `f <- f + 0.5 (setpoint - f)` pull the simulated force toward it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::sha256_hex;
use crate::graph::{DirectedPlan, GraphError, ToolGraph, Vertex};

pub const REGISTRY_VERSION: u32 = 1;
pub const DEFAULT_REGISTRY: &str = include_str!("../../../data/uspilot/registry.json");

pub const FORCE_MIN: f64 = 1.0;
pub const FORCE_MAX: f64 = 20.0;
pub const FORCE_STEP: f64 = 2.0;
pub const RELAX_TICKS: usize = 10;
pub const RELAX_RATE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("registry JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("registry version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid registry: {0}")]
    Registry(String),
    #[error("unknown API '{0}'")]
    UnknownApi(String),
    #[error("invalid plan: {0}")]
    Plan(#[from] GraphError),
    #[error("{0}")]
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    /// Allowed values; empty means free text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Effect {
    None,
    SetProbe,
    DetectTarget,
    StartScan,
    FinishScan,
    Report,
    Interrupt,
    Resume,
    AdjustForce { direction: Direction },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSpec {
    pub id: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    #[serde(default)]
    pub requires: Vec<String>,
    pub effects: Effect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RegistryFile {
    version: u32,
    #[serde(default)]
    reconstructed: bool,
    #[serde(default)]
    note: String,
    apis: Vec<ApiSpec>,
    #[serde(default)]
    links: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiRegistry {
    apis: Vec<ApiSpec>,
    links: Vec<(String, String)>,
    index: HashMap<String, usize>,
    reconstructed: bool,
}

impl ApiRegistry {
    pub fn from_json_str(s: &str) -> Result<Self, ExecError> {
        let file: RegistryFile = serde_json::from_str(s)?;
        if file.version != REGISTRY_VERSION {
            return Err(ExecError::Version {
                found: file.version,
                expected: REGISTRY_VERSION,
            });
        }
        let mut index = HashMap::new();
        for (i, api) in file.apis.iter().enumerate() {
            if api.id.trim().is_empty() {
                return Err(ExecError::Registry(format!("API #{i} has an empty id")));
            }
            if index.insert(api.id.clone(), i).is_some() {
                return Err(ExecError::Registry(format!("duplicate API '{}'", api.id)));
            }
        }
        for api in &file.apis {
            for r in &api.requires {
                if !index.contains_key(r) {
                    return Err(ExecError::Registry(format!("'{}' requires unknown API '{r}'", api.id)));
                }
            }
        }
        for (a, b) in &file.links {
            for end in [a, b] {
                if !index.contains_key(end) {
                    return Err(ExecError::Registry(format!("link to unknown API '{end}'")));
                }
            }
        }
        let reg = Self {
            apis: file.apis,
            links: file.links,
            index,
            reconstructed: file.reconstructed,
        };
        // Requirement chains must be satisfiable.
        let requires = DirectedPlan::new(
            reg.apis.iter().map(|a| crate::graph::PlanStep::new(a.id.clone())).collect(),
            reg.apis
                .iter()
                .flat_map(|a| a.requires.iter().map(move |r| (r.clone(), a.id.clone())))
                .collect(),
        );
        requires
            .validate_dag()
            .map_err(|e| ExecError::Registry(format!("requirement cycle: {e}")))?;
        Ok(reg)
    }

    /// The shipped USPilot registry.
    pub fn uspilot() -> Self {
        Self::from_json_str(DEFAULT_REGISTRY).expect("shipped registry is valid")
    }

    pub fn apis(&self) -> &[ApiSpec] {
        &self.apis
    }

    pub fn get(&self, id: &str) -> Option<&ApiSpec> {
        self.index.get(id).map(|&i| &self.apis[i])
    }

    pub fn len(&self) -> usize {
        self.apis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apis.is_empty()
    }

    pub fn is_reconstructed(&self) -> bool {
        self.reconstructed
    }

    /// Tool graph over the APIs: requirement edges plus the extra links,
    /// undirected.
    pub fn to_tool_graph(&self) -> Result<ToolGraph, GraphError> {
        let vertices = self
            .apis
            .iter()
            .map(|a| Vertex {
                id: a.id.clone(),
                description: a.description.clone(),
            })
            .collect();
        let links: Vec<(&str, &str)> = self
            .apis
            .iter()
            .flat_map(|a| a.requires.iter().map(move |r| (r.as_str(), a.id.as_str())))
            .chain(self.links.iter().map(|(a, b)| (a.as_str(), b.as_str())))
            .collect();
        ToolGraph::new(vertices, links)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    #[default]
    None,
    Linear,
    Curvilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub current_probe: Probe,
    pub detected_target: Option<String>,
    pub scanning: bool,
    pub scan_completed: bool,
    pub force_setpoint: f64,
    pub simulated_force: f64,
    pub interrupted: bool,
    pub report_log: Vec<String>,
}

impl Default for WorldState {
    fn default() -> Self {
        Self {
            current_probe: Probe::None,
            detected_target: None,
            scanning: false,
            scan_completed: false,
            force_setpoint: 5.0,
            simulated_force: 0.0,
            interrupted: false,
            report_log: Vec::new(),
        }
    }
}

impl WorldState {
    /// SHA-256 of the state's JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_string(self).expect("state serializes"))
    }

    fn relax(&mut self) {
        for _ in 0..RELAX_TICKS {
            self.simulated_force += RELAX_RATE * (self.force_setpoint - self.simulated_force);
        }
    }
}

/// Moves the setpoint by `step` newtons (clamped to `[1, 20]`) and relaxes
/// the simulated force toward it. Only valid while scanning.
pub fn adjust_force(state: &WorldState, direction: Direction, step: f64) -> Result<WorldState, ExecError> {
    if !state.scanning {
        return Err(ExecError::Rejected("force can only be adjusted while scanning".into()));
    }
    if !(step.is_finite() && step >= 0.0) {
        return Err(ExecError::Rejected(format!("invalid force step {step}")));
    }
    let mut next = state.clone();
    let delta = match direction {
        Direction::Increase => step,
        Direction::Decrease => -step,
    };
    next.force_setpoint = (state.force_setpoint + delta).clamp(FORCE_MIN, FORCE_MAX);
    next.relax();
    Ok(next)
}

pub fn interrupt(state: &WorldState) -> WorldState {
    let mut next = state.clone();
    next.interrupted = true;
    next.scanning = false;
    next
}

/// Clears the interruption and re-enters scanning. Needs a prior
/// interruption and a detected target.
pub fn resume(state: &WorldState) -> Result<WorldState, ExecError> {
    if !state.interrupted {
        return Err(ExecError::Rejected("nothing to continue: robot is not interrupted".into()));
    }
    if state.detected_target.is_none() {
        return Err(ExecError::Rejected("cannot continue without a detected target".into()));
    }
    let mut next = state.clone();
    next.interrupted = false;
    next.scanning = true;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Ok,
    Rejected,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub api: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub args: Option<String>,
    pub pre_state: String,
    pub post_state: String,
    pub status: StepStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub records: Vec<StepRecord>,
    pub terminal: StepStatus,
    pub final_state: WorldState,
}

impl ExecutionTrace {
    /// One JSON object per record.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn resolve_arg(api: &ApiSpec, arg: Option<&str>) -> Result<Option<String>, String> {
    let Some(spec) = api.params.first() else {
        return Ok(arg.map(str::to_string));
    };
    let value = match arg.map(str::trim).filter(|a| !a.is_empty()) {
        Some(a) => Some(a.to_string()),
        None => spec.default.clone(),
    };
    match &value {
        None if spec.required => Err(format!("{} needs a '{}' argument", api.id, spec.name)),
        Some(v) if !spec.values.is_empty() && !spec.values.contains(v) => Err(format!(
            "{}: '{v}' is not a valid {} ({})",
            api.id,
            spec.name,
            spec.values.join(", ")
        )),
        _ => Ok(value),
    }
}

fn apply(api: &ApiSpec, arg: Option<&str>, state: &WorldState) -> Result<WorldState, String> {
    let arg = resolve_arg(api, arg)?;
    let mut next = state.clone();
    match &api.effects {
        Effect::None => {}
        Effect::SetProbe => {
            next.current_probe = match arg.as_deref() {
                Some("linear") => Probe::Linear,
                Some("curvilinear") | None => Probe::Curvilinear,
                Some(other) => return Err(format!("unknown probe '{other}'")),
            };
        }
        Effect::DetectTarget => {
            if state.current_probe == Probe::None {
                return Err("no probe mounted".into());
            }
            next.detected_target = arg.or_else(|| Some("target".into()));
            next.scan_completed = false;
        }
        Effect::StartScan => {
            if state.detected_target.is_none() {
                return Err("no target detected".into());
            }
            if state.interrupted {
                return Err("robot is interrupted".into());
            }
            next.scanning = true;
            next.scan_completed = false;
            next.relax();
        }
        Effect::FinishScan => {
            if !state.scanning {
                return Err("no scan in progress".into());
            }
            next.scanning = false;
            next.scan_completed = true;
        }
        Effect::Report => {
            let target = state.detected_target.as_deref().unwrap_or("patient");
            let dest = arg.as_deref().unwrap_or("record");
            next.report_log.push(format!("{}: {target} -> {dest}", api.id));
        }
        Effect::Interrupt => next = interrupt(state),
        Effect::Resume => next = resume(state).map_err(|e| e.to_string())?,
        Effect::AdjustForce { direction } => {
            let step = match arg.as_deref() {
                Some(s) => s
                    .trim_end_matches('N')
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| format!("invalid force step '{s}'"))?,
                None => FORCE_STEP,
            };
            next = adjust_force(state, *direction, step).map_err(|e| e.to_string())?;
        }
        Effect::Stop => {
            next.scanning = false;
            next.interrupted = false;
        }
    }
    Ok(next)
}

/// Runs `plan` from `initial`. Every step id must be a registry API.
pub fn execute(plan: &DirectedPlan, registry: &ApiRegistry, initial: &WorldState) -> Result<ExecutionTrace, ExecError> {
    for id in plan.step_ids() {
        if registry.get(id).is_none() {
            return Err(ExecError::UnknownApi(id.to_string()));
        }
    }
    let order = plan.topological_order()?;
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(order.len());
    let mut done: BTreeMap<&str, ()> = BTreeMap::new();
    let mut terminal = StepStatus::Ok;

    for &i in &order {
        let step = &plan.steps[i];
        let api = registry.get(&step.id).expect("checked above");
        let pre = state.hash();
        if terminal == StepStatus::Halted {
            records.push(StepRecord {
                api: step.id.clone(),
                args: step.argument.clone(),
                pre_state: pre.clone(),
                post_state: pre,
                status: StepStatus::Halted,
                reason: Some("robot interrupted".into()),
            });
            continue;
        }
        let missing: Vec<&str> = api
            .requires
            .iter()
            .map(String::as_str)
            .filter(|r| !done.contains_key(r))
            .collect();
        let outcome = if missing.is_empty() {
            apply(api, step.argument.as_deref(), &state)
        } else {
            Err(format!("missing predecessor(s): {}", missing.join(", ")))
        };
        match outcome {
            Ok(next) => {
                state = next;
                records.push(StepRecord {
                    api: step.id.clone(),
                    args: step.argument.clone(),
                    pre_state: pre,
                    post_state: state.hash(),
                    status: StepStatus::Ok,
                    reason: None,
                });
                done.insert(api.id.as_str(), ());
                if api.effects == Effect::Interrupt {
                    terminal = StepStatus::Halted;
                }
            }
            Err(reason) => {
                records.push(StepRecord {
                    api: step.id.clone(),
                    args: step.argument.clone(),
                    pre_state: pre.clone(),
                    post_state: pre,
                    status: StepStatus::Rejected,
                    reason: Some(reason),
                });
                terminal = StepStatus::Rejected;
                break;
            }
        }
    }
    // A trailing interrupt leaves nothing halted; the plan completed.
    if terminal == StepStatus::Halted && !records.iter().any(|r| r.status == StepStatus::Halted) {
        terminal = StepStatus::Ok;
    }
    Ok(ExecutionTrace {
        records,
        terminal,
        final_state: state,
    })
}

/// Re-applies the `ok` records of a trace and returns the post-state
/// hashes in order.
pub fn replay(trace: &ExecutionTrace, registry: &ApiRegistry, initial: &WorldState) -> Result<Vec<String>, ExecError> {
    let mut state = initial.clone();
    let mut hashes = Vec::new();
    for r in trace.records.iter().filter(|r| r.status == StepStatus::Ok) {
        let api = registry.get(&r.api).ok_or_else(|| ExecError::UnknownApi(r.api.clone()))?;
        state = apply(api, r.args.as_deref(), &state).map_err(ExecError::Rejected)?;
        hashes.push(state.hash());
    }
    Ok(hashes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::PlanStep;

    fn plan(steps: &[(&str, Option<&str>)]) -> DirectedPlan {
        let ps: Vec<PlanStep> = steps
            .iter()
            .map(|(id, arg)| match arg {
                Some(a) => PlanStep::with_argument(*id, *a),
                None => PlanStep::new(*id),
            })
            .collect();
        let edges = steps.windows(2).map(|w| (w[0].0.to_string(), w[1].0.to_string())).collect();
        DirectedPlan::new(ps, edges)
    }

    fn scanning_state() -> WorldState {
        WorldState {
            current_probe: Probe::Linear,
            detected_target: Some("thyroid".into()),
            scanning: true,
            ..WorldState::default()
        }
    }

    #[test]
    fn shipped_registry_counts() {
        let reg = ApiRegistry::uspilot();
        assert!(reg.is_reconstructed());
        let g = reg.to_tool_graph().unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g.edge_count(), 24);
    }

    #[test]
    fn thyroid_workflow_runs() {
        let reg = ApiRegistry::uspilot();
        let p = plan(&[
            ("change_probe", Some("linear")),
            ("detect_organ", Some("thyroid")),
            ("execute_robot", None),
            ("segment_organ", Some("thyroid")),
            ("publish_report", Some("endocrinology")),
        ]);
        let t = execute(&p, &reg, &WorldState::default()).unwrap();
        assert_eq!(t.terminal, StepStatus::Ok);
        assert!(t.records.iter().all(|r| r.status == StepStatus::Ok));
        assert!(t.final_state.scan_completed);
        assert_eq!(t.final_state.current_probe, Probe::Linear);
        assert_eq!(t.final_state.report_log, vec!["publish_report: thyroid -> endocrinology"]);
        assert_eq!(
            replay(&t, &reg, &WorldState::default()).unwrap(),
            t.records.iter().map(|r| r.post_state.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn missing_predecessor_is_rejected() {
        let reg = ApiRegistry::uspilot();
        let t = execute(&plan(&[("execute_robot", None)]), &reg, &WorldState::default()).unwrap();
        assert_eq!(t.terminal, StepStatus::Rejected);
        assert!(t.records[0].reason.as_deref().unwrap().contains("detect_organ"));
    }

    #[test]
    fn empty_plan_and_unknown_api() {
        let reg = ApiRegistry::uspilot();
        let t = execute(&DirectedPlan::default(), &reg, &WorldState::default()).unwrap();
        assert!(t.records.is_empty());
        assert_eq!(t.terminal, StepStatus::Ok);
        assert!(matches!(
            execute(&plan(&[("fly", None)]), &reg, &WorldState::default()),
            Err(ExecError::UnknownApi(_))
        ));
    }

    #[test]
    fn force_adjustment() {
        let s = adjust_force(&scanning_state(), Direction::Decrease, FORCE_STEP).unwrap();
        assert_eq!(s.force_setpoint, 3.0);
        // From 0 N: f = 3 (1 - 0.5^10).
        assert!((s.simulated_force - 3.0).abs() < 0.01);
        let low = WorldState {
            force_setpoint: 1.0,
            ..scanning_state()
        };
        assert_eq!(adjust_force(&low, Direction::Decrease, 2.0).unwrap().force_setpoint, 1.0);
        assert!(adjust_force(&WorldState::default(), Direction::Increase, 2.0).is_err());
    }

    #[test]
    fn relaxation_from_initial_setpoint() {
        let s = WorldState {
            simulated_force: 5.0,
            ..scanning_state()
        };
        let s = adjust_force(&s, Direction::Decrease, 2.0).unwrap();
        let expected = 5.0 - 2.0 * (1.0 - 0.5f64.powi(10));
        assert!((s.simulated_force - expected).abs() < 1e-12);
        assert!((s.simulated_force - 3.0).abs() < 0.01);
    }

    #[test]
    fn interrupt_and_resume() {
        let s = interrupt(&scanning_state());
        assert!(!s.scanning && s.interrupted);
        let r = resume(&s).unwrap();
        assert!(r.scanning && !r.interrupted);
        assert!(resume(&WorldState::default()).is_err());
        let fresh_interrupt = interrupt(&WorldState::default());
        assert!(resume(&fresh_interrupt).is_err());
    }

    #[test]
    fn interrupt_halts_remaining_steps() {
        let reg = ApiRegistry::uspilot();
        let p = plan(&[
            ("change_probe", Some("curvilinear")),
            ("detect_organ", Some("liver")),
            ("execute_robot", None),
            ("interrupt", None),
            ("segment_organ", Some("liver")),
        ]);
        let t = execute(&p, &reg, &WorldState::default()).unwrap();
        assert_eq!(t.terminal, StepStatus::Halted);
        assert_eq!(t.records.len(), 5);
        assert_eq!(t.records[4].status, StepStatus::Halted);
        assert!(t.final_state.interrupted);
    }

    #[test]
    fn single_commands_use_state() {
        let reg = ApiRegistry::uspilot();
        let t = execute(&plan(&[("decrease_force", None)]), &reg, &scanning_state()).unwrap();
        assert_eq!(t.terminal, StepStatus::Ok);
        assert_eq!(t.final_state.force_setpoint, 3.0);
        let t = execute(&plan(&[("continue", None)]), &reg, &WorldState::default()).unwrap();
        assert_eq!(t.terminal, StepStatus::Rejected);
    }

    #[test]
    fn argument_validation() {
        let reg = ApiRegistry::uspilot();
        let t = execute(&plan(&[("change_probe", Some("convex"))]), &reg, &WorldState::default()).unwrap();
        assert_eq!(t.terminal, StepStatus::Rejected);
        let p = plan(&[("change_probe", None), ("detect_organ", None)]);
        let t = execute(&p, &reg, &WorldState::default()).unwrap();
        assert_eq!(t.records[0].status, StepStatus::Ok);
        assert!(t.records[1].reason.as_deref().unwrap().contains("organ"));
    }

    #[test]
    fn registry_validation() {
        let bad = r#"{"version":1,"apis":[{"id":"a","requires":["b"],"effects":{"op":"none"}}]}"#;
        assert!(ApiRegistry::from_json_str(bad).is_err());
        let cyc = r#"{"version":1,"apis":[{"id":"a","requires":["b"],"effects":{"op":"none"}},{"id":"b","requires":["a"],"effects":{"op":"none"}}]}"#;
        assert!(ApiRegistry::from_json_str(cyc).is_err());
        let v0 = r#"{"version":0,"apis":[]}"#;
        assert!(matches!(ApiRegistry::from_json_str(v0), Err(ExecError::Version { found: 0, .. })));
    }
}
