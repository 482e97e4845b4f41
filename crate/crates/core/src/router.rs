//! Intent router: a three-layer MLP over the instruction embedding.
//!
//! With one output the gate is `g = sigmoid(z)` and class 1 is chosen when
//! `g >= 0.5`; with several outputs the class is the softmax argmax, lowest
//! index on ties. The chosen class picks a prompt prefix from a
//! [`PromptBank`].
//!
//! Class labels follow the Question Set convention: `1` is a general
//! question, `0` a robot task.

use std::io::BufRead;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::checkpoint::{CheckpointError, Container};
use crate::embed::{EmbedError, Embedder, EmbeddingMatrix};
use crate::nn::{self, glorot, sigmoid, DenseLayer};
use crate::optim::{adamw_step, AdamWConfig, AdamWState, ParamSet};

pub const TASK_CLASS: usize = 0;
pub const QA_CLASS: usize = 1;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("sample {index}: class {class} is outside 0..{classes}")]
    UnknownClass { index: usize, class: usize, classes: usize },
    #[error("class index {index} out of range for {banks} prompt banks")]
    BankIndex { index: usize, banks: usize },
    #[error("invalid prompt bank: {0}")]
    Bank(String),
    #[error("router dimension mismatch: expected input width {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("invalid router config: {0}")]
    Config(String),
    #[error("empty question set")]
    Empty,
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub layers: Vec<DenseLayer>,
}

impl RouterParams {
    /// Glorot-uniform weights, zero biases. `classes == 2` builds the
    /// single-output sigmoid gate; more classes build a softmax head.
    pub fn init(input: usize, hidden: [usize; 2], classes: usize, seed: u64) -> Result<Self, RouterError> {
        if input == 0 || hidden.contains(&0) {
            return Err(RouterError::Config("layer widths must be positive".into()));
        }
        if classes < 2 {
            return Err(RouterError::Config("at least two classes are needed".into()));
        }
        let out = if classes == 2 { 1 } else { classes };
        let widths = [input, hidden[0], hidden[1], out];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                weight: glorot(w[0], w[1], &mut rng),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("three layers").output_dim()
    }

    pub fn is_binary(&self) -> bool {
        self.output_dim() == 1
    }

    pub fn classes(&self) -> usize {
        if self.is_binary() {
            2
        } else {
            self.output_dim()
        }
    }

    pub fn hidden(&self) -> [usize; 2] {
        [self.layers[0].output_dim(), self.layers[1].output_dim()]
    }

    /// The equivalent two-output softmax head: logits `[0, z]`.
    pub fn to_softmax_pair(&self) -> Self {
        assert!(self.is_binary(), "already a softmax head");
        let mut out = self.clone();
        let last = out.layers.last_mut().unwrap();
        let rows = last.input_dim();
        let mut weight = Array2::zeros((rows, 2));
        weight.column_mut(1).assign(&last.weight.column(0));
        last.weight = weight;
        last.bias = ndarray::arr1(&[0.0, last.bias[0]]);
        out
    }

    fn logits(&self, x: &Array2<f64>) -> nn::MlpTrace {
        nn::forward_from(&self.layers, self.layers[0].apply(x))
    }

    fn to_container(&self, config: &RouterTrainConfig) -> Container {
        let mut c = Container::new("router");
        c.meta.insert("input".into(), self.input_dim().into());
        c.meta.insert("hidden".into(), serde_json::to_value(self.hidden()).unwrap());
        c.meta.insert("outputs".into(), self.output_dim().into());
        c.meta.insert("seed".into(), config.seed.into());
        c.meta.insert("config".into(), serde_json::to_value(config).unwrap());
        for (k, layer) in self.layers.iter().enumerate() {
            c.push(
                format!("layer.{k}.weight"),
                layer.weight.shape().to_vec(),
                layer.weight.iter().copied().collect(),
            );
            c.push(format!("layer.{k}.bias"), vec![layer.bias.len()], layer.bias.to_vec());
        }
        c
    }

    fn from_container(c: &Container) -> Result<(Self, RouterTrainConfig), RouterError> {
        c.expect_kind("router")?;
        let input: usize = c.meta_field("input")?;
        let hidden: [usize; 2] = c.meta_field("hidden")?;
        let outputs: usize = c.meta_field("outputs")?;
        let config: RouterTrainConfig = c.meta_field("config")?;
        let widths = [input, hidden[0], hidden[1], outputs];
        let mut layers = Vec::with_capacity(3);
        for (k, w) in widths.windows(2).enumerate() {
            let missing = |name: String| CheckpointError::Header(format!("missing or misshapen tensor '{name}'"));
            let wname = format!("layer.{k}.weight");
            let weight = c
                .tensor(&wname)
                .and_then(|d| Array2::from_shape_vec((w[0], w[1]), d.to_vec()).ok())
                .ok_or_else(|| missing(wname))?;
            let bname = format!("layer.{k}.bias");
            let bias = c
                .tensor(&bname)
                .filter(|d| d.len() == w[1])
                .map(|d| Array1::from(d.to_vec()))
                .ok_or_else(|| missing(bname))?;
            layers.push(DenseLayer { weight, bias });
        }
        Ok((Self { layers }, config))
    }

    pub fn save(&self, config: &RouterTrainConfig, path: &Path) -> Result<(), RouterError> {
        Ok(self.to_container(config).save(path)?)
    }

    pub fn write_to<W: std::io::Write>(&self, config: &RouterTrainConfig, w: W) -> Result<(), RouterError> {
        Ok(self.to_container(config).write_to(w)?)
    }

    pub fn load(path: &Path) -> Result<(Self, RouterTrainConfig), RouterError> {
        Self::from_container(&Container::load(path)?)
    }
}

impl ParamSet for RouterParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|k| [format!("layer.{k}.weight"), format!("layer.{k}.bias")])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub class: usize,
    /// Per-class scores; `[1 - g, g]` for the sigmoid gate.
    pub scores: Vec<f64>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Lowest index among the maxima.
fn argmax(xs: &[f64]) -> usize {
    (1..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

/// Class decision from raw output logits.
pub fn decide(logits: &[f64]) -> Route {
    if logits.len() == 1 {
        let g = sigmoid(logits[0]);
        Route {
            class: usize::from(g >= 0.5),
            scores: vec![1.0 - g, g],
        }
    } else {
        let scores = softmax(logits);
        Route {
            class: argmax(&scores),
            scores,
        }
    }
}

pub fn route_embeddings(params: &RouterParams, embs: &EmbeddingMatrix) -> Result<Vec<Route>, RouterError> {
    if embs.dim() != params.input_dim() {
        return Err(RouterError::Dimension {
            expected: params.input_dim(),
            actual: embs.dim(),
        });
    }
    let trace = params.logits(embs.as_array());
    Ok(trace
        .output()
        .rows()
        .into_iter()
        .map(|row| decide(row.as_slice().unwrap()))
        .collect())
}

pub fn route(instruction: &str, params: &RouterParams, embedder: &dyn Embedder) -> Result<Route, RouterError> {
    let embs = embedder.embed(&[instruction.to_string()])?;
    Ok(route_embeddings(params, &embs)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bank {
    pub label: String,
    pub prefix: String,
}

/// Prompt prefixes `P_0 .. P_n`, one per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptBank {
    banks: Vec<Bank>,
}

impl PromptBank {
    pub fn new(banks: Vec<Bank>) -> Result<Self, RouterError> {
        if banks.len() < 2 {
            return Err(RouterError::Bank("at least two banks are required".into()));
        }
        for (i, b) in banks.iter().enumerate() {
            if banks[..i].iter().any(|o| o.label == b.label) {
                return Err(RouterError::Bank(format!("duplicate label '{}'", b.label)));
            }
        }
        Ok(Self { banks })
    }

    /// Robot-task bank at 0, question-answering bank at 1.
    pub fn uspilot_default() -> Self {
        Self::new(vec![
            Bank {
                label: "robot_task".into(),
                prefix: "You control an ultrasound scanning robot. Plan the API calls for this command.\n".into(),
            },
            Bank {
                label: "qa".into(),
                prefix: "You are a helpful medical assistant. Answer the question.\n".into(),
            },
        ])
        .expect("two distinct banks")
    }

    pub fn from_json_str(s: &str) -> Result<Self, RouterError> {
        let banks: Vec<Bank> = serde_json::from_str(s).map_err(|e| RouterError::Bank(e.to_string()))?;
        Self::new(banks)
    }

    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn label(&self, class: usize) -> Option<&str> {
        self.banks.get(class).map(|b| b.label.as_str())
    }

    pub fn select_bank(&self, class: usize) -> Result<&str, RouterError> {
        self.banks
            .get(class)
            .map(|b| b.prefix.as_str())
            .ok_or(RouterError::BankIndex {
                index: class,
                banks: self.banks.len(),
            })
    }
}

/// One labeled Question Set entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    #[serde(default)]
    pub output: String,
    pub class: usize,
}

impl Question {
    pub fn new(instruction: impl Into<String>, class: usize) -> Self {
        Self {
            instruction: instruction.into(),
            input: String::new(),
            output: String::new(),
            class,
        }
    }

    /// Text fed to the embedder: the instruction, plus any input context.
    pub fn text(&self) -> String {
        if self.input.trim().is_empty() {
            self.instruction.clone()
        } else {
            format!("{} {}", self.instruction, self.input)
        }
    }
}

fn parse_class(v: &Value) -> Option<usize> {
    match v {
        Value::String(s) => s.trim().parse().ok(),
        Value::Number(n) => n.as_u64().map(|c| c as usize),
        _ => None,
    }
}

/// Reads Question Set JSON lines; `class` may be a string or an integer.
pub fn load_questions<R: BufRead>(reader: R) -> Result<Vec<Question>, RouterError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |detail: String| RouterError::Parse { line: line_no, detail };
        let v: Value = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let field = |k: &str| v.get(k).and_then(Value::as_str).unwrap_or("").to_string();
        let instruction = v
            .get("instruction")
            .and_then(Value::as_str)
            .ok_or_else(|| parse("missing 'instruction'".into()))?
            .to_string();
        let class = v
            .get("class")
            .and_then(parse_class)
            .ok_or_else(|| parse("missing or non-integer 'class'".into()))?;
        out.push(Question {
            instruction,
            input: field("input"),
            output: field("output"),
            class,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterTrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: [usize; 2],
    pub adam_eps: f64,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            batch_size: 1,
            epochs: 100,
            seed: 42,
            hidden: [128, 64],
            adam_eps: 1e-8,
        }
    }
}

impl RouterTrainConfig {
    pub fn validate(&self) -> Result<(), RouterError> {
        let ok_beta = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0) {
            return Err(RouterError::Config("learning rate must be positive".into()));
        }
        if !(ok_beta(self.betas.0) && ok_beta(self.betas.1)) {
            return Err(RouterError::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(RouterError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Rows are true classes, columns predicted classes.
pub type Confusion = Vec<Vec<usize>>;

pub fn confusion(params: &RouterParams, embs: &EmbeddingMatrix, labels: &[usize]) -> Result<Confusion, RouterError> {
    let k = params.classes();
    let mut m = vec![vec![0; k]; k];
    for (r, &y) in route_embeddings(params, embs)?.iter().zip(labels) {
        m[y][r.class] += 1;
    }
    Ok(m)
}

pub fn accuracy_of(conf: &Confusion) -> f64 {
    let total: usize = conf.iter().flatten().sum();
    let hits: usize = (0..conf.len()).map(|i| conf[i][i]).sum();
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Recall of one class: correct predictions over its true count.
pub fn recall_of(conf: &Confusion, class: usize) -> f64 {
    let n: usize = conf[class].iter().sum();
    if n == 0 {
        0.0
    } else {
        conf[class][class] as f64 / n as f64
    }
}

/// Mean loss over rows and its gradient. Binary heads use sigmoid
/// cross-entropy, softmax heads categorical cross-entropy.
pub fn router_backward(params: &RouterParams, x: &Array2<f64>, labels: &[usize]) -> (f64, RouterParams) {
    let trace = params.logits(x);
    let z = trace.output();
    let n = x.nrows() as f64;
    let mut dz = Array2::zeros(z.raw_dim());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if z.ncols() == 1 {
            let zi = z[[i, 0]];
            let yf = y as f64;
            // Stable log(1 + e^z) - y z.
            loss += zi.max(0.0) - zi * yf + (-zi.abs()).exp().ln_1p();
            dz[[i, 0]] = (sigmoid(zi) - yf) / n;
        } else {
            let p = softmax(z.row(i).as_slice().unwrap());
            loss -= p[y].max(1e-300).ln();
            for (c, pc) in p.iter().enumerate() {
                dz[[i, c]] = (pc - if c == y { 1.0 } else { 0.0 }) / n;
            }
        }
    }
    let (rest, dz0) = nn::backward_from(&params.layers, &trace, dz);
    let mut layers = vec![DenseLayer {
        weight: x.t().dot(&dz0).as_standard_layout().into_owned(),
        bias: dz0.sum_axis(Axis(0)),
    }];
    layers.extend(rest);
    (loss / n, RouterParams { layers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutcome {
    pub params: RouterParams,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
    pub confusion: Option<Confusion>,
}

impl RouterOutcome {
    pub fn heldout_accuracy(&self) -> Option<f64> {
        self.confusion.as_ref().map(accuracy_of)
    }
}

/// Trains from `params`; `heldout` yields the confusion matrix.
pub fn train_router_embedded(
    mut params: RouterParams,
    embs: &EmbeddingMatrix,
    labels: &[usize],
    heldout: Option<(&EmbeddingMatrix, &[usize])>,
    cfg: &RouterTrainConfig,
) -> Result<RouterOutcome, RouterError> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(RouterError::Empty);
    }
    if embs.dim() != params.input_dim() {
        return Err(RouterError::Dimension {
            expected: params.input_dim(),
            actual: embs.dim(),
        });
    }
    let classes = params.classes();
    let check = |ls: &[usize]| {
        ls.iter().enumerate().try_for_each(|(index, &class)| {
            if class < classes {
                Ok(())
            } else {
                Err(RouterError::UnknownClass { index, class, classes })
            }
        })
    };
    check(labels)?;
    if let Some((_, l)) = heldout {
        check(l)?;
    }

    let adamw = cfg.adamw();
    let mut state = AdamWState::for_params(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x726f_7574_6572);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let x = embs.as_array();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = router_backward(&params, &xb, &yb);
            total += loss * chunk.len() as f64;
            adamw_step(&mut params, &grads, &mut state, &adamw);
        }
        let loss = total / labels.len() as f64;
        tracing::debug!(epoch, loss, "router epoch finished");
        losses.push(loss);
    }
    let confusion = heldout
        .map(|(e, l)| confusion(&params, e, l))
        .transpose()?;
    Ok(RouterOutcome {
        params,
        losses,
        confusion,
    })
}

/// Embeds the questions and trains a fresh router seeded from `cfg.seed`.
pub fn train_router(
    train: &[Question],
    heldout: &[Question],
    embedder: &dyn Embedder,
    classes: usize,
    cfg: &RouterTrainConfig,
) -> Result<RouterOutcome, RouterError> {
    if train.is_empty() {
        return Err(RouterError::Empty);
    }
    let texts: Vec<String> = train.iter().map(Question::text).collect();
    let embs = embedder.embed(&texts)?;
    let labels: Vec<usize> = train.iter().map(|q| q.class).collect();
    let params = RouterParams::init(embs.dim(), cfg.hidden, classes, cfg.seed)?;
    let held = if heldout.is_empty() {
        None
    } else {
        let texts: Vec<String> = heldout.iter().map(Question::text).collect();
        Some((embedder.embed(&texts)?, heldout.iter().map(|q| q.class).collect::<Vec<_>>()))
    };
    train_router_embedded(
        params,
        &embs,
        &labels,
        held.as_ref().map(|(e, l)| (e, l.as_slice())),
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_rules() {
        assert_eq!(decide(&[0.0]).class, 1);
        assert_eq!(decide(&[0.0]).scores, vec![0.5, 0.5]);
        assert_eq!(decide(&[-1e-9]).class, 0);
        assert_eq!(decide(&[2.0, -1.0, -1.0]).class, 0);
        assert_eq!(decide(&[1.0, 1.0, 0.0]).class, 0);
        let s: f64 = decide(&[0.3, -2.0, 5.0]).scores.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bank_selection() {
        let bank = PromptBank::uspilot_default();
        assert!(bank.select_bank(0).unwrap().contains("robot"));
        assert!(bank.select_bank(1).unwrap().contains("Answer"));
        assert!(matches!(bank.select_bank(2), Err(RouterError::BankIndex { .. })));
        let three = PromptBank::from_json_str(
            r#"[{"label":"a","prefix":"P0"},{"label":"b","prefix":"P1"},{"label":"c","prefix":"P2"}]"#,
        )
        .unwrap();
        assert_eq!(three.select_bank(2).unwrap(), "P2");
        assert!(PromptBank::from_json_str(r#"[{"label":"a","prefix":"x"}]"#).is_err());
        assert!(PromptBank::from_json_str(r#"[{"label":"a","prefix":"x"},{"label":"a","prefix":"y"}]"#).is_err());
    }

    #[test]
    fn question_set_parsing() {
        let text = r#"{"instruction": "Name 5 countries in the African continent.", "input": "", "output": "Nigeria, Egypt, South Africa, Ethiopia, and Ghana.", "class": "1"}
{"instruction": "Scan the patient's liver", "class": 0}"#;
        let qs = load_questions(text.as_bytes()).unwrap();
        assert_eq!(qs[0].class, QA_CLASS);
        assert_eq!(qs[1].class, TASK_CLASS);
        assert!(load_questions(r#"{"instruction":"x","class":"one"}"#.as_bytes()).is_err());
    }

    #[test]
    fn zero_epochs_leave_params() {
        let params = RouterParams::init(4, [3, 2], 2, 1).unwrap();
        let embs = EmbeddingMatrix::from_rows(vec![vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let cfg = RouterTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_router_embedded(params.clone(), &embs, &[1], None, &cfg).unwrap();
        assert_eq!(out.params, params);
        let err = train_router_embedded(params, &embs, &[2], None, &cfg).unwrap_err();
        assert!(matches!(err, RouterError::UnknownClass { class: 2, .. }));
    }

    #[test]
    fn softmax_pair_matches_gate() {
        let params = RouterParams::init(5, [4, 3], 2, 3).unwrap();
        let pair = params.to_softmax_pair();
        let embs = EmbeddingMatrix::from_array(Array2::from_shape_fn((6, 5), |(i, j)| ((i * 5 + j) as f64).sin()));
        let a = route_embeddings(&params, &embs).unwrap();
        let b = route_embeddings(&pair, &embs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.class, y.class);
            assert!((x.scores[1] - y.scores[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn router_gradients_match_differences() {
        for classes in [2, 3] {
            let mut params = RouterParams::init(4, [5, 3], classes, 8).unwrap();
            for l in &mut params.layers {
                l.bias.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * (i as f64 + 1.0).cos());
            }
            let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 4 + j) as f64 * 0.7).sin());
            let y = [1, 0, classes - 1];
            let (_, g) = router_backward(&params, &x, &y);
            let h = 1e-6;
            for t in 0..params.tensors().len() {
                for i in 0..params.tensors()[t].len() {
                    let orig = params.tensors()[t][i];
                    params.tensors_mut()[t][i] = orig + h;
                    let lp = router_backward(&params, &x, &y).0;
                    params.tensors_mut()[t][i] = orig - h;
                    let lm = router_backward(&params, &x, &y).0;
                    params.tensors_mut()[t][i] = orig;
                    let num = (lp - lm) / (2.0 * h);
                    let ana = g.tensors()[t][i];
                    assert!((num - ana).abs() <= 1e-6 * num.abs().max(ana.abs()).max(1.0), "{t}:{i} {num} {ana}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = RouterParams::init(6, [4, 3], 3, 5).unwrap();
        let cfg = RouterTrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("router.uspl");
        params.save(&cfg, &path).unwrap();
        let (back, back_cfg) = RouterParams::load(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(back_cfg, cfg);
    }
}
