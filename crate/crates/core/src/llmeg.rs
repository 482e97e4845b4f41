//! The selection model: a two-layer GCN encodes vertex description features
//! over the normalized adjacency, each vertex's graph embedding is projected
//! and concatenated with a subtask embedding, and a shared MLP decoder
//! scores every vertex with a sigmoid.
//!
//! ```text
//! H1  = LeakyReLU(A X W1)
//! E_g = LeakyReLU(A H1 W2)                 N x F'
//! f_i = [E_g[i] eta ; w_s]                 P + E_w
//! p_i = sigmoid(decoder(f_i))
//! ```

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingMatrix;
use crate::graph::{AdjacencyMatrix, ToolGraph};
use crate::nn::{self, glorot, leaky_relu, sigmoid, DenseLayer, MlpTrace};
use crate::optim::ParamSet;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("no subtasks")]
    NoSubtasks,
    #[error("invalid model dims: {0}")]
    InvalidDims(String),
}

fn check(what: &'static str, expected: usize, actual: usize) -> Result<(), ModelError> {
    if expected == actual {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            what,
            expected,
            actual,
        })
    }
}

/// Shape hyperparameters of the selection model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Vertex feature width `D`.
    pub input: usize,
    /// GCN width `F'`.
    pub gcn_width: usize,
    /// Projected graph-embedding width `P`.
    pub projected: usize,
    /// Subtask embedding width `E_w`.
    pub word: usize,
    /// Decoder hidden widths.
    pub hidden: Vec<usize>,
}

impl ModelDims {
    /// Defaults: GCN width 256, projection 256, two hidden layers of 256.
    pub fn new(input: usize, word: usize) -> Self {
        Self {
            input,
            gcn_width: 256,
            projected: 256,
            word,
            hidden: vec![256, 256],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.input, self.gcn_width, self.projected, self.word];
        if all.iter().chain(&self.hidden).any(|&d| d == 0) {
            return Err(ModelError::InvalidDims(format!("{self:?} has a zero width")));
        }
        Ok(())
    }

    /// Layer widths of the decoder, input first, output (1) last.
    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.projected + self.word];
        widths.extend(&self.hidden);
        widths.push(1);
        widths
    }
}

/// All trainable tensors of the selection model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// `D x F'`
    pub w1: Array2<f64>,
    /// `F' x F'`
    pub w2: Array2<f64>,
    /// `F' x P`
    pub eta: Array2<f64>,
    pub decoder: Vec<DenseLayer>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let widths = dims.decoder_widths();
        Self {
            w1: Array2::zeros((dims.input, dims.gcn_width)),
            w2: Array2::zeros((dims.gcn_width, dims.gcn_width)),
            eta: Array2::zeros((dims.gcn_width, dims.projected)),
            decoder: widths
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
            dims,
        }
    }

    /// Glorot-uniform weights and zero biases, drawn from `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        p.w1 = glorot(p.w1.nrows(), p.w1.ncols(), &mut rng);
        p.w2 = glorot(p.w2.nrows(), p.w2.ncols(), &mut rng);
        p.eta = glorot(p.eta.nrows(), p.eta.ncols(), &mut rng);
        for layer in &mut p.decoder {
            layer.weight = glorot(layer.input_dim(), layer.output_dim(), &mut rng);
        }
        Ok(p)
    }

    /// Checks every tensor against `dims`.
    pub fn validate(&self) -> Result<(), ModelError> {
        let d = &self.dims;
        d.validate()?;
        check("w1 rows", d.input, self.w1.nrows())?;
        check("w1 cols", d.gcn_width, self.w1.ncols())?;
        check("w2 rows", d.gcn_width, self.w2.nrows())?;
        check("w2 cols", d.gcn_width, self.w2.ncols())?;
        check("eta rows", d.gcn_width, self.eta.nrows())?;
        check("eta cols", d.projected, self.eta.ncols())?;
        let widths = d.decoder_widths();
        check("decoder layers", widths.len() - 1, self.decoder.len())?;
        for (layer, w) in self.decoder.iter().zip(widths.windows(2)) {
            check("decoder layer input", w[0], layer.input_dim())?;
            check("decoder layer output", w[1], layer.output_dim())?;
            check("decoder bias", w[1], layer.bias.len())?;
        }
        Ok(())
    }
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.w1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.eta.as_slice().expect("standard layout"),
        ];
        for layer in &self.decoder {
            out.push(layer.weight.as_slice().expect("standard layout"));
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.w1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.eta.as_slice_mut().expect("standard layout"),
        ];
        for layer in &mut self.decoder {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["w1".to_string(), "w2".into(), "eta".into()];
        for k in 0..self.decoder.len() {
            names.push(format!("decoder.{k}.weight"));
            names.push(format!("decoder.{k}.bias"));
        }
        names
    }
}

/// How per-subtask scores combine into one probability per vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutput {
    /// Aggregated probability per vertex.
    pub probs: Array1<f64>,
    /// `S x N` probabilities, one row per subtask.
    pub per_subtask: Array2<f64>,
}

/// Intermediate GCN values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GcnTrace {
    /// `A X`
    pub ax: Array2<f64>,
    pub z1: Array2<f64>,
    /// `A H1`
    pub ah1: Array2<f64>,
    pub z2: Array2<f64>,
    pub e_g: Array2<f64>,
}

pub(crate) fn gcn_trace(
    params: &ModelParams,
    adj: &AdjacencyMatrix,
    feats: &EmbeddingMatrix,
) -> Result<GcnTrace, ModelError> {
    let n = adj.data.nrows();
    check("adjacency columns", n, adj.data.ncols())?;
    check("feature rows (vertices)", n, feats.rows())?;
    check("feature width", params.dims.input, feats.dim())?;
    check("w1 rows", params.dims.input, params.w1.nrows())?;
    check("w2 rows", params.w1.ncols(), params.w2.nrows())?;
    let ax = adj.data.dot(feats.as_array());
    let z1 = ax.dot(&params.w1);
    let h1 = z1.mapv(leaky_relu);
    let ah1 = adj.data.dot(&h1);
    let z2 = ah1.dot(&params.w2);
    let e_g = z2.mapv(leaky_relu);
    Ok(GcnTrace {
        ax,
        z1,
        ah1,
        z2,
        e_g,
    })
}

/// Graph embeddings `E_g` (`N x F'`).
pub fn gcn_forward(
    params: &ModelParams,
    adj: &AdjacencyMatrix,
    feats: &EmbeddingMatrix,
) -> Result<Array2<f64>, ModelError> {
    Ok(gcn_trace(params, adj, feats)?.e_g)
}

/// Decoder pass for one subtask over all vertices.
pub(crate) fn decoder_trace(
    params: &ModelParams,
    projected: &Array2<f64>,
    word_emb: ArrayView1<'_, f64>,
) -> Result<MlpTrace, ModelError> {
    check("word embedding width", params.dims.word, word_emb.len())?;
    let first = &params.decoder[0];
    let p = params.dims.projected;
    check("projected width", p, projected.ncols())?;
    // [row ; w] W0 = row W0[..P] + w W0[P..]; the word half is shared by all rows.
    let word_part = word_emb.dot(&first.weight.slice(s![p.., ..])) + &first.bias;
    let z0 = projected.dot(&first.weight.slice(s![..p, ..])) + &word_part;
    Ok(nn::forward_from(&params.decoder, z0))
}

pub(crate) fn project(params: &ModelParams, e_g: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
    check("graph embedding width", params.dims.gcn_width, e_g.ncols())?;
    Ok(e_g.dot(&params.eta))
}

/// Per-vertex selection probabilities for one subtask embedding.
pub fn score_vertices(
    params: &ModelParams,
    e_g: &Array2<f64>,
    word_emb: ArrayView1<'_, f64>,
) -> Result<Array1<f64>, ModelError> {
    let projected = project(params, e_g)?;
    let trace = decoder_trace(params, &projected, word_emb)?;
    Ok(trace.output().column(0).mapv(sigmoid))
}

/// Scores every subtask and aggregates with elementwise max.
pub fn forward(
    params: &ModelParams,
    adj: &AdjacencyMatrix,
    feats: &EmbeddingMatrix,
    subtask_embs: &EmbeddingMatrix,
) -> Result<SelectionOutput, ModelError> {
    forward_with(params, adj, feats, subtask_embs, Aggregation::Max)
}

pub fn forward_with(
    params: &ModelParams,
    adj: &AdjacencyMatrix,
    feats: &EmbeddingMatrix,
    subtask_embs: &EmbeddingMatrix,
    aggregation: Aggregation,
) -> Result<SelectionOutput, ModelError> {
    let e_g = gcn_forward(params, adj, feats)?;
    score_subtasks(params, &e_g, subtask_embs, aggregation)
}

/// Decoder stage of [`forward_with`] given precomputed graph embeddings.
pub fn score_subtasks(
    params: &ModelParams,
    e_g: &Array2<f64>,
    subtask_embs: &EmbeddingMatrix,
    aggregation: Aggregation,
) -> Result<SelectionOutput, ModelError> {
    if subtask_embs.rows() == 0 {
        return Err(ModelError::NoSubtasks);
    }
    let projected = project(params, e_g)?;
    let n = e_g.nrows();
    let mut per_subtask = Array2::zeros((subtask_embs.rows(), n));
    for s in 0..subtask_embs.rows() {
        let trace = decoder_trace(params, &projected, subtask_embs.row(s))?;
        per_subtask
            .row_mut(s)
            .assign(&trace.output().column(0).mapv(sigmoid));
    }
    let probs = aggregate(&per_subtask, aggregation);
    Ok(SelectionOutput { probs, per_subtask })
}

pub fn aggregate(per_subtask: &Array2<f64>, aggregation: Aggregation) -> Array1<f64> {
    match aggregation {
        Aggregation::Max => per_subtask.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b)),
        Aggregation::Mean => per_subtask.mean_axis(Axis(0)).expect("at least one subtask"),
    }
}

/// Vertex positions chosen at `threshold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Ascending vertex positions.
    pub indices: Vec<usize>,
    /// No vertex reached the threshold and the argmax was taken instead.
    pub argmax_fallback: bool,
}

/// Positions with `p >= threshold`; if none qualify, the single argmax
/// (lowest index on ties).
pub fn select_indices(probs: &[f64], threshold: f64) -> Selection {
    let indices: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] >= threshold).collect();
    if !indices.is_empty() || probs.is_empty() {
        return Selection {
            indices,
            argmax_fallback: false,
        };
    }
    let best = (1..probs.len()).fold(0, |best, i| if probs[i] > probs[best] { i } else { best });
    Selection {
        indices: vec![best],
        argmax_fallback: true,
    }
}

/// Selected vertex ids in graph order.
pub fn select(output: &SelectionOutput, graph: &ToolGraph, threshold: f64) -> (Vec<String>, bool) {
    let sel = select_indices(output.probs.as_slice().expect("contiguous"), threshold);
    let ids = sel
        .indices
        .iter()
        .map(|&i| graph.vertices()[i].id.clone())
        .collect();
    (ids, sel.argmax_fallback)
}
