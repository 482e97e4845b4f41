//! Loss, exact gradients, and the training loop for the selection model.
//!
//! The loss of one example is the vertex-mean binary cross-entropy of each
//! subtask's scores against the example's gold labels, averaged over
//! subtasks; a batch loss is the mean over examples. Probabilities are
//! clamped to `[1e-12, 1 - 1e-12]` inside the logarithm only.
//!
//! Gradients are derived by hand for this fixed computation graph. With
//! `p = sigmoid(z)` and an unclamped `p`, `dCE/dz = p - y`; a clamped
//! probability contributes no gradient. The GCN sees the same adjacency and
//! features for every example, so the graph embeddings are computed once
//! per batch and their gradient is accumulated before one pass back through
//! the two convolution layers.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::embed::{ChatModel, EmbedError, Embedder, EmbeddingMatrix};
use crate::eval::{vertex_f1, Sample};
use crate::graph::{AdjacencyMatrix, AdjacencyMode, ToolGraph};
use crate::llmeg::{
    self, gcn_trace, project, Aggregation, ModelDims, ModelError, ModelParams,
};
use crate::nn::{self, leaky_relu_grad, sigmoid};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::planner;

/// Lower clamp applied to probabilities inside the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("probability and label vectors differ in length ({probs} vs {labels})")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("sample {sample}: vertex '{vertex}' is not in the tool graph")]
    DatasetMismatch { sample: String, vertex: String },
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
}

/// Decoder and GCN widths; input widths come from the embedder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub gcn_width: usize,
    pub projected: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            gcn_width: 256,
            projected: 256,
            hidden: vec![256, 256],
        }
    }
}

impl ModelShape {
    pub fn dims(&self, input: usize, word: usize) -> ModelDims {
        ModelDims {
            input,
            gcn_width: self.gcn_width,
            projected: self.projected,
            word,
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Selection threshold used when scoring the validation split.
    pub threshold: f64,
    pub adam_eps: f64,
    pub aggregation: Aggregation,
    pub adjacency: AdjacencyMode,
    pub shape: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            betas: (0.9, 0.95),
            weight_decay: 0.001,
            batch_size: 64,
            epochs: 100,
            seed: 42,
            threshold: 0.5,
            adam_eps: 1e-8,
            aggregation: Aggregation::Max,
            adjacency: AdjacencyMode::SymNormalized,
            shape: ModelShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let (b1, b2) = self.betas;
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(TrainError::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(TrainError::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Mean over vertices of `-[y ln p + (1-y) ln(1-p)]`, `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn ce_loss(probs: &[f64], labels: &[f64]) -> Result<f64, TrainError> {
    if probs.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// The fixed graph side of every forward pass.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub adj: AdjacencyMatrix,
    pub feats: EmbeddingMatrix,
}

impl GraphInputs {
    /// Adjacency in `mode` plus embedded vertex descriptions.
    pub fn build(
        graph: &ToolGraph,
        embedder: &dyn Embedder,
        mode: AdjacencyMode,
    ) -> Result<Self, EmbedError> {
        Ok(Self {
            adj: graph.adjacency(mode),
            feats: embedder.embed(&graph.descriptions())?,
        })
    }
}

/// One supervised example: subtask embeddings and 0/1 labels per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub subtask_embs: EmbeddingMatrix,
    pub labels: Array1<f64>,
}

fn example_loss(probs_per_subtask: &Array2<f64>, labels: &Array1<f64>) -> f64 {
    let labels = labels.as_slice().expect("contiguous labels");
    let total: f64 = probs_per_subtask
        .rows()
        .into_iter()
        .map(|row| ce_loss(&row.to_vec(), labels).expect("lengths checked"))
        .sum();
    total / probs_per_subtask.nrows() as f64
}

fn check_example(ex: &TrainingExample, n: usize) -> Result<(), TrainError> {
    if ex.labels.len() != n {
        return Err(TrainError::LengthMismatch {
            probs: n,
            labels: ex.labels.len(),
        });
    }
    if ex.subtask_embs.rows() == 0 {
        return Err(ModelError::NoSubtasks.into());
    }
    Ok(())
}

/// Mean batch loss through the plain forward pass.
pub fn batch_loss(
    params: &ModelParams,
    inputs: &GraphInputs,
    batch: &[&TrainingExample],
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let e_g = llmeg::gcn_forward(params, &inputs.adj, &inputs.feats)?;
    let mut total = 0.0;
    for ex in batch {
        check_example(ex, e_g.nrows())?;
        let out = llmeg::score_subtasks(params, &e_g, &ex.subtask_embs, Aggregation::Max)?;
        total += example_loss(&out.per_subtask, &ex.labels);
    }
    Ok(total / batch.len() as f64)
}

/// Mean batch loss and its exact gradient with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    inputs: &GraphInputs,
    batch: &[&TrainingExample],
) -> Result<(f64, ModelParams), TrainError> {
    let mut grads = ModelParams::zeros(params.dims.clone());
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let gcn = gcn_trace(params, &inputs.adj, &inputs.feats)?;
    let projected = project(params, &gcn.e_g)?;
    let n = gcn.e_g.nrows();
    let p = params.dims.projected;
    for ex in batch {
        check_example(ex, n)?;
    }

    // Every (example, subtask) pair contributes a block of n rows; stacking
    // them runs the decoder as one matrix pass.
    let pairs: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(e, ex)| (0..ex.subtask_embs.rows()).map(move |s| (e, s)))
        .collect();
    let first = &params.decoder[0];
    let words = Array2::from_shape_fn((pairs.len(), params.dims.word), |(r, j)| {
        let (e, s) = pairs[r];
        batch[e].subtask_embs.row(s)[j]
    });
    let word_part = words.dot(&first.weight.slice(s![p.., ..])) + &first.bias;
    let vertex_part = projected.dot(&first.weight.slice(s![..p, ..]));
    let width = first.output_dim();
    let mut z0 = Array2::<f64>::zeros((pairs.len() * n, width));
    for (r, mut block) in z0.axis_chunks_iter_mut(Axis(0), n).enumerate() {
        block.assign(&vertex_part);
        block += &word_part.row(r);
    }
    let trace = nn::forward_from(&params.decoder, z0);
    let logits = trace.output().column(0);

    let mut total = 0.0;
    let mut d_out = Array2::<f64>::zeros((pairs.len() * n, 1));
    let mut r = 0;
    for (e, ex) in batch.iter().enumerate() {
        let subtasks = ex.subtask_embs.rows();
        let scale = 1.0 / (batch.len() * subtasks * n) as f64;
        let mut ex_loss = 0.0;
        for _ in 0..subtasks {
            let probs = logits.slice(s![r * n..(r + 1) * n]).mapv(sigmoid);
            ex_loss += ce_loss(probs.as_slice().unwrap(), ex.labels.as_slice().unwrap())?;
            for i in 0..n {
                let pi = probs[i];
                if (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&pi) {
                    d_out[[r * n + i, 0]] = (pi - batch[e].labels[i]) * scale;
                }
            }
            r += 1;
        }
        total += ex_loss / subtasks as f64;
    }

    let (rest, dz0) = nn::backward_from(&params.decoder, &trace, d_out);
    for (g, r) in grads.decoder[1..].iter_mut().zip(rest) {
        g.weight = r.weight;
        g.bias = r.bias;
    }
    // First layer: rows see [projected_i ; word].
    let mut dz_vertex = Array2::<f64>::zeros((n, width));
    let mut dz_word = Array2::<f64>::zeros((pairs.len(), width));
    for (r, block) in dz0.axis_chunks_iter(Axis(0), n).enumerate() {
        dz_vertex += &block;
        dz_word.row_mut(r).assign(&block.sum_axis(Axis(0)));
    }
    let g0 = &mut grads.decoder[0];
    g0.weight
        .slice_mut(s![..p, ..])
        .assign(&projected.t().dot(&dz_vertex));
    g0.weight.slice_mut(s![p.., ..]).assign(&words.t().dot(&dz_word));
    g0.bias = dz_word.sum_axis(Axis(0));
    let d_projected = dz_vertex.dot(&first.weight.slice(s![..p, ..]).t());

    // Projection and the two graph convolutions.
    grads.eta = gcn.e_g.t().dot(&d_projected).as_standard_layout().into_owned();
    let mut dz2 = d_projected.dot(&params.eta.t());
    dz2.zip_mut_with(&gcn.z2, |d, &z| *d *= leaky_relu_grad(z));
    grads.w2 = gcn.ah1.t().dot(&dz2).as_standard_layout().into_owned();
    let mut dz1 = inputs.adj.data.t().dot(&dz2.dot(&params.w2.t()));
    dz1.zip_mut_with(&gcn.z1, |d, &z| *d *= leaky_relu_grad(z));
    grads.w1 = gcn.ax.t().dot(&dz1).as_standard_layout().into_owned();

    Ok((total / batch.len() as f64, grads))
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches, weighted by batch size.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_vertex_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Best checkpoint by validation vertex F1, when validation data is given.
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|l| l.loss)
    }
}

/// Subtasks used for an example: gold subtasks when present, else the
/// decomposer's output, else the instruction itself.
pub fn subtasks_for(sample: &Sample, decomposer: Option<&dyn ChatModel>) -> Result<Vec<String>, EmbedError> {
    if !sample.subtasks.is_empty() {
        return Ok(sample.subtasks.clone());
    }
    match decomposer {
        Some(chat) => Ok(planner::decompose(&sample.instruction, chat)?.subtasks),
        None => Ok(vec![sample.instruction.clone()]),
    }
}

/// Labels for `sample` over `graph`'s vertex order.
pub fn labels_for(sample: &Sample, graph: &ToolGraph) -> Result<Array1<f64>, TrainError> {
    let mut labels = Array1::zeros(graph.len());
    for v in &sample.gold_vertices {
        let i = graph
            .position(v)
            .ok_or_else(|| TrainError::DatasetMismatch {
                sample: sample.id.clone(),
                vertex: v.clone(),
            })?;
        labels[i] = 1.0;
    }
    Ok(labels)
}

pub fn prepare_examples(
    samples: &[Sample],
    graph: &ToolGraph,
    embedder: &dyn Embedder,
    decomposer: Option<&dyn ChatModel>,
) -> Result<Vec<TrainingExample>, TrainError> {
    samples
        .iter()
        .map(|sample| {
            let labels = labels_for(sample, graph)?;
            let subtasks = subtasks_for(sample, decomposer)?;
            Ok(TrainingExample {
                subtask_embs: embedder.embed(&subtasks)?,
                labels,
            })
        })
        .collect()
}

/// Mean vertex F1 of thresholded predictions over `examples`.
pub fn mean_vertex_f1(
    params: &ModelParams,
    inputs: &GraphInputs,
    examples: &[TrainingExample],
    threshold: f64,
    aggregation: Aggregation,
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let e_g = llmeg::gcn_forward(params, &inputs.adj, &inputs.feats)?;
    let mut total = 0.0;
    for ex in examples {
        let out = llmeg::score_subtasks(params, &e_g, &ex.subtask_embs, aggregation)?;
        let pred: BTreeSet<usize> =
            llmeg::select_indices(out.probs.as_slice().unwrap(), threshold)
                .indices
                .into_iter()
                .collect();
        let gold: BTreeSet<usize> = (0..ex.labels.len()).filter(|&i| ex.labels[i] > 0.5).collect();
        total += vertex_f1(&pred, &gold).f1;
    }
    Ok(total / examples.len() as f64)
}

/// Trains from a fresh initialization drawn from `cfg.seed`.
pub fn train(
    samples: &[Sample],
    graph: &ToolGraph,
    embedder: &dyn Embedder,
    decomposer: Option<&dyn ChatModel>,
    cfg: &TrainConfig,
    validation: Option<&[Sample]>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let inputs = GraphInputs::build(graph, embedder, cfg.adjacency)?;
    let examples = prepare_examples(samples, graph, embedder, decomposer)?;
    let val_examples = validation
        .map(|v| prepare_examples(v, graph, embedder, decomposer))
        .transpose()?;
    let dims = cfg.shape.dims(inputs.feats.dim(), examples[0].subtask_embs.dim());
    let params = ModelParams::init(dims, cfg.seed)?;
    train_examples(params, &inputs, &examples, val_examples.as_deref(), cfg)
}

/// The training loop over prepared examples, starting from `params`.
pub fn train_examples(
    mut params: ModelParams,
    inputs: &GraphInputs,
    examples: &[TrainingExample],
    validation: Option<&[TrainingExample]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    params.validate()?;
    let adamw = cfg.adamw();
    let mut state = AdamWState::for_params(&params);
    // Separate stream from initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = backward(&params, inputs, &batch)?;
            weighted += loss * batch.len() as f64;
            adamw_step(&mut params, &grads, &mut state, &adamw);
        }
        let loss = weighted / examples.len().max(1) as f64;
        let val_vertex_f1 = validation
            .map(|v| mean_vertex_f1(&params, inputs, v, cfg.threshold, cfg.aggregation))
            .transpose()?;
        tracing::debug!(epoch, loss, ?val_vertex_f1, "epoch finished");
        if let Some(f1) = val_vertex_f1 {
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, Checkpoint::new(params.clone(), state.clone(), cfg.clone())));
            }
        }
        log.push(EpochLog {
            epoch,
            loss,
            val_vertex_f1,
        });
    }
    Ok(TrainOutcome {
        last: Checkpoint::new(params, state, cfg.clone()),
        best: best.map(|(_, c)| c),
        log,
    })
}
