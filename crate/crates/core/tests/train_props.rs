use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uspilot_core::checkpoint::Checkpoint;
use uspilot_core::embed::{EmbeddingMatrix, HashingEmbedder};
use uspilot_core::llmeg::{forward, ModelDims, ModelParams};
use uspilot_core::optim::{adamw_step, AdamWConfig, AdamWState, ParamSet};
use uspilot_core::synth;
use uspilot_core::train::{self, backward, ce_loss, GraphInputs, ModelShape, TrainConfig, TrainingExample};
use uspilot_core::graph::AdjacencyMode;

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed: 9,
        shape: ModelShape {
            gcn_width: 8,
            projected: 8,
            hidden: vec![16],
        },
        ..TrainConfig::default()
    }
}

#[test]
fn loss_worked_examples() {
    assert!((ce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((ce_loss(&[1e-12], &[1.0]).unwrap() - 27.631021115928547).abs() < 1e-9);
    assert!(ce_loss(&[1.0 - 1e-12], &[1.0]).unwrap() < 1e-11);
    assert!(ce_loss(&[0.5, 0.5], &[1.0]).is_err());
}

#[test]
fn zero_epochs_return_the_initialization() {
    let task = synth::named_tool_task(3, 40, 30);
    let emb = HashingEmbedder::new(32);
    let cfg = small_cfg(0);
    let out = train::train(&task.train, &task.graph, &emb, None, &cfg, None).unwrap();
    let init = ModelParams::init(cfg.shape.dims(32, 32), cfg.seed).unwrap();
    assert_eq!(out.last.params, init);
    assert!(out.log.is_empty());
}

#[test]
fn same_seed_same_run() {
    let task = synth::named_tool_task(3, 60, 50);
    let emb = HashingEmbedder::new(32);
    let run = || {
        let out = train::train(&task.train, &task.graph, &emb, None, &small_cfg(3), Some(&task.test)).unwrap();
        let mut bytes = Vec::new();
        out.last.write_to(&mut bytes).unwrap();
        (out.log, bytes)
    };
    let (log_a, bytes_a) = run();
    let (log_b, bytes_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(bytes_a, bytes_b);
    assert!(log_a.iter().all(|l| l.val_vertex_f1.is_some()));
}

#[test]
fn reloaded_checkpoint_gives_identical_forward_outputs() {
    let task = synth::named_tool_task(5, 30, 30);
    let emb = HashingEmbedder::new(32);
    let out = train::train(&task.train, &task.graph, &emb, None, &small_cfg(2), None).unwrap();
    let mut bytes = Vec::new();
    out.last.write_to(&mut bytes).unwrap();
    let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
    let inputs = GraphInputs::build(&task.graph, &emb, AdjacencyMode::SymNormalized).unwrap();
    let probe = EmbeddingMatrix::from_rows(vec![vec![0.25; 32], vec![-0.5; 32]]).unwrap();
    let a = forward(&out.last.params, &inputs.adj, &inputs.feats, &probe).unwrap();
    let b = forward(&back.params, &inputs.adj, &inputs.feats, &probe).unwrap();
    assert_eq!(a.per_subtask, b.per_subtask);
    assert_eq!(back.optimizer, out.last.optimizer);
}

fn tiny() -> (ModelParams, GraphInputs, Vec<TrainingExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let graph = synth::path_graph(5);
    let emb = HashingEmbedder::new(16);
    let inputs = GraphInputs::build(&graph, &emb, AdjacencyMode::SymNormalized).unwrap();
    let dims = ModelDims {
        input: 16,
        gcn_width: 4,
        projected: 3,
        word: 6,
        hidden: vec![5],
    };
    let examples = (0..3)
        .map(|s| TrainingExample {
            subtask_embs: EmbeddingMatrix::from_array(Array2::from_shape_simple_fn((s + 1, 6), || rng.random_range(-1.0..1.0))),
            labels: Array1::from_shape_fn(5, |i| f64::from(u8::from((i + s) % 2 == 0))),
        })
        .collect();
    (ModelParams::init(dims, 4).unwrap(), inputs, examples)
}

#[test]
fn duplicating_the_batch_keeps_the_gradient() {
    let (params, inputs, examples) = tiny();
    let once: Vec<&TrainingExample> = examples.iter().collect();
    let twice: Vec<&TrainingExample> = examples.iter().chain(&examples).collect();
    let (la, ga) = backward(&params, &inputs, &once).unwrap();
    let (lb, gb) = backward(&params, &inputs, &twice).unwrap();
    assert!((la - lb).abs() < 1e-12);
    for (x, y) in ga.tensors().iter().zip(gb.tensors()) {
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn saturated_correct_predictions_have_no_gradient() {
    let (mut params, inputs, mut examples) = tiny();
    for layer in &mut params.decoder {
        layer.weight.fill(0.0);
    }
    params.decoder.last_mut().unwrap().bias.fill(40.0);
    for ex in &mut examples {
        ex.labels.fill(1.0);
    }
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let (loss, grads) = backward(&params, &inputs, &refs).unwrap();
    assert!(loss < 1e-9);
    assert!(grads.l2_norm() < 1e-6);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (params, inputs, examples) = tiny();
    let refs: Vec<&TrainingExample> = examples.iter().collect();
    let (_, grads) = backward(&params, &inputs, &refs).unwrap();
    let mut stepped = params.clone();
    let mut state = AdamWState::for_params(&stepped);
    let cfg = AdamWConfig {
        learning_rate: 0.0,
        ..AdamWConfig::default()
    };
    adamw_step(&mut stepped, &grads, &mut state, &cfg);
    assert_eq!(stepped, params);
}

proptest! {
    #[test]
    fn loss_is_non_negative(pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..30)) {
        let probs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(p.1))).collect();
        let loss = ce_loss(&probs, &labels).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }

    #[test]
    fn init_is_bounded_and_reproducible(seed in any::<u64>()) {
        let dims = ModelDims { input: 7, gcn_width: 5, projected: 4, word: 3, hidden: vec![6] };
        let a = ModelParams::init(dims.clone(), seed).unwrap();
        prop_assert_eq!(&a, &ModelParams::init(dims, seed).unwrap());
        let bound = (6.0f64 / 12.0).sqrt();
        prop_assert!(a.w1.iter().all(|w| w.abs() < bound));
    }
}
