use proptest::prelude::*;
use uspilot_core::embed::{Embedder, EmbeddingMatrix, HashingEmbedder};
use uspilot_core::router::{self, confusion, route_embeddings, RouterParams, RouterTrainConfig};
use uspilot_core::synth;

fn quick_cfg() -> RouterTrainConfig {
    RouterTrainConfig {
        learning_rate: 1e-3,
        epochs: 10,
        hidden: [16, 8],
        ..RouterTrainConfig::default()
    }
}

#[test]
fn gate_and_softmax_pair_agree_after_training() {
    let questions = synth::question_set(5, 200);
    let (train, heldout) = questions.split_at(150);
    let emb = HashingEmbedder::new(64);
    let out = router::train_router(train, heldout, &emb, 2, &quick_cfg()).unwrap();
    let texts: Vec<String> = heldout.iter().map(|q| q.text()).collect();
    let x = emb.embed(&texts).unwrap();
    let labels: Vec<usize> = heldout.iter().map(|q| q.class).collect();
    let pair = out.params.to_softmax_pair();
    let gate = confusion(&out.params, &x, &labels).unwrap();
    assert_eq!(gate, confusion(&pair, &x, &labels).unwrap());
    assert_eq!(Some(gate), out.confusion);
}

proptest! {
    #[test]
    fn routing_is_deterministic_and_scores_are_distributions(
        seed in 0u64..1000,
        rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 12), 1..6),
        classes in 2usize..5,
    ) {
        let params = RouterParams::init(12, [8, 4], classes, seed).unwrap();
        let x = EmbeddingMatrix::from_rows(rows).unwrap();
        let a = route_embeddings(&params, &x).unwrap();
        prop_assert_eq!(&a, &route_embeddings(&params, &x).unwrap());
        for r in &a {
            prop_assert_eq!(r.scores.len(), classes);
            prop_assert!(r.scores.iter().all(|&s| s > 0.0 && s < 1.0));
            prop_assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.class < classes);
        }
    }
}
