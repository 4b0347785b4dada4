//! End-to-end checks through the public API only.

use moba_core::attention::{attention, dense_attention, moba_attention_oracle, moba_attention_pipeline, AttentionConfig};
use moba_core::gating::{make_partition, route_moba};
use moba_core::model::{
    layer_stack_forward, synthetic_corpus, train_from, train_run, AdamConfig, Checkpoint, LayerStackConfig,
    TrainSchedule,
};
use moba_core::tensor::{seeded_random, Tensor};
use proptest::prelude::*;

fn qkv(n: usize, h: usize, d: usize, seed: u64) -> [Tensor; 3] {
    [
        seeded_random(&[n, h, d], seed),
        seeded_random(&[n, h, d], seed + 1),
        seeded_random(&[n, h, d], seed + 2),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pipeline_matches_oracle(
        n in 1usize..80,
        block in 1usize..20,
        top_k in 1usize..6,
        h in 1usize..4,
        d in 1usize..9,
        seed in any::<u32>(),
    ) {
        let [q, k, v] = qkv(n, h, d, seed as u64);
        let config = AttentionConfig::moba(block, top_k, h, d);
        let partition = make_partition(n, block).unwrap();
        let routing = route_moba(&q, &k, &partition, top_k).unwrap();
        let oracle = moba_attention_oracle(&q, &k, &v, &routing, &partition, true).unwrap();
        let pipeline = moba_attention_pipeline(&q, &k, &v, &config).unwrap();
        prop_assert!(pipeline.max_abs_diff(&oracle).unwrap() <= 1e-10);
    }

    #[test]
    fn routing_rows_are_well_formed(
        n in 1usize..100,
        block in 1usize..24,
        top_k in 1usize..5,
        seed in any::<u32>(),
    ) {
        let [q, k, _] = qkv(n, 2, 4, seed as u64);
        let partition = make_partition(n, block).unwrap();
        let routing = route_moba(&q, &k, &partition, top_k).unwrap();
        prop_assert_eq!(routing.rows().len(), 2 * n);
        for row in routing.rows() {
            let current = (row.query_pos - 1) / block + 1;
            prop_assert_eq!(row.selected.len(), top_k.min(current));
            prop_assert!(row.contains(current));
            prop_assert!(row.selected.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(row.selected.iter().all(|&b| b >= 1 && b <= current));
        }
    }
}

#[test]
fn saturated_moba_is_dense_through_dispatch() {
    let [q, k, v] = qkv(37, 3, 5, 11);
    let sparse = attention(&q, &k, &v, &AttentionConfig::moba(6, 7, 3, 5)).unwrap();
    let dense = dense_attention(&q, &k, &v, true, true).unwrap();
    assert!(sparse.max_abs_diff(&dense).unwrap() <= 1e-12);
}

#[test]
fn f32_storage_tracks_f64() {
    let [q, k, v] = qkv(48, 2, 8, 3);
    let config = AttentionConfig::moba(8, 2, 2, 8);
    let wide = moba_attention_pipeline(&q, &k, &v, &config).unwrap();
    let narrow = moba_attention_pipeline(&q.cast::<f32>(), &k.cast::<f32>(), &v.cast::<f32>(), &config).unwrap();
    assert!(narrow.max_abs_diff(&wide).unwrap() <= 1e-5);
}

#[test]
fn checkpoint_resume_reproduces_forward() {
    let dir = tempfile::tempdir().unwrap();
    let config = LayerStackConfig::toy(8, 2);
    let schedule = TrainSchedule {
        total_tokens: 6 * 32,
        switch_fraction: 0.5,
        seq_len: 32,
        batch_size: 1,
        optimizer: AdamConfig::default(),
        seed: 4,
        checkpoint_every: Some(3),
    };
    let corpus = synthetic_corpus(200, 4);
    let report = train_run(&corpus, &config, &schedule, Some(dir.path())).unwrap();
    assert_eq!(report.checkpoints.len(), 3);

    let last = Checkpoint::read(&dir.path().join("final.json")).unwrap();
    let params = last.params().unwrap();
    assert_eq!(params, report.params);
    let tokens = &corpus[..32];
    let a = layer_stack_forward(&params, tokens, &config).unwrap();
    let b = layer_stack_forward(&report.params, tokens, &config).unwrap();
    assert_eq!(a.data(), b.data());

    // Training resumes from a loaded checkpoint without complaint.
    let mid = Checkpoint::read(&dir.path().join("step_000003.json")).unwrap();
    let resumed = train_from(mid.params().unwrap(), &corpus, &config, &schedule, None).unwrap();
    assert!(resumed.records.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"format":"something-else","version":1}"#).unwrap();
    assert!(Checkpoint::read(&path).is_err());
}
