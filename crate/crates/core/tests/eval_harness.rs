mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng;
use specklenn::baseline::{BaselineConfig, BaselineModel};
use specklenn::dataset::{HitLabel, SpecklePattern};
use specklenn::embedding::EmbeddingNet;
use specklenn::eval::{
    confusion_from_records, fewshot_on_embeddings, restrict_to, run_fewshot_eval, run_fluence_sweep,
    run_masking_comparison, run_size_sweep, visible_region, ConfusionMatrix, ExperimentReport, FewShotConfig,
    FluenceSweepConfig, MaskingConfig, SizeSweepConfig,
};
use specklenn::network::EmbeddingNetConfig;
use specklenn::simulator::{build_dataset, Category, SimulationConfig, SIZE_BINS};
use specklenn::Error;

fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
    let classes = (0..counts.len()).map(|i| format!("c{i}")).collect();
    ConfusionMatrix { classes, counts }
}

#[test]
fn diagonal_matrix_is_perfect() {
    let m = cm(vec![vec![5, 0, 0], vec![0, 7, 0], vec![0, 0, 1]]).metrics().unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.per_class_f1, vec![1.0, 1.0, 1.0]);
    assert_eq!(m.macro_f1, 1.0);
}

#[test]
fn always_predicting_class_zero() {
    let m = cm(vec![vec![50, 0], vec![50, 0]]).metrics().unwrap();
    assert_eq!(m.accuracy, 0.5);
    assert!((m.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(m.per_class_f1[1], 0.0);
    assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn empty_matrix_has_no_metrics() {
    assert!(cm(vec![vec![0, 0], vec![0, 0]]).metrics().is_err());
}

proptest! {
    #[test]
    fn permuting_classes_permutes_f1(
        counts in proptest::collection::vec(0u64..20, 9),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let rows: Vec<Vec<u64>> = counts.chunks(3).map(<[u64]>::to_vec).collect();
        let base = cm(rows.clone());
        prop_assume!(base.total() > 0);
        let permuted = cm((0..3).map(|i| (0..3).map(|j| rows[perm[i]][perm[j]]).collect()).collect());
        let (a, b) = (base.metrics().unwrap(), permuted.metrics().unwrap());
        prop_assert_eq!(a.accuracy, b.accuracy);
        for i in 0..3 {
            prop_assert_eq!(b.per_class_f1[i], a.per_class_f1[perm[i]]);
        }
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&a.accuracy) && (0.0..=1.0).contains(&a.macro_f1));
    }
}

fn synthetic_pool(samples: u32, per_class: usize, labels: &[HitLabel]) -> Vec<SpecklePattern> {
    let mut out = Vec::new();
    for s in 0..samples {
        for (li, &l) in labels.iter().enumerate() {
            for k in 0..per_class {
                out.push(SpecklePattern {
                    id: (u64::from(s) << 32) | (li * 1000 + k) as u64,
                    sample_id: s,
                    label: l,
                    hit_multiplicity: 1,
                    n_atoms: 0,
                    fluence_factor: 1.0,
                    rng_seed: 0,
                    lineage: None,
                    intensity: Vec::new(),
                    mask: Vec::new(),
                });
            }
        }
    }
    out
}

/// Each class sits on its own axis with a little noise.
fn clustered(pool: &[SpecklePattern], labels: &[HitLabel], spread: f64, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = common::rng(seed);
    pool.iter()
        .map(|p| {
            let axis = labels.iter().position(|&l| l == p.label).unwrap();
            let mut v: Vec<f64> = (0..8).map(|_| rng.random_range(-spread..spread)).collect();
            v[axis] += 1.0;
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / n) as f32).collect()
        })
        .collect()
}

const THREE: [HitLabel; 3] = [HitLabel::SingleHit, HitLabel::MultiHit, HitLabel::NonSampleHit];

fn three_way(shots: usize, episodes: usize, seed: u64) -> FewShotConfig {
    FewShotConfig { shots, episodes, seed, classes: THREE.to_vec(), per_sample: true }
}

#[test]
fn perfectly_clustered_embeddings_classify_perfectly() {
    let pool = synthetic_pool(3, 12, &THREE);
    let emb = clustered(&pool, &THREE, 0.05, 1);
    let out = fewshot_on_embeddings(&pool, &emb, &three_way(5, 20, 2)).unwrap();
    assert_eq!(out.confusion.metrics().unwrap().accuracy, 1.0);
    assert!(out.episode_accuracy.iter().all(|&a| a == 1.0));
    assert_eq!(out.mean_accuracy(), 1.0);
}

#[test]
fn supports_are_never_queries_and_counts_add_up() {
    let pool = synthetic_pool(2, 9, &THREE);
    let emb = clustered(&pool, &THREE, 0.8, 3);
    let cfg = three_way(4, 6, 5);
    let out = fewshot_on_embeddings(&pool, &emb, &cfg).unwrap();
    // per episode: 2 samples × 3 classes × (9 − 4) queries
    for e in 0..6 {
        let ids: Vec<u64> = out.records.iter().filter(|r| r.episode == e).map(|r| r.pattern_id).collect();
        assert_eq!(ids.len(), 30);
        assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 30);
        // each class in each sample kept exactly 4 patterns back as supports
        for s in 0..2 {
            for l in THREE {
                let q = out.records.iter().filter(|r| r.episode == e && r.sample_id == s && r.truth == l).count();
                assert_eq!(q, 5);
            }
        }
    }
    assert_eq!(out.confusion.total(), out.records.len() as u64);
    assert_eq!(confusion_from_records(&THREE, &out.records), out.confusion);
    let recount: Vec<f64> = (0..6)
        .map(|e| {
            let rs: Vec<_> = out.records.iter().filter(|r| r.episode == e).collect();
            rs.iter().filter(|r| r.truth == r.predicted).count() as f64 / rs.len() as f64
        })
        .collect();
    assert_eq!(recount, out.episode_accuracy);
    for r in &out.records {
        let best = r.mean_distances.iter().copied().fold(f64::INFINITY, f64::min);
        let k = THREE.iter().position(|&l| l == r.predicted).unwrap();
        assert_eq!(r.mean_distances[k], best);
    }
}

#[test]
fn episodes_are_deterministic_and_independent_of_the_episode_count() {
    let pool = synthetic_pool(2, 8, &THREE);
    let emb = clustered(&pool, &THREE, 0.9, 4);
    let short = fewshot_on_embeddings(&pool, &emb, &three_way(2, 3, 9)).unwrap();
    let long = fewshot_on_embeddings(&pool, &emb, &three_way(2, 5, 9)).unwrap();
    assert_eq!(fewshot_on_embeddings(&pool, &emb, &three_way(2, 3, 9)).unwrap(), short);
    let prefix: Vec<_> = long.records.iter().filter(|r| r.episode < 3).cloned().collect();
    assert_eq!(prefix, short.records);
    assert_ne!(fewshot_on_embeddings(&pool, &emb, &three_way(2, 3, 10)).unwrap().records, short.records);
}

#[test]
fn a_class_without_enough_patterns_is_named() {
    let mut pool = synthetic_pool(1, 6, &THREE);
    pool.retain(|p| p.label != HitLabel::MultiHit || p.id % 1000 < 5);
    let emb = clustered(&pool, &THREE, 0.1, 5);
    match fewshot_on_embeddings(&pool, &emb, &three_way(5, 1, 0)) {
        Err(Error::ClassTooSmall { class, have, need }) => {
            assert!(class.contains("multi_hit") && class.contains("sample 0"), "{class}");
            assert_eq!((have, need), (5, 6));
        }
        other => panic!("{other:?}"),
    }
}

fn desk_model(seed: u64) -> EmbeddingNet<f32> {
    EmbeddingNet::build(EmbeddingNetConfig::desk(), seed).unwrap()
}

fn small_sim(samples: Vec<u32>, per: usize) -> SimulationConfig {
    SimulationConfig {
        sample_ids: samples,
        patterns_per_category: per,
        categories: vec![Category::Single, Category::Double],
        seed: 21,
        ..Default::default()
    }
}

#[test]
fn fewshot_eval_on_real_frames_matches_precomputed_embeddings() {
    let ds = build_dataset(&small_sim(vec![3], 4)).unwrap();
    let m = desk_model(1);
    let cfg = FewShotConfig { shots: 1, episodes: 4, seed: 2, ..Default::default() };
    let out = run_fewshot_eval(&m, &ds.patterns, &cfg).unwrap();
    let frames: Vec<&[f32]> = ds.patterns.iter().map(|p| p.intensity.as_slice()).collect();
    let emb = m.embed_frames(&frames).unwrap();
    let rows: Vec<Vec<f32>> = (0..ds.len()).map(|i| emb.row(i).to_vec()).collect();
    assert_eq!(fewshot_on_embeddings(&ds.patterns, &rows, &cfg).unwrap(), out);
    let acc = out.mean_accuracy();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn fluence_factor_order_does_not_change_results() {
    let m = desk_model(2);
    let base = FluenceSweepConfig {
        simulation: small_sim(vec![11], 3),
        factors: vec![0.1, 10.0],
        shots: vec![1, 2],
        episodes: 2,
        seed: 4,
        ..Default::default()
    };
    let a = run_fluence_sweep(&m, &base).unwrap();
    let b = run_fluence_sweep(&m, &FluenceSweepConfig { factors: vec![10.0, 0.1], ..base.clone() }).unwrap();
    assert_eq!(a.conditions.len(), 4);
    for c in &a.conditions {
        let d = b.find(|x| x.fluence_factor == c.fluence_factor && x.shots == c.shots).unwrap();
        assert_eq!(c, d);
        assert!((0.0..=1.0).contains(&c.accuracy) && (0.0..=1.0).contains(&c.f1));
    }
    assert!(run_fluence_sweep(&m, &FluenceSweepConfig { factors: vec![1.0, 0.0], ..base.clone() }).is_err());
    assert!(run_fluence_sweep(&m, &FluenceSweepConfig { factors: vec![f64::NAN], ..base }).is_err());
}

#[test]
fn size_sweep_reports_every_bin_with_its_configured_counts() {
    let m = desk_model(3);
    let cfg = SizeSweepConfig {
        simulation: small_sim(Vec::new(), 3),
        samples_per_bin: 1,
        fluences: vec![1.0],
        shots: 1,
        episodes: 2,
        ..Default::default()
    };
    let r = run_size_sweep(&m, &cfg).unwrap();
    assert_eq!(r.conditions.len(), SIZE_BINS);
    for (b, c) in r.conditions.iter().enumerate() {
        assert_eq!(c.size_bin, Some(b));
        // 2 episodes × 2 classes × (3 patterns − 1 support)
        assert_eq!(c.queries, 8);
        assert_eq!(c.per_entry.len(), 1);
    }
}

#[test]
fn partial_visibility_zeroes_and_flags_the_rest() {
    let ds = build_dataset(&small_sim(vec![1], 1)).unwrap();
    let vis = visible_region(96, 0.25).unwrap();
    let p = restrict_to(&ds.patterns[0], &vis);
    for i in 0..96 * 96 {
        if vis[i] {
            assert_eq!(p.intensity[i], ds.patterns[0].intensity[i]);
            assert_eq!(p.mask[i], ds.patterns[0].mask[i]);
        } else {
            assert_eq!((p.intensity[i], p.mask[i]), (0.0, false));
        }
    }
}

#[test]
fn masking_comparison_scores_both_models_on_the_same_queries() {
    let sim = SimulationConfig {
        categories: vec![Category::Single, Category::Double, Category::NonSampleHit],
        ..small_sim(vec![2, 5], 3)
    };
    let ds = build_dataset(&sim).unwrap();
    let emb = desk_model(4);
    let base = BaselineModel::<f32>::build(BaselineConfig::desk(), 4).unwrap();
    let cfg = MaskingConfig { shots: 1, episodes: 3, seed: 8, ..Default::default() };
    let r = run_masking_comparison(&emb, &base, &ds.patterns, &cfg).unwrap();
    assert_eq!(r.conditions.len(), 4);
    for pair in r.conditions.chunks(2) {
        assert_eq!((pair[0].model.as_str(), pair[1].model.as_str()), ("specklenn", "baseline"));
        assert_eq!(pair[0].queries, pair[1].queries);
        assert_eq!(pair[0].queries, 3 * 2 * 3 * 2);
        assert_eq!(pair[0].visible_fraction, pair[1].visible_fraction);
        assert_eq!(pair[0].confusion.classes, vec!["single_hit", "non_single_hit"]);
    }
    // full visibility is the plain few-shot evaluation, collapsed to two classes
    let plain = run_fewshot_eval(
        &emb,
        &ds.patterns,
        &FewShotConfig { shots: 1, episodes: 3, seed: 8, classes: cfg.classes.clone(), per_sample: true },
    )
    .unwrap();
    assert_eq!(r.conditions[0].confusion, plain.confusion.to_binary());

    let back: ExperimentReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(1).unwrap().starts_with("masking_comparison,specklenn,1,,1,,"));
    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path()).unwrap();
    assert!(dir.path().join("masking_comparison.json").exists() && dir.path().join("masking_comparison.csv").exists());
}
