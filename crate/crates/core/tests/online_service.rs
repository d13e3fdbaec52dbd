mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use specklenn::dataset::{Dataset, HitLabel};
use specklenn::embedding::EmbeddingNet;
use specklenn::error::Error;
use specklenn::fewshot::classify_pattern;
use specklenn::network::EmbeddingNetConfig;
use specklenn::service::{Event, FrameState, OnlineTrainConfig, Service, ServiceConfig};
use specklenn::triplet::TrainerConfig;

const S: HitLabel = HitLabel::SingleHit;
const M: HitLabel = HitLabel::MultiHit;
const N: HitLabel = HitLabel::NonSampleHit;

fn model(seed: u64) -> EmbeddingNet<f32> {
    EmbeddingNet::build(EmbeddingNetConfig::desk(), seed).unwrap()
}

fn frame(rng: &mut impl Rng, bright: f32) -> Vec<f32> {
    (0..96 * 96).map(|_| rng.random::<f32>().powi(4) * bright).collect()
}

fn quick_online() -> OnlineTrainConfig {
    OnlineTrainConfig {
        trainer: TrainerConfig { epochs: 1, batch_size: 16, triplets_per_batch: 16, seed: 4, ..TrainerConfig::default() },
        train_budget: 16,
        val_budget: 8,
        ..OnlineTrainConfig::default()
    }
}

fn config(shots: usize, min: usize) -> ServiceConfig {
    ServiceConfig { shots, retrain_min_labels: min, online: quick_online(), ..ServiceConfig::default() }
}

fn ingest_n(svc: &Service, seed: u64, n: usize) -> Vec<u64> {
    let mut rng = common::rng(seed);
    (0..n).map(|i| svc.ingest(frame(&mut rng, 100.0 + 50.0 * (i % 3) as f32), None).unwrap()).collect()
}

#[test]
fn frame_lifecycle_and_errors() {
    let svc = Service::new(config(2, 0), model(1)).unwrap();
    let ids = ingest_n(&svc, 1, 4);
    assert_eq!(ids, vec![0, 1, 2, 3]);
    assert!(matches!(svc.classify(0), Err(Error::NotReady(_))));
    assert!(matches!(svc.label(99, S), Err(Error::UnknownFrame(99))));
    assert!(matches!(svc.label(0, HitLabel::NoHit), Err(Error::Invalid(_))));
    assert!(svc.ingest(vec![0.0; 10], None).is_err());
    assert!(svc.ingest(vec![0.0; 96 * 96], Some(vec![true; 3])).is_err());

    svc.label(0, S).unwrap();
    let r = svc.classify(1).unwrap();
    assert_eq!(r.classification.predicted, S);
    assert_eq!((r.model_version, r.support_version), (0, 1));
    assert!(matches!(svc.frame(1).unwrap().state, FrameState::Classified { predicted: S, model_version: 0, support_version: 1 }));

    // a labeled frame keeps its label state when classified
    svc.classify(0).unwrap();
    assert_eq!(svc.frame(0).unwrap().state, FrameState::Labeled { label: S });

    // relabel: latest wins, history is audited
    let ack = svc.label(0, M).unwrap();
    assert_eq!(ack.previous, Some(S));
    let rec = svc.frame(0).unwrap();
    assert_eq!(rec.state, FrameState::Labeled { label: M });
    assert_eq!(rec.label_history.iter().map(|c| (c.label, c.previous)).collect::<Vec<_>>(), vec![(S, None), (M, Some(S))]);

    assert_eq!(svc.frames(Some("labeled")).unwrap().len(), 1);
    assert_eq!(svc.frames(Some("classified")).unwrap().len(), 1);
    assert_eq!(svc.frames(Some("unlabeled")).unwrap().len(), 2);
    assert_eq!(svc.frames(None).unwrap().len(), 4);
    assert!(svc.frames(Some("bogus")).is_err());
}

#[test]
fn supports_are_pins_then_most_recent_labels() {
    let svc = Service::new(config(2, 0), model(2)).unwrap();
    ingest_n(&svc, 2, 8);
    for id in 0..4 {
        svc.label(id, S).unwrap();
    }
    svc.label(4, M).unwrap();
    let view = svc.supports();
    assert_eq!(view.classes[0].frame_ids, vec![3, 2]);
    assert_eq!(view.classes[1].frame_ids, vec![4]);
    assert!(view.classes[2].frame_ids.is_empty());

    let v = view.support_version;
    let pinned = svc.pin(S, vec![0]).unwrap();
    assert_eq!(pinned.classes[0].frame_ids, vec![0, 3]);
    assert_eq!(pinned.classes[0].pinned, vec![0]);
    assert_eq!(pinned.support_version, v + 1);

    // re-labeling the same frame with the same label changes nothing
    svc.label(3, S).unwrap();
    assert_eq!(svc.supports().support_version, v + 1);
    // newer label displaces the unpinned support, the pin stays
    svc.label(1, S).unwrap();
    assert_eq!(svc.supports().classes[0].frame_ids, vec![0, 1]);

    assert!(svc.pin(S, vec![4]).is_err(), "frame 4 is labeled multi_hit");
    assert!(svc.pin(S, vec![0, 1, 2]).is_err(), "more pins than shots");
    assert!(svc.pin(S, vec![0, 0]).is_err());
    assert!(matches!(svc.pin(S, vec![77]), Err(Error::UnknownFrame(77))));

    // relabeling a pinned frame drops the pin
    svc.label(0, N).unwrap();
    let view = svc.supports();
    assert!(view.classes[0].pinned.is_empty());
    assert_eq!(view.classes[2].frame_ids, vec![0]);

    // classification uses exactly the advertised supports
    let snap = svc.snapshot();
    let support = snap.support.as_ref().unwrap();
    for (class, (label, ids)) in support.classes().iter().zip(snap.members.iter().filter(|(_, ids)| !ids.is_empty())) {
        assert_eq!(class.label, *label);
        assert_eq!(class.entries.iter().map(|e| e.source_id).collect::<Vec<_>>(), *ids);
    }
}

#[test]
fn retrain_trigger_fires_once_every_class_has_enough_new_labels() {
    let cfg = ServiceConfig { labels: vec![S, M], ..config(5, 3) };
    let svc = Service::new(cfg, model(3)).unwrap();
    ingest_n(&svc, 3, 13);
    let mut fired = Vec::new();
    for (id, l) in [(0, S), (1, S), (2, S), (3, S), (4, M), (5, M), (6, M), (7, S), (8, M), (9, M), (10, M), (11, S), (12, S)] {
        fired.push(svc.label(id, l).unwrap().retrain_triggered);
    }
    // fires when multi_hit reaches 3 (single_hit already has 4), then both
    // counters restart and single_hit needs three fresh labels again
    assert_eq!(fired, vec![false, false, false, false, false, false, true, false, false, false, false, false, true]);
    assert!(svc.status().labels_toward_retrain.values().all(|&n| n == 0));

    let off = Service::new(ServiceConfig { labels: vec![S, M], ..config(5, 0) }, model(3)).unwrap();
    ingest_n(&off, 3, 10);
    for id in 0..10 {
        assert!(!off.label(id, if id % 2 == 0 { S } else { M }).unwrap().retrain_triggered);
    }
}

#[test]
fn replay_of_a_thousand_frames_is_bit_exact_and_matches_offline() {
    let svc = Service::new(config(5, 0), model(4)).unwrap();
    let ids = ingest_n(&svc, 4, 1000);
    for (k, &id) in ids.iter().take(15).enumerate() {
        svc.label(id, [S, M, N][k % 3]).unwrap();
    }
    let first = svc.classify_many(&ids[15..500]).unwrap();
    svc.install_model(model(40)).unwrap();
    svc.label(ids[500], M).unwrap();
    svc.pin(S, vec![ids[0]]).unwrap();
    let mut live = first;
    for &id in &ids[501..] {
        live.push(svc.classify(id).unwrap());
    }
    assert_eq!(live.len(), 984);

    // offline: the attributed snapshot's model and supports give the same answer
    for r in live.iter().step_by(37) {
        let snap = svc.snapshot_at(r.model_version, r.support_version).unwrap();
        let img = svc.frame(r.frame_id).unwrap().image;
        let want = classify_pattern(&snap.model, &img, snap.support.as_ref().unwrap()).unwrap();
        assert_eq!(r.classification, want);
    }

    let log = svc.replay_log();
    let replayed = Service::replay(svc.config().clone(), &log).unwrap();
    assert_eq!(replayed, live);
    let versions: Vec<(u64, u64)> = live.iter().map(|r| (r.model_version, r.support_version)).collect();
    assert!(versions.contains(&(0, 15)) && versions.iter().any(|v| v.0 == 1));
    assert!(log.events.iter().any(|e| matches!(e, Event::Swap { model_version: 1, .. })));
}

#[test]
fn concurrent_swaps_never_tear_a_snapshot() {
    let svc = Arc::new(Service::new(config(3, 0), model(5)).unwrap());
    let ids = ingest_n(&svc, 5, 40);
    for (k, &id) in ids.iter().take(6).enumerate() {
        svc.label(id, [S, M][k % 2]).unwrap();
    }
    let stop = Arc::new(AtomicBool::new(false));
    let seen = Arc::new(Mutex::new(Vec::new()));
    {
        let seen = Arc::clone(&seen);
        svc.subscribe(move |r| seen.lock().unwrap().push(r.clone()));
    }
    let workers: Vec<_> = (0..2)
        .map(|w| {
            let (svc, stop, ids) = (Arc::clone(&svc), Arc::clone(&stop), ids.clone());
            std::thread::spawn(move || {
                let mut out = Vec::new();
                let mut k = w;
                while !stop.load(Ordering::Relaxed) || out.len() < 10 {
                    out.push(svc.classify(ids[6 + k % 34]).unwrap());
                    k += 2;
                }
                out
            })
        })
        .collect();
    for seed in 50..54 {
        svc.install_model(model(seed)).unwrap();
        std::thread::sleep(Duration::from_millis(20));
    }
    stop.store(true, Ordering::Relaxed);
    let results: Vec<_> = workers.into_iter().flat_map(|h| h.join().unwrap()).collect();
    assert_eq!(svc.snapshot().model_version, 4);
    assert_eq!(seen.lock().unwrap().len(), results.len());
    for r in &results {
        let snap = svc.snapshot_at(r.model_version, r.support_version).expect("attributed snapshot exists");
        assert_eq!(snap.model_version, r.model_version);
        let img = svc.frame(r.frame_id).unwrap().image;
        assert_eq!(r.classification, classify_pattern(&snap.model, &img, snap.support.as_ref().unwrap()).unwrap());
    }
    let replayed = Service::replay(svc.config().clone(), &svc.replay_log()).unwrap();
    let mut a = replayed;
    let mut b = results;
    let key = |r: &specklenn::service::ServiceResult| (r.model_version, r.support_version, r.frame_id);
    a.sort_by_key(key);
    b.sort_by_key(key);
    assert_eq!(a, b);
}

#[test]
fn online_retrain_swaps_in_a_new_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig { spool_dir: Some(dir.path().join("spool")), ..config(2, 2) };
    let svc = Arc::new(Service::new(cfg, model(6)).unwrap());
    let ids = ingest_n(&svc, 6, 8);
    let mut triggered = false;
    for (k, &id) in ids.iter().take(6).enumerate() {
        triggered |= svc.label(id, [S, M, N][k % 3]).unwrap().retrain_triggered;
    }
    assert!(triggered);
    let before = svc.classify(7).unwrap();
    assert!(svc.spawn_retrain());
    assert!(!svc.spawn_retrain(), "second request queues behind the running one");
    let t = Instant::now();
    while svc.status().retraining {
        assert!(t.elapsed() < Duration::from_secs(300));
        std::thread::sleep(Duration::from_millis(20));
    }
    let st = svc.status();
    assert_eq!(st.last_retrain_error, None);
    assert_eq!(st.retrains_completed, 2);
    assert_eq!(st.model_version, 2);
    let after = svc.classify(7).unwrap();
    assert_eq!(after.model_version, 2);
    assert_ne!(before.classification.distances, after.classification.distances);

    let spool = Dataset::load(dir.path().join("spool")).unwrap();
    assert_eq!(spool.patterns.len(), 6);
    assert_eq!(spool.patterns.iter().map(|p| p.id).collect::<Vec<_>>(), ids[..6].to_vec());
    assert_eq!(spool.patterns[1].label, M);
}

#[test]
fn retrain_needs_two_classes() {
    let svc = Service::new(config(2, 0), model(7)).unwrap();
    ingest_n(&svc, 7, 3);
    for id in 0..3 {
        svc.label(id, S).unwrap();
    }
    assert!(matches!(svc.retrain_now(), Err(Error::NotReady(_))));
    let st = svc.status();
    assert_eq!(st.labeled, 3);
    assert_eq!(st.label_counts["single_hit"], 3);
    assert_eq!(st.support_counts["single_hit"], 2);
}
