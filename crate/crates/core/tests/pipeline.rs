use std::fs;
use std::path::Path;
use std::sync::Arc;

use proptest::prelude::*;

use ecrank_core::curve::{within_hasse_bound, ReductionType};
use ecrank_core::dataset::{self, split_train_test, SplitSpec};
use ecrank_core::interpret::{averaged_saliency, mn_sum, saliency_timeline};
use ecrank_core::nn::load_checkpoint;
use ecrank_core::training::{self, evaluate, manifest_checkpoints, RunOptions, TrainConfig};
use ecrank_core::{primes_up_to, TraceEngine};

fn fixture() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/curves_conductor_le_100.csv")
}

#[test]
fn ingest_cache_train_reload_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let parsed = dataset::parse_curve_csv(&fixture()).unwrap();
    assert!(!parsed.records.is_empty());
    let engine = TraceEngine::new(Arc::new(primes_up_to(100).unwrap()));
    let slice = dataset::filter_interval(&parsed.records, 0.0, f64::INFINITY)
        .unwrap()
        .compute_features(&engine)
        .unwrap();

    let cache = dir.path().join("c.apqv");
    dataset::cache_write(&slice, &cache).unwrap();
    let back = dataset::cache_read(&cache).unwrap();
    assert_eq!(back.records(), slice.records());
    assert_eq!(back.features(), slice.features());

    for t in back.features() {
        for (&a, &p) in t.ap_values().iter().zip(t.primes()) {
            assert!(within_hasse_bound(a, p));
        }
    }

    let (train, test) = split_train_test(&back, &SplitSpec::new(0.8, 5).unwrap()).unwrap();
    assert_eq!(train.len() + test.len(), back.len());
    let train_m = train.feature_matrix(None).unwrap();
    let test_m = test.feature_matrix(None).unwrap();
    let mut config = TrainConfig::reference(100, 5, 2, 11).unwrap();
    config.batch_size = 16;
    config.steps_per_epoch = 2;
    let run = dir.path().join("run");
    fs::create_dir(&run).unwrap();
    let options = RunOptions {
        checkpoint_dir: Some(run.clone()),
        dataset_fingerprint: dataset::fingerprint_file(&cache).unwrap(),
    };
    let outcome = training::train(&config, &train_m, &test_m, &options).unwrap();
    assert_eq!(outcome.manifest.records.len(), 4);

    let ckpts = manifest_checkpoints(&outcome.manifest, &run);
    let (last_epoch, last_step, last_path) = ckpts.last().unwrap();
    assert_eq!((*last_epoch, *last_step), (2, 1));
    let (reloaded, meta) = load_checkpoint(last_path).unwrap();
    assert_eq!(meta.epoch, 2);
    assert_eq!(reloaded.parameters(), outcome.model.parameters());
    let eval = evaluate(&reloaded, &test_m).unwrap();
    assert_eq!(eval.accuracy, outcome.manifest.final_record().unwrap().accuracy);

    let primes = engine.table().primes();
    let avg = averaged_saliency(&reloaded, &test_m, primes, 2, 1).unwrap();
    assert_eq!(avg.scores.len(), primes.len());
    assert!(avg.normalized.iter().all(|w| w.abs() <= 1.0));

    fs::remove_file(&ckpts[0].2).unwrap();
    let timeline = saliency_timeline(&ckpts, &test_m, primes).unwrap();
    assert_eq!(timeline.gaps.len(), 1);
    assert_eq!(timeline.entries.len(), (ckpts.len() - 1) * 5);
}

#[test]
fn fixture_traces_at_bad_primes_follow_reduction() {
    let parsed = dataset::parse_curve_csv(&fixture()).unwrap();
    let engine = TraceEngine::new(Arc::new(primes_up_to(100).unwrap()));
    for record in &parsed.records {
        let t = engine.trace_vector(record).unwrap();
        for (&a, &p) in t.ap_values().iter().zip(t.primes()) {
            if record.conductor % p == 0 {
                assert!(ReductionType::from_bad_trace(a).is_some(), "{} p={p} a={a}", record.label);
            }
        }
        assert!(mn_sum(&t, 100).unwrap().is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_a_partition(seed in any::<u64>(), ratio in 0.05f64..0.95) {
        let parsed = dataset::parse_curve_csv(&fixture()).unwrap();
        let slice = dataset::filter_interval(&parsed.records, 0.0, f64::INFINITY).unwrap();
        let (a, b) = split_train_test(&slice, &SplitSpec::new(ratio, seed).unwrap()).unwrap();
        let mut labels: Vec<String> = a.records().iter().chain(b.records()).map(|r| r.label.clone()).collect();
        labels.sort();
        let mut all: Vec<String> = slice.records().iter().map(|r| r.label.clone()).collect();
        all.sort();
        prop_assert_eq!(labels, all);
    }
}
