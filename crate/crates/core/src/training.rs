//! Seeded training runs, evaluation and the prime-count sweep.
//!
//! A run draws everything from two ChaCha8 streams derived from the master
//! seed: one initializes the weights, the other shuffles the training set and
//! hands out one dropout seed per sample. Each epoch reshuffles and consumes
//! `steps_per_epoch` batches; if the permutation runs out mid-epoch the batch
//! is cut short and a fresh shuffle continues from there.
//!
//! Evaluation and checkpoints happen twice per epoch: after step 0 (the first
//! optimizer step) and at the end of the epoch.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::{self, AdamConfig, ArchConfig, CheckpointMeta, CnnModel, Mode};
use crate::numtheory::primes_up_to;

/// Offset between the weight-init seed and the data-stream seed of a run.
const DATA_STREAM_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
/// Offset between the seeds of consecutive sweep runs.
pub const SWEEP_SEED_STRIDE: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Prime bound b; the input length is pi(b).
    pub bound: u64,
    pub arch: ArchConfig,
}

impl TrainConfig {
    /// Batch 3000, learning rate 0.001, ten steps per epoch, reference network.
    pub fn reference(bound: u64, num_classes: usize, epochs: usize, seed: u64) -> Result<TrainConfig> {
        let input_length = primes_up_to(bound)?.count();
        Ok(TrainConfig {
            batch_size: 3000,
            learning_rate: 0.001,
            steps_per_epoch: 10,
            epochs,
            seed,
            bound,
            arch: ArchConfig::reference(input_length, num_classes),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Domain("batch size and steps per epoch must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {}", self.learning_rate)));
        }
        self.arch.summary()?;
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch.
    pub epoch: u32,
    /// 0-based step within the epoch after which the evaluation happened.
    pub step: u32,
    /// Mean training loss over the epoch's batches so far.
    pub loss: f64,
    pub accuracy: f64,
    pub predicted_counts: Vec<usize>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub dataset_fingerprint: String,
    pub train_size: usize,
    pub test_size: usize,
    pub records: Vec<EpochRecord>,
    /// Maximum accuracy over the epoch-end evaluations.
    pub best_accuracy: Option<f64>,
    pub failure: Option<String>,
}

impl RunManifest {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn epoch_end_records(&self) -> impl Iterator<Item = &EpochRecord> + '_ {
        let last = self.config.steps_per_epoch as u32 - 1;
        self.records.iter().filter(move |r| r.step == last)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<RunManifest> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Per-evaluation metrics as CSV: `epoch,step,loss,accuracy,pred_count_0..k`.
pub fn metrics_csv(manifest: &RunManifest) -> String {
    let k = manifest.config.num_classes();
    let mut out = String::from("epoch,step,loss,accuracy");
    for v in 0..k {
        let _ = write!(out, ",pred_count_{v}");
    }
    out.push('\n');
    for r in &manifest.records {
        let _ = write!(out, "{},{},{},{}", r.epoch, r.step, r.loss, r.accuracy);
        for c in &r.predicted_counts {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

pub fn checkpoint_name(epoch: u32, step: u32) -> String {
    format!("ckpt_e{epoch:04}_s{step:02}.ecnn")
}

/// Where a run writes checkpoints and what it records about its input.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub dataset_fingerprint: String,
}

pub struct TrainOutcome {
    pub model: CnnModel,
    pub manifest: RunManifest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predicted: Vec<usize>,
    /// Row indices grouped by predicted class.
    pub partition: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn predicted_counts(&self) -> Vec<usize> {
        self.partition.iter().map(|g| g.len()).collect()
    }
}

pub fn evaluate(model: &CnnModel, test: &FeatureMatrix) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let k = model.num_classes();
    check_labels(test, k)?;
    let predicted = model.predict_all(test)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut partition = vec![Vec::new(); k];
    let mut correct = 0usize;
    for (i, (&p, &t)) in predicted.iter().zip(test.labels()).enumerate() {
        confusion[t][p] += 1;
        partition[p].push(i);
        correct += (p == t) as usize;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / test.rows() as f64,
        confusion,
        predicted,
        partition,
    })
}

fn check_labels(data: &FeatureMatrix, num_classes: usize) -> Result<()> {
    if let Some(&bad) = data.labels().iter().find(|&&l| l >= num_classes) {
        return Err(Error::Domain(format!("label {bad} outside [0, {num_classes})")));
    }
    Ok(())
}

/// Runs training. A numeric failure during optimization (non-finite loss or
/// gradient) returns [`Error::Aborted`] with the manifest up to that point.
pub fn train(config: &TrainConfig, train_set: &FeatureMatrix, test_set: &FeatureMatrix, options: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    for (name, m) in [("training", train_set), ("test", test_set)] {
        if m.width() != config.arch.input_length {
            return Err(Error::Dimension(format!(
                "{name} features have width {}, model expects {}",
                m.width(),
                config.arch.input_length
            )));
        }
        check_labels(m, config.num_classes())?;
    }

    let mut model = CnnModel::new(config.arch.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(DATA_STREAM_OFFSET));
    let adam = config.adam();
    let n = train_set.rows();
    let mut manifest = RunManifest {
        config: config.clone(),
        dataset_fingerprint: options.dataset_fingerprint.clone(),
        train_size: n,
        test_size: test_set.rows(),
        records: Vec::new(),
        best_accuracy: None,
        failure: None,
    };
    let last_step = config.steps_per_epoch - 1;

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs as u32 {
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut loss_sum = 0.0;
        for step in 0..config.steps_per_epoch {
            let end = (cursor + config.batch_size).min(n);
            let batch = &order[cursor..end];
            let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
            model.set_mode(Mode::Train);
            let result = model
                .batch_gradients(train_set, batch, &seeds)
                .and_then(|(loss, grads)| {
                    if !loss.is_finite() {
                        return Err(Error::NonFinite(format!("training loss {loss}")));
                    }
                    model.apply_gradients(&adam, &grads)?;
                    Ok(loss)
                });
            let loss = match result {
                Ok(l) => l,
                Err(e) => {
                    let reason = format!("epoch {epoch}, step {step}: {e}");
                    manifest.failure = Some(reason.clone());
                    return Err(Error::Aborted {
                        reason,
                        manifest: Box::new(manifest),
                    });
                }
            };
            loss_sum += loss;
            cursor = end;
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }

            if step == 0 || step == last_step {
                model.set_mode(Mode::Eval);
                let eval = evaluate(&model, test_set)?;
                let checkpoint = match &options.checkpoint_dir {
                    Some(dir) => {
                        let name = checkpoint_name(epoch, step as u32);
                        let meta = CheckpointMeta {
                            seed: config.seed,
                            epoch,
                            step: step as u32,
                        };
                        nn::save_checkpoint(&model, meta, &dir.join(&name))?;
                        Some(name)
                    }
                    None => None,
                };
                if step == last_step {
                    let best = manifest.best_accuracy.unwrap_or(0.0).max(eval.accuracy);
                    manifest.best_accuracy = Some(best);
                }
                manifest.records.push(EpochRecord {
                    epoch,
                    step: step as u32,
                    loss: loss_sum / (step + 1) as f64,
                    accuracy: eval.accuracy,
                    predicted_counts: eval.predicted_counts(),
                    checkpoint,
                });
            }
        }
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome { model, manifest })
}

/// Checkpoints listed in a manifest, resolved against the run directory.
pub fn manifest_checkpoints(manifest: &RunManifest, run_dir: &Path) -> Vec<(u32, u32, PathBuf)> {
    manifest
        .records
        .iter()
        .filter_map(|r| r.checkpoint.as_ref().map(|c| (r.epoch, r.step, run_dir.join(c))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bound: u64,
    pub prime_count: usize,
    pub best_accuracy: f64,
    pub seed: u64,
}

/// Trains one model per bound on the feature prefix of length pi(b).
/// `train_set` and `test_set` hold features for every prime up to `config.bound`.
pub fn sweep_primes(config: &TrainConfig, train_set: &FeatureMatrix, test_set: &FeatureMatrix, bounds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(bounds.len());
    for (i, &b) in bounds.iter().enumerate() {
        if b > config.bound {
            return Err(Error::Domain(format!(
                "sweep bound {b} exceeds the feature bound {}",
                config.bound
            )));
        }
        let width = primes_up_to(b)?.count();
        let seed = config.seed.wrapping_add(i as u64 * SWEEP_SEED_STRIDE);
        let run = TrainConfig {
            seed,
            bound: b,
            arch: ArchConfig {
                input_length: width,
                ..config.arch.clone()
            },
            ..config.clone()
        };
        let outcome = train(
            &run,
            &train_set.truncate_width(width)?,
            &test_set.truncate_width(width)?,
            &RunOptions::default(),
        )?;
        rows.push(SweepRow {
            bound: b,
            prime_count: width,
            best_accuracy: outcome.manifest.best_accuracy.unwrap_or(0.0),
            seed,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("bound,prime_count,best_accuracy,seed\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.bound, r.prime_count, r.best_accuracy, r.seed);
    }
    out
}

/// Two classes separated by a fixed sign pattern: class 0 rows have
/// `x_p = s_p * m_p`, class 1 rows `x_p = -s_p * m_p`, with magnitudes
/// `m_p` uniform in [0.2, 1] and `s_p` a +-1 pattern drawn from `pattern_seed`.
/// Sets that share `pattern_seed` come from the same two classes.
pub fn sign_pattern_dataset(width: usize, rows: usize, pattern_seed: u64, sample_seed: u64) -> Result<FeatureMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(pattern_seed);
    let pattern: Vec<f64> = (0..width).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut data = Vec::with_capacity(width * rows);
    let mut labels = Vec::with_capacity(rows);
    for i in 0..rows {
        let label = i % 2;
        let sign = if label == 0 { 1.0 } else { -1.0 };
        data.extend(pattern.iter().map(|s| sign * s * rng.random_range(0.2..1.0)));
        labels.push(label);
    }
    FeatureMatrix::new(width, data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(width: usize, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            learning_rate: 0.001,
            steps_per_epoch: 4,
            epochs,
            seed,
            bound: 0,
            arch: ArchConfig {
                conv_channels: vec![2, 2],
                fc_widths: vec![8],
                ..ArchConfig::reference(width, 2)
            },
        }
    }

    #[test]
    fn reference_config() {
        let c = TrainConfig::reference(10_000, 5, 100, 1).unwrap();
        assert_eq!(c.arch.input_length, 1229);
        assert_eq!((c.batch_size, c.steps_per_epoch, c.learning_rate), (3000, 10, 0.001));
    }

    #[test]
    fn constant_predictor_on_one_class() {
        let mut model = CnnModel::zeros(ArchConfig::linear(3, 5)).unwrap();
        model.linears_mut()[0].bias[1] = 1.0;
        let data = FeatureMatrix::new(3, vec![0.5; 12], vec![1; 4]).unwrap();
        let eval = evaluate(&model, &data).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert_eq!(eval.predicted_counts(), vec![0, 4, 0, 0, 0]);
    }

    #[test]
    fn confusion_rows_are_class_counts() {
        let model = CnnModel::new(ArchConfig::linear(4, 3), 9).unwrap();
        let labels = vec![0, 1, 2, 2, 1, 0, 0];
        let data: Vec<f64> = (0..28).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.5).collect();
        let m = FeatureMatrix::new(4, data, labels.clone()).unwrap();
        let eval = evaluate(&model, &m).unwrap();
        for (v, row) in eval.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == v).count());
        }
        assert_eq!(eval.predicted_counts().iter().sum::<usize>(), 7);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let empty = FeatureMatrix::new(6, vec![], vec![]).unwrap();
        let data = sign_pattern_dataset(6, 8, 0, 0).unwrap();
        assert!(train(&toy_config(6, 1, 0), &empty, &data, &RunOptions::default()).is_err());
        assert!(train(&toy_config(6, 1, 0), &data, &empty, &RunOptions::default()).is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let train_set = sign_pattern_dataset(10, 40, 0, 1).unwrap();
        let test_set = sign_pattern_dataset(10, 10, 0, 2).unwrap();
        let cfg = toy_config(10, 2, 3);
        let a = train(&cfg, &train_set, &test_set, &RunOptions::default()).unwrap();
        let b = train(&cfg, &train_set, &test_set, &RunOptions::default()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.model, b.model);
        // step 0 and epoch end, per epoch
        assert_eq!(a.manifest.records.len(), 4);
        for r in &a.manifest.records {
            assert_eq!(r.predicted_counts.iter().sum::<usize>(), 10);
            assert!((0.0..=1.0).contains(&r.accuracy));
        }
    }

    #[test]
    fn loss_descends_on_fixed_batch() {
        let data = sign_pattern_dataset(10, 32, 0, 4).unwrap();
        let mut model = CnnModel::new(toy_config(10, 1, 5).arch, 5).unwrap();
        let idx: Vec<usize> = (0..32).collect();
        let adam = AdamConfig::default();
        let mut losses = Vec::new();
        for _ in 0..6 {
            let (loss, grads) = model.batch_gradients(&data, &idx, &[]).unwrap();
            losses.push(loss);
            model.apply_gradients(&adam, &grads).unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn checkpoints_reproduce_manifest_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let train_set = sign_pattern_dataset(10, 40, 0, 6).unwrap();
        let test_set = sign_pattern_dataset(10, 12, 0, 7).unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            dataset_fingerprint: "toy".into(),
        };
        let out = train(&toy_config(10, 2, 8), &train_set, &test_set, &opts).unwrap();
        let ckpts = manifest_checkpoints(&out.manifest, dir.path());
        assert_eq!(ckpts.len(), 4);
        for (record, (_, _, path)) in out.manifest.records.iter().zip(ckpts) {
            let (model, _) = nn::load_checkpoint(&path).unwrap();
            assert_eq!(evaluate(&model, &test_set).unwrap().accuracy, record.accuracy);
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let train_set = sign_pattern_dataset(6, 20, 0, 1).unwrap();
        let out = train(&toy_config(6, 1, 0), &train_set, &train_set, &RunOptions::default()).unwrap();
        let csv = metrics_csv(&out.manifest);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,step,loss,accuracy,pred_count_0,pred_count_1"));
        assert!(lines.next().unwrap().starts_with("1,0,"));
        assert!(lines.next().unwrap().starts_with("1,3,"));
    }

    #[test]
    fn sweep_smoke() {
        let train_set = sign_pattern_dataset(25, 30, 0, 1).unwrap();
        let test_set = sign_pattern_dataset(25, 10, 0, 2).unwrap();
        let cfg = TrainConfig {
            bound: 100,
            ..toy_config(25, 1, 0)
        };
        let rows = sweep_primes(&cfg, &train_set, &test_set, &[10, 100]).unwrap();
        assert_eq!(rows[0].prime_count, 4);
        assert_eq!(rows[1].prime_count, 25);
        assert!(sweep_primes(&cfg, &train_set, &test_set, &[101]).is_err());
    }
}
