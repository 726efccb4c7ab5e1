//! Saliency curves, Mestre–Nagao sums and murmuration averages.
//!
//! Saliency is the gradient of a raw class score with respect to the input
//! traces, taken in eval mode. Normalized curves divide by the largest
//! absolute entry, so they do not change when the score head is rescaled.

use std::fmt::Write as _;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curve::TraceVector;
use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nn::{self, CnnModel};
use crate::training::{evaluate, Evaluation};

/// Fixed number of chunks for ordered parallel sums over curves.
const SUM_CHUNKS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaliencyKind {
    /// Mean over curves of the absolute gradient of each curve's predicted class.
    AveragedAbs,
    /// Signed mean gradient of one class over the curves predicted in that class.
    ClassSigned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyCurve {
    pub kind: SaliencyKind,
    pub class: Option<usize>,
    pub epoch: u32,
    pub step: u32,
    pub primes: Vec<u64>,
    pub scores: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Number of curves averaged.
    pub count: usize,
}

/// Class saliency, or the marker that no curve was predicted in the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClassSaliency {
    Curve(SaliencyCurve),
    Empty { class: usize, epoch: u32, step: u32 },
}

impl ClassSaliency {
    pub fn class(&self) -> usize {
        match self {
            ClassSaliency::Curve(c) => c.class.expect("class curves carry a class"),
            ClassSaliency::Empty { class, .. } => *class,
        }
    }

    pub fn curve(&self) -> Option<&SaliencyCurve> {
        match self {
            ClassSaliency::Curve(c) => Some(c),
            ClassSaliency::Empty { .. } => None,
        }
    }
}

/// Divides by the largest absolute entry; an all-zero vector stays zero.
pub fn normalize_by_max_abs(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if max == 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| s / max).collect()
}

/// w^v(x): gradient of the raw class-v score at x.
pub fn saliency_per_curve(model: &CnnModel, x: &[f64], class: usize) -> Result<Vec<f64>> {
    model.input_gradient(x, class)
}

fn check_primes(primes: &[u64], data: &FeatureMatrix) -> Result<()> {
    if primes.len() != data.width() {
        return Err(Error::Dimension(format!(
            "{} primes for features of width {}",
            primes.len(),
            data.width()
        )));
    }
    Ok(())
}

/// Sum of `f(i)` over `rows`, in fixed chunks reduced in order.
fn ordered_sum<F>(rows: &[usize], width: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let chunk = rows.len().div_ceil(SUM_CHUNKS).max(1);
    let partials: Vec<Result<Vec<f64>>> = rows
        .par_chunks(chunk)
        .map(|c| {
            let mut acc = vec![0.0; width];
            for &i in c {
                for (a, v) in acc.iter_mut().zip(f(i)?) {
                    *a += v;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p?) {
            *t += v;
        }
    }
    Ok(total)
}

/// w_p = mean over test curves of |w_p^{c(E)}(E)|, and w_p / max_q w_q.
pub fn averaged_saliency(model: &CnnModel, test: &FeatureMatrix, primes: &[u64], epoch: u32, step: u32) -> Result<SaliencyCurve> {
    if test.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    check_primes(primes, test)?;
    let rows: Vec<usize> = (0..test.rows()).collect();
    let sum = ordered_sum(&rows, test.width(), |i| {
        let (_, g) = model.predicted_gradient(test.row(i))?;
        Ok(g.into_iter().map(f64::abs).collect())
    })?;
    let n = test.rows() as f64;
    let scores: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    Ok(SaliencyCurve {
        kind: SaliencyKind::AveragedAbs,
        class: None,
        epoch,
        step,
        primes: primes.to_vec(),
        normalized: normalize_by_max_abs(&scores),
        scores,
        count: test.rows(),
    })
}

/// W_p^v = signed mean of w_p^v over the curves predicted in class v.
pub fn class_saliency(
    model: &CnnModel,
    test: &FeatureMatrix,
    evaluation: &Evaluation,
    class: usize,
    primes: &[u64],
    epoch: u32,
    step: u32,
) -> Result<ClassSaliency> {
    check_primes(primes, test)?;
    let members = evaluation
        .partition
        .get(class)
        .ok_or_else(|| Error::Domain(format!("class {class} outside the partition")))?;
    if members.is_empty() {
        return Ok(ClassSaliency::Empty { class, epoch, step });
    }
    let sum = ordered_sum(members, test.width(), |i| model.input_gradient(test.row(i), class))?;
    let n = members.len() as f64;
    let scores: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    Ok(ClassSaliency::Curve(SaliencyCurve {
        kind: SaliencyKind::ClassSigned,
        class: Some(class),
        epoch,
        step,
        primes: primes.to_vec(),
        normalized: normalize_by_max_abs(&scores),
        scores,
        count: members.len(),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MestreNagaoWeights {
    pub bound: u64,
    pub primes: Vec<u64>,
    /// log(p)/sqrt(p) for each prime p <= b.
    pub weights: Vec<f64>,
    /// 2/log(b).
    pub prefactor: f64,
}

pub fn mn_weights(bound: u64) -> Result<MestreNagaoWeights> {
    if bound < 2 {
        return Err(Error::Domain(format!("Mestre–Nagao bound {bound} is below 2")));
    }
    let primes = crate::numtheory::primes_up_to(bound)?.primes().to_vec();
    let weights = primes.iter().map(|&p| (p as f64).ln() / (p as f64).sqrt()).collect();
    Ok(MestreNagaoWeights {
        bound,
        primes,
        weights,
        prefactor: 2.0 / (bound as f64).ln(),
    })
}

fn mn_terms<'a>(primes: &'a [u64], len: usize, bound: u64) -> Result<&'a [u64]> {
    if bound < 2 {
        return Err(Error::Domain(format!("Mestre–Nagao bound {bound} is below 2")));
    }
    if primes.len() != len {
        return Err(Error::Dimension(format!("{} primes, {len} traces", primes.len())));
    }
    let cut = primes.partition_point(|&p| p <= bound);
    Ok(&primes[..cut])
}

/// (1/log b) * sum_{p <= b} (log p / p) a_p.
pub fn mn_sum_raw(primes: &[u64], ap: &[i64], bound: u64) -> Result<f64> {
    let ps = mn_terms(primes, ap.len(), bound)?;
    let s: f64 = ps.iter().zip(ap).map(|(&p, &a)| (p as f64).ln() / p as f64 * a as f64).sum();
    Ok(s / (bound as f64).ln())
}

/// (2/log b) * sum_{p <= b} (log p / sqrt p) ã_p, with ã_p = a_p / (2 sqrt p).
pub fn mn_sum_normalized(primes: &[u64], normalized: &[f64], bound: u64) -> Result<f64> {
    let ps = mn_terms(primes, normalized.len(), bound)?;
    let s: f64 = ps
        .iter()
        .zip(normalized)
        .map(|(&p, &t)| (p as f64).ln() / (p as f64).sqrt() * t)
        .sum();
    Ok(2.0 / (bound as f64).ln() * s)
}

pub fn mn_sum(trace: &TraceVector, bound: u64) -> Result<f64> {
    if bound > trace.bound() {
        return Err(Error::Domain(format!(
            "bound {bound} exceeds the trace bound {}",
            trace.bound()
        )));
    }
    mn_sum_raw(trace.primes(), trace.ap_values(), bound)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MurmurationSeries {
    pub group: usize,
    /// Prime, or the lower edge of the prime window when binned.
    pub x: Vec<u64>,
    pub mean_ap: Vec<f64>,
    /// Number of a_p values behind each mean.
    pub counts: Vec<usize>,
    pub members: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MurmurationGroup {
    Series(MurmurationSeries),
    Empty { group: usize },
}

/// Per-group means of unnormalized a_p. `rows` yields (group, a_p row).
/// With `bin_width = Some(w)` primes are pooled into windows [k w, (k+1) w).
pub fn murmuration_average<I, R>(rows: I, primes: &[u64], num_groups: usize, bin_width: Option<u64>) -> Result<Vec<MurmurationGroup>>
where
    I: IntoIterator<Item = (usize, R)>,
    R: AsRef<[f64]>,
{
    if bin_width == Some(0) {
        return Err(Error::Domain("bin width must be positive".into()));
    }
    let slot: Vec<usize> = match bin_width {
        None => (0..primes.len()).collect(),
        Some(w) => {
            let first = primes.first().map_or(0, |p| p / w);
            primes.iter().map(|p| (p / w - first) as usize).collect()
        }
    };
    let slots = slot.last().map_or(0, |s| s + 1);
    let mut sums = vec![vec![0.0; slots]; num_groups];
    let mut counts = vec![vec![0usize; slots]; num_groups];
    let mut members = vec![0usize; num_groups];
    for (g, row) in rows {
        let row = row.as_ref();
        if g >= num_groups {
            return Err(Error::Domain(format!("group {g} outside [0, {num_groups})")));
        }
        if row.len() != primes.len() {
            return Err(Error::Dimension(format!("row of length {}, {} primes", row.len(), primes.len())));
        }
        members[g] += 1;
        for (&s, &a) in slot.iter().zip(row) {
            sums[g][s] += a;
            counts[g][s] += 1;
        }
    }
    let xs: Vec<u64> = match bin_width {
        None => primes.to_vec(),
        Some(w) => {
            let first = primes.first().map_or(0, |p| p / w);
            (0..slots as u64).map(|k| (first + k) * w).collect()
        }
    };
    Ok((0..num_groups)
        .map(|g| {
            if members[g] == 0 {
                return MurmurationGroup::Empty { group: g };
            }
            let keep: Vec<usize> = (0..slots).filter(|&s| counts[g][s] > 0).collect();
            MurmurationGroup::Series(MurmurationSeries {
                group: g,
                x: keep.iter().map(|&s| xs[s]).collect(),
                mean_ap: keep.iter().map(|&s| sums[g][s] / counts[g][s] as f64).collect(),
                counts: keep.iter().map(|&s| counts[g][s]).collect(),
                members: members[g],
            })
        })
        .collect())
}

/// Per-(epoch, step) class saliencies from a list of checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTimeline {
    pub entries: Vec<ClassSaliency>,
    /// Checkpoints that could not be read, with the reason.
    pub gaps: Vec<TimelineGap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineGap {
    pub epoch: u32,
    pub step: u32,
    pub path: PathBuf,
    pub reason: String,
}

impl SaliencyTimeline {
    pub fn nonempty(&self) -> impl Iterator<Item = &SaliencyCurve> + '_ {
        self.entries.iter().filter_map(ClassSaliency::curve)
    }
}

pub fn saliency_timeline(checkpoints: &[(u32, u32, PathBuf)], test: &FeatureMatrix, primes: &[u64]) -> Result<SaliencyTimeline> {
    let mut timeline = SaliencyTimeline {
        entries: Vec::new(),
        gaps: Vec::new(),
    };
    for (epoch, step, path) in checkpoints {
        let model = match nn::load_checkpoint(path) {
            Ok((m, _)) => m,
            Err(e) => {
                timeline.gaps.push(TimelineGap {
                    epoch: *epoch,
                    step: *step,
                    path: path.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let evaluation = evaluate(&model, test)?;
        for v in 0..model.num_classes() {
            timeline
                .entries
                .push(class_saliency(&model, test, &evaluation, v, primes, *epoch, *step)?);
        }
    }
    Ok(timeline)
}

/// `epoch,step,class,p,W,W_tilde`; empty classes contribute no rows.
pub fn class_saliency_csv<'a>(curves: impl IntoIterator<Item = &'a SaliencyCurve>) -> String {
    let mut out = String::from("epoch,step,class,p,W,W_tilde\n");
    for c in curves {
        let v = c.class.map_or(String::new(), |v| v.to_string());
        for ((p, w), wt) in c.primes.iter().zip(&c.scores).zip(&c.normalized) {
            let _ = writeln!(out, "{},{},{v},{p},{w},{wt}", c.epoch, c.step);
        }
    }
    out
}

/// `epoch,step,p,w,w_tilde,mn_weight` with mn_weight = log(p)/sqrt(p).
pub fn averaged_saliency_csv(curve: &SaliencyCurve) -> String {
    let mut out = String::from("epoch,step,p,w,w_tilde,mn_weight\n");
    for ((p, w), wt) in curve.primes.iter().zip(&curve.scores).zip(&curve.normalized) {
        let mn = (*p as f64).ln() / (*p as f64).sqrt();
        let _ = writeln!(out, "{},{},{p},{w},{wt},{mn}", curve.epoch, curve.step);
    }
    out
}

/// `group,p,mean_ap,count`; empty groups contribute no rows.
pub fn murmuration_csv(groups: &[MurmurationGroup]) -> String {
    let mut out = String::from("group,p,mean_ap,count\n");
    for g in groups {
        if let MurmurationGroup::Series(s) = g {
            for ((x, y), c) in s.x.iter().zip(&s.mean_ap).zip(&s.counts) {
                let _ = writeln!(out, "{},{x},{y},{c}", s.group);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchConfig;
    use crate::numtheory::primes_up_to;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model(width: usize, seed: u64) -> CnnModel {
        let cfg = ArchConfig {
            conv_channels: vec![3, 2],
            fc_widths: vec![5],
            ..ArchConfig::reference(width, 3)
        };
        CnnModel::new(cfg, seed).unwrap()
    }

    fn random_matrix(width: usize, rows: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..width * rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMatrix::new(width, data, (0..rows).map(|i| i % 3).collect()).unwrap()
    }

    #[test]
    fn linear_surrogate_saliency_is_constant() {
        let model = CnnModel::new(ArchConfig::linear(6, 3), 1).unwrap();
        let a = saliency_per_curve(&model, &[0.1; 6], 2).unwrap();
        let b = saliency_per_curve(&model, &[-0.7, 0.3, 0.9, 0.0, 0.2, -0.1], 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn single_curve_averages() {
        let model = small_model(10, 4);
        let m = random_matrix(10, 1, 5);
        let primes = primes_up_to(29).unwrap().primes().to_vec();
        let (scores, g) = model.predicted_gradient(m.row(0)).unwrap();
        let avg = averaged_saliency(&model, &m, &primes, 1, 0).unwrap();
        let abs: Vec<f64> = g.iter().map(|x| x.abs()).collect();
        assert_eq!(avg.scores, abs);
        let eval = evaluate(&model, &m).unwrap();
        let cls = class_saliency(&model, &m, &eval, scores.predicted, &primes, 1, 0).unwrap();
        let curve = cls.curve().unwrap();
        assert_eq!(curve.scores, g);
        let max = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for (n, x) in curve.normalized.iter().zip(&g) {
            assert_eq!(*n, x / max);
        }
    }

    #[test]
    fn normalization_contracts() {
        let model = small_model(10, 6);
        let m = random_matrix(10, 30, 7);
        let primes = primes_up_to(29).unwrap().primes().to_vec();
        let avg = averaged_saliency(&model, &m, &primes, 1, 0).unwrap();
        assert!(avg.scores.iter().all(|&s| s >= 0.0));
        assert_eq!(avg.normalized.iter().cloned().fold(f64::MIN, f64::max), 1.0);
        let eval = evaluate(&model, &m).unwrap();
        for v in 0..3 {
            match class_saliency(&model, &m, &eval, v, &primes, 1, 0).unwrap() {
                ClassSaliency::Curve(c) => {
                    assert_eq!(c.normalized.iter().fold(0.0f64, |a, b| a.max(b.abs())), 1.0);
                    assert_eq!(c.count, eval.partition[v].len());
                }
                ClassSaliency::Empty { class, .. } => assert!(eval.partition[class].is_empty()),
            }
        }
    }

    #[test]
    fn empty_class_marker() {
        let mut model = CnnModel::zeros(ArchConfig::linear(4, 3)).unwrap();
        model.linears_mut()[0].bias[1] = 1.0;
        let m = random_matrix(4, 5, 1);
        let eval = evaluate(&model, &m).unwrap();
        let primes = [2, 3, 5, 7];
        assert_eq!(
            class_saliency(&model, &m, &eval, 0, &primes, 1, 0).unwrap(),
            ClassSaliency::Empty { class: 0, epoch: 1, step: 0 }
        );
        assert!(class_saliency(&model, &m, &eval, 1, &primes, 1, 0).unwrap().curve().is_some());
    }

    #[test]
    fn averaged_saliency_ignores_order() {
        let model = small_model(10, 8);
        let m = random_matrix(10, 20, 9);
        let rev: Vec<f64> = (0..20).rev().flat_map(|i| m.row(i).to_vec()).collect();
        let m2 = FeatureMatrix::new(10, rev, m.labels().iter().rev().cloned().collect()).unwrap();
        let primes = primes_up_to(29).unwrap().primes().to_vec();
        let a = averaged_saliency(&model, &m, &primes, 1, 0).unwrap();
        let b = averaged_saliency(&model, &m2, &primes, 1, 0).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn mn_examples() {
        let w = mn_weights(10).unwrap();
        assert_eq!(w.weights[0], 2f64.ln() / 2f64.sqrt());
        assert!(w.weights.iter().all(|&x| x > 0.0));
        assert!(mn_weights(1).is_err());
        assert_eq!(mn_sum_raw(&[2, 3], &[0, 0], 3).unwrap(), 0.0);
        let v = mn_sum_raw(&[2, 3], &[1, 0], 3).unwrap();
        assert!((v - 2f64.ln() / 2.0 / 3f64.ln()).abs() < 1e-15);
        assert!((v - 0.31546).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn mn_two_forms_agree(seed in any::<u64>(), bound in 2u64..400) {
            let primes = primes_up_to(bound).unwrap().primes().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ap: Vec<i64> = primes
                .iter()
                .map(|&p| {
                    let h = (2.0 * (p as f64).sqrt()).floor() as i64;
                    rng.random_range(-h..=h)
                })
                .collect();
            let normalized: Vec<f64> = ap.iter().zip(&primes).map(|(&a, &p)| crate::curve::normalize_trace(a as f64, p)).collect();
            let raw = mn_sum_raw(&primes, &ap, bound).unwrap();
            let norm = mn_sum_normalized(&primes, &normalized, bound).unwrap();
            prop_assert!((raw - norm).abs() < 1e-12, "{raw} vs {norm}");
        }

        #[test]
        fn murmuration_matches_second_pass(seed in any::<u64>(), rows in 1usize..20) {
            let primes = primes_up_to(30).unwrap().primes().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<(usize, Vec<f64>)> = (0..rows)
                .map(|_| (rng.random_range(0..3), primes.iter().map(|_| rng.random_range(-10..=10) as f64).collect()))
                .collect();
            let groups = murmuration_average(data.iter().map(|(g, r)| (*g, r)), &primes, 3, None).unwrap();
            let mut seen = 0;
            for g in &groups {
                if let MurmurationGroup::Series(s) = g {
                    let members: Vec<&Vec<f64>> = data.iter().filter(|(h, _)| *h == s.group).map(|(_, r)| r).collect();
                    seen += members.len();
                    for (j, m) in s.mean_ap.iter().enumerate() {
                        let mut total = 0.0;
                        for r in &members { total += r[j]; }
                        prop_assert!((m - total / members.len() as f64).abs() < 1e-12);
                    }
                }
            }
            prop_assert_eq!(seen, rows);
        }
    }

    #[test]
    fn murmuration_trivial_cases() {
        let primes = [2, 3, 5, 7];
        let row = vec![-2.0, 1.0, 0.0, -4.0];
        let groups = murmuration_average([(0, &row)], &primes, 2, None).unwrap();
        match &groups[0] {
            MurmurationGroup::Series(s) => assert_eq!(s.mean_ap, row),
            _ => panic!("group 0 is populated"),
        }
        assert_eq!(groups[1], MurmurationGroup::Empty { group: 1 });
        let binned = murmuration_average([(0, &row)], &primes, 1, Some(4)).unwrap();
        match &binned[0] {
            MurmurationGroup::Series(s) => {
                assert_eq!(s.x, vec![0, 4]);
                assert_eq!(s.mean_ap, vec![-0.5, -2.0]);
                assert_eq!(s.counts, vec![2, 2]);
            }
            _ => panic!("group 0 is populated"),
        }
    }

    #[test]
    fn timeline_records_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(10, 2);
        let path = dir.path().join("a.ecnn");
        nn::save_checkpoint(&model, nn::CheckpointMeta { seed: 2, epoch: 1, step: 0 }, &path).unwrap();
        let m = random_matrix(10, 12, 3);
        let primes = primes_up_to(29).unwrap().primes().to_vec();
        let list = vec![(1, 0, path), (2, 0, dir.path().join("missing.ecnn"))];
        let t = saliency_timeline(&list, &m, &primes).unwrap();
        assert_eq!(t.entries.len(), 3);
        assert_eq!(t.gaps.len(), 1);
        assert_eq!(t.gaps[0].epoch, 2);
    }
}
