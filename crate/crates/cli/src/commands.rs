use std::env;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ecrank_core::curve::{self, CurveRecord, ReductionType, TraceEngine};
use ecrank_core::dataset::{self, DatasetSlice, FeatureFile, FeatureMatrix, SplitSpec};
use ecrank_core::interpret::{self, MurmurationGroup};
use ecrank_core::nn::{self, CnnModel};
use ecrank_core::report::{self, Plot, Series};
use ecrank_core::training::{self, RunManifest, RunOptions, TrainConfig};
use ecrank_core::{primes_up_to, PrimeTable};

use crate::output::{sidecar, usage, Outputs};
use crate::{Command, Subset, TrainArgs};

const CACHE_DIR_VAR: &str = "ECRANK_CACHE_DIR";
const RUN_FILE: &str = "run.json";
const RUN_MANIFEST_FILE: &str = "run_manifest.json";
const FINAL_MODEL: &str = "model.ecnn";

/// What a command read and with which parameters; written next to its outputs.
#[derive(Serialize, Deserialize, Debug)]
struct CommandManifest<P> {
    command: String,
    version: String,
    seed: Option<u64>,
    inputs: Vec<InputRef>,
    params: P,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct InputRef {
    path: PathBuf,
    sha256: String,
}

impl<P> CommandManifest<P> {
    fn new(command: &str, seed: Option<u64>, inputs: Vec<InputRef>, params: P) -> Self {
        CommandManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            inputs,
            params,
            outputs: Vec::new(),
        }
    }
}

fn input_ref(path: &Path) -> Result<InputRef> {
    Ok(InputRef {
        path: path.to_path_buf(),
        sha256: dataset::fingerprint_file(path).with_context(|| format!("reading {}", path.display()))?,
    })
}

fn cache_dir() -> PathBuf {
    env::var_os(CACHE_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Relative paths that do not exist here are looked up in $ECRANK_CACHE_DIR.
fn resolve_input(path: &Path) -> PathBuf {
    if !path.exists() && path.is_relative() {
        if let Some(dir) = env::var_os(CACHE_DIR_VAR) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            csv,
            bound,
            out,
            interval,
        } => ingest(&resolve_input(&csv), bound, out, interval),
        Command::Ap { curve, conductor, bound } => ap_table(&curve, conductor, bound),
        Command::Train {
            cache,
            interval,
            train,
            out,
        } => train_cmd(&resolve_input(&cache), interval, &train, &out),
        Command::Eval {
            model,
            cache,
            subset,
            interval,
        } => eval_cmd(&model, &resolve_input(&cache), subset, interval),
        Command::Saliency { run, out, all_steps } => saliency_cmd(&run, &out, all_steps),
        Command::Mn { cache, bound, out } => mn_cmd(&resolve_input(&cache), bound, out.as_deref()),
        Command::Murmur {
            model,
            input,
            bin,
            interval,
            out,
        } => murmur_cmd(&model, &resolve_input(&input), bin, interval, out.as_deref()),
        Command::Synth { count, bound, seed, out } => synth_cmd(count, bound, seed, out),
        Command::Sweep {
            cache,
            bounds,
            interval,
            train,
            out,
        } => sweep_cmd(&resolve_input(&cache), &bounds, interval, &train, &out),
    }
}

#[derive(Serialize, Deserialize, Debug)]
struct IngestParams {
    bound: u64,
    interval: Option<(f64, f64)>,
    curves: usize,
    rejected_rank: usize,
}

fn ingest(csv: &Path, bound: u64, out: Option<PathBuf>, interval: Option<(f64, f64)>) -> Result<()> {
    let out = out.unwrap_or_else(|| cache_dir().join(format!("curves_b{bound}.apqv")));
    let table = Arc::new(primes_up_to(bound).map_err(|e| usage(e.to_string()))?);
    let parsed = dataset::parse_curve_csv(csv)?;
    let (lo, hi) = interval.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let slice = dataset::filter_interval(&parsed.records, lo, hi)?.compute_features(&TraceEngine::new(table))?;
    if slice.is_empty() {
        bail!(ecrank_core::Error::Empty(format!("no curves in {}", csv.display())));
    }
    let mut outputs = Outputs::file(&out)?;
    outputs.track(out.clone());
    dataset::cache_write(&slice, &out)?;
    let mut manifest = CommandManifest::new(
        "ingest",
        None,
        vec![input_ref(csv)?],
        IngestParams {
            bound,
            interval,
            curves: slice.len(),
            rejected_rank: parsed.rejected_rank,
        },
    );
    manifest.outputs.push(file_name(&out));
    outputs.write_json(&sidecar(&out), &manifest)?;
    outputs.commit();
    eprintln!(
        "{} curves cached at {} ({} rows skipped for rank outside 0..=4)",
        slice.len(),
        out.display(),
        parsed.rejected_rank
    );
    Ok(())
}

fn reduction_name(r: ReductionType) -> &'static str {
    match r {
        ReductionType::Good => "good",
        ReductionType::SplitMultiplicative => "split",
        ReductionType::NonSplitMultiplicative => "nonsplit",
        ReductionType::Additive => "additive",
    }
}

fn ap_table(ainvs: &[i64], conductor: u64, bound: u64) -> Result<()> {
    let ainvs: [i64; 5] = ainvs
        .try_into()
        .map_err(|_| usage(format!("--curve needs 5 coefficients a1,a2,a3,a4,a6, got {}", ainvs.len())))?;
    let table = primes_up_to(bound).map_err(|e| usage(e.to_string()))?;
    let record = CurveRecord::new("cli", ainvs, conductor, 0)?;
    let mut out = String::from("p,a_p,reduction\n");
    for &p in table.primes() {
        let a = curve::ap(&record, p)?;
        let kind = curve::reduction_type(&record, p)?;
        let _ = writeln!(out, "{p},{a},{}", reduction_name(kind));
    }
    std::io::stdout().write_all(out.as_bytes())?;
    Ok(())
}

fn load_curves(path: &Path) -> Result<DatasetSlice> {
    match dataset::read_feature_file(path).with_context(|| format!("reading {}", path.display()))? {
        FeatureFile::Curves(slice) => Ok(slice),
        FeatureFile::Synthetic(_) => bail!(ecrank_core::Error::Format(format!(
            "{} is a synthetic batch; a curve cache is needed here",
            path.display()
        ))),
    }
}

/// How a training run chose its data; enough to rebuild its splits.
#[derive(Serialize, Deserialize, Debug, Clone)]
struct TrainParams {
    cache: PathBuf,
    interval: Option<(f64, f64)>,
    classes: usize,
    split: SplitSpec,
    /// Curves dropped because their rank has no output class.
    dropped: usize,
    epochs: usize,
    batch_size: usize,
    steps_per_epoch: usize,
    lr: f64,
}

struct Prepared {
    train: FeatureMatrix,
    test: FeatureMatrix,
    table: Arc<PrimeTable>,
    dropped: usize,
}

fn prepare(slice: &DatasetSlice, interval: Option<(f64, f64)>, classes: usize, split: &SplitSpec) -> Result<Prepared> {
    let table = slice
        .prime_table()
        .cloned()
        .ok_or_else(|| ecrank_core::Error::Empty("cache holds no curves".into()))?;
    let slice = match interval {
        Some((lo, hi)) => slice.filter(lo, hi)?,
        None => slice.clone(),
    };
    let keep: Vec<usize> = (0..slice.len()).filter(|&i| (slice.labels()[i] as usize) < classes).collect();
    let dropped = slice.len() - keep.len();
    let slice = slice.select(&keep);
    if slice.len() < 2 {
        bail!(ecrank_core::Error::Empty(format!("{} curves after filtering", slice.len())));
    }
    let (train, test) = dataset::split_train_test(&slice, split)?;
    if train.is_empty() || test.is_empty() {
        bail!(ecrank_core::Error::Empty("split left one side empty".into()));
    }
    Ok(Prepared {
        train: train.feature_matrix(None)?,
        test: test.feature_matrix(None)?,
        table,
        dropped,
    })
}

fn train_config(args: &TrainArgs, bound: u64) -> Result<TrainConfig> {
    let mut config = TrainConfig::reference(bound, args.classes as usize, args.epochs, args.seed)?;
    config.batch_size = args.batch_size;
    config.steps_per_epoch = args.steps_per_epoch;
    config.learning_rate = args.lr;
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn split_spec(args: &TrainArgs) -> Result<SplitSpec> {
    SplitSpec::new(args.split, args.seed).map_err(|e| usage(e.to_string()))
}

fn accuracy_plot(manifest: &RunManifest) -> Plot {
    let ends: Vec<_> = manifest.epoch_end_records().collect();
    Plot {
        title: "test accuracy by epoch".into(),
        x_label: "epoch".into(),
        y_label: "accuracy (%)".into(),
        series: vec![Series {
            label: "test".into(),
            x: ends.iter().map(|r| r.epoch as f64).collect(),
            y: ends.iter().map(|r| 100.0 * r.accuracy).collect(),
        }],
        y_range: Some((0.0, 100.0)),
    }
}

fn train_cmd(cache: &Path, interval: Option<(f64, f64)>, args: &TrainArgs, out: &Path) -> Result<()> {
    let split = split_spec(args)?;
    let slice = load_curves(cache)?;
    let prepared = prepare(&slice, interval, args.classes as usize, &split)?;
    let config = train_config(args, prepared.table.bound())?;
    if prepared.dropped > 0 {
        eprintln!(
            "dropped {} curves with rank >= {} (no output class)",
            prepared.dropped, args.classes
        );
    }
    let input = input_ref(cache)?;

    let mut outputs = Outputs::dir(out)?;
    for r in 1..=config.epochs as u32 {
        for s in [0, config.steps_per_epoch as u32 - 1] {
            outputs.track(out.join(training::checkpoint_name(r, s)));
        }
    }
    let options = RunOptions {
        checkpoint_dir: Some(out.to_path_buf()),
        dataset_fingerprint: input.sha256.clone(),
    };
    let mut manifest = CommandManifest::new(
        "train",
        Some(args.seed),
        vec![input],
        TrainParams {
            cache: cache.canonicalize().unwrap_or_else(|_| cache.to_path_buf()),
            interval,
            classes: args.classes as usize,
            split,
            dropped: prepared.dropped,
            epochs: args.epochs,
            batch_size: args.batch_size,
            steps_per_epoch: args.steps_per_epoch,
            lr: args.lr,
        },
    );
    let outcome = match training::train(&config, &prepared.train, &prepared.test, &options) {
        Ok(o) => o,
        Err(ecrank_core::Error::Aborted { reason, manifest: partial }) => {
            // keep nothing on disk, but show how far the run got
            eprint!("{}", training::metrics_csv(&partial));
            return Err(ecrank_core::Error::Aborted {
                reason,
                manifest: partial,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let run_manifest = outcome.manifest;
    let last = run_manifest.final_record().expect("at least one epoch");
    nn::save_checkpoint(
        &outcome.model,
        nn::CheckpointMeta {
            seed: args.seed,
            epoch: last.epoch,
            step: last.step,
        },
        &out.join(FINAL_MODEL),
    )?;
    outputs.track(out.join(FINAL_MODEL));
    outputs.write(&out.join(RUN_MANIFEST_FILE), run_manifest.to_json()?)?;
    outputs.write(&out.join("metrics.csv"), training::metrics_csv(&run_manifest))?;
    outputs.write(&out.join("accuracy.svg"), report::line_plot_svg(&accuracy_plot(&run_manifest)))?;
    manifest.outputs = run_manifest
        .records
        .iter()
        .filter_map(|r| r.checkpoint.clone())
        .chain([FINAL_MODEL, RUN_MANIFEST_FILE, "metrics.csv", "accuracy.svg"].map(String::from))
        .collect();
    outputs.write_json(&out.join(RUN_FILE), &manifest)?;
    outputs.commit();
    println!(
        "final accuracy {} (best {}), {} train / {} test curves",
        last.accuracy,
        run_manifest.best_accuracy.unwrap_or(0.0),
        run_manifest.train_size,
        run_manifest.test_size
    );
    Ok(())
}

fn read_run(dir: &Path) -> Result<CommandManifest<TrainParams>> {
    let path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(ecrank_core::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn check_width(model: &CnnModel, width: usize, what: &Path) -> Result<usize> {
    let need = model.config().input_length;
    if width < need {
        bail!(ecrank_core::Error::Dimension(format!(
            "{} has {width} primes per curve, the model needs {need}; use a cache with a larger bound",
            what.display()
        )));
    }
    Ok(need)
}

fn eval_cmd(model_path: &Path, cache: &Path, subset: Option<Subset>, interval: Option<(f64, f64)>) -> Result<()> {
    let (model, _) = nn::load_checkpoint(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let slice = load_curves(cache)?;
    let run_dir = model_path.parent().unwrap_or(Path::new("."));
    let run = if run_dir.join(RUN_FILE).exists() {
        Some(read_run(run_dir)?)
    } else {
        None
    };
    let subset = subset.unwrap_or(if run.is_some() { Subset::Test } else { Subset::All });
    let classes = model.num_classes();
    let data = match (subset, &run) {
        (Subset::All, _) => {
            let s = match interval {
                Some((lo, hi)) => slice.filter(lo, hi)?,
                None => slice,
            };
            let keep: Vec<usize> = (0..s.len()).filter(|&i| (s.labels()[i] as usize) < classes).collect();
            s.select(&keep).feature_matrix(None)?
        }
        (_, None) => return Err(usage("--subset train/test needs the model inside a training run directory")),
        (sub, Some(run)) => {
            let p = &run.params;
            let prepared = prepare(&slice, interval.or(p.interval), p.classes, &p.split)?;
            if sub == Subset::Train {
                prepared.train
            } else {
                prepared.test
            }
        }
    };
    let width = check_width(&model, data.width(), cache)?;
    let data = if width == data.width() { data } else { data.truncate_width(width)? };
    let eval = training::evaluate(&model, &data)?;
    let correct: usize = (0..classes).map(|v| eval.confusion[v][v]).sum();
    let mut out = format!("accuracy {} ({correct}/{})\n", eval.accuracy, data.rows());
    out.push_str("confusion (rows: true rank, columns: predicted rank)\n     ");
    for v in 0..classes {
        let _ = write!(out, "{v:>8}");
    }
    out.push('\n');
    for (t, row) in eval.confusion.iter().enumerate() {
        let _ = write!(out, "{t:>5}");
        for c in row {
            let _ = write!(out, "{c:>8}");
        }
        out.push('\n');
    }
    std::io::stdout().write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Serialize, Debug)]
struct SaliencyParams {
    run: PathBuf,
    all_steps: bool,
    checkpoints: usize,
    gaps: usize,
}

fn saliency_cmd(run_dir: &Path, out: &Path, all_steps: bool) -> Result<()> {
    let run = read_run(run_dir)?;
    let manifest_path = run_dir.join(RUN_MANIFEST_FILE);
    let run_manifest = RunManifest::from_json(
        &std::fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?,
    )?;
    let p = &run.params;
    let cache = resolve_input(&p.cache);
    let input = input_ref(&cache)?;
    if input.sha256 != run_manifest.dataset_fingerprint {
        bail!(ecrank_core::Error::Corrupt(format!(
            "{} changed since the run (fingerprint mismatch)",
            cache.display()
        )));
    }
    let prepared = prepare(&load_curves(&cache)?, p.interval, p.classes, &p.split)?;
    let primes = prepared.table.primes().to_vec();
    let checkpoints: Vec<_> = training::manifest_checkpoints(&run_manifest, run_dir)
        .into_iter()
        .filter(|(_, step, _)| all_steps || *step == 0)
        .collect();
    let timeline = interpret::saliency_timeline(&checkpoints, &prepared.test, &primes)?;

    let mut outputs = Outputs::dir(out)?;
    outputs.write(
        &out.join("class_saliency.csv"),
        interpret::class_saliency_csv(timeline.nonempty()),
    )?;
    let grid = out.join("grid");
    for name in report::write_saliency_grid(&grid, &timeline)? {
        outputs.track(grid.join(name));
    }
    outputs.track(grid.join("index.md"));

    let mut averaged = String::new();
    let mut last_curve = None;
    for (epoch, step, path) in checkpoints.iter().chain(std::iter::once(&(
        run_manifest.final_record().map_or(0, |r| r.epoch),
        run_manifest.final_record().map_or(0, |r| r.step),
        run_dir.join(FINAL_MODEL),
    ))) {
        let Ok((model, _)) = nn::load_checkpoint(path) else {
            continue;
        };
        let curve = interpret::averaged_saliency(&model, &prepared.test, &primes, *epoch, *step)?;
        let csv = interpret::averaged_saliency_csv(&curve);
        // header once
        let body = if averaged.is_empty() { csv.as_str() } else { csv.split_once('\n').map_or("", |x| x.1) };
        averaged.push_str(body);
        last_curve = Some(curve);
    }
    outputs.write(&out.join("averaged_saliency.csv"), &averaged)?;
    if let Some(curve) = &last_curve {
        outputs.write(
            &out.join("saliency_comparison.svg"),
            report::line_plot_svg(&report::averaged_comparison_plot(curve, false)),
        )?;
        outputs.write(
            &out.join("saliency_comparison_normalized.svg"),
            report::line_plot_svg(&report::averaged_comparison_plot(curve, true)),
        )?;
    }
    let mut manifest = CommandManifest::new(
        "saliency",
        Some(run_manifest.config.seed),
        vec![input, input_ref(&manifest_path)?],
        SaliencyParams {
            run: run_dir.to_path_buf(),
            all_steps,
            checkpoints: checkpoints.len(),
            gaps: timeline.gaps.len(),
        },
    );
    manifest.outputs = vec![
        "class_saliency.csv".into(),
        "grid/index.md".into(),
        "averaged_saliency.csv".into(),
    ];
    outputs.write_json(&out.join("manifest.json"), &manifest)?;
    outputs.commit();
    for g in &timeline.gaps {
        eprintln!("missing checkpoint epoch {} step {}: {}", g.epoch, g.step, g.reason);
    }
    eprintln!(
        "{} class curves ({} empty) from {} checkpoints",
        timeline.nonempty().count(),
        timeline.entries.len() - timeline.nonempty().count(),
        checkpoints.len() - timeline.gaps.len()
    );
    Ok(())
}

fn mn_cmd(cache: &Path, bound: u64, out: Option<&Path>) -> Result<()> {
    if bound < 2 {
        return Err(usage(format!("--bound {bound} is below 2")));
    }
    let mut csv = String::new();
    match dataset::read_feature_file(cache).with_context(|| format!("reading {}", cache.display()))? {
        FeatureFile::Curves(slice) => {
            let cached = slice.prime_table().map_or(0, |t| t.bound());
            if bound > cached {
                bail!(ecrank_core::Error::Domain(format!("--bound {bound} exceeds the cache bound {cached}")));
            }
            csv.push_str("label,conductor,rank,mn_sum\n");
            for (r, f) in slice.records().iter().zip(slice.features()) {
                let _ = writeln!(csv, "{},{},{},{}", r.label, r.conductor, r.rank, interpret::mn_sum(f, bound)?);
            }
        }
        FeatureFile::Synthetic(batch) => {
            if bound > batch.bound() {
                bail!(ecrank_core::Error::Domain(format!(
                    "--bound {bound} exceeds the batch bound {}",
                    batch.bound()
                )));
            }
            csv.push_str("index,mn_sum\n");
            for i in 0..batch.count() {
                let v = interpret::mn_sum_normalized(batch.table().primes(), batch.row(i), bound)?;
                let _ = writeln!(csv, "{i},{v}");
            }
        }
    }
    match out {
        Some(path) => {
            let mut outputs = Outputs::file(path)?;
            outputs.write(path, &csv)?;
            let mut manifest = CommandManifest::new("mn", None, vec![input_ref(cache)?], serde_json::json!({ "bound": bound }));
            manifest.outputs.push(file_name(path));
            outputs.write_json(&sidecar(path), &manifest)?;
            outputs.commit();
        }
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn murmur_cmd(model_path: &Path, input: &Path, bin: Option<u64>, interval: Option<(f64, f64)>, out: Option<&Path>) -> Result<()> {
    if bin == Some(0) {
        return Err(usage("--bin must be positive"));
    }
    let (model, _) = nn::load_checkpoint(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    let classes = model.num_classes();
    let (features, rows, table): (FeatureMatrix, Vec<Vec<f64>>, Arc<PrimeTable>) =
        match dataset::read_feature_file(input).with_context(|| format!("reading {}", input.display()))? {
            FeatureFile::Curves(slice) => {
                let slice = match interval {
                    Some((lo, hi)) => slice.filter(lo, hi)?,
                    None => slice,
                };
                let table = slice
                    .prime_table()
                    .cloned()
                    .ok_or_else(|| ecrank_core::Error::Empty("no curves selected".into()))?;
                let rows = slice.features().iter().map(dataset::unnormalized).collect();
                (slice.feature_matrix(None)?, rows, table)
            }
            FeatureFile::Synthetic(batch) => {
                let rows = (0..batch.count()).map(|i| batch.unnormalized_row(i)).collect();
                (batch.feature_matrix(None)?, rows, batch.table().clone())
            }
        };
    let width = check_width(&model, features.width(), input)?;
    let features = if width == features.width() {
        features
    } else {
        features.truncate_width(width)?
    };
    let predicted = model.predict_all(&features)?;
    let primes = &table.primes()[..width];
    let groups = interpret::murmuration_average(
        predicted.iter().copied().zip(rows.iter().map(|r| &r[..width])),
        primes,
        classes,
        bin,
    )?;
    let csv = interpret::murmuration_csv(&groups);
    for g in &groups {
        if let MurmurationGroup::Empty { group } = g {
            eprintln!("no sequence predicted {group}");
        }
    }
    let Some(dir) = out else {
        std::io::stdout().write_all(csv.as_bytes())?;
        return Ok(());
    };
    let plot = Plot {
        title: "mean a_p by predicted rank".into(),
        x_label: if bin.is_some() { "p (window start)".into() } else { "p".into() },
        y_label: "mean a_p".into(),
        series: groups
            .iter()
            .filter_map(|g| match g {
                MurmurationGroup::Series(s) => Some(Series {
                    label: format!("rank {} ({})", s.group, s.members),
                    x: s.x.iter().map(|&x| x as f64).collect(),
                    y: s.mean_ap.clone(),
                }),
                MurmurationGroup::Empty { .. } => None,
            })
            .collect(),
        y_range: None,
    };
    let mut outputs = Outputs::dir(dir)?;
    outputs.write(&dir.join("murmuration.csv"), &csv)?;
    outputs.write(&dir.join("murmuration.svg"), report::line_plot_svg(&plot))?;
    let mut manifest = CommandManifest::new(
        "murmur",
        None,
        vec![input_ref(model_path)?, input_ref(input)?],
        serde_json::json!({ "bin": bin, "interval": interval }),
    );
    manifest.outputs = vec!["murmuration.csv".into(), "murmuration.svg".into()];
    outputs.write_json(&dir.join("manifest.json"), &manifest)?;
    outputs.commit();
    Ok(())
}

fn synth_cmd(count: usize, bound: u64, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| cache_dir().join(format!("synth_n{count}_b{bound}_s{seed}.apqs")));
    let table = Arc::new(primes_up_to(bound).map_err(|e| usage(e.to_string()))?);
    let batch = dataset::sample_sato_tate(count, table, seed).map_err(|e| usage(e.to_string()))?;
    let mut outputs = Outputs::file(&out)?;
    outputs.track(out.clone());
    dataset::synthetic_write(&batch, &out)?;
    let mut manifest = CommandManifest::new(
        "synth",
        Some(seed),
        vec![],
        serde_json::json!({ "count": count, "bound": bound }),
    );
    manifest.outputs.push(file_name(&out));
    outputs.write_json(&sidecar(&out), &manifest)?;
    outputs.commit();
    eprintln!("{count} sequences of length {} written to {}", batch.table().count(), out.display());
    Ok(())
}

fn sweep_cmd(cache: &Path, bounds: &[u64], interval: Option<(f64, f64)>, args: &TrainArgs, out: &Path) -> Result<()> {
    let split = split_spec(args)?;
    let slice = load_curves(cache)?;
    let prepared = prepare(&slice, interval, args.classes as usize, &split)?;
    let config = train_config(args, prepared.table.bound())?;
    if let Some(&b) = bounds.iter().find(|&&b| b > config.bound || b < 2) {
        return Err(usage(format!("bound {b} outside [2, {}] (the cache bound)", config.bound)));
    }
    let rows = training::sweep_primes(&config, &prepared.train, &prepared.test, bounds)?;
    let svg_path = out.with_extension("svg");
    let mut outputs = Outputs::file(out)?;
    outputs.write(out, training::sweep_csv(&rows))?;
    let plot = Plot {
        title: "best test accuracy by number of primes".into(),
        x_label: "number of primes".into(),
        y_label: "accuracy (%)".into(),
        series: vec![Series {
            label: "best".into(),
            x: rows.iter().map(|r| r.prime_count as f64).collect(),
            y: rows.iter().map(|r| 100.0 * r.best_accuracy).collect(),
        }],
        y_range: Some((0.0, 100.0)),
    };
    outputs.write(&svg_path, report::line_plot_svg(&plot))?;
    let mut manifest = CommandManifest::new(
        "sweep",
        Some(args.seed),
        vec![input_ref(cache)?],
        serde_json::json!({
            "bounds": bounds,
            "interval": interval,
            "split": split,
            "dropped": prepared.dropped,
            "config": config,
        }),
    );
    manifest.outputs = vec![file_name(out), file_name(&svg_path)];
    outputs.write_json(&sidecar(out), &manifest)?;
    outputs.commit();
    for r in &rows {
        println!("b={} pi(b)={} best accuracy {}", r.bound, r.prime_count, r.best_accuracy);
    }
    Ok(())
}
