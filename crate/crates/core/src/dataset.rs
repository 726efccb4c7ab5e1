//! Labelled curve data: CSV ingestion, conductor-interval slices, seeded
//! train/test splits, the binary trace cache, and synthetic Sato–Tate batches.
//!
//! # Trace cache (`APQV`, version 1, little-endian)
//!
//! ```text
//! magic "APQV" | version u16 | bound u32 | prime count u32 | primes u32 * count
//! record count u64
//! per record: label length u16 | label bytes | conductor u64 | rank u8
//!             | a-invariants 5 * i64 | a_p i16 * prime count
//! ```
//!
//! # Synthetic batch (`APQS`, version 1, little-endian)
//!
//! ```text
//! magic "APQS" | version u16 | bound u32 | prime count u32 | primes u32 * count
//! seed u64 | row count u64 | normalized values f64 * rows * prime count (row-major)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curve::{CurveRecord, TraceEngine, TraceVector, MAX_RANK};
use crate::error::{Error, Result};
use crate::numtheory::PrimeTable;

pub const CACHE_MAGIC: &[u8; 4] = b"APQV";
pub const SYNTH_MAGIC: &[u8; 4] = b"APQS";
pub const CACHE_VERSION: u16 = 1;
pub const SYNTH_VERSION: u16 = 1;

pub const CSV_HEADER: [&str; 8] = ["label", "conductor", "rank", "a1", "a2", "a3", "a4", "a6"];

/// Closed conductor interval `[lo, hi]`; `hi` may be infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Interval> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Domain(format!("empty conductor interval [{lo}, {hi}]")));
        }
        Ok(Interval { lo, hi })
    }

    pub fn everything() -> Interval {
        Interval {
            lo: 0.0,
            hi: f64::INFINITY,
        }
    }

    pub fn contains(&self, conductor: u64) -> bool {
        let n = conductor as f64;
        self.lo <= n && n <= self.hi
    }
}

/// Curves, their trace vectors (possibly not yet computed) and rank labels,
/// aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSlice {
    pub interval: Interval,
    records: Vec<CurveRecord>,
    features: Vec<TraceVector>,
    labels: Vec<u8>,
}

impl DatasetSlice {
    pub fn from_records(interval: Interval, records: Vec<CurveRecord>) -> DatasetSlice {
        let labels = records.iter().map(|r| r.rank).collect();
        DatasetSlice {
            interval,
            records,
            features: Vec::new(),
            labels,
        }
    }

    pub fn with_features(interval: Interval, records: Vec<CurveRecord>, features: Vec<TraceVector>) -> Result<DatasetSlice> {
        if records.len() != features.len() {
            return Err(Error::Dimension(format!(
                "{} records but {} feature vectors",
                records.len(),
                features.len()
            )));
        }
        if let Some((r, f)) = records.iter().zip(&features).find(|(r, f)| r.label != f.curve_label) {
            return Err(Error::Dimension(format!(
                "record {} aligned with trace vector {}",
                r.label, f.curve_label
            )));
        }
        let mut slice = DatasetSlice::from_records(interval, records);
        slice.features = features;
        Ok(slice)
    }

    pub fn records(&self) -> &[CurveRecord] {
        &self.records
    }

    pub fn features(&self) -> &[TraceVector] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn has_features(&self) -> bool {
        !self.records.is_empty() && self.features.len() == self.records.len()
    }

    /// The prime table shared by the feature vectors.
    pub fn prime_table(&self) -> Option<&Arc<PrimeTable>> {
        self.features.first().map(|f| f.table())
    }

    /// Computes trace vectors for every record.
    pub fn compute_features(mut self, engine: &TraceEngine) -> Result<DatasetSlice> {
        self.features = engine.trace_vectors(&self.records)?;
        Ok(self)
    }

    /// Sub-slice at the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> DatasetSlice {
        DatasetSlice {
            interval: self.interval,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            features: if self.features.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.features[i].clone()).collect()
            },
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the records with conductor in `[lo, hi]`, preserving order.
    pub fn filter(&self, lo: f64, hi: f64) -> Result<DatasetSlice> {
        let interval = Interval::new(lo, hi)?;
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| interval.contains(self.records[i].conductor))
            .collect();
        let mut out = self.select(&keep);
        out.interval = interval;
        Ok(out)
    }

    /// Normalized features truncated to the first `width` primes, as a dense matrix.
    pub fn feature_matrix(&self, width: Option<usize>) -> Result<FeatureMatrix> {
        if !self.has_features() {
            return Err(Error::Empty("slice has no computed trace vectors".into()));
        }
        let full = self.features[0].len();
        let width = width.unwrap_or(full);
        if width == 0 || width > full {
            return Err(Error::Dimension(format!(
                "feature width {width} outside 1..={full}"
            )));
        }
        let mut data = Vec::with_capacity(self.len() * width);
        for f in &self.features {
            data.extend(f.normalized_prefix(width));
        }
        FeatureMatrix::new(width, data, self.labels.iter().map(|&l| l as usize).collect())
    }
}

/// Parsed CSV rows plus the number of rows dropped for an out-of-range rank.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedCurves {
    pub records: Vec<CurveRecord>,
    pub rejected_rank: usize,
}

/// Reads `label,conductor,rank,a1,a2,a3,a4,a6` rows.
pub fn parse_curve_csv(path: &Path) -> Result<ParsedCurves> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut records = Vec::new();
    let mut rejected_rank = 0;
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let field = |i: usize| row.get(i).unwrap_or_default();
        let int = |i: usize| -> Result<i64> {
            field(i)
                .parse::<i64>()
                .map_err(|e| err(format!("column {}: `{}`: {e}", CSV_HEADER[i], field(i))))
        };
        let conductor = field(1)
            .parse::<u64>()
            .map_err(|e| err(format!("conductor `{}`: {e}", field(1))))?;
        let rank = int(2)?;
        if !(0..=MAX_RANK as i64).contains(&rank) {
            rejected_rank += 1;
            continue;
        }
        let ainvs = [int(3)?, int(4)?, int(5)?, int(6)?, int(7)?];
        let record = CurveRecord::new(field(0), ainvs, conductor, rank as u8).map_err(|e| err(e.to_string()))?;
        records.push(record);
    }
    Ok(ParsedCurves {
        records,
        rejected_rank,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Records with `lo <= N <= hi`, original order preserved.
pub fn filter_interval(records: &[CurveRecord], lo: f64, hi: f64) -> Result<DatasetSlice> {
    let interval = Interval::new(lo, hi)?;
    let kept = records
        .iter()
        .filter(|r| interval.contains(r.conductor))
        .cloned()
        .collect();
    Ok(DatasetSlice::from_records(interval, kept))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(ratio: f64, seed: u64) -> Result<SplitSpec> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Domain(format!("split ratio {ratio} outside (0, 1)")));
        }
        Ok(SplitSpec { ratio, seed })
    }

    pub fn train_len(&self, n: usize) -> usize {
        (self.ratio * n as f64).round() as usize
    }

    /// Shuffled indices: the first `train_len(n)` go to training.
    pub fn permutation(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        order
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratio: 0.8, seed: 0 }
    }
}

/// Seeded shuffle followed by a prefix split. No stratification by rank.
pub fn split_train_test(slice: &DatasetSlice, spec: &SplitSpec) -> Result<(DatasetSlice, DatasetSlice)> {
    SplitSpec::new(spec.ratio, spec.seed)?;
    if slice.is_empty() {
        return Err(Error::Empty("cannot split an empty slice".into()));
    }
    let order = spec.permutation(slice.len());
    let cut = spec.train_len(slice.len());
    Ok((slice.select(&order[..cut]), slice.select(&order[cut..])))
}

/// Dense row-major matrix of normalized features with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    width: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(width: usize, data: Vec<f64>, labels: Vec<usize>) -> Result<FeatureMatrix> {
        if width == 0 || data.len() != width * labels.len() {
            return Err(Error::Dimension(format!(
                "{} values do not form {} rows of width {width}",
                data.len(),
                labels.len()
            )));
        }
        Ok(FeatureMatrix { width, data, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.width)
    }

    /// Same rows, keeping only the first `width` columns.
    pub fn truncate_width(&self, width: usize) -> Result<FeatureMatrix> {
        if width == 0 || width > self.width {
            return Err(Error::Dimension(format!(
                "cannot truncate width {} to {width}",
                self.width
            )));
        }
        let data = self.iter_rows().flat_map(|r| r[..width].iter().copied()).collect();
        FeatureMatrix::new(width, data, self.labels.clone())
    }
}

fn write_prime_header(out: &mut Vec<u8>, magic: &[u8; 4], version: u16, table: &PrimeTable) -> Result<()> {
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    let bound = u32::try_from(table.bound())
        .map_err(|_| Error::Format(format!("bound {} does not fit in u32", table.bound())))?;
    out.extend_from_slice(&bound.to_le_bytes());
    out.extend_from_slice(&(table.count() as u32).to_le_bytes());
    for &p in table.primes() {
        out.extend_from_slice(&(p as u32).to_le_bytes());
    }
    Ok(())
}

/// Encodes a slice with computed features in the `APQV` format.
pub fn encode_cache(slice: &DatasetSlice) -> Result<Vec<u8>> {
    let table = slice
        .prime_table()
        .ok_or_else(|| Error::Empty("nothing to cache: slice has no trace vectors".into()))?;
    if !slice.has_features() {
        return Err(Error::Empty("slice features are not computed".into()));
    }
    let mut out = Vec::new();
    write_prime_header(&mut out, CACHE_MAGIC, CACHE_VERSION, table)?;
    out.extend_from_slice(&(slice.len() as u64).to_le_bytes());
    for (record, trace) in slice.records.iter().zip(&slice.features) {
        if !Arc::ptr_eq(trace.table(), table) && **trace.table() != **table {
            return Err(Error::Dimension(format!(
                "{} uses a different prime table",
                record.label
            )));
        }
        let label = record.label.as_bytes();
        let len = u16::try_from(label.len())
            .map_err(|_| Error::Format(format!("label of {} bytes is too long", label.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(label);
        out.extend_from_slice(&record.conductor.to_le_bytes());
        out.push(record.rank);
        for a in record.ainvs {
            out.extend_from_slice(&a.to_le_bytes());
        }
        for &a in trace.ap_values() {
            let a = i16::try_from(a).map_err(|_| Error::Format(format!("a_p = {a} does not fit in i16")))?;
            out.extend_from_slice(&a.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn cache_write(slice: &DatasetSlice, path: &Path) -> Result<()> {
    let bytes = encode_cache(slice)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn i16(&mut self) -> Result<i16> {
        Ok(i16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after the last record",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn read_prime_header(r: &mut Reader<'_>, magic: &[u8; 4], supported: u16) -> Result<Arc<PrimeTable>> {
    let found = r.take(4).map_err(|_| Error::Format("file too short for a magic number".into()))?;
    if found != magic {
        return Err(Error::Format(format!(
            "magic {:?} is not {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u16()?;
    if version != supported {
        return Err(Error::Version { found: version, supported });
    }
    let bound = r.u32()? as u64;
    let count = r.u32()? as usize;
    let primes = (0..count).map(|_| r.u32().map(u64::from)).collect::<Result<Vec<_>>>()?;
    Ok(Arc::new(PrimeTable::from_parts(bound, primes)?))
}

pub fn decode_cache(bytes: &[u8]) -> Result<DatasetSlice> {
    let mut r = Reader { bytes, pos: 0 };
    let table = read_prime_header(&mut r, CACHE_MAGIC, CACHE_VERSION)?;
    let n = r.u64()?;
    let mut records = Vec::new();
    let mut features = Vec::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let label = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| Error::Corrupt(format!("label is not UTF-8: {e}")))?;
        let conductor = r.u64()?;
        let rank = r.u8()?;
        let ainvs = [r.i64()?, r.i64()?, r.i64()?, r.i64()?, r.i64()?];
        let ap = (0..table.count()).map(|_| r.i16().map(i64::from)).collect::<Result<Vec<_>>>()?;
        features.push(TraceVector::from_values(label.clone(), table.clone(), ap)?);
        records.push(CurveRecord {
            label,
            ainvs,
            conductor,
            rank,
        });
    }
    r.finish()?;
    DatasetSlice::with_features(Interval::everything(), records, features)
}

pub fn cache_read(path: &Path) -> Result<DatasetSlice> {
    decode_cache(&fs::read(path)?)
}

/// SHA-256 of a file, hex encoded.
pub fn fingerprint_file(path: &Path) -> Result<String> {
    Ok(fingerprint_bytes(&fs::read(path)?))
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Semicircle law `(2/pi) sqrt(1 - t^2)` on `[-1, 1]`, sampled by rejection
/// from the uniform box.
#[derive(Clone, Copy, Debug, Default)]
pub struct SatoTate;

impl Distribution<f64> for SatoTate {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let t = 2.0 * rng.random::<f64>() - 1.0;
            let u = rng.random::<f64>();
            if u * u <= 1.0 - t * t {
                return t;
            }
        }
    }
}

impl SatoTate {
    pub fn cdf(t: f64) -> f64 {
        let t = t.clamp(-1.0, 1.0);
        0.5 + (t * (1.0 - t * t).sqrt() + t.asin()) / std::f64::consts::PI
    }
}

/// Synthetic normalized trace sequences with i.i.d. Sato–Tate entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub seed: u64,
    table: Arc<PrimeTable>,
    normalized: Vec<f64>,
}

impl SyntheticBatch {
    pub fn count(&self) -> usize {
        self.normalized.len() / self.table.count()
    }

    pub fn table(&self) -> &Arc<PrimeTable> {
        &self.table
    }

    pub fn bound(&self) -> u64 {
        self.table.bound()
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.table.count();
        &self.normalized[i * w..(i + 1) * w]
    }

    /// Row `i` scaled back to a_p = 2 sqrt(p) ã_p, without rounding.
    pub fn unnormalized_row(&self, i: usize) -> Vec<f64> {
        self.row(i)
            .iter()
            .zip(self.table.primes())
            .map(|(&t, &p)| 2.0 * (p as f64).sqrt() * t)
            .collect()
    }

    /// Feature matrix for classification; labels are placeholders (0).
    pub fn feature_matrix(&self, width: Option<usize>) -> Result<FeatureMatrix> {
        let full = FeatureMatrix::new(self.table.count(), self.normalized.clone(), vec![0; self.count()])?;
        match width {
            Some(w) if w != full.width() => full.truncate_width(w),
            _ => Ok(full),
        }
    }
}

pub fn sample_sato_tate(count: usize, table: Arc<PrimeTable>, seed: u64) -> Result<SyntheticBatch> {
    if count == 0 {
        return Err(Error::Domain("synthetic batch needs at least one sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normalized = SatoTate.sample_iter(&mut rng).take(count * table.count()).collect();
    Ok(SyntheticBatch {
        seed,
        table,
        normalized,
    })
}

pub fn encode_synthetic(batch: &SyntheticBatch) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + batch.normalized.len() * 8);
    write_prime_header(&mut out, SYNTH_MAGIC, SYNTH_VERSION, &batch.table)?;
    out.extend_from_slice(&batch.seed.to_le_bytes());
    out.extend_from_slice(&(batch.count() as u64).to_le_bytes());
    for &x in &batch.normalized {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_synthetic(bytes: &[u8]) -> Result<SyntheticBatch> {
    let mut r = Reader { bytes, pos: 0 };
    let table = read_prime_header(&mut r, SYNTH_MAGIC, SYNTH_VERSION)?;
    let seed = r.u64()?;
    let rows = r.u64()? as usize;
    let total = rows
        .checked_mul(table.count())
        .ok_or_else(|| Error::Corrupt("row count overflows".into()))?;
    if r.bytes.len() - r.pos < total.saturating_mul(8) {
        return Err(Error::Corrupt(format!("truncated: expected {total} values")));
    }
    let normalized = (0..total).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    if let Some(bad) = normalized.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
        return Err(Error::Corrupt(format!("synthetic value {bad} outside [-1, 1]")));
    }
    Ok(SyntheticBatch {
        seed,
        table,
        normalized,
    })
}

pub fn synthetic_write(batch: &SyntheticBatch, path: &Path) -> Result<()> {
    fs::write(path, encode_synthetic(batch)?)?;
    Ok(())
}

pub fn synthetic_read(path: &Path) -> Result<SyntheticBatch> {
    decode_synthetic(&fs::read(path)?)
}

/// Either kind of feature file, told apart by magic number.
pub enum FeatureFile {
    Curves(DatasetSlice),
    Synthetic(SyntheticBatch),
}

pub fn read_feature_file(path: &Path) -> Result<FeatureFile> {
    let bytes = fs::read(path)?;
    match bytes.get(..4) {
        Some(m) if m == SYNTH_MAGIC => Ok(FeatureFile::Synthetic(decode_synthetic(&bytes)?)),
        _ => Ok(FeatureFile::Curves(decode_cache(&bytes)?)),
    }
}

/// Unnormalized a_p of a cached curve, as reals.
pub fn unnormalized(trace: &TraceVector) -> Vec<f64> {
    trace.ap_values().iter().map(|&a| a as f64).collect()
}
