//! Dense in-memory datasets, LIBSVM ingestion and batch references.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::MultiGzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{Matrix, MatrixView};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: feature index {index} exceeds dimension {dim}")]
    FeatureIndex { line: usize, index: usize, dim: usize },
    #[error("label {label} at row {row} is out of range for {classes} classes")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, DatasetError> {
        if features.rows() == 0 {
            return Err(DatasetError::Input("dataset has no rows".into()));
        }
        if labels.len() != features.rows() {
            return Err(DatasetError::Input(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DatasetError::Label {
                row,
                label,
                classes,
            });
        }
        if !features.is_finite() {
            return Err(DatasetError::Input("features contain NaN or Inf".into()));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Dataset {
        assert_eq!(perm.len(), self.len(), "permutation length");
        self.select(perm)
    }

    fn select(&self, rows: &[usize]) -> Dataset {
        let dim = self.dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        Dataset {
            name: self.name.clone(),
            features: Matrix::from_vec(rows.len(), dim, data).expect("consistent length"),
            labels,
            classes: self.classes,
        }
    }

    /// Rescales every column into `[0, 1]`. Constant columns become 0.
    pub fn normalize_min_max(&mut self) {
        let (rows, cols) = self.features.shape();
        for c in 0..cols {
            let (lo, hi) = (0..rows)
                .map(|r| self.features.get(r, c))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            let span = hi - lo;
            for r in 0..rows {
                let v = self.features.get(r, c);
                self.features
                    .set(r, c, if span > 0.0 { (v - lo) / span } else { 0.0 });
            }
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// A contiguous range of rows of a shared dataset. Cloning shares the
/// underlying storage.
#[derive(Debug, Clone)]
pub struct BatchRef {
    dataset: Arc<Dataset>,
    start: usize,
    len: usize,
}

impl BatchRef {
    pub fn new(dataset: Arc<Dataset>, start: usize, len: usize) -> Result<Self, DatasetError> {
        if len == 0 || start + len > dataset.len() {
            return Err(DatasetError::Input(format!(
                "batch [{start}, {}) outside dataset of {} rows",
                start + len,
                dataset.len()
            )));
        }
        Ok(BatchRef {
            dataset,
            start,
            len,
        })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn features(&self) -> MatrixView<'_> {
        self.dataset.features.row_range(self.start, self.len)
    }

    pub fn labels(&self) -> &[usize] {
        &self.dataset.labels[self.start..self.start + self.len]
    }

    /// A sub-range of this batch, relative to its start.
    pub fn slice(&self, offset: usize, len: usize) -> BatchRef {
        assert!(len >= 1 && offset + len <= self.len, "sub-batch out of range");
        BatchRef {
            dataset: self.dataset.clone(),
            start: self.start + offset,
            len,
        }
    }

    /// Splits into at most `parts` consecutive pieces whose sizes differ by
    /// at most one, larger pieces first.
    pub fn split(&self, parts: usize) -> Vec<BatchRef> {
        split_sizes(self.len, parts)
            .into_iter()
            .scan(0, |offset, size| {
                let piece = self.slice(*offset, size);
                *offset += size;
                Some(piece)
            })
            .collect()
    }
}

/// Sizes of `min(parts, total)` near-equal pieces of `total`, the remainder
/// spread one extra over the leading pieces.
pub fn split_sizes(total: usize, parts: usize) -> Vec<usize> {
    let parts = parts.min(total).max(1);
    if total == 0 {
        return Vec::new();
    }
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMapping {
    /// Labels are already zero-based class indices.
    #[default]
    ZeroOne,
    /// Binary `-1` / `+1` labels, mapped to 0 / 1.
    PlusMinusOne,
    /// Distinct label values sorted ascending and numbered from 0
    /// (e.g. covtype's 1 / 2).
    Ordinal,
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Loads a LIBSVM text file (optionally gzip-compressed, detected by a `.gz`
/// extension) into a dense dataset.
pub fn load_libsvm(path: &Path, feature_dim: usize, mapping: LabelMapping) -> Result<Dataset, DatasetError> {
    let reader = open_maybe_gz(path)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_libsvm(reader, &name, feature_dim, mapping).map_err(|e| match e {
        DatasetError::Io { source, .. } => DatasetError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

fn parse_label(token: &str, line: usize) -> Result<f64, DatasetError> {
    // multi-label rows list comma-separated labels; the first one is used
    let first = token.split(',').next().unwrap_or(token);
    first.parse::<f64>().map_err(|_| DatasetError::Parse {
        line,
        message: format!("bad label {token:?}"),
    })
}

fn is_header(line: &str) -> bool {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    tokens.len() >= 2 && tokens.iter().all(|t| t.parse::<u64>().is_ok())
}

/// Parses LIBSVM text from any reader. An optional leading header line of
/// bare integers (as in multi-label repository files) is skipped.
pub fn read_libsvm<R: BufRead>(
    reader: R,
    name: &str,
    feature_dim: usize,
    mapping: LabelMapping,
) -> Result<Dataset, DatasetError> {
    let mut raw_labels: Vec<f64> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    let mut seen_content = false;

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DatasetError::Io {
            path: PathBuf::from(name),
            source,
        })?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if !seen_content {
            seen_content = true;
            if is_header(content) {
                continue;
            }
        }
        let mut tokens = content.split_whitespace();
        let label_token = tokens.next().expect("non-empty line");
        if label_token.contains(':') {
            return Err(DatasetError::Parse {
                line: line_no,
                message: "missing label".into(),
            });
        }
        raw_labels.push(parse_label(label_token, line_no)?);

        let row_start = data.len();
        data.resize(row_start + feature_dim, 0.0);
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| DatasetError::Parse {
                line: line_no,
                message: format!("expected index:value, got {tok:?}"),
            })?;
            let index: usize = idx.parse().map_err(|_| DatasetError::Parse {
                line: line_no,
                message: format!("bad feature index {idx:?}"),
            })?;
            let value: f64 = val.parse().map_err(|_| DatasetError::Parse {
                line: line_no,
                message: format!("bad feature value {val:?}"),
            })?;
            if index == 0 {
                return Err(DatasetError::Parse {
                    line: line_no,
                    message: "feature indices are 1-based".into(),
                });
            }
            if index > feature_dim {
                return Err(DatasetError::FeatureIndex {
                    line: line_no,
                    index,
                    dim: feature_dim,
                });
            }
            if !value.is_finite() {
                return Err(DatasetError::Parse {
                    line: line_no,
                    message: format!("non-finite feature value {val:?}"),
                });
            }
            data[row_start + index - 1] = value;
        }
    }

    let (labels, classes) = map_labels(&raw_labels, mapping)?;
    let features = Matrix::from_vec(labels.len(), feature_dim, data).expect("row-major buffer");
    Dataset::new(name, features, labels, classes)
}

fn map_labels(raw: &[f64], mapping: LabelMapping) -> Result<(Vec<usize>, usize), DatasetError> {
    let bad = |row: usize, v: f64| DatasetError::Input(format!("row {row}: label {v} invalid for {mapping:?}"));
    match mapping {
        LabelMapping::ZeroOne => {
            let labels = raw
                .iter()
                .enumerate()
                .map(|(row, &v)| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(bad(row, v))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
            Ok((labels, classes))
        }
        LabelMapping::PlusMinusOne => {
            let labels = raw
                .iter()
                .enumerate()
                .map(|(row, &v)| match v {
                    -1.0 => Ok(0),
                    1.0 => Ok(1),
                    _ => Err(bad(row, v)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((labels, 2))
        }
        LabelMapping::Ordinal => {
            let mut distinct: Vec<f64> = raw.to_vec();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let labels = raw
                .iter()
                .map(|v| distinct.binary_search_by(|d| d.total_cmp(v)).expect("present"))
                .collect();
            Ok((labels, distinct.len().max(2)))
        }
    }
}

/// Writes `ds` in LIBSVM text form with zero-based class labels, omitting
/// zero features.
pub fn write_libsvm<W: Write>(ds: &Dataset, mut out: W) -> io::Result<()> {
    for (row, &label) in ds.labels.iter().enumerate() {
        write!(out, "{label}")?;
        for (c, v) in ds.features.row(row).iter().enumerate() {
            if *v != 0.0 {
                write!(out, " {}:{}", c + 1, v)?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Seed for epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic permutation of `0..ds.len()`.
pub fn shuffle_epoch(ds: &Dataset, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// Stratified sample of `n` rows: each class keeps its share of the data
/// (largest-remainder rounding) and every class is represented when `n`
/// allows it. Rows keep their original relative order.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Input("subsample size must be >= 1".into()));
    }
    if n > ds.len() {
        return Err(DatasetError::Input(format!(
            "cannot draw {n} rows from {} rows",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        groups[l].push(i);
    }
    for g in &mut groups {
        g.shuffle(&mut rng);
    }

    let total = ds.len() as f64;
    let mut quota: Vec<usize> = Vec::with_capacity(groups.len());
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for (c, g) in groups.iter().enumerate() {
        let exact = n as f64 * g.len() as f64 / total;
        quota.push(exact.floor() as usize);
        remainders.push((exact - exact.floor(), c));
    }
    let mut left = n - quota.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[c] < groups[c].len() {
            quota[c] += 1;
            left -= 1;
        }
    }
    // make sure every non-empty class shows up, borrowing from the largest
    while let Some(missing) = (0..groups.len()).find(|&c| quota[c] == 0 && !groups[c].is_empty()) {
        let (donor, &most) = quota.iter().enumerate().max_by_key(|(_, q)| **q).expect("classes");
        if most <= 1 {
            break;
        }
        quota[donor] -= 1;
        quota[missing] += 1;
    }

    let mut rows: Vec<usize> = groups
        .iter()
        .zip(&quota)
        .flat_map(|(g, &q)| g[..q].iter().copied())
        .collect();
    rows.sort_unstable();
    Ok(ds.select(&rows))
}

/// Gaussian clusters with unit variance, one per class. Class means sit at
/// pairwise distance `separation` (simplex corners, centred on the origin)
/// when `classes <= dim`; otherwise on random directions at the same radius.
/// Labels cycle through the classes so every class has `n / classes` rows,
/// give or take one.
pub fn synthetic_blobs(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if classes < 2 {
        return Err(DatasetError::Input("synthetic blobs need at least 2 classes".into()));
    }
    if n == 0 || dim == 0 {
        return Err(DatasetError::Input("synthetic blobs need n >= 1 and dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation / std::f64::consts::SQRT_2;
    let mut means = vec![vec![0.0; dim]; classes];
    if classes <= dim {
        for (k, m) in means.iter_mut().enumerate() {
            m[k] = radius;
        }
    } else {
        for m in &mut means {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (mi, vi) in m.iter_mut().zip(v) {
                *mi = radius * vi / norm;
            }
        }
    }
    let centroid: Vec<f64> = (0..dim)
        .map(|d| means.iter().map(|m| m[d]).sum::<f64>() / classes as f64)
        .collect();
    for m in &mut means {
        for (mi, c) in m.iter_mut().zip(&centroid) {
            *mi -= c;
        }
    }

    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for mean in &means[k] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + noise);
        }
    }
    let features = Matrix::from_vec(n, dim, data).expect("row-major buffer");
    Dataset::new(format!("blobs-{classes}x{dim}-sep{separation}"), features, labels, classes)
}
