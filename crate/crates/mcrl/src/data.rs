//! Embedding datasets: synthetic shift benchmarks, CSV ingestion, batching.
//!
//! The synthetic generator stands in for a real cross-domain image corpus.
//! It draws class means on a sphere, then derives a target domain whose
//! means are rotated, translated, and partially pulled together, with wider
//! intra-class noise. That reproduces the two failure ingredients of
//! cross-domain food recognition: large intra-class variation and small
//! inter-class separation ("category ambiguity").
//!
//! Target labels are generated but sit behind an evaluation-only accessor;
//! training code cannot reach them through the public API.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};

/// How an interpolated mean pair moves: each end travels this fraction of
/// the gap toward the other, halving the distance between the pair.
pub const OVERLAP_PULL: f64 = 0.25;

/// Shipped benchmark presets, embedded so lookups work from any directory.
pub const PRESET_AMBIGUITY_16_JSON: &str = include_str!("../presets/ambiguity-16.json");
/// See [`PRESET_AMBIGUITY_16_JSON`].
pub const PRESET_NULL_16_JSON: &str = include_str!("../presets/null-16.json");

/// How label columns read from disk may be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRole {
    /// Labels available to training and evaluation (source domain).
    Train,
    /// Labels reserved for evaluation (target domain).
    EvalOnly,
}

#[derive(Debug, Clone, PartialEq)]
enum LabelStore {
    None,
    Train(Vec<usize>),
    EvalOnly(Vec<usize>),
}

/// A fixed feature matrix with optional labels and a provenance note.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    x: Mat,
    labels: LabelStore,
    n_classes: usize,
    provenance: String,
}

impl EmbeddingDataset {
    pub fn new_unlabeled(x: Mat, provenance: impl Into<String>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::invalid_argument("dataset needs at least one sample"));
        }
        if !x.is_finite() {
            return Err(Error::invalid_argument("dataset contains a non-finite feature"));
        }
        Ok(EmbeddingDataset { x, labels: LabelStore::None, n_classes: 0, provenance: provenance.into() })
    }

    pub fn new_labeled(
        x: Mat,
        labels: Vec<usize>,
        n_classes: usize,
        role: LabelRole,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::invalid_argument("dataset needs at least one sample"));
        }
        if !x.is_finite() {
            return Err(Error::invalid_argument("dataset contains a non-finite feature"));
        }
        if labels.len() != x.rows() {
            return Err(Error::invalid_argument(format!(
                "{} labels for {} samples",
                labels.len(),
                x.rows()
            )));
        }
        if n_classes < 2 {
            return Err(Error::invalid_argument("labeled dataset needs at least 2 classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid_argument(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        let labels = match role {
            LabelRole::Train => LabelStore::Train(labels),
            LabelRole::EvalOnly => LabelStore::EvalOnly(labels),
        };
        Ok(EmbeddingDataset { x, labels, n_classes, provenance: provenance.into() })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Class count; 0 when the dataset is unlabeled.
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &Mat {
        &self.x
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Labels usable during training; `None` when absent or evaluation-only.
    pub fn train_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            LabelStore::Train(y) => Some(y),
            _ => None,
        }
    }

    /// Labels for metric computation, including held-out target labels.
    pub fn eval_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            LabelStore::Train(y) | LabelStore::EvalOnly(y) => Some(y),
            LabelStore::None => None,
        }
    }

    pub fn has_labels(&self) -> bool {
        !matches!(self.labels, LabelStore::None)
    }

    /// One epoch of shuffled batch index lists drawn from `rng`.
    pub fn batches(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
        batch_indices(self.n(), batch_size, rng)
    }
}

/// Shuffles `0..n` with `rng` and chunks it; a trailing single-sample batch
/// is merged into its predecessor when one exists.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid_argument("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid_argument("batch_size must be at least 1"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().unwrap().len() < 2 {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    Ok(out)
}

/// Parameters of the synthetic cross-domain benchmark.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShiftSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub n_per_class_source: usize,
    pub n_per_class_target: usize,
    /// Intra-class noise scale of the source domain.
    pub source_sigma: f64,
    /// Intra-class noise scale of the target domain; at least `source_sigma`.
    pub target_sigma: f64,
    /// Givens rotation angle applied to consecutive dimension pairs of the
    /// class means when deriving the target domain.
    pub rotation_angle: f64,
    /// Magnitude of a translation along a seeded random unit direction.
    pub bias: f64,
    /// Fraction of disjoint target-mean pairs pulled toward each other.
    pub class_overlap: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidConfig { field, reason: reason.to_string() })
        };
        if self.n_classes < 2 {
            return bad("n_classes", "need at least 2 classes");
        }
        if self.dim == 0 {
            return bad("dim", "need at least 1 dimension");
        }
        if self.n_per_class_source == 0 || self.n_per_class_target == 0 {
            return bad("n_per_class", "need at least 1 sample per class on each side");
        }
        if !self.source_sigma.is_finite() || self.source_sigma <= 0.0 {
            return bad("source_sigma", "must be positive and finite");
        }
        if !self.target_sigma.is_finite() || self.target_sigma < self.source_sigma {
            return bad("target_sigma", "must be finite and at least source_sigma");
        }
        if !self.rotation_angle.is_finite() {
            return bad("rotation_angle", "must be finite");
        }
        if !self.bias.is_finite() || self.bias < 0.0 {
            return bad("bias", "must be nonnegative and finite");
        }
        if !self.class_overlap.is_finite() || !(0.0..=1.0).contains(&self.class_overlap) {
            return bad("class_overlap", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// The shifted, ambiguous benchmark: wider target noise, rotated and
    /// translated means, a quarter of the mean pairs pulled together.
    pub fn ambiguity_16() -> Self {
        ShiftSpec {
            n_classes: 16,
            dim: 32,
            n_per_class_source: 200,
            n_per_class_target: 100,
            source_sigma: 0.5,
            target_sigma: 1.5,
            rotation_angle: 0.3,
            bias: 1.0,
            class_overlap: 0.25,
            seed: 17,
        }
    }

    /// The matched-domains control: identical noise, no rotation, no bias,
    /// no overlap. Adaptation should change nothing here.
    pub fn null_16() -> Self {
        ShiftSpec {
            n_classes: 16,
            dim: 32,
            n_per_class_source: 200,
            n_per_class_target: 100,
            source_sigma: 0.5,
            target_sigma: 0.5,
            rotation_angle: 0.0,
            bias: 0.0,
            class_overlap: 0.0,
            seed: 17,
        }
    }

    /// Looks a preset up by name (`ambiguity-16` or `null-16`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ambiguity-16" => Ok(Self::ambiguity_16()),
            "null-16" => Ok(Self::null_16()),
            other => Err(Error::invalid_argument(format!(
                "unknown preset '{other}' (available: ambiguity-16, null-16)"
            ))),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let spec: ShiftSpec = serde_json::from_str(json)
            .map_err(|e| Error::invalid_argument(format!("bad shift spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Unit vector from `dim` normal draws; falls back to the first axis in the
/// measure-zero case of an all-zero draw.
fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Givens rotation by `angle` on dimension pairs (0,1), (2,3), ...; a final
/// odd dimension is untouched.
fn rotate_pairs(v: &[f64], angle: f64) -> Vec<f64> {
    let (sin, cos) = angle.sin_cos();
    let mut out = v.to_vec();
    let mut t = 0;
    while t + 1 < v.len() {
        out[t] = cos * v[t] - sin * v[t + 1];
        out[t + 1] = sin * v[t] + cos * v[t + 1];
        t += 2;
    }
    out
}

/// Generates the source/target pair described by `spec`.
///
/// All randomness comes from a single stream seeded with `spec.seed`, drawn
/// in a fixed order (class means, bias direction, overlap pairing, source
/// samples, target samples), so equal specs give bitwise-equal datasets.
/// The target dataset's labels are evaluation-only.
pub fn generate_shift_benchmark(spec: &ShiftSpec) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (c, d) = (spec.n_classes, spec.dim);
    let radius = spec.source_sigma * (d as f64).sqrt();

    let source_means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let mut u = random_unit(d, &mut rng);
            u.iter_mut().for_each(|x| *x *= radius);
            u
        })
        .collect();

    let bias_dir = random_unit(d, &mut rng);
    let mut target_means: Vec<Vec<f64>> = source_means
        .iter()
        .map(|m| {
            let mut t = rotate_pairs(m, spec.rotation_angle);
            for (x, b) in t.iter_mut().zip(&bias_dir) {
                *x += spec.bias * b;
            }
            t
        })
        .collect();

    // pull a fraction of disjoint target-mean pairs toward each other
    let mut perm: Vec<usize> = (0..c).collect();
    rng.shuffle(&mut perm);
    let n_pairs = ((c / 2) as f64 * spec.class_overlap).round() as usize;
    for t in 0..n_pairs.min(c / 2) {
        let (a, b) = (perm[2 * t], perm[2 * t + 1]);
        for k in 0..d {
            let (ma, mb) = (target_means[a][k], target_means[b][k]);
            target_means[a][k] = ma + OVERLAP_PULL * (mb - ma);
            target_means[b][k] = mb + OVERLAP_PULL * (ma - mb);
        }
    }

    let sample_block = |means: &[Vec<f64>], per_class: usize, sigma: f64, rng: &mut Rng| {
        let mut x = Mat::zeros(c * per_class, d);
        let mut y = Vec::with_capacity(c * per_class);
        let mut row = 0;
        for (cls, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for (k, &m) in mean.iter().enumerate() {
                    x.set(row, k, m + sigma * rng.next_normal());
                }
                y.push(cls);
                row += 1;
            }
        }
        (x, y)
    };

    let spec_json = serde_json::to_string(spec).expect("shift spec serializes");
    let (xs, ys) = sample_block(&source_means, spec.n_per_class_source, spec.source_sigma, &mut rng);
    let (xt, yt) = sample_block(&target_means, spec.n_per_class_target, spec.target_sigma, &mut rng);

    let source = EmbeddingDataset::new_labeled(
        xs,
        ys,
        c,
        LabelRole::Train,
        format!("shift-benchmark source {spec_json}"),
    )?;
    let target = EmbeddingDataset::new_labeled(
        xt,
        yt,
        c,
        LabelRole::EvalOnly,
        format!("shift-benchmark target {spec_json}"),
    )?;
    Ok((source, target))
}

/// Writes `ds` as CSV: header `f0,...,f{d-1}[,label]`, shortest
/// round-tripping decimal per value.
pub fn save_csv(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for k in 0..ds.dim() {
        if k > 0 {
            out.push(',');
        }
        let _ = write!(out, "f{k}");
    }
    let labels = ds.eval_labels();
    if labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..ds.n() {
        let row = ds.features().row(i);
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        if let Some(y) = labels {
            let _ = write!(out, ",{}", y[i]);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Reads a CSV written by [`save_csv`] (or matching its schema). A label
/// column, when present, is stored under `role`; the class count becomes
/// `max label + 1`.
pub fn load_csv(path: &Path, role: LabelRole) -> Result<EmbeddingDataset> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let schema_err = |reason: String| Error::CsvSchema { path: path.to_path_buf(), reason };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| schema_err("empty file".to_string()))?;

    let cols: Vec<&str> = header.split(',').collect();
    let labeled = cols.last() == Some(&"label");
    let d = if labeled { cols.len() - 1 } else { cols.len() };
    if d == 0 {
        return Err(schema_err("no feature columns in header".to_string()));
    }
    for (k, col) in cols[..d].iter().enumerate() {
        let expect = format!("f{k}");
        if *col != expect {
            return Err(schema_err(format!(
                "header column {} is '{col}', expected '{expect}'",
                k + 1
            )));
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let cell_err = |reason: String| Error::CsvFormat {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(schema_err(format!(
                "line {line_no} has {} columns, header has {}",
                cells.len(),
                cols.len()
            )));
        }
        let mut row = Vec::with_capacity(d);
        for (k, cell) in cells[..d].iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| cell_err(format!("column f{k}: '{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(cell_err(format!("column f{k}: non-finite value '{cell}'")));
            }
            row.push(v);
        }
        if labeled {
            let y: usize = cells[d]
                .parse()
                .map_err(|_| cell_err(format!("label '{}' is not a nonnegative integer", cells[d])))?;
            labels.push(y);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(schema_err("no data rows".to_string()));
    }

    let n = rows.len();
    let mut x = Mat::zeros(n, d);
    for (i, row) in rows.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            x.set(i, k, v);
        }
    }
    let provenance = path.display().to_string();
    if labeled {
        let n_classes = labels.iter().max().copied().unwrap_or(0) + 1;
        EmbeddingDataset::new_labeled(x, labels, n_classes, role, provenance)
    } else {
        EmbeddingDataset::new_unlabeled(x, provenance)
    }
}
