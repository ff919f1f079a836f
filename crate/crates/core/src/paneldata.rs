//! Task panels: features, per-task labels and the measurement mask.
//!
//! A panel row is one sample; a task column is measured only where the mask
//! is set. Synthetic panels are generated from latent linear factors with a
//! designed weight matrix, and the overlap between task measurement sets can
//! then be degraded in a controlled way.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::matrix::{MatrixKind, PairwiseMatrix};

/// Minimum measured samples per task that `apply_overlap` will produce.
pub const MIN_TASK_SAMPLES: usize = 20;

/// Achieved Jaccard overlap may differ from the target by this much.
pub const OVERLAP_TOLERANCE: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum PanelError {
    #[error("panel shape mismatch: {0}")]
    Shape(String),
    #[error("task {task:?} has no measured samples")]
    EmptyTask { task: String },
    #[error("label for sample {row}, task {task} is not finite")]
    NonFiniteLabel { row: usize, task: usize },
    #[error("feature at sample {row}, column {col} is not finite")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("weight row {row} is all zeros; cosine ground truth is undefined")]
    ZeroWeightRow { row: usize },
    #[error("overlap target {alpha} must lie in [0, 1]")]
    OverlapTarget { alpha: f64 },
    #[error("overlap {alpha} leaves {per_task} samples per task (need at least {MIN_TASK_SAMPLES}): insufficient samples")]
    InsufficientSamples { alpha: f64, per_task: usize },
    #[error("overlap degradation requires a fully measured panel; task {task} is missing labels")]
    NotFullyMeasured { task: usize },
    #[error("csv parse error at row {row}, column {column:?}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("csv header is missing or malformed: {0}")]
    MissingHeader(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Feature matrix, labels and the validity mask for K tasks over N samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPanel {
    n_features: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    mask: Vec<bool>,
    task_names: Vec<String>,
    sample_ids: Vec<String>,
}

impl TaskPanel {
    /// Builds a panel from row-major buffers. Labels outside the mask are
    /// stored as 0 and never read.
    pub fn new(
        n_features: usize,
        features: Vec<f64>,
        mut labels: Vec<f64>,
        mask: Vec<bool>,
        task_names: Vec<String>,
        sample_ids: Vec<String>,
    ) -> Result<Self, PanelError> {
        let n = sample_ids.len();
        let k = task_names.len();
        if n_features == 0 || features.len() != n * n_features {
            return Err(PanelError::Shape(format!(
                "{} feature values for {n} samples × {n_features} features",
                features.len()
            )));
        }
        if labels.len() != n * k || mask.len() != n * k {
            return Err(PanelError::Shape(format!(
                "labels/mask have {}/{} entries for {n} samples × {k} tasks",
                labels.len(),
                mask.len()
            )));
        }
        if k == 0 {
            return Err(PanelError::Shape("panel has no tasks".into()));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(PanelError::NonFiniteFeature {
                row: pos / n_features,
                col: pos % n_features,
            });
        }
        for (idx, (&m, y)) in mask.iter().zip(labels.iter_mut()).enumerate() {
            if !m {
                *y = 0.0;
            } else if !y.is_finite() {
                return Err(PanelError::NonFiniteLabel {
                    row: idx / k,
                    task: idx % k,
                });
            }
        }
        for (t, name) in task_names.iter().enumerate() {
            if !(0..n).any(|i| mask[i * k + t]) {
                return Err(PanelError::EmptyTask { task: name.clone() });
            }
        }
        Ok(Self {
            n_features,
            features,
            labels,
            mask,
            task_names,
            sample_ids,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn features(&self, sample: usize) -> &[f64] {
        let d = self.n_features;
        &self.features[sample * d..(sample + 1) * d]
    }

    pub fn is_measured(&self, sample: usize, task: usize) -> bool {
        self.mask[sample * self.n_tasks() + task]
    }

    /// Label of `task` for `sample`, or `None` where not measured.
    pub fn label(&self, sample: usize, task: usize) -> Option<f64> {
        let idx = sample * self.n_tasks() + task;
        self.mask[idx].then_some(self.labels[idx])
    }

    /// Sorted indices of samples measured for `task` (the set C_k).
    pub fn measured_set(&self, task: usize) -> Vec<usize> {
        (0..self.n_samples()).filter(|&i| self.is_measured(i, task)).collect()
    }

    pub fn measured_count(&self, task: usize) -> usize {
        (0..self.n_samples()).filter(|&i| self.is_measured(i, task)).count()
    }

    /// True when every sample is measured for every task.
    pub fn is_fully_measured(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Samples with at least one measured task.
    pub fn labelled_samples(&self) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| (0..self.n_tasks()).any(|t| self.is_measured(i, t)))
            .collect()
    }

    /// A panel restricted to the given task columns, in the given order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Self, PanelError> {
        let k = self.n_tasks();
        let n = self.n_samples();
        let mut labels = Vec::with_capacity(n * tasks.len());
        let mut mask = Vec::with_capacity(n * tasks.len());
        for i in 0..n {
            for &t in tasks {
                labels.push(self.labels[i * k + t]);
                mask.push(self.mask[i * k + t]);
            }
        }
        Self::new(
            self.n_features,
            self.features.clone(),
            labels,
            mask,
            tasks.iter().map(|&t| self.task_names[t].clone()).collect(),
            self.sample_ids.clone(),
        )
    }

    /// A panel restricted to the given samples, in the given order.
    pub fn select_samples(&self, samples: &[usize]) -> Result<Self, PanelError> {
        let k = self.n_tasks();
        let d = self.n_features;
        let mut features = Vec::with_capacity(samples.len() * d);
        let mut labels = Vec::with_capacity(samples.len() * k);
        let mut mask = Vec::with_capacity(samples.len() * k);
        for &i in samples {
            features.extend_from_slice(self.features(i));
            labels.extend_from_slice(&self.labels[i * k..(i + 1) * k]);
            mask.extend_from_slice(&self.mask[i * k..(i + 1) * k]);
        }
        Self::new(
            d,
            features,
            labels,
            mask,
            self.task_names.clone(),
            samples.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        )
    }

    /// Replaces the mask. The new mask may only remove measurements.
    fn with_mask(&self, mask: Vec<bool>) -> Result<Self, PanelError> {
        debug_assert!(mask.iter().zip(&self.mask).all(|(&new, &old)| !new || old));
        Self::new(
            self.n_features,
            self.features.clone(),
            self.labels.clone(),
            mask,
            self.task_names.clone(),
            self.sample_ids.clone(),
        )
    }

    /// Copy with the given labels of one task overwritten. Used to perturb
    /// data in tests; unmeasured entries stay unmeasured.
    pub fn with_label(&self, sample: usize, task: usize, value: f64) -> Result<Self, PanelError> {
        let mut labels = self.labels.clone();
        labels[sample * self.n_tasks() + task] = value;
        let mut out = self.clone();
        out.labels = labels;
        if self.is_measured(sample, task) && !value.is_finite() {
            return Err(PanelError::NonFiniteLabel { row: sample, task });
        }
        Ok(out)
    }

    /// Writes the panel in the `id,f0,..,task:<name>` CSV format.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![String::from("id")];
        header.extend((0..self.n_features).map(|j| format!("f{j}")));
        header.extend(self.task_names.iter().map(|t| format!("{TASK_PREFIX}{t}")));
        w.write_record(&header)?;
        for i in 0..self.n_samples() {
            let mut row = Vec::with_capacity(header.len());
            row.push(self.sample_ids[i].clone());
            row.extend(self.features(i).iter().map(f64::to_string));
            row.extend((0..self.n_tasks()).map(|t| self.label(i, t).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<(), PanelError> {
        self.write_csv(File::create(path)?)
    }
}

pub const TASK_PREFIX: &str = "task:";

/// Column naming used when reading panels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub id_column: String,
    pub task_prefix: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            id_column: "id".into(),
            task_prefix: TASK_PREFIX.into(),
        }
    }
}

/// Reads a panel CSV. Empty task cells become unmeasured entries; every
/// feature cell must be a finite number.
pub fn load_csv_panel(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TaskPanel, PanelError> {
    read_csv_panel(File::open(path)?, schema)
}

pub fn read_csv_panel<R: Read>(input: R, schema: &CsvSchema) -> Result<TaskPanel, PanelError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let id_col = header
        .iter()
        .position(|h| *h == schema.id_column)
        .ok_or_else(|| PanelError::MissingHeader(format!("no {:?} column", schema.id_column)))?;
    let task_cols: Vec<usize> = (0..header.len())
        .filter(|&c| header[c].starts_with(&schema.task_prefix))
        .collect();
    if task_cols.is_empty() {
        return Err(PanelError::MissingHeader(format!(
            "no task columns (prefix {:?})",
            schema.task_prefix
        )));
    }
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != id_col && !task_cols.contains(&c))
        .collect();
    if feature_cols.is_empty() {
        return Err(PanelError::MissingHeader("no feature columns".into()));
    }
    let task_names: Vec<String> = task_cols
        .iter()
        .map(|&c| header[c][schema.task_prefix.len()..].to_owned())
        .collect();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    let mut ids = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let data_row = row + 1;
        if rec.len() != header.len() {
            return Err(PanelError::Parse {
                row: data_row,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        ids.push(rec[id_col].to_owned());
        for &c in &feature_cols {
            let cell = rec[c].trim();
            let v: f64 = cell.parse().map_err(|_| PanelError::Parse {
                row: data_row,
                column: header[c].clone(),
                message: format!("feature cell {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(PanelError::Parse {
                    row: data_row,
                    column: header[c].clone(),
                    message: format!("feature cell {cell:?} is not finite"),
                });
            }
            features.push(v);
        }
        for &c in &task_cols {
            let cell = rec[c].trim();
            if cell.is_empty() {
                labels.push(0.0);
                mask.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| PanelError::Parse {
                    row: data_row,
                    column: header[c].clone(),
                    message: format!("label cell {cell:?} is not a number"),
                })?;
                labels.push(v);
                mask.push(true);
            }
        }
    }
    TaskPanel::new(feature_cols.len(), features, labels, mask, task_names, ids)
}

/// How designed task weight vectors are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// I.i.d. standard-normal entries, each row scaled to unit length.
    Random,
    /// First ⌈K/2⌉ tasks load on the first ⌈L/2⌉ latents, the rest on the
    /// remaining latents. Loadings on a block's own latents are absolute
    /// standard-normal draws, so tasks within a block are positively related
    /// and tasks across blocks are orthogonal. Rows unit length.
    TwoBlock,
    /// Absolute values of standard-normal entries, rows unit length. Every
    /// designed similarity is then non-negative.
    HalfNormal,
    /// Explicit K×L weights, used as given.
    Custom(Vec<Vec<f64>>),
}

/// Parameters of the synthetic latent-factor generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PanelSpec {
    pub n_samples: usize,
    pub n_latent: usize,
    pub n_tasks: usize,
    pub weight_scheme: WeightScheme,
    pub noise_sd: f64,
    /// Extra standard-normal feature columns that no task depends on.
    pub n_distractors: usize,
}

impl Default for PanelSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_latent: 10,
            n_tasks: 8,
            weight_scheme: WeightScheme::Random,
            noise_sd: 0.3,
            n_distractors: 0,
        }
    }
}

/// Designed task weights and the cosine similarity they imply.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub weights: Vec<Vec<f64>>,
    pub noise_sd: f64,
    pub similarity: PairwiseMatrix,
}

impl GroundTruth {
    pub fn from_weights(weights: Vec<Vec<f64>>, noise_sd: f64) -> Result<Self, PanelError> {
        let norms: Vec<f64> = weights.iter().map(|w| dot(w, w).sqrt()).collect();
        if let Some(row) = norms.iter().position(|&n| n == 0.0) {
            return Err(PanelError::ZeroWeightRow { row });
        }
        let k = weights.len();
        let mut similarity = PairwiseMatrix::new(k, MatrixKind::GroundTruth, 1.0);
        for i in 0..k {
            for j in i + 1..k {
                let c = (dot(&weights[i], &weights[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                similarity.set(i, j, c);
            }
        }
        Ok(Self {
            weights,
            noise_sd,
            similarity,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit_rows(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for row in &mut rows {
        let norm = dot(row, row).sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    rows
}

fn design_weights(spec: &PanelSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, PanelError> {
    let (k, l) = (spec.n_tasks, spec.n_latent);
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    match &spec.weight_scheme {
        WeightScheme::Random | WeightScheme::HalfNormal => {
            let fold = matches!(spec.weight_scheme, WeightScheme::HalfNormal);
            let mut rows = Vec::with_capacity(k);
            for _ in 0..k {
                // Redraw the (measure-zero) all-zero row so normalisation is defined.
                loop {
                    let row: Vec<f64> = (0..l)
                        .map(|_| if fold { normal().abs() } else { normal() })
                        .collect();
                    if row.iter().any(|&v| v != 0.0) {
                        rows.push(row);
                        break;
                    }
                }
            }
            Ok(unit_rows(rows))
        }
        WeightScheme::TwoBlock => {
            if l < 2 {
                return Err(PanelError::Config("two_block needs at least 2 latent features".into()));
            }
            let tasks_a = k.div_ceil(2);
            let latents_a = l.div_ceil(2);
            let mut rows = Vec::with_capacity(k);
            for t in 0..k {
                let support = if t < tasks_a { 0..latents_a } else { latents_a..l };
                loop {
                    let row: Vec<f64> = (0..l)
                        .map(|i| if support.contains(&i) { normal().abs() } else { 0.0 })
                        .collect();
                    if row.iter().any(|&v| v != 0.0) {
                        rows.push(row);
                        break;
                    }
                }
            }
            Ok(unit_rows(rows))
        }
        WeightScheme::Custom(rows) => {
            if rows.len() != k || rows.iter().any(|r| r.len() != l) {
                return Err(PanelError::Config(format!(
                    "custom weight matrix must be {k}×{l}"
                )));
            }
            if let Some(row) = rows.iter().position(|r| r.iter().all(|&v| v == 0.0)) {
                return Err(PanelError::ZeroWeightRow { row });
            }
            Ok(rows.clone())
        }
    }
}

/// Synthetic panel with labels `y_k = w_k · z + ε`, fully measured.
///
/// Random draws happen in a fixed order (weights, latents, distractors,
/// noise) from a ChaCha stream seeded by `seed`.
pub fn generate_panel(spec: &PanelSpec, seed: u64) -> Result<(TaskPanel, GroundTruth), PanelError> {
    if spec.n_latent < 1 {
        return Err(PanelError::Config("n_latent must be at least 1".into()));
    }
    if spec.n_tasks < 2 {
        return Err(PanelError::Config("n_tasks must be at least 2".into()));
    }
    if spec.n_samples < 10 {
        return Err(PanelError::Config("n_samples must be at least 10".into()));
    }
    if !(spec.noise_sd >= 0.0 && spec.noise_sd.is_finite()) {
        return Err(PanelError::Config(format!("noise_sd {} must be finite and non-negative", spec.noise_sd)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = design_weights(spec, &mut rng)?;
    let truth = GroundTruth::from_weights(weights, spec.noise_sd)?;

    let (n, l, k) = (spec.n_samples, spec.n_latent, spec.n_tasks);
    let d = l + spec.n_distractors;
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n {
        for _ in 0..l {
            features.push(StandardNormal.sample(&mut rng));
        }
        for _ in 0..spec.n_distractors {
            features.push(StandardNormal.sample(&mut rng));
        }
    }
    let mut labels = Vec::with_capacity(n * k);
    for i in 0..n {
        let z = &features[i * d..i * d + l];
        for w in &truth.weights {
            let eps: f64 = StandardNormal.sample(&mut rng);
            labels.push(dot(w, z) + spec.noise_sd * eps);
        }
    }
    let panel = TaskPanel::new(
        d,
        features,
        labels,
        vec![true; n * k],
        (0..k).map(|t| format!("t{t}")).collect(),
        (0..n).map(|i| format!("s{i}")).collect(),
    )?;
    Ok((panel, truth))
}

/// Sizes of the shared core and per-task exclusive blocks for a target
/// pairwise Jaccard overlap on N samples and K tasks.
///
/// Every pair then has overlap `core / (core + 2·exclusive)`.
pub fn overlap_layout(n: usize, k: usize, alpha: f64) -> (usize, usize) {
    if alpha >= 1.0 {
        return (n, 0);
    }
    let ratio = 2.0 * alpha / (1.0 - alpha);
    let exclusive = (n as f64 / (k as f64 + ratio)).floor() as usize;
    if exclusive == 0 {
        return (n, 0);
    }
    let core = ((ratio * exclusive as f64).round() as usize).min(n - k * exclusive);
    (core, exclusive)
}

/// Degrades a fully measured panel so every task pair has Jaccard overlap
/// close to `alpha`.
///
/// All tasks share one core of samples and each task also owns a disjoint
/// block of equal size, so per-task measured counts are equal. Sample roles
/// are assigned by a seeded shuffle. `alpha = 1` returns the panel unchanged.
pub fn apply_overlap(panel: &TaskPanel, alpha: f64, seed: u64) -> Result<TaskPanel, PanelError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(PanelError::OverlapTarget { alpha });
    }
    let k = panel.n_tasks();
    if let Some(task) = (0..k).find(|&t| panel.measured_count(t) != panel.n_samples()) {
        return Err(PanelError::NotFullyMeasured { task });
    }
    if alpha == 1.0 {
        return Ok(panel.clone());
    }
    let n = panel.n_samples();
    let (core, exclusive) = overlap_layout(n, k, alpha);
    let per_task = core + exclusive;
    if per_task < MIN_TASK_SAMPLES {
        return Err(PanelError::InsufficientSamples { alpha, per_task });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut mask = vec![false; n * k];
    for &i in &order[..core] {
        for t in 0..k {
            mask[i * k + t] = true;
        }
    }
    for t in 0..k {
        let start = core + t * exclusive;
        for &i in &order[start..start + exclusive] {
            mask[i * k + t] = true;
        }
    }
    panel.with_mask(mask)
}

/// Jaccard overlap |C_i ∩ C_j| / |C_i ∪ C_j| for every task pair.
pub fn pairwise_overlap(panel: &TaskPanel) -> PairwiseMatrix {
    let k = panel.n_tasks();
    let mut m = PairwiseMatrix::new(k, MatrixKind::Overlap, 1.0);
    for i in 0..k {
        for j in i + 1..k {
            let (mut inter, mut union) = (0usize, 0usize);
            for s in 0..panel.n_samples() {
                let (a, b) = (panel.is_measured(s, i), panel.is_measured(s, j));
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            let v = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            m.set(i, j, v);
        }
    }
    m
}

/// Train/test split by sample; the test set is the first `⌈n·fraction⌉`
/// samples of a seeded shuffle. Both index lists are sorted.
pub fn split_samples(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction).ceil() as usize;
    let n_test = n_test.min(n.saturating_sub(1));
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}
