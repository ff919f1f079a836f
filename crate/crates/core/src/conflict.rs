//! Gradient conflict matrices and their averaging schedule.
//!
//! During training a conflict matrix (pairwise cosine similarity of per-task
//! encoder gradients) is recorded every few steps. The reported matrix is
//! the per-entry mean over the final fraction of training, counting only
//! steps where the entry was defined.

use serde::{Deserialize, Serialize};

use crate::matrix::{MatrixKind, PairwiseMatrix};
use crate::nnet::GradientVector;

/// Gradients with a smaller Euclidean norm have no usable direction.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConflictError {
    #[error("gradient length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("gradient for task {task} is outside a {n_tasks}-task matrix")]
    TaskOutOfRange { task: usize, n_tasks: usize },
    #[error("conflict record at step {step} does not follow step {previous}")]
    NonIncreasingStep { step: usize, previous: usize },
    #[error("conflict record has {got} tasks, accumulator holds {expected}")]
    TaskCountMismatch { expected: usize, got: usize },
    #[error("no records in averaging window starting at step {window_start}")]
    EmptyWindow { window_start: usize },
    #[error("checkpoint {checkpoint} precedes the first record at step {first}")]
    CheckpointBeforeFirstRecord { checkpoint: usize, first: usize },
    #[error("accumulator has no records")]
    NoRecords,
}

/// Cosine of two raw vectors, or `None` if either norm is below
/// [`NORM_FLOOR`].
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return None;
    }
    Some((ab / (na * nb)).clamp(-1.0, 1.0))
}

/// `g_i · g_j / (‖g_i‖ ‖g_j‖)`; 0 when either gradient is degenerate.
pub fn cosine_similarity(gi: &GradientVector, gj: &GradientVector) -> Result<f64, ConflictError> {
    if gi.values.len() != gj.values.len() {
        return Err(ConflictError::LengthMismatch {
            left: gi.values.len(),
            right: gj.values.len(),
        });
    }
    Ok(cosine(&gi.values, &gj.values).unwrap_or(0.0))
}

/// Pairwise cosine matrix over `n_tasks` tasks from the gradients of the
/// tasks present in a batch. Absent tasks and degenerate gradients leave
/// their rows invalid, diagonal included.
pub fn conflict_matrix(n_tasks: usize, gradients: &[GradientVector]) -> Result<PairwiseMatrix, ConflictError> {
    let mut m = PairwiseMatrix::new(n_tasks, MatrixKind::Gradient, 1.0);
    for t in 0..n_tasks {
        m.invalidate(t, t);
    }
    if let Some(first) = gradients.first() {
        if let Some(g) = gradients.iter().find(|g| g.values.len() != first.values.len()) {
            return Err(ConflictError::LengthMismatch {
                left: first.values.len(),
                right: g.values.len(),
            });
        }
    }
    if let Some(g) = gradients.iter().find(|g| g.task_id >= n_tasks) {
        return Err(ConflictError::TaskOutOfRange {
            task: g.task_id,
            n_tasks,
        });
    }
    let usable: Vec<&GradientVector> = gradients.iter().filter(|g| g.norm() >= NORM_FLOOR).collect();
    for (a, gi) in usable.iter().enumerate() {
        m.set(gi.task_id, gi.task_id, 1.0);
        for gj in &usable[a + 1..] {
            if let Some(c) = cosine(&gi.values, &gj.values) {
                m.set(gi.task_id, gj.task_id, c);
            }
        }
    }
    Ok(m)
}

/// Receiver for conflict matrices logged during training.
pub trait ConflictSink {
    /// Whether per-task gradients should be computed at all.
    fn wants_records(&self) -> bool {
        true
    }

    /// Called once before training with the number of optimiser steps.
    fn set_total_steps(&mut self, _total_steps: usize) {}

    fn record(&mut self, step: usize, matrix: PairwiseMatrix);
}

/// Discards everything; training runs skip the per-task backward passes.
pub struct NullSink;

impl ConflictSink for NullSink {
    fn wants_records(&self) -> bool {
        false
    }

    fn record(&mut self, _step: usize, _matrix: PairwiseMatrix) {}
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub step: usize,
    pub matrix: PairwiseMatrix,
}

/// Ordered conflict matrices from one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictAccumulator {
    records: Vec<ConflictRecord>,
    total_steps_hint: Option<usize>,
    window_fraction: f64,
}

impl ConflictAccumulator {
    pub fn new(window_fraction: f64) -> Self {
        assert!(
            window_fraction > 0.0 && window_fraction <= 1.0,
            "window fraction must lie in (0, 1]"
        );
        Self {
            records: Vec::new(),
            total_steps_hint: None,
            window_fraction,
        }
    }

    pub fn with_total_steps(mut self, total_steps: usize) -> Self {
        self.total_steps_hint = Some(total_steps);
        self
    }

    pub fn records(&self) -> &[ConflictRecord] {
        &self.records
    }

    pub fn window_fraction(&self) -> f64 {
        self.window_fraction
    }

    pub fn try_push(&mut self, step: usize, matrix: PairwiseMatrix) -> Result<(), ConflictError> {
        if let Some(last) = self.records.last() {
            if step <= last.step {
                return Err(ConflictError::NonIncreasingStep {
                    step,
                    previous: last.step,
                });
            }
            if matrix.n() != last.matrix.n() {
                return Err(ConflictError::TaskCountMismatch {
                    expected: last.matrix.n(),
                    got: matrix.n(),
                });
            }
        }
        self.records.push(ConflictRecord { step, matrix });
        Ok(())
    }

    /// Final step of the run: the last optimiser step when known, otherwise
    /// the last recorded step.
    pub fn last_step(&self) -> Option<usize> {
        let recorded = self.records.last().map(|r| r.step);
        match (self.total_steps_hint, recorded) {
            (Some(total), Some(r)) => Some(r.max(total.saturating_sub(1))),
            (Some(total), None) => Some(total.saturating_sub(1)),
            (None, r) => r,
        }
    }

    /// First step of the averaging window, `⌈(1 − w) · last_step⌉`.
    pub fn window_start(&self) -> Option<usize> {
        self.last_step()
            .map(|last| ((1.0 - self.window_fraction) * last as f64).ceil() as usize)
    }

    /// Per-entry mean over the records inside the averaging window.
    pub fn finalize(&self) -> Result<PairwiseMatrix, ConflictError> {
        let start = self.window_start().ok_or(ConflictError::NoRecords)?;
        let window: Vec<&PairwiseMatrix> = self
            .records
            .iter()
            .filter(|r| r.step >= start)
            .map(|r| &r.matrix)
            .collect();
        if window.is_empty() {
            return Err(ConflictError::EmptyWindow { window_start: start });
        }
        Ok(valid_mean(&window))
    }

    /// Running mean of all records up to and including each checkpoint step.
    pub fn matrix_at_checkpoints(&self, checkpoints: &[usize]) -> Result<Vec<PairwiseMatrix>, ConflictError> {
        let first = self.records.first().ok_or(ConflictError::NoRecords)?.step;
        checkpoints
            .iter()
            .map(|&c| {
                if c < first {
                    return Err(ConflictError::CheckpointBeforeFirstRecord { checkpoint: c, first });
                }
                let upto: Vec<&PairwiseMatrix> = self
                    .records
                    .iter()
                    .take_while(|r| r.step <= c)
                    .map(|r| &r.matrix)
                    .collect();
                Ok(valid_mean(&upto))
            })
            .collect()
    }
}

impl ConflictSink for ConflictAccumulator {
    fn set_total_steps(&mut self, total_steps: usize) {
        self.total_steps_hint = Some(total_steps);
    }

    fn record(&mut self, step: usize, matrix: PairwiseMatrix) {
        self.try_push(step, matrix)
            .expect("training emits strictly increasing steps over a fixed task set");
    }
}

/// Entry-wise mean over the matrices where each entry is valid.
fn valid_mean(mats: &[&PairwiseMatrix]) -> PairwiseMatrix {
    let n = mats[0].n();
    let mut out = PairwiseMatrix::new(n, MatrixKind::Gradient, 1.0);
    for i in 0..n {
        for j in i..n {
            let (sum, count) = mats
                .iter()
                .filter_map(|m| m.get(i, j))
                .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                out.invalidate(i, j);
            } else {
                out.set(i, j, (sum / count as f64).clamp(-1.0, 1.0));
            }
        }
    }
    out
}
