//! Correlation metrics, permutation tests, empirical task correlations,
//! the sigmoid phase-transition fit and the signal-to-noise overlap model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::{MatrixKind, PairwiseMatrix};
use crate::paneldata::TaskPanel;

/// Default number of permutations for significance tests.
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Fewest co-measured samples for an empirical correlation entry.
pub const DEFAULT_MIN_SHARED: usize = 20;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("vectors have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 3 observations, got {n}")]
    TooFewObservations { n: usize },
    #[error("correlation is undefined: zero variance")]
    ZeroVariance,
    #[error("insufficient data: {joint} jointly valid task pairs (need at least 3)")]
    InsufficientPairs { joint: usize },
    #[error("matrices have different sizes ({left} vs {right})")]
    MatrixSize { left: usize, right: usize },
    #[error("sigmoid fit needs at least 5 points over 3 distinct x values (got {points} points, {distinct} distinct)")]
    FitInput { points: usize, distinct: usize },
    #[error("sigmoid fit is degenerate: the response is constant (r_squared = 0, steepness unidentifiable)")]
    DegenerateFit,
    #[error("sigmoid fit failed to converge from every start; best residuals {residuals:?}")]
    FitFailure { residuals: Vec<f64> },
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewObservations { n: x.len() });
    }
    Ok(())
}

/// Centred vector scaled to unit Euclidean norm.
fn standardize(x: &[f64]) -> Result<Vec<f64>, StatsError> {
    let m = mean(x);
    let centred: Vec<f64> = x.iter().map(|v| v - m).collect();
    let ss: f64 = centred.iter().map(|v| v * v).sum();
    // Relative floor so a column of identical values that picked up rounding
    // noise from the mean still counts as constant.
    let scale = x.iter().map(|v| v * v).sum::<f64>();
    if ss <= 1e-28 * scale.max(f64::MIN_POSITIVE) || ss == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let norm = ss.sqrt();
    Ok(centred.into_iter().map(|v| v / norm).collect())
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_pair(x, y)?;
    let (zx, zy) = (standardize(x)?, standardize(y)?);
    Ok(zx.iter().zip(&zy).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Correlation between two task-pair vectors with a permutation p-value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub p_value: f64,
    pub n_pairs: usize,
}

/// Two-sided permutation p-value for Pearson's r.
///
/// `blocks` lists consecutive segment lengths; permutations shuffle `y`
/// within each segment only (a single segment covering everything is the
/// plain test). The p-value is `(1 + #{|r*| ≥ |r|}) / (1 + n_permutations)`.
pub fn permutation_p_value(
    x: &[f64],
    y: &[f64],
    blocks: &[usize],
    n_permutations: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    check_pair(x, y)?;
    assert_eq!(blocks.iter().sum::<usize>(), x.len(), "blocks must cover the vectors");
    let zx = standardize(x)?;
    let mut zy = standardize(y)?;
    let observed: f64 = zx.iter().zip(&zy).map(|(a, b)| a * b).sum();
    let threshold = observed.abs() - 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_permutations {
        let mut start = 0;
        for &len in blocks {
            zy[start..start + len].shuffle(&mut rng);
            start += len;
        }
        let r: f64 = zx.iter().zip(&zy).map(|(a, b)| a * b).sum();
        if r.abs() >= threshold {
            exceed += 1;
        }
    }
    Ok((1 + exceed) as f64 / (1 + n_permutations) as f64)
}

/// Pearson, Spearman and a (blocked) permutation p-value for two vectors.
pub fn correlation_test(
    x: &[f64],
    y: &[f64],
    blocks: &[usize],
    n_permutations: usize,
    seed: u64,
) -> Result<CorrelationResult, StatsError> {
    Ok(CorrelationResult {
        pearson_r: pearson(x, y)?,
        spearman_rho: spearman(x, y)?,
        p_value: permutation_p_value(x, y, blocks, n_permutations, seed)?,
        n_pairs: x.len(),
    })
}

/// Strict upper-triangle values valid in both matrices, as two vectors.
pub fn joint_upper_triangle(a: &PairwiseMatrix, b: &PairwiseMatrix) -> Result<(Vec<f64>, Vec<f64>), StatsError> {
    if a.n() != b.n() {
        return Err(StatsError::MatrixSize {
            left: a.n(),
            right: b.n(),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, j, va) in a.upper_triangle() {
        if let Some(vb) = b.get(i, j) {
            xs.push(va);
            ys.push(vb);
        }
    }
    Ok((xs, ys))
}

/// Correlation of two task matrices over their jointly valid pairs.
pub fn matrix_correlation(
    a: &PairwiseMatrix,
    b: &PairwiseMatrix,
    n_permutations: usize,
    seed: u64,
) -> Result<CorrelationResult, StatsError> {
    pooled_matrix_correlation(&[(a, b)], n_permutations, seed)
}

/// Correlation over the concatenated pair vectors of several matrix pairs
/// (one per seed), permuting within each matrix pair.
pub fn pooled_matrix_correlation(
    pairs: &[(&PairwiseMatrix, &PairwiseMatrix)],
    n_permutations: usize,
    seed: u64,
) -> Result<CorrelationResult, StatsError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut blocks = Vec::new();
    for (a, b) in pairs {
        let (x, y) = joint_upper_triangle(a, b)?;
        if !x.is_empty() {
            blocks.push(x.len());
        }
        xs.extend(x);
        ys.extend(y);
    }
    if xs.len() < 3 {
        return Err(StatsError::InsufficientPairs { joint: xs.len() });
    }
    correlation_test(&xs, &ys, &blocks, n_permutations, seed)
}

/// One-sided permutation test that values flagged `in_group` have a larger
/// mean than the rest. Labels are shuffled within each block.
pub fn mean_difference_test(
    values: &[f64],
    in_group: &[bool],
    blocks: &[usize],
    n_permutations: usize,
    seed: u64,
) -> (f64, f64) {
    assert_eq!(values.len(), in_group.len());
    assert_eq!(blocks.iter().sum::<usize>(), values.len(), "blocks must cover the values");
    let diff = |labels: &[bool]| -> f64 {
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &g) in values.iter().zip(labels) {
            if g {
                s1 += v;
                n1 += 1;
            } else {
                s0 += v;
                n0 += 1;
            }
        }
        if n1 == 0 || n0 == 0 {
            return 0.0;
        }
        s1 / n1 as f64 - s0 / n0 as f64
    };
    let observed = diff(in_group);
    let mut labels = in_group.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_permutations {
        let mut start = 0;
        for &len in blocks {
            labels[start..start + len].shuffle(&mut rng);
            start += len;
        }
        if diff(&labels) >= observed - 1e-12 {
            exceed += 1;
        }
    }
    (observed, (1 + exceed) as f64 / (1 + n_permutations) as f64)
}

/// Pearson correlation of task labels over co-measured samples. Entries
/// with fewer than `min_shared` shared samples, or constant labels on the
/// shared set, are invalid.
pub fn empirical_matrix(panel: &TaskPanel, min_shared: usize) -> PairwiseMatrix {
    let k = panel.n_tasks();
    let mut m = PairwiseMatrix::new(k, MatrixKind::Empirical, 1.0);
    for i in 0..k {
        for j in i + 1..k {
            let (xs, ys): (Vec<f64>, Vec<f64>) = (0..panel.n_samples())
                .filter_map(|s| Some((panel.label(s, i)?, panel.label(s, j)?)))
                .unzip();
            if xs.len() < min_shared.max(3) {
                continue;
            }
            if let Ok(r) = pearson(&xs, &ys) {
                m.set(i, j, r);
            }
        }
    }
    m
}

/// Parameters of `r(x) = L / (1 + exp(−k (x − x0))) + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    #[serde(rename = "L")]
    pub amplitude: f64,
    #[serde(rename = "k")]
    pub steepness: f64,
    #[serde(rename = "x0")]
    pub midpoint: f64,
    #[serde(rename = "b")]
    pub offset: f64,
    pub r_squared: f64,
    pub n_points: usize,
    pub residual_sum_squares: f64,
}

impl SigmoidFit {
    pub fn eval(&self, x: f64) -> f64 {
        sigmoid(&[self.amplitude, self.steepness, self.midpoint, self.offset], x)
    }
}

pub fn sigmoid(params: &[f64; 4], x: f64) -> f64 {
    let [l, k, x0, b] = *params;
    l / (1.0 + (-k * (x - x0)).exp()) + b
}

const FIT_MAX_ITER: usize = 200;
const FIT_REL_TOL: f64 = 1e-10;
const FIT_MAX_HALVINGS: usize = 40;

fn sse(params: &[f64; 4], xs: &[f64], ys: &[f64]) -> f64 {
    xs.iter().zip(ys).map(|(&x, &y)| (sigmoid(params, x) - y).powi(2)).sum()
}

/// Solves a 4×4 system by Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut rhs: [f64; 4]) -> Option<[f64; 4]> {
    let scale = (0..4).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    for col in 0..4 {
        let piv = (col..4).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[piv][col].abs() <= 1e-14 * scale || !a[piv][col].is_finite() {
            return None;
        }
        a.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for c in col..4 {
                a[row][c] -= f * a[col][c];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut out = [0.0; 4];
    for row in (0..4).rev() {
        let tail: f64 = (row + 1..4).map(|c| a[row][c] * out[c]).sum();
        out[row] = (rhs[row] - tail) / a[row][row];
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Damped Gauss–Newton from one start. Returns the final parameters, their
/// SSE, and whether the relative-change criterion was met.
fn gauss_newton(start: [f64; 4], xs: &[f64], ys: &[f64]) -> ([f64; 4], f64, bool) {
    let mut p = start;
    let mut cost = sse(&p, xs, ys);
    for _ in 0..FIT_MAX_ITER {
        if cost <= f64::MIN_POSITIVE {
            return (p, cost, true);
        }
        let [l, k, x0, _] = p;
        let mut jtj = [[0.0; 4]; 4];
        let mut jtr = [0.0; 4];
        for (&x, &y) in xs.iter().zip(ys) {
            let s = 1.0 / (1.0 + (-k * (x - x0)).exp());
            let ds = s * (1.0 - s);
            let row = [s, l * ds * (x - x0), -l * ds * k, 1.0];
            let r = sigmoid(&p, x) - y;
            for a in 0..4 {
                jtr[a] += row[a] * r;
                for b in 0..4 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        let Some(delta) = solve4(jtj, jtr.map(|v| -v)) else {
            return (p, cost, false);
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..FIT_MAX_HALVINGS {
            let trial = [
                p[0] + step * delta[0],
                p[1] + step * delta[1],
                p[2] + step * delta[2],
                p[3] + step * delta[3],
            ];
            let c = sse(&trial, xs, ys);
            if c.is_finite() && c <= cost {
                accepted = Some((trial, c));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, c)) = accepted else {
            // No descent along the Gauss–Newton direction: at a minimum to
            // working precision.
            return (p, cost, true);
        };
        let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
        p = trial;
        cost = c;
        if rel < FIT_REL_TOL {
            return (p, cost, true);
        }
    }
    (p, cost, false)
}

/// Least-squares sigmoid fit of `(overlap percent, r)` points.
///
/// Multi-start damped Gauss–Newton with an analytic Jacobian; starts cover
/// x0 ∈ {20, 30, 40, 50} and k ∈ {0.05, 0.15, 0.5} with L at the response
/// range and b at its minimum. The converged start with the smallest
/// residual sum of squares wins.
pub fn fit_sigmoid(points: &[(f64, f64)]) -> Result<SigmoidFit, StatsError> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if points.len() < 5 || distinct.len() < 3 {
        return Err(StatsError::FitInput {
            points: points.len(),
            distinct: distinct.len(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let y_mean = mean(&ys);
    let ss_tot: f64 = ys.iter().map(|y| (y - y_mean).powi(2)).sum();
    let y_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if y_max == y_min || ss_tot <= 1e-24 * ys.iter().map(|y| y * y).sum::<f64>() {
        return Err(StatsError::DegenerateFit);
    }

    let mut best: Option<([f64; 4], f64)> = None;
    let mut best_any: Option<([f64; 4], f64)> = None;
    for x0 in [20.0, 30.0, 40.0, 50.0] {
        for k in [0.05, 0.15, 0.5] {
            let (p, cost, converged) = gauss_newton([y_max - y_min, k, x0, y_min], &xs, &ys);
            if !(cost.is_finite() && p.iter().all(|v| v.is_finite())) {
                continue;
            }
            if best_any.is_none_or(|(_, c)| cost < c) {
                best_any = Some((p, cost));
            }
            if converged && best.is_none_or(|(_, c)| cost < c) {
                best = Some((p, cost));
            }
        }
    }
    let Some((p, cost)) = best else {
        let residuals = best_any
            .map(|(p, _)| xs.iter().zip(&ys).map(|(&x, &y)| y - sigmoid(&p, x)).collect())
            .unwrap_or_default();
        return Err(StatsError::FitFailure { residuals });
    };
    Ok(SigmoidFit {
        amplitude: p[0],
        steepness: p[1],
        midpoint: p[2],
        offset: p[3],
        r_squared: (1.0 - cost / ss_tot).clamp(0.0, 1.0),
        n_points: points.len(),
        residual_sum_squares: cost,
    })
}

/// Expected gradient–task correlation at overlap `alpha` when shared samples
/// carry signal variance and disjoint samples add independent noise:
/// `α σ²_s / (α σ²_s + (1 − α) σ²_n) · ρ_max`.
pub fn snr_model(alpha: f64, sigma_signal_sq: f64, sigma_noise_sq: f64, rho_max: f64) -> f64 {
    let signal = alpha * sigma_signal_sq;
    signal / (signal + (1.0 - alpha) * sigma_noise_sq) * rho_max
}

/// Overlap at which [`snr_model`] reaches half of `rho_max`.
pub fn snr_midpoint(sigma_signal_sq: f64, sigma_noise_sq: f64) -> f64 {
    sigma_noise_sq / (sigma_signal_sq + sigma_noise_sq)
}
