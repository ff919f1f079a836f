//! Experiments that relate the gradient matrix to ground truth and to the
//! empirical correlations as sample overlap varies.

use serde_json::{json, Value};

use super::report::{num, row};
use super::{
    derive_seed, gradient_matrix, par_cells, ExperimentError, ExperimentReport, Result, RunConfig, Stream,
};
use crate::matrix::PairwiseMatrix;
use crate::paneldata::{apply_overlap, generate_panel, pairwise_overlap, GroundTruth, TaskPanel};
use crate::stats::{
    empirical_matrix, fit_sigmoid, matrix_correlation, mean, pooled_matrix_correlation, sample_sd, spearman,
    CorrelationResult, StatsError,
};

/// Panel, designed truth and trained gradient matrix for one seed at one
/// overlap level.
pub(super) struct Cell {
    pub panel: TaskPanel,
    pub truth: GroundTruth,
    pub g: PairwiseMatrix,
}

/// Generates the seed's panel, degrades it to `alpha` and trains on it.
/// The same seed yields the same full panel, mask layout and initial
/// weights at every overlap level.
pub(super) fn overlap_cell(cfg: &RunConfig, seed: u64, alpha: f64) -> Result<Cell> {
    let inner = || -> Result<Cell> {
        let (full, truth) = generate_panel(cfg.panel(), seed)?;
        let panel = apply_overlap(&full, alpha, derive_seed(seed, Stream::Overlap, 0))?;
        let g = gradient_matrix(cfg, &panel, derive_seed(seed, Stream::Init, 0))?;
        Ok(Cell { panel, truth, g })
    };
    inner().map_err(|e| e.at_seed(seed))
}

fn perm_seed(cfg: &RunConfig, seed: u64, index: u64) -> u64 {
    derive_seed(cfg.permutation_seed ^ seed, Stream::Permutation, index)
}

/// Correlation that may legitimately be unavailable because too few pairs
/// are jointly valid or one side is constant.
fn soft_correlation(
    a: &PairwiseMatrix,
    b: &PairwiseMatrix,
    n_perm: usize,
    seed: u64,
) -> Result<Option<CorrelationResult>> {
    match matrix_correlation(a, b, n_perm, seed) {
        Ok(c) => Ok(Some(c)),
        Err(StatsError::InsufficientPairs { .. } | StatsError::ZeroVariance) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn joint_pairs(a: &PairwiseMatrix, b: &PairwiseMatrix) -> usize {
    a.upper_triangle().filter(|&(i, j, _)| b.is_valid(i, j)).count()
}

fn correlation_fields(prefix: &str, c: Option<&CorrelationResult>, n_pairs: usize) -> serde_json::Map<String, Value> {
    row!(
        format!("r_{prefix}") => num(c.map_or(f64::NAN, |c| c.pearson_r)),
        format!("rho_{prefix}") => num(c.map_or(f64::NAN, |c| c.spearman_rho)),
        format!("p_{prefix}") => num(c.map_or(f64::NAN, |c| c.p_value)),
        format!("n_pairs_{prefix}") => n_pairs,
    )
}

/// Similarity with the sign of every entry removed.
fn abs_entries(m: &PairwiseMatrix) -> PairwiseMatrix {
    let mut out = m.clone();
    for (i, j, v) in m.upper_triangle() {
        out.set(i, j, v.abs());
    }
    out
}

fn finite(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    values.into_iter().filter(|v| v.is_finite()).collect()
}

fn correlation_json(c: &CorrelationResult) -> Value {
    json!({
        "r": num(c.pearson_r),
        "rho": num(c.spearman_rho),
        "p": num(c.p_value),
        "n_pairs": c.n_pairs,
    })
}

/// Gradient matrix against designed similarity and empirical correlations
/// on fully measured panels.
pub fn run_synthetic_validation(cfg: &RunConfig) -> Result<ExperimentReport> {
    let seeds = cfg.seeds().to_vec();
    let cells = par_cells(&seeds, |&seed| overlap_cell(cfg, seed, 1.0))?;
    let mut report = ExperimentReport::new("validate", serde_json::to_value(cfg).expect("config serializes"), seeds.clone());
    let mut empirical = Vec::with_capacity(cells.len());
    let mut abs_truth = Vec::with_capacity(cells.len());
    for (&seed, cell) in seeds.iter().zip(&cells) {
        let n = cfg.n_permutations;
        let e = empirical_matrix(&cell.panel, cfg.min_shared);
        let vs_truth = matrix_correlation(&cell.g, &cell.truth.similarity, n, perm_seed(cfg, seed, 0))
            .map_err(|err| ExperimentError::from(err).at_seed(seed))?;
        let vs_emp = soft_correlation(&cell.g, &e, n, perm_seed(cfg, seed, 1))?;
        let abs_s = abs_entries(&cell.truth.similarity);
        let vs_abs = soft_correlation(&cell.g, &abs_s, n, perm_seed(cfg, seed, 2))?;
        let mut r = row!("seed" => seed);
        r.extend(correlation_fields("g_truth", Some(&vs_truth), vs_truth.n_pairs));
        r.extend(correlation_fields("g_emp", vs_emp.as_ref(), joint_pairs(&cell.g, &e)));
        r.insert("r_g_abs_truth".into(), num(vs_abs.map_or(f64::NAN, |c| c.pearson_r)));
        r.insert(
            "mean_g".into(),
            num(mean(&cell.g.upper_triangle().map(|t| t.2).collect::<Vec<_>>())),
        );
        report.push_row(r);
        empirical.push(e);
        abs_truth.push(abs_s);
    }

    let seed0 = perm_seed(cfg, u64::MAX, 0);
    let truth_pairs: Vec<_> = cells.iter().map(|c| (&c.g, &c.truth.similarity)).collect();
    let pooled_truth = pooled_matrix_correlation(&truth_pairs, cfg.n_permutations, seed0)?;
    report.derive("pooled_g_truth", correlation_json(&pooled_truth));
    let emp_pairs: Vec<_> = cells.iter().zip(&empirical).map(|(c, e)| (&c.g, e)).collect();
    report.derive(
        "pooled_g_emp",
        pooled_matrix_correlation(&emp_pairs, cfg.n_permutations, seed0 ^ 1)
            .map_or(Value::Null, |c| correlation_json(&c)),
    );
    let abs_pairs: Vec<_> = cells.iter().zip(&abs_truth).map(|(c, a)| (&c.g, a)).collect();
    report.derive(
        "pooled_g_abs_truth",
        pooled_matrix_correlation(&abs_pairs, cfg.n_permutations, seed0 ^ 2)
            .map_or(Value::Null, |c| correlation_json(&c)),
    );
    report.derive("mean_r_g_truth", num(mean(&finite(report.column("r_g_truth")))));
    report.derive("mean_r_g_emp", num(mean(&finite(report.column("r_g_emp")))));
    Ok(report)
}

/// Per-level means over cells, skipping cells without a correlation.
fn level_means(report: &ExperimentReport, grid: &[f64], column: &str) -> Vec<(f64, f64, f64, usize)> {
    let alphas = report.column("alpha");
    let values = report.column(column);
    grid.iter()
        .map(|&a| {
            let vs = finite(alphas.iter().zip(&values).filter(|(x, _)| **x == a).map(|(_, v)| *v));
            let sd = if vs.len() > 1 { sample_sd(&vs) } else { f64::NAN };
            (a, if vs.is_empty() { f64::NAN } else { mean(&vs) }, sd, vs.len())
        })
        .collect()
}

fn levels_json(levels: &[(f64, f64, f64, usize)]) -> Value {
    Value::Array(
        levels
            .iter()
            .map(|&(a, m, sd, n)| json!({"alpha": a, "mean_r": num(m), "sd_r": num(sd), "n_cells": n}))
            .collect(),
    )
}

fn trend(levels: &[(f64, f64, f64, usize)]) -> Option<f64> {
    let valid: Vec<_> = levels.iter().filter(|l| l.1.is_finite()).collect();
    let a: Vec<f64> = valid.iter().map(|l| l.0).collect();
    let m: Vec<f64> = valid.iter().map(|l| l.1).collect();
    spearman(&a, &m).ok()
}

/// Mean of a column over rows whose alpha satisfies `keep`.
fn mean_where(report: &ExperimentReport, column: &str, keep: impl Fn(f64) -> bool) -> f64 {
    let alphas = report.column("alpha");
    let vs = finite(
        alphas
            .iter()
            .zip(report.column(column))
            .filter(|(a, _)| keep(**a))
            .map(|(_, v)| v),
    );
    if vs.is_empty() {
        f64::NAN
    } else {
        mean(&vs)
    }
}

fn grid_cells(cfg: &RunConfig) -> Vec<(f64, u64)> {
    cfg.overlap_grid
        .iter()
        .flat_map(|&a| cfg.seeds().iter().map(move |&s| (a, s)))
        .collect()
}

/// Correlation of G with E as overlap is degraded, with a sigmoid fitted
/// to the mean correlation against overlap in percent.
pub fn run_phase_transition(cfg: &RunConfig) -> Result<ExperimentReport> {
    let cells = grid_cells(cfg);
    let rows = par_cells(&cells, |&(alpha, seed)| {
        let cell = overlap_cell(cfg, seed, alpha)?;
        let e = empirical_matrix(&cell.panel, cfg.min_shared);
        let c = soft_correlation(&cell.g, &e, cfg.n_permutations, perm_seed(cfg, seed, alpha.to_bits()))?;
        let vs_truth = soft_correlation(&cell.g, &cell.truth.similarity, 0, 0)?;
        let overlap = pairwise_overlap(&cell.panel);
        let ov: Vec<f64> = overlap.upper_triangle().map(|t| t.2).collect();
        let mut r = row!("alpha" => alpha, "seed" => seed, "measured_overlap" => num(mean(&ov)));
        r.insert("r".into(), num(c.as_ref().map_or(f64::NAN, |c| c.pearson_r)));
        r.insert("rho".into(), num(c.as_ref().map_or(f64::NAN, |c| c.spearman_rho)));
        r.insert("p".into(), num(c.as_ref().map_or(f64::NAN, |c| c.p_value)));
        r.insert("n_pairs".into(), joint_pairs(&cell.g, &e).into());
        r.insert("r_g_truth".into(), num(vs_truth.map_or(f64::NAN, |c| c.pearson_r)));
        Ok(r)
    })?;
    let mut report = ExperimentReport::new("phase", serde_json::to_value(cfg).expect("config serializes"), cfg.seeds().to_vec());
    for r in rows {
        report.push_row(r);
    }
    let levels = level_means(&report, &cfg.overlap_grid, "r");
    report.derive("levels", levels_json(&levels));
    report.derive("spearman_alpha_mean_r", trend(&levels).map_or(Value::Null, num));
    let high = mean_where(&report, "r", |a| a >= 0.6 - 1e-9);
    let low = mean_where(&report, "r", |a| a <= 0.1 + 1e-9);
    report.derive("mean_r_high_overlap", num(high));
    report.derive("mean_r_low_overlap", num(low));
    report.derive("high_low_gap", num(high - low));
    let points: Vec<(f64, f64)> = levels
        .iter()
        .filter(|l| l.1.is_finite())
        .map(|l| (l.0 * 100.0, l.1))
        .collect();
    match fit_sigmoid(&points) {
        Ok(fit) => report.derive("sigmoid", serde_json::to_value(fit).expect("fit serializes")),
        Err(e) => {
            report.derive("sigmoid", Value::Null);
            report.derive("sigmoid_error", e.to_string());
        }
    }
    Ok(report)
}

/// Correlation of G with designed similarity at a fixed overlap (zero by
/// default) across many seeds.
pub fn run_prop1_null(cfg: &RunConfig) -> Result<ExperimentReport> {
    let alpha = cfg.alpha();
    let seeds = cfg.seeds().to_vec();
    let rows = par_cells(&seeds, |&seed| {
        let cell = overlap_cell(cfg, seed, alpha)?;
        let c = matrix_correlation(&cell.g, &cell.truth.similarity, cfg.n_permutations, perm_seed(cfg, seed, 0))
            .map_err(|e| ExperimentError::from(e).at_seed(seed))?;
        let mut r = row!("alpha" => alpha, "seed" => seed);
        r.extend(correlation_fields("g_truth", Some(&c), c.n_pairs));
        Ok(r)
    })?;
    let mut report = ExperimentReport::new("prop1", serde_json::to_value(cfg).expect("config serializes"), seeds);
    for r in rows {
        report.push_row(r);
    }
    let rs = report.column("r_g_truth");
    let ps = report.column("p_g_truth");
    let m = mean(&rs);
    let se = if rs.len() > 1 { sample_sd(&rs) / (rs.len() as f64).sqrt() } else { f64::NAN };
    report.derive("mean_r", num(m));
    report.derive("se_r", num(se));
    report.derive("abs_mean_over_se", num(m.abs() / se));
    report.derive(
        "fraction_p_below_0_05",
        num(ps.iter().filter(|&&p| p < 0.05).count() as f64 / ps.len() as f64),
    );
    Ok(report)
}

/// How far the degraded E and G drift from their full-overlap references
/// for the same seed.
pub fn run_variance_decomposition(cfg: &RunConfig) -> Result<ExperimentReport> {
    let seeds = cfg.seeds().to_vec();
    let references = par_cells(&seeds, |&seed| {
        let cell = overlap_cell(cfg, seed, 1.0)?;
        let e = empirical_matrix(&cell.panel, cfg.min_shared);
        Ok((cell.g, e))
    })?;
    let cells = grid_cells(cfg);
    let rows = par_cells(&cells, |&(alpha, seed)| {
        let idx = seeds.iter().position(|&s| s == seed).expect("seed from grid");
        let (g_full, e_full) = &references[idx];
        let (g, e) = if alpha == 1.0 {
            (g_full.clone(), e_full.clone())
        } else {
            let cell = overlap_cell(cfg, seed, alpha)?;
            let e = empirical_matrix(&cell.panel, cfg.min_shared);
            (cell.g, e)
        };
        let n = cfg.n_permutations;
        let ce = soft_correlation(&e, e_full, n, perm_seed(cfg, seed, 2 * alpha.to_bits()))?;
        let cg = soft_correlation(&g, g_full, n, perm_seed(cfg, seed, 2 * alpha.to_bits() + 1))?;
        let mut r = row!("alpha" => alpha, "seed" => seed);
        r.extend(correlation_fields("e_ref", ce.as_ref(), joint_pairs(&e, e_full)));
        r.extend(correlation_fields("g_ref", cg.as_ref(), joint_pairs(&g, g_full)));
        r.insert("valid_pairs_e".into(), e.n_valid_pairs().into());
        Ok(r)
    })?;
    let mut report = ExperimentReport::new("vardecomp", serde_json::to_value(cfg).expect("config serializes"), seeds);
    for r in rows {
        report.push_row(r);
    }
    for (column, key) in [("r_e_ref", "empirical"), ("r_g_ref", "gradient")] {
        let levels = level_means(&report, &cfg.overlap_grid, column);
        report.derive(&format!("{key}_levels"), levels_json(&levels));
        report.derive(&format!("{key}_spearman_alpha"), trend(&levels).map_or(Value::Null, num));
    }
    Ok(report)
}
