//! Block structure, training dynamics and overlap audits.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::overlap::overlap_cell;
use super::report::{num, row};
use super::{derive_seed, par_cells, train_logged, ExperimentError, ExperimentReport, RegimeThresholds, Result, RunConfig, Stream};
use crate::cluster::{ari, group_tasks, Partition};
use crate::matrix::PairwiseMatrix;
use crate::paneldata::{apply_overlap, generate_panel, load_csv_panel, pairwise_overlap, CsvSchema, TaskPanel};
use crate::stats::{empirical_matrix, joint_upper_triangle, mean, mean_difference_test, pearson};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PairCategory {
    WithinA,
    WithinB,
    Cross,
}

impl PairCategory {
    const ALL: [PairCategory; 3] = [PairCategory::WithinA, PairCategory::WithinB, PairCategory::Cross];

    fn of(i: usize, j: usize, k: usize) -> Self {
        let split = k.div_ceil(2);
        match (i < split, j < split) {
            (true, true) => PairCategory::WithinA,
            (false, false) => PairCategory::WithinB,
            _ => PairCategory::Cross,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PairCategory::WithinA => "within_a",
            PairCategory::WithinB => "within_b",
            PairCategory::Cross => "cross",
        }
    }
}

fn mean_or_nan(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        mean(v)
    }
}

/// Pair-level G and E per category for the two-block design, with block
/// recovery by clustering G.
pub fn run_cross_domain(cfg: &RunConfig) -> Result<ExperimentReport> {
    let seeds = cfg.seeds().to_vec();
    let k = cfg.panel().n_tasks;
    let truth = Partition::from_labels(&(0..k).map(|t| usize::from(t >= k.div_ceil(2))).collect::<Vec<_>>());
    let cells = par_cells(&seeds, |&seed| {
        let cell = overlap_cell(cfg, seed, 1.0)?;
        let e = empirical_matrix(&cell.panel, cfg.min_shared);
        let grouping = group_tasks(&cell.g, 2.min(k)).map_err(|err| ExperimentError::from(err).at_seed(seed))?;
        let recovered = ari(&grouping.partition, &truth)?;
        Ok((cell.g, e, recovered))
    })?;

    let mut report = ExperimentReport::new("crossdomain", serde_json::to_value(cfg).expect("config serializes"), seeds.clone());
    // Pooled pair-level vectors for the blocked test and the category table.
    let mut values = Vec::new();
    let mut within = Vec::new();
    let mut blocks = Vec::new();
    let mut by_cat: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); 3];
    for (&seed, (g, e, recovered)) in seeds.iter().zip(&cells) {
        let mut per_cat: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); 3];
        let mut count = 0;
        for (i, j, gv) in g.upper_triangle() {
            let cat = PairCategory::of(i, j, k);
            let idx = cat as usize;
            values.push(gv);
            within.push(cat != PairCategory::Cross);
            count += 1;
            per_cat[idx].0.push(gv);
            per_cat[idx].1.push(e.get(i, j).unwrap_or(f64::NAN));
        }
        blocks.push(count);
        let mut r = row!("seed" => seed, "ari_k2" => num(*recovered));
        for cat in PairCategory::ALL {
            let (gs, es) = &per_cat[cat as usize];
            r.insert(format!("mean_g_{}", cat.name()), num(mean_or_nan(gs)));
            let es_valid: Vec<f64> = es.iter().copied().filter(|v| v.is_finite()).collect();
            r.insert(format!("mean_e_{}", cat.name()), num(mean_or_nan(&es_valid)));
            by_cat[cat as usize].0.extend(gs);
            by_cat[cat as usize].1.extend(es);
        }
        report.push_row(r);
    }

    let mut table = serde_json::Map::new();
    for cat in PairCategory::ALL {
        let (gs, es) = &by_cat[cat as usize];
        let joint: Vec<(f64, f64)> = gs.iter().zip(es).filter(|(_, e)| e.is_finite()).map(|(g, e)| (*g, *e)).collect();
        let (jg, je): (Vec<f64>, Vec<f64>) = joint.iter().copied().unzip();
        let r = pearson(&jg, &je).unwrap_or(f64::NAN);
        table.insert(
            cat.name().into(),
            json!({
                "mean_g": num(mean_or_nan(gs)),
                "mean_e": num(mean_or_nan(&je)),
                "r_g_e": num(r),
                "n_pairs": gs.len(),
            }),
        );
    }
    report.derive("categories", Value::Object(table));
    let (diff, p) = mean_difference_test(
        &values,
        &within,
        &blocks,
        cfg.n_permutations,
        derive_seed(cfg.permutation_seed, Stream::Permutation, 0),
    );
    report.derive("within_minus_cross_g", num(diff));
    report.derive("within_minus_cross_p", num(p));
    let aris = report.column("ari_k2");
    report.derive("seeds_with_ari_1", aris.iter().filter(|&&a| a == 1.0).count());
    report.derive("mean_ari_k2", num(mean(&aris)));
    Ok(report)
}

fn triangle_pearson(a: &PairwiseMatrix, b: &PairwiseMatrix) -> f64 {
    joint_upper_triangle(a, b)
        .ok()
        .and_then(|(x, y)| pearson(&x, &y).ok())
        .unwrap_or(f64::NAN)
}

/// Correlations between gradient matrices accumulated up to each epoch
/// checkpoint and the final window-averaged matrix.
pub fn run_dynamics(cfg: &RunConfig) -> Result<ExperimentReport> {
    let epochs = cfg.training().epochs;
    if let Some(&bad) = cfg.checkpoint_epochs.iter().find(|&&e| e == 0 || e > epochs) {
        return Err(ExperimentError::Config(format!(
            "checkpoint epoch {bad} is outside 1..={epochs}"
        )));
    }
    let mut labels: Vec<String> = cfg.checkpoint_epochs.iter().map(|e| format!("epoch_{e}")).collect();
    labels.push("final".into());
    let seeds = cfg.seeds().to_vec();
    let snapshots = par_cells(&seeds, |&seed| {
        let inner = || -> Result<Vec<PairwiseMatrix>> {
            let (panel, _) = generate_panel(cfg.panel(), seed)?;
            let (_, acc) = train_logged(cfg, &panel, derive_seed(seed, Stream::Init, 0))?;
            let steps_per_epoch = cfg.training().steps_per_epoch(panel.labelled_samples().len());
            let steps: Vec<usize> = cfg.checkpoint_epochs.iter().map(|e| e * steps_per_epoch - 1).collect();
            let mut snaps = acc.matrix_at_checkpoints(&steps)?;
            snaps.push(acc.finalize()?);
            Ok(snaps)
        };
        inner().map_err(|e| e.at_seed(seed))
    })?;

    let mut report = ExperimentReport::new("dynamics", serde_json::to_value(cfg).expect("config serializes"), seeds.clone());
    let m = labels.len();
    let mut sums = vec![vec![0.0; m]; m];
    let mut counts = vec![vec![0usize; m]; m];
    for (&seed, snaps) in seeds.iter().zip(&snapshots) {
        for a in 0..m {
            for b in 0..m {
                let r = if a == b { 1.0 } else { triangle_pearson(&snaps[a], &snaps[b]) };
                if a < b {
                    report.push_row(row!("seed" => seed, "from" => labels[a].clone(), "to" => labels[b].clone(), "r" => num(r)));
                }
                if r.is_finite() {
                    sums[a][b] += r;
                    counts[a][b] += 1;
                }
            }
        }
    }
    let table: Vec<Vec<Value>> = (0..m)
        .map(|a| {
            (0..m)
                .map(|b| num(if counts[a][b] == 0 { f64::NAN } else { sums[a][b] / counts[a][b] as f64 }))
                .collect()
        })
        .collect();
    let with_final: serde_json::Map<String, Value> = labels
        .iter()
        .zip(&table)
        .map(|(l, row)| (l.clone(), row[m - 1].clone()))
        .collect();
    report.derive("labels", json!(labels));
    report.derive("mean_correlation", json!(table));
    report.derive("correlation_with_final", Value::Object(with_final));
    Ok(report)
}

/// Reliability of a task pair's signal given its sample overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Unreliable,
    Transitional,
    Reliable,
}

impl Regime {
    pub fn classify(overlap: f64, thresholds: &RegimeThresholds) -> Self {
        if overlap < thresholds.unreliable_below {
            Regime::Unreliable
        } else if overlap < thresholds.reliable_from {
            Regime::Transitional
        } else {
            Regime::Reliable
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Unreliable => "unreliable",
            Regime::Transitional => "transitional",
            Regime::Reliable => "reliable",
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Overlap report for a panel: one row per task pair and summary figures.
pub fn audit_panel(
    panel: &TaskPanel,
    thresholds: &RegimeThresholds,
    config_echo: Value,
    seeds: Vec<u64>,
) -> ExperimentReport {
    let overlap = pairwise_overlap(panel);
    let names = panel.task_names();
    let mut report = ExperimentReport::new("audit", config_echo, seeds.clone());
    let seed = seeds.first().copied();
    let mut values = Vec::new();
    let mut counts = [0usize; 3];
    for (i, j, v) in overlap.upper_triangle() {
        let shared = (0..panel.n_samples())
            .filter(|&s| panel.is_measured(s, i) && panel.is_measured(s, j))
            .count();
        let regime = Regime::classify(v, thresholds);
        counts[regime as usize] += 1;
        values.push(v);
        let mut r = row!(
            "task_i" => i,
            "task_j" => j,
            "name_i" => names[i].clone(),
            "name_j" => names[j].clone(),
            "overlap" => num(v),
            "shared_samples" => shared,
            "regime" => regime.name(),
        );
        if let Some(s) = seed {
            r.insert("seed".into(), s.into());
        }
        report.push_row(r);
    }
    let n_pairs = values.len();
    let at_least = values.iter().filter(|&&v| v >= thresholds.unreliable_below).count();
    report.derive("n_pairs", n_pairs);
    report.derive("median_overlap", num(median(values)));
    report.derive(
        "fraction_at_least_unreliable_threshold",
        num(if n_pairs == 0 { f64::NAN } else { at_least as f64 / n_pairs as f64 }),
    );
    report.derive(
        "regime_counts",
        json!({"unreliable": counts[0], "transitional": counts[1], "reliable": counts[2]}),
    );
    report.derive("task_names", json!(names));
    let k = overlap.n();
    report.derive(
        "overlap_matrix",
        json!((0..k).map(|i| (0..k).map(|j| num(overlap.value(i, j))).collect::<Vec<_>>()).collect::<Vec<_>>()),
    );
    report
}

/// Audits the configured CSV panel, or a generated panel degraded to the
/// configured overlap.
pub fn run_audit(cfg: &RunConfig) -> Result<ExperimentReport> {
    let echo = serde_json::to_value(cfg).expect("config serializes");
    if let Some(path) = &cfg.panel_csv {
        let panel = load_csv_panel(path, &CsvSchema::default())?;
        return Ok(audit_panel(&panel, &cfg.regimes, echo, Vec::new()));
    }
    let seed = cfg.seeds()[0];
    let (full, _) = generate_panel(cfg.panel(), seed)?;
    let panel = apply_overlap(&full, cfg.alpha(), derive_seed(seed, Stream::Overlap, 0))?;
    Ok(audit_panel(&panel, &cfg.regimes, echo, vec![seed]))
}
