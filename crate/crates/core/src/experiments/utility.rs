//! Whether the gradient matrix predicts the value of joint training.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::report::{num, row};
use super::{
    derive_seed, gradient_matrix, par_cells, subset_seed, test_r2, train_plain, ExperimentError, ExperimentReport,
    Result, RunConfig, Stream, ThresholdSweep,
};
use crate::cluster::{group_tasks, random_partition, Partition};
use crate::matrix::PairwiseMatrix;
use crate::paneldata::{generate_panel, split_samples, GroundTruth, TaskPanel};
use crate::stats::{correlation_test, mean};

/// Held-out gain of training two tasks together over training each alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenefitRecord {
    pub seed: u64,
    pub task_i: usize,
    pub task_j: usize,
    pub g_ij: f64,
    /// Mean test R² of the two-task model minus the mean single-task test R².
    pub benefit: f64,
}

/// Train and test panels from one seed's generated panel. The split is
/// drawn on the fully measured panel.
struct Split {
    train: TaskPanel,
    test: TaskPanel,
    truth: GroundTruth,
}

fn split_panel(cfg: &RunConfig, seed: u64) -> Result<Split> {
    let (panel, truth) = generate_panel(cfg.panel(), seed)?;
    let (train, test) = split_samples(panel.n_samples(), cfg.test_fraction, derive_seed(seed, Stream::Split, 0));
    Ok(Split {
        train: panel.select_samples(&train)?,
        test: panel.select_samples(&test)?,
        truth,
    })
}

/// Test R² of each task in `tasks` when they are trained together.
fn subset_scores(cfg: &RunConfig, split: &Split, seed: u64, tasks: &[usize]) -> Result<Vec<f64>> {
    let train = split.train.select_tasks(tasks)?;
    let test = split.test.select_tasks(tasks)?;
    let net = train_plain(cfg, &train, subset_seed(seed, tasks))?;
    test_r2(&net, &test, &(0..test.n_samples()).collect::<Vec<_>>())
}

/// Per-task test R² keyed by (seed index, task subset).
type SubsetScores = HashMap<(usize, Vec<usize>), Vec<f64>>;

/// Trains every distinct task subset once per seed, in parallel.
fn score_subsets(
    cfg: &RunConfig,
    splits: &[(u64, Split)],
    subsets: &BTreeSet<(usize, Vec<usize>)>,
) -> Result<SubsetScores> {
    let jobs: Vec<&(usize, Vec<usize>)> = subsets.iter().collect();
    let scores = par_cells(&jobs, |&(idx, tasks)| {
        let (seed, split) = &splits[*idx];
        subset_scores(cfg, split, *seed, tasks).map_err(|e| e.at_seed(*seed))
    })?;
    Ok(jobs.into_iter().cloned().zip(scores).collect())
}

/// Gradient matrix of a model trained on all tasks of the training split.
fn train_gradients(cfg: &RunConfig, splits: &[(u64, Split)]) -> Result<Vec<PairwiseMatrix>> {
    par_cells(splits, |(seed, split)| {
        gradient_matrix(cfg, &split.train, derive_seed(*seed, Stream::Init, 0)).map_err(|e| e.at_seed(*seed))
    })
}

fn make_splits(cfg: &RunConfig) -> Result<Vec<(u64, Split)>> {
    let seeds = cfg.seeds().to_vec();
    let splits = par_cells(&seeds, |&seed| split_panel(cfg, seed).map_err(|e| e.at_seed(seed)))?;
    Ok(seeds.into_iter().zip(splits).collect())
}

/// Fractions of harmful pairs screened out and beneficial pairs kept when
/// pairs with G at or above `threshold` are trained jointly.
fn sweep_point(records: &[BenefitRecord], threshold: f64) -> (f64, f64, f64) {
    let negative: Vec<&BenefitRecord> = records.iter().filter(|r| r.benefit < 0.0).collect();
    let positive: Vec<&BenefitRecord> = records.iter().filter(|r| r.benefit >= 0.0).collect();
    let frac = |set: &[&BenefitRecord], pred: &dyn Fn(&BenefitRecord) -> bool| {
        if set.is_empty() {
            f64::NAN
        } else {
            set.iter().filter(|r| pred(r)).count() as f64 / set.len() as f64
        }
    };
    let avoided = frac(&negative, &|r| r.g_ij < threshold);
    let retained = frac(&positive, &|r| r.g_ij >= threshold);
    let f1 = if avoided + retained > 0.0 {
        2.0 * avoided * retained / (avoided + retained)
    } else {
        0.0
    };
    (avoided, retained, f1)
}

fn thresholds(sweep: &ThresholdSweep, g: &[f64]) -> Vec<f64> {
    let mut t = match sweep {
        ThresholdSweep::Values(v) => v.clone(),
        ThresholdSweep::Quantiles(q) => {
            let mut sorted = g.to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            (0..*q)
                .map(|i| {
                    // Linear interpolation between order statistics.
                    let pos = i as f64 / (*q - 1) as f64 * (n - 1) as f64;
                    let lo = pos.floor() as usize;
                    let hi = pos.ceil() as usize;
                    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
                })
                .collect()
        }
    };
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Pairwise benefit of joint training against the gradient matrix of a
/// model trained on all tasks.
pub fn run_benefit(cfg: &RunConfig) -> Result<ExperimentReport> {
    let k = cfg.panel().n_tasks;
    if k < 3 {
        return Err(ExperimentError::Config(format!("benefit needs at least 3 tasks, got {k}")));
    }
    let splits = make_splits(cfg)?;
    let gs = train_gradients(cfg, &splits)?;
    let mut subsets = BTreeSet::new();
    for idx in 0..splits.len() {
        for i in 0..k {
            subsets.insert((idx, vec![i]));
            for j in i + 1..k {
                subsets.insert((idx, vec![i, j]));
            }
        }
    }
    let scores = score_subsets(cfg, &splits, &subsets)?;

    let mut report = ExperimentReport::new("benefit", serde_json::to_value(cfg).expect("config serializes"), cfg.seeds().to_vec());
    let mut records = Vec::new();
    for (idx, ((seed, split), g)) in splits.iter().zip(&gs).enumerate() {
        for i in 0..k {
            for j in i + 1..k {
                let single_i = scores[&(idx, vec![i])][0];
                let single_j = scores[&(idx, vec![j])][0];
                let pair = &scores[&(idx, vec![i, j])];
                let benefit = 0.5 * (pair[0] + pair[1]) - 0.5 * (single_i + single_j);
                let g_ij = g.get(i, j).unwrap_or(f64::NAN);
                report.push_row(row!(
                    "seed" => *seed,
                    "task_i" => i,
                    "task_j" => j,
                    "g_ij" => num(g_ij),
                    "benefit" => num(benefit),
                    "r2_pair_i" => num(pair[0]),
                    "r2_pair_j" => num(pair[1]),
                    "r2_single_i" => num(single_i),
                    "r2_single_j" => num(single_j),
                    "truth_similarity" => num(split.truth.similarity.value(i, j)),
                ));
                records.push(BenefitRecord { seed: *seed, task_i: i, task_j: j, g_ij, benefit });
            }
        }
    }

    let valid: Vec<&BenefitRecord> = records.iter().filter(|r| r.g_ij.is_finite() && r.benefit.is_finite()).collect();
    // Segment lengths of consecutive records sharing a seed.
    let mut blocks: Vec<usize> = Vec::new();
    let mut last = None;
    for r in &valid {
        if last == Some(r.seed) {
            *blocks.last_mut().expect("segment started") += 1;
        } else {
            blocks.push(1);
            last = Some(r.seed);
        }
    }
    let gx: Vec<f64> = valid.iter().map(|r| r.g_ij).collect();
    let by: Vec<f64> = valid.iter().map(|r| r.benefit).collect();
    let corr = correlation_test(
        &gx,
        &by,
        &blocks,
        cfg.n_permutations,
        derive_seed(cfg.permutation_seed, Stream::Permutation, 0),
    )?;
    report.derive(
        "g_vs_benefit",
        json!({"r": num(corr.pearson_r), "rho": num(corr.spearman_rho), "p": num(corr.p_value), "n_pairs": corr.n_pairs}),
    );
    report.derive("mean_benefit", num(mean(&by)));
    report.derive("fraction_negative", num(by.iter().filter(|&&b| b < 0.0).count() as f64 / by.len() as f64));

    let owned: Vec<BenefitRecord> = valid.into_iter().cloned().collect();
    let sweep: Vec<Value> = thresholds(&cfg.thresholds, &gx)
        .into_iter()
        .map(|t| {
            let (avoided, retained, f1) = sweep_point(&owned, t);
            json!({"threshold": num(t), "negative_avoided": num(avoided), "benefit_retained": num(retained), "f1": num(f1)})
        })
        .collect();
    report.derive("threshold_sweep", Value::Array(sweep));
    Ok(report)
}

/// Mean test R² over all tasks when each group of `partition` is trained
/// as one model.
fn partition_score(scores: &SubsetScores, idx: usize, partition: &Partition) -> f64 {
    // Summed in task order so equal per-task scores give bit-equal totals.
    let mut per_task = vec![0.0; partition.len()];
    for group in partition.groups() {
        for (&task, &r2) in group.iter().zip(&scores[&(idx, group.clone())]) {
            per_task[task] = r2;
        }
    }
    per_task.iter().sum::<f64>() / partition.len() as f64
}

/// Groupings from clustering G against random partitions of the same size.
pub fn run_grouping(cfg: &RunConfig) -> Result<ExperimentReport> {
    let k = cfg.panel().n_tasks;
    if let Some(&n) = cfg.n_groups.iter().find(|&&n| n > k) {
        return Err(ExperimentError::Config(format!("n_groups {n} exceeds the {k} tasks")));
    }
    if cfg.n_random_partitions == 0 {
        return Err(ExperimentError::Config("n_random_partitions must be at least 1".into()));
    }
    let splits = make_splits(cfg)?;
    let gs = train_gradients(cfg, &splits)?;

    // (seed index, n_groups) -> (gradient partition, random partitions)
    let mut plans = Vec::new();
    let mut subsets = BTreeSet::new();
    for (idx, ((seed, _), g)) in splits.iter().zip(&gs).enumerate() {
        for &n in &cfg.n_groups {
            let grouping = group_tasks(g, n).map_err(|e| ExperimentError::from(e).at_seed(*seed))?;
            let randoms = (0..cfg.n_random_partitions)
                .map(|t| random_partition(k, n, derive_seed(*seed, Stream::Partition, ((n as u64) << 32) | t as u64)))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            for p in std::iter::once(&grouping.partition).chain(&randoms) {
                for group in p.groups() {
                    subsets.insert((idx, group));
                }
            }
            plans.push((idx, n, grouping, randoms));
        }
    }
    let scores = score_subsets(cfg, &splits, &subsets)?;

    let mut report = ExperimentReport::new("group", serde_json::to_value(cfg).expect("config serializes"), cfg.seeds().to_vec());
    for (idx, n, grouping, randoms) in &plans {
        let seed = splits[*idx].0;
        let grad = partition_score(&scores, *idx, &grouping.partition);
        for (trial, p) in randoms.iter().enumerate() {
            let rand = partition_score(&scores, *idx, p);
            report.push_row(row!(
                "seed" => seed,
                "n_groups" => *n,
                "trial" => trial,
                "gradient_r2" => num(grad),
                "random_r2" => num(rand),
                "improvement" => num(grad - rand),
                "gradient_wins" => grad >= rand,
                "gradient_partition" => json!(grouping.partition.labels()),
                "random_partition" => json!(p.labels()),
                "imputed_pairs" => grouping.imputed_pairs,
            ));
        }
    }

    let mut summary = serde_json::Map::new();
    for &n in &cfg.n_groups {
        let rows: Vec<_> = report.rows.iter().filter(|r| r["n_groups"] == json!(n)).collect();
        let f = |key: &str| -> Vec<f64> { rows.iter().map(|r| r[key].as_f64().unwrap_or(f64::NAN)).collect() };
        let wins = rows.iter().filter(|r| r["gradient_wins"] == json!(true)).count();
        let grad = f("gradient_r2");
        let rand = f("random_r2");
        summary.insert(
            n.to_string(),
            json!({
                "trials": rows.len(),
                "gradient_wins": wins,
                "win_fraction": num(wins as f64 / rows.len() as f64),
                "mean_gradient_r2": num(mean(&grad)),
                "mean_random_r2": num(mean(&rand)),
                "mean_improvement": num(mean(&f("improvement"))),
                "relative_improvement": num((mean(&grad) - mean(&rand)) / mean(&rand).abs()),
            }),
        );
    }
    report.derive("by_n_groups", Value::Object(summary));
    Ok(report)
}
