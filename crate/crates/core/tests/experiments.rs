use serde_json::{json, Value};
use taskaffinity::conflict::ConflictAccumulator;
use taskaffinity::experiments::{run, Experiment, ExperimentReport, RunConfig};
use taskaffinity::nnet::{train, Architecture, Network, TrainConfig};
use taskaffinity::paneldata::{generate_panel, PanelSpec, WeightScheme};

fn small(experiment: Experiment, extra: Value) -> RunConfig {
    let mut base = json!({
        "experiment": experiment,
        "panel": {"n_samples": 300, "n_tasks": 4},
        "training": {"epochs": 6},
        "n_permutations": 199,
        "seeds": [0, 1, 2],
    });
    for (k, v) in extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    RunConfig::from_json(&base.to_string()).unwrap()
}

fn rows_where<'a>(report: &'a ExperimentReport, key: &str, value: Value) -> Vec<&'a serde_json::Map<String, Value>> {
    report.rows.iter().filter(|r| r[key] == value).collect()
}

#[test]
fn duplicated_task_has_the_largest_gradient_similarity() {
    let l = 6;
    let mut rows: Vec<Vec<f64>> = vec![
        vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, -0.5, 0.0],
        vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.5],
        vec![0.3, -0.2, 0.1, 0.9, 0.4, -0.3],
    ];
    rows.push(rows[1].clone());
    let spec = PanelSpec {
        n_samples: 600,
        n_latent: l,
        n_tasks: rows.len(),
        weight_scheme: WeightScheme::Custom(rows),
        noise_sd: 0.0,
        n_distractors: 0,
    };
    let (panel, _) = generate_panel(&spec, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let net = Network::new(&Architecture::standard(panel.n_features(), panel.n_tasks()), 3).unwrap();
    let mut acc = ConflictAccumulator::new(cfg.averaging_window_fraction);
    train(net, &panel, &cfg, &mut acc).unwrap();
    let g = acc.finalize().unwrap();
    let (bi, bj, best) = g
        .upper_triangle()
        .max_by(|a, b| a.2.total_cmp(&b.2))
        .unwrap();
    assert_eq!((bi, bj), (1, 4), "max entry {best} at ({bi},{bj})");
}

#[test]
fn two_tasks_leave_too_few_pairs_to_correlate() {
    let cfg = small(Experiment::Validate, json!({"panel": {"n_samples": 300, "n_tasks": 2}}));
    let err = run(&cfg).unwrap_err();
    assert!(err.to_string().contains("insufficient data"), "{err}");
}

#[test]
fn single_level_phase_equals_validation() {
    let phase = run(&small(Experiment::Phase, json!({"overlap_grid": [1.0]}))).unwrap();
    let validate = run(&small(Experiment::Validate, json!({}))).unwrap();
    assert_eq!(phase.column("r"), validate.column("r_g_emp"));
    assert_eq!(phase.column("n_pairs"), validate.column("n_pairs_g_emp"));
}

#[test]
fn variance_decomposition_identity_and_disjoint_ends() {
    let report = run(&small(Experiment::Vardecomp, json!({"overlap_grid": [0.0, 1.0]}))).unwrap();
    for row in rows_where(&report, "alpha", json!(1.0)) {
        assert!((row["r_e_ref"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert!((row["r_g_ref"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    for row in rows_where(&report, "alpha", json!(0.0)) {
        assert_eq!(row["r_e_ref"], Value::Null);
        assert_eq!(row["valid_pairs_e"], json!(0));
    }
}

#[test]
fn dynamics_table_is_symmetric_with_unit_diagonal() {
    let report = run(&small(Experiment::Dynamics, json!({"checkpoint_epochs": [1, 3, 6]}))).unwrap();
    let table = report.derived["mean_correlation"].as_array().unwrap();
    let m = table.len();
    assert_eq!(m, 4);
    for a in 0..m {
        assert_eq!(table[a][a], json!(1.0));
        for b in 0..m {
            let v = table[a][b].as_f64().unwrap();
            assert!((-1.0..=1.0).contains(&v));
            assert!((v - table[b][a].as_f64().unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn dynamics_rejects_checkpoints_past_the_last_epoch() {
    assert!(run(&small(Experiment::Dynamics, json!({"checkpoint_epochs": [7]}))).is_err());
}

#[test]
fn benefit_sweep_starts_by_keeping_every_beneficial_pair() {
    let report = run(&small(
        Experiment::Benefit,
        json!({"seeds": [0], "panel": {"n_samples": 300, "n_tasks": 4}}),
    ))
    .unwrap();
    let sweep = report.derived["threshold_sweep"].as_array().unwrap();
    let min_g = report.column("g_ij").into_iter().fold(f64::INFINITY, f64::min);
    assert_eq!(sweep[0]["threshold"].as_f64().unwrap(), min_g);
    assert_eq!(sweep[0]["benefit_retained"], json!(1.0));
    let retained: Vec<f64> = sweep.iter().filter_map(|p| p["benefit_retained"].as_f64()).collect();
    assert!(retained.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(report.rows.len(), 6);
}

#[test]
fn grouping_extremes_match_random_partitions() {
    let report = run(&small(
        Experiment::Group,
        json!({"seeds": [0], "n_groups": [1, 4], "n_random_partitions": 3}),
    ))
    .unwrap();
    assert_eq!(report.rows.len(), 6);
    for row in &report.rows {
        assert_eq!(row["improvement"], json!(0.0), "{row:?}");
    }
}

#[test]
fn grouping_rejects_more_groups_than_tasks() {
    assert!(run(&small(Experiment::Group, json!({"n_groups": [5]}))).is_err());
}

#[test]
fn reports_are_pure_functions_of_the_config() {
    for experiment in [Experiment::Validate, Experiment::Crossdomain] {
        let cfg = small(experiment, json!({"seeds": [4, 5]}));
        let a = run(&cfg).unwrap().to_json().unwrap();
        let b = run(&cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn summaries_recompute_from_rows() {
    let report = run(&small(Experiment::Prop1, json!({"seeds": [0, 1, 2, 3, 4, 5]}))).unwrap();
    let r = report.column("r_g_truth");
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    assert!((report.derived_f64("mean_r").unwrap() - mean).abs() < 1e-12);
    let below = report.column("p_g_truth").iter().filter(|&&p| p < 0.05).count() as f64 / r.len() as f64;
    assert_eq!(report.derived_f64("fraction_p_below_0_05").unwrap(), below);
}
