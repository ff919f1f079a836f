//! End-to-end experiments on synthetic panels.
//!
//! Every experiment is a pure function of its [`RunConfig`]: all randomness
//! is derived from the configured seeds, independent cells run in parallel
//! and are collected in a fixed order, and the report echoes the fully
//! resolved configuration.

mod overlap;
mod report;
mod structure;
mod utility;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterError;
use crate::conflict::{ConflictAccumulator, ConflictError};
use crate::matrix::PairwiseMatrix;
use crate::nnet::{train, Architecture, Network, NnetError, TrainConfig};
use crate::paneldata::{PanelError, PanelSpec, TaskPanel, WeightScheme};
use crate::stats::StatsError;

pub use overlap::{run_phase_transition, run_prop1_null, run_synthetic_validation, run_variance_decomposition};
pub use report::{ExperimentReport, ReportError};
pub use structure::{audit_panel, run_audit, run_cross_domain, run_dynamics, Regime};
pub use utility::{run_benefit, run_grouping, BenefitRecord};

/// The experiments that can be run by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Validate,
    Phase,
    Prop1,
    Vardecomp,
    Crossdomain,
    Dynamics,
    Benefit,
    Group,
    Audit,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::Validate,
        Experiment::Phase,
        Experiment::Prop1,
        Experiment::Vardecomp,
        Experiment::Crossdomain,
        Experiment::Dynamics,
        Experiment::Benefit,
        Experiment::Group,
        Experiment::Audit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Validate => "validate",
            Experiment::Phase => "phase",
            Experiment::Prop1 => "prop1",
            Experiment::Vardecomp => "vardecomp",
            Experiment::Crossdomain => "crossdomain",
            Experiment::Dynamics => "dynamics",
            Experiment::Benefit => "benefit",
            Experiment::Group => "group",
            Experiment::Audit => "audit",
        }
    }

    fn default_seeds(self) -> Vec<u64> {
        match self {
            Experiment::Prop1 => (0..50).collect(),
            Experiment::Crossdomain => (0..10).collect(),
            Experiment::Benefit | Experiment::Group => (0..3).collect(),
            Experiment::Audit => vec![0],
            _ => (0..5).collect(),
        }
    }

    fn default_panel(self) -> PanelSpec {
        match self {
            Experiment::Crossdomain | Experiment::Group => PanelSpec {
                weight_scheme: WeightScheme::TwoBlock,
                ..PanelSpec::default()
            },
            _ => PanelSpec::default(),
        }
    }

    fn default_training(self) -> TrainConfig {
        match self {
            // Pair, single-task and group models share the shorter budget
            // used for transfer comparisons.
            Experiment::Benefit | Experiment::Group => TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            _ => TrainConfig::default(),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Experiment::ALL.iter().map(|e| e.name()).collect();
                format!("unknown experiment {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// Overlap levels separating the unreliable, transitional and reliable
/// regimes in an audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeThresholds {
    pub unreliable_below: f64,
    pub reliable_from: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            unreliable_below: 0.3,
            reliable_from: 0.4,
        }
    }
}

/// Threshold grid for the benefit sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdSweep {
    /// Evenly spaced quantiles of the observed G entries, from the minimum
    /// to the maximum.
    Quantiles(usize),
    Values(Vec<f64>),
}

impl Default for ThresholdSweep {
    fn default() -> Self {
        ThresholdSweep::Quantiles(11)
    }
}

fn default_hidden() -> Vec<usize> {
    vec![32, 16]
}
fn default_permutations() -> usize {
    crate::stats::DEFAULT_PERMUTATIONS
}
fn default_min_shared() -> usize {
    crate::stats::DEFAULT_MIN_SHARED
}
fn default_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}
fn default_checkpoints() -> Vec<usize> {
    vec![1, 5, 10, 20, 50, 100]
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_n_groups() -> Vec<usize> {
    vec![2, 3, 4]
}
fn default_random_partitions() -> usize {
    10
}

/// Complete description of one experiment run.
///
/// Fields left out of the JSON take defaults; `panel`, `training` and
/// `seeds` default per experiment and are filled in by [`RunConfig::resolve`]
/// so the echoed configuration is self-contained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub panel: Option<PanelSpec>,
    /// Measured panel to audit instead of a generated one.
    #[serde(default)]
    pub panel_csv: Option<PathBuf>,
    #[serde(default)]
    pub training: Option<TrainConfig>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_permutations")]
    pub n_permutations: usize,
    #[serde(default)]
    pub permutation_seed: u64,
    #[serde(default = "default_min_shared")]
    pub min_shared: usize,
    #[serde(default = "default_grid")]
    pub overlap_grid: Vec<f64>,
    /// Overlap used by `prop1` and by `audit` on a generated panel.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_checkpoints")]
    pub checkpoint_epochs: Vec<usize>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub thresholds: ThresholdSweep,
    #[serde(default = "default_n_groups")]
    pub n_groups: Vec<usize>,
    #[serde(default = "default_random_partitions")]
    pub n_random_partitions: usize,
    #[serde(default)]
    pub regimes: RegimeThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    /// Parses a JSON configuration, rejecting unknown keys.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn for_experiment(experiment: Experiment) -> Self {
        Self {
            experiment: Some(experiment),
            ..Self::default()
        }
    }

    /// Fills every per-experiment default and validates the result.
    pub fn resolve(mut self, experiment: Experiment) -> Result<Self, ExperimentError> {
        if let Some(e) = self.experiment {
            if e != experiment {
                return Err(ExperimentError::Config(format!(
                    "configuration is for experiment {e}, not {experiment}"
                )));
            }
        }
        self.experiment = Some(experiment);
        self.panel.get_or_insert_with(|| experiment.default_panel());
        self.training.get_or_insert_with(|| experiment.default_training());
        self.seeds.get_or_insert_with(|| experiment.default_seeds());
        self.alpha
            .get_or_insert(if experiment == Experiment::Audit { 1.0 } else { 0.0 });
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.training().validate()?;
        if self.seeds().is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if let Some(a) = self.overlap_grid.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("overlap_grid value {a} is outside [0, 1]"));
        }
        let alpha = self.alpha.unwrap_or(0.0);
        if !(0.0..=1.0).contains(&alpha) {
            return bad(format!("alpha {alpha} is outside [0, 1]"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} must lie in (0, 1)", self.test_fraction));
        }
        if self.n_groups.contains(&0) {
            return bad("n_groups entries must be at least 1".into());
        }
        if self.regimes.unreliable_below > self.regimes.reliable_from {
            return bad("regimes.unreliable_below must not exceed regimes.reliable_from".into());
        }
        if let ThresholdSweep::Quantiles(q) = self.thresholds {
            if q < 2 {
                return bad("thresholds.quantiles must be at least 2".into());
            }
        }
        Ok(())
    }

    pub fn experiment(&self) -> Experiment {
        self.experiment.expect("resolved configuration")
    }

    pub fn panel(&self) -> &PanelSpec {
        self.panel.as_ref().expect("resolved configuration")
    }

    pub fn training(&self) -> &TrainConfig {
        self.training.as_ref().expect("resolved configuration")
    }

    pub fn seeds(&self) -> &[u64] {
        self.seeds.as_deref().expect("resolved configuration")
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.expect("resolved configuration")
    }

    /// Replaces the seed list with `n` consecutive seeds starting at `base`
    /// (`n` is the current seed count).
    pub fn with_seed_base(mut self, base: u64) -> Self {
        let n = self.seeds.as_ref().map_or(1, Vec::len) as u64;
        self.seeds = Some((base..base + n).collect());
        self
    }

    fn architecture(&self, input_dim: usize, n_tasks: usize) -> Architecture {
        Architecture {
            hidden: self.hidden.clone(),
            ..Architecture::standard(input_dim, n_tasks)
        }
    }
}

/// Coarse classification of failures, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Network(#[from] NnetError),
    #[error(transparent)]
    Conflict(#[from] ConflictError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<ExperimentError>,
    },
}

impl ExperimentError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ExperimentError::Config(_) => ErrorKind::Config,
            ExperimentError::Seed { source, .. } => source.kind(),
            ExperimentError::Panel(PanelError::Config(_) | PanelError::OverlapTarget { .. }) => ErrorKind::Config,
            ExperimentError::Panel(_) => ErrorKind::Data,
            ExperimentError::Network(NnetError::Config(_) | NnetError::TrainConfig(_)) => ErrorKind::Config,
            ExperimentError::Network(NnetError::Diverged { .. }) => ErrorKind::Numerical,
            ExperimentError::Network(_) => ErrorKind::Data,
            ExperimentError::Stats(StatsError::FitFailure { .. } | StatsError::DegenerateFit) => {
                ErrorKind::Numerical
            }
            ExperimentError::Stats(_) | ExperimentError::Cluster(_) => ErrorKind::Data,
            ExperimentError::Conflict(_) => ErrorKind::Numerical,
        }
    }

    fn at_seed(self, seed: u64) -> Self {
        match self {
            e @ ExperimentError::Seed { .. } => e,
            e => ExperimentError::Seed {
                seed,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Runs the configured experiment.
pub fn run(cfg: &RunConfig) -> Result<ExperimentReport> {
    let experiment = cfg.experiment.ok_or_else(|| ExperimentError::Config("no experiment selected".into()))?;
    let cfg = cfg.clone().resolve(experiment)?;
    match experiment {
        Experiment::Validate => run_synthetic_validation(&cfg),
        Experiment::Phase => run_phase_transition(&cfg),
        Experiment::Prop1 => run_prop1_null(&cfg),
        Experiment::Vardecomp => run_variance_decomposition(&cfg),
        Experiment::Crossdomain => run_cross_domain(&cfg),
        Experiment::Dynamics => run_dynamics(&cfg),
        Experiment::Benefit => run_benefit(&cfg),
        Experiment::Group => run_grouping(&cfg),
        Experiment::Audit => run_audit(&cfg),
    }
}

/// Stream tags separating the random draws of one seed.
#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Overlap = 1,
    Init = 2,
    Shuffle = 3,
    Split = 4,
    Permutation = 5,
    Partition = 6,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic child seed for `(seed, stream, index)`.
fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}

/// Seed of a model trained on a specific task subset, so that identical
/// subsets always train identically within a seed.
fn subset_seed(seed: u64, tasks: &[usize]) -> u64 {
    tasks
        .iter()
        .fold(derive_seed(seed, Stream::Init, tasks.len() as u64), |acc, &t| {
            splitmix64(acc ^ (t as u64 + 1))
        })
}

/// Trains a fresh network on `panel` and returns it with its conflict log.
fn train_logged(cfg: &RunConfig, panel: &TaskPanel, model_seed: u64) -> Result<(Network, ConflictAccumulator)> {
    let arch = cfg.architecture(panel.n_features(), panel.n_tasks());
    let net = Network::new(&arch, model_seed)?;
    let tc = TrainConfig {
        seed: splitmix64(model_seed ^ cfg.training().seed ^ Stream::Shuffle as u64),
        ..cfg.training().clone()
    };
    let mut acc = ConflictAccumulator::new(tc.averaging_window_fraction);
    let net = train(net, panel, &tc, &mut acc)?;
    Ok((net, acc))
}

/// Trains and returns the finalized gradient matrix.
fn gradient_matrix(cfg: &RunConfig, panel: &TaskPanel, model_seed: u64) -> Result<PairwiseMatrix> {
    let (_, acc) = train_logged(cfg, panel, model_seed)?;
    Ok(acc.finalize()?)
}

/// Trains without logging gradients.
fn train_plain(cfg: &RunConfig, panel: &TaskPanel, model_seed: u64) -> Result<Network> {
    let arch = cfg.architecture(panel.n_features(), panel.n_tasks());
    let net = Network::new(&arch, model_seed)?;
    let tc = TrainConfig {
        seed: splitmix64(model_seed ^ cfg.training().seed ^ Stream::Shuffle as u64),
        ..cfg.training().clone()
    };
    Ok(train(net, panel, &tc, &mut crate::conflict::NullSink)?)
}

/// Coefficient of determination of each task on the given (fully
/// measured) samples.
fn test_r2(net: &Network, panel: &TaskPanel, samples: &[usize]) -> Result<Vec<f64>> {
    let pass = net.forward(panel, samples)?;
    let preds = pass.predictions();
    let k = panel.n_tasks();
    (0..k)
        .map(|t| {
            let pairs: Vec<(f64, f64)> = samples
                .iter()
                .enumerate()
                .filter_map(|(b, &s)| panel.label(s, t).map(|y| (y, preds[b * k + t])))
                .collect();
            if pairs.is_empty() {
                return Err(NnetError::NoValidSamples { task: t }.into());
            }
            let mean = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
            let ss_tot: f64 = pairs.iter().map(|p| (p.0 - mean).powi(2)).sum();
            let ss_res: f64 = pairs.iter().map(|p| (p.0 - p.1).powi(2)).sum();
            Ok(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 })
        })
        .collect()
}

/// Runs `f` over `items` in parallel, keeping input order in the output and
/// attaching the seed to any error.
fn par_cells<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}
