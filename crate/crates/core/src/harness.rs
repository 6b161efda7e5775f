//! Experiment driver: grid search over solver hyperparameters on a benchmark CMDP, selection of
//! the best qualifying configuration, and CSV/SVG output.
//!
//! Every algorithm here is deterministic. The experiment seed only perturbs the tile-coder hash,
//! so results depend on the configuration alone and parallel execution never changes them.

pub mod baseline;
pub mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::al::{self, AlError, AlmConfig, AlmTrace, BudgetMode};
use crate::cmdp::{CmdpError, PolicyEvaluator, TabularCmdp, TabularPolicy};
use crate::envs::{EnvId, GridGeometry};
use crate::lp::{self, LpError};
use crate::ppqa::{self, FeatureMap, PpqaConfig, PpqaError, PpqaOracle, TileCoderConfig, DEFAULT_HASH_SEED};
use crate::pqa::{PqaConfig, PqaOracle};

pub use baseline::{npg_pd_baseline, BaselineRow};
pub use plot::{LinePlot, Series};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Al(#[from] AlError),
    #[error(transparent)]
    Ppqa(#[from] PpqaError),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    PqaAlm,
    PpqaAlm,
    NpgPdBaseline,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PqaAlm => "pqa-alm",
            Algorithm::PpqaAlm => "ppqa-alm",
            Algorithm::NpgPdBaseline => "npg-pd-baseline",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Features for the log-linear track.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureSpec {
    OneHot,
    Tile {
        table_size: usize,
        num_tilings: usize,
        tile_size: usize,
    },
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSpec::OneHot => f.write_str("one-hot"),
            FeatureSpec::Tile {
                table_size,
                num_tilings,
                tile_size,
            } => write!(f, "tile({table_size};{num_tilings};{tile_size})"),
        }
    }
}

/// Hyperparameter lists. Each algorithm takes the product of the lists it uses: ALM runs use
/// `outer_iters × inner_iters × beta × sigma × primal_step` (and the PPQA lists), the baseline
/// uses `outer_iters × inner_iters × primal_step × dual_step` and runs `T·K` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default = "default_outer")]
    pub outer_iters: Vec<usize>,
    #[serde(default = "default_inner")]
    pub inner_iters: Vec<u64>,
    #[serde(default = "default_beta")]
    pub beta: Vec<f64>,
    #[serde(default = "default_unit")]
    pub sigma: Vec<f64>,
    #[serde(default = "default_primal")]
    pub primal_step: Vec<f64>,
    #[serde(default = "default_dual")]
    pub dual_step: Vec<f64>,
    #[serde(default = "default_features")]
    pub features: Vec<FeatureSpec>,
    #[serde(default = "default_surrogate_steps")]
    pub surrogate_steps: Vec<usize>,
    #[serde(default = "default_unit")]
    pub surrogate_step: Vec<f64>,
}

fn default_outer() -> Vec<usize> {
    vec![10]
}
fn default_inner() -> Vec<u64> {
    vec![100]
}
fn default_beta() -> Vec<f64> {
    vec![10.0]
}
fn default_unit() -> Vec<f64> {
    vec![1.0]
}
fn default_primal() -> Vec<f64> {
    vec![0.1, 1.0, 10.0]
}
fn default_dual() -> Vec<f64> {
    vec![0.1, 1.0]
}
fn default_features() -> Vec<FeatureSpec> {
    vec![FeatureSpec::OneHot]
}
fn default_surrogate_steps() -> Vec<usize> {
    vec![100]
}
fn default_selection_tolerance() -> f64 {
    0.001
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            outer_iters: default_outer(),
            inner_iters: default_inner(),
            beta: default_beta(),
            sigma: default_unit(),
            primal_step: default_primal(),
            dual_step: default_dual(),
            features: default_features(),
            surrogate_steps: default_surrogate_steps(),
            surrogate_step: default_unit(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvId,
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub grid: Grid,
    /// A run qualifies when `max_i (b_i − V_ci) ≤ selection_tolerance` at its final policy.
    #[serde(default = "default_selection_tolerance")]
    pub selection_tolerance: f64,
    /// XORed into the tile-coder hash seed.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(environment: EnvId, algorithms: Vec<Algorithm>) -> Self {
        Self {
            environment,
            algorithms,
            grid: Grid::default(),
            selection_tolerance: default_selection_tolerance(),
            seed: 0,
        }
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let config: Self = parsed.map_err(|message| HarnessError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if self.algorithms.is_empty() {
            return fail("algorithms must not be empty");
        }
        if !(self.selection_tolerance > 0.0) {
            return fail("selection_tolerance must be positive");
        }
        let g = &self.grid;
        let uses = |alg: Algorithm| self.algorithms.contains(&alg);
        let alm = uses(Algorithm::PqaAlm) || uses(Algorithm::PpqaAlm);
        let checks: [(&str, bool, bool); 9] = [
            ("outer_iters", true, g.outer_iters.is_empty() || g.outer_iters.contains(&0)),
            ("inner_iters", true, g.inner_iters.is_empty()),
            ("beta", alm, !positive_list(&g.beta)),
            ("sigma", alm, !positive_list(&g.sigma)),
            ("primal_step", true, !positive_list(&g.primal_step)),
            ("dual_step", uses(Algorithm::NpgPdBaseline), !positive_list(&g.dual_step)),
            ("features", uses(Algorithm::PpqaAlm), g.features.is_empty()),
            ("surrogate_steps", uses(Algorithm::PpqaAlm), g.surrogate_steps.is_empty()),
            ("surrogate_step", uses(Algorithm::PpqaAlm), !positive_list(&g.surrogate_step)),
        ];
        for (name, used, bad) in checks {
            if used && bad {
                return Err(HarnessError::Config(format!(
                    "grid.{name} must be a non-empty list of positive values"
                )));
            }
        }
        Ok(())
    }

    /// Grid points in a fixed order: algorithms as listed, then nested lists in field order.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let g = &self.grid;
        let mut points = Vec::new();
        for &algorithm in &self.algorithms {
            for &outer_iters in &g.outer_iters {
                for &inner_iters in &g.inner_iters {
                    let base = GridPoint {
                        algorithm,
                        outer_iters,
                        inner_iters,
                        beta: None,
                        sigma: None,
                        primal_step: 0.0,
                        dual_step: None,
                        features: None,
                        surrogate_steps: None,
                        surrogate_step: None,
                    };
                    match algorithm {
                        Algorithm::NpgPdBaseline => {
                            for &primal_step in &g.primal_step {
                                for &dual in &g.dual_step {
                                    points.push(GridPoint {
                                        primal_step,
                                        dual_step: Some(dual),
                                        ..base
                                    });
                                }
                            }
                        }
                        Algorithm::PqaAlm | Algorithm::PpqaAlm => {
                            for &beta in &g.beta {
                                for &sigma in &g.sigma {
                                    for &primal_step in &g.primal_step {
                                        let alm = GridPoint {
                                            beta: Some(beta),
                                            sigma: Some(sigma),
                                            primal_step,
                                            ..base
                                        };
                                        if algorithm == Algorithm::PqaAlm {
                                            points.push(alm);
                                            continue;
                                        }
                                        for &features in &g.features {
                                            for &steps in &g.surrogate_steps {
                                                for &step in &g.surrogate_step {
                                                    points.push(GridPoint {
                                                        features: Some(features),
                                                        surrogate_steps: Some(steps),
                                                        surrogate_step: Some(step),
                                                        ..alm
                                                    });
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        points
    }
}

fn positive_list(v: &[f64]) -> bool {
    !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite())
}

/// One hyperparameter combination; fields an algorithm does not use are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub algorithm: Algorithm,
    pub outer_iters: usize,
    pub inner_iters: u64,
    pub beta: Option<f64>,
    pub sigma: Option<f64>,
    pub primal_step: f64,
    pub dual_step: Option<f64>,
    pub features: Option<FeatureSpec>,
    pub surrogate_steps: Option<usize>,
    pub surrogate_step: Option<f64>,
}

impl GridPoint {
    pub fn label(&self) -> String {
        let mut parts = vec![
            self.algorithm.to_string(),
            format!("T={}", self.outer_iters),
            format!("K={}", self.inner_iters),
        ];
        if let Some(b) = self.beta {
            parts.push(format!("beta={b}"));
        }
        parts.push(format!("eta={}", self.primal_step));
        if let Some(d) = self.dual_step {
            parts.push(format!("dual={d}"));
        }
        if let Some(f) = self.features {
            parts.push(f.to_string());
        }
        if let (Some(n), Some(z)) = (self.surrogate_steps, self.surrogate_step) {
            parts.push(format!("N={n}"));
            parts.push(format!("zeta={z}"));
        }
        parts.join(" ")
    }
}

/// Metrics after outer iteration `iter` (for the baseline: after `iter·K` steps).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    pub eps: f64,
    pub lambda: Vec<f64>,
    pub v_r: f64,
    pub v_c: Vec<f64>,
    /// AL value for ALM runs, plain Lagrangian for the baseline.
    pub objective: f64,
    pub inner_grads: u64,
    pub cum_grads: u64,
    /// `V* − V_r`; negative only for infeasible policies.
    pub gap: f64,
    /// `b_i − V_ci`; positive entries are violations.
    pub violation: Vec<f64>,
}

impl MetricRow {
    pub fn max_violation(&self) -> f64 {
        self.violation.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub index: usize,
    pub point: GridPoint,
    pub rows: Vec<MetricRow>,
    pub final_policy: TabularPolicy,
    pub final_v_r: f64,
    pub final_v_c: Vec<f64>,
    pub gap: f64,
    pub max_violation: f64,
    /// PPQA surrogate minimizations whose loss ended above where it started.
    pub diverged_updates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SelectionOutcome {
    Selected { index: usize, gap: f64, max_violation: f64 },
    NoQualifying { best_violation: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub algorithm: Algorithm,
    pub outcome: SelectionOutcome,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub v_star: f64,
    pub lambda_star: Vec<f64>,
    pub records: Vec<RunRecord>,
    pub selections: Vec<Selection>,
}

impl ExperimentResult {
    pub fn all_qualify(&self) -> bool {
        self.selections
            .iter()
            .all(|s| matches!(s.outcome, SelectionOutcome::Selected { .. }))
    }

    pub fn report(&self) -> String {
        let mut out = format!(
            "environment {}: V* = {}, lambda* = {:?}, selection tolerance {}\n",
            self.config.environment, self.v_star, self.lambda_star, self.config.selection_tolerance
        );
        for s in &self.selections {
            match s.outcome {
                SelectionOutcome::Selected {
                    index,
                    gap,
                    max_violation,
                } => out.push_str(&format!(
                    "{}: selected run {index} ({}), gap {gap:.6e}, max violation {max_violation:.6e}\n",
                    s.algorithm,
                    self.records[index].point.label()
                )),
                SelectionOutcome::NoQualifying { best_violation } => out.push_str(&format!(
                    "{}: no qualifying configuration (best max violation {best_violation:.6e})\n",
                    s.algorithm
                )),
            }
        }
        out
    }

    /// The selected run of each algorithm, or its least-violating run when none qualifies.
    pub fn representatives(&self) -> Vec<&RunRecord> {
        self.selections
            .iter()
            .filter_map(|s| match s.outcome {
                SelectionOutcome::Selected { index, .. } => Some(&self.records[index]),
                SelectionOutcome::NoQualifying { .. } => self
                    .records
                    .iter()
                    .filter(|r| r.point.algorithm == s.algorithm)
                    .min_by(|a, b| a.max_violation.total_cmp(&b.max_violation)),
            })
            .collect()
    }
}

/// Minimum final gap among runs with `max violation ≤ tolerance`; ties go to the earlier run.
pub fn select(records: &[RunRecord], algorithm: Algorithm, tolerance: f64) -> SelectionOutcome {
    let runs = records.iter().filter(|r| r.point.algorithm == algorithm);
    let best = runs
        .clone()
        .filter(|r| r.max_violation <= tolerance)
        .min_by(|a, b| a.gap.total_cmp(&b.gap).then(a.index.cmp(&b.index)));
    match best {
        Some(r) => SelectionOutcome::Selected {
            index: r.index,
            gap: r.gap,
            max_violation: r.max_violation,
        },
        None => SelectionOutcome::NoQualifying {
            best_violation: runs.map(|r| r.max_violation).fold(f64::INFINITY, f64::min),
        },
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let (cmdp, geometry) = config.environment.build();
    let optimum = lp::solve_occupancy_lp(&cmdp)?;
    let points = config.grid_points();
    let records = points
        .par_iter()
        .enumerate()
        .map(|(index, point)| run_point(&cmdp, &geometry, index, point, optimum.v_star, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut algorithms = config.algorithms.clone();
    algorithms.dedup();
    let selections = algorithms
        .iter()
        .map(|&algorithm| Selection {
            algorithm,
            outcome: select(&records, algorithm, config.selection_tolerance),
        })
        .collect();
    Ok(ExperimentResult {
        config: config.clone(),
        v_star: optimum.v_star,
        lambda_star: optimum.lambda_star,
        records,
        selections,
    })
}

pub fn build_features(spec: FeatureSpec, geometry: &GridGeometry, n_actions: usize, seed: u64) -> Result<FeatureMap> {
    Ok(match spec {
        FeatureSpec::OneHot => FeatureMap::one_hot(geometry.n_states(), n_actions),
        FeatureSpec::Tile {
            table_size,
            num_tilings,
            tile_size,
        } => ppqa::tile_code(
            &TileCoderConfig {
                table_size,
                num_tilings,
                tile_size,
                seed: DEFAULT_HASH_SEED ^ seed,
            },
            geometry,
            n_actions,
        )?,
    })
}

fn metric_rows_from_alm(cmdp: &TabularCmdp, trace: &AlmTrace, v_star: f64) -> Vec<MetricRow> {
    let thresholds = cmdp.thresholds();
    trace
        .rows
        .iter()
        .map(|r| MetricRow {
            iter: r.iter,
            eps: r.eps,
            lambda: r.lambda.clone(),
            v_r: r.v_r,
            v_c: r.v_c.clone(),
            objective: r.al_value,
            inner_grads: r.inner_grads,
            cum_grads: r.cum_grads,
            gap: v_star - r.v_r,
            violation: thresholds.iter().zip(&r.v_c).map(|(b, v)| b - v).collect(),
        })
        .collect()
}

fn run_point(
    cmdp: &TabularCmdp,
    geometry: &GridGeometry,
    index: usize,
    point: &GridPoint,
    v_star: f64,
    seed: u64,
) -> Result<RunRecord> {
    let thresholds = cmdp.thresholds();
    let alm_config = || AlmConfig {
        outer_iters: point.outer_iters,
        beta: point.beta.unwrap_or(1.0),
        sigma: point.sigma.unwrap_or(1.0),
        budget: BudgetMode::Fixed(point.inner_iters),
        warm_start: true,
    };
    let mut diverged_updates = 0;
    let (policy, rows) = match point.algorithm {
        Algorithm::PqaAlm => {
            let mut oracle = PqaOracle {
                config: PqaConfig::fixed(point.primal_step, point.inner_iters),
            };
            let (policy, trace) = al::run_alm(cmdp, &mut oracle, &alm_config())?;
            (policy, metric_rows_from_alm(cmdp, &trace, v_star))
        }
        Algorithm::PpqaAlm => {
            let spec = point
                .features
                .ok_or_else(|| HarnessError::Config("ppqa-alm point without features".into()))?;
            let features = Arc::new(build_features(spec, geometry, cmdp.n_actions(), seed)?);
            let mut oracle = PpqaOracle::new(
                features,
                PpqaConfig {
                    eta: point.primal_step,
                    surrogate_steps: point.surrogate_steps.unwrap_or(0),
                    surrogate_step: point.surrogate_step.unwrap_or(1.0),
                },
            );
            let (policy, trace) = al::run_alm(cmdp, &mut oracle, &alm_config())?;
            diverged_updates = oracle.diverged_updates();
            (policy, metric_rows_from_alm(cmdp, &trace, v_star))
        }
        Algorithm::NpgPdBaseline => {
            let k = point.inner_iters.max(1) as usize;
            let dual_step = point
                .dual_step
                .ok_or_else(|| HarnessError::Config("baseline point without dual step".into()))?;
            let (policy, steps) = npg_pd_baseline(cmdp, point.outer_iters * k, point.primal_step, dual_step)?;
            let rows = steps
                .chunks(k)
                .enumerate()
                .map(|(t, block)| {
                    let last = &block[block.len() - 1];
                    MetricRow {
                        iter: t + 1,
                        eps: 0.0,
                        lambda: last.lambda.clone(),
                        v_r: last.v_r,
                        v_c: last.v_c.clone(),
                        objective: last.lagrangian,
                        inner_grads: block.len() as u64,
                        cum_grads: last.iter as u64,
                        gap: v_star - last.v_r,
                        violation: thresholds.iter().zip(&last.v_c).map(|(b, v)| b - v).collect(),
                    }
                })
                .collect();
            (policy, rows)
        }
    };
    let eval = PolicyEvaluator::new(cmdp, &policy)?;
    let final_v_r = eval.scalar_value(cmdp.reward())?;
    let final_v_c = cmdp
        .constraints()
        .iter()
        .map(|c| eval.scalar_value(&c.values))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let max_violation = thresholds
        .iter()
        .zip(&final_v_c)
        .map(|(b, v)| b - v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RunRecord {
        index,
        point: *point,
        rows,
        final_policy: policy,
        gap: v_star - final_v_r,
        final_v_r,
        final_v_c,
        max_violation,
        diverged_updates,
    })
}

fn run_csv_header(m: usize) -> Vec<String> {
    let mut header = vec!["iter".to_string(), "eps_t".to_string()];
    header.extend((0..m).map(|i| format!("lambda_{i}")));
    header.push("v_r".into());
    header.extend((0..m).map(|i| format!("v_c_{i}")));
    header.extend(["al_value", "inner_grads", "cum_grads", "gap"].map(String::from));
    header.extend((0..m).map(|i| format!("violation_{i}")));
    header
}

/// Per-run CSV: the ALM trace columns followed by `gap` and `violation_*`. Floats are written in
/// shortest round-trip form.
pub fn run_csv_string(record: &RunRecord) -> String {
    let m = record.final_v_c.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(run_csv_header(m)).expect("in-memory write");
    for r in &record.rows {
        let mut rec = vec![r.iter.to_string(), r.eps.to_string()];
        rec.extend(r.lambda.iter().map(f64::to_string));
        rec.push(r.v_r.to_string());
        rec.extend(r.v_c.iter().map(f64::to_string));
        rec.extend([
            r.objective.to_string(),
            r.inner_grads.to_string(),
            r.cum_grads.to_string(),
            r.gap.to_string(),
        ]);
        rec.extend(r.violation.iter().map(f64::to_string));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn summary_csv_string(result: &ExperimentResult) -> String {
    let m = result.lambda_star.len();
    let selected: Vec<usize> = result
        .selections
        .iter()
        .filter_map(|s| match s.outcome {
            SelectionOutcome::Selected { index, .. } => Some(index),
            SelectionOutcome::NoQualifying { .. } => None,
        })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = [
        "run",
        "algorithm",
        "outer_iters",
        "inner_iters",
        "beta",
        "sigma",
        "primal_step",
        "dual_step",
        "features",
        "surrogate_steps",
        "surrogate_step",
        "final_v_r",
    ]
    .map(String::from)
    .to_vec();
    header.extend((0..m).map(|i| format!("final_v_c_{i}")));
    header.extend(["gap", "max_violation", "qualifies", "selected", "diverged_updates"].map(String::from));
    w.write_record(&header).expect("in-memory write");
    for r in &result.records {
        let p = &r.point;
        let mut rec = vec![
            r.index.to_string(),
            p.algorithm.to_string(),
            p.outer_iters.to_string(),
            p.inner_iters.to_string(),
            opt(p.beta),
            opt(p.sigma),
            p.primal_step.to_string(),
            opt(p.dual_step),
            opt(p.features),
            opt(p.surrogate_steps),
            opt(p.surrogate_step),
            r.final_v_r.to_string(),
        ];
        rec.extend(r.final_v_c.iter().map(f64::to_string));
        rec.extend([
            r.gap.to_string(),
            r.max_violation.to_string(),
            (r.max_violation <= result.config.selection_tolerance).to_string(),
            selected.contains(&r.index).to_string(),
            r.diverged_updates.to_string(),
        ]);
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Gap and worst violation of each representative run against outer iteration and against
/// cumulative gradient evaluations, keyed by file name.
pub fn plots(result: &ExperimentResult) -> Vec<(&'static str, LinePlot)> {
    let reps = result.representatives();
    let env = result.config.environment;
    let make = |metric: &str, by_grads: bool| LinePlot {
        title: format!("{env}: {metric}"),
        x_label: if by_grads {
            "cumulative gradient evaluations".into()
        } else {
            "outer iteration".into()
        },
        y_label: metric.into(),
        series: reps
            .iter()
            .map(|r| Series {
                label: r.point.algorithm.to_string(),
                points: r
                    .rows
                    .iter()
                    .map(|row| {
                        let x = if by_grads { row.cum_grads as f64 } else { row.iter as f64 };
                        let y = if metric.starts_with("gap") { row.gap } else { row.max_violation() };
                        (x, y)
                    })
                    .collect(),
            })
            .collect(),
    };
    vec![
        ("gap_vs_iter.svg", make("gap V* - V_r", false)),
        ("violation_vs_iter.svg", make("max violation b - V_c", false)),
        ("gap_vs_grads.svg", make("gap V* - V_r", true)),
        ("violation_vs_grads.svg", make("max violation b - V_c", true)),
    ]
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `runs/run_NNN_<algorithm>.csv`, `summary.csv`, `selection.txt` and the four plots
/// under `out_dir`; returns the written paths.
pub fn emit_outputs(result: &ExperimentResult, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if result.records.is_empty() {
        return Err(HarnessError::Config("no runs to write".into()));
    }
    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|source| HarnessError::Io {
        path: runs_dir.clone(),
        source,
    })?;
    let mut written = Vec::new();
    for r in &result.records {
        let path = runs_dir.join(format!("run_{:03}_{}.csv", r.index, r.point.algorithm));
        write_file(&path, &run_csv_string(r))?;
        written.push(path);
    }
    let files = [
        ("summary.csv".to_string(), summary_csv_string(result)),
        ("selection.txt".to_string(), result.report()),
    ];
    let plot_files = plots(result).into_iter().map(|(name, p)| (name.to_string(), p.to_svg()));
    for (name, contents) in files.into_iter().chain(plot_files) {
        let path = out_dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
    }
    Ok(written)
}
