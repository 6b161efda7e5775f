//! Log-linear policies trained by projecting tabular PQA targets with a cross-entropy surrogate.
//!
//! One PPQA update takes a tabular PQA step from `π_θ` to a target policy, then runs plain
//! gradient descent on `ℓ(ω) = Σ_s d(s) Σ_a target(a|s)·(−log π_ω(a|s))` starting from `ω = θ`,
//! where `d` is the normalized discounted state distribution of `π_θ`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::al::{self, AlError, DualState, SubproblemOracle, SubproblemRequest, SubproblemSolution};
use crate::cmdp::{CmdpError, PolicyEvaluator, TabularCmdp, TabularPolicy};
use crate::envs::GridGeometry;
use crate::pqa;

#[derive(Debug, Error)]
pub enum PpqaError {
    #[error("feature table has {found} entries, expected {expected}")]
    Shape { expected: usize, found: usize },
    #[error("feature ({state}, {action}) has norm {norm} > 1")]
    FeatureNorm { state: usize, action: usize, norm: f64 },
    #[error("feature table contains a non-finite entry")]
    NonFinite,
    #[error("invalid tile coder: {0}")]
    TileConfig(&'static str),
    #[error("step size must be positive and finite, got {0}")]
    Step(f64),
    #[error("parameter vector has length {found}, expected {expected}")]
    Theta { expected: usize, found: usize },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Al(#[from] AlError),
}

pub type Result<T> = std::result::Result<T, PpqaError>;

/// Norm slack for features that were normalized in floating point.
const NORM_TOL: f64 = 1e-12;

#[derive(Serialize, Deserialize)]
struct RawFeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    /// One dense `dim`-vector per state-action pair, index `s * n_actions + a`.
    rows: Vec<Vec<f64>>,
}

/// Feature vectors `φ(s, a) ∈ R^d` with `‖φ(s, a)‖ ≤ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatureMap", into = "RawFeatureMap")]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    /// Row-major `(s, a) × d`.
    phi: Vec<f64>,
}

impl TryFrom<RawFeatureMap> for FeatureMap {
    type Error = PpqaError;

    fn try_from(raw: RawFeatureMap) -> Result<Self> {
        if let Some(bad) = raw.rows.iter().find(|r| r.len() != raw.dim) {
            return Err(PpqaError::Shape {
                expected: raw.dim,
                found: bad.len(),
            });
        }
        FeatureMap::new(raw.n_states, raw.n_actions, raw.dim, raw.rows.concat())
    }
}

impl From<FeatureMap> for RawFeatureMap {
    fn from(f: FeatureMap) -> Self {
        let rows = if f.dim == 0 {
            vec![Vec::new(); f.n_states * f.n_actions]
        } else {
            f.phi.chunks(f.dim).map(<[f64]>::to_vec).collect()
        };
        RawFeatureMap {
            n_states: f.n_states,
            n_actions: f.n_actions,
            dim: f.dim,
            rows,
        }
    }
}

impl FeatureMap {
    /// Takes features as given; every row must already have norm at most 1.
    pub fn new(n_states: usize, n_actions: usize, dim: usize, phi: Vec<f64>) -> Result<Self> {
        let map = Self::unchecked(n_states, n_actions, dim, phi)?;
        for s in 0..n_states {
            for a in 0..n_actions {
                let norm = l2(map.row(s, a));
                if norm > 1.0 + NORM_TOL {
                    return Err(PpqaError::FeatureNorm { state: s, action: a, norm });
                }
            }
        }
        Ok(map)
    }

    /// Scales every nonzero row to unit norm.
    pub fn normalized(n_states: usize, n_actions: usize, dim: usize, mut phi: Vec<f64>) -> Result<Self> {
        if dim > 0 {
            for row in phi.chunks_mut(dim) {
                let norm = l2(row);
                if norm > 0.0 {
                    row.iter_mut().for_each(|x| *x /= norm);
                }
            }
        }
        Self::unchecked(n_states, n_actions, dim, phi)
    }

    fn unchecked(n_states: usize, n_actions: usize, dim: usize, phi: Vec<f64>) -> Result<Self> {
        let expected = n_states * n_actions * dim;
        if phi.len() != expected {
            return Err(PpqaError::Shape {
                expected,
                found: phi.len(),
            });
        }
        if phi.iter().any(|x| !x.is_finite()) {
            return Err(PpqaError::NonFinite);
        }
        Ok(Self {
            n_states,
            n_actions,
            dim,
            phi,
        })
    }

    /// `φ(s, a) = e_{sA+a}`; log-linear policies over it are exactly the interior tabular ones.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let sa = n_states * n_actions;
        let mut phi = vec![0.0; sa * sa];
        for i in 0..sa {
            phi[i * sa + i] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            dim: sa,
            phi,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.dim;
        &self.phi[start..start + self.dim]
    }

    pub fn max_row_norm(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        self.phi.chunks(self.dim).map(l2).fold(0.0, f64::max)
    }

    /// `⟨φ(s, a), θ⟩` for every pair, row-major.
    pub fn logits(&self, theta: &[f64]) -> Vec<f64> {
        if self.dim == 0 {
            return vec![0.0; self.n_states * self.n_actions];
        }
        self.phi.chunks(self.dim).map(|row| dot(row, theta)).collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("feature serialization is infallible")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn l2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Hashed grid tile coding: `num_tilings` offset tilings of `tile_size × tile_size` cells, each
/// (tiling, tile, action) hashed into one of `table_size` slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCoderConfig {
    pub table_size: usize,
    pub num_tilings: usize,
    pub tile_size: usize,
    #[serde(default = "default_hash_seed")]
    pub seed: u64,
}

pub const DEFAULT_HASH_SEED: u64 = 0x5eed_7a11_c0de_0001;

fn default_hash_seed() -> u64 {
    DEFAULT_HASH_SEED
}

impl TileCoderConfig {
    pub fn new(table_size: usize, num_tilings: usize, tile_size: usize) -> Self {
        Self {
            table_size,
            num_tilings,
            tile_size,
            seed: DEFAULT_HASH_SEED,
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sparse binary tile features, normalized to unit norm per state-action pair.
///
/// Tiling `t` is shifted by `t·(1, 3)·tile_size/num_tilings` cells, so distinct tilings
/// generalize along different directions. Collisions in the hash table are kept.
pub fn tile_code(config: &TileCoderConfig, geometry: &GridGeometry, n_actions: usize) -> Result<FeatureMap> {
    let TileCoderConfig {
        table_size: d,
        num_tilings: n,
        tile_size: width,
        seed,
    } = *config;
    if n == 0 || width == 0 {
        return Err(PpqaError::TileConfig("tilings and tile size must be positive"));
    }
    if d < n {
        return Err(PpqaError::TileConfig("table size must be at least the number of tilings"));
    }
    let ns = geometry.n_states();
    let mut phi = vec![0.0; ns * n_actions * d];
    for s in 0..ns {
        let (r, c) = geometry.position(s);
        for a in 0..n_actions {
            let row = &mut phi[(s * n_actions + a) * d..][..d];
            for t in 0..n {
                // Offsets in units of 1/n cells keep the arithmetic integral.
                let tile_r = (r * n + t * width) / (width * n);
                let tile_c = (c * n + 3 * t * width) / (width * n);
                let key = [t, tile_r, tile_c, a]
                    .iter()
                    .fold(seed, |h, &part| mix64(h ^ part as u64));
                row[(key % d as u64) as usize] += 1.0;
            }
        }
    }
    FeatureMap::normalized(ns, n_actions, d, phi)
}

/// `π_θ(a|s) ∝ exp⟨φ(s, a), θ⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLinearPolicy {
    theta: Vec<f64>,
    features: Arc<FeatureMap>,
}

impl LogLinearPolicy {
    pub fn zeros(features: Arc<FeatureMap>) -> Self {
        Self {
            theta: vec![0.0; features.dim()],
            features,
        }
    }

    pub fn new(features: Arc<FeatureMap>, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != features.dim() {
            return Err(PpqaError::Theta {
                expected: features.dim(),
                found: theta.len(),
            });
        }
        Ok(Self { theta, features })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn features(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    /// Per-state log-probabilities, row-major, via a max-shifted log-sum-exp.
    pub fn log_probs(&self) -> Vec<f64> {
        let na = self.features.n_actions();
        let mut logits = self.features.logits(&self.theta);
        for row in logits.chunks_mut(na) {
            let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + row.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        logits
    }
}

pub fn log_linear_probs(policy: &LogLinearPolicy) -> TabularPolicy {
    let f = &policy.features;
    let probs = policy.log_probs().into_iter().map(f64::exp).collect();
    TabularPolicy::from_rows_renormalized(f.n_states(), f.n_actions(), probs)
}

/// Surrogate loss and its gradient `Σ_s d(s) Σ_a (π_θ(a|s) − target(a|s)) φ(s, a)`.
pub fn surrogate_loss_and_grad(weights: &[f64], target: &TabularPolicy, policy: &LogLinearPolicy) -> (f64, Vec<f64>) {
    let f = &policy.features;
    let na = f.n_actions();
    let log_probs = policy.log_probs();
    let mut loss = 0.0;
    let mut grad = vec![0.0; f.dim()];
    for (s, (&w, lp_row)) in weights.iter().zip(log_probs.chunks(na)).enumerate() {
        if w == 0.0 {
            continue;
        }
        for (a, (&lp, &tp)) in lp_row.iter().zip(target.row(s)).enumerate() {
            loss -= w * tp * lp;
            let coef = w * (lp.exp() - tp);
            grad.iter_mut().zip(f.row(s, a)).for_each(|(g, phi)| *g += coef * phi);
        }
    }
    (loss, grad)
}

/// `Σ_s d(s)·H(target(·|s))`, the surrogate's value when `π_θ` reproduces the target exactly and
/// a lower bound on it for every `θ`.
pub fn weighted_entropy(weights: &[f64], target: &TabularPolicy) -> f64 {
    weights
        .iter()
        .zip(target.rows())
        .map(|(w, row)| w * row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpqaConfig {
    /// Step of the tabular PQA target.
    pub eta: f64,
    pub surrogate_steps: usize,
    pub surrogate_step: f64,
}

#[derive(Clone, Debug)]
pub struct PpqaUpdate {
    pub policy: LogLinearPolicy,
    /// `ℓ(ω_0), …, ℓ(ω_N)`.
    pub losses: Vec<f64>,
    /// Lower bound on `min ℓ`; the final loss minus this bounds the surrogate suboptimality plus
    /// the representation error.
    pub entropy_floor: f64,
    /// Final loss above the initial one.
    pub diverged: bool,
    /// Some step raised the loss.
    pub non_monotone: bool,
}

pub fn ppqa_update(
    cmdp: &TabularCmdp,
    dual: &DualState,
    policy: &LogLinearPolicy,
    config: &PpqaConfig,
) -> Result<PpqaUpdate> {
    for step in [config.eta, config.surrogate_step] {
        if !(step > 0.0 && step.is_finite()) {
            return Err(PpqaError::Step(step));
        }
    }
    let current = log_linear_probs(policy);
    let eval = PolicyEvaluator::new(cmdp, &current)?;
    let v_c = cmdp
        .constraints()
        .iter()
        .map(|c| eval.scalar_value(&c.values))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let q = eval.evaluate(&al::pseudo_reward_from_values(cmdp, &v_c, dual))?.q;
    let target = pqa::ascend_rows(&current, &q, config.eta);
    let weights = eval.occupancy()?.state_distribution();

    let mut next = policy.clone();
    let mut losses = Vec::with_capacity(config.surrogate_steps + 1);
    let (mut loss, mut grad) = surrogate_loss_and_grad(&weights, &target, &next);
    losses.push(loss);
    for _ in 0..config.surrogate_steps {
        next.theta.iter_mut().zip(&grad).for_each(|(w, g)| *w -= config.surrogate_step * g);
        (loss, grad) = surrogate_loss_and_grad(&weights, &target, &next);
        losses.push(loss);
    }
    let slack = |x: f64| 1e-12 * (1.0 + x.abs());
    let non_monotone = losses.windows(2).any(|w| w[1] > w[0] + slack(w[0]));
    let diverged = losses[losses.len() - 1] > losses[0] + slack(losses[0]);
    Ok(PpqaUpdate {
        policy: next,
        losses,
        entropy_floor: weighted_entropy(&weights, &target),
        diverged,
        non_monotone,
    })
}

/// Summary of one surrogate minimization, kept by [`PpqaOracle`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateAudit {
    pub outer_iter: usize,
    pub inner_iter: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub entropy_floor: f64,
    pub diverged: bool,
}

/// Runs `iterations` PPQA updates from `start`; returns the final parameters and `iterations`
/// as the gradient-evaluation count.
pub fn solve_subproblem_ppqa(
    cmdp: &TabularCmdp,
    dual: &DualState,
    start: &LogLinearPolicy,
    config: &PpqaConfig,
    iterations: u64,
    mut audit: impl FnMut(u64, &PpqaUpdate),
) -> Result<(LogLinearPolicy, u64)> {
    let mut policy = start.clone();
    for k in 0..iterations {
        let update = ppqa_update(cmdp, dual, &policy, config)?;
        audit(k, &update);
        policy = update.policy;
    }
    Ok((policy, iterations))
}

/// [`SubproblemOracle`] over a fixed feature map. The parameters persist across calls, so each
/// subproblem starts from the previous solution; the tabular start in the request is ignored
/// because a tabular policy has no unique preimage in parameter space.
#[derive(Clone, Debug)]
pub struct PpqaOracle {
    pub config: PpqaConfig,
    policy: LogLinearPolicy,
    audits: Vec<SurrogateAudit>,
}

impl PpqaOracle {
    pub fn new(features: Arc<FeatureMap>, config: PpqaConfig) -> Self {
        Self {
            config,
            policy: LogLinearPolicy::zeros(features),
            audits: Vec::new(),
        }
    }

    pub fn policy(&self) -> &LogLinearPolicy {
        &self.policy
    }

    pub fn audits(&self) -> &[SurrogateAudit] {
        &self.audits
    }

    pub fn diverged_updates(&self) -> usize {
        self.audits.iter().filter(|a| a.diverged).count()
    }
}

impl SubproblemOracle for PpqaOracle {
    fn solve(&mut self, request: &SubproblemRequest<'_>) -> al::Result<SubproblemSolution> {
        let outer_iter = request.dual.outer_iter();
        let audits = &mut self.audits;
        let (policy, grad_evals) = solve_subproblem_ppqa(
            request.cmdp,
            request.dual,
            &self.policy,
            &self.config,
            request.iterations,
            |k, update| {
                audits.push(SurrogateAudit {
                    outer_iter,
                    inner_iter: k,
                    initial_loss: update.losses[0],
                    final_loss: update.losses[update.losses.len() - 1],
                    entropy_floor: update.entropy_floor,
                    diverged: update.diverged,
                })
            },
        )
        .map_err(|e| match e {
            PpqaError::Al(inner) => inner,
            PpqaError::Cmdp(inner) => AlError::Cmdp(inner),
            other => AlError::Oracle(Box::new(other)),
        })?;
        self.policy = policy;
        Ok(SubproblemSolution {
            policy: log_linear_probs(&self.policy),
            grad_evals,
        })
    }
}
