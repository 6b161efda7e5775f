//! Tabular constrained MDP model, exact policy evaluation and occupancy measures.
//!
//! Tables are stored row-major: rewards are indexed by `s * A + a`, transitions by
//! `(s * A + a) * S + s'`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on probability rows (transitions, ρ, policies).
pub const PROB_TOL: f64 = 1e-12;

/// State marginals at or below this are treated as unvisited.
pub const ZERO_MARGINAL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CmdpError {
    #[error("discount factor {0} must lie in [0, 1)")]
    Discount(f64),
    #[error("{what} has length {found}, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("transition row (state {state}, action {action}) is not a distribution (sum {sum})")]
    TransitionRow { state: usize, action: usize, sum: f64 },
    #[error("initial distribution is not a distribution (sum {sum})")]
    InitialDistribution { sum: f64 },
    #[error("policy row for state {state} is not a distribution (sum {sum})")]
    PolicyRow { state: usize, sum: f64 },
    #[error("{what} entry {value} lies outside the reward range [{lo}, {hi}]")]
    RewardRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("model needs at least one state and one action")]
    Empty,
    #[error("constraint index {index} out of range ({count} constraints)")]
    ConstraintIndex { index: usize, count: usize },
    #[error("evaluation system is singular")]
    Singular,
    #[error("malformed model document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CmdpError>;

/// One constraint reward table together with its threshold `b`: the constraint reads `V_c(ρ) ≥ b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub values: Vec<f64>,
    pub threshold: f64,
}

/// Unvalidated model data; the serialized document format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawCmdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub rewards: Vec<f64>,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    pub transition: Vec<f64>,
    /// Defaults to the tightest interval holding every reward and constraint entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_bounds: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCmdp", into = "RawCmdp")]
pub struct TabularCmdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    rho: Vec<f64>,
    reward: Vec<f64>,
    constraints: Vec<Constraint>,
    transition: Vec<f64>,
    reward_bounds: [f64; 2],
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(CmdpError::Shape {
            what,
            expected,
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CmdpError::NonFinite(what));
    }
    Ok(())
}

fn is_distribution(row: &[f64]) -> bool {
    let sum: f64 = row.iter().sum();
    row.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() <= PROB_TOL
}

impl TryFrom<RawCmdp> for TabularCmdp {
    type Error = CmdpError;

    fn try_from(raw: RawCmdp) -> Result<Self> {
        let (s, a) = (raw.n_states, raw.n_actions);
        if s == 0 || a == 0 {
            return Err(CmdpError::Empty);
        }
        if !(0.0..1.0).contains(&raw.gamma) {
            return Err(CmdpError::Discount(raw.gamma));
        }
        check_len("rho", &raw.rho, s)?;
        check_len("rewards", &raw.rewards, s * a)?;
        check_len("transition", &raw.transition, s * a * s)?;
        for c in &raw.constraints {
            check_len("constraint values", &c.values, s * a)?;
            if !c.threshold.is_finite() {
                return Err(CmdpError::NonFinite("constraint threshold"));
            }
        }
        if !is_distribution(&raw.rho) {
            return Err(CmdpError::InitialDistribution {
                sum: raw.rho.iter().sum(),
            });
        }
        for (row_idx, row) in raw.transition.chunks(s).enumerate() {
            if !is_distribution(row) {
                return Err(CmdpError::TransitionRow {
                    state: row_idx / a,
                    action: row_idx % a,
                    sum: row.iter().sum(),
                });
            }
        }
        let entries = || {
            raw.rewards
                .iter()
                .map(|&v| ("reward", v))
                .chain(raw.constraints.iter().flat_map(|c| c.values.iter().map(|&v| ("constraint", v))))
        };
        let reward_bounds = match raw.reward_bounds {
            Some(b) => b,
            None => entries().fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], (_, v)| {
                [lo.min(v), hi.max(v)]
            }),
        };
        let [lo, hi] = reward_bounds;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(CmdpError::NonFinite("reward bounds"));
        }
        if let Some((what, value)) = entries().find(|&(_, v)| v < lo || v > hi) {
            return Err(CmdpError::RewardRange { what, value, lo, hi });
        }
        Ok(Self {
            n_states: s,
            n_actions: a,
            gamma: raw.gamma,
            rho: raw.rho,
            reward: raw.rewards,
            constraints: raw.constraints,
            transition: raw.transition,
            reward_bounds,
        })
    }
}

impl From<TabularCmdp> for RawCmdp {
    fn from(m: TabularCmdp) -> Self {
        Self {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            rho: m.rho,
            rewards: m.reward,
            constraints: m.constraints,
            transition: m.transition,
            reward_bounds: Some(m.reward_bounds),
        }
    }
}

impl TabularCmdp {
    pub fn new(raw: RawCmdp) -> Result<Self> {
        raw.try_into()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization is infallible")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn rho_min(&self) -> f64 {
        self.rho.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn reward(&self) -> &[f64] {
        &self.reward
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn constraint(&self, i: usize) -> Result<&Constraint> {
        self.constraints.get(i).ok_or(CmdpError::ConstraintIndex {
            index: i,
            count: self.constraints.len(),
        })
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.constraints.iter().map(|c| c.threshold).collect()
    }

    pub fn reward_bounds(&self) -> [f64; 2] {
        self.reward_bounds
    }

    /// `max(|r_lo|, |r_hi|)`: the magnitude bound every reward and constraint entry obeys.
    pub fn reward_scale(&self) -> f64 {
        self.reward_bounds[0].abs().max(self.reward_bounds[1].abs())
    }

    /// Next-state distribution for `(s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    /// Copy of the model with threshold `i` replaced.
    pub fn with_threshold(&self, i: usize, threshold: f64) -> Result<Self> {
        self.constraint(i)?;
        let mut raw = RawCmdp::from(self.clone());
        raw.constraints[i].threshold = threshold;
        Self::new(raw)
    }

    /// Copy of the model with a different constraint set (bounds are recomputed).
    pub fn with_constraints(&self, constraints: Vec<Constraint>) -> Result<Self> {
        let mut raw = RawCmdp::from(self.clone());
        raw.constraints = constraints;
        raw.reward_bounds = None;
        Self::new(raw)
    }

    /// `P_π` as a dense `S × S` matrix.
    pub fn policy_transition(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut p = DMatrix::zeros(ns, ns);
        for s in 0..ns {
            for a in 0..na {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (s2, &p_next) in self.transition_row(s, a).iter().enumerate() {
                    p[(s, s2)] += w * p_next;
                }
            }
        }
        p
    }

    /// `u_π(s) = Σ_a π(a|s) u(s,a)`.
    pub fn policy_reward(&self, policy: &TabularPolicy, reward: &[f64]) -> DVector<f64> {
        let na = self.n_actions;
        DVector::from_fn(self.n_states, |s, _| {
            (0..na).map(|a| policy.prob(s, a) * reward[s * na + a]).sum()
        })
    }

    /// `Q(s,a) = u(s,a) + γ Σ_{s'} P(s'|s,a) V(s')`.
    pub fn q_from_v(&self, reward: &[f64], v: &[f64]) -> Vec<f64> {
        let na = self.n_actions;
        (0..self.n_states * na)
            .map(|sa| {
                let next: f64 = self
                    .transition_row(sa / na, sa % na)
                    .iter()
                    .zip(v)
                    .map(|(p, x)| p * x)
                    .sum();
                reward[sa] + self.gamma * next
            })
            .collect()
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(CmdpError::Shape {
                what: "policy",
                expected: self.n_states * self.n_actions,
                found: policy.n_states() * policy.n_actions(),
            });
        }
        Ok(())
    }

    fn check_reward(&self, reward: &[f64]) -> Result<()> {
        check_len("pseudo-reward", reward, self.n_states * self.n_actions)
    }
}

/// Row-stochastic table `π(a|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn from_probs(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        check_len("policy", &probs, n_states * n_actions)?;
        for (s, row) in probs.chunks(n_actions).enumerate() {
            if !is_distribution(row) {
                return Err(CmdpError::PolicyRow {
                    state: s,
                    sum: row.iter().sum(),
                });
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Builds from rows that are distributions up to round-off; clamps and renormalizes each row.
    pub fn from_rows_renormalized(n_states: usize, n_actions: usize, mut probs: Vec<f64>) -> Self {
        for row in probs.chunks_mut(n_actions) {
            row.iter_mut().for_each(|p| *p = p.max(0.0));
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= sum);
        }
        Self {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.n_actions)
    }

    /// Largest per-state total-variation distance.
    pub fn max_tv_distance(&self, other: &Self) -> f64 {
        self.rows()
            .zip(other.rows())
            .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValuePair {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    /// `V(ρ) = Σ_s ρ(s) V(s)`.
    pub scalar_value: f64,
}

/// Unnormalized state-action visitation `μ(s,a)`, total mass `1/(1−γ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    mu: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64, mu: Vec<f64>) -> Result<Self> {
        check_len("occupancy measure", &mu, n_states * n_actions)?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(CmdpError::Discount(gamma));
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            mu: mu.into_iter().map(|x| x.max(0.0)).collect(),
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.mu
    }

    pub fn total_mass(&self) -> f64 {
        self.mu.iter().sum()
    }

    /// `Σ_a μ(s,a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.mu.chunks(self.n_actions).map(|r| r.iter().sum()).collect()
    }

    /// Normalized discounted state distribution `d(s) = (1−γ) Σ_a μ(s,a)`.
    pub fn state_distribution(&self) -> Vec<f64> {
        self.state_marginal()
            .into_iter()
            .map(|m| (1.0 - self.gamma) * m)
            .collect()
    }

    /// `⟨μ, u⟩`.
    pub fn inner(&self, u: &[f64]) -> f64 {
        self.mu.iter().zip(u).map(|(m, x)| m * x).sum()
    }

    /// Largest absolute Bellman flow residual against `cmdp`.
    pub fn flow_residual(&self, cmdp: &TabularCmdp) -> f64 {
        let (ns, na) = (self.n_states, self.n_actions);
        let mut inflow = cmdp.rho().to_vec();
        for s in 0..ns {
            for a in 0..na {
                let m = self.mu[s * na + a];
                for (s2, p) in cmdp.transition_row(s, a).iter().enumerate() {
                    inflow[s2] += cmdp.gamma() * p * m;
                }
            }
        }
        self.state_marginal()
            .iter()
            .zip(&inflow)
            .map(|(out, inn)| (out - inn).abs())
            .fold(0.0, f64::max)
    }
}

/// Factorization of `I − γP_π` for one policy, reusable across rewards.
pub struct PolicyEvaluator<'a> {
    cmdp: &'a TabularCmdp,
    policy: &'a TabularPolicy,
    system: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl<'a> PolicyEvaluator<'a> {
    pub fn new(cmdp: &'a TabularCmdp, policy: &'a TabularPolicy) -> Result<Self> {
        cmdp.check_policy(policy)?;
        let n = cmdp.n_states();
        let system = DMatrix::identity(n, n) - cmdp.policy_transition(policy) * cmdp.gamma();
        let lu = system.clone().lu();
        Ok(Self {
            cmdp,
            policy,
            system,
            lu,
        })
    }

    /// Solves `(I − γP_π) V = u_π`.
    pub fn state_values(&self, reward: &[f64]) -> Result<Vec<f64>> {
        self.cmdp.check_reward(reward)?;
        let rhs = self.cmdp.policy_reward(self.policy, reward);
        let v = self.lu.solve(&rhs).ok_or(CmdpError::Singular)?;
        Ok(v.iter().copied().collect())
    }

    /// `V(ρ)` only.
    pub fn scalar_value(&self, reward: &[f64]) -> Result<f64> {
        let v = self.state_values(reward)?;
        Ok(dot(self.cmdp.rho(), &v))
    }

    pub fn evaluate(&self, reward: &[f64]) -> Result<ValuePair> {
        let v = self.state_values(reward)?;
        let q = self.cmdp.q_from_v(reward, &v);
        let scalar_value = dot(self.cmdp.rho(), &v);
        Ok(ValuePair { v, q, scalar_value })
    }

    /// Solves `xᵀ(I − γP_π) = ρᵀ` and spreads `x(s)` over actions by `π`.
    pub fn occupancy(&self) -> Result<OccupancyMeasure> {
        let rho = DVector::from_column_slice(self.cmdp.rho());
        let x = self.system.transpose().lu().solve(&rho).ok_or(CmdpError::Singular)?;
        let (ns, na) = (self.cmdp.n_states(), self.cmdp.n_actions());
        let mu = (0..ns * na)
            .map(|sa| x[sa / na].max(0.0) * self.policy.prob(sa / na, sa % na))
            .collect();
        OccupancyMeasure::new(ns, na, self.cmdp.gamma(), mu)
    }
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn policy_evaluate(cmdp: &TabularCmdp, policy: &TabularPolicy, reward: &[f64]) -> Result<ValuePair> {
    PolicyEvaluator::new(cmdp, policy)?.evaluate(reward)
}

pub fn occupancy_measure(cmdp: &TabularCmdp, policy: &TabularPolicy) -> Result<OccupancyMeasure> {
    PolicyEvaluator::new(cmdp, policy)?.occupancy()
}

/// `π(a|s) = μ(s,a) / Σ_a' μ(s,a')`; unvisited states get the uniform row.
pub fn policy_from_occupancy(mu: &OccupancyMeasure) -> TabularPolicy {
    let na = mu.n_actions();
    let probs = mu
        .values()
        .chunks(na)
        .flat_map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(move |&m| {
                if total > ZERO_MARGINAL {
                    m / total
                } else {
                    1.0 / na as f64
                }
            })
        })
        .collect();
    TabularPolicy::from_rows_renormalized(mu.n_states(), na, probs)
}
