//! Augmented Lagrangian objective, pseudo-reward gradient, dual update, theory constants
//! and the generic inexact outer loop.
//!
//! Constraints read `V_c(ρ) ≥ b`; multipliers are kept nonnegative by the update.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmdp::{CmdpError, OccupancyMeasure, PolicyEvaluator, TabularCmdp, TabularPolicy};

#[derive(Debug, Error)]
pub enum AlError {
    #[error("penalty β must be positive and finite, got {0}")]
    Penalty(f64),
    #[error("tolerance schedule constant σ must be positive and finite, got {0}")]
    Schedule(f64),
    #[error("multiplier vector has length {found}, model has {expected} constraints")]
    MultiplierShape { expected: usize, found: usize },
    #[error("Slater margin of constraint {constraint} is {margin}; AL guarantees need a positive margin")]
    Slater { constraint: usize, margin: f64 },
    #[error("minimum initial-state probability must be positive, got {0}")]
    RhoMin(f64),
    #[error("invalid budget argument: {0}")]
    Budget(&'static str),
    #[error("at least one outer iteration is required")]
    NoIterations,
    #[error("subproblem oracle failed: {0}")]
    Oracle(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error("trace export failed: {0}")]
    Export(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AlError>;

/// Multipliers, penalty and the tolerance schedule `ε_t = σ/t²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    lambda: Vec<f64>,
    beta: f64,
    outer_iter: usize,
    sigma: f64,
}

impl DualState {
    /// `λ = 0`, `t = 1`.
    pub fn initial(n_constraints: usize, beta: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![0.0; n_constraints], beta, sigma, 1)
    }

    pub fn new(lambda: Vec<f64>, beta: f64, sigma: f64, outer_iter: usize) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(AlError::Penalty(beta));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(AlError::Schedule(sigma));
        }
        if outer_iter == 0 {
            return Err(AlError::NoIterations);
        }
        Ok(Self {
            lambda,
            beta,
            outer_iter,
            sigma,
        })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn outer_iter(&self) -> usize {
        self.outer_iter
    }

    /// Target subproblem accuracy `σ/t²`.
    pub fn eps(&self) -> f64 {
        self.sigma / (self.outer_iter as f64).powi(2)
    }

    fn check_against(&self, cmdp: &TabularCmdp) -> Result<()> {
        if self.lambda.len() != cmdp.n_constraints() {
            return Err(AlError::MultiplierShape {
                expected: cmdp.n_constraints(),
                found: self.lambda.len(),
            });
        }
        Ok(())
    }
}

/// `min{V_c − b − λ/β, 0}`: zero once the constraint holds with margin `λ/β`.
fn shortfall(v_c: f64, b: f64, lambda: f64, beta: f64) -> f64 {
    (v_c - b - lambda / beta).min(0.0)
}

/// `ξ = max{V_c − b − λ/β, 0}`.
pub fn slack(v_c: f64, b: f64, lambda: f64, beta: f64) -> f64 {
    (v_c - b - lambda / beta).max(0.0)
}

/// AL value from scalar values: `V_r + (β/2) Σ_i (−min{V_ci − b_i − λ_i/β, 0}² + λ_i²/β²)`.
pub fn al_value_from_values(v_r: f64, v_c: &[f64], thresholds: &[f64], lambda: &[f64], beta: f64) -> f64 {
    let penalty: f64 = v_c
        .iter()
        .zip(thresholds)
        .zip(lambda)
        .map(|((&v, &b), &l)| -shortfall(v, b, l, beta).powi(2) + (l / beta).powi(2))
        .sum();
    v_r + 0.5 * beta * penalty
}

/// Values of one policy under the reward and every constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct AlEvaluation {
    pub v_r: f64,
    pub v_c: Vec<f64>,
    pub al_value: f64,
}

pub fn evaluate(cmdp: &TabularCmdp, policy: &TabularPolicy, dual: &DualState) -> Result<AlEvaluation> {
    dual.check_against(cmdp)?;
    let eval = PolicyEvaluator::new(cmdp, policy)?;
    let v_r = eval.scalar_value(cmdp.reward())?;
    let v_c = constraint_values_with(&eval, cmdp)?;
    let al_value = al_value_from_values(v_r, &v_c, &cmdp.thresholds(), dual.lambda(), dual.beta());
    Ok(AlEvaluation { v_r, v_c, al_value })
}

fn constraint_values_with(eval: &PolicyEvaluator<'_>, cmdp: &TabularCmdp) -> Result<Vec<f64>> {
    cmdp.constraints()
        .iter()
        .map(|c| Ok(eval.scalar_value(&c.values)?))
        .collect()
}

/// `V_ci(ρ)` for every constraint.
pub fn constraint_values(cmdp: &TabularCmdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    constraint_values_with(&PolicyEvaluator::new(cmdp, policy)?, cmdp)
}

pub fn al_value(cmdp: &TabularCmdp, policy: &TabularPolicy, dual: &DualState) -> Result<f64> {
    Ok(evaluate(cmdp, policy, dual)?.al_value)
}

/// The AL as a function of the occupancy measure.
pub fn al_value_of_occupancy(cmdp: &TabularCmdp, mu: &OccupancyMeasure, dual: &DualState) -> f64 {
    let v_c: Vec<f64> = cmdp.constraints().iter().map(|c| mu.inner(&c.values)).collect();
    al_value_from_values(mu.inner(cmdp.reward()), &v_c, &cmdp.thresholds(), dual.lambda(), dual.beta())
}

/// Slack form `⟨μ,r⟩ + Σ λ_i (u_i − z_i) − (β/2) Σ (u_i − z_i)²` with `u_i = ⟨μ,c_i⟩ − b_i`.
pub fn slack_form_value(cmdp: &TabularCmdp, mu: &OccupancyMeasure, z: &[f64], dual: &DualState) -> f64 {
    let penalty: f64 = cmdp
        .constraints()
        .iter()
        .zip(z)
        .zip(dual.lambda())
        .map(|((c, &zi), &l)| {
            let gap = mu.inner(&c.values) - c.threshold - zi;
            l * gap - 0.5 * dual.beta() * gap * gap
        })
        .sum();
    mu.inner(cmdp.reward()) + penalty
}

/// `Γ = r − β Σ_i c_i · min{V_ci − b_i − λ_i/β, 0}` given the constraint values.
pub fn pseudo_reward_from_values(cmdp: &TabularCmdp, v_c: &[f64], dual: &DualState) -> Vec<f64> {
    let mut gamma_reward = cmdp.reward().to_vec();
    for ((c, &v), &l) in cmdp.constraints().iter().zip(v_c).zip(dual.lambda()) {
        let weight = -dual.beta() * shortfall(v, c.threshold, l, dual.beta());
        if weight != 0.0 {
            gamma_reward.iter_mut().zip(&c.values).for_each(|(g, cv)| *g += weight * cv);
        }
    }
    gamma_reward
}

pub fn pseudo_reward(cmdp: &TabularCmdp, policy: &TabularPolicy, dual: &DualState) -> Result<Vec<f64>> {
    dual.check_against(cmdp)?;
    let v_c = constraint_values(cmdp, policy)?;
    Ok(pseudo_reward_from_values(cmdp, &v_c, dual))
}

/// `∂L/∂π(a|s) = d(s) Q_Γ(s,a) / (1−γ)` with `d` the normalized discounted state distribution.
pub fn al_gradient(cmdp: &TabularCmdp, policy: &TabularPolicy, dual: &DualState) -> Result<Vec<f64>> {
    dual.check_against(cmdp)?;
    let eval = PolicyEvaluator::new(cmdp, policy)?;
    let v_c = constraint_values_with(&eval, cmdp)?;
    let q = eval.evaluate(&pseudo_reward_from_values(cmdp, &v_c, dual))?.q;
    let d = eval.occupancy()?.state_distribution();
    let na = cmdp.n_actions();
    let scale = 1.0 / (1.0 - cmdp.gamma());
    Ok(q.iter().enumerate().map(|(sa, qv)| d[sa / na] * qv * scale).collect())
}

/// `λ' = λ − (β/2)(V_c − b − ξ)`, i.e. `λ/2` when `V_c ≥ b + λ/β` and `λ − (β/2)(V_c − b)` otherwise.
pub fn dual_update(dual: &DualState, constraint_values: &[f64], thresholds: &[f64]) -> DualState {
    let beta = dual.beta;
    let lambda = dual
        .lambda
        .iter()
        .zip(constraint_values)
        .zip(thresholds)
        .map(|((&l, &v), &b)| {
            if v >= b + l / beta {
                0.5 * l
            } else {
                l - 0.5 * beta * (v - b)
            }
        })
        .collect();
    DualState {
        lambda,
        beta,
        outer_iter: dual.outer_iter + 1,
        sigma: dual.sigma,
    }
}

/// Hessian scale of a discounted value with unit rewards: `2γA/(1−γ)³`.
pub fn value_curvature(gamma: f64, n_actions: usize) -> f64 {
    2.0 * gamma * n_actions as f64 / (1.0 - gamma).powi(3)
}

/// Smoothness constant of `π ↦ L^β(π, λ)`, with value-range terms scaled by the model's reward scale
/// `R = max(|r_lo|, |r_hi|)`: `ιR(1 + β Σ_i (R/(1−γ) + |b_i| + |λ_i|/β)) + β m A² R² / (1−γ)`.
pub fn smoothness_constant(cmdp: &TabularCmdp, dual: &DualState) -> f64 {
    let (gamma, scale, beta) = (cmdp.gamma(), cmdp.reward_scale(), dual.beta());
    let iota = value_curvature(gamma, cmdp.n_actions()) * scale;
    let margins: f64 = cmdp
        .constraints()
        .iter()
        .zip(dual.lambda())
        .map(|(c, l)| scale / (1.0 - gamma) + c.threshold.abs() + l.abs() / beta)
        .sum();
    let m = cmdp.n_constraints() as f64;
    let a = cmdp.n_actions() as f64;
    iota * (1.0 + beta * margins) + beta * m * a * a * scale * scale / (1.0 - gamma)
}

/// Upper bound on every pseudo-reward entry along a theory-budget run, given the Slater margins `ζ`.
///
/// With `R` the reward scale, `span = r_hi − r_lo` and `M_i = span / (ζ_i (1−γ))` bounding `λ*_i`:
/// `U = R (1 + β‖b‖₁ + β m max(−r_lo, 0)/(1−γ) + √m √(‖M‖² + βσπ²/3) + ‖M‖₁)`.
pub fn pseudo_reward_bound(cmdp: &TabularCmdp, dual: &DualState, zeta: &[f64]) -> Result<f64> {
    dual.check_against(cmdp)?;
    if zeta.len() != cmdp.n_constraints() {
        return Err(AlError::MultiplierShape {
            expected: cmdp.n_constraints(),
            found: zeta.len(),
        });
    }
    if let Some((i, &z)) = zeta.iter().enumerate().find(|(_, &z)| !(z > 0.0)) {
        return Err(AlError::Slater { constraint: i, margin: z });
    }
    let gamma = cmdp.gamma();
    let [lo, hi] = cmdp.reward_bounds();
    let (scale, span) = (cmdp.reward_scale(), hi - lo);
    let (beta, sigma) = (dual.beta(), dual.sigma());
    let m = cmdp.n_constraints() as f64;
    let multiplier_bounds: Vec<f64> = zeta.iter().map(|z| span / (z * (1.0 - gamma))).collect();
    let norm_sq: f64 = multiplier_bounds.iter().map(|x| x * x).sum();
    let norm_1: f64 = multiplier_bounds.iter().sum();
    let threshold_1: f64 = cmdp.constraints().iter().map(|c| c.threshold.abs()).sum();
    let negative_values = beta * m * (-lo).max(0.0) / (1.0 - gamma);
    let spread = m.sqrt() * (norm_sq + beta * sigma * std::f64::consts::PI.powi(2) / 3.0).sqrt();
    Ok(scale * (1.0 + beta * threshold_1 + negative_values + spread + norm_1))
}

/// Inner iteration count `⌈32 L (1 + 1/((1−γ)ρ_min)) / ((1−γ)² ρ_min ε)⌉` (saturating).
pub fn inner_budget(smoothness: f64, eps: f64, rho_min: f64, gamma: f64) -> Result<u64> {
    if !(rho_min > 0.0) {
        return Err(AlError::RhoMin(rho_min));
    }
    if !(smoothness > 0.0 && eps > 0.0) {
        return Err(AlError::Budget("smoothness and accuracy must be positive"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(AlError::Budget("discount must lie in [0, 1)"));
    }
    let h = 1.0 - gamma;
    let k = 32.0 * smoothness * (1.0 + 1.0 / (h * rho_min)) / (h * h * rho_min * eps);
    Ok(k.ceil() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// `K_t` from [`inner_budget`] with `ε_t = σ/t²`.
    Theory,
    /// A fixed number of inner iterations per outer iteration.
    Fixed(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmConfig {
    pub outer_iters: usize,
    pub beta: f64,
    pub sigma: f64,
    pub budget: BudgetMode,
    /// Start each subproblem from the previous primal iterate instead of the uniform policy.
    pub warm_start: bool,
}

impl AlmConfig {
    pub fn fixed(outer_iters: usize, inner_iters: u64, beta: f64) -> Self {
        Self {
            outer_iters,
            beta,
            sigma: 1.0,
            budget: BudgetMode::Fixed(inner_iters),
            warm_start: true,
        }
    }
}

/// One subproblem: approximately maximize `L^β(·, λ_t)` starting from `start`.
pub struct SubproblemRequest<'a> {
    pub cmdp: &'a TabularCmdp,
    pub dual: &'a DualState,
    pub eps: f64,
    pub iterations: u64,
    pub start: &'a TabularPolicy,
}

#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    pub policy: TabularPolicy,
    pub grad_evals: u64,
}

pub trait SubproblemOracle {
    fn solve(&mut self, request: &SubproblemRequest<'_>) -> Result<SubproblemSolution>;
}

/// Outer iteration `t`: dual `λ_t` in force, values of the returned policy `π_{t+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmTraceRow {
    pub iter: usize,
    pub eps: f64,
    pub lambda: Vec<f64>,
    pub v_r: f64,
    pub v_c: Vec<f64>,
    /// `L^β(π_{t+1}, λ_t)`.
    pub al_value: f64,
    pub inner_grads: u64,
    pub cum_grads: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlmTrace {
    pub rows: Vec<AlmTraceRow>,
    /// `λ_{T+1}`.
    pub final_lambda: Vec<f64>,
}

impl AlmTrace {
    /// Columns `iter, eps_t, lambda_*, v_r, v_c_*, al_value, inner_grads, cum_grads`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let m = self.final_lambda.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["iter".to_string(), "eps_t".to_string()];
        header.extend((0..m).map(|i| format!("lambda_{i}")));
        header.push("v_r".into());
        header.extend((0..m).map(|i| format!("v_c_{i}")));
        header.extend(["al_value", "inner_grads", "cum_grads"].map(String::from));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.iter.to_string(), row.eps.to_string()];
            rec.extend(row.lambda.iter().map(f64::to_string));
            rec.push(row.v_r.to_string());
            rec.extend(row.v_c.iter().map(f64::to_string));
            rec.extend([row.al_value.to_string(), row.inner_grads.to_string(), row.cum_grads.to_string()]);
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// Runs `T` outer iterations from `λ_1 = 0`, `π_1` uniform; returns `π_{T+1}` and the trace.
pub fn run_alm(
    cmdp: &TabularCmdp,
    oracle: &mut dyn SubproblemOracle,
    config: &AlmConfig,
) -> Result<(TabularPolicy, AlmTrace)> {
    if config.outer_iters == 0 {
        return Err(AlError::NoIterations);
    }
    let uniform = TabularPolicy::uniform(cmdp.n_states(), cmdp.n_actions());
    let thresholds = cmdp.thresholds();
    let mut dual = DualState::initial(cmdp.n_constraints(), config.beta, config.sigma)?;
    let mut policy = uniform.clone();
    let mut trace = AlmTrace::default();
    let mut cum_grads = 0u64;
    for _ in 0..config.outer_iters {
        let eps = dual.eps();
        let iterations = match config.budget {
            BudgetMode::Fixed(k) => k,
            BudgetMode::Theory => inner_budget(smoothness_constant(cmdp, &dual), eps, cmdp.rho_min(), cmdp.gamma())?,
        };
        let start = if config.warm_start { &policy } else { &uniform };
        let solution = oracle.solve(&SubproblemRequest {
            cmdp,
            dual: &dual,
            eps,
            iterations,
            start,
        })?;
        let values = evaluate(cmdp, &solution.policy, &dual)?;
        cum_grads += solution.grad_evals;
        trace.rows.push(AlmTraceRow {
            iter: dual.outer_iter(),
            eps,
            lambda: dual.lambda().to_vec(),
            v_r: values.v_r,
            v_c: values.v_c.clone(),
            al_value: values.al_value,
            inner_grads: solution.grad_evals,
            cum_grads,
        });
        dual = dual_update(&dual, &values.v_c, &thresholds);
        policy = solution.policy;
    }
    trace.final_lambda = dual.lambda().to_vec();
    Ok((policy, trace))
}

/// Standard Lagrangian `V_r + Σ λ_i (V_ci − b_i)`, the small-penalty limit of the AL.
pub fn lagrangian_from_values(v_r: f64, v_c: &[f64], thresholds: &[f64], lambda: &[f64]) -> f64 {
    v_r + v_c
        .iter()
        .zip(thresholds)
        .zip(lambda)
        .map(|((v, b), l)| l * (v - b))
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::testing::{random_cmdp, random_policy};
    use crate::cmdp::{Constraint, RawCmdp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dual(lambda: Vec<f64>, beta: f64) -> DualState {
        DualState::new(lambda, beta, 1.0, 1).unwrap()
    }

    #[test]
    fn al_value_algebra() {
        assert_eq!(al_value_from_values(3.0, &[2.0], &[1.0], &[0.0], 5.0), 3.0);
        let v = al_value_from_values(3.0, &[0.5], &[1.0], &[0.0], 2.0);
        assert!((v - 2.75).abs() < 1e-15);
    }

    #[test]
    fn small_penalty_limit_is_the_lagrangian() {
        let (v_r, v_c, b, l) = (1.5, [0.2], [0.7], [0.8]);
        let target = lagrangian_from_values(v_r, &v_c, &b, &l);
        for beta in [1e-2, 1e-3, 1e-4] {
            let v = al_value_from_values(v_r, &v_c, &b, &l, beta);
            // Exact difference on this branch is −β(V_c − b)²/2.
            assert!((v - target).abs() <= beta * 0.25 / 2.0 + 1e-12);
        }
    }

    #[test]
    fn slack_cases() {
        assert_eq!(slack(5.0, 0.0, 2.0, 1.0), 3.0);
        assert_eq!(slack(-1.0, 0.0, 0.7, 3.0), 0.0);
    }

    #[test]
    fn dual_update_two_cases() {
        let d = dual(vec![2.0], 1.0);
        let up = dual_update(&d, &[5.0], &[0.0]);
        assert_eq!(up.lambda(), &[1.0]);
        assert_eq!(up.outer_iter(), 2);
        let down = dual_update(&d, &[-1.0], &[0.0]);
        assert_eq!(down.lambda(), &[2.5]);
    }

    #[test]
    fn eps_schedule() {
        let mut d = DualState::initial(1, 1.0, 1.0).unwrap();
        assert_eq!(d.lambda(), &[0.0]);
        let expected = [1.0, 0.25, 1.0 / 9.0];
        for e in expected {
            assert!((d.eps() - e).abs() < 1e-15);
            d = dual_update(&d, &[10.0], &[0.0]);
        }
    }

    fn unit_model(gamma: f64, n_actions: usize, threshold: f64) -> TabularCmdp {
        let sa = 2 * n_actions;
        TabularCmdp::new(RawCmdp {
            n_states: 2,
            n_actions,
            gamma,
            rho: vec![0.5, 0.5],
            rewards: vec![1.0; sa],
            constraints: vec![Constraint {
                values: vec![0.0; sa],
                threshold,
            }],
            transition: vec![0.5; sa * 2],
            reward_bounds: Some([0.0, 1.0]),
        })
        .unwrap()
    }

    #[test]
    fn smoothness_constant_hand_values() {
        assert!((value_curvature(0.9, 4) - 7200.0).abs() < 1e-6);
        let m = unit_model(0.5, 2, 0.0);
        assert!((smoothness_constant(&m, &dual(vec![0.0], 1.0)) - 56.0).abs() < 1e-12);
        let tiny = smoothness_constant(&m, &dual(vec![0.0], 1e-12));
        assert!((tiny - 16.0).abs() < 1e-9);
        let l0 = smoothness_constant(&m, &dual(vec![0.0], 1.0));
        assert!(smoothness_constant(&m, &dual(vec![1.0], 1.0)) > l0);
        assert!(smoothness_constant(&m, &dual(vec![0.0], 2.0)) > l0);
    }

    #[test]
    fn pseudo_reward_bound_hand_value() {
        let m = unit_model(0.5, 2, 0.0);
        let u = pseudo_reward_bound(&m, &dual(vec![0.0], 1.0), &[1.0]).unwrap();
        let expected = 1.0 + (4.0 + std::f64::consts::PI.powi(2) / 3.0).sqrt() + 2.0;
        assert!((u - expected).abs() < 1e-12);
        let looser = pseudo_reward_bound(&m, &dual(vec![0.0], 1.0), &[0.5]).unwrap();
        assert!(looser > u);
        assert!(matches!(
            pseudo_reward_bound(&m, &dual(vec![0.0], 1.0), &[0.0]),
            Err(AlError::Slater { constraint: 0, .. })
        ));
    }

    #[test]
    fn inner_budget_hand_values() {
        assert_eq!(inner_budget(1.0, 1.0, 1.0, 0.0).unwrap(), 64);
        // 32·2·9 / (0.25·0.25·ε) with every factor exact in binary.
        assert_eq!(inner_budget(2.0, 0.125, 0.25, 0.5).unwrap(), 73_728);
        assert_eq!(inner_budget(2.0, 0.25, 0.25, 0.5).unwrap(), 36_864);
        assert!(matches!(inner_budget(1.0, 1.0, 0.0, 0.5), Err(AlError::RhoMin(_))));
    }

    #[test]
    fn pseudo_reward_cases() {
        let mut m = unit_model(0.5, 2, 1.0);
        // Constraint values of zero, threshold 1: V_c = 0 < b.
        let d = dual(vec![0.0], 2.0);
        let g = pseudo_reward_from_values(&m, &[0.5], &d);
        let expected: Vec<f64> = m.reward().iter().zip(&m.constraints()[0].values).map(|(r, c)| r + c).collect();
        assert_eq!(g, expected);
        m = m.with_threshold(0, -1.0).unwrap();
        assert_eq!(pseudo_reward_from_values(&m, &[0.0], &dual(vec![0.5], 1.0)), m.reward());
    }

    /// Random direction tangent to the product of simplices.
    fn tangent_direction(rng: &mut impl Rng, s: usize, a: usize) -> Vec<f64> {
        (0..s)
            .flat_map(|_| {
                let raw: Vec<f64> = (0..a).map(|_| rng.random::<f64>() - 0.5).collect();
                let mean = raw.iter().sum::<f64>() / a as f64;
                raw.into_iter().map(move |x| x - mean)
            })
            .collect()
    }

    fn shifted(pi: &TabularPolicy, dir: &[f64], h: f64) -> TabularPolicy {
        let probs = pi.probs().iter().zip(dir).map(|(p, d)| p + h * d).collect();
        TabularPolicy::from_probs(pi.n_states(), pi.n_actions(), probs).unwrap()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..5 {
            let m = random_cmdp(seed, 4, 3, 2, 0.8);
            let pi = random_policy(seed + 50, 4, 3);
            let d = dual(vec![0.3, 1.2], 4.0);
            let grad = al_gradient(&m, &pi, &d).unwrap();
            let dir = tangent_direction(&mut rng, 4, 3);
            let h = 1e-6;
            let fd = (al_value(&m, &shifted(&pi, &dir, h), &d).unwrap()
                - al_value(&m, &shifted(&pi, &dir, -h), &d).unwrap())
                / (2.0 * h);
            let analytic: f64 = grad.iter().zip(&dir).map(|(g, x)| g * x).sum();
            assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn slack_form_maximizer_is_closed_form() {
        let m = random_cmdp(4, 3, 2, 2, 0.6);
        let mu = crate::cmdp::occupancy_measure(&m, &random_policy(5, 3, 2)).unwrap();
        let d = dual(vec![0.4, 2.0], 3.0);
        let z: Vec<f64> = m
            .constraints()
            .iter()
            .zip(d.lambda())
            .map(|(c, &l)| slack(mu.inner(&c.values), c.threshold, l, d.beta()))
            .collect();
        let best = slack_form_value(&m, &mu, &z, &d);
        assert!((best - al_value_of_occupancy(&m, &mu, &d)).abs() < 1e-10);
        // Independent oracle: dense grid search over z ≥ 0 never beats the closed form.
        for i in 0..200 {
            for j in 0..200 {
                let trial = [i as f64 * 0.02, j as f64 * 0.02];
                assert!(slack_form_value(&m, &mu, &trial, &d) <= best + 1e-12);
            }
        }
    }
}
