//! Tabular projected Q-ascent on the AL subproblem.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::al::{self, AlError, DualState, SubproblemOracle, SubproblemRequest, SubproblemSolution};
use crate::cmdp::{PolicyEvaluator, TabularCmdp, TabularPolicy};

/// Slack allowed on the per-step AL increase when ascent checking is on.
pub const ASCENT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum PqaError {
    #[error("step size must be positive and finite, got {0}")]
    Step(f64),
    #[error("AL value decreased by {decrease} at inner iteration {iteration}")]
    Ascent { iteration: u64, decrease: f64 },
    #[error(transparent)]
    Al(#[from] AlError),
}

impl From<crate::cmdp::CmdpError> for PqaError {
    fn from(e: crate::cmdp::CmdpError) -> Self {
        Self::Al(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PqaError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSize {
    Fixed(f64),
    /// `ρ_min / L_t` from the smoothness constant of the current subproblem.
    Theory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqaConfig {
    pub step: StepSize,
    pub max_iters: u64,
    pub ascent_check: bool,
}

impl PqaConfig {
    pub fn fixed(eta: f64, max_iters: u64) -> Self {
        Self {
            step: StepSize::Fixed(eta),
            max_iters,
            ascent_check: false,
        }
    }

    pub fn theory(max_iters: u64) -> Self {
        Self {
            step: StepSize::Theory,
            max_iters,
            ascent_check: true,
        }
    }

    fn eta(&self, cmdp: &TabularCmdp, dual: &DualState) -> Result<f64> {
        let eta = match self.step {
            StepSize::Fixed(eta) => eta,
            StepSize::Theory => theory_step_size(cmdp, dual),
        };
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(PqaError::Step(eta));
        }
        Ok(eta)
    }
}

pub fn theory_step_size(cmdp: &TabularCmdp, dual: &DualState) -> f64 {
    cmdp.rho_min() / al::smoothness_constant(cmdp, dual)
}

/// Euclidean projection onto the probability simplex (sort, then threshold).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut threshold = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        // The support is the longest sorted prefix that stays strictly above its threshold.
        if u - candidate > 0.0 {
            threshold = candidate;
        } else {
            break;
        }
    }
    v.iter().map(|x| (x - threshold).max(0.0)).collect()
}

/// Statewise ascent `Proj_Δ[π(·|s) + η q(s,·)]` for an already computed `q`.
pub fn ascend_rows(policy: &TabularPolicy, q: &[f64], eta: f64) -> TabularPolicy {
    let na = policy.n_actions();
    let probs: Vec<f64> = policy
        .rows()
        .zip(q.chunks(na))
        .flat_map(|(row, q_row)| {
            let moved: Vec<f64> = row.iter().zip(q_row).map(|(p, qv)| p + eta * qv).collect();
            project_simplex(&moved)
        })
        .collect();
    TabularPolicy::from_rows_renormalized(policy.n_states(), na, probs)
}

/// `Q^π_{Γ(π)}` with one factorization for the constraint values and the pseudo-reward.
pub fn pseudo_reward_q(cmdp: &TabularCmdp, policy: &TabularPolicy, dual: &DualState) -> Result<Vec<f64>> {
    let eval = PolicyEvaluator::new(cmdp, policy)?;
    let v_c = cmdp
        .constraints()
        .iter()
        .map(|c| eval.scalar_value(&c.values))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let gamma_reward = al::pseudo_reward_from_values(cmdp, &v_c, dual);
    Ok(eval.evaluate(&gamma_reward)?.q)
}

/// One projected Q-ascent step on `L^β(·, λ)`.
pub fn pqa_step(cmdp: &TabularCmdp, policy: &TabularPolicy, dual: &DualState, eta: f64) -> Result<TabularPolicy> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(PqaError::Step(eta));
    }
    let q = pseudo_reward_q(cmdp, policy, dual)?;
    Ok(ascend_rows(policy, &q, eta))
}

/// Runs `config.max_iters` steps from `warm_start`; each step counts as one gradient evaluation.
pub fn solve_subproblem_pqa(
    cmdp: &TabularCmdp,
    dual: &DualState,
    warm_start: &TabularPolicy,
    config: &PqaConfig,
) -> Result<(TabularPolicy, u64)> {
    let eta = config.eta(cmdp, dual)?;
    let mut policy = warm_start.clone();
    let mut value = if config.ascent_check {
        al::al_value(cmdp, &policy, dual)?
    } else {
        f64::NAN
    };
    for k in 0..config.max_iters {
        policy = pqa_step(cmdp, &policy, dual, eta)?;
        if config.ascent_check {
            let next = al::al_value(cmdp, &policy, dual)?;
            if next - value < -ASCENT_TOL {
                return Err(PqaError::Ascent {
                    iteration: k + 1,
                    decrease: value - next,
                });
            }
            value = next;
        }
    }
    Ok((policy, config.max_iters))
}

/// [`SubproblemOracle`] backed by PQA; the iteration count comes from each request.
#[derive(Clone, Debug)]
pub struct PqaOracle {
    pub config: PqaConfig,
}

impl SubproblemOracle for PqaOracle {
    fn solve(&mut self, request: &SubproblemRequest<'_>) -> al::Result<SubproblemSolution> {
        let config = PqaConfig {
            max_iters: request.iterations,
            ..self.config
        };
        let (policy, grad_evals) = solve_subproblem_pqa(request.cmdp, request.dual, request.start, &config)
            .map_err(|e| match e {
                PqaError::Al(inner) => inner,
                other => AlError::Oracle(Box::new(other)),
            })?;
        Ok(SubproblemSolution { policy, grad_evals })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::testing::{random_cmdp, random_policy};
    use crate::cmdp::Constraint;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Oracle: minimize ‖x − v‖² over every support set with the equality constraint only,
    /// keep feasible candidates, return the closest.
    fn projection_by_enumeration(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let shift = (support.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / support.len() as f64;
            let mut x = vec![0.0; n];
            for &i in &support {
                x[i] = v[i] - shift;
            }
            if x.iter().any(|&xi| xi < -1e-14) {
                continue;
            }
            let dist: f64 = x.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn projection_fixed_examples() {
        assert_eq!(project_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(project_simplex(&[1.0, 1.0]), vec![0.5, 0.5]);
        assert_eq!(project_simplex(&[0.2, 0.3, 0.5]), vec![0.2, 0.3, 0.5]);
    }

    #[test]
    fn projection_matches_support_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(1..=6);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = project_simplex(&v);
            let slow = projection_by_enumeration(&v);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{v:?}: {fast:?} vs {slow:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_order_preserving(v in prop::collection::vec(-5.0f64..5.0, 1..8)) {
            let p = project_simplex(&v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let again = project_simplex(&p);
            for (a, b) in p.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] >= v[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }
    }

    fn dual_for(cmdp: &TabularCmdp, lambda: f64, beta: f64) -> DualState {
        DualState::new(vec![lambda; cmdp.n_constraints()], beta, 1.0, 1).unwrap()
    }

    #[test]
    fn tiny_step_leaves_policy_unchanged() {
        let m = random_cmdp(1, 3, 3, 1, 0.7);
        let pi = random_policy(2, 3, 3);
        let next = pqa_step(&m, &pi, &dual_for(&m, 0.5, 2.0), 1e-14).unwrap();
        assert!(next.max_tv_distance(&pi) < 1e-12);
    }

    #[test]
    fn constant_q_row_is_unchanged() {
        let pi = random_policy(4, 2, 3);
        let q = vec![3.0, 3.0, 3.0, 1.0, 0.0, -1.0];
        let next = ascend_rows(&pi, &q, 0.7);
        for (a, b) in next.row(0).iter().zip(pi.row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_iterations_return_the_warm_start() {
        let m = random_cmdp(5, 3, 2, 1, 0.5);
        let pi = random_policy(6, 3, 2);
        let (out, evals) = solve_subproblem_pqa(&m, &dual_for(&m, 0.0, 1.0), &pi, &PqaConfig::fixed(1.0, 0)).unwrap();
        assert_eq!(out, pi);
        assert_eq!(evals, 0);
    }

    #[test]
    fn theory_step_ascends() {
        for seed in 0..6 {
            let m = random_cmdp(seed, 3, 2, 1, 0.5);
            let config = PqaConfig::theory(200);
            let d = dual_for(&m, 0.7, 3.0);
            solve_subproblem_pqa(&m, &d, &random_policy(seed + 9, 3, 2), &config).unwrap();
        }
    }

    #[test]
    fn satisfied_constraint_reduces_to_fixed_reward_ascent() {
        let base = random_cmdp(8, 4, 3, 0, 0.8);
        let m = base
            .with_constraints(vec![Constraint {
                values: vec![0.5; 12],
                threshold: -1e6,
            }])
            .unwrap();
        let d = dual_for(&m, 0.0, 1.0);
        let (eta, steps) = (0.3, 25);
        let (via_solver, _) = solve_subproblem_pqa(&m, &d, &random_policy(1, 4, 3), &PqaConfig::fixed(eta, steps)).unwrap();
        // Independent loop on the fixed reward r.
        let mut pi = random_policy(1, 4, 3);
        for _ in 0..steps {
            let q = crate::cmdp::policy_evaluate(&base, &pi, base.reward()).unwrap().q;
            let rows: Vec<f64> = (0..4)
                .flat_map(|s| {
                    let moved: Vec<f64> = (0..3).map(|a| pi.prob(s, a) + eta * q[s * 3 + a]).collect();
                    project_simplex(&moved)
                })
                .collect();
            pi = TabularPolicy::from_rows_renormalized(4, 3, rows);
        }
        assert_eq!(via_solver.probs(), pi.probs());
    }
}
