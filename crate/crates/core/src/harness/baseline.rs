//! Primal-dual natural policy gradient on the plain Lagrangian, used as the comparison method.

use serde::{Deserialize, Serialize};

use crate::cmdp::{self, PolicyEvaluator, TabularCmdp, TabularPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub iter: usize,
    /// `λ_t`, used for the step that produced this row's policy.
    pub lambda: Vec<f64>,
    pub v_r: f64,
    pub v_c: Vec<f64>,
    /// `V_r + Σ λ_i (V_ci − b_i)` at the new policy and `λ_t`.
    pub lagrangian: f64,
}

/// Softmax natural-gradient step `π'(a|s) ∝ π(a|s)·exp(step·Q(s, a))`, computed in log space.
pub fn npg_step(policy: &TabularPolicy, q: &[f64], step: f64) -> TabularPolicy {
    let na = policy.n_actions();
    let mut probs = Vec::with_capacity(policy.probs().len());
    for (row, q_row) in policy.rows().zip(q.chunks(na)) {
        let logits: Vec<f64> = row.iter().zip(q_row).map(|(p, qv)| p.ln() + step * qv).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        probs.extend(weights.iter().map(|w| w / total));
    }
    TabularPolicy::from_rows_renormalized(policy.n_states(), na, probs)
}

/// `iters` simultaneous updates from the uniform policy and `λ = 0`: an NPG step of size
/// `primal_step/(1−γ)` on `r + Σ λ_i c_i`, and `λ ← max(0, λ − dual_step·(V_c − b))`.
pub fn npg_pd_baseline(
    cmdp: &TabularCmdp,
    iters: usize,
    primal_step: f64,
    dual_step: f64,
) -> cmdp::Result<(TabularPolicy, Vec<BaselineRow>)> {
    let thresholds = cmdp.thresholds();
    let step = primal_step / (1.0 - cmdp.gamma());
    let mut policy = TabularPolicy::uniform(cmdp.n_states(), cmdp.n_actions());
    let mut lambda = vec![0.0; cmdp.n_constraints()];
    let mut rows = Vec::with_capacity(iters);
    for t in 1..=iters {
        let eval = PolicyEvaluator::new(cmdp, &policy)?;
        let mut reward = cmdp.reward().to_vec();
        let mut v_c = Vec::with_capacity(lambda.len());
        for (c, l) in cmdp.constraints().iter().zip(&lambda) {
            v_c.push(eval.scalar_value(&c.values)?);
            reward.iter_mut().zip(&c.values).for_each(|(r, cv)| *r += l * cv);
        }
        let q = eval.evaluate(&reward)?.q;
        let next = npg_step(&policy, &q, step);
        let next_lambda: Vec<f64> = lambda
            .iter()
            .zip(v_c.iter().zip(&thresholds))
            .map(|(l, (v, b))| (l - dual_step * (v - b)).max(0.0))
            .collect();

        let next_eval = PolicyEvaluator::new(cmdp, &next)?;
        let v_r = next_eval.scalar_value(cmdp.reward())?;
        let next_v_c = cmdp
            .constraints()
            .iter()
            .map(|c| next_eval.scalar_value(&c.values))
            .collect::<cmdp::Result<Vec<_>>>()?;
        rows.push(BaselineRow {
            iter: t,
            lagrangian: crate::al::lagrangian_from_values(v_r, &next_v_c, &thresholds, &lambda),
            lambda,
            v_r,
            v_c: next_v_c,
        });
        policy = next;
        lambda = next_lambda;
    }
    Ok((policy, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::testing::random_cmdp;
    use crate::cmdp::policy_evaluate;
    use crate::envs;

    #[test]
    fn unconstrained_run_is_plain_npg() {
        let cmdp = random_cmdp(31, 4, 3, 0, 0.8);
        let (policy, rows) = npg_pd_baseline(&cmdp, 25, 0.7, 0.3).unwrap();
        // Standalone softmax NPG on the reward alone.
        let step = 0.7 / (1.0 - 0.8);
        let mut probs = vec![1.0 / 3.0; 12];
        for row in &rows {
            let pi = TabularPolicy::from_probs(4, 3, probs.clone()).unwrap();
            let q = policy_evaluate(&cmdp, &pi, cmdp.reward()).unwrap().q;
            for s in 0..4 {
                let logits: Vec<f64> = (0..3).map(|a| probs[s * 3 + a].ln() + step * q[s * 3 + a]).collect();
                let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
                let total: f64 = w.iter().sum();
                for a in 0..3 {
                    probs[s * 3 + a] = w[a] / total;
                }
            }
            let pi = TabularPolicy::from_rows_renormalized(4, 3, probs.clone());
            probs = pi.probs().to_vec();
            let v = policy_evaluate(&cmdp, &pi, cmdp.reward()).unwrap().scalar_value;
            assert_eq!(row.v_r.to_bits(), v.to_bits());
            assert!(row.lambda.is_empty());
        }
        assert_eq!(policy.probs(), &probs[..]);
    }

    #[test]
    fn multipliers_stay_nonnegative() {
        let (cmdp, _) = envs::cliff_world();
        let (_, rows) = npg_pd_baseline(&cmdp, 200, 1.0, 5.0).unwrap();
        assert!(rows.iter().all(|r| r.lambda.iter().all(|&l| l >= 0.0)));
        assert!(rows.iter().any(|r| r.lambda[0] > 0.0));
    }
}
