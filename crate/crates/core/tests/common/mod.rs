//! Shared instance generators for integration and acceptance tests.
#![allow(dead_code)]

use almcmdp::cmdp::{Constraint, RawCmdp, TabularCmdp, TabularPolicy};
use almcmdp::convex::ConvexProblem;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const QP_BOX: f64 = 2.0;

pub fn random_distribution(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

/// Rewards and costs in `[0, 1]`, thresholds `0.3/(1−γ)`, `ρ` bounded away from zero.
pub fn random_cmdp(seed: u64, s: usize, a: usize, m: usize, gamma: f64) -> TabularCmdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transition = (0..s * a).flat_map(|_| random_distribution(&mut rng, s, 0.0)).collect();
    let rewards = (0..s * a).map(|_| rng.random::<f64>()).collect();
    let constraints = (0..m)
        .map(|_| Constraint {
            values: (0..s * a).map(|_| rng.random::<f64>()).collect(),
            threshold: 0.3 / (1.0 - gamma),
        })
        .collect();
    TabularCmdp::new(RawCmdp {
        n_states: s,
        n_actions: a,
        gamma,
        rho: random_distribution(&mut rng, s, 0.05),
        rewards,
        constraints,
        transition,
        reward_bounds: Some([0.0, 1.0]),
    })
    .unwrap()
}

pub fn random_policy(seed: u64, s: usize, a: usize) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = (0..s).flat_map(|_| random_distribution(&mut rng, a, 0.01)).collect();
    TabularPolicy::from_rows_renormalized(s, a, probs)
}

/// A box-constrained QP whose primal-dual solution is planted, so `x*`, `λ*` and the optimal
/// value are exact.
pub struct PlantedQp {
    pub problem: ConvexProblem,
    pub x_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub f_star: f64,
}

/// `½xᵀQx + cᵀx` on `[−2, 2]ⁿ` with `Ax = b`. Past the first `m`, a quarter of the coordinates
/// of `x*` sit on each face in expectation. `c` is chosen so that `Qx* + c + Aᵀλ*` is a strictly
/// complementary normal-cone element at `x*`.
pub fn planted_qp(seed: u64, n: usize, m: usize) -> PlantedQp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let root = DMatrix::from_fn(n, n, |_, _| uniform(-1.0, 1.0));
    let q = root.tr_mul(&root) + DMatrix::identity(n, n) * 0.1;
    let a = DMatrix::from_fn(m, n, |_, _| uniform(-1.0, 1.0));
    let lambda_star = DVector::from_fn(m, |_, _| uniform(-2.0, 2.0));
    let mut x_star = DVector::zeros(n);
    let mut normal = DVector::zeros(n);
    for j in 0..n {
        let face = uniform(0.0, 1.0);
        let push = uniform(0.1, 1.0);
        if j < m {
            // At least m interior coordinates make λ* unique for generic A.
            x_star[j] = uniform(-1.5, 1.5);
        } else if face < 0.25 {
            x_star[j] = QP_BOX;
            normal[j] = -push;
        } else if face < 0.5 {
            x_star[j] = -QP_BOX;
            normal[j] = push;
        } else {
            x_star[j] = uniform(-1.5, 1.5);
        }
    }
    let c = -(&q * &x_star) - a.tr_mul(&lambda_star) + normal;
    let b = &a * &x_star;
    let f_star = 0.5 * x_star.dot(&(&q * &x_star)) + c.dot(&x_star);
    let problem = ConvexProblem::box_quadratic(
        q,
        c,
        a,
        b,
        DVector::from_element(n, -QP_BOX),
        DVector::from_element(n, QP_BOX),
    )
    .unwrap();
    PlantedQp {
        problem,
        x_star,
        lambda_star,
        f_star,
    }
}

/// Checks the three last-iterate rate bounds, the inexact-gradient bound and the dual-iterate
/// bound on one planted QP. Returns a description of every violated inequality.
pub fn rate_suite_failures(qp: &PlantedQp, outer_iters: usize, beta: f64, sigma: f64) -> Vec<String> {
    use almcmdp::convex::{al_subsolve, dual_iterate_bound, run_convex_alm, RateConstants};

    let p = &qp.problem;
    let zero = DVector::zeros(p.dim());
    let m = p.n_constraints();
    let reference_eps = 1e-12;
    // d(0) ≥ L(x̂, 0) − ε_ref, so this over-estimates d(λ*) − d(0) and C only grows.
    let d0 = al_subsolve(p, &DVector::zeros(m), beta, reference_eps, &zero).unwrap().al_value - reference_eps;
    let rc = RateConstants::new(qp.lambda_star.norm(), qp.f_star - d0, beta, sigma).unwrap();
    let run = run_convex_alm(p, outer_iters, beta, sigma).unwrap();
    let mut failures = Vec::new();
    let mut eps_sum = 0.0;
    for row in &run.trace.rows {
        let t = row.iter;
        let lambda = DVector::from_column_slice(&row.lambda);
        let x_next = DVector::from_column_slice(&row.x);
        let reference = al_subsolve(p, &lambda, beta, row.eps / 100.0, &x_next).unwrap();
        let d_lower = reference.al_value - row.eps / 100.0;
        let dual_gap = qp.f_star - d_lower;
        if dual_gap > rc.dual_gap_bound(t) {
            failures.push(format!("t={t}: dual gap {dual_gap:e} > {:e}", rc.dual_gap_bound(t)));
        }
        if row.residual_norm > rc.residual_bound(t) {
            failures.push(format!("t={t}: residual {:e} > {:e}", row.residual_norm, rc.residual_bound(t)));
        }
        let excess = row.objective - qp.f_star;
        if excess > rc.objective_bound(t) {
            failures.push(format!("t={t}: objective excess {excess:e} > {:e}", rc.objective_bound(t)));
        }
        let drift = (p.matrix() * (&reference.x - &x_next)).norm_squared();
        if drift > 2.0 * row.eps / beta + 1e-8 {
            failures.push(format!("t={t}: inexact gradient drift {drift:e} > {:e}", 2.0 * row.eps / beta));
        }
        let dist = (&lambda - &qp.lambda_star).norm();
        let bound = dual_iterate_bound(qp.lambda_star.norm(), beta, eps_sum) + 1e-6;
        if dist > bound {
            failures.push(format!("t={t}: dual distance {dist:e} > {bound:e}"));
        }
        eps_sum += row.eps;
    }
    failures
}
