//! Inexact augmented-Lagrangian method for `min f(x)` subject to `Ax = b`, `x ∈ X`, with `X`
//! compact and convex, plus the constants needed to check its last-iterate rates.
//!
//! The augmented Lagrangian is `f(x) + ⟨λ, Ax − b⟩ + (β/2)‖Ax − b‖²` and the dual step is
//! `λ ← λ + (β/2)(Ax − b)`. Multipliers here attach to equalities, so when a CMDP occupancy
//! problem is written as a minimisation the multiplier of `V_c ≥ b` appears with flipped sign.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Slack allowed in the sufficient-decrease test, relative to `1 + |φ(y)|`. It is added to the
/// certificate, so the certified gap stays an upper bound in floating point.
const DESCENT_SLACK: f64 = 4.0 * f64::EPSILON;
pub const DEFAULT_MAX_INNER_ITERS: usize = 200_000;
/// Fixed noise multiplier in the dual-gap recursion.
pub const OMEGA: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ConvexError {
    #[error("{what} has length {found}, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(&'static str),
    #[error("subsolver stopped after {iterations} iterations with certified gap {best_gap:e}")]
    SubsolveCap { iterations: usize, best_gap: f64 },
    #[error("objective or gradient is not finite")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, ConvexError>;

type Objective = Box<dyn Fn(&DVector<f64>) -> (f64, DVector<f64>) + Send + Sync>;
type Projector = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Convex objective, linear equalities and a projector onto the feasible set.
pub struct ConvexProblem {
    dim: usize,
    objective: Objective,
    a: DMatrix<f64>,
    b: DVector<f64>,
    projector: Projector,
    diameter: f64,
    /// Initial smoothness estimate for `f`; backtracking raises it when it is too small.
    smoothness: f64,
    max_inner_iters: usize,
}

impl fmt::Debug for ConvexProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexProblem")
            .field("dim", &self.dim)
            .field("n_constraints", &self.a.nrows())
            .field("diameter", &self.diameter)
            .field("smoothness", &self.smoothness)
            .finish_non_exhaustive()
    }
}

impl ConvexProblem {
    pub fn new(
        dim: usize,
        objective: impl Fn(&DVector<f64>) -> (f64, DVector<f64>) + Send + Sync + 'static,
        a: DMatrix<f64>,
        b: DVector<f64>,
        projector: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        diameter: f64,
    ) -> Result<Self> {
        if a.ncols() != dim {
            return Err(ConvexError::Shape {
                what: "constraint matrix columns",
                expected: dim,
                found: a.ncols(),
            });
        }
        if b.len() != a.nrows() {
            return Err(ConvexError::Shape {
                what: "right-hand side",
                expected: a.nrows(),
                found: b.len(),
            });
        }
        if !(diameter.is_finite() && diameter >= 0.0) {
            return Err(ConvexError::Parameter("diameter must be finite and nonnegative"));
        }
        Ok(Self {
            dim,
            objective: Box::new(objective),
            a,
            b,
            projector: Box::new(projector),
            diameter,
            smoothness: 1.0,
            max_inner_iters: DEFAULT_MAX_INNER_ITERS,
        })
    }

    /// `½xᵀQx + cᵀx` over the box `[lo, hi]`. `Q` must be symmetric positive semidefinite.
    pub fn box_quadratic(
        q: DMatrix<f64>,
        c: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        lo: DVector<f64>,
        hi: DVector<f64>,
    ) -> Result<Self> {
        let n = c.len();
        if q.nrows() != n || q.ncols() != n {
            return Err(ConvexError::Shape {
                what: "quadratic term",
                expected: n,
                found: q.nrows().max(q.ncols()),
            });
        }
        for (what, v) in [("lower bounds", &lo), ("upper bounds", &hi)] {
            if v.len() != n {
                return Err(ConvexError::Shape {
                    what,
                    expected: n,
                    found: v.len(),
                });
            }
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
            return Err(ConvexError::Parameter("box lower bound exceeds upper bound"));
        }
        let smoothness = q.clone().symmetric_eigenvalues().max().max(0.0);
        let diameter = (&hi - &lo).norm();
        let objective = move |x: &DVector<f64>| {
            let qx = &q * x;
            (0.5 * x.dot(&qx) + c.dot(x), qx + &c)
        };
        let projector = move |x: &DVector<f64>| project_box(x, &lo, &hi);
        Ok(Self::new(n, objective, a, b, projector, diameter)?.with_smoothness(smoothness))
    }

    pub fn with_smoothness(mut self, smoothness: f64) -> Self {
        self.smoothness = smoothness.max(0.0);
        self
    }

    pub fn with_max_inner_iters(mut self, iters: usize) -> Self {
        self.max_inner_iters = iters;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn objective(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.objective)(x)
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        (self.objective)(x).0
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.projector)(x)
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x - &self.b
    }

    /// `f(x) + ⟨λ, Ax − b⟩ + (β/2)‖Ax − b‖²`.
    pub fn al_value(&self, x: &DVector<f64>, lambda: &DVector<f64>, beta: f64) -> f64 {
        let r = self.residual(x);
        self.value(x) + lambda.dot(&r) + 0.5 * beta * r.norm_squared()
    }

    fn al_value_and_grad(&self, x: &DVector<f64>, lambda: &DVector<f64>, beta: f64) -> (f64, DVector<f64>) {
        let (fx, gx) = (self.objective)(x);
        let r = self.residual(x);
        let value = fx + lambda.dot(&r) + 0.5 * beta * r.norm_squared();
        let grad = gx + self.a.tr_mul(&(lambda + beta * &r));
        (value, grad)
    }

    /// Largest `‖P(P(x)) − P(x)‖` over the sample points; zero for an exact projector.
    pub fn projector_drift(&self, points: &[DVector<f64>]) -> f64 {
        points
            .iter()
            .map(|x| {
                let p = self.project(x);
                (self.project(&p) - p).norm()
            })
            .fold(0.0, f64::max)
    }

    /// Largest `f((x+y)/2) − (f(x)+f(y))/2` over projected sample pairs; nonpositive when `f`
    /// is midpoint convex on the samples.
    pub fn midpoint_convexity_excess(&self, pairs: &[(DVector<f64>, DVector<f64>)]) -> f64 {
        pairs
            .iter()
            .map(|(x, y)| {
                let (x, y) = (self.project(x), self.project(y));
                let mid = (&x + &y) * 0.5;
                self.value(&mid) - 0.5 * (self.value(&x) + self.value(&y))
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn project_box(x: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len(), x.iter().zip(lo.iter().zip(hi.iter())).map(|(v, (l, h))| v.clamp(*l, *h)))
}

#[derive(Clone, Debug)]
pub struct Subsolve {
    pub x: DVector<f64>,
    /// Certified upper bound on `L^β(x, λ) − min_X L^β(·, λ)`.
    pub gap_bound: f64,
    pub al_value: f64,
    pub iterations: usize,
}

/// Minimises the augmented Lagrangian in `x` over `X` to a certified gap of at most `eps`.
///
/// Accelerated projected gradient with backtracking and adaptive restart. At each step the
/// gradient mapping `G = L(y − x⁺)` certifies `φ(x⁺) − φ* ≤ ‖G‖·diam(X)` because `y, x* ∈ X`
/// and the sufficient-decrease test held at `x⁺`.
pub fn al_subsolve(
    problem: &ConvexProblem,
    lambda: &DVector<f64>,
    beta: f64,
    eps: f64,
    warm: &DVector<f64>,
) -> Result<Subsolve> {
    if !(eps > 0.0) {
        return Err(ConvexError::Parameter("subproblem tolerance must be positive"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(ConvexError::Parameter("penalty must be positive and finite"));
    }
    if lambda.len() != problem.n_constraints() {
        return Err(ConvexError::Shape {
            what: "multiplier",
            expected: problem.n_constraints(),
            found: lambda.len(),
        });
    }
    if warm.len() != problem.dim {
        return Err(ConvexError::Shape {
            what: "warm start",
            expected: problem.dim,
            found: warm.len(),
        });
    }
    let gram_norm = problem.a.tr_mul(&problem.a).symmetric_eigenvalues().max().max(0.0);
    let mut lip = (problem.smoothness + beta * gram_norm).max(1e-12);
    let mut x_prev = problem.project(warm);
    let mut y = x_prev.clone();
    let mut momentum: f64 = 1.0;
    let mut best_gap = f64::INFINITY;
    for k in 1..=problem.max_inner_iters {
        let (phi_y, grad_y) = problem.al_value_and_grad(&y, lambda, beta);
        if !phi_y.is_finite() || grad_y.iter().any(|g| !g.is_finite()) {
            return Err(ConvexError::NonFinite);
        }
        let slack = DESCENT_SLACK * (1.0 + phi_y.abs());
        let (x_next, phi_next) = loop {
            let candidate = problem.project(&(&y - &grad_y / lip));
            let phi = problem.al_value(&candidate, lambda, beta);
            let step = &candidate - &y;
            if phi <= phi_y + grad_y.dot(&step) + 0.5 * lip * step.norm_squared() + slack {
                break (candidate, phi);
            }
            lip *= 2.0;
            if !lip.is_finite() {
                return Err(ConvexError::NonFinite);
            }
        };
        let mapping_norm = lip * (&y - &x_next).norm();
        let gap = mapping_norm * problem.diameter + slack;
        best_gap = best_gap.min(gap);
        if gap <= eps {
            return Ok(Subsolve {
                x: x_next,
                gap_bound: gap,
                al_value: phi_next,
                iterations: k,
            });
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        if (&y - &x_next).dot(&(&x_next - &x_prev)) > 0.0 {
            // Momentum points uphill: restart from the new iterate.
            momentum = 1.0;
            y = x_next.clone();
        } else {
            y = &x_next + (&x_next - &x_prev) * ((momentum - 1.0) / next_momentum);
            momentum = next_momentum;
        }
        x_prev = x_next;
    }
    Err(ConvexError::SubsolveCap {
        iterations: problem.max_inner_iters,
        best_gap,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexTraceRow {
    pub iter: usize,
    pub eps: f64,
    /// `λ_t`, the multiplier used by this subsolve.
    pub lambda: Vec<f64>,
    /// `x_{t+1}`.
    pub x: Vec<f64>,
    pub objective: f64,
    pub residual_norm: f64,
    /// `L^β(x_{t+1}, λ_t)`, which lies in `[d(λ_t), d(λ_t) + ε_t]`.
    pub al_value: f64,
    pub gap_bound: f64,
    pub inner_iters: usize,
    pub cum_iters: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvexTrace {
    pub rows: Vec<ConvexTraceRow>,
}

impl ConvexTrace {
    pub fn to_csv_string(&self) -> String {
        let m = self.rows.first().map_or(0, |r| r.lambda.len());
        let mut header = vec!["iter".to_string(), "eps_t".to_string()];
        header.extend((0..m).map(|i| format!("lambda_{i}")));
        header.extend(
            ["objective", "residual_norm", "al_value", "gap_bound", "inner_iters", "cum_iters"].map(String::from),
        );
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![r.iter.to_string(), r.eps.to_string()];
            fields.extend(r.lambda.iter().map(f64::to_string));
            fields.extend([
                r.objective.to_string(),
                r.residual_norm.to_string(),
                r.al_value.to_string(),
                r.gap_bound.to_string(),
                r.inner_iters.to_string(),
                r.cum_iters.to_string(),
            ]);
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ConvexAlmRun {
    /// `x_{T+1}`.
    pub x: DVector<f64>,
    /// `λ_{T+1}`.
    pub lambda: DVector<f64>,
    pub trace: ConvexTrace,
}

/// Runs `outer_iters` ALM steps from `λ₁ = 0` with subproblem tolerance `ε_t = σ/t²`.
/// Each subsolve is warm-started from the previous iterate; the first starts at `Proj_X(0)`.
pub fn run_convex_alm(problem: &ConvexProblem, outer_iters: usize, beta: f64, sigma: f64) -> Result<ConvexAlmRun> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ConvexError::Parameter("tolerance scale must be positive and finite"));
    }
    let mut lambda = DVector::zeros(problem.n_constraints());
    let mut x = problem.project(&DVector::zeros(problem.dim));
    let mut rows = Vec::with_capacity(outer_iters);
    let mut cum_iters = 0;
    for t in 1..=outer_iters {
        let eps = sigma / (t * t) as f64;
        let sub = al_subsolve(problem, &lambda, beta, eps, &x)?;
        let residual = problem.residual(&sub.x);
        cum_iters += sub.iterations;
        rows.push(ConvexTraceRow {
            iter: t,
            eps,
            lambda: lambda.iter().copied().collect(),
            x: sub.x.iter().copied().collect(),
            objective: problem.value(&sub.x),
            residual_norm: residual.norm(),
            al_value: sub.al_value,
            gap_bound: sub.gap_bound,
            inner_iters: sub.iterations,
            cum_iters,
        });
        lambda += residual * (0.5 * beta);
        x = sub.x;
    }
    Ok(ConvexAlmRun {
        x,
        lambda,
        trace: ConvexTrace { rows },
    })
}

/// `C` for the recursion `δ_{t+1} ≤ δ_t − κδ_t² + ωσ/t²`, which then satisfies `δ_t ≤ C/t`.
pub fn delta_recursion_bound(delta_1: f64, kappa: f64, omega: f64, sigma: f64) -> f64 {
    let noise = omega * sigma * kappa;
    (4.0 / kappa) * (1.0 + (2.0 * noise * (noise + 1.0)).sqrt()) + 4.0 * delta_1.max(4.0 / kappa)
}

/// The recursion taken with equality for `steps` terms, starting at `δ₁`.
pub fn recursion_worst_case(delta_1: f64, kappa: f64, omega: f64, sigma: f64, steps: usize) -> Vec<f64> {
    let mut seq = Vec::with_capacity(steps);
    let mut delta = delta_1;
    for t in 1..=steps {
        seq.push(delta);
        delta = delta - kappa * delta * delta + omega * sigma / (t * t) as f64;
    }
    seq
}

/// First 1-based index `t` with `seq[t-1] > C/t`, if any.
pub fn first_rate_violation(seq: &[f64], c: f64) -> Option<usize> {
    seq.iter()
        .enumerate()
        .find(|(i, d)| **d > c / (i + 1) as f64)
        .map(|(i, _)| i + 1)
}

/// Constants of the last-iterate rates for the ALM run from `λ₁ = 0` with `ε_t = σ/t²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateConstants {
    pub lambda_star_norm: f64,
    /// Uniform bound on `‖λ_t − λ*‖`.
    pub b: f64,
    pub kappa: f64,
    pub omega: f64,
    pub c: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl RateConstants {
    /// `initial_dual_gap` is `d(λ*) − d(0)`.
    pub fn new(lambda_star_norm: f64, initial_dual_gap: f64, beta: f64, sigma: f64) -> Result<Self> {
        if !(beta > 0.0 && sigma > 0.0) {
            return Err(ConvexError::Parameter("penalty and tolerance scale must be positive"));
        }
        let b = lambda_star_norm + (sigma * beta * PI * PI / 3.0).sqrt();
        let kappa = beta / (8.0 * b * b);
        let c = delta_recursion_bound(initial_dual_gap, kappa, OMEGA, sigma);
        Ok(Self {
            lambda_star_norm,
            b,
            kappa,
            omega: OMEGA,
            c,
            sigma,
            beta,
        })
    }

    /// Bound on `d(λ*) − d(λ_t)`.
    pub fn dual_gap_bound(&self, t: usize) -> f64 {
        self.c / t as f64
    }

    /// Bound on `‖Ax_{t+1} − b‖`.
    pub fn residual_bound(&self, t: usize) -> f64 {
        let t = t as f64;
        2.0 / self.beta.sqrt() * ((self.c / t).sqrt() + (2.0 * self.sigma).sqrt() / t)
    }

    /// Bound on `f(x_{t+1}) − f(x*)`.
    pub fn objective_bound(&self, t: usize) -> f64 {
        (self.b + self.lambda_star_norm) * self.residual_bound(t) + self.sigma / (t * t) as f64
    }
}

/// Bound on `‖λ_t − λ*‖` given `‖λ₁ − λ*‖` and `Σ_{i<t} ε_i`.
pub fn dual_iterate_bound(initial_distance: f64, beta: f64, eps_sum: f64) -> f64 {
    (initial_distance * initial_distance + 2.0 * beta * eps_sum).sqrt()
}

/// Largest `‖∇d(λ) − ∇d(λ')‖ / ‖λ − λ'‖` over the pairs, with `∇d(λ) = Ax(λ) − b` from subsolves
/// at tolerance `eps`. Coincident pairs contribute 0.
pub fn dual_smoothness_probe(
    problem: &ConvexProblem,
    beta: f64,
    pairs: &[(DVector<f64>, DVector<f64>)],
    eps: f64,
) -> Result<f64> {
    let start = problem.project(&DVector::zeros(problem.dim));
    let grad = |lambda: &DVector<f64>| -> Result<DVector<f64>> {
        let sub = al_subsolve(problem, lambda, beta, eps, &start)?;
        Ok(problem.residual(&sub.x))
    };
    let mut worst: f64 = 0.0;
    for (l1, l2) in pairs {
        let dist = (l1 - l2).norm();
        if dist == 0.0 {
            continue;
        }
        worst = worst.max((grad(l1)? - grad(l2)?).norm() / dist);
    }
    Ok(worst)
}
