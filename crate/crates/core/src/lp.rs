//! Occupancy-measure linear program, a dense revised simplex solver, and unconstrained MDP solves
//! used for ground truth.
//!
//! Sign convention: `lambda_star[i] ≥ 0` is the multiplier of `⟨μ, c_i⟩ ≥ b_i` in the
//! maximization problem, i.e. the negated simplex dual of the slack row `⟨μ, c_i⟩ − z_i = b_i`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cmdp::{self, CmdpError, OccupancyMeasure, PolicyEvaluator, TabularCmdp, TabularPolicy};

const PIVOT_TOL: f64 = 1e-9;
const REDUCED_COST_TOL: f64 = 1e-10;
const FEASIBILITY_TOL: f64 = 1e-9;
const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("constraint {constraint} cannot be met by any policy")]
    Infeasible { constraint: usize },
    #[error("equality row {row} cannot be satisfied")]
    InfeasibleRow { row: usize },
    #[error("objective is unbounded along column {column}")]
    Unbounded { column: usize },
    #[error("simplex exceeded {0} pivots")]
    PivotLimit(usize),
    #[error("basis matrix became singular")]
    SingularBasis,
    #[error("Slater condition fails for constraint {constraint}: margin {margin}")]
    Slater { constraint: usize, margin: f64 },
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
}

pub type Result<T> = std::result::Result<T, LpError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    /// Bellman flow row of a state.
    Flow(usize),
    /// Slack row `⟨μ, c_i⟩ − z_i = b_i`.
    Constraint(usize),
}

/// `max ⟨objective, x⟩` subject to `matrix x = rhs`, `x ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardLp {
    pub objective: Vec<f64>,
    pub matrix: DMatrix<f64>,
    pub rhs: Vec<f64>,
    pub row_kinds: Vec<RowKind>,
    pub var_names: Vec<String>,
}

impl StandardLp {
    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rhs.len()
    }

    /// Plain-text listing: one line per variable, then one line per row with its nonzeros.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "maximize  (all variables >= 0)");
        let _ = writeln!(out, "variables {}", self.n_vars());
        for (name, c) in self.var_names.iter().zip(&self.objective) {
            let _ = writeln!(out, "  {name} {c}");
        }
        let _ = writeln!(out, "rows {}", self.n_rows());
        for (r, kind) in self.row_kinds.iter().enumerate() {
            let label = match kind {
                RowKind::Flow(s) => format!("flow_{s}"),
                RowKind::Constraint(i) => format!("constraint_{i}"),
            };
            let terms: Vec<String> = (0..self.n_vars())
                .filter(|&j| self.matrix[(r, j)] != 0.0)
                .map(|j| format!("{}*{}", self.matrix[(r, j)], self.var_names[j]))
                .collect();
            let _ = writeln!(out, "  {label}: {} = {}", terms.join(" + "), self.rhs[r]);
        }
        out
    }
}

/// Variables `μ(s,a)` in row-major order followed by the slacks `z_i`.
pub fn build_occupancy_lp(cmdp: &TabularCmdp) -> StandardLp {
    let (ns, na, m) = (cmdp.n_states(), cmdp.n_actions(), cmdp.n_constraints());
    let n_mu = ns * na;
    let mut matrix = DMatrix::zeros(ns + m, n_mu + m);
    for s in 0..ns {
        for a in 0..na {
            let col = s * na + a;
            matrix[(s, col)] += 1.0;
            for (s2, p) in cmdp.transition_row(s, a).iter().enumerate() {
                matrix[(s2, col)] -= cmdp.gamma() * p;
            }
        }
    }
    for (i, c) in cmdp.constraints().iter().enumerate() {
        for (col, v) in c.values.iter().enumerate() {
            matrix[(ns + i, col)] = *v;
        }
        matrix[(ns + i, n_mu + i)] = -1.0;
    }
    let mut objective = cmdp.reward().to_vec();
    objective.resize(n_mu + m, 0.0);
    let mut rhs = cmdp.rho().to_vec();
    rhs.extend(cmdp.thresholds());
    let row_kinds = (0..ns).map(RowKind::Flow).chain((0..m).map(RowKind::Constraint)).collect();
    let var_names = (0..ns)
        .flat_map(|s| (0..na).map(move |a| format!("mu_{s}_{a}")))
        .chain((0..m).map(|i| format!("z_{i}")))
        .collect();
    StandardLp {
        objective,
        matrix,
        rhs,
        row_kinds,
        var_names,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Equality-row duals `y` with `objective = ⟨y, rhs⟩` at optimality.
    pub duals: Vec<f64>,
    pub dual_objective: f64,
    /// `max_j x_j |c_j − yᵀA_j|`.
    pub complementary_slackness: f64,
    /// `max_j max(c_j − yᵀA_j, 0)`; zero for an optimal dual.
    pub dual_infeasibility: f64,
}

struct Tableau<'a> {
    matrix: &'a DMatrix<f64>,
    rhs: DVector<f64>,
    cost: Vec<f64>,
    /// Columns allowed to enter the basis.
    enterable: Vec<bool>,
    basis: Vec<usize>,
}

struct BasisSolve {
    x_basic: DVector<f64>,
    y: DVector<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Tableau<'_> {
    fn factor(&self) -> Result<BasisSolve> {
        let rows = self.rhs.len();
        let b = DMatrix::from_fn(rows, rows, |i, k| self.matrix[(i, self.basis[k])]);
        let lu = b.clone().lu();
        let x_basic = lu.solve(&self.rhs).ok_or(LpError::SingularBasis)?;
        let c_b = DVector::from_iterator(rows, self.basis.iter().map(|&j| self.cost[j]));
        let y = b.transpose().lu().solve(&c_b).ok_or(LpError::SingularBasis)?;
        Ok(BasisSolve { x_basic, y, lu })
    }

    fn reduced_cost(&self, y: &DVector<f64>, j: usize) -> f64 {
        self.cost[j] - self.matrix.column(j).dot(y)
    }

    /// Bland's rule: lowest-index improving column enters, ties in the ratio test go to the
    /// lowest-index basic variable.
    fn optimize(&mut self) -> Result<BasisSolve> {
        for _ in 0..MAX_PIVOTS {
            let solve = self.factor()?;
            let in_basis = |j: usize| self.basis.contains(&j);
            let entering = (0..self.matrix.ncols())
                .find(|&j| self.enterable[j] && !in_basis(j) && self.reduced_cost(&solve.y, j) > REDUCED_COST_TOL);
            let Some(j) = entering else {
                return Ok(solve);
            };
            let direction = solve
                .lu
                .solve(&self.matrix.column(j).into_owned())
                .ok_or(LpError::SingularBasis)?;
            let mut leave: Option<(f64, usize, usize)> = None;
            for (pos, (&w, &xb)) in direction.iter().zip(solve.x_basic.iter()).enumerate() {
                if w <= PIVOT_TOL {
                    continue;
                }
                let ratio = xb.max(0.0) / w;
                let better = match leave {
                    None => true,
                    Some((best, _, var)) => ratio < best - 1e-14 || (ratio <= best + 1e-14 && self.basis[pos] < var),
                };
                if better {
                    leave = Some((ratio, pos, self.basis[pos]));
                }
            }
            let Some((_, pos, _)) = leave else {
                return Err(LpError::Unbounded { column: j });
            };
            self.basis[pos] = j;
        }
        Err(LpError::PivotLimit(MAX_PIVOTS))
    }
}

/// Two-phase revised simplex. Rows whose artificial variable cannot be driven out of the basis are
/// linearly dependent on the others and are dropped; their dual is reported as zero.
pub fn solve_lp(lp: &StandardLp) -> Result<LpSolution> {
    let (rows, n) = (lp.n_rows(), lp.n_vars());
    // Row-normalize signs so every rhs is nonnegative; artificials then form a feasible basis.
    let signs: Vec<f64> = lp.rhs.iter().map(|&b| if b < 0.0 { -1.0 } else { 1.0 }).collect();
    let mut extended = DMatrix::zeros(rows, n + rows);
    for r in 0..rows {
        for j in 0..n {
            extended[(r, j)] = signs[r] * lp.matrix[(r, j)];
        }
        extended[(r, n + r)] = 1.0;
    }
    let rhs = DVector::from_iterator(rows, lp.rhs.iter().zip(&signs).map(|(b, s)| b * s));

    let mut phase_one_cost = vec![0.0; n + rows];
    phase_one_cost[n..].iter_mut().for_each(|c| *c = -1.0);
    let mut tableau = Tableau {
        matrix: &extended,
        rhs: rhs.clone(),
        cost: phase_one_cost,
        enterable: vec![true; n + rows],
        basis: (n..n + rows).collect(),
    };
    let phase_one = tableau.optimize()?;
    if let Some((pos, _)) = phase_one
        .x_basic
        .iter()
        .enumerate()
        .filter(|&(pos, &v)| tableau.basis[pos] >= n && v > FEASIBILITY_TOL)
        .max_by(|a, b| a.1.total_cmp(b.1))
    {
        let row = tableau.basis[pos] - n;
        return Err(match lp.row_kinds.get(row) {
            Some(RowKind::Constraint(i)) => LpError::Infeasible { constraint: *i },
            _ => LpError::InfeasibleRow { row },
        });
    }

    // Drive zero-level artificials out; a row where that is impossible is redundant.
    let mut basis = tableau.basis.clone();
    let mut kept_rows: Vec<usize> = (0..rows).collect();
    let mut pos = 0;
    while pos < basis.len() {
        if basis[pos] < n {
            pos += 1;
            continue;
        }
        let sub = DMatrix::from_fn(kept_rows.len(), basis.len(), |i, k| extended[(kept_rows[i], basis[k])]);
        let lu = sub.lu();
        let pivot_col = (0..n).filter(|j| !basis.contains(j)).find(|&j| {
            let col = DVector::from_iterator(kept_rows.len(), kept_rows.iter().map(|&r| extended[(r, j)]));
            lu.solve(&col).is_some_and(|w| w[pos].abs() > PIVOT_TOL)
        });
        match pivot_col {
            Some(j) => {
                basis[pos] = j;
                pos += 1;
            }
            None => {
                let artificial_row = basis[pos] - n;
                let drop_at = kept_rows.iter().position(|&r| r == artificial_row).expect("artificial row is kept");
                kept_rows.remove(drop_at);
                basis.remove(pos);
            }
        }
    }

    let reduced = DMatrix::from_fn(kept_rows.len(), n, |i, j| extended[(kept_rows[i], j)]);
    let mut tableau = Tableau {
        matrix: &reduced,
        rhs: DVector::from_iterator(kept_rows.len(), kept_rows.iter().map(|&r| rhs[r])),
        cost: lp.objective.clone(),
        enterable: vec![true; n],
        basis,
    };
    let solve = tableau.optimize()?;

    let mut x = vec![0.0; n];
    for (pos, &j) in tableau.basis.iter().enumerate() {
        x[j] = solve.x_basic[pos].max(0.0);
    }
    let mut duals = vec![0.0; rows];
    for (i, &r) in kept_rows.iter().enumerate() {
        duals[r] = signs[r] * solve.y[i];
    }
    let objective = cmdp::dot(&lp.objective, &x);
    let dual_objective = cmdp::dot(&duals, &lp.rhs);
    let y_full = DVector::from_column_slice(&duals);
    let reduced_costs: Vec<f64> = (0..n).map(|j| lp.objective[j] - lp.matrix.column(j).dot(&y_full)).collect();
    let complementary_slackness = x
        .iter()
        .zip(&reduced_costs)
        .map(|(xj, d)| xj * d.abs())
        .fold(0.0, f64::max);
    let dual_infeasibility = reduced_costs.iter().map(|d| d.max(0.0)).fold(0.0, f64::max);
    Ok(LpSolution {
        x,
        objective,
        duals,
        dual_objective,
        complementary_slackness,
        dual_infeasibility,
    })
}

/// Ground truth for one CMDP.
#[derive(Clone, Debug)]
pub struct OccupancyLpSolution {
    pub mu: OccupancyMeasure,
    pub slack: Vec<f64>,
    pub v_star: f64,
    pub lambda_star: Vec<f64>,
    pub flow_duals: Vec<f64>,
    pub duality_gap: f64,
    pub complementary_slackness: f64,
    pub dual_infeasibility: f64,
}

impl OccupancyLpSolution {
    pub fn policy(&self) -> TabularPolicy {
        cmdp::policy_from_occupancy(&self.mu)
    }
}

pub fn solve_occupancy_lp(cmdp: &TabularCmdp) -> Result<OccupancyLpSolution> {
    let lp = build_occupancy_lp(cmdp);
    let sol = solve_lp(&lp)?;
    let (ns, na) = (cmdp.n_states(), cmdp.n_actions());
    let mu = OccupancyMeasure::new(ns, na, cmdp.gamma(), sol.x[..ns * na].to_vec())?;
    Ok(OccupancyLpSolution {
        mu,
        slack: sol.x[ns * na..].to_vec(),
        v_star: sol.objective,
        lambda_star: sol.duals[ns..].iter().map(|y| -y).collect(),
        flow_duals: sol.duals[..ns].to_vec(),
        duality_gap: (sol.objective - sol.dual_objective).abs(),
        complementary_slackness: sol.complementary_slackness,
        dual_infeasibility: sol.dual_infeasibility,
    })
}

/// Value iteration until successive iterates differ by at most `tol` in sup norm.
pub fn value_iteration(cmdp: &TabularCmdp, reward: &[f64], tol: f64) -> Vec<f64> {
    let mut v = vec![0.0; cmdp.n_states()];
    loop {
        let q = cmdp.q_from_v(reward, &v);
        let next: Vec<f64> = q
            .chunks(cmdp.n_actions())
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta <= tol {
            return v;
        }
    }
}

fn greedy_policy(cmdp: &TabularCmdp, q: &[f64]) -> TabularPolicy {
    let na = cmdp.n_actions();
    let probs = q
        .chunks(na)
        .flat_map(|row| {
            let best = (0..na).fold(0, |b, a| if row[a] > row[b] { a } else { b });
            (0..na).map(move |a| if a == best { 1.0 } else { 0.0 })
        })
        .collect();
    TabularPolicy::from_rows_renormalized(cmdp.n_states(), na, probs)
}

/// `max_π V^π_u(ρ)`: value iteration to 1e-10, then exact evaluation of the greedy policy,
/// polished by policy-iteration sweeps until the greedy policy is stable.
pub fn optimal_value(cmdp: &TabularCmdp, reward: &[f64]) -> Result<(f64, TabularPolicy)> {
    let v = value_iteration(cmdp, reward, 1e-10);
    let mut policy = greedy_policy(cmdp, &cmdp.q_from_v(reward, &v));
    for _ in 0..100 {
        let vp = PolicyEvaluator::new(cmdp, &policy)?.evaluate(reward)?;
        let improved = greedy_policy(cmdp, &vp.q);
        let gain = vp
            .q
            .chunks(cmdp.n_actions())
            .zip(&vp.v)
            .map(|(row, v)| row.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v)
            .fold(0.0, f64::max);
        if gain <= 1e-13 {
            return Ok((vp.scalar_value, policy));
        }
        policy = improved;
    }
    let value = PolicyEvaluator::new(cmdp, &policy)?.scalar_value(reward)?;
    Ok((value, policy))
}

/// `max_π V_ci(ρ) − b_i`, with no sign requirement.
pub fn constraint_margin(cmdp: &TabularCmdp, i: usize) -> Result<f64> {
    let c = cmdp.constraint(i)?;
    Ok(optimal_value(cmdp, &c.values)?.0 - c.threshold)
}

/// Positive Slater margin `ζ_i = max_π V_ci(ρ) − b_i`.
pub fn slater_margin(cmdp: &TabularCmdp, i: usize) -> Result<f64> {
    let margin = constraint_margin(cmdp, i)?;
    if margin <= 0.0 {
        return Err(LpError::Slater { constraint: i, margin });
    }
    Ok(margin)
}

pub fn slater_margins(cmdp: &TabularCmdp) -> Result<Vec<f64>> {
    (0..cmdp.n_constraints()).map(|i| slater_margin(cmdp, i)).collect()
}

/// Bound on an optimal multiplier for rewards in `[0, 1]`: `1 / (ζ (1−γ))`.
pub fn multiplier_bound(zeta: f64, gamma: f64) -> f64 {
    1.0 / (zeta * (1.0 - gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmdp::testing::{random_cmdp, random_policy};
    use crate::cmdp::{Constraint, RawCmdp};

    fn bandit(gamma: f64, rewards: Vec<f64>, costs: Vec<f64>, b: f64) -> TabularCmdp {
        let a = rewards.len();
        TabularCmdp::new(RawCmdp {
            n_states: 1,
            n_actions: a,
            gamma,
            rho: vec![1.0],
            rewards,
            constraints: vec![Constraint { values: costs, threshold: b }],
            transition: vec![1.0; a],
            reward_bounds: Some([0.0, 1.0]),
        })
        .unwrap()
    }

    #[test]
    fn hand_kkt_bandit() {
        let m = bandit(0.0, vec![1.0, 0.0], vec![0.0, 1.0], 0.5);
        let sol = solve_occupancy_lp(&m).unwrap();
        assert!((sol.v_star - 0.5).abs() < 1e-12);
        assert!((sol.mu.values()[0] - 0.5).abs() < 1e-12);
        assert!((sol.mu.values()[1] - 0.5).abs() < 1e-12);
        // Trading one unit of constraint value costs one unit of reward.
        assert!((sol.lambda_star[0] - 1.0).abs() < 1e-12);
        assert!(sol.duality_gap < 1e-12);
    }

    #[test]
    fn unconstrained_matches_value_iteration() {
        for seed in 0..5 {
            let m = random_cmdp(seed, 5, 3, 0, 0.9);
            let sol = solve_occupancy_lp(&m).unwrap();
            let (v, _) = optimal_value(&m, m.reward()).unwrap();
            assert!((sol.v_star - v).abs() < 1e-8, "{} vs {v}", sol.v_star);
        }
    }

    #[test]
    fn optimal_measure_is_feasible_and_reproduces_value() {
        let mut solved = 0;
        for seed in 0..5 {
            let m = random_cmdp(seed, 4, 3, 2, 0.8);
            let sol = match solve_occupancy_lp(&m) {
                Ok(s) => s,
                Err(LpError::Infeasible { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            assert!(sol.mu.flow_residual(&m) < 1e-9);
            assert!(sol.duality_gap < 1e-8);
            assert!(sol.complementary_slackness < 1e-8);
            assert!(sol.lambda_star.iter().all(|&l| l >= -1e-10));
            let pi = sol.policy();
            let vp = crate::cmdp::policy_evaluate(&m, &pi, m.reward()).unwrap();
            assert!((vp.scalar_value - sol.v_star).abs() < 1e-8);
            for c in m.constraints() {
                let vc = crate::cmdp::policy_evaluate(&m, &pi, &c.values).unwrap().scalar_value;
                assert!(vc >= c.threshold - 1e-8);
            }
            solved += 1;
        }
        assert!(solved >= 3);
    }

    #[test]
    fn policy_measures_satisfy_flow_rows() {
        let m = random_cmdp(9, 4, 2, 1, 0.7);
        let lp = build_occupancy_lp(&m);
        let mu = crate::cmdp::occupancy_measure(&m, &random_policy(3, 4, 2)).unwrap();
        let x = DVector::from_iterator(lp.n_vars(), mu.values().iter().copied().chain([0.0]));
        let lhs = &lp.matrix * x;
        for s in 0..4 {
            assert!((lhs[s] - lp.rhs[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn infeasible_constraint_is_named() {
        let mut m = bandit(0.5, vec![1.0, 0.0], vec![0.0, 1.0], 0.5);
        m = m
            .with_constraints(vec![
                Constraint { values: vec![0.0, 1.0], threshold: 0.5 },
                Constraint { values: vec![0.5, 0.5], threshold: 3.0 },
            ])
            .unwrap();
        assert!(matches!(solve_occupancy_lp(&m), Err(LpError::Infeasible { constraint: 1 })));
    }

    #[test]
    fn dependent_rows_are_tolerated() {
        let mut lp = build_occupancy_lp(&random_cmdp(2, 3, 2, 1, 0.6));
        let extra = lp.matrix.row(0) + lp.matrix.row(1);
        let rhs = lp.rhs[0] + lp.rhs[1];
        lp.matrix = lp.matrix.clone().insert_row(lp.n_rows(), 0.0);
        let last = lp.n_rows();
        lp.matrix.set_row(last, &extra);
        lp.rhs.push(rhs);
        lp.row_kinds.push(RowKind::Flow(99));
        let reference = solve_occupancy_lp(&random_cmdp(2, 3, 2, 1, 0.6));
        let sol = solve_lp(&lp);
        match (sol, reference) {
            (Ok(s), Ok(r)) => assert!((s.objective - r.v_star).abs() < 1e-9),
            (Err(LpError::Infeasible { .. }), Err(LpError::Infeasible { .. })) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn slater_margin_cases() {
        let gamma = 0.6;
        let m = bandit(gamma, vec![0.3, 0.4], vec![1.0, 1.0], 0.0);
        assert!((slater_margin(&m, 0).unwrap() - 1.0 / (1.0 - gamma)).abs() < 1e-9);
        let shifted = m.with_threshold(0, 0.75).unwrap();
        let delta = constraint_margin(&m, 0).unwrap() - constraint_margin(&shifted, 0).unwrap();
        assert!((delta - 0.75).abs() < 1e-12);
        let blocked = m.with_threshold(0, 10.0).unwrap();
        assert!(matches!(slater_margin(&blocked, 0), Err(LpError::Slater { constraint: 0, .. })));
    }

    #[test]
    fn export_lists_every_row() {
        let lp = build_occupancy_lp(&random_cmdp(1, 2, 2, 1, 0.5));
        let text = lp.to_text();
        assert!(text.contains("flow_1:") && text.contains("constraint_0:") && text.contains("z_0"));
    }
}
