//! Grid-world benchmark CMDPs with their layouts.
//!
//! States are grid cells in row-major order, `s = row * cols + col`; row 0 is the top row.

use serde::{Deserialize, Serialize};

use crate::cmdp::{Constraint, RawCmdp, TabularCmdp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cell {
    Open,
    Start,
    Goal,
    Cliff,
    Treasure,
    Landmine,
}

impl Cell {
    fn glyph(self) -> char {
        match self {
            Cell::Open => '.',
            Cell::Start => 'S',
            Cell::Goal => 'G',
            Cell::Cliff => 'C',
            Cell::Treasure => 'T',
            Cell::Landmine => 'X',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Cell>,
    pub action_names: Vec<String>,
}

impl GridGeometry {
    pub fn n_states(&self) -> usize {
        self.rows * self.cols
    }

    pub fn position(&self, s: usize) -> (usize, usize) {
        (s / self.cols, s % self.cols)
    }

    pub fn state(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[self.state(row, col)]
    }

    pub fn states_of(&self, kind: Cell) -> Vec<usize> {
        (0..self.n_states()).filter(|&s| self.cells[s] == kind).collect()
    }

    /// One text row per grid row plus a legend line.
    pub fn ascii_map(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            out.extend((0..self.cols).map(|c| self.cell(r, c).glyph()));
            out.push('\n');
        }
        out.push_str("legend: S start, G goal, C cliff, T treasure, X landmine, . open\n");
        out.push_str(&format!("actions: {}\n", self.action_names.join(", ")));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    CliffWorld,
    DeepSeaTreasure,
}

impl EnvId {
    pub const ALL: [EnvId; 2] = [EnvId::CliffWorld, EnvId::DeepSeaTreasure];

    pub fn name(self) -> &'static str {
        match self {
            EnvId::CliffWorld => "cliff-world",
            EnvId::DeepSeaTreasure => "deep-sea-treasure",
        }
    }

    pub fn build(self) -> (TabularCmdp, GridGeometry) {
        match self {
            EnvId::CliffWorld => cliff_world(),
            EnvId::DeepSeaTreasure => deep_sea_treasure(),
        }
    }
}

impl std::str::FromStr for EnvId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown environment {s:?}; expected cliff-world or deep-sea-treasure"))
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const CLIFF_ROWS: usize = 3;
pub const CLIFF_COLS: usize = 7;
/// Probability that a move is replaced by a uniformly random direction.
pub const CLIFF_SLIP: f64 = 0.35;
pub const CLIFF_THRESHOLD: f64 = -0.17;

pub const DST_SIZE: usize = 5;
pub const DST_RIGHT_REWARD: f64 = -0.02;
pub const DST_MINE_COST: f64 = -2.0;
pub const DST_THRESHOLD: f64 = -0.1;
pub const DST_MINES: [(usize, usize); 2] = [(2, 2), (3, 3)];

pub const DISCOUNT: f64 = 0.9;

struct TableBuilder {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    cost: Vec<f64>,
}

impl TableBuilder {
    fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            transition: vec![0.0; n_states * n_actions * n_states],
            reward: vec![0.0; n_states * n_actions],
            cost: vec![0.0; n_states * n_actions],
        }
    }

    /// Adds an outcome of `(s, a)` with probability `p`, landing in `next`.
    fn outcome(&mut self, s: usize, a: usize, p: f64, next: usize, reward: f64, cost: f64) {
        let sa = s * self.n_actions + a;
        self.transition[sa * self.n_states + next] += p;
        self.reward[sa] += p * reward;
        self.cost[sa] += p * cost;
    }

    fn finish(self, threshold: f64, reward_bounds: [f64; 2]) -> TabularCmdp {
        TabularCmdp::new(RawCmdp {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: DISCOUNT,
            rho: vec![1.0 / self.n_states as f64; self.n_states],
            rewards: self.reward,
            constraints: vec![Constraint {
                values: self.cost,
                threshold,
            }],
            transition: self.transition,
            reward_bounds: Some(reward_bounds),
        })
        .expect("builder produces a valid model")
    }
}

/// 3×7 cliff walk. Start bottom-left, goal bottom-right, cliff between them on the bottom row.
///
/// Moves are up/right/down/left; with probability [`CLIFF_SLIP`] the executed direction is
/// uniformly random. Entering a cliff cell costs −1 and returns the agent to the start; entering
/// the goal pays +1 and the goal absorbs. Cliff cells themselves (reachable only through `ρ`)
/// send every action to the start.
pub fn cliff_world() -> (TabularCmdp, GridGeometry) {
    cliff_world_with_slip(CLIFF_SLIP)
}

pub fn cliff_world_with_slip(slip: f64) -> (TabularCmdp, GridGeometry) {
    let (rows, cols) = (CLIFF_ROWS, CLIFF_COLS);
    let mut cells = vec![Cell::Open; rows * cols];
    let bottom = rows - 1;
    cells[bottom * cols] = Cell::Start;
    cells[bottom * cols + cols - 1] = Cell::Goal;
    for c in 1..cols - 1 {
        cells[bottom * cols + c] = Cell::Cliff;
    }
    let geometry = GridGeometry {
        rows,
        cols,
        cells,
        action_names: ["up", "right", "down", "left"].map(String::from).to_vec(),
    };
    let start = geometry.state(bottom, 0);
    let moves: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];
    let mut tables = TableBuilder::new(rows * cols, 4);
    for s in 0..rows * cols {
        let (r, c) = geometry.position(s);
        for a in 0..4 {
            match geometry.cells[s] {
                Cell::Goal => tables.outcome(s, a, 1.0, s, 0.0, 0.0),
                Cell::Cliff => tables.outcome(s, a, 1.0, start, 0.0, 0.0),
                _ => {
                    for (dir, &(dr, dc)) in moves.iter().enumerate() {
                        let p = if dir == a { 1.0 - slip + slip / 4.0 } else { slip / 4.0 };
                        if p == 0.0 {
                            continue;
                        }
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        let target = if (0..rows as isize).contains(&nr) && (0..cols as isize).contains(&nc) {
                            geometry.state(nr as usize, nc as usize)
                        } else {
                            s
                        };
                        match geometry.cells[target] {
                            Cell::Cliff => tables.outcome(s, a, p, start, 0.0, -1.0),
                            Cell::Goal => tables.outcome(s, a, p, target, 1.0, 0.0),
                            _ => tables.outcome(s, a, p, target, 0.0, 0.0),
                        }
                    }
                }
            }
        }
    }
    (tables.finish(CLIFF_THRESHOLD, [-1.0, 1.0]), geometry)
}

/// 5×5 descent grid. Action 0 moves down one row; action 1 moves down one row and one column
/// right (−0.02 when the column changes). Entering the treasure (bottom-left) pays +1; entering a
/// landmine costs −2. The bottom row absorbs.
pub fn deep_sea_treasure() -> (TabularCmdp, GridGeometry) {
    let n = DST_SIZE;
    let mut cells = vec![Cell::Open; n * n];
    cells[0] = Cell::Start;
    cells[(n - 1) * n] = Cell::Treasure;
    for (r, c) in DST_MINES {
        cells[r * n + c] = Cell::Landmine;
    }
    let geometry = GridGeometry {
        rows: n,
        cols: n,
        cells,
        action_names: ["down", "down-right"].map(String::from).to_vec(),
    };
    let mut tables = TableBuilder::new(n * n, 2);
    for s in 0..n * n {
        let (r, c) = geometry.position(s);
        for a in 0..2 {
            if r == n - 1 {
                tables.outcome(s, a, 1.0, s, 0.0, 0.0);
                continue;
            }
            let nc = if a == 1 { (c + 1).min(n - 1) } else { c };
            let target = geometry.state(r + 1, nc);
            let mut reward = if nc != c { DST_RIGHT_REWARD } else { 0.0 };
            let mut cost = 0.0;
            match geometry.cells[target] {
                Cell::Treasure => reward += 1.0,
                Cell::Landmine => cost = DST_MINE_COST,
                _ => {}
            }
            tables.outcome(s, a, 1.0, target, reward, cost);
        }
    }
    (tables.finish(DST_THRESHOLD, [-2.0, 1.0]), geometry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp;

    #[test]
    fn cliff_world_shape() {
        let (m, g) = cliff_world();
        assert_eq!((m.n_states(), m.n_actions(), m.n_constraints()), (21, 4, 1));
        assert_eq!(m.gamma(), 0.9);
        assert_eq!(m.thresholds(), vec![-0.17]);
        assert!(m.rho().iter().all(|&p| p == 1.0 / 21.0));
        assert_eq!(g.states_of(Cell::Cliff).len(), 5);
        assert!(lp::slater_margin(&m, 0).unwrap() > 0.0);
    }

    #[test]
    fn deep_sea_treasure_shape() {
        let (m, g) = deep_sea_treasure();
        assert_eq!((m.n_states(), m.n_actions(), m.n_constraints()), (25, 2, 1));
        assert!(m.rho().iter().all(|&p| p == 1.0 / 25.0));
        let mines = g.states_of(Cell::Landmine);
        assert_eq!(mines.len(), 2);
        let costs = &m.constraints()[0].values;
        for s in 0..25 {
            for a in 0..2 {
                let next = (0..25).find(|&t| m.transition_row(s, a)[t] == 1.0).unwrap();
                let entering_mine = mines.contains(&next) && next != s;
                assert_eq!(costs[s * 2 + a], if entering_mine { -2.0 } else { 0.0 });
            }
        }
        assert!(lp::slater_margin(&m, 0).unwrap() > 0.0);
    }

    #[test]
    fn cliff_optimum_beats_always_falling() {
        let (m, g) = cliff_world();
        let sol = lp::solve_occupancy_lp(&m).unwrap();
        // Always moving right steps from the start straight into the cliff.
        let mut probs = vec![0.0; 21 * 4];
        for s in 0..21 {
            probs[s * 4 + 1] = 1.0;
        }
        let right = crate::cmdp::TabularPolicy::from_probs(21, 4, probs).unwrap();
        let v = crate::cmdp::policy_evaluate(&m, &right, m.reward()).unwrap().scalar_value;
        assert!(sol.v_star > v);
        assert_eq!(g.ascii_map().lines().next().unwrap(), ".......");
    }
}
