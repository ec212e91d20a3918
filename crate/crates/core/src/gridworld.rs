//! Gridworld domains and exact planners.
//!
//! Moves are 8-connected. Off-grid moves and moves into obstacles are
//! illegal for the planners; the reinforcement-learning environment treats
//! obstacles as holes instead (see [`env_step`]).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use vinlab_tensor::{Real, Tensor};

use crate::rng::Rng;
use crate::{Error, Result};

/// Maximum number of obstacle layouts tried by [`generate_map`].
pub const MAX_MAP_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub i: usize,
    pub j: usize,
}

impl Pos {
    pub const fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    pub fn chebyshev(self, other: Pos) -> usize {
        self.i.abs_diff(other.i).max(self.j.abs_diff(other.j))
    }
}

impl From<Pos> for (usize, usize) {
    fn from(p: Pos) -> Self {
        (p.i, p.j)
    }
}

/// One of the eight compass moves, in the fixed order
/// N, NE, E, SE, S, SW, W, NW (rows grow southwards).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Action(u8);

impl Action {
    pub const COUNT: usize = 8;
    pub const N: Action = Action(0);
    pub const NE: Action = Action(1);
    pub const E: Action = Action(2);
    pub const SE: Action = Action(3);
    pub const S: Action = Action(4);
    pub const SW: Action = Action(5);
    pub const W: Action = Action(6);
    pub const NW: Action = Action(7);

    const OFFSETS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];
    const NAMES: [&'static str; 8] = ["N", "NE", "E", "SE", "S", "SW", "W", "NW"];

    pub fn new(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(Action(index as u8))
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..Self::COUNT as u8).map(Action)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn offset(self) -> (isize, isize) {
        Self::OFFSETS[self.index()]
    }

    pub fn is_diagonal(self) -> bool {
        self.0 % 2 == 1
    }

    /// Path cost of the move: 1 along an axis, sqrt(2) diagonally.
    pub fn cost(self) -> f64 {
        if self.is_diagonal() {
            std::f64::consts::SQRT_2
        } else {
            1.0
        }
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridMap {
    m: usize,
    n: usize,
    obstacles: Vec<bool>,
    goal: Pos,
}

impl GridMap {
    /// Validates that the goal is a free in-grid cell and that some other
    /// free cell can reach it.
    pub fn new(m: usize, n: usize, obstacles: Vec<bool>, goal: Pos) -> Result<Self> {
        if m == 0 || n == 0 || m > u16::MAX as usize || n > u16::MAX as usize {
            return Err(Error::Config(format!("grid extents {m}x{n} out of range")));
        }
        if obstacles.len() != m * n {
            return Err(Error::Config(format!(
                "obstacle mask has {} cells, expected {}",
                obstacles.len(),
                m * n
            )));
        }
        let map = Self { m, n, obstacles, goal };
        if !map.in_bounds(goal) || map.is_obstacle(goal) {
            return Err(Error::Config(format!("goal {goal:?} is not a free cell")));
        }
        if !map.goal_reachable_from_elsewhere() {
            return Err(Error::Config("no free cell other than the goal reaches it".into()));
        }
        Ok(map)
    }

    /// Map without obstacles.
    pub fn empty(m: usize, n: usize, goal: Pos) -> Result<Self> {
        Self::new(m, n, vec![false; m * n], goal)
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn goal(&self) -> Pos {
        self.goal
    }

    pub fn obstacles(&self) -> &[bool] {
        &self.obstacles
    }

    pub fn cell(&self, p: Pos) -> usize {
        p.i * self.n + p.j
    }

    pub fn pos(&self, cell: usize) -> Pos {
        Pos::new(cell / self.n, cell % self.n)
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.i < self.m && p.j < self.n
    }

    pub fn is_obstacle(&self, p: Pos) -> bool {
        self.obstacles[self.cell(p)]
    }

    pub fn is_free(&self, p: Pos) -> bool {
        self.in_bounds(p) && !self.is_obstacle(p)
    }

    /// In-grid neighbour reached by `a`, ignoring obstacles.
    pub fn neighbor(&self, p: Pos, a: Action) -> Option<Pos> {
        let (di, dj) = a.offset();
        let i = p.i.checked_add_signed(di)?;
        let j = p.j.checked_add_signed(dj)?;
        let q = Pos::new(i, j);
        self.in_bounds(q).then_some(q)
    }

    /// Destination of a legal move (in-grid and not an obstacle).
    pub fn legal_move(&self, p: Pos, a: Action) -> Option<Pos> {
        self.neighbor(p, a).filter(|&q| !self.is_obstacle(q))
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.m * self.n)
            .filter(|&c| !self.obstacles[c])
            .map(|c| self.pos(c))
    }

    /// Two-channel observation image: obstacles in channel 0, goal in
    /// channel 1, both as 1.0.
    pub fn image<T: Real>(&self) -> Tensor<T> {
        let cells = self.m * self.n;
        let goal = self.cell(self.goal);
        Tensor::from_fn(&[2, self.m, self.n], |f| {
            let on = if f < cells {
                self.obstacles[f]
            } else {
                f - cells == goal
            };
            if on {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    fn goal_reachable_from_elsewhere(&self) -> bool {
        Action::all().any(|a| self.legal_move(self.goal, a).is_some())
    }
}

/// Random map: every non-border cell is independently an obstacle with
/// probability `obstacle_fraction` (border cells stay free); the goal is
/// drawn uniformly among free cells. Layouts where no other free cell can
/// reach the goal are redrawn. The draw is a pure function of `seed`.
pub fn generate_map(m: usize, n: usize, obstacle_fraction: f64, seed: u64) -> Result<GridMap> {
    if !(0.0..0.5).contains(&obstacle_fraction) {
        return Err(Error::Config(format!(
            "obstacle fraction {obstacle_fraction} outside [0, 0.5)"
        )));
    }
    if m * n < 2 {
        return Err(Error::Config(format!("grid {m}x{n} has fewer than two cells")));
    }
    let mut rng = Rng::new(seed);
    for _ in 0..MAX_MAP_ATTEMPTS {
        let obstacles: Vec<bool> = (0..m * n)
            .map(|c| {
                let (i, j) = (c / n, c % n);
                let border = i == 0 || j == 0 || i + 1 == m || j + 1 == n;
                !border && rng.bernoulli(obstacle_fraction)
            })
            .collect();
        let free: Vec<usize> = (0..m * n).filter(|&c| !obstacles[c]).collect();
        if free.is_empty() {
            continue;
        }
        let goal = free[rng.below(free.len())];
        if let Ok(map) = GridMap::new(m, n, obstacles, Pos::new(goal / n, goal % n)) {
            return Ok(map);
        }
    }
    Err(Error::MapGeneration {
        m,
        n,
        attempts: MAX_MAP_ATTEMPTS,
        seed,
    })
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    dist: f64,
    cell: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then on cell index for a fixed pop order
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Distances below this are treated as ties when choosing optimal actions.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Exact distance-to-goal field and an optimal action per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortestPaths {
    m: usize,
    n: usize,
    dist: Vec<f64>,
    policy: Vec<Option<Action>>,
}

impl ShortestPaths {
    /// Path cost to the goal; `+inf` for obstacles and unreachable cells.
    pub fn dist(&self, p: Pos) -> f64 {
        self.dist[p.i * self.n + p.j]
    }

    pub fn dist_field(&self) -> &[f64] {
        &self.dist
    }

    /// Optimal action; `None` at the goal, obstacles and unreachable cells.
    pub fn action(&self, p: Pos) -> Option<Action> {
        self.policy[p.i * self.n + p.j]
    }

    pub fn is_reachable(&self, p: Pos) -> bool {
        self.dist(p).is_finite()
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.m, self.n)
    }
}

/// Dijkstra from the goal over free cells with axis cost 1 and diagonal
/// cost sqrt(2). The policy picks, among legal moves, the lowest-index action
/// minimising `cost(a) + dist(successor)`.
pub fn shortest_paths(map: &GridMap) -> ShortestPaths {
    let (m, n) = (map.rows(), map.cols());
    // distances are kept as (axis moves, diagonal moves) so that equal-cost
    // paths produce bit-identical floating-point costs
    let mut moves = vec![(0usize, 0usize); m * n];
    let mut dist = vec![f64::INFINITY; m * n];
    let mut heap = BinaryHeap::new();
    let goal = map.cell(map.goal());
    dist[goal] = 0.0;
    heap.push(HeapEntry { dist: 0.0, cell: goal });
    while let Some(HeapEntry { dist: d, cell }) = heap.pop() {
        if d > dist[cell] {
            continue;
        }
        let p = map.pos(cell);
        let (axis, diag) = moves[cell];
        for a in Action::all() {
            // moving from q into p is legal because p is free
            let Some(q) = map.legal_move(p, a) else { continue };
            let cand = if a.is_diagonal() {
                (axis, diag + 1)
            } else {
                (axis + 1, diag)
            };
            let nd = move_cost(cand.0, cand.1);
            let qc = map.cell(q);
            if nd < dist[qc] {
                dist[qc] = nd;
                moves[qc] = cand;
                heap.push(HeapEntry { dist: nd, cell: qc });
            }
        }
    }
    let policy = (0..m * n)
        .map(|c| {
            let p = map.pos(c);
            if c == goal || !dist[c].is_finite() {
                return None;
            }
            best_action(map, p, &dist)
        })
        .collect();
    ShortestPaths { m, n, dist, policy }
}

fn best_action(map: &GridMap, p: Pos, dist: &[f64]) -> Option<Action> {
    let scores: Vec<(Action, f64)> = Action::all()
        .filter_map(|a| map.legal_move(p, a).map(|q| (a, a.cost() + dist[map.cell(q)])))
        .collect();
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    scores
        .into_iter()
        .find(|&(_, s)| s.is_finite() && s <= best + TIE_TOLERANCE)
        .map(|(a, _)| a)
}

/// Minimum number of moves to the goal (unit cost per move), used as the
/// curriculum difficulty. `None` for obstacles and unreachable cells.
pub fn step_counts(map: &GridMap) -> Vec<Option<u32>> {
    let mut steps = vec![None; map.rows() * map.cols()];
    let goal = map.cell(map.goal());
    steps[goal] = Some(0);
    let mut queue = VecDeque::from([map.goal()]);
    while let Some(p) = queue.pop_front() {
        let d = steps[map.cell(p)].unwrap_or(0);
        for a in Action::all() {
            if let Some(q) = map.legal_move(p, a) {
                let qc = map.cell(q);
                if steps[qc].is_none() {
                    steps[qc] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
    }
    steps
}

/// Follows the optimal policy from `start` to the goal, returning the
/// visited `(state, action)` pairs.
pub fn sample_trajectory(map: &GridMap, start: Pos, paths: &ShortestPaths) -> Result<Vec<(Pos, Action)>> {
    if start == map.goal() {
        return Err(Error::StartIsGoal(start.into()));
    }
    if !map.is_free(start) || !paths.is_reachable(start) {
        return Err(Error::Unreachable(start.into()));
    }
    let mut out = Vec::new();
    let mut p = start;
    while p != map.goal() {
        let a = paths.action(p).ok_or(Error::Unreachable(p.into()))?;
        out.push((p, a));
        p = map.legal_move(p, a).expect("optimal policy only takes legal moves");
        if out.len() > map.rows() * map.cols() {
            unreachable!("optimal policy cycles");
        }
    }
    Ok(out)
}

/// Cost of a path with the given numbers of axis and diagonal moves.
pub fn move_cost(axis: usize, diagonal: usize) -> f64 {
    axis as f64 + diagonal as f64 * std::f64::consts::SQRT_2
}

/// Total path cost of a sequence of moves.
pub fn path_cost(actions: impl IntoIterator<Item = Action>) -> f64 {
    let (mut axis, mut diag) = (0, 0);
    for a in actions {
        if a.is_diagonal() {
            diag += 1;
        } else {
            axis += 1;
        }
    }
    move_cost(axis, diag)
}

/// Reward model for the tabular value-iteration oracle and the RL
/// environment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSpec {
    pub reward_goal: f64,
    pub reward_obstacle: f64,
    pub reward_step: f64,
    pub gamma: f64,
}

impl OracleSpec {
    /// +1 at the goal, -1 for a hole, -0.01 per step.
    pub fn rl(gamma: f64) -> Self {
        Self {
            reward_goal: 1.0,
            reward_obstacle: -1.0,
            reward_step: -0.01,
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        Ok(())
    }

    fn reward(&self, map: &GridMap, p: Pos) -> f64 {
        if p == map.goal() {
            self.reward_goal
        } else if map.is_obstacle(p) {
            self.reward_obstacle
        } else {
            self.reward_step
        }
    }

    pub fn min_reward(&self) -> f64 {
        self.reward_goal.min(self.reward_obstacle).min(self.reward_step)
    }
}

/// Tabular value iteration from `V_0 = 0`; see [`exact_value_iteration_from`].
pub fn exact_value_iteration(map: &GridMap, spec: &OracleSpec, iters: usize) -> Result<Vec<f64>> {
    exact_value_iteration_from(map, spec, iters, 0.0)
}

/// Tabular value iteration with every cell initialised to `init`.
///
/// `Q_k(s, a) = r(s) + gamma * V_{k-1}(next(s, a))` and `V_k = max_a Q_k`,
/// where `r(s)` is the reward of the occupied cell (goal, obstacle or step
/// reward). Moves are deterministic; an off-grid move or a move into an
/// obstacle leaves the agent in place. The goal is absorbing: its only
/// successor is itself, so it keeps collecting the goal reward.
pub fn exact_value_iteration_from(map: &GridMap, spec: &OracleSpec, iters: usize, init: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    if iters == 0 {
        return Err(Error::Config("value iteration needs at least one sweep".into()));
    }
    let cells = map.rows() * map.cols();
    let rewards: Vec<f64> = (0..cells).map(|c| spec.reward(map, map.pos(c))).collect();
    let successors: Vec<Vec<usize>> = (0..cells)
        .map(|c| {
            let p = map.pos(c);
            if p == map.goal() {
                return vec![c];
            }
            Action::all()
                .map(|a| map.legal_move(p, a).map_or(c, |q| map.cell(q)))
                .collect()
        })
        .collect();
    let mut v = vec![init; cells];
    let mut next = vec![0.0; cells];
    for _ in 0..iters {
        for c in 0..cells {
            let best = successors[c].iter().map(|&s| v[s]).fold(f64::NEG_INFINITY, f64::max);
            next[c] = rewards[c] + spec.gamma * best;
        }
        std::mem::swap(&mut v, &mut next);
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: Pos,
    pub reward: f64,
    pub done: bool,
}

/// One deterministic environment transition. Off-grid moves leave the agent
/// in place; entering the goal ends the episode with +1, entering an
/// obstacle (a hole) ends it with -1, anything else costs -0.01.
pub fn env_step(map: &GridMap, state: Pos, action: Action) -> Result<StepOutcome> {
    env_step_with(map, state, action, &OracleSpec::rl(0.99))
}

pub fn env_step_with(map: &GridMap, state: Pos, action: Action, spec: &OracleSpec) -> Result<StepOutcome> {
    if !map.in_bounds(state) || map.is_obstacle(state) {
        return Err(Error::ObstacleState(state.into()));
    }
    let next = map.neighbor(state, action).unwrap_or(state);
    Ok(if next == map.goal() {
        StepOutcome {
            next,
            reward: spec.reward_goal,
            done: true,
        }
    } else if map.is_obstacle(next) {
        StepOutcome {
            next,
            reward: spec.reward_obstacle,
            done: true,
        }
    } else {
        StepOutcome {
            next,
            reward: spec.reward_step,
            done: false,
        }
    })
}
