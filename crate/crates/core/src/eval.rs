//! Held-out metrics: prediction error, rollout success and extra path cost.

use serde::{Deserialize, Serialize};
use vinlab_tensor::{Real, Tape, Var};

use crate::dataset::Dataset;
use crate::gridworld::{path_cost, shortest_paths, Action, GridMap, Pos, ShortestPaths};
use crate::models::{argmax_action, ModelWeights, Network};
use crate::{Error, Result};

/// Default rollout cap for an `m x n` grid.
pub fn default_step_cap(m: usize, n: usize) -> usize {
    4 * (m + n)
}

/// A deterministic policy, prepared once per map.
pub trait Policy: Sync {
    fn for_map<'a>(&'a self, map: &'a GridMap) -> Result<Box<dyn MapPolicy + 'a>>;
}

pub trait MapPolicy {
    fn act(&mut self, pos: Pos) -> Result<Action>;
}

/// Greedy network policy. The map-level plan is recorded once and each
/// query only appends the readout, which is dropped again afterwards.
pub struct NetworkPolicy<'w, T: Real = f32> {
    weights: &'w ModelWeights<T>,
}

impl<'w, T: Real> NetworkPolicy<'w, T> {
    pub fn new(weights: &'w ModelWeights<T>) -> Self {
        Self { weights }
    }
}

struct PlannedMap<'a, T: Real> {
    tape: Tape<T>,
    net: Network<'a>,
    plan: Var,
}

impl<'a, T: Real> PlannedMap<'a, T> {
    fn new(weights: &'a ModelWeights<T>, map: &GridMap) -> Result<Self> {
        let cfg = weights.config();
        if (cfg.m, cfg.n) != (map.rows(), map.cols()) {
            return Err(Error::Config(format!(
                "model expects {}x{} maps, got {}x{}",
                cfg.m,
                cfg.n,
                map.rows(),
                map.cols()
            )));
        }
        let mut tape = Tape::new();
        let net = weights.bind(&mut tape)?;
        let plan = net.plan(&mut tape, &map.image())?;
        Ok(Self { tape, net, plan })
    }
}

impl<T: Real> MapPolicy for PlannedMap<'_, T> {
    fn act(&mut self, pos: Pos) -> Result<Action> {
        let mark = self.tape.len();
        let logits = self.net.logits(&mut self.tape, self.plan, pos)?;
        let a = argmax_action(self.tape.value(logits));
        self.tape.truncate(mark);
        Ok(a)
    }
}

impl<T: Real> Policy for NetworkPolicy<'_, T> {
    fn for_map<'a>(&'a self, map: &'a GridMap) -> Result<Box<dyn MapPolicy + 'a>> {
        Ok(Box::new(PlannedMap::new(self.weights, map)?))
    }
}

/// The shortest-path expert used to label the data.
pub struct ExpertPolicy;

struct ExpertMap(ShortestPaths);

impl MapPolicy for ExpertMap {
    fn act(&mut self, pos: Pos) -> Result<Action> {
        // at the goal or an unreachable cell any action is as good as another
        Ok(self.0.action(pos).unwrap_or(Action::N))
    }
}

impl Policy for ExpertPolicy {
    fn for_map<'a>(&'a self, map: &'a GridMap) -> Result<Box<dyn MapPolicy + 'a>> {
        Ok(Box::new(ExpertMap(shortest_paths(map))))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Visited cells, starting with the start cell.
    pub states: Vec<Pos>,
    pub actions: Vec<Action>,
    pub success: bool,
    /// Path cost of the moves actually made (bumps into the border are free).
    pub cost: f64,
}

/// Greedy rollout: succeeds iff the goal is reached within `step_cap`
/// actions without entering an obstacle. Actions leading off the grid leave
/// the agent in place.
pub fn rollout_greedy(policy: &mut dyn MapPolicy, map: &GridMap, start: Pos, step_cap: usize) -> Result<Rollout> {
    if !map.is_free(start) {
        return Err(Error::ObstacleState(start.into()));
    }
    let mut r = Rollout {
        states: vec![start],
        actions: Vec::new(),
        success: start == map.goal(),
        cost: 0.0,
    };
    let mut p = start;
    let mut moved = Vec::new();
    while !r.success && r.actions.len() < step_cap {
        let a = policy.act(p)?;
        r.actions.push(a);
        if let Some(q) = map.neighbor(p, a) {
            moved.push(a);
            p = q;
        }
        r.states.push(p);
        if map.is_obstacle(p) {
            break;
        }
        r.success = p == map.goal();
    }
    r.cost = path_cost(moved);
    Ok(r)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub prediction_loss: f64,
    pub success_rate: f64,
    pub traj_diff: f64,
}

/// Raw counts behind [`Metrics`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tally {
    pub samples: usize,
    pub mistakes: usize,
    pub rollouts: usize,
    pub successes: usize,
    pub extra_cost: f64,
}

impl Tally {
    fn merge(&mut self, o: &Tally) {
        self.samples += o.samples;
        self.mistakes += o.mistakes;
        self.rollouts += o.rollouts;
        self.successes += o.successes;
        self.extra_cost += o.extra_cost;
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        Metrics {
            prediction_loss: ratio(self.mistakes as f64, self.samples),
            success_rate: ratio(self.successes as f64, self.rollouts),
            traj_diff: ratio(self.extra_cost, self.successes),
        }
    }
}

fn evaluate_domain(policy: &dyn Policy, ds: &Dataset, d: usize, step_cap: usize, rollouts: bool) -> Result<Tally> {
    let dom = &ds.domains[d];
    let mut planned = policy.for_map(&dom.map)?;
    let mut t = Tally::default();
    for traj in &dom.trajectories {
        for (state, label) in traj.pairs(&dom.map) {
            t.samples += 1;
            if planned.act(state)? != label {
                t.mistakes += 1;
            }
        }
    }
    if rollouts {
        let paths = shortest_paths(&dom.map);
        for traj in &dom.trajectories {
            let r = rollout_greedy(planned.as_mut(), &dom.map, traj.start, step_cap)?;
            t.rollouts += 1;
            if r.success {
                t.successes += 1;
                let extra = r.cost - paths.dist(traj.start);
                debug_assert!(extra >= -1e-9, "rollout beat the optimal path by {extra}");
                t.extra_cost += extra;
            }
        }
    }
    Ok(t)
}

/// Metrics over a held-out dataset: 0-1 error against the stored labels of
/// every `(state, label)` pair, and one greedy rollout per trajectory start.
/// The extra path cost is averaged over successful rollouts only. Domains
/// are split across `threads` workers; per-domain tallies are combined in
/// domain order.
pub fn evaluate(policy: &dyn Policy, ds: &Dataset, step_cap: usize, threads: usize) -> Result<Metrics> {
    Ok(tally(policy, ds, step_cap, threads, true)?.metrics())
}

/// Only the prediction error, without rollouts.
pub fn prediction_loss(policy: &dyn Policy, ds: &Dataset, threads: usize) -> Result<f64> {
    Ok(tally(policy, ds, 0, threads, false)?.metrics().prediction_loss)
}

pub fn tally(policy: &dyn Policy, ds: &Dataset, step_cap: usize, threads: usize, rollouts: bool) -> Result<Tally> {
    let nd = ds.domains.len();
    let per: Vec<Result<Tally>> = if threads <= 1 || nd < 2 {
        (0..nd)
            .map(|d| evaluate_domain(policy, ds, d, step_cap, rollouts))
            .collect()
    } else {
        let chunk = nd.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..nd)
                .step_by(chunk)
                .map(|lo| {
                    s.spawn(move || {
                        (lo..(lo + chunk).min(nd))
                            .map(|d| evaluate_domain(policy, ds, d, step_cap, rollouts))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut total = Tally::default();
    for t in per {
        total.merge(&t?);
    }
    Ok(total)
}
