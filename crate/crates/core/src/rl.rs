//! Curriculum reinforcement learning with a likelihood-ratio policy gradient.
//!
//! Each iteration samples fresh maps, starts every episode at a cell exactly
//! `n` moves from the goal, and updates the policy with REINFORCE using the
//! discounted reward-to-go minus a baseline. The difficulty `n` grows by one
//! whenever the iteration's average discounted return exceeds `1 - n/35`.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use vinlab_tensor::{Real, RmsProp, Tape, Tensor, TensorError, Var};

use crate::eval::{rollout_greedy, NetworkPolicy, Policy};
use crate::gridworld::{env_step_with, generate_map, step_counts, Action, GridMap, OracleSpec, Pos};
use crate::models::{action_probs, ModelWeights};
use crate::rng::{derive_seed, Rng};
use crate::{Error, Result};

/// Maps drawn per episode before giving up on finding a start at the
/// requested difficulty.
const MAX_MAP_DRAWS: u64 = 10_000;
const TEST_STREAM: u64 = 0x7E57;
const TRAIN_STREAM: u64 = 0x7A1B;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub m: usize,
    pub n: usize,
    pub gamma: f64,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub max_steps: usize,
    pub lr: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub obstacle_fraction: f64,
    /// Training stops once this difficulty has been passed.
    pub max_difficulty: usize,
    pub test_maps: usize,
    pub seed: u64,
    pub threads: usize,
}

impl RlConfig {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            gamma: 0.99,
            iterations: 500,
            episodes_per_iteration: 1024,
            max_steps: 4 * (m + n),
            lr: 0.01,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-6,
            obstacle_fraction: 0.3,
            max_difficulty: m.max(n) - 1,
            test_maps: 200,
            seed: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if self.max_steps < 2 * (self.m + self.n) {
            return Err(Error::Config(format!(
                "step cap {} below 2(m + n) = {}",
                self.max_steps,
                2 * (self.m + self.n)
            )));
        }
        if self.iterations == 0 || self.episodes_per_iteration == 0 || self.threads == 0 || self.max_difficulty == 0 {
            return Err(Error::Config(
                "iteration, episode, thread and difficulty counts must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn reward_spec(&self) -> OracleSpec {
        OracleSpec::rl(self.gamma)
    }
}

/// Average discounted return above which difficulty `n` is considered
/// mastered.
pub fn threshold(n: usize) -> f64 {
    1.0 - n as f64 / 35.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Advancement {
    pub iteration: usize,
    pub from: usize,
    pub to: usize,
    pub avg_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub difficulty: usize,
    pub returns: Vec<f64>,
    pub advancements: Vec<Advancement>,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            difficulty: 1,
            returns: Vec::new(),
            advancements: Vec::new(),
        }
    }
}

impl Curriculum {
    /// Records one iteration's average discounted return and advances the
    /// difficulty if it strictly exceeds the threshold.
    pub fn observe(&mut self, iteration: usize, avg_return: f64) -> Option<&Advancement> {
        self.returns.push(avg_return);
        if avg_return > threshold(self.difficulty) {
            let from = self.difficulty;
            self.difficulty += 1;
            self.advancements.push(Advancement {
                iteration,
                from,
                to: self.difficulty,
                avg_return,
            });
            self.advancements.last()
        } else {
            None
        }
    }
}

/// One sampled episode with its policy readouts kept on a tape.
pub struct Episode<T: Real> {
    pub states: Vec<Pos>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    tape: Tape<T>,
    /// `-log pi(a_t | s_t)` for every step.
    neg_log_probs: Vec<Var>,
}

impl<T: Real> Episode<T> {
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        discounted_return(&self.rewards, gamma)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc)
}

/// `G_t = sum_{k >= t} gamma^(k - t) r_k` for every step.
pub fn reward_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Runs one episode, sampling actions from the softmax policy. Ends at the
/// goal, in a hole, or after `max_steps` actions.
pub fn rollout_episode<T: Real>(
    weights: &ModelWeights<T>,
    map: &GridMap,
    start: Pos,
    rng: &mut Rng,
    max_steps: usize,
    spec: &OracleSpec,
) -> Result<Episode<T>> {
    if !map.is_free(start) {
        return Err(Error::ObstacleState(start.into()));
    }
    let mut tape = Tape::new();
    let net = weights.bind(&mut tape)?;
    let plan = net.plan(&mut tape, &map.image())?;
    let mut ep = Episode {
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        tape: Tape::new(),
        neg_log_probs: Vec::new(),
    };
    let mut p = start;
    if p == map.goal() {
        ep.tape = tape;
        return Ok(ep);
    }
    for _ in 0..max_steps {
        let logits = net.logits(&mut tape, plan, p)?;
        let a = Action::new(rng.categorical(&action_probs(tape.value(logits)))).expect("eight actions");
        ep.neg_log_probs.push(tape.softmax_cross_entropy(logits, a.index())?);
        let out = env_step_with(map, p, a, spec)?;
        ep.states.push(p);
        ep.actions.push(a);
        ep.rewards.push(out.reward);
        p = out.next;
        if out.done {
            break;
        }
    }
    ep.tape = tape;
    Ok(ep)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    /// Mean reward-to-go over every step of the batch.
    MeanReturn,
    Constant(f64),
}

/// Gradient of `sum_t (G_t - b) * (-log pi(a_t|s_t)) / T` over all steps `T`
/// of the batch, so a descent step raises the log-probability of actions
/// with positive advantage. Returns `None` for a batch without steps.
pub fn policy_gradient<T: Real>(
    weights: &ModelWeights<T>,
    episodes: &mut [Episode<T>],
    gamma: f64,
    baseline: Baseline,
) -> Result<Option<Vec<Tensor<T>>>> {
    let total: usize = episodes.iter().map(Episode::len).sum();
    if total == 0 {
        return Ok(None);
    }
    let to_go: Vec<Vec<f64>> = episodes.iter().map(|e| reward_to_go(&e.rewards, gamma)).collect();
    let b = match baseline {
        Baseline::MeanReturn => to_go.iter().flatten().sum::<f64>() / total as f64,
        Baseline::Constant(b) => b,
    };
    let shapes = weights.shapes();
    let mut grads: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for (ep, g) in episodes.iter_mut().zip(&to_go) {
        if ep.is_empty() {
            continue;
        }
        let terms: Vec<(Var, f64)> = ep
            .neg_log_probs
            .iter()
            .zip(g)
            .map(|(&v, &gt)| (v, (gt - b) / total as f64))
            .collect();
        let mark = ep.tape.len();
        let root = ep.tape.weighted_sum(&terms)?;
        let parts = ep.tape.backward(root)?.by_param_id(&shapes);
        ep.tape.truncate(mark);
        for (acc, part) in grads.iter_mut().zip(parts) {
            acc.add_assign(&part);
        }
    }
    Ok(Some(grads))
}

/// One REINFORCE step on `weights`.
pub fn policy_gradient_update<T: Real>(
    weights: &mut ModelWeights<T>,
    opt: &mut RmsProp<T>,
    episodes: &mut [Episode<T>],
    gamma: f64,
    baseline: Baseline,
) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::Empty("policy-gradient batch has no episodes".into()));
    }
    if let Some(grads) = policy_gradient(weights, episodes, gamma, baseline)? {
        opt.step(weights.tensors_mut(), &grads).map_err(|e| match e {
            TensorError::NonFinite { .. } => Error::Config("non-finite policy gradient".into()),
            e => e.into(),
        })?;
    }
    Ok(())
}

/// Draws maps from `seed` until one has a cell exactly `difficulty` moves
/// from the goal; returns the map and a uniformly chosen such cell.
pub fn sample_start(cfg: &RlConfig, difficulty: usize, seed: u64, rng: &mut Rng) -> Result<(GridMap, Pos)> {
    for draw in 0..MAX_MAP_DRAWS {
        let map = generate_map(cfg.m, cfg.n, cfg.obstacle_fraction, derive_seed(seed, draw))?;
        let cells: Vec<Pos> = step_counts(&map)
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == Some(difficulty as u32))
            .map(|(c, _)| map.pos(c))
            .collect();
        if !cells.is_empty() {
            let start = cells[rng.below(cells.len())];
            return Ok((map, start));
        }
    }
    Err(Error::Config(format!(
        "no {}x{} map with a start {difficulty} moves from the goal after {MAX_MAP_DRAWS} draws",
        cfg.m, cfg.n
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub difficulty: usize,
    pub avg_return: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub curriculum: Curriculum,
    pub iterations: Vec<IterationStats>,
    pub test_success: f64,
    pub wall_seconds: f64,
}

fn run_episode<T: Real>(
    weights: &ModelWeights<T>,
    cfg: &RlConfig,
    difficulty: usize,
    stream: u64,
) -> Result<Episode<T>> {
    let seed = derive_seed(derive_seed(cfg.seed, TRAIN_STREAM), stream);
    let mut rng = Rng::new(derive_seed(seed, u64::MAX));
    let (map, start) = sample_start(cfg, difficulty, seed, &mut rng)?;
    rollout_episode(weights, &map, start, &mut rng, cfg.max_steps, &cfg.reward_spec())
}

fn run_iteration<T: Real>(
    weights: &ModelWeights<T>,
    cfg: &RlConfig,
    difficulty: usize,
    iteration: usize,
) -> Result<Vec<Episode<T>>> {
    let e = cfg.episodes_per_iteration;
    let base = (iteration * e) as u64;
    if cfg.threads <= 1 {
        return (0..e)
            .map(|i| run_episode(weights, cfg, difficulty, base + i as u64))
            .collect();
    }
    let chunk = e.div_ceil(cfg.threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..e)
            .step_by(chunk)
            .map(|lo| {
                s.spawn(move || {
                    (lo..(lo + chunk).min(e))
                        .map(|i| run_episode(weights, cfg, difficulty, base + i as u64))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(e);
        for h in handles {
            out.extend(h.join().expect("episode worker panicked")?);
        }
        Ok(out)
    })
}

/// Curriculum training from `weights`. `on_advance` is called for every
/// difficulty increase, in order.
pub fn curriculum_train<T: Real>(
    mut weights: ModelWeights<T>,
    cfg: &RlConfig,
    mut on_advance: impl FnMut(&Advancement),
) -> Result<(ModelWeights<T>, RlReport)> {
    cfg.validate()?;
    let mc = weights.config();
    if (mc.m, mc.n) != (cfg.m, cfg.n) {
        return Err(Error::Config("model and environment sizes differ".into()));
    }
    let started = Instant::now();
    let mut opt = RmsProp::<T>::new(cfg.lr, cfg.rmsprop_decay, cfg.rmsprop_eps);
    let mut curriculum = Curriculum::default();
    let mut iterations = Vec::new();
    for it in 0..cfg.iterations {
        let difficulty = curriculum.difficulty;
        let mut episodes = run_iteration(&weights, cfg, difficulty, it)?;
        let avg_return = episodes.iter().map(|e| e.discounted_return(cfg.gamma)).sum::<f64>() / episodes.len() as f64;
        let successes = episodes.iter().filter(|e| e.rewards.last() == Some(&1.0)).count();
        policy_gradient_update(&mut weights, &mut opt, &mut episodes, cfg.gamma, Baseline::MeanReturn)?;
        iterations.push(IterationStats {
            iteration: it,
            difficulty,
            avg_return,
            success_rate: successes as f64 / episodes.len() as f64,
        });
        if let Some(adv) = curriculum.observe(it, avg_return) {
            on_advance(adv);
        }
        if curriculum.difficulty > cfg.max_difficulty {
            break;
        }
    }
    let test_success = test_success(&weights, cfg)?;
    Ok((
        weights,
        RlReport {
            curriculum,
            iterations,
            test_success,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Fraction of fresh maps on which a greedy rollout from a uniformly random
/// reachable start reaches the goal. Rewards play no role here.
pub fn test_success<T: Real>(weights: &ModelWeights<T>, cfg: &RlConfig) -> Result<f64> {
    let policy = NetworkPolicy::new(weights);
    let test_seed = derive_seed(cfg.seed, TEST_STREAM);
    let mut wins = 0;
    for i in 0..cfg.test_maps {
        let seed = derive_seed(test_seed, i as u64);
        let map = generate_map(cfg.m, cfg.n, cfg.obstacle_fraction, seed)?;
        let steps = step_counts(&map);
        let starts: Vec<Pos> = (0..steps.len())
            .filter(|&c| matches!(steps[c], Some(d) if d > 0))
            .map(|c| map.pos(c))
            .collect();
        let mut rng = Rng::new(derive_seed(seed, 1));
        let start = starts[rng.below(starts.len())];
        let mut planned = policy.for_map(&map)?;
        if rollout_greedy(planned.as_mut(), &map, start, cfg.max_steps)?.success {
            wins += 1;
        }
    }
    Ok(wins as f64 / cfg.test_maps.max(1) as f64)
}
