//! DDPG actor-critic that picks per-class data fractions.
//!
//! The actor maps the per-class F1 state to a vector in `[b_l, b_u]^C` through
//! a scaled sigmoid. Exploration goes through one of two transforms
//! ([`normalized_action`], [`weighted_metric_action`]) and an ε-greedy switch
//! whose greedy branch is the actor's deterministic output.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::metrics::StateVector;
use crate::nn::{Gradients, Mlp, ParamVector};
use crate::{seed, Error, Result};

/// Per-class fractions (raw policy output or post-transform).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionVector(pub Vec<f64>);

impl ActionVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action: ActionVector,
    /// Discounted return over `steps` transitions.
    pub reward: f64,
    pub next_state: StateVector,
    pub terminal: bool,
    /// Number of environment steps folded into this transition.
    pub steps: usize,
}

impl Transition {
    pub fn new(state: StateVector, action: ActionVector, reward: f64, next_state: StateVector, terminal: bool) -> Self {
        Transition {
            state,
            action,
            reward,
            next_state,
            terminal,
            steps: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStrategy {
    Normalized,
    WeightedMetric,
    /// Always train on the full split; the agent still observes and learns.
    Full,
}

impl ActionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionStrategy::Normalized => "normalized",
            ActionStrategy::WeightedMetric => "weighted_metric",
            ActionStrategy::Full => "full",
        }
    }
}

impl fmt::Display for ActionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(ActionStrategy::Normalized),
            "weighted_metric" => Ok(ActionStrategy::WeightedMetric),
            "full" => Ok(ActionStrategy::Full),
            other => Err(Error::invalid(
                "action_strategy",
                format!("unknown strategy `{other}` (expected normalized|weighted_metric|full)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub soft_tau: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Rounds over which epsilon decays linearly; defaults to half the run.
    pub epsilon_decay_rounds: Option<usize>,
    /// Look-back period (rounds) for the weighted-metric transform.
    pub eta: usize,
    pub b_l: f64,
    pub b_u: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub n_step: usize,
    pub hidden: usize,
    /// Std of the Gaussian noise added to the raw action on explore steps.
    pub explore_noise: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            soft_tau: 0.005,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_rounds: None,
            eta: 5,
            b_l: 0.1,
            b_u: 1.0,
            buffer_capacity: 10_000,
            batch_size: 32,
            n_step: 1,
            hidden: 64,
            explore_noise: 0.1,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        if !unit_open(self.gamma) {
            return Err(Error::invalid("agent.gamma", "must lie in (0, 1)"));
        }
        if !(self.soft_tau > 0.0 && self.soft_tau <= 1.0) {
            return Err(Error::invalid("agent.soft_tau", "must lie in (0, 1]"));
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return Err(Error::invalid("agent.actor_lr", "learning rates must be positive"));
        }
        for (name, e) in [("agent.epsilon_start", self.epsilon_start), ("agent.epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invalid(name, "must lie in [0, 1]"));
            }
        }
        if self.eta < 1 {
            return Err(Error::invalid("agent.eta", "must be at least 1"));
        }
        if !(self.b_l > 0.0 && self.b_l <= 1.0) {
            return Err(Error::invalid("agent.b_l", "must lie in (0, 1]"));
        }
        if !(self.b_u > 0.0 && self.b_u <= 1.0) || self.b_l > self.b_u {
            return Err(Error::invalid("agent.b_u", "must lie in [b_l, 1]"));
        }
        if self.buffer_capacity == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::invalid("agent.buffer_capacity", "capacity, batch size and hidden width must be positive"));
        }
        if self.n_step < 1 {
            return Err(Error::invalid("agent.n_step", "must be at least 1"));
        }
        if !(self.explore_noise >= 0.0) {
            return Err(Error::invalid("agent.explore_noise", "must be nonnegative"));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon_at(&self, round: usize, total_rounds: usize) -> f64 {
        let span = self.epsilon_decay_rounds.unwrap_or(total_rounds / 2);
        if span == 0 || round >= span {
            return self.epsilon_end;
        }
        let frac = round as f64 / span as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// FIFO replay memory.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(4096)),
            rng: seed::rng(seed, &[0xb0f]),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample without replacement (the whole buffer if it is smaller).
    pub fn sample(&mut self, batch: usize) -> Vec<Transition> {
        self.sample_n_step(batch, 1, 1.0)
    }

    /// Sample start positions and fold up to `n` consecutive transitions into
    /// one, stopping early at a terminal transition.
    pub fn sample_n_step(&mut self, batch: usize, n: usize, gamma: f64) -> Vec<Transition> {
        let len = self.items.len();
        if len == 0 {
            return Vec::new();
        }
        let amount = batch.min(len);
        let mut starts = index::sample(&mut self.rng, len, amount).into_vec();
        starts.sort_unstable();
        starts.into_iter().map(|i| self.fold_from(i, n.max(1), gamma)).collect()
    }

    fn fold_from(&self, start: usize, n: usize, gamma: f64) -> Transition {
        let first = &self.items[start];
        let mut out = first.clone();
        let mut discount = 1.0;
        let mut reward = first.reward;
        for k in 1..n {
            if out.terminal || start + k >= self.items.len() {
                break;
            }
            let next = &self.items[start + k];
            discount *= gamma;
            reward += discount * next.reward;
            out.next_state = next.next_state.clone();
            out.terminal = next.terminal;
            out.steps += 1;
        }
        out.reward = reward;
        out
    }
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Descent step on `grads`.
    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        let mut params = model.params();
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grads.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t);
        let bc2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.0.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
        }
        model.set_params(&params)
    }
}

/// Anything that scores `(state, action)` pairs and exposes `dQ/da`.
pub trait ActionValue {
    /// Q values and the per-sample gradient of Q w.r.t. the action.
    fn value_and_action_grad(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)>;
}

fn critic_input(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
    if states.nrows() != actions.nrows() {
        return Err(Error::LengthMismatch {
            left: states.nrows(),
            right: actions.nrows(),
        });
    }
    Ok(ndarray::concatenate(Axis(1), &[states, actions]).expect("row counts checked"))
}

/// An MLP over the concatenation `[state, action]` with a single output.
impl ActionValue for Mlp {
    fn value_and_action_grad(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let input = critic_input(states, actions)?;
        let (q, cache) = self.forward(input.view())?;
        let ones = Array2::ones(q.dim());
        let (_, d_in) = self.backward_with_input(&cache, ones.view())?;
        let c = states.ncols();
        Ok((q.column(0).to_vec(), d_in.slice(s![.., c..]).to_owned()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub b_l: f64,
    pub b_u: f64,
    actor_opt: Adam,
    critic_opt: Adam,
}

impl ActorCritic {
    pub fn new(classes: usize, cfg: &AgentConfig, seed: u64) -> Result<Self> {
        let actor = Mlp::new(&[classes, cfg.hidden, classes], seed::derive(seed, &[0xac7]))?;
        let critic = Mlp::new(&[2 * classes, cfg.hidden, 1], seed::derive(seed, &[0xc71]))?;
        Ok(ActorCritic {
            actor_opt: Adam::new(actor.param_count(), cfg.actor_lr),
            critic_opt: Adam::new(critic.param_count(), cfg.critic_lr),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            b_l: cfg.b_l,
            b_u: cfg.b_u,
        })
    }

    pub fn classes(&self) -> usize {
        self.actor.input_dim()
    }

    fn squash(&self, logits: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let span = self.b_u - self.b_l;
        let sig = logits.mapv(sigmoid);
        let actions = sig.mapv(|s| self.b_l + span * s);
        let slope = sig.mapv(|s| span * s * (1.0 - s));
        (actions, slope)
    }

    /// Deterministic actions of `net` (online or target actor) for a batch.
    fn act_batch(&self, net: &Mlp, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let logits = net.logits(states)?;
        Ok(self.squash(&logits).0)
    }
}

fn states_matrix(states: &[&StateVector], c: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((states.len(), c));
    for (mut row, s) in m.rows_mut().into_iter().zip(states) {
        if s.dim() != c {
            return Err(Error::Shape {
                expected: format!("state of dimension {c}"),
                actual: format!("{}", s.dim()),
            });
        }
        row.assign(&ndarray::ArrayView1::from(&s.f1_per_class));
    }
    Ok(m)
}

/// Deterministic policy output, each coordinate in `[b_l, b_u]`.
pub fn policy_action(ac: &ActorCritic, s: &StateVector) -> Result<ActionVector> {
    let x = states_matrix(&[s], ac.classes())?;
    let a = ac.act_batch(&ac.actor, x.view())?;
    Ok(ActionVector(a.row(0).to_vec()))
}

/// L1-normalize the action, scale to `total` samples, cap each class at its
/// available count, and return the resulting per-class fractions.
///
/// Classes without samples get fraction 1.
pub fn normalized_action(a: &ActionVector, class_counts: &[usize], total: usize) -> Result<ActionVector> {
    if a.dim() != class_counts.len() {
        return Err(Error::LengthMismatch {
            left: a.dim(),
            right: class_counts.len(),
        });
    }
    if total == 0 {
        return Err(Error::invalid("total", "client has no training samples"));
    }
    if a.0.iter().any(|&z| !(z > 0.0) || !z.is_finite()) {
        return Err(Error::invalid("action", "coordinates must be positive and finite"));
    }
    let l1: f64 = a.0.iter().sum();
    Ok(ActionVector(
        a.0.iter()
            .zip(class_counts)
            .map(|(&z, &n)| {
                if n == 0 {
                    return 1.0;
                }
                let count = (z / l1 * total as f64).min(n as f64);
                count / n as f64
            })
            .collect(),
    ))
}

/// Per-class multiplicative factors from the F1 change over the look-back
/// window: `1 + |ΔF1|` where F1 dropped, `1` otherwise, L1-normalized and
/// rescaled by `C` so the mean factor is 1.
pub fn weighted_metric_factors(f1_now: &StateVector, f1_lookback: &StateVector) -> Result<Vec<f64>> {
    if f1_now.dim() != f1_lookback.dim() {
        return Err(Error::LengthMismatch {
            left: f1_now.dim(),
            right: f1_lookback.dim(),
        });
    }
    let weights: Vec<f64> = f1_now
        .f1_per_class
        .iter()
        .zip(&f1_lookback.f1_per_class)
        .map(|(now, then)| {
            let delta = now - then;
            if delta < 0.0 {
                1.0 + delta.abs()
            } else {
                1.0
            }
        })
        .collect();
    let l1: f64 = weights.iter().sum();
    let c = weights.len() as f64;
    Ok(weights.into_iter().map(|w| w / l1 * c).collect())
}

/// Reweight the action toward classes whose F1 dropped; result in `(0, 1]`.
pub fn weighted_metric_action(a: &ActionVector, f1_now: &StateVector, f1_lookback: &StateVector) -> Result<ActionVector> {
    let factors = weighted_metric_factors(f1_now, f1_lookback)?;
    if factors.len() != a.dim() {
        return Err(Error::LengthMismatch {
            left: a.dim(),
            right: factors.len(),
        });
    }
    if a.0.iter().any(|&z| !(z > 0.0) || !z.is_finite()) {
        return Err(Error::invalid("action", "coordinates must be positive and finite"));
    }
    Ok(ActionVector(
        a.0.iter().zip(factors).map(|(z, f)| (z * f).min(1.0)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub action: ActionVector,
    pub explored: bool,
}

/// With probability `epsilon` take `explore`, otherwise the actor's output.
pub fn epsilon_greedy_select<R: Rng>(
    explore: &ActionVector,
    ac: &ActorCritic,
    s: &StateVector,
    epsilon: f64,
    rng: &mut R,
) -> Result<Selection> {
    let explored = rng.random::<f64>() < epsilon;
    let action = if explored {
        explore.clone()
    } else {
        policy_action(ac, s)?
    };
    Ok(Selection { action, explored })
}

fn batch_arrays(ac: &ActorCritic, batch: &[Transition]) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let c = ac.classes();
    let states = states_matrix(&batch.iter().map(|t| &t.state).collect::<Vec<_>>(), c)?;
    let next = states_matrix(&batch.iter().map(|t| &t.next_state).collect::<Vec<_>>(), c)?;
    let mut actions = Array2::zeros((batch.len(), c));
    for (mut row, t) in actions.rows_mut().into_iter().zip(batch) {
        if t.action.dim() != c {
            return Err(Error::Shape {
                expected: format!("action of dimension {c}"),
                actual: format!("{}", t.action.dim()),
            });
        }
        row.assign(&ndarray::ArrayView1::from(&t.action.0));
    }
    Ok((states, actions, next))
}

/// Bootstrapped critic targets `r + γ^steps·Q'(s', μ'(s'))`, `r` when terminal.
pub fn critic_targets(ac: &ActorCritic, batch: &[Transition], gamma: f64) -> Result<Vec<f64>> {
    let (_, _, next) = batch_arrays(ac, batch)?;
    let next_actions = ac.act_batch(&ac.target_actor, next.view())?;
    let input = critic_input(next.view(), next_actions.view())?;
    let q_next = ac.target_critic.logits(input.view())?;
    Ok(batch
        .iter()
        .zip(q_next.column(0))
        .map(|(t, &q)| {
            if t.terminal {
                t.reward
            } else {
                t.reward + gamma.powi(t.steps as i32) * q
            }
        })
        .collect())
}

/// One MSE step of the critic toward the bootstrapped targets; returns the
/// loss before the step.
pub fn critic_update(ac: &mut ActorCritic, batch: &[Transition], cfg: &AgentConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("transition batch"));
    }
    let targets = critic_targets(ac, batch, cfg.gamma)?;
    let (states, actions, _) = batch_arrays(ac, batch)?;
    let input = critic_input(states.view(), actions.view())?;
    let (q, cache) = ac.critic.forward(input.view())?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut d_q = Array2::zeros(q.dim());
    for (i, &y) in targets.iter().enumerate() {
        let diff = q[[i, 0]] - y;
        loss += diff * diff;
        d_q[[i, 0]] = 2.0 * diff / n;
    }
    let grads = ac.critic.backward(&cache, d_q.view())?;
    ac.critic_opt.step(&mut ac.critic, &grads)?;
    Ok(loss / n)
}

/// One deterministic-policy-gradient ascent step of the actor on the mean of
/// `critic(s, actor(s))`. The critic is only read. Returns the objective
/// before the step.
pub fn actor_step(ac: &mut ActorCritic, critic: &dyn ActionValue, states: ArrayView2<f64>) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::Empty("state batch"));
    }
    let (logits, cache) = ac.actor.forward(states)?;
    let (actions, slope) = ac.squash(&logits);
    let (q, d_q_d_a) = critic.value_and_action_grad(states, actions.view())?;
    let n = states.nrows() as f64;
    // descend on −J
    let d_logits = -(d_q_d_a * slope) / n;
    let grads = ac.actor.backward(&cache, d_logits.view())?;
    ac.actor_opt.step(&mut ac.actor, &grads)?;
    Ok(q.iter().sum::<f64>() / n)
}

pub fn actor_update(ac: &mut ActorCritic, batch: &[Transition], _cfg: &AgentConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("transition batch"));
    }
    let (states, _, _) = batch_arrays(ac, batch)?;
    let critic = ac.critic.clone();
    actor_step(ac, &critic, states.view())
}

fn blend(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    let t = target.params();
    let o = online.params();
    let mixed = ParamVector(t.0.iter().zip(&o.0).map(|(t, o)| tau * o + (1.0 - tau) * t).collect());
    target.set_params(&mixed)
}

/// `target ← τ·online + (1 − τ)·target` for actor and critic.
pub fn soft_update(ac: &mut ActorCritic, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid("tau", "must lie in (0, 1]"));
    }
    blend(&mut ac.target_actor, &ac.actor, tau)?;
    blend(&mut ac.target_critic, &ac.critic, tau)
}

/// What the agent decided for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDecision {
    /// Actor output before noise or transforms.
    pub raw: ActionVector,
    /// Per-class fractions handed to the data partitioner.
    pub fractions: ActionVector,
    pub explored: bool,
    pub epsilon: f64,
}

/// Losses of one learning step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnStats {
    pub critic_loss: f64,
    pub actor_objective: f64,
}

/// The optimized client's learner: networks, replay memory and exploration RNG.
#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub ac: ActorCritic,
    pub buffer: ReplayBuffer,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(classes: usize, cfg: AgentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Agent {
            ac: ActorCritic::new(classes, &cfg, seed)?,
            buffer: ReplayBuffer::new(cfg.buffer_capacity, seed::derive(seed, &[0xbf])),
            rng: seed::rng(seed, &[0xe9]),
            cfg,
        })
    }

    /// Choose per-class fractions for this round.
    ///
    /// `lookback` is the state from `eta` rounds earlier (used by the
    /// weighted-metric transform only).
    pub fn decide(
        &mut self,
        state: &StateVector,
        lookback: &StateVector,
        class_counts: &[usize],
        strategy: ActionStrategy,
        epsilon: f64,
    ) -> Result<ActionDecision> {
        let raw = policy_action(&self.ac, state)?;
        // Draws happen for every strategy so the RNG stream does not depend on it.
        let noise = Normal::new(0.0, self.cfg.explore_noise.max(f64::MIN_POSITIVE)).expect("valid std");
        let noisy = ActionVector(
            raw.0
                .iter()
                .map(|&z| (z + noise.sample(&mut self.rng)).clamp(self.cfg.b_l, self.cfg.b_u))
                .collect(),
        );
        let explore = match strategy {
            ActionStrategy::Normalized => {
                normalized_action(&noisy, class_counts, class_counts.iter().sum())?
            }
            ActionStrategy::WeightedMetric => weighted_metric_action(&noisy, state, lookback)?,
            ActionStrategy::Full => ActionVector(vec![1.0; raw.dim()]),
        };
        let selection = epsilon_greedy_select(&explore, &self.ac, state, epsilon, &mut self.rng)?;
        let fractions = match strategy {
            ActionStrategy::Full => explore,
            _ => selection.action,
        };
        Ok(ActionDecision {
            raw,
            fractions,
            explored: selection.explored,
            epsilon,
        })
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// One critic + actor step and a soft target update once the buffer holds
    /// a full batch.
    pub fn learn(&mut self) -> Result<Option<LearnStats>> {
        if self.buffer.len() < self.cfg.batch_size {
            return Ok(None);
        }
        let batch = self
            .buffer
            .sample_n_step(self.cfg.batch_size, self.cfg.n_step, self.cfg.gamma);
        let critic_loss = critic_update(&mut self.ac, &batch, &self.cfg)?;
        let actor_objective = actor_update(&mut self.ac, &batch, &self.cfg)?;
        soft_update(&mut self.ac, self.cfg.soft_tau)?;
        Ok(Some(LearnStats {
            critic_loss,
            actor_objective,
        }))
    }
}
