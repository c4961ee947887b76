//! Client-side training: plain local SGD, the optimized client's round, and
//! post-FL fine-tuning.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agent::{ActionStrategy, ActionVector, Agent, Transition};
use crate::data::{action_partition, ClientPartition, LabeledDataset};
use crate::metrics::{compute_state, evaluate, StateVector, Summary};
use crate::nn::{cross_entropy_loss, proximal_cross_entropy, Mlp, ParamVector};
use crate::reward::{RewardBranch, RewardConfig, RewardTracker};
use crate::{seed, Error, Result};

use super::bound::{compute_performance_bound, BoundInputs};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainOptions {
    pub epochs: usize,
    /// `usize::MAX` means full batch.
    pub batch_size: usize,
    pub lr: f64,
    pub prox_mu: f64,
}

/// `epochs` passes of mini-batch SGD over `(x, y)` starting from `w`.
///
/// Rows are reshuffled every epoch from `seed`; the last partial batch is
/// kept. With `prox_mu > 0` the gradient of `(mu/2)·‖w − w_global‖²` is added.
pub fn client_local_train(
    arch: &[usize],
    w: &ParamVector,
    x: ArrayView2<f64>,
    y: &[usize],
    opts: &LocalTrainOptions,
    w_global: &ParamVector,
    seed: u64,
) -> Result<ParamVector> {
    if y.is_empty() {
        return Err(Error::Empty("local training subset"));
    }
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.nrows(),
            right: y.len(),
        });
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be positive"));
    }
    let mut model = Mlp::from_params(arch, w)?;
    let mut rng = seed::rng(seed, &[0x7a1]);
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..opts.epochs {
        // A single full batch is order-independent; skip the shuffle.
        if opts.batch_size < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(opts.batch_size.min(n)) {
            let (bx, by): (Array2<f64>, Vec<usize>) = if chunk.len() == n && opts.batch_size >= n {
                (x.to_owned(), y.to_vec())
            } else {
                (x.select(Axis(0), chunk), chunk.iter().map(|&i| y[i]).collect())
            };
            let (logits, cache) = model.forward(bx.view())?;
            let grads = if opts.prox_mu > 0.0 {
                let (_, d_logits, extra) =
                    proximal_cross_entropy(logits.view(), &by, &model.params(), w_global, opts.prox_mu)?;
                let mut g = model.backward(&cache, d_logits.view())?;
                g.add_assign(&extra)?;
                g
            } else {
                let (_, d_logits) = cross_entropy_loss(logits.view(), &by)?;
                model.backward(&cache, d_logits.view())?
            };
            model.apply_gradients(&grads, opts.lr)?;
        }
    }
    Ok(model.params())
}

/// Mean cross-entropy of `params` on `(x, y)`.
pub fn loss_of(arch: &[usize], params: &ParamVector, x: ArrayView2<f64>, y: &[usize]) -> Result<f64> {
    Mlp::from_params(arch, params)?.loss(x, y)
}

pub fn summary_of(arch: &[usize], params: &ParamVector, x: ArrayView2<f64>, y: &[usize]) -> Result<Summary> {
    let model = Mlp::from_params(arch, params)?;
    Ok(Summary::from_confusion(&evaluate(&model, x, y)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_precision: f64,
    pub val_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub params: ParamVector,
    pub trace: Vec<FinetuneEpoch>,
    /// 0 when no epoch beat the starting parameters.
    pub best_epoch: usize,
    pub best: Summary,
    pub initial: Summary,
}

/// Full-split training until validation accuracy stops improving by more
/// than `1e-4` for `patience` consecutive epochs (or `max_epochs` is hit).
/// Returns the best-validation parameters, which may be the starting ones.
#[allow(clippy::too_many_arguments)]
pub fn post_fl_finetune(
    arch: &[usize],
    w_final: &ParamVector,
    train: (ArrayView2<f64>, &[usize]),
    val: (ArrayView2<f64>, &[usize]),
    batch_size: usize,
    lr: f64,
    patience: usize,
    max_epochs: usize,
    seed: u64,
) -> Result<FinetuneOutcome> {
    const MIN_DELTA: f64 = 1e-4;
    if train.1.is_empty() {
        return Err(Error::Empty("fine-tune training split"));
    }
    if val.1.is_empty() {
        return Err(Error::Empty("fine-tune validation split"));
    }
    let opts = LocalTrainOptions {
        epochs: 1,
        batch_size,
        lr,
        prox_mu: 0.0,
    };
    let initial = summary_of(arch, w_final, val.0, val.1)?;
    let mut best = initial;
    let mut best_params = w_final.clone();
    let mut best_epoch = 0;
    let mut current = w_final.clone();
    let mut stale = 0;
    let mut trace = Vec::new();
    for epoch in 1..=max_epochs {
        current = client_local_train(arch, &current, train.0, train.1, &opts, &current, seed::derive(seed, &[epoch as u64]))?;
        let s = summary_of(arch, &current, val.0, val.1)?;
        trace.push(FinetuneEpoch {
            epoch,
            train_loss: loss_of(arch, &current, train.0, train.1)?,
            val_accuracy: s.accuracy,
            val_precision: s.precision,
            val_recall: s.recall,
        });
        if s.accuracy > best.accuracy + MIN_DELTA {
            best = s;
            best_params = current.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= patience {
            break;
        }
    }
    Ok(FinetuneOutcome {
        params: best_params,
        trace,
        best_epoch,
        best,
        initial,
    })
}

/// The optimized client's view of one round, logged into the round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedRoundRecord {
    pub client_id: usize,
    pub state: Vec<f64>,
    pub raw_action: Vec<f64>,
    pub fractions: Vec<f64>,
    pub explored: bool,
    pub epsilon: f64,
    pub samples_used: usize,
    pub train_size: usize,
    pub data_fraction: f64,
    pub reward: f64,
    pub reward_branch: RewardBranch,
    pub l_agg: f64,
    pub l_local: f64,
    pub l_est: Option<f64>,
    /// Area gap between full and selected per-class shares.
    pub omega: f64,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
}

struct PendingStep {
    state: StateVector,
    action: ActionVector,
    reward: f64,
}

/// Everything the optimized client carries across rounds. Never crosses the
/// aggregation barrier.
pub struct OptimizedClient {
    pub client_id: usize,
    pub agent: Agent,
    pub rewards: RewardTracker,
    pub strategy: ActionStrategy,
    states: Vec<StateVector>,
    pending: Option<PendingStep>,
}

/// Inputs shared by all clients in a round.
pub struct RoundContext<'a> {
    pub arch: &'a [usize],
    pub dataset: &'a LabeledDataset,
    pub train: LocalTrainOptions,
    pub round: usize,
    pub total_rounds: usize,
    /// Seed for this client's local training this round.
    pub train_seed: u64,
    /// Seed for the action-partitioned subsample this round.
    pub partition_seed: u64,
}

impl OptimizedClient {
    pub fn new(client_id: usize, agent: Agent, reward_cfg: RewardConfig, strategy: ActionStrategy) -> Self {
        OptimizedClient {
            client_id,
            agent,
            rewards: RewardTracker::new(reward_cfg),
            strategy,
            states: Vec::new(),
            pending: None,
        }
    }

    fn lookback(&self, round: usize) -> Option<&StateVector> {
        let eta = self.agent.cfg.eta;
        self.states
            .iter()
            .rev()
            .find(|s| s.round + eta <= round)
            .or_else(|| self.states.first())
    }

    fn complete_pending(&mut self, next_state: &StateVector, terminal: bool) {
        if let Some(p) = self.pending.take() {
            self.agent
                .remember(Transition::new(p.state, p.action, p.reward, next_state.clone(), terminal));
        }
    }

    /// One round of data selection and local training on top of `w_t`.
    ///
    /// Returns the trained parameters, the number of samples used and the
    /// round log.
    pub fn round(
        &mut self,
        w_t: &ParamVector,
        partition: &ClientPartition,
        ctx: &RoundContext<'_>,
    ) -> Result<(ParamVector, usize, OptimizedRoundRecord)> {
        if ctx.round >= ctx.total_rounds {
            return Err(Error::invalid("round", "past the final round"));
        }
        let train_idx = partition.train_indices();
        let (x_full, y_full) = ctx.dataset.gather(&train_idx);
        let state = compute_state(w_t, ctx.arch, x_full.view(), &y_full, ctx.round)?;

        self.complete_pending(&state, false);
        let stats = self.agent.learn()?;

        let lookback = self.lookback(ctx.round).cloned().unwrap_or_else(|| state.clone());
        let counts = partition.train_class_counts();
        let epsilon = self.agent.cfg.epsilon_at(ctx.round, ctx.total_rounds);
        let decision = self.agent.decide(&state, &lookback, &counts, self.strategy, epsilon)?;
        self.states.push(state.clone());

        let subset = action_partition(partition, &decision.fractions.0, ctx.partition_seed)?;
        let (x_sel, y_sel) = ctx.dataset.gather(&subset.indices());

        let l_agg = loss_of(ctx.arch, w_t, x_full.view(), &y_full)?;
        let trained = client_local_train(ctx.arch, w_t, x_sel.view(), &y_sel, &ctx.train, w_t, ctx.train_seed)?;
        let l_local = loss_of(ctx.arch, &trained, x_full.view(), &y_full)?;

        let mu_a = decision.fractions.mean();
        let outcome = self.rewards.reward(ctx.round, l_agg, l_local, mu_a)?;

        let selected_share: Vec<f64> = subset
            .class_counts()
            .iter()
            .zip(&counts)
            .map(|(&s, &n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
            .collect();
        let full_share: Vec<f64> = counts.iter().map(|&n| if n == 0 { 0.0 } else { 1.0 }).collect();
        let omega = compute_performance_bound(&BoundInputs {
            full: full_share,
            selected: selected_share,
        })?
        .omega;

        let samples_used = subset.len();
        let record = OptimizedRoundRecord {
            client_id: self.client_id,
            state: state.f1_per_class.clone(),
            raw_action: decision.raw.0.clone(),
            fractions: decision.fractions.0.clone(),
            explored: decision.explored,
            epsilon,
            samples_used,
            train_size: train_idx.len(),
            data_fraction: samples_used as f64 / train_idx.len() as f64,
            reward: outcome.reward,
            reward_branch: outcome.branch,
            l_agg,
            l_local,
            l_est: outcome.l_est,
            omega,
            critic_loss: stats.map(|s| s.critic_loss),
            actor_objective: stats.map(|s| s.actor_objective),
        };
        self.pending = Some(PendingStep {
            state,
            action: decision.fractions,
            reward: outcome.reward,
        });
        Ok((trained, samples_used, record))
    }

    /// Close the trajectory with the state under the final global model.
    pub fn finish(&mut self, w_final: &ParamVector, partition: &ClientPartition, arch: &[usize], dataset: &LabeledDataset, round: usize) -> Result<()> {
        if self.pending.is_none() {
            return Ok(());
        }
        let (x, y) = dataset.gather(&partition.train_indices());
        let state = compute_state(w_final, arch, x.view(), &y, round)?;
        self.complete_pending(&state, true);
        Ok(())
    }
}
