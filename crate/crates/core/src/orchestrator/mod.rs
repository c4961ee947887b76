//! The federated round loop.
//!
//! Each round the server samples `ceil(c_ratio·K)` clients, every sampled
//! naive client trains on its full training split, the optimized client (if
//! sampled) trains on an agent-selected subset, and the server aggregates.
//! After the last round the optimized client fine-tunes on its full split.
//!
//! All randomness flows from the four named seeds in [`Seeds`], so a run is
//! bit-reproducible from its config.

mod bound;
mod client;

use std::path::PathBuf;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::agent::{ActionStrategy, Agent, AgentConfig};
use crate::aggregation::{AggregationParams, ClientUpdate, ServerState, Strategy};
use crate::data::{self, ClientPartition, LabeledDataset};
use crate::nn::{Mlp, ParamVector};
use crate::reward::RewardConfig;
use crate::{seed, Error, Result};

pub use bound::{compute_performance_bound, BoundInputs, PerformanceBound};
pub use client::{
    client_local_train, loss_of, post_fl_finetune, summary_of, FinetuneEpoch, FinetuneOutcome, LocalTrainOptions,
    OptimizedClient, OptimizedRoundRecord, RoundContext,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    /// Dirichlet concentration.
    pub alpha: f64,
    pub split_ratio: f64,
    /// Load a header-free CSV (label last) instead of generating blobs.
    pub csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 4,
            samples_per_class: 400,
            dim: 16,
            spread: 3.0,
            alpha: 0.5,
            split_ratio: 0.8,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![32] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub agent: u64,
    pub sampling: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            init: 2,
            agent: 3,
            sampling: 4,
        }
    }
}

impl Seeds {
    /// All four streams derived from one number. Values stay below 2^63 so
    /// they fit a signed 64-bit config integer.
    pub fn from_base(base: u64) -> Self {
        let d = |tag| seed::derive(base, &[tag]) >> 1;
        Seeds {
            data: d(1),
            init: d(2),
            agent: d(3),
            sampling: d(4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedAvgMConfig {
    pub beta: f64,
    pub server_lr: f64,
}

impl Default for FedAvgMConfig {
    fn default() -> Self {
        let p = AggregationParams::default();
        FedAvgMConfig {
            beta: p.momentum_beta,
            server_lr: p.server_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedProxConfig {
    pub mu: f64,
}

impl Default for FedProxConfig {
    fn default() -> Self {
        FedProxConfig { mu: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedCdaConfig {
    pub depth: usize,
}

impl Default for FedCdaConfig {
    fn default() -> Self {
        FedCdaConfig {
            depth: AggregationParams::default().cache_depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            patience: 10,
            max_epochs: 200,
        }
    }
}

/// Client id of the optimized client, or `"none"` for plain FL.
mod optional_client {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Id(u64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(id) => s.serialize_u64(*id as u64),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<usize>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Id(id) => Ok(Some(id as usize)),
            Repr::Text(t) if t == "none" => Ok(None),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a client id or \"none\", got \"{t}\""
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Total clients K.
    pub clients: usize,
    /// Fraction of clients sampled per round.
    pub c_ratio: f64,
    /// FL rounds T.
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(with = "optional_client")]
    pub optimized_client: Option<usize>,
    /// Ablation: the designated client keeps its id in the records but trains
    /// on its full split like every other client.
    pub naive_all: bool,
    pub aggregation: Strategy,
    pub action_strategy: ActionStrategy,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub seeds: Seeds,
    pub fedavgm: FedAvgMConfig,
    pub fedprox: FedProxConfig,
    pub fedcda: FedCdaConfig,
    pub finetune: FinetuneConfig,
    pub agent: AgentConfig,
    pub reward: RewardConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            clients: 8,
            c_ratio: 1.0,
            rounds: 100,
            local_epochs: 1,
            batch_size: 32,
            lr: 0.05,
            optimized_client: Some(0),
            naive_all: false,
            aggregation: Strategy::FedAvg,
            action_strategy: ActionStrategy::Normalized,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            seeds: Seeds::default(),
            fedavgm: FedAvgMConfig::default(),
            fedprox: FedProxConfig::default(),
            fedcda: FedCdaConfig::default(),
            finetune: FinetuneConfig::default(),
            agent: AgentConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

fn sample_size(k: usize, c_ratio: f64) -> usize {
    // 1e-9 keeps exact products such as 0.5·8 from rounding up.
    ((c_ratio * k as f64) - 1e-9).ceil().max(1.0) as usize
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::invalid("clients", "need at least one client"));
        }
        if !(self.c_ratio > 0.0 && self.c_ratio <= 1.0) {
            return Err(Error::invalid("c_ratio", "must lie in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", "must be finite and nonnegative"));
        }
        if let Some(id) = self.optimized_client {
            if id >= self.clients {
                return Err(Error::invalid("optimized_client", format!("{id} is not below clients = {}", self.clients)));
            }
        }
        let d = &self.data;
        if d.csv.is_none() {
            if d.classes < 2 {
                return Err(Error::invalid("data.classes", "need at least 2"));
            }
            if d.samples_per_class == 0 {
                return Err(Error::invalid("data.samples_per_class", "must be positive"));
            }
            if d.dim == 0 {
                return Err(Error::invalid("data.dim", "must be positive"));
            }
            if !(d.spread >= 0.0) || !d.spread.is_finite() {
                return Err(Error::invalid("data.spread", "must be finite and nonnegative"));
            }
        }
        if !(d.alpha > 0.0) || !d.alpha.is_finite() {
            return Err(Error::invalid("data.alpha", "must be positive"));
        }
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::invalid("data.split_ratio", "must lie in (0, 1)"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::invalid("model.hidden", "widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.fedavgm.beta) {
            return Err(Error::invalid("fedavgm.beta", "must lie in [0, 1)"));
        }
        if !(self.fedavgm.server_lr > 0.0) {
            return Err(Error::invalid("fedavgm.server_lr", "must be positive"));
        }
        if !(self.fedprox.mu >= 0.0) {
            return Err(Error::invalid("fedprox.mu", "must be nonnegative"));
        }
        if self.fedcda.depth == 0 {
            return Err(Error::invalid("fedcda.depth", "must be at least 1"));
        }
        if self.finetune.max_epochs == 0 {
            return Err(Error::invalid("finetune.max_epochs", "must be at least 1"));
        }
        self.agent.validate()?;
        self.reward.validate()
    }

    pub fn sample_size(&self) -> usize {
        sample_size(self.clients, self.c_ratio)
    }

    /// The client actually driven by the agent.
    pub fn agent_client(&self) -> Option<usize> {
        self.optimized_client.filter(|_| !self.naive_all)
    }

    fn aggregation_params(&self) -> AggregationParams {
        AggregationParams {
            momentum_beta: self.fedavgm.beta,
            server_lr: self.fedavgm.server_lr,
            cache_depth: self.fedcda.depth,
        }
    }

    fn prox_mu(&self) -> f64 {
        if self.aggregation == Strategy::FedProx {
            self.fedprox.mu
        } else {
            0.0
        }
    }

    pub fn load_dataset(&self) -> Result<LabeledDataset> {
        let d = &self.data;
        match &d.csv {
            Some(path) => data::load_csv(path, None),
            None => data::generate_synthetic(d.classes, d.samples_per_class, d.dim, d.spread, self.seeds.data),
        }
    }
}

/// Uniform sample without replacement of `ceil(c_ratio·K)` client ids, ascending.
pub fn sample_clients<R: Rng>(k: usize, c_ratio: f64, rng: &mut R) -> Vec<usize> {
    let m = sample_size(k, c_ratio).min(k);
    let mut ids = index::sample(rng, k, m).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client_id: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Training samples used this round (0 when not sampled).
    pub samples_used: usize,
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub aggregation: Strategy,
    pub classes: usize,
    pub sampled: Vec<usize>,
    /// Designated optimized client, also set in naive-all ablation runs.
    pub optimized_client: Option<usize>,
    /// Global model after this round's aggregation, scored on each client's
    /// validation split.
    pub clients: Vec<ClientRoundMetrics>,
    /// Unweighted mean validation accuracy over the other clients.
    pub naive_mean_accuracy: f64,
    pub optimized: Option<OptimizedRoundRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rounds: Vec<RoundRecord>,
    pub finetune: Option<FinetuneOutcome>,
    pub final_global: ParamVector,
    /// Final model per client: the global model, or the fine-tuned one for the
    /// optimized client.
    pub client_models: Vec<ParamVector>,
    pub partitions: Vec<ClientPartition>,
    pub arch: Vec<usize>,
}

impl RunOutput {
    /// Validation accuracy of the optimized client per round.
    pub fn optimized_accuracy(&self) -> Option<Vec<f64>> {
        let id = self.rounds.first()?.optimized_client?;
        Some(self.rounds.iter().map(|r| r.clients[id].accuracy).collect())
    }
}

fn build_partitions(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Result<Vec<ClientPartition>> {
    data::dirichlet_partition(ds, cfg.clients, cfg.data.alpha, cfg.seeds.data)?
        .iter()
        .map(|raw| data::train_val_split(raw, cfg.data.split_ratio, cfg.seeds.data))
        .collect()
}

struct ClientData {
    train_x: ndarray::Array2<f64>,
    train_y: Vec<usize>,
    val_x: ndarray::Array2<f64>,
    val_y: Vec<usize>,
}

/// Run the full experiment described by `cfg`.
pub fn run_federated(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let partitions = build_partitions(cfg, &ds)?;
    let client_data: Vec<ClientData> = partitions
        .iter()
        .map(|p| {
            let (train_x, train_y) = ds.gather(&p.train_indices());
            let (val_x, val_y) = ds.gather(&p.val_indices);
            ClientData {
                train_x,
                train_y,
                val_x,
                val_y,
            }
        })
        .collect();

    let mut arch = vec![ds.dim()];
    arch.extend(&cfg.model.hidden);
    arch.push(ds.num_classes);
    let w0 = Mlp::new(&arch, cfg.seeds.init)?.params();

    let mut optimized = match cfg.agent_client() {
        Some(id) => {
            if partitions[id].train_len() == 0 {
                return Err(Error::invalid("optimized_client", format!("client {id} has no training data")));
            }
            let agent = Agent::new(ds.num_classes, cfg.agent.clone(), cfg.seeds.agent)?;
            Some(OptimizedClient::new(id, agent, cfg.reward, cfg.action_strategy))
        }
        None => None,
    };

    let train_opts = LocalTrainOptions {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        prox_mu: cfg.prox_mu(),
    };
    let agg_params = cfg.aggregation_params();
    let mut server = ServerState::new(w0);
    let mut sampling_rng = seed::rng(cfg.seeds.sampling, &[0x5e1]);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let train_seed = |t: usize, k: usize| seed::derive(cfg.seeds.init, &[0x7a, t as u64, k as u64]);

    for t in 0..cfg.rounds {
        let sampled = sample_clients(cfg.clients, cfg.c_ratio, &mut sampling_rng);
        let w_t = server.global_params.clone();

        let naive: Vec<usize> = sampled
            .iter()
            .copied()
            .filter(|&k| Some(k) != cfg.agent_client() && !client_data[k].train_y.is_empty())
            .collect();
        let mut updates: Vec<ClientUpdate> = naive
            .par_iter()
            .map(|&k| {
                let d = &client_data[k];
                let params = client_local_train(&arch, &w_t, d.train_x.view(), &d.train_y, &train_opts, &w_t, train_seed(t, k))?;
                Ok(ClientUpdate {
                    client_id: k,
                    params,
                    n_samples: d.train_y.len(),
                })
            })
            .collect::<Result<_>>()?;

        let mut opt_record = None;
        if let Some(oc) = optimized.as_mut() {
            let k = oc.client_id;
            if sampled.contains(&k) {
                let ctx = RoundContext {
                    arch: &arch,
                    dataset: &ds,
                    train: train_opts,
                    round: t,
                    total_rounds: cfg.rounds,
                    train_seed: train_seed(t, k),
                    partition_seed: seed::derive(cfg.seeds.agent, &[0x9a, t as u64]),
                };
                let (params, used, rec) = oc.round(&w_t, &partitions[k], &ctx)?;
                updates.push(ClientUpdate {
                    client_id: k,
                    params,
                    n_samples: used,
                });
                opt_record = Some(rec);
            }
        }

        if updates.is_empty() {
            return Err(Error::invalid("round", format!("round {t}: no sampled client has training data")));
        }
        let used_by: Vec<(usize, usize)> = updates.iter().map(|u| (u.client_id, u.n_samples)).collect();
        server.aggregate(cfg.aggregation, &updates, &agg_params)?;

        let clients: Vec<ClientRoundMetrics> = client_data
            .par_iter()
            .enumerate()
            .map(|(k, d)| {
                let s = summary_of(&arch, &server.global_params, d.val_x.view(), &d.val_y)?;
                Ok(ClientRoundMetrics {
                    client_id: k,
                    accuracy: s.accuracy,
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    samples_used: used_by.iter().find(|(id, _)| *id == k).map_or(0, |(_, n)| *n),
                    train_size: d.train_y.len(),
                })
            })
            .collect::<Result<_>>()?;
        let naive_acc: Vec<f64> = clients
            .iter()
            .filter(|c| Some(c.client_id) != cfg.optimized_client)
            .map(|c| c.accuracy)
            .collect();
        let naive_mean_accuracy = if naive_acc.is_empty() {
            0.0
        } else {
            naive_acc.iter().sum::<f64>() / naive_acc.len() as f64
        };
        log::debug!("round {t}: naive mean accuracy {naive_mean_accuracy:.4}");
        rounds.push(RoundRecord {
            round: t,
            aggregation: cfg.aggregation,
            classes: ds.num_classes,
            sampled,
            optimized_client: cfg.optimized_client,
            clients,
            naive_mean_accuracy,
            optimized: opt_record,
        });
    }

    let final_global = server.global_params.clone();
    let mut client_models = vec![final_global.clone(); cfg.clients];
    let mut finetune = None;
    if let Some(oc) = optimized.as_mut() {
        oc.finish(&final_global, &partitions[oc.client_id], &arch, &ds, cfg.rounds)?;
    }
    // The ablation fine-tunes the designated client too, so the two modes differ
    // only in how data is selected during FL.
    if let Some(k) = cfg.optimized_client.filter(|&k| !client_data[k].train_y.is_empty()) {
        let d = &client_data[k];
        let outcome = post_fl_finetune(
            &arch,
            &final_global,
            (d.train_x.view(), &d.train_y),
            (d.val_x.view(), &d.val_y),
            cfg.batch_size,
            cfg.lr,
            cfg.finetune.patience,
            cfg.finetune.max_epochs,
            seed::derive(cfg.seeds.init, &[0xf7, k as u64]),
        )?;
        client_models[k] = outcome.params.clone();
        finetune = Some(outcome);
    }

    Ok(RunOutput {
        rounds,
        finetune,
        final_global,
        client_models,
        partitions,
        arch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            clients: 3,
            rounds: 4,
            data: DataConfig {
                classes: 3,
                samples_per_class: 40,
                dim: 4,
                ..Default::default()
            },
            model: ModelConfig { hidden: vec![8] },
            agent: AgentConfig {
                batch_size: 2,
                hidden: 8,
                ..Default::default()
            },
            reward: RewardConfig {
                tau: 2,
                ..Default::default()
            },
            finetune: FinetuneConfig {
                patience: 2,
                max_epochs: 5,
            },
            ..Default::default()
        }
    }

    #[test]
    fn test_sample_clients_sizes() {
        let mut rng = seed::rng(0, &[]);
        assert_eq!(sample_clients(8, 1.0, &mut rng), (0..8).collect::<Vec<_>>());
        for (k, r, m) in [(8, 0.5, 4), (10, 0.25, 3), (3, 0.01, 1), (7, 0.3, 3)] {
            let s = sample_clients(k, r, &mut rng);
            assert_eq!(s.len(), m);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn test_validate_rejects_bad_values() {
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert!(matches!(bad(|c| c.c_ratio = 1.5), Error::InvalidArgument { name: "c_ratio", .. }));
        assert!(matches!(bad(|c| c.rounds = 0), Error::InvalidArgument { name: "rounds", .. }));
        assert!(matches!(bad(|c| c.optimized_client = Some(8)), Error::InvalidArgument { name: "optimized_client", .. }));
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn test_run_is_deterministic() {
        let cfg = tiny();
        let a = run_federated(&cfg).unwrap();
        let b = run_federated(&cfg).unwrap();
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.final_global, b.final_global);
        assert_eq!(a.rounds.len(), 4);
        assert!(a.finetune.is_some());
    }

    #[test]
    fn test_every_strategy_runs() {
        for s in Strategy::ALL {
            let cfg = ExperimentConfig {
                aggregation: s,
                action_strategy: ActionStrategy::WeightedMetric,
                ..tiny()
            };
            let out = run_federated(&cfg).unwrap();
            for r in &out.rounds {
                let o = r.optimized.as_ref().unwrap();
                assert!(o.fractions.iter().all(|&f| f > 0.0 && f <= 1.0));
                assert!(o.samples_used <= o.train_size);
            }
        }
    }

    #[test]
    fn test_naive_all_keeps_designation() {
        let cfg = ExperimentConfig { naive_all: true, ..tiny() };
        let out = run_federated(&cfg).unwrap();
        for r in &out.rounds {
            assert!(r.optimized.is_none());
            assert_eq!(r.optimized_client, Some(0));
            assert_eq!(r.clients[0].samples_used, r.clients[0].train_size);
        }
        assert!(out.finetune.is_some());
        assert_eq!(out.optimized_accuracy().unwrap().len(), 4);
    }

    #[test]
    fn test_partial_participation() {
        let cfg = ExperimentConfig {
            clients: 4,
            c_ratio: 0.5,
            rounds: 6,
            ..tiny()
        };
        let out = run_federated(&cfg).unwrap();
        for r in &out.rounds {
            assert_eq!(r.sampled.len(), 2);
            assert_eq!(r.optimized.is_some(), r.sampled.contains(&0));
        }
    }
}
