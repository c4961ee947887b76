//! Server-side aggregation of client parameter vectors.
//!
//! Aggregators only ever see [`ClientUpdate`]s (parameters and sample counts),
//! never client data.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::ParamVector;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    /// Training samples used this round.
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedAvgM,
    FedMedian,
    /// Server side is FedAvg; the proximal term lives in client training.
    FedProx,
    /// Simplified divergence-minimizing cache aggregator ([`fed_cda_lite`]).
    FedCda,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::FedAvg,
        Strategy::FedAvgM,
        Strategy::FedMedian,
        Strategy::FedProx,
        Strategy::FedCda,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedAvgM => "fedavgm",
            Strategy::FedMedian => "fedmedian",
            Strategy::FedProx => "fedprox",
            Strategy::FedCda => "fedcda",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(
                    "aggregation",
                    format!("unknown strategy `{s}` (expected fedavg|fedavgm|fedmedian|fedprox|fedcda)"),
                )
            })
    }
}

/// Tunables for the stateful aggregators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationParams {
    pub momentum_beta: f64,
    pub server_lr: f64,
    pub cache_depth: usize,
}

impl Default for AggregationParams {
    fn default() -> Self {
        AggregationParams {
            momentum_beta: 0.9,
            server_lr: 1.0,
            cache_depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_params: ParamVector,
    pub momentum_buffer: ParamVector,
    /// Most recent first, at most `cache_depth` entries per client.
    pub model_cache: BTreeMap<usize, VecDeque<ParamVector>>,
    pub round: usize,
}

impl ServerState {
    pub fn new(global_params: ParamVector) -> Self {
        let n = global_params.len();
        ServerState {
            global_params,
            momentum_buffer: ParamVector::zeros(n),
            model_cache: BTreeMap::new(),
            round: 0,
        }
    }

    /// Run one aggregation round and install the result as the new global model.
    pub fn aggregate(
        &mut self,
        strategy: Strategy,
        updates: &[ClientUpdate],
        params: &AggregationParams,
    ) -> Result<&ParamVector> {
        let mut sorted = updates.to_vec();
        sorted.sort_by_key(|u| u.client_id);
        check_updates(&sorted)?;
        if sorted[0].params.len() != self.global_params.len() {
            return Err(Error::LengthMismatch {
                left: self.global_params.len(),
                right: sorted[0].params.len(),
            });
        }
        let next = match strategy {
            Strategy::FedAvg | Strategy::FedProx => fed_avg(&sorted)?,
            Strategy::FedAvgM => fed_avg_m(&sorted, self, params.momentum_beta, params.server_lr)?,
            Strategy::FedMedian => fed_median(&sorted)?,
            Strategy::FedCda => fed_cda_lite(&sorted, self, params.cache_depth)?,
        };
        self.global_params = next;
        self.round += 1;
        Ok(&self.global_params)
    }
}

fn check_updates(updates: &[ClientUpdate]) -> Result<usize> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    let n = first.params.len();
    if let Some(u) = updates.iter().find(|u| u.params.len() != n) {
        return Err(Error::LengthMismatch {
            left: n,
            right: u.params.len(),
        });
    }
    Ok(n)
}

fn weighted_mean<'a>(items: impl Iterator<Item = (&'a ParamVector, usize)>, len: usize) -> Result<ParamVector> {
    let items: Vec<_> = items.collect();
    let total: f64 = items.iter().map(|(_, n)| *n as f64).sum();
    if total <= 0.0 {
        return Err(Error::invalid("n_samples", "total sample count must be positive"));
    }
    // Normalizing the weights first keeps a single update bit-identical.
    let mut acc = vec![0.0; len];
    for (p, n) in items {
        let w = n as f64 / total;
        for (a, v) in acc.iter_mut().zip(&p.0) {
            *a += w * v;
        }
    }
    Ok(ParamVector(acc))
}

/// Sample-size-weighted mean `Σ n_k·w_k / Σ n_k`.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let n = check_updates(updates)?;
    weighted_mean(updates.iter().map(|u| (&u.params, u.n_samples)), n)
}

/// Server momentum: `buf ← β·buf + (global − avg)`, `global ← global − lr·buf`.
pub fn fed_avg_m(
    updates: &[ClientUpdate],
    state: &mut ServerState,
    beta: f64,
    server_lr: f64,
) -> Result<ParamVector> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid("fedavgm.beta", "must lie in [0, 1)"));
    }
    if !(server_lr > 0.0) {
        return Err(Error::invalid("fedavgm.server_lr", "must be positive"));
    }
    let avg = fed_avg(updates)?;
    let global = &state.global_params;
    if avg.len() != global.len() || state.momentum_buffer.len() != global.len() {
        return Err(Error::LengthMismatch {
            left: global.len(),
            right: avg.len(),
        });
    }
    for ((b, g), a) in state.momentum_buffer.0.iter_mut().zip(&global.0).zip(&avg.0) {
        *b = beta * *b + (g - a);
    }
    Ok(ParamVector(
        global
            .0
            .iter()
            .zip(&state.momentum_buffer.0)
            .map(|(g, b)| g - server_lr * b)
            .collect(),
    ))
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Coordinate-wise median; even counts take the midpoint of the middle pair.
pub fn fed_median(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let n = check_updates(updates)?;
    let mut column = vec![0.0; updates.len()];
    Ok(ParamVector(
        (0..n)
            .map(|i| {
                for (slot, u) in column.iter_mut().zip(updates) {
                    *slot = u.params.0[i];
                }
                median_of(&mut column)
            })
            .collect(),
    ))
}

/// Simplified cross-round divergence-minimizing aggregation.
///
/// Each client contributes whichever of its current update and its (at most
/// `depth`) cached previous models lies closest to the current global model;
/// the chosen models are then sample-weighted averaged. The cache is updated
/// with the current updates afterwards. Ties prefer the current update, then
/// more recent cache entries.
pub fn fed_cda_lite(updates: &[ClientUpdate], state: &mut ServerState, depth: usize) -> Result<ParamVector> {
    let n = check_updates(updates)?;
    if depth == 0 {
        return Err(Error::invalid("fedcda.depth", "must be at least 1"));
    }
    let mut chosen = Vec::with_capacity(updates.len());
    for u in updates {
        let mut best = &u.params;
        let mut best_dist = u.params.sq_distance(&state.global_params)?;
        if let Some(cache) = state.model_cache.get(&u.client_id) {
            for cached in cache.iter().take(depth) {
                let d = cached.sq_distance(&state.global_params)?;
                if d < best_dist {
                    best = cached;
                    best_dist = d;
                }
            }
        }
        chosen.push((best.clone(), u.n_samples));
    }
    let out = weighted_mean(chosen.iter().map(|(p, n)| (p, *n)), n)?;
    for u in updates {
        let cache = state.model_cache.entry(u.client_id).or_default();
        cache.push_front(u.params.clone());
        cache.truncate(depth);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;
    use super::Strategy;

    fn upd(id: usize, v: &[f64], n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: ParamVector(v.to_vec()),
            n_samples: n,
        }
    }

    #[test]
    fn test_fed_avg_examples() {
        assert_eq!(fed_avg(&[upd(0, &[0.0], 1), upd(1, &[1.0], 3)]).unwrap().0, vec![0.75]);
        let same = [upd(0, &[1.5, -2.0], 4), upd(1, &[1.5, -2.0], 9)];
        assert_eq!(fed_avg(&same).unwrap().0, vec![1.5, -2.0]);
        let eq = fed_avg(&[upd(0, &[1.0, 2.0], 5), upd(1, &[3.0, 6.0], 5)]).unwrap();
        assert_eq!(eq.0, vec![2.0, 4.0]);
        assert_eq!(fed_avg(&[]).unwrap_err(), Error::Empty("client updates"));
        assert!(fed_avg(&[upd(0, &[1.0], 1), upd(1, &[1.0, 2.0], 1)]).is_err());
    }

    #[test]
    fn test_fed_avg_m_reduces_to_fed_avg() {
        let ups = [upd(0, &[1.0, 4.0], 2), upd(1, &[3.0, 0.0], 6)];
        let mut st = ServerState::new(ParamVector(vec![10.0, -3.0]));
        assert_eq!(fed_avg_m(&ups, &mut st, 0.0, 1.0).unwrap(), fed_avg(&ups).unwrap());
    }

    #[test]
    fn test_fed_avg_m_recursion() {
        let mut st = ServerState::new(ParamVector(vec![0.0]));
        // average one below the global each round: delta = 1
        let round = |st: &mut ServerState| {
            let target = st.global_params.0[0] - 1.0;
            let g = fed_avg_m(&[upd(0, &[target], 1)], st, 0.5, 1.0).unwrap();
            st.global_params = g;
            st.global_params.0[0]
        };
        assert_eq!(round(&mut st), -1.0);
        assert_eq!(round(&mut st), -2.5);
    }

    #[test]
    fn test_fed_avg_m_zero_delta() {
        let mut st = ServerState::new(ParamVector(vec![2.0, 3.0]));
        for _ in 0..3 {
            let g = fed_avg_m(&[upd(0, &[2.0, 3.0], 1)], &mut st, 0.9, 1.0).unwrap();
            assert_eq!(g.0, vec![2.0, 3.0]);
            st.global_params = g;
        }
    }

    #[test]
    fn test_fed_median_examples() {
        let m = fed_median(&[upd(0, &[1.0, 5.0], 1), upd(1, &[2.0, 6.0], 1), upd(2, &[9.0, 7.0], 1)]);
        assert_eq!(m.unwrap().0, vec![2.0, 6.0]);
        let mut ups: Vec<_> = (0..4).map(|i| upd(i, &[1.0, 1.0], 1)).collect();
        ups.push(upd(4, &[1e9, -1e9], 100));
        assert_eq!(fed_median(&ups).unwrap().0, vec![1.0, 1.0]);
        assert_eq!(fed_median(&[upd(0, &[0.0], 1), upd(1, &[1.0], 1)]).unwrap().0, vec![0.5]);
        assert!(fed_median(&[]).is_err());
    }

    #[test]
    fn test_cda_lite_without_history_is_fed_avg() {
        let ups = [upd(0, &[1.0, 2.0], 3), upd(1, &[5.0, -1.0], 1)];
        let mut st = ServerState::new(ParamVector(vec![0.0, 0.0]));
        assert_eq!(fed_cda_lite(&ups, &mut st, 1).unwrap(), fed_avg(&ups).unwrap());
        assert_eq!(st.model_cache[&0].len(), 1);
    }

    #[test]
    fn test_cda_lite_prefers_cached_model_at_global() {
        let mut st = ServerState::new(ParamVector(vec![0.0]));
        st.model_cache.insert(0, VecDeque::from(vec![ParamVector(vec![0.0])]));
        let out = fed_cda_lite(&[upd(0, &[100.0], 1)], &mut st, 3).unwrap();
        assert_eq!(out.0, vec![0.0]);
        assert_eq!(st.model_cache[&0].front().unwrap().0, vec![100.0]);
    }

    #[test]
    fn test_cda_lite_matches_enumeration() {
        let global = ParamVector(vec![0.5, -0.5]);
        let caches = [
            vec![vec![3.0, 3.0], vec![0.4, -0.2], vec![9.0, 0.0]],
            vec![vec![-2.0, 1.0], vec![1.0, 1.0]],
        ];
        let current = [vec![1.0, -1.0], vec![0.6, -0.6]];
        let ns = [2usize, 5];

        let mut st = ServerState::new(global.clone());
        for (id, cache) in caches.iter().enumerate() {
            st.model_cache
                .insert(id, cache.iter().map(|v| ParamVector(v.clone())).collect());
        }
        let ups: Vec<_> = (0..2).map(|i| upd(i, &current[i], ns[i])).collect();
        let got = fed_cda_lite(&ups, &mut st, 3).unwrap();

        // exhaustive: every combination of candidates, minimal total distance wins
        let dist = |v: &[f64]| (v[0] - 0.5).powi(2) + (v[1] + 0.5).powi(2);
        let cands: Vec<Vec<Vec<f64>>> = (0..2)
            .map(|i| std::iter::once(current[i].clone()).chain(caches[i].iter().cloned()).collect())
            .collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for a in &cands[0] {
            for b in &cands[1] {
                let total = dist(a) + dist(b);
                if best.as_ref().is_none_or(|(d, _)| total < *d) {
                    let avg = (0..2).map(|j| (a[j] * 2.0 + b[j] * 5.0) / 7.0).collect();
                    best = Some((total, avg));
                }
            }
        }
        let expected = best.unwrap().1;
        for (g, e) in got.0.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn test_strategy_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("fedsgd".parse::<Strategy>().is_err());
    }

    #[test]
    fn test_server_state_sorts_updates() {
        let ups = [upd(2, &[1.0], 1), upd(0, &[3.0], 1), upd(1, &[2.0], 1)];
        let mut a = ServerState::new(ParamVector(vec![0.0]));
        let mut b = a.clone();
        let mut rev = ups.to_vec();
        rev.reverse();
        let params = AggregationParams::default();
        for s in Strategy::ALL {
            assert_eq!(a.aggregate(s, &ups, &params).unwrap().clone(), b.aggregate(s, &rev, &params).unwrap().clone());
        }
        assert_eq!(a.round, 5);
    }

    fn updates_strategy() -> impl proptest::strategy::Strategy<Value = Vec<ClientUpdate>> {
        (1usize..5, 1usize..8).prop_flat_map(|(dim, count)| {
            prop::collection::vec(
                (prop::collection::vec(-100.0f64..100.0, dim), 1usize..50),
                count,
            )
            .prop_map(|items| {
                items
                    .into_iter()
                    .enumerate()
                    .map(|(i, (v, n))| ClientUpdate {
                        client_id: i,
                        params: ParamVector(v),
                        n_samples: n,
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn prop_bounded_and_permutation_invariant(ups in updates_strategy(), rot in 0usize..8) {
            let avg = fed_avg(&ups).unwrap();
            let med = fed_median(&ups).unwrap();
            for i in 0..avg.len() {
                let lo = ups.iter().map(|u| u.params.0[i]).fold(f64::INFINITY, f64::min);
                let hi = ups.iter().map(|u| u.params.0[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(avg.0[i] >= lo - 1e-9 && avg.0[i] <= hi + 1e-9);
                prop_assert!(med.0[i] >= lo && med.0[i] <= hi);
            }
            let mut rotated = ups.clone();
            let r = rot % ups.len();
            rotated.rotate_left(r);
            let params = AggregationParams::default();
            for s in Strategy::ALL {
                let mut a = ServerState::new(ParamVector::zeros(avg.len()));
                let mut b = a.clone();
                prop_assert_eq!(a.aggregate(s, &ups, &params).unwrap(), b.aggregate(s, &rotated, &params).unwrap());
            }
        }
    }
}
