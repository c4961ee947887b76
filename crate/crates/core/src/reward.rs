//! Piecewise reward with exponential loss-curve estimation.
//!
//! Before the warm-up of `tau` rounds the reward compares the aggregated-model
//! loss with the measured post-training loss. Afterwards the measured history
//! is fitted with `L(t) = −u·e^(−v·t)` and the extrapolated value replaces the
//! measurement as the reference.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Warm-up rounds before the fitted estimate is used.
    pub tau: usize,
    pub lambda: f64,
    pub div_guard: f64,
    /// Gauss-Newton iteration cap for the curve fit.
    pub fit_max_iters: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tau: 10,
            lambda: 0.25,
            div_guard: 1e-3,
            fit_max_iters: 50,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::invalid("reward.tau", "must be at least 1"));
        }
        if !(self.div_guard > 0.0) || !self.div_guard.is_finite() {
            return Err(Error::invalid("reward.div_guard", "must be positive"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::invalid("reward.lambda", "must be finite"));
        }
        Ok(())
    }
}

/// Measured local training losses, rounds strictly increasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    points: Vec<(usize, f64)>,
}

impl LossHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<(usize, f64)>) -> Result<Self> {
        let mut h = Self::new();
        for (t, l) in points {
            h.push(t, l)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, round: usize, loss: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if round <= last {
                return Err(Error::invalid(
                    "round",
                    format!("history rounds must increase ({round} after {last})"),
                ));
            }
        }
        self.points.push((round, loss));
        Ok(())
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub u: f64,
    pub v: f64,
    pub fit_valid: bool,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
}

impl ExpFit {
    fn invalid() -> Self {
        ExpFit {
            u: 0.0,
            v: 0.0,
            fit_valid: false,
            residual: f64::INFINITY,
        }
    }
}

fn sse(points: &[(f64, f64)], u: f64, v: f64) -> f64 {
    points
        .iter()
        .map(|&(t, l)| {
            let r = l + u * (-v * t).exp();
            r * r
        })
        .sum()
}

/// Least-squares fit of `L(t) = −u·e^(−v·t)`.
///
/// Starts from a log-domain linear regression on `|L|` and refines with up to
/// `max_iters` damped Gauss-Newton steps. The fit is flagged invalid when the
/// losses change sign (or hit zero) or the regression is degenerate.
pub fn fit_exponential(h: &LossHistory, max_iters: usize) -> Result<ExpFit> {
    if h.len() < 3 {
        return Err(Error::invalid("history", "need at least 3 points to fit"));
    }
    let pts: Vec<(f64, f64)> = h.points().iter().map(|&(t, l)| (t as f64, l)).collect();
    if pts.iter().any(|&(_, l)| !l.is_finite()) {
        return Ok(ExpFit::invalid());
    }
    let sign = if pts.iter().all(|&(_, l)| l > 0.0) {
        -1.0
    } else if pts.iter().all(|&(_, l)| l < 0.0) {
        1.0
    } else {
        return Ok(ExpFit::invalid());
    };

    let n = pts.len() as f64;
    let t_mean = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let y: Vec<f64> = pts.iter().map(|p| p.1.abs().ln()).collect();
    let y_mean = y.iter().sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - t_mean).powi(2)).sum();
    if stt <= 0.0 {
        return Ok(ExpFit::invalid());
    }
    let sty: f64 = pts.iter().zip(&y).map(|(p, yi)| (p.0 - t_mean) * (yi - y_mean)).sum();
    let slope = sty / stt;
    let intercept = y_mean - slope * t_mean;
    let mut u = sign * intercept.exp();
    let mut v = -slope;
    let mut cost = sse(&pts, u, v);

    for _ in 0..max_iters {
        // residual r = L + u·e^(−vt); dr/du = e^(−vt), dr/dv = −u·t·e^(−vt)
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(t, l) in &pts {
            let e = (-v * t).exp();
            let r = l + u * e;
            let ju = e;
            let jv = -u * t * e;
            a11 += ju * ju;
            a12 += ju * jv;
            a22 += jv * jv;
            g1 += ju * r;
            g2 += jv * r;
        }
        let det = a11 * a22 - a12 * a12;
        if !(det.abs() > f64::EPSILON * (a11 * a22).abs()) {
            break;
        }
        let du = -(a22 * g1 - a12 * g2) / det;
        let dv = -(a11 * g2 - a12 * g1) / det;
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let (nu, nv) = (u + step * du, v + step * dv);
            let c = sse(&pts, nu, nv);
            if c.is_finite() && c < cost {
                u = nu;
                v = nv;
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                cost = c;
                improved = rel > 1e-15;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(ExpFit {
        u,
        v,
        fit_valid: u.is_finite() && v.is_finite(),
        residual: (cost / n).sqrt(),
    })
}

/// `−u·e^(−v·t)` for a valid fit.
pub fn estimate_loss(f: &ExpFit, t: usize) -> Result<f64> {
    if !f.fit_valid {
        return Err(Error::InvalidFit);
    }
    Ok(-f.u * (-f.v * t as f64).exp())
}

/// `((L_agg − L_ref)/L_ref)·1/(mu_a − λ)`, with the denominator held at
/// `±div_guard` when `|mu_a − λ|` falls below it.
pub fn compute_reward(l_agg: f64, l_ref: f64, mu_a: f64, cfg: &RewardConfig) -> Result<f64> {
    if !(l_ref > 0.0) || !l_ref.is_finite() {
        return Err(Error::invalid("l_ref", format!("reference loss must be positive, got {l_ref}")));
    }
    if !mu_a.is_finite() || !l_agg.is_finite() {
        return Err(Error::invalid("reward inputs", "must be finite"));
    }
    let mut denom = mu_a - cfg.lambda;
    if denom.abs() < cfg.div_guard {
        denom = if denom < 0.0 { -cfg.div_guard } else { cfg.div_guard };
    }
    Ok((l_agg - l_ref) / l_ref / denom)
}

/// Which loss the reward was measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardBranch {
    Measured,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub reward: f64,
    pub branch: RewardBranch,
    pub l_ref: f64,
    pub l_est: Option<f64>,
}

/// Owns the loss history of the optimized client and picks the reference loss.
#[derive(Debug, Clone, Default)]
pub struct RewardTracker {
    pub cfg: RewardConfig,
    history: LossHistory,
}

impl RewardTracker {
    pub fn new(cfg: RewardConfig) -> Self {
        RewardTracker {
            cfg,
            history: LossHistory::new(),
        }
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    /// Estimated loss at round `t` from the history so far, if a valid fit exists.
    pub fn estimate(&self, t: usize) -> Option<f64> {
        if t < self.cfg.tau || self.history.len() < 3 {
            return None;
        }
        let fit = fit_exponential(&self.history, self.cfg.fit_max_iters).ok()?;
        estimate_loss(&fit, t).ok().filter(|l| *l > 0.0 && l.is_finite())
    }

    /// Reward for round `t`, then record the measured loss in the history.
    pub fn reward(&mut self, t: usize, l_agg: f64, l_local: f64, mu_a: f64) -> Result<RewardOutcome> {
        let l_est = self.estimate(t);
        let (l_ref, branch) = match l_est {
            Some(est) => (est, RewardBranch::Estimated),
            None => (l_local, RewardBranch::Measured),
        };
        let reward = compute_reward(l_agg, l_ref, mu_a, &self.cfg)?;
        self.history.push(t, l_local)?;
        Ok(RewardOutcome {
            reward,
            branch,
            l_ref,
            l_est,
        })
    }
}
