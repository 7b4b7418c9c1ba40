//! Monte Carlo checks of the spurious-survivor bounds and the non-dispersion trend.
//!
//! Scores are i.i.d. `N(0, sigma^2 / d)`. Each (seed, i, trial) triple owns an
//! independent ChaCha stream, so results do not depend on scheduling.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::attn::{rectified_power, AttnParams};
use crate::diagnostics::{effective_entropy, ENTROPY_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma: f64,
    pub head_dim: usize,
    pub distribution: NoiseDistribution,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            head_dim: 64,
            distribution: NoiseDistribution::Gaussian,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.head_dim == 0 {
            return Err(Error::InvalidParam("head_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Standard deviation of a single score.
    pub fn score_std(&self) -> f64 {
        self.sigma / (self.head_dim as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub rows: Vec<usize>,
    pub trials: usize,
    pub params: AttnParams,
    pub relevant_count: usize,
    pub relevant_margin: f64,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            rows: vec![1, 64, 256, 1024, 4096],
            trials: 2000,
            params: AttnParams::default(),
            relevant_count: 0,
            relevant_margin: 0.2,
            seed: 1337,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.trials < 2 {
            return Err(Error::InvalidParam("trials must be >= 2".into()));
        }
        if let Some(bad) = self.rows.iter().find(|&&i| i == 0) {
            return Err(Error::InvalidParam(format!("row length {bad} must be >= 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivorStats {
    pub i: usize,
    pub mean_s: f64,
    pub se_s: f64,
    pub mean_c: f64,
    pub se_c: f64,
    /// Mean TRA `H / ln i`; absent at `i = 1`.
    pub mean_entropy_ratio: Option<f64>,
    pub mean_entropy_ratio_softmax: Option<f64>,
    /// `kappa * i / (i + 1)`.
    pub bound_s: f64,
    /// `kappa^2 / (i + 1)`.
    pub bound_c: f64,
    /// `(i + 1)^(1 - beta^2 / sigma^2)`.
    pub bound_s_beta: f64,
    /// Rows whose exact (eps-free) TRA entropy exceeded `ln(max(1, support))`.
    pub support_bound_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionPoint {
    pub i: usize,
    pub tra: Option<f64>,
    pub tda: Option<f64>,
    pub softmax: Option<f64>,
}

/// `i` i.i.d. draws from `N(0, sigma^2 / d)`.
pub fn sample_noise_row<R: Rng + ?Sized>(i: usize, model: &NoiseModel, rng: &mut R) -> Vec<f64> {
    let std = model.score_std();
    match model.distribution {
        NoiseDistribution::Gaussian => (0..i)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    }
}

/// Number of entries strictly above `tau`.
pub fn count_survivors(scores: &[f64], tau: f64) -> usize {
    scores.iter().filter(|&&s| s > tau).count()
}

/// Number of positions strictly above `tau` in both views.
pub fn count_consensus(s1: &[f64], s2: &[f64], tau: f64) -> Result<usize> {
    if s1.len() != s2.len() {
        return Err(Error::Shape(format!(
            "consensus views differ in length: {} vs {}",
            s1.len(),
            s2.len()
        )));
    }
    Ok(s1.iter().zip(s2).filter(|(a, b)| **a > tau && **b > tau).count())
}

/// Independent stream for one trial.
pub fn trial_rng(seed: u64, i: usize, trial: usize, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(i as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(trial as u64).to_le_bytes());
    key[24..].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// `P(s > tau)` for one noise score.
pub fn score_tail(tau: f64, model: &NoiseModel) -> f64 {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    n.sf(tau / model.score_std())
}

/// Exact `E[S_i]` under the Gaussian model.
pub fn expected_survivors(i: usize, params: &AttnParams, model: &NoiseModel) -> f64 {
    i as f64 * score_tail(params.threshold(i, model.head_dim), model)
}

/// Exact `E[C_i]` under independent Gaussian views.
pub fn expected_consensus(i: usize, params: &AttnParams, model: &NoiseModel) -> f64 {
    let p = score_tail(params.threshold(i, model.head_dim), model);
    i as f64 * p * p
}

struct RowSample {
    s: f64,
    c: f64,
    h_tra: f64,
    h_tda: f64,
    h_soft: f64,
    support_violation: bool,
}

fn simulate_row(i: usize, trial: usize, cfg: &TrialConfig, model: &NoiseModel) -> RowSample {
    let p = &cfg.params;
    let tau = p.threshold(i, model.head_dim);
    let mut rng = trial_rng(cfg.seed, i, trial, 0);
    let mut s1 = sample_noise_row(i, model, &mut rng);
    let s2 = sample_noise_row(i, model, &mut rng);
    // Relevant keys are planted in view 1 only.
    let r = cfg.relevant_count.min(i);
    for s in s1.iter_mut().take(r) {
        *s = tau + cfg.relevant_margin;
    }
    let noise1 = &s1[r..];
    let noise2 = &s2[r..];
    let s = count_survivors(noise1, tau);
    let c = count_consensus(noise1, noise2, tau).expect("equal lengths");

    let w1: Vec<f64> = s1.iter().map(|&x| rectified_power(x - tau, p.power)).collect();
    let w2: Vec<f64> = s2.iter().map(|&x| rectified_power(x - tau, p.power)).collect();
    let lambda = p.effective_lambda();
    let delta: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| a - lambda * b).collect();
    let max = s1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let soft: Vec<f64> = s1.iter().map(|&x| (x - max).exp()).collect();

    let h_tra = effective_entropy(&w1, ENTROPY_EPS);
    let support = w1.iter().filter(|&&w| w != 0.0).count().max(1);
    RowSample {
        s: s as f64,
        c: c as f64,
        h_tra,
        h_tda: effective_entropy(&delta, ENTROPY_EPS),
        h_soft: effective_entropy(&soft, ENTROPY_EPS),
        support_violation: effective_entropy(&w1, 0.0) > (support as f64).ln() + 1e-12,
    }
}

fn simulate(cfg: &TrialConfig, model: &NoiseModel, i: usize) -> Vec<RowSample> {
    (0..cfg.trials)
        .into_par_iter()
        .map(|t| simulate_row(i, t, cfg, model))
        .collect()
}

/// Mean and standard error (sample std with `n - 1` over `sqrt(n)`).
pub fn mean_se(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn ratio(samples: &[RowSample], i: usize, f: impl Fn(&RowSample) -> f64) -> Option<f64> {
    (i >= 2).then(|| samples.iter().map(|r| f(r) / (i as f64).ln()).sum::<f64>() / samples.len() as f64)
}

pub fn run_survivor_experiment(cfg: &TrialConfig, model: &NoiseModel) -> Result<Vec<SurvivorStats>> {
    cfg.validate()?;
    model.validate()?;
    let p = &cfg.params;
    let exponent = 1.0 - (p.beta * p.beta) / (model.sigma * model.sigma);
    Ok(cfg
        .rows
        .iter()
        .map(|&i| {
            let rows = simulate(cfg, model, i);
            let (mean_s, se_s) = mean_se(rows.iter().map(|r| r.s));
            let (mean_c, se_c) = mean_se(rows.iter().map(|r| r.c));
            let fi = i as f64;
            SurvivorStats {
                i,
                mean_s,
                se_s,
                mean_c,
                se_c,
                mean_entropy_ratio: ratio(&rows, i, |r| r.h_tra),
                mean_entropy_ratio_softmax: ratio(&rows, i, |r| r.h_soft),
                bound_s: p.kappa * fi / (fi + 1.0),
                bound_c: p.kappa * p.kappa / (fi + 1.0),
                bound_s_beta: (fi + 1.0).powf(exponent),
                support_bound_violations: rows.iter().filter(|r| r.support_violation).count(),
            }
        })
        .collect())
}

pub fn run_dispersion_experiment(cfg: &TrialConfig, model: &NoiseModel) -> Result<Vec<DispersionPoint>> {
    cfg.validate()?;
    model.validate()?;
    Ok(cfg
        .rows
        .iter()
        .map(|&i| {
            let rows = simulate(cfg, model, i);
            DispersionPoint {
                i,
                tra: ratio(&rows, i, |r| r.h_tra),
                tda: ratio(&rows, i, |r| r.h_tda),
                softmax: ratio(&rows, i, |r| r.h_soft),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub limit: f64,
}

impl BoundCheck {
    fn le(name: String, observed: f64, limit: f64) -> Self {
        Self {
            name,
            passed: observed <= limit,
            observed,
            limit,
        }
    }
}

/// Every bound assertion applicable to `stats` at 3 standard errors.
///
/// The `kappa` bounds are only asserted when `beta >= sigma`; the
/// `(i+1)^(1 - beta^2/sigma^2)` bound is asserted for every configuration.
pub fn check_bounds(stats: &[SurvivorStats], params: &AttnParams, model: &NoiseModel) -> Vec<BoundCheck> {
    let mut out = Vec::new();
    let headline = params.beta >= model.sigma;
    for st in stats {
        if headline {
            out.push(BoundCheck::le(format!("S_{} <= kappa i/(i+1)", st.i), st.mean_s, st.bound_s + 3.0 * st.se_s));
            out.push(BoundCheck::le(format!("C_{} <= kappa^2/(i+1)", st.i), st.mean_c, st.bound_c + 3.0 * st.se_c));
        }
        out.push(BoundCheck::le(
            format!("S_{} <= (i+1)^(1-beta^2/sigma^2)", st.i),
            st.mean_s,
            st.bound_s_beta + 3.0 * st.se_s,
        ));
        out.push(BoundCheck::le(
            format!("H_{} <= ln(support)", st.i),
            st.support_bound_violations as f64,
            0.0,
        ));
        if st.i == 1 {
            let exact = expected_survivors(1, params, model);
            out.push(BoundCheck::le(
                "|S_1 - exact tail|".into(),
                (st.mean_s - exact).abs(),
                3.0 * st.se_s,
            ));
        }
    }
    if headline {
        for w in stats.windows(2) {
            let slack = 2.0 * (w[0].se_c * w[0].se_c + w[1].se_c * w[1].se_c).sqrt();
            out.push(BoundCheck::le(
                format!("C_{} <= C_{} (non-increasing)", w[1].i, w[0].i),
                w[1].mean_c,
                w[0].mean_c + slack,
            ));
        }
    }
    out
}

pub fn survivor_csv(stats: &[SurvivorStats]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("i,mean_S,se_S,bound_S,mean_C,se_C,bound_C,entropy_ratio_tra,entropy_ratio_softmax\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.i,
            s.mean_s,
            s.se_s,
            s.bound_s,
            s.mean_c,
            s.se_c,
            s.bound_c,
            opt(s.mean_entropy_ratio),
            opt(s.mean_entropy_ratio_softmax)
        );
    }
    out
}

pub fn dispersion_csv(points: &[DispersionPoint]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("i,tra,tda,softmax\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.i, opt(p.tra), opt(p.tda), opt(p.softmax));
    }
    out
}
