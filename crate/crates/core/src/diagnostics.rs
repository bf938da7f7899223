//! Convergence diagnostics, posterior summaries and DIC-based model choice.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::{n_observations, residual_deviance_raw};
use crate::model::{Roles, SharingStructure};
use crate::sampler::PosteriorDraws;

pub const RHAT_THRESHOLD: f64 = 1.05;
pub const ESS_THRESHOLD: f64 = 400.0;
/// DIC differences below this are not considered meaningful.
pub const DIC_MARGIN: f64 = 3.0;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64], m: f64) -> f64 {
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn check_chains(chains: &[Vec<f64>]) -> Result<usize> {
    if chains.len() < 2 {
        return Err(Error::Diagnostics("rhat needs at least 2 chains".into()));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Diagnostics("rhat needs chains of equal length".into()));
    }
    if n < 4 {
        return Err(Error::Diagnostics("rhat needs chains of length at least 4".into()));
    }
    Ok(n)
}

/// Gelman-Rubin potential scale reduction factor.
pub fn rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let n = check_chains(chains)? as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().zip(&means).map(|(c, &m)| var(c, m)).sum::<f64>() / chains.len() as f64;
    let b_over_n = var(&means, mean(&means));
    if w == 0.0 {
        return Ok(if b_over_n == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok((((n - 1.0) / n * w + b_over_n) / w).sqrt())
}

/// R-hat computed after splitting each chain in half.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains)?;
    let half = chains[0].len() / 2;
    let split: Vec<Vec<f64>> = chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[c.len() - half..].to_vec()])
        .collect();
    rhat(&split)
}

/// Autocorrelations at lags `0..n` via zero-padded FFT.
fn autocorrelation(x: &[f64], fft: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - m, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let forward: Arc<dyn rustfft::Fft<f64>> = fft.plan_fft_forward(size);
    forward.process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    fft.plan_fft_inverse(size).process(&mut buf);
    let c0 = buf[0].re;
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Effective sample size by Geyer's initial monotone sequence estimator,
/// capped at the sequence length. A constant sequence returns its length.
pub fn ess(draws: &[f64]) -> Result<f64> {
    let n = draws.len();
    if n < 8 {
        return Err(Error::Diagnostics("ess needs at least 8 draws".into()));
    }
    if is_constant(draws) {
        return Ok(n as f64);
    }
    let rho = autocorrelation(draws, &mut FftPlanner::new());
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = (rho[k] + rho[k + 1]).min(prev);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        prev = pair;
        k += 2;
    }
    let tau = -1.0 + 2.0 * sum;
    let nf = n as f64;
    Ok(if tau > 0.0 { (nf / tau).min(nf) } else { nf })
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Sum of per-chain ESS.
pub fn multi_chain_ess(chains: &[Vec<f64>]) -> Result<f64> {
    chains.iter().map(|c| ess(c)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceEntry {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
    pub flag: bool,
    /// Set when the draws are constant.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub entries: Vec<ConvergenceEntry>,
    pub split_rhat: bool,
}

impl ConvergenceReport {
    pub fn any_flagged(&self) -> bool {
        self.entries.iter().any(|e| e.flag)
    }

    pub fn get(&self, name: &str) -> Option<&ConvergenceEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ConvergenceEntry> {
        self.entries.iter().filter(|e| e.flag)
    }
}

pub fn convergence_flag(rhat: f64, ess: f64) -> bool {
    !(rhat <= RHAT_THRESHOLD) || !(ess >= ESS_THRESHOLD)
}

/// R-hat and ESS for each listed column (all columns when `columns` is
/// `None`). With a single chain R-hat is reported as 1.
pub fn convergence_report(draws: &PosteriorDraws, columns: Option<&[&str]>, split: bool) -> Result<ConvergenceReport> {
    let names: Vec<String> = match columns {
        Some(c) => c.iter().map(|s| s.to_string()).collect(),
        None => draws.columns.clone(),
    };
    let entries = names
        .par_iter()
        .map(|name| {
            let chains = draws
                .chains_of(name)
                .ok_or_else(|| Error::Diagnostics(format!("no draws for `{name}`")))?;
            let r = if chains.len() < 2 {
                1.0
            } else if split {
                split_rhat(&chains)?
            } else {
                rhat(&chains)?
            };
            let e = multi_chain_ess(&chains)?;
            let constant = chains.iter().all(|c| is_constant(c)) && chains.iter().all(|c| c[0] == chains[0][0]);
            Ok(ConvergenceEntry {
                name: name.clone(),
                rhat: r,
                ess: e,
                flag: convergence_flag(r, e),
                warning: constant.then(|| "constant draws; ESS set to the draw count".to_string()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport {
        entries,
        split_rhat: split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitStats {
    pub dbar: f64,
    pub pd: f64,
    pub dic: f64,
    /// Posterior mean residual deviance, to compare against `n_obs`.
    pub mean_residual_deviance: f64,
    pub n_obs: usize,
}

impl FitStats {
    pub fn negative_pd(&self) -> bool {
        self.pd < 0.0
    }
}

/// `Dbar`, `pD = Dbar - D(theta_bar)` and `DIC = Dbar + pD`.
pub fn dic(deviance_trace: &[f64], deviance_at_posterior_mean: f64) -> Result<FitStats> {
    if deviance_trace.is_empty() {
        return Err(Error::Diagnostics("empty deviance trace".into()));
    }
    let dbar = mean(deviance_trace);
    let pd = dbar - deviance_at_posterior_mean;
    Ok(FitStats {
        dbar,
        pd,
        dic: dbar + pd,
        mean_residual_deviance: dbar,
        n_obs: 0,
    })
}

/// Residual deviance at the pooled posterior mean of the likelihood's
/// direct parents (study effects and within-study correlations; the
/// indication-level effects when study effects are fixed to them).
pub fn deviance_at_mean(draws: &PosteriorDraws) -> f64 {
    let model = &draws.model;
    let means = draws.param_means();
    match &model.roles {
        Roles::Univariate(u) if u.delta.is_none() => model
            .studies
            .iter()
            .map(|s| {
                let col = format!("{}[{}]", u.effect.name, model.indications[s.indication]);
                let d = draws.column(&col).expect("family column");
                ((s.y - mean(&d)) / s.se).powi(2)
            })
            .sum(),
        _ => residual_deviance_raw(model, &means),
    }
}

/// DIC summary of a fit.
pub fn fit_stats(draws: &PosteriorDraws) -> Result<FitStats> {
    let mut s = dic(&draws.deviance(), deviance_at_mean(draws))?;
    s.n_obs = n_observations(&draws.model);
    Ok(s)
}

/// Default simplicity ranking used by [`select_model`].
pub const COMPLEXITY_ORDER: [SharingStructure; 5] = [
    SharingStructure::CP,
    SharingStructure::MCIP,
    SharingStructure::RP,
    SharingStructure::MRIP,
    SharingStructure::IP,
];

/// The minimum-DIC structure, or, when others lie within [`DIC_MARGIN`] of
/// it, the simplest of those: lowest position in `complexity_order`, then
/// lowest pD, then first in `dics`.
pub fn select_model(
    dics: &[(SharingStructure, FitStats)],
    complexity_order: &[SharingStructure],
) -> Result<SharingStructure> {
    let best = dics
        .iter()
        .map(|(_, f)| f.dic)
        .min_by(|a, b| a.total_cmp(b))
        .ok_or_else(|| Error::Diagnostics("no models to compare".into()))?;
    let rank = |s: SharingStructure| {
        complexity_order
            .iter()
            .position(|&c| c == s)
            .unwrap_or(complexity_order.len())
    };
    let chosen = dics
        .iter()
        .enumerate()
        .filter(|(_, (_, f))| f.dic - best < DIC_MARGIN)
        .min_by(|(ia, (sa, fa)), (ib, (sb, fb))| {
            rank(*sa).cmp(&rank(*sb)).then(fa.pd.total_cmp(&fb.pd)).then(ia.cmp(ib))
        })
        .expect("the minimum is within the margin");
    Ok(chosen.1 .0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    /// `(probability, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
}

impl Summary {
    pub fn quantile(&self, p: f64) -> Option<f64> {
        self.quantiles.iter().find(|(q, _)| *q == p).map(|(_, v)| *v)
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).unwrap_or(f64::NAN)
    }

    pub fn lo95(&self) -> f64 {
        self.quantile(0.025).unwrap_or(f64::NAN)
    }

    pub fn hi95(&self) -> f64 {
        self.quantile(0.975).unwrap_or(f64::NAN)
    }
}

pub const DEFAULT_QUANTILES: [f64; 3] = [0.025, 0.5, 0.975];

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sd and type-7 quantiles of `draws`.
pub fn summarize_posterior(draws: &[f64], quantiles: &[f64]) -> Result<Summary> {
    if draws.is_empty() {
        return Err(Error::Diagnostics("no draws to summarize".into()));
    }
    let m = mean(draws);
    let sd = if draws.len() > 1 { var(draws, m).sqrt() } else { 0.0 };
    let mut sorted = draws.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(Summary {
        mean: m,
        sd,
        quantiles: quantiles.iter().map(|&p| (p, quantile_sorted(&sorted, p))).collect(),
    })
}
