//! Multi-chain Metropolis-within-Gibbs sampler.
//!
//! Each sweep first updates the indication-level quantities with the
//! study-level effects integrated out (they enter only through Gaussian
//! terms), then redraws the study-level effects from their exact full
//! conditional. Scale parameters and correlations move by adaptive 1-d
//! random walks on an unconstrained scale; everything else is drawn exactly.

mod bivariate;
mod conditional;
mod init;
mod location;
mod univariate;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evidence::EvidenceSet;
use crate::likelihood::{density_terms, residual_deviance_raw};
use crate::model::{Family, Model, ModelSpec, ParameterValues, Roles, Support};

pub use conditional::{conjugate_conditional, indicator_conditional};
pub use init::initial_values;

/// Re-draws allowed when a starting point has non-finite log density.
pub const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    pub samples_per_chain: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_target_acceptance: f64,
    pub adapt_window: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            burn_in: 20_000,
            samples_per_chain: 80_000,
            thin: 1,
            seed: 1,
            adapt_target_acceptance: 0.44,
            adapt_window: 50,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_chains < 1 {
            return bad("n_chains must be at least 1".into());
        }
        if self.samples_per_chain < 1 {
            return bad("samples_per_chain must be at least 1".into());
        }
        if self.thin < 1 {
            return bad("thin must be at least 1".into());
        }
        if self.samples_per_chain < self.thin {
            return bad("samples_per_chain must be at least thin".into());
        }
        if !(self.adapt_target_acceptance > 0.0 && self.adapt_target_acceptance < 1.0) {
            return bad(format!(
                "adapt_target_acceptance must lie in (0, 1), got {}",
                self.adapt_target_acceptance
            ));
        }
        if self.adapt_window < 1 {
            return bad("adapt_window must be at least 1".into());
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn retained(&self) -> usize {
        self.samples_per_chain / self.thin
    }
}

/// Which study-level blocks (`delta`, `delta1`, `delta2`, `rho_w`) to keep
/// draws for. Their posterior means are always kept.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum StudyColumns {
    #[default]
    None,
    All,
    Ids(Vec<String>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub study_columns: StudyColumns,
}

/// Robbins-Monro scale update applied at the end of each adaptation window.
pub fn adapt_step(current_scale: f64, recent_acceptance: f64, target: f64, window_count: usize) -> f64 {
    let kappa = 1.0 / (window_count.max(1) as f64).sqrt();
    current_scale * (kappa * (recent_acceptance - target)).exp()
}

/// State of one scalar random-walk update.
#[derive(Debug, Clone)]
pub(crate) struct Rw {
    pub scale: f64,
    pub block: usize,
    acc: u32,
    tries: u32,
    total_acc: u64,
    total_tries: u64,
}

impl Rw {
    pub fn new(block: usize) -> Self {
        Self {
            scale: 1.0,
            block,
            acc: 0,
            tries: 0,
            total_acc: 0,
            total_tries: 0,
        }
    }

    /// One Metropolis step from `x` under log density `target`.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R, x: f64, target: impl Fn(f64) -> f64) -> f64 {
        let current = target(x);
        let z: f64 = rng.sample(StandardNormal);
        let prop = x + self.scale * z;
        let proposed = target(prop);
        let u: f64 = rng.random();
        self.tries += 1;
        self.total_tries += 1;
        if proposed - current > u.ln() || (current == f64::NEG_INFINITY && proposed > f64::NEG_INFINITY) {
            self.acc += 1;
            self.total_acc += 1;
            prop
        } else {
            x
        }
    }

    fn adapt(&mut self, target: f64, window_count: usize) {
        if self.tries > 0 {
            let rate = f64::from(self.acc) / f64::from(self.tries);
            self.scale = adapt_step(self.scale, rate, target, window_count);
        }
        self.acc = 0;
        self.tries = 0;
    }

    fn reset_totals(&mut self) {
        self.total_acc = 0;
        self.total_tries = 0;
    }
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

enum Kernel<'m> {
    Uni(univariate::Univariate<'m>),
    Bi(bivariate::Bivariate<'m>),
}

impl Kernel<'_> {
    fn sweep(&mut self, v: &mut [f64], rng: &mut ChaCha8Rng) {
        match self {
            Kernel::Uni(k) => k.sweep(v, rng),
            Kernel::Bi(k) => k.sweep(v, rng),
        }
    }

    fn rws(&mut self) -> &mut [Rw] {
        match self {
            Kernel::Uni(k) => &mut k.rws,
            Kernel::Bi(k) => &mut k.rws,
        }
    }
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// Row-major `retained x columns`.
    pub values: Vec<f64>,
    pub deviance: Vec<f64>,
    /// Post burn-in acceptance rate per random-walk block.
    pub acceptance: BTreeMap<String, f64>,
    /// Mean of every layout scalar over the retained draws.
    pub param_means: Vec<f64>,
    pub initial: ParameterValues,
}

/// Output of [`run`]: monitored columns per chain plus deviance traces.
///
/// Columns are all non-study-level blocks in layout order, then the active
/// value of each indication-level family (`effect[L]`, or `intercept[L]`,
/// `slope[L]`, `cond_sd[L]`), then any requested study-level scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub model: Model,
    pub config: SamplerConfig,
    pub columns: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    /// Retained draws per chain.
    pub fn n_draws(&self) -> usize {
        self.chains.first().map_or(0, |c| c.deviance.len())
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn chain_column(&self, chain: usize, col: usize) -> Vec<f64> {
        let w = self.columns.len();
        self.chains[chain].values.iter().skip(col).step_by(w).copied().collect()
    }

    /// Draws of `name` per chain.
    pub fn chains_of(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let col = self.column_index(name)?;
        Some((0..self.n_chains()).map(|c| self.chain_column(c, col)).collect())
    }

    /// Draws of `name` pooled across chains in chain order.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.chains_of(name).map(|c| c.concat())
    }

    pub fn deviance(&self) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.deviance.iter().copied()).collect()
    }

    /// Posterior mean of every layout scalar, pooled across chains.
    pub fn param_means(&self) -> Vec<f64> {
        let n = self.model.layout.len;
        let k = self.chains.len() as f64;
        (0..n)
            .map(|i| self.chains.iter().map(|c| c.param_means[i]).sum::<f64>() / k)
            .collect()
    }

    /// Acceptance rate per random-walk block averaged over chains.
    pub fn acceptance(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for c in &self.chains {
            for (k, a) in &c.acceptance {
                *out.entry(k.clone()).or_default() += a / self.chains.len() as f64;
            }
        }
        out
    }

    /// Monitored indication-level family columns (`effect[..]`, etc.).
    pub fn family_columns(&self) -> Vec<&str> {
        let fams: Vec<&str> = self.model.families().iter().map(|f| f.name).collect();
        self.columns
            .iter()
            .filter(|c| fams.iter().any(|f| c.starts_with(&format!("{f}["))))
            .map(|c| c.as_str())
            .collect()
    }
}

enum Source {
    Offset(usize),
    Family(usize, usize),
}

struct ColumnPlan {
    names: Vec<String>,
    sources: Vec<Source>,
}

impl ColumnPlan {
    fn new(model: &Model, opts: &RunOptions) -> Self {
        let mut names = Vec::new();
        let mut sources = Vec::new();
        for b in model.layout.blocks.iter().filter(|b| !b.study_level) {
            for k in 0..b.dim {
                names.push(b.scalar_name(k));
                sources.push(Source::Offset(b.offset + k));
            }
        }
        for (fi, f) in model.families().iter().enumerate() {
            for (j, label) in model.indications.iter().enumerate() {
                names.push(format!("{}[{}]", f.name, label));
                sources.push(Source::Family(fi, j));
            }
        }
        for b in model.layout.blocks.iter().filter(|b| b.study_level) {
            for (k, s) in model.studies.iter().enumerate() {
                let keep = match &opts.study_columns {
                    StudyColumns::None => false,
                    StudyColumns::All => true,
                    StudyColumns::Ids(ids) => ids.contains(&s.id),
                };
                if keep {
                    names.push(b.scalar_name(k));
                    sources.push(Source::Offset(b.offset + k));
                }
            }
        }
        Self { names, sources }
    }

    fn record(&self, fams: &[&Family], v: &[f64], out: &mut Vec<f64>) {
        for s in &self.sources {
            out.push(match *s {
                Source::Offset(o) => v[o],
                Source::Family(f, j) => fams[f].value(v, j),
            });
        }
    }
}

/// Seed for the `stream`-th derived run (refits, replications), mixed by
/// SplitMix64 so neighbouring streams are unrelated.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * chain as u64);
    rng
}

/// Fits `spec` to `e`.
pub fn run(spec: &ModelSpec, e: &EvidenceSet, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    let model = Model::new(spec, e)?;
    run_model(&model, cfg, &RunOptions::default())
}

/// Fits an already bound model.
pub fn run_model(model: &Model, cfg: &SamplerConfig, opts: &RunOptions) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let plan = ColumnPlan::new(model, opts);
    let chains = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(model, cfg, &plan, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorDraws {
        model: model.clone(),
        config: *cfg,
        columns: plan.names,
        chains,
    })
}

fn first_bad_block(model: &Model, v: &ParameterValues) -> String {
    for b in &model.layout.blocks {
        for &x in v.block(b) {
            let ok = match b.support {
                Support::Real => x.is_finite(),
                Support::Positive => x > 0.0 && x.is_finite(),
                Support::UnitInterval => x > 0.0 && x < 1.0,
                Support::Correlation => x > -1.0 && x < 1.0,
                Support::Binary => x == 0.0 || x == 1.0,
            };
            if !ok {
                return b.name.clone();
            }
        }
    }
    match density_terms(model, v) {
        Ok(r) => r
            .hierarchical
            .iter()
            .find(|(_, x)| !x.is_finite())
            .map_or_else(|| "likelihood".to_string(), |(n, _)| n.clone()),
        Err(_) => "likelihood".to_string(),
    }
}

fn start(model: &Model, chain: usize, seed: u64) -> Result<ParameterValues> {
    let mut rng = init::init_rng(seed, chain);
    let mut last = None;
    for _ in 0..INIT_ATTEMPTS {
        let v = init::draw_initial(model, chain, &mut rng);
        if density_terms(model, &v)?.total.is_finite() {
            return Ok(v);
        }
        last = Some(v);
    }
    Err(Error::Initialization {
        block: first_bad_block(model, &last.expect("at least one attempt")),
        attempts: INIT_ATTEMPTS,
    })
}

fn run_chain(model: &Model, cfg: &SamplerConfig, plan: &ColumnPlan, chain: usize) -> Result<ChainDraws> {
    let initial = start(model, chain, cfg.seed)?;
    let mut v = initial.0.clone();
    let mut rng = chain_rng(cfg.seed, chain);
    let mut kernel = match &model.roles {
        Roles::Univariate(_) => Kernel::Uni(univariate::Univariate::new(model)),
        Roles::Bivariate(_) => Kernel::Bi(bivariate::Bivariate::new(model)),
    };

    let mut windows = 0;
    for s in 0..cfg.burn_in {
        kernel.sweep(&mut v, &mut rng);
        if (s + 1) % cfg.adapt_window == 0 {
            windows += 1;
            for rw in kernel.rws() {
                rw.adapt(cfg.adapt_target_acceptance, windows);
            }
        }
    }
    for rw in kernel.rws() {
        rw.reset_totals();
    }

    let fams = model.families();
    let retained = cfg.retained();
    let mut values = Vec::with_capacity(retained * plan.names.len());
    let mut deviance = Vec::with_capacity(retained);
    let mut sums = vec![0.0; v.len()];
    for k in 0..retained * cfg.thin {
        kernel.sweep(&mut v, &mut rng);
        if (k + 1) % cfg.thin == 0 {
            plan.record(&fams, &v, &mut values);
            deviance.push(residual_deviance_raw(model, &v));
            for (s, x) in sums.iter_mut().zip(&v) {
                *s += x;
            }
        }
    }
    let param_means = sums.iter().map(|s| s / retained as f64).collect();

    let mut totals: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for rw in kernel.rws() {
        let e = totals.entry(rw.block).or_default();
        e.0 += rw.total_acc;
        e.1 += rw.total_tries;
    }
    let acceptance = totals
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(b, (a, n))| (model.layout.blocks[b].name.clone(), a as f64 / n as f64))
        .collect();

    Ok(ChainDraws {
        values,
        deviance,
        acceptance,
        param_means,
        initial,
    })
}

/// Index of the layout block containing `offset`.
pub(crate) fn block_of(model: &Model, offset: usize) -> usize {
    model
        .layout
        .blocks
        .iter()
        .position(|b| b.range().contains(&offset))
        .expect("offset inside layout")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = SamplerConfig::default();
        assert_eq!(
            (c.n_chains, c.burn_in, c.samples_per_chain, c.thin),
            (3, 20_000, 80_000, 1)
        );
        assert_eq!((c.adapt_target_acceptance, c.adapt_window), (0.44, 50));
        assert_eq!(c.retained(), 80_000);
        assert!(SamplerConfig { thin: 0, ..c }.validate().is_err());
        assert!(SamplerConfig { n_chains: 0, ..c }.validate().is_err());
        assert!(SamplerConfig {
            adapt_target_acceptance: 1.0,
            ..c
        }
        .validate()
        .is_err());
        assert_eq!(
            SamplerConfig {
                thin: 3,
                samples_per_chain: 10,
                ..c
            }
            .retained(),
            3
        );
    }

    #[test]
    fn adapt_fixed_point_and_monotone() {
        assert_eq!(adapt_step(0.7, 0.44, 0.44, 5), 0.7);
        assert!(adapt_step(0.7, 1.0, 0.44, 5) > 0.7);
        assert!(adapt_step(0.7, 0.0, 0.44, 5) < 0.7);
    }

    #[test]
    fn adaptation_on_standard_normal_reaches_target_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rw = Rw::new(0);
        rw.scale = 0.05;
        let target = |x: f64| -0.5 * x * x;
        let mut x = 0.0;
        let mut windows = 0;
        for s in 0..10_000 {
            x = rw.step(&mut rng, x, target);
            if (s + 1) % 50 == 0 {
                windows += 1;
                rw.adapt(0.44, windows);
            }
        }
        rw.reset_totals();
        for _ in 0..20_000 {
            x = rw.step(&mut rng, x, target);
        }
        let rate = rw.total_acc as f64 / rw.total_tries as f64;
        assert!((0.34..=0.54).contains(&rate), "acceptance {rate}");
    }

    #[test]
    fn rw_samples_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rw = Rw::new(0);
        rw.scale = 2.4;
        let mut x = 0.0;
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            x = rw.step(&mut rng, x, |y| -0.125 * (y - 1.0).powi(2));
            s1 += x;
            s2 += x * x;
        }
        let m = s1 / n as f64;
        let sd = (s2 / n as f64 - m * m).sqrt();
        assert!((m - 1.0).abs() < 0.1, "{m}");
        assert!((sd - 2.0).abs() < 0.1, "{sd}");
    }
}
