use rayon::prelude::*;
use serde::Serialize;

use super::{generate, ScenarioSpec, Truth};
use crate::diagnostics::{convergence_report, summarize_posterior, DEFAULT_QUANTILES};
use crate::error::{Error, Result};
use crate::model::{EndpointMode, Model, ModelSpec, Support};
use crate::sampler::{derive_seed, run_model, PosteriorDraws, RunOptions, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimandResult {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl EstimandResult {
    pub fn covered(&self) -> bool {
        (self.lo95..=self.hi95).contains(&self.truth)
    }

    pub fn width(&self) -> f64 {
        self.hi95 - self.lo95
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub scenario_seed: u64,
    pub sampler_seed: u64,
    pub estimands: Vec<EstimandResult>,
    /// Posterior mean of every indicator scalar.
    pub mixture: Vec<(String, f64)>,
    pub max_rhat: f64,
    pub min_ess: f64,
}

impl ReplicationResult {
    pub fn estimand(&self, name: &str) -> Option<&EstimandResult> {
        self.estimands.iter().find(|e| e.name == name)
    }

    pub fn mixture_prob(&self, name: &str) -> Option<f64> {
        self.mixture.iter().find(|m| m.0 == name).map(|m| m.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimandSummary {
    pub name: String,
    pub n: usize,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    /// One row per estimand, then a pooled `all` row.
    pub table: Vec<EstimandSummary>,
    pub replications: Vec<ReplicationResult>,
}

impl CalibrationReport {
    pub fn pooled(&self) -> &EstimandSummary {
        self.table.last().expect("pooled row")
    }
}

/// `(column, truth)` pairs scored for a fit of `spec`: indication-level
/// effects in univariate modes (the OS truth is `lambda0 + lambda1 * d`),
/// intercepts and slopes in bivariate mode.
pub fn estimands(spec: &ModelSpec, truth: &Truth) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for t in &truth.indications {
        match spec.endpoint_mode {
            EndpointMode::UnivariatePfs => out.push((format!("effect[{}]", t.label), t.d_pfs)),
            EndpointMode::UnivariateOs => out.push((format!("effect[{}]", t.label), t.d_os)),
            EndpointMode::BivariateSurrogacy => {
                out.push((format!("intercept[{}]", t.label), t.lambda0));
                out.push((format!("slope[{}]", t.label), t.lambda1));
            }
        }
    }
    out
}

fn score(draws: &PosteriorDraws, targets: &[(String, f64)]) -> Result<Vec<EstimandResult>> {
    targets
        .iter()
        .map(|(name, truth)| {
            let d = draws
                .column(name)
                .ok_or_else(|| Error::Diagnostics(format!("no draws for `{name}`")))?;
            let s = summarize_posterior(&d, &DEFAULT_QUANTILES)?;
            Ok(EstimandResult {
                name: name.clone(),
                truth: *truth,
                mean: s.mean,
                median: s.median(),
                lo95: s.lo95(),
                hi95: s.hi95(),
            })
        })
        .collect()
}

/// Generates replication `r` of `s` and fits `spec` to it. Scenario and
/// sampler seeds are derived from `(s.seed, r)` and `(cfg.seed, r)`.
pub fn run_replication(
    s: &ScenarioSpec,
    spec: &ModelSpec,
    cfg: &SamplerConfig,
    r: usize,
) -> Result<(ReplicationResult, PosteriorDraws)> {
    let scenario_seed = derive_seed(s.seed, r as u64);
    let sampler_seed = derive_seed(cfg.seed, r as u64);
    let (e, truth) = generate(&ScenarioSpec {
        seed: scenario_seed,
        ..s.clone()
    })?;
    let model = Model::new(spec, &e)?;
    let draws = run_model(
        &model,
        &SamplerConfig {
            seed: sampler_seed,
            ..*cfg
        },
        &RunOptions::default(),
    )?;
    let targets = estimands(spec, &truth);
    let estimands = score(&draws, &targets)?;
    let names: Vec<&str> = targets.iter().map(|t| t.0.as_str()).collect();
    let conv = convergence_report(&draws, Some(&names), false)?;
    let mixture = model
        .layout
        .blocks
        .iter()
        .filter(|b| b.support == Support::Binary)
        .flat_map(|b| (0..b.dim).map(move |k| b.scalar_name(k)))
        .map(|n| {
            let d = draws.column(&n).unwrap_or_default();
            let m = d.iter().sum::<f64>() / d.len().max(1) as f64;
            (n, m)
        })
        .collect();
    Ok((
        ReplicationResult {
            replication: r,
            scenario_seed,
            sampler_seed,
            estimands,
            mixture,
            max_rhat: conv.entries.iter().map(|e| e.rhat).fold(f64::NEG_INFINITY, f64::max),
            min_ess: conv.entries.iter().map(|e| e.ess).fold(f64::INFINITY, f64::min),
        },
        draws,
    ))
}

fn summarize(name: &str, rows: &[&EstimandResult]) -> EstimandSummary {
    let n = rows.len() as f64;
    EstimandSummary {
        name: name.to_string(),
        n: rows.len(),
        bias: rows.iter().map(|r| r.mean - r.truth).sum::<f64>() / n,
        rmse: (rows.iter().map(|r| (r.mean - r.truth).powi(2)).sum::<f64>() / n).sqrt(),
        coverage: rows.iter().filter(|r| r.covered()).count() as f64 / n,
        mean_width: rows.iter().map(|r| r.width()).sum::<f64>() / n,
    }
}

/// Bias, RMSE, equal-tailed 95% interval coverage and mean width per
/// estimand over `replications` synthetic data sets.
pub fn calibration_run(
    s: &ScenarioSpec,
    spec: &ModelSpec,
    replications: usize,
    cfg: &SamplerConfig,
) -> Result<CalibrationReport> {
    if replications < 50 {
        return Err(Error::InvalidConfig(format!(
            "calibration needs at least 50 replications, got {replications}"
        )));
    }
    let reps = (0..replications)
        .into_par_iter()
        .map(|r| run_replication(s, spec, cfg, r).map(|x| x.0))
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<String> = Vec::new();
    for e in reps.iter().flat_map(|r| &r.estimands) {
        if !names.contains(&e.name) {
            names.push(e.name.clone());
        }
    }
    let mut table: Vec<EstimandSummary> = names
        .iter()
        .map(|n| {
            let rows: Vec<&EstimandResult> = reps.iter().filter_map(|r| r.estimand(n)).collect();
            summarize(n, &rows)
        })
        .collect();
    let all: Vec<&EstimandResult> = reps.iter().flat_map(|r| &r.estimands).collect();
    table.push(summarize("all", &all));
    Ok(CalibrationReport {
        table,
        replications: reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SharingStructure;
    use crate::synthetic::EffectMode;

    #[test]
    fn estimand_targets() {
        let s = ScenarioSpec {
            n_indications: 2,
            lambda0: vec![0.1, 0.2],
            lambda1: vec![0.5],
            effect_mode: EffectMode::Common { d: -0.4 },
            ..Default::default()
        };
        let (_, truth) = generate(&s).unwrap();
        let uni = estimands(
            &ModelSpec::new(EndpointMode::UnivariateOs, SharingStructure::IP),
            &truth,
        );
        assert_eq!(
            uni,
            [("effect[I1]".into(), 0.1 - 0.2), ("effect[I2]".into(), 0.2 - 0.2)]
        );
        let biv = estimands(
            &ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::IP),
            &truth,
        );
        assert_eq!(biv.len(), 4);
        assert_eq!(biv[3], ("slope[I2]".into(), 0.5));
    }

    #[test]
    fn needs_fifty_replications() {
        let err = calibration_run(
            &ScenarioSpec::default(),
            &ModelSpec::new(EndpointMode::UnivariatePfs, SharingStructure::IP),
            10,
            &SamplerConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn replication_is_reproducible() {
        let s = ScenarioSpec {
            n_indications: 2,
            trials_per_indication: 2,
            ..Default::default()
        };
        let spec = ModelSpec::new(EndpointMode::UnivariatePfs, SharingStructure::MCIP);
        let cfg = SamplerConfig {
            burn_in: 200,
            samples_per_chain: 400,
            n_chains: 2,
            ..Default::default()
        };
        let (a, _) = run_replication(&s, &spec, &cfg, 3).unwrap();
        let (b, _) = run_replication(&s, &spec, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mixture.len(), 2);
        assert_eq!(a.estimands.len(), 2);
    }
}
