//! Decision-facing quantities: PFS-to-OS prediction through the surrogate
//! relationship, new-indication effects and leave-one-out validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::{convergence_report, summarize_posterior, DEFAULT_QUANTILES};
use crate::error::{Error, Result};
use crate::evidence::EvidenceSet;
use crate::model::{EndpointMode, Model, ModelSpec, SharingStructure};
use crate::sampler::{derive_seed, normal, run_model, PosteriorDraws, RunOptions, SamplerConfig, StudyColumns};

/// Normal approximation to an indication's PFS effect.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PfsEstimate {
    pub indication: String,
    pub mean: f64,
    pub sd: f64,
    pub source_sharing: SharingStructure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PredictionMode {
    /// PFS estimate from the independent-parameters univariate model.
    IpPfs,
    /// PFS estimate from the univariate model with the same sharing.
    Matched,
}

impl PredictionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::IpPfs => "IP-PFS",
            Self::Matched => "Matched",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OsPrediction {
    pub indication: String,
    pub draws: Vec<f64>,
    pub mode: PredictionMode,
    pub includes_conditional_variance: bool,
}

/// Posterior mean and sd of each indication's pooled effect in a univariate
/// PFS fit.
pub fn pfs_estimates(uni: &PosteriorDraws) -> Result<Vec<PfsEstimate>> {
    let model = &uni.model;
    if model.spec.endpoint_mode != EndpointMode::UnivariatePfs {
        return Err(Error::Prediction("PFS estimates need a univariate PFS fit".into()));
    }
    model
        .indications
        .iter()
        .map(|l| {
            let d = uni
                .column(&format!("effect[{l}]"))
                .ok_or_else(|| Error::Prediction(format!("no effect draws for `{l}`")))?;
            let s = summarize_posterior(&d, &[])?;
            Ok(PfsEstimate {
                indication: l.clone(),
                mean: s.mean,
                sd: s.sd,
                source_sharing: model.spec.sharing,
            })
        })
        .collect()
}

/// `d_os = lambda0 + lambda1 * d_pfs` per retained draw, with
/// `d_pfs ~ N(pfs.mean, pfs.sd^2)` drawn independently and, when
/// `include_psi`, `N(0, psi^2)` noise added.
pub fn predict_os<R: Rng + ?Sized>(
    biv: &PosteriorDraws,
    pfs: &PfsEstimate,
    include_psi: bool,
    mode: PredictionMode,
    rng: &mut R,
) -> Result<OsPrediction> {
    let l = &pfs.indication;
    let get = |f: &str| {
        biv.column(&format!("{f}[{l}]"))
            .ok_or_else(|| Error::Prediction(format!("no `{f}` draws for indication `{l}`")))
    };
    let (l0, l1) = (get("intercept")?, get("slope")?);
    let psi = if include_psi { Some(get("cond_sd")?) } else { None };
    let draws = (0..l0.len())
        .map(|t| {
            let d_pfs = pfs.mean + pfs.sd * normal(rng);
            let mut d = l0[t] + l1[t] * d_pfs;
            if let Some(p) = &psi {
                d += p[t] * normal(rng);
            }
            d
        })
        .collect();
    Ok(OsPrediction {
        indication: l.clone(),
        draws,
        mode,
        includes_conditional_variance: include_psi,
    })
}

/// [`predict_os`] for every indication of the bivariate fit that has a PFS
/// estimate. Every indication reuses the same RNG stream, so indications
/// with identical inputs get identical draws.
pub fn predict_all(
    biv: &PosteriorDraws,
    pfs: &[PfsEstimate],
    include_psi: bool,
    mode: PredictionMode,
    seed: u64,
) -> Result<Vec<OsPrediction>> {
    biv.model
        .indications
        .iter()
        .filter_map(|l| pfs.iter().find(|p| &p.indication == l))
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            predict_os(biv, p, include_psi, mode, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub pfs: Vec<PfsEstimate>,
    pub predictions: Vec<OsPrediction>,
    pub univariate: PosteriorDraws,
    pub bivariate: PosteriorDraws,
}

fn pipeline(
    pfs_sharing: SharingStructure,
    biv_spec: &ModelSpec,
    e: &EvidenceSet,
    cfg: &SamplerConfig,
    include_psi: bool,
    mode: PredictionMode,
) -> Result<PipelineResult> {
    let mut uni_spec = ModelSpec::new(EndpointMode::UnivariatePfs, pfs_sharing);
    uni_spec.priors = biv_spec.priors;
    let uni_model = Model::new(&uni_spec, e)?;
    let biv_model = Model::new(biv_spec, e)?;
    let uni_cfg = SamplerConfig {
        seed: derive_seed(cfg.seed, 1),
        ..*cfg
    };
    let biv_cfg = SamplerConfig {
        seed: derive_seed(cfg.seed, 2),
        ..*cfg
    };
    let uni = run_model(&uni_model, &uni_cfg, &RunOptions::default())?;
    let biv = run_model(&biv_model, &biv_cfg, &RunOptions::default())?;
    let pfs = pfs_estimates(&uni)?;
    let predictions = predict_all(&biv, &pfs, include_psi, mode, derive_seed(cfg.seed, 3))?;
    Ok(PipelineResult {
        pfs,
        predictions,
        univariate: uni,
        bivariate: biv,
    })
}

/// Univariate PFS and bivariate surrogacy fits with the same sharing, then
/// OS prediction per indication.
pub fn matched_pipeline(
    sharing: SharingStructure,
    e: &EvidenceSet,
    cfg: &SamplerConfig,
    include_psi: bool,
) -> Result<PipelineResult> {
    let spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, sharing);
    pipeline(sharing, &spec, e, cfg, include_psi, PredictionMode::Matched)
}

/// As [`matched_pipeline`] with the PFS estimates taken from the
/// independent-parameters univariate model.
pub fn ip_pfs_pipeline(
    sharing: SharingStructure,
    e: &EvidenceSet,
    cfg: &SamplerConfig,
    include_psi: bool,
) -> Result<PipelineResult> {
    let spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, sharing);
    pipeline(SharingStructure::IP, &spec, e, cfg, include_psi, PredictionMode::IpPfs)
}

/// Runs a prediction pipeline from a full bivariate spec (sensitivity
/// options included).
pub fn run_pipeline(
    biv_spec: &ModelSpec,
    e: &EvidenceSet,
    cfg: &SamplerConfig,
    include_psi: bool,
    mode: PredictionMode,
) -> Result<PipelineResult> {
    let pfs_sharing = match mode {
        PredictionMode::Matched => biv_spec.sharing,
        PredictionMode::IpPfs => SharingStructure::IP,
    };
    pipeline(pfs_sharing, biv_spec, e, cfg, include_psi, mode)
}

/// Effect in a new indication drawn from a univariate fit: the
/// exchangeable distribution with probability `p_new`, the vague prior
/// otherwise. Under CP the common effect's draws are returned; under MCIP
/// the common effect plays the role of the exchangeable distribution.
pub fn predict_new_indication<R: Rng + ?Sized>(uni: &PosteriorDraws, p_new: f64, rng: &mut R) -> Result<Vec<f64>> {
    let model = &uni.model;
    if model.spec.endpoint_mode.is_bivariate() {
        return Err(Error::Prediction(
            "new-indication prediction needs a univariate fit".into(),
        ));
    }
    if !(0.0..=1.0).contains(&p_new) {
        return Err(Error::Prediction(format!("p_new must lie in [0, 1], got {p_new}")));
    }
    let col = |name: &str| {
        uni.column(name)
            .ok_or_else(|| Error::Prediction(format!("no `{name}` draws")))
    };
    let sd = model.spec.priors.effect_normal_sd;
    let vague_or = |t: usize, share: &dyn Fn(usize, &mut dyn FnMut() -> f64) -> f64, rng: &mut R| {
        let u: f64 = rng.random();
        if u < p_new {
            share(t, &mut || normal(rng))
        } else {
            sd * normal(rng)
        }
    };
    match model.spec.sharing {
        SharingStructure::IP => Err(Error::Prediction("no cross-indication estimand under IP".into())),
        SharingStructure::CP => col("theta"),
        SharingStructure::MCIP => {
            let theta = col("theta")?;
            Ok((0..theta.len()).map(|t| vague_or(t, &|t, _| theta[t], rng)).collect())
        }
        SharingStructure::RP | SharingStructure::MRIP => {
            let (m, s) = (col("m_d")?, col("tau_d")?);
            Ok((0..m.len())
                .map(|t| vague_or(t, &|t, z| m[t] + s[t] * z(), rng))
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossvalRow {
    pub study_id: String,
    pub indication: String,
    pub predicted_mean: f64,
    /// Sd of the masked study's OS effect draws.
    pub predicted_sd: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub observed: f64,
    pub se_os: f64,
    pub residual: f64,
    pub inside: bool,
    /// Worst R-hat and ESS of the refit over the masked study's OS effect
    /// and the indication-level columns.
    pub max_rhat: f64,
    pub min_ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossvalReport {
    pub rows: Vec<CrossvalRow>,
    /// `(indication, notice)` for indications that were not evaluated.
    pub skipped: Vec<(String, String)>,
}

impl CrossvalReport {
    /// Share of observed OS estimates inside their 95% intervals.
    pub fn coverage(&self) -> Option<f64> {
        if self.rows.is_empty() {
            None
        } else {
            Some(self.rows.iter().filter(|r| r.inside).count() as f64 / self.rows.len() as f64)
        }
    }
}

const Z975: f64 = 1.959_963_984_540_054;

/// Leave-one-out surrogacy validation: each dual-endpoint study in an
/// indication with at least two of them has its OS estimate masked, the
/// model is refitted, and the observed OS estimate is compared with the
/// predictive `N(mean, var + se_os^2)` built from the masked study's OS
/// effect draws.
pub fn loo_crossval(spec: &ModelSpec, e: &EvidenceSet, cfg: &SamplerConfig) -> Result<CrossvalReport> {
    if !spec.endpoint_mode.is_bivariate() {
        return Err(Error::Prediction("cross-validation needs a bivariate spec".into()));
    }
    let mut targets = Vec::new();
    let mut skipped = Vec::new();
    for l in e.indications() {
        let dual: Vec<_> = e
            .records()
            .iter()
            .filter(|r| &r.indication == l && r.has_both())
            .collect();
        if dual.len() < 2 {
            skipped.push((
                l.clone(),
                format!("{} dual-endpoint studies; at least 2 needed", dual.len()),
            ));
        } else {
            targets.extend(dual.into_iter().cloned());
        }
    }
    let rows = targets
        .par_iter()
        .enumerate()
        .map(|(k, rec)| {
            let masked = e.mask_os(&rec.study_id)?;
            let model = Model::new(spec, &masked)?;
            let run_cfg = SamplerConfig {
                seed: derive_seed(cfg.seed, 10_000 + k as u64),
                ..*cfg
            };
            let opts = RunOptions {
                study_columns: StudyColumns::Ids(vec![rec.study_id.clone()]),
            };
            let draws = run_model(&model, &run_cfg, &opts)?;
            let d2 = draws
                .column(&format!("delta2[{}]", rec.study_id))
                .ok_or_else(|| Error::Prediction(format!("no OS effect draws for `{}`", rec.study_id)))?;
            let s = summarize_posterior(&d2, &DEFAULT_QUANTILES)?;
            let name = format!("delta2[{}]", rec.study_id);
            let mut monitored = draws.family_columns();
            monitored.push(&name);
            let conv = convergence_report(&draws, Some(&monitored), false)?;
            let os = rec.os.expect("dual-endpoint study");
            let pred_sd = (s.sd * s.sd + os.se * os.se).sqrt();
            let residual = (os.lhr - s.mean) / pred_sd;
            let (lo, hi) = (s.mean - Z975 * pred_sd, s.mean + Z975 * pred_sd);
            Ok(CrossvalRow {
                study_id: rec.study_id.clone(),
                indication: rec.indication.clone(),
                predicted_mean: s.mean,
                predicted_sd: s.sd,
                lo95: lo,
                hi95: hi,
                observed: os.lhr,
                se_os: os.se,
                residual,
                inside: (lo..=hi).contains(&os.lhr),
                max_rhat: conv.entries.iter().map(|e| e.rhat).fold(f64::NEG_INFINITY, f64::max),
                min_ess: conv.entries.iter().map(|e| e.ess).fold(f64::INFINITY, f64::min),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossvalReport { rows, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::parse_evidence_str;
    use crate::sampler::{ChainDraws, SamplerConfig};
    use std::collections::BTreeMap;

    /// A fake fit whose monitored columns hold the given constant or listed
    /// draws.
    fn fake(model: Model, cols: &[(&str, Vec<f64>)]) -> PosteriorDraws {
        let n = cols[0].1.len();
        let mut values = Vec::with_capacity(n * cols.len());
        for t in 0..n {
            for (_, c) in cols {
                values.push(c[t]);
            }
        }
        PosteriorDraws {
            config: SamplerConfig::default(),
            columns: cols.iter().map(|(n, _)| n.to_string()).collect(),
            chains: vec![ChainDraws {
                values,
                deviance: vec![0.0; n],
                acceptance: BTreeMap::new(),
                param_means: vec![0.0; model.layout.len],
                initial: crate::model::ParameterValues::zeros(&model.layout),
            }],
            model,
        }
    }

    fn one_indication(mode: EndpointMode, sharing: SharingStructure) -> Model {
        let e = parse_evidence_str(
            "study_id,indication,lhr_pfs,se_pfs,pfs_report_date,lhr_os,se_os,os_report_date\nS1,A,-0.3,0.1,,-0.2,0.1,\n",
        )
        .unwrap();
        Model::new(&ModelSpec::new(mode, sharing), &e).unwrap()
    }

    fn pfs(mean: f64, sd: f64) -> PfsEstimate {
        PfsEstimate {
            indication: "A".into(),
            mean,
            sd,
            source_sharing: SharingStructure::IP,
        }
    }

    #[test]
    fn degenerate_line_gives_point_prediction() {
        let m = one_indication(EndpointMode::BivariateSurrogacy, SharingStructure::IP);
        let n = 100;
        let biv = fake(
            m,
            &[
                ("intercept[A]", vec![0.1; n]),
                ("slope[A]", vec![1.0; n]),
                ("cond_sd[A]", vec![0.2; n]),
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = predict_os(&biv, &pfs(-0.4, 0.0), false, PredictionMode::Matched, &mut rng).unwrap();
        assert_eq!(p.draws.len(), n);
        assert!(p.draws.iter().all(|d| (d + 0.3).abs() < 1e-12));
        assert!(!p.includes_conditional_variance);
    }

    #[test]
    fn zero_slope_decouples_from_pfs() {
        let m = one_indication(EndpointMode::BivariateSurrogacy, SharingStructure::IP);
        let l0: Vec<f64> = (0..50).map(|t| t as f64 / 10.0).collect();
        let biv = fake(
            m,
            &[
                ("intercept[A]", l0.clone()),
                ("slope[A]", vec![0.0; 50]),
                ("cond_sd[A]", vec![0.2; 50]),
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = predict_os(&biv, &pfs(3.0, 5.0), false, PredictionMode::Matched, &mut rng).unwrap();
        assert_eq!(p.draws, l0);
    }

    #[test]
    fn predicted_sd_is_slope_times_pfs_sd() {
        let m = one_indication(EndpointMode::BivariateSurrogacy, SharingStructure::IP);
        let n = 80_000;
        let biv = fake(
            m,
            &[
                ("intercept[A]", vec![0.1; n]),
                ("slope[A]", vec![-0.7; n]),
                ("cond_sd[A]", vec![0.2; n]),
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = predict_os(&biv, &pfs(-0.4, 0.3), false, PredictionMode::Matched, &mut rng).unwrap();
        let s = summarize_posterior(&p.draws, &[]).unwrap();
        assert!((s.sd / (0.7 * 0.3) - 1.0).abs() < 0.03);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = predict_os(&biv, &pfs(-0.4, 0.3), true, PredictionMode::Matched, &mut rng).unwrap();
        let s = summarize_posterior(&p.draws, &[]).unwrap();
        let expect = (0.21f64.powi(2) + 0.04).sqrt();
        assert!((s.sd / expect - 1.0).abs() < 0.03);
    }

    #[test]
    fn new_indication_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 40_000;
        let rp = fake(
            one_indication(EndpointMode::UnivariatePfs, SharingStructure::RP),
            &[
                ("m_d", (0..n).map(|t| (t % 7) as f64 / 10.0).collect()),
                ("tau_d", vec![0.0; n]),
            ],
        );
        let m_draws = rp.column("m_d").unwrap();
        assert_eq!(predict_new_indication(&rp, 1.0, &mut rng).unwrap(), m_draws);
        let prior = predict_new_indication(&rp, 0.0, &mut rng).unwrap();
        let s = summarize_posterior(&prior, &[]).unwrap();
        assert!((s.sd - 10.0).abs() < 0.15, "{}", s.sd);

        let theta: Vec<f64> = (0..10).map(|t| t as f64).collect();
        let cp = fake(
            one_indication(EndpointMode::UnivariatePfs, SharingStructure::CP),
            &[("theta", theta.clone())],
        );
        assert_eq!(predict_new_indication(&cp, 0.3, &mut rng).unwrap(), theta);

        let ip = fake(
            one_indication(EndpointMode::UnivariatePfs, SharingStructure::IP),
            &[("d[A]", theta)],
        );
        let err = predict_new_indication(&ip, 1.0, &mut rng).unwrap_err();
        assert_eq!(err.to_string(), "no cross-indication estimand under IP");
    }
}
