//! Within-study likelihoods, hierarchical density terms, the joint log
//! posterior and residual deviance.

use serde::Serialize;

use crate::dist;
use crate::error::{Error, Result};
use crate::model::{Family, FamilyKind, Model, ParameterValues, Roles};

/// Correlations closer than this to +-1 are rejected as degenerate.
pub const RHO_EDGE: f64 = 1e-12;

/// Log density of `y ~ N(delta, se^2)`.
#[inline]
pub fn loglik_univariate(y: f64, se: f64, delta: f64) -> f64 {
    dist::normal_ln(y, delta, se)
}

/// Log density of the observed pair under the within-study bivariate normal.
/// With the OS estimate absent this is the marginal PFS density and `rho` is
/// not used.
pub fn loglik_bivariate(
    y1: f64,
    y2: Option<f64>,
    se1: f64,
    se2: Option<f64>,
    rho: f64,
    delta1: f64,
    delta2: f64,
) -> Result<f64> {
    match (y2, se2) {
        (None, None) => Ok(loglik_univariate(y1, se1, delta1)),
        (Some(y2), Some(se2)) => {
            if !(rho.abs() < 1.0 - RHO_EDGE) {
                return Err(Error::InvalidSpec(format!(
                    "within-study correlation {rho} is degenerate"
                )));
            }
            Ok(bvn_ln(y1 - delta1, y2 - delta2, se1, se2, rho))
        }
        _ => Err(Error::InvalidSpec(
            "OS estimate and standard error must be given together".into(),
        )),
    }
}

#[inline]
pub(crate) fn bvn_ln(r1: f64, r2: f64, se1: f64, se2: f64, rho: f64) -> f64 {
    let one_m = 1.0 - rho * rho;
    let det = se1 * se1 * se2 * se2 * one_m;
    if !(det >= dist::VAR_FLOOR) {
        return f64::NEG_INFINITY;
    }
    -dist::LN_2PI - 0.5 * det.ln() - 0.5 * mahalanobis(r1, r2, se1, se2, rho)
}

#[inline]
pub(crate) fn mahalanobis(r1: f64, r2: f64, se1: f64, se2: f64, rho: f64) -> f64 {
    let z1 = r1 / se1;
    let z2 = r2 / se2;
    (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / (1.0 - rho * rho)
}

/// The joint log posterior split into its parts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityTermReport {
    /// One within-study log likelihood per study, in model order.
    pub study_loglik: Vec<f64>,
    /// Hierarchical log densities by level.
    pub hierarchical: Vec<(String, f64)>,
    pub log_prior: f64,
    pub total: f64,
}

fn family_hierarchy(model: &Model, f: &Family, v: &[f64], count_indicators: bool) -> f64 {
    let j = model.n_indications();
    let mut lp = 0.0;
    if let Some(ex) = f.exch {
        let scale = v[f.hyper_scale.unwrap()];
        lp += match f.kind {
            FamilyKind::Location => {
                let mean = v[f.hyper_mean.unwrap()];
                (0..j).map(|k| dist::normal_ln(v[ex + k], mean, scale)).sum::<f64>()
            }
            FamilyKind::Scale => {
                let sd = scale.sqrt();
                (0..j).map(|k| dist::half_normal_ln(v[ex + k], sd)).sum::<f64>()
            }
        };
    }
    if count_indicators {
        if let (Some(c), Some(p)) = (f.indicator, f.prob) {
            lp += (0..j).map(|k| dist::bernoulli_ln(v[c + k], v[p + k])).sum::<f64>();
        }
    }
    lp
}

/// Decomposes the joint log posterior of `v`.
pub fn density_terms(model: &Model, values: &ParameterValues) -> Result<DensityTermReport> {
    let log_prior = model.log_prior(values)?;
    let v = &values.0;
    let mut study_loglik = Vec::with_capacity(model.studies.len());
    let mut hierarchical = Vec::new();

    if log_prior == f64::NEG_INFINITY {
        return Ok(DensityTermReport {
            study_loglik: vec![f64::NEG_INFINITY; model.studies.len()],
            hierarchical,
            log_prior,
            total: f64::NEG_INFINITY,
        });
    }

    match &model.roles {
        Roles::Univariate(u) => {
            let mut between_study = 0.0;
            for (i, s) in model.studies.iter().enumerate() {
                let loc = u.effect.value(v, s.indication);
                match u.delta {
                    Some(d) => {
                        let delta = v[d + i];
                        study_loglik.push(loglik_univariate(s.y, s.se, delta));
                        let tau = v[u.tau.unwrap() + s.indication];
                        between_study += dist::normal_ln(delta, loc, tau);
                    }
                    None => study_loglik.push(loglik_univariate(s.y, s.se, loc)),
                }
            }
            if u.delta.is_some() {
                hierarchical.push(("between-study".to_string(), between_study));
            }
            hierarchical.push(("effect".to_string(), family_hierarchy(model, &u.effect, v, true)));
        }
        Roles::Bivariate(b) => {
            let mut surrogacy = 0.0;
            for (i, s) in model.studies.iter().enumerate() {
                let d1 = v[b.delta1 + i];
                let d2 = v[b.delta2 + i];
                let ll = match s.os {
                    Some((y2, se2)) => {
                        let rho = v[b.rho + i];
                        bvn_ln(s.y - d1, y2 - d2, s.se, se2, rho)
                    }
                    None => loglik_univariate(s.y, s.se, d1),
                };
                study_loglik.push(ll);
                let j = s.indication;
                let mean = b.intercept.value(v, j) + b.slope.value(v, j) * d1;
                surrogacy += dist::normal_ln(d2, mean, b.cond_sd.value(v, j));
            }
            hierarchical.push(("surrogacy".to_string(), surrogacy));
            // Tied indicators are shared; count their Bernoulli mass once.
            let mut seen_indicator = Vec::new();
            for f in [&b.intercept, &b.slope, &b.cond_sd] {
                let count = match f.indicator {
                    Some(c) if seen_indicator.contains(&c) => false,
                    Some(c) => {
                        seen_indicator.push(c);
                        true
                    }
                    None => true,
                };
                hierarchical.push((f.name.to_string(), family_hierarchy(model, f, v, count)));
            }
        }
    }

    let total = study_loglik.iter().sum::<f64>() + hierarchical.iter().map(|(_, x)| x).sum::<f64>() + log_prior;
    let total = if total.is_nan() { f64::NEG_INFINITY } else { total };
    Ok(DensityTermReport {
        study_loglik,
        hierarchical,
        log_prior,
        total,
    })
}

/// Unnormalized joint log posterior; `-inf` outside the support.
pub fn log_joint(model: &Model, values: &ParameterValues) -> Result<f64> {
    density_terms(model, values).map(|r| r.total)
}

/// Residual deviance against the saturated model, given the likelihood's
/// direct parents.
pub fn residual_deviance(model: &Model, values: &ParameterValues) -> Result<f64> {
    model.check_dim(values)?;
    Ok(residual_deviance_raw(model, &values.0))
}

pub(crate) fn residual_deviance_raw(model: &Model, v: &[f64]) -> f64 {
    match &model.roles {
        Roles::Univariate(u) => model
            .studies
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let delta = match u.delta {
                    Some(d) => v[d + i],
                    None => u.effect.value(v, s.indication),
                };
                let z = (s.y - delta) / s.se;
                z * z
            })
            .sum(),
        Roles::Bivariate(b) => model
            .studies
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let r1 = s.y - v[b.delta1 + i];
                match s.os {
                    Some((y2, se2)) => mahalanobis(r1, y2 - v[b.delta2 + i], s.se, se2, v[b.rho + i]),
                    None => (r1 / s.se).powi(2),
                }
            })
            .sum(),
    }
}

/// Number of scalar observations entering the likelihood.
pub fn n_observations(model: &Model) -> usize {
    model
        .studies
        .iter()
        .map(|s| 1 + usize::from(model.spec.endpoint_mode.is_bivariate() && s.os.is_some()))
        .sum()
}
