//! Exact full conditionals of the conjugate coordinates, evaluated at a given
//! state through the same builders the sampler uses.

use super::bivariate::study_system;
use super::location::LocationBlock;
use super::univariate::delta_conditional;
use crate::error::{Error, Result};
use crate::gaussian::LinearObs;
use crate::likelihood::log_joint;
use crate::model::{Model, ParameterValues, Roles};

/// Full conditional `(mean, variance)` of the conjugate-normal scalar at
/// layout offset `offset` given every other coordinate of `values`.
pub fn conjugate_conditional(model: &Model, values: &ParameterValues, offset: usize) -> Result<(f64, f64)> {
    model.check_dim(values)?;
    let v = &values.0;
    let prior_var = model.spec.priors.effect_normal_sd.powi(2);
    let n_ind = model.n_indications();
    let not_conjugate = || Error::InvalidSpec(format!("offset {offset} is not a conjugate-normal coordinate"));
    match &model.roles {
        Roles::Univariate(u) => {
            if let (Some(d), Some(t)) = (u.delta, u.tau) {
                if (d..d + model.studies.len()).contains(&offset) {
                    let s = &model.studies[offset - d];
                    let j = s.indication;
                    return Ok(delta_conditional(s.y, s.se, u.effect.value(v, j), v[t + j]));
                }
            }
            let obs: Vec<Vec<LinearObs>> = model
                .by_indication
                .iter()
                .enumerate()
                .map(|(j, ix)| {
                    ix.iter()
                        .map(|&i| {
                            let s = &model.studies[i];
                            match (u.delta, u.tau) {
                                (Some(d), Some(t)) => LinearObs::scalar(v[d + i], v[t + j] * v[t + j]),
                                _ => LinearObs::scalar(s.y, s.se * s.se),
                            }
                        })
                        .collect()
                })
                .collect();
            let fams = [&u.effect];
            LocationBlock::new(model.layout.len, &fams, n_ind)
                .conditional(v, &fams, &obs, prior_var, offset)
                .ok_or_else(not_conjugate)
        }
        Roles::Bivariate(b) => {
            let n = model.studies.len();
            let in_d1 = (b.delta1..b.delta1 + n).contains(&offset);
            let in_d2 = (b.delta2..b.delta2 + n).contains(&offset);
            if in_d1 || in_d2 {
                let i = offset - if in_d1 { b.delta1 } else { b.delta2 };
                let s = &model.studies[i];
                let j = s.indication;
                let (q, bb) = study_system(
                    s,
                    v[b.rho + i],
                    b.intercept.value(v, j),
                    b.slope.value(v, j),
                    b.cond_sd.value(v, j),
                    prior_var,
                );
                let (d1, d2) = (v[b.delta1 + i], v[b.delta2 + i]);
                return Ok(if in_d1 {
                    ((bb[0] - q[1] * d2) / q[0], 1.0 / q[0])
                } else {
                    ((bb[1] - q[1] * d1) / q[2], 1.0 / q[2])
                });
            }
            let obs: Vec<Vec<LinearObs>> = model
                .by_indication
                .iter()
                .enumerate()
                .map(|(j, ix)| {
                    let p2 = b.cond_sd.value(v, j).powi(2);
                    ix.iter()
                        .map(|&i| LinearObs {
                            x: [1.0, v[b.delta1 + i]],
                            r: v[b.delta2 + i],
                            v: p2,
                        })
                        .collect()
                })
                .collect();
            let fams = [&b.intercept, &b.slope];
            LocationBlock::new(model.layout.len, &fams, n_ind)
                .conditional(v, &fams, &obs, prior_var, offset)
                .ok_or_else(not_conjugate)
        }
    }
}

/// `P(c_j = 1 | everything else)` for the indicator block `block` (with the
/// component values and `p_j` held at `values`).
pub fn indicator_conditional(model: &Model, values: &ParameterValues, block: &str, j: usize) -> Result<f64> {
    let b = model
        .layout
        .block(block)
        .filter(|b| b.support == crate::model::Support::Binary)
        .ok_or_else(|| Error::InvalidSpec(format!("`{block}` is not an indicator block")))?;
    if j >= b.dim {
        return Err(Error::Dimension {
            block: block.to_string(),
            expected: b.dim,
            got: j + 1,
        });
    }
    let mut v = values.clone();
    v.0[b.offset + j] = 1.0;
    let l1 = log_joint(model, &v)?;
    v.0[b.offset + j] = 0.0;
    let l0 = log_joint(model, &v)?;
    Ok(1.0 / (1.0 + (l0 - l1).exp()))
}
