use rand::Rng;

use super::location::{hyper_scale_step, indicator_step, LocPriors, LocationBlock};
use super::{block_of, normal, Rw};
use crate::dist;
use crate::gaussian::LinearObs;
use crate::model::{Family, Model, Roles};

/// Full conditional of a study effect given its indication-level mean.
#[inline]
pub(crate) fn delta_conditional(y: f64, se: f64, loc: f64, tau: f64) -> (f64, f64) {
    let (a, b) = (1.0 / (se * se), 1.0 / (tau * tau));
    let prec = a + b;
    ((a * y + b * loc) / prec, 1.0 / prec)
}

pub(crate) fn loc_priors(model: &Model) -> LocPriors {
    let pr = &model.spec.priors;
    LocPriors {
        prior_var: pr.effect_normal_sd * pr.effect_normal_sd,
        hyper_hn: pr.tau_halfnormal_scale,
        beta: pr.mixture_beta,
    }
}

pub(crate) struct Univariate<'m> {
    model: &'m Model,
    fam: &'m Family,
    delta: Option<usize>,
    tau: Option<usize>,
    pr: LocPriors,
    loc: LocationBlock,
    obs: Vec<Vec<LinearObs>>,
    scratch: Vec<Vec<LinearObs>>,
    buf: Vec<LinearObs>,
    /// `tau[j]` walks first, then the exchangeable sd if present.
    pub rws: Vec<Rw>,
}

impl<'m> Univariate<'m> {
    pub fn new(model: &'m Model) -> Self {
        let Roles::Univariate(u) = &model.roles else {
            unreachable!("univariate kernel on a bivariate model")
        };
        let n_ind = model.n_indications();
        let mut rws = Vec::new();
        if let Some(t) = u.tau {
            rws.extend((0..n_ind).map(|j| Rw::new(block_of(model, t + j))));
        }
        if let Some(s) = u.effect.hyper_scale {
            rws.push(Rw::new(block_of(model, s)));
        }
        Self {
            model,
            fam: &u.effect,
            delta: u.delta,
            tau: u.tau,
            pr: loc_priors(model),
            loc: LocationBlock::new(model.layout.len, &[&u.effect], n_ind),
            obs: vec![Vec::new(); n_ind],
            scratch: Vec::new(),
            buf: Vec::new(),
            rws,
        }
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, v: &mut [f64], rng: &mut R) {
        let m = self.model;
        let n_ind = m.n_indications();
        if let Some(t) = self.tau {
            let hn = m.spec.priors.tau_halfnormal_scale;
            for j in 0..n_ind {
                let loc = self.fam.value(v, j);
                let studies = &m.by_indication[j];
                let target = |z: f64| {
                    let tau = z.exp();
                    let t2 = tau * tau;
                    let mut lp = dist::half_normal_ln(tau, hn) + z;
                    for &i in studies {
                        let s = &m.studies[i];
                        lp += dist::normal_ln_var(s.y, loc, s.se * s.se + t2);
                    }
                    lp
                };
                v[t + j] = self.rws[j].step(rng, v[t + j].ln(), target).exp();
            }
        }

        for j in 0..n_ind {
            let t2 = self.tau.map_or(0.0, |t| v[t + j] * v[t + j]);
            let obs = &mut self.obs[j];
            obs.clear();
            obs.extend(m.by_indication[j].iter().map(|&i| {
                let s = &m.studies[i];
                LinearObs::scalar(s.y, s.se * s.se + t2)
            }));
        }

        let fams = [self.fam];
        if self.fam.exch.is_some() {
            let rw = self.rws.last_mut().expect("exchangeable sd walk");
            hyper_scale_step(v, &fams, 0, &self.obs, &self.pr, rw, &mut self.scratch, rng);
        }
        if self.fam.sharing.is_mixture() {
            indicator_step(v, &fams, 0, &self.obs, &self.pr, &mut self.buf, rng);
        }
        self.loc.draw(v, &fams, &self.obs, self.pr.prior_var, rng);

        if let (Some(d), Some(t)) = (self.delta, self.tau) {
            for (i, s) in m.studies.iter().enumerate() {
                let j = s.indication;
                let (mu, var) = delta_conditional(s.y, s.se, self.fam.value(v, j), v[t + j]);
                v[d + i] = mu + var.sqrt() * normal(rng);
            }
        }
    }
}
