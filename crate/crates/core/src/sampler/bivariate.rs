use rand::Rng;

use super::location::{
    beta_draw, draw_bit, hyper_scale_step, indicator_prob, indicator_step, LocPriors, LocationBlock,
};
use super::{block_of, normal, Rw};
use crate::dist;
use crate::gaussian::{log_lik_fixed, LinearObs, LinearPosterior};
use crate::likelihood::{bvn_ln, RHO_EDGE};
use crate::model::{BivariateRoles, Family, Model, Roles, SharingStructure, Study};

/// Precision `(q11, q12, q22)` and linear term of `(delta1, delta2)` for one
/// study given the surrogacy line and within-study correlation.
pub(crate) fn study_system(s: &Study, rho: f64, l0: f64, l1: f64, psi: f64, prior_var: f64) -> ([f64; 3], [f64; 2]) {
    let w = 1.0 / (psi * psi);
    let mut q = [1.0 / prior_var + l1 * l1 * w, -l1 * w, w];
    let mut b = [-l1 * l0 * w, l0 * w];
    match s.os {
        Some((y2, se2)) => {
            let k = 1.0 / (1.0 - rho * rho);
            let a11 = k / (s.se * s.se);
            let a22 = k / (se2 * se2);
            let a12 = -k * rho / (s.se * se2);
            q[0] += a11;
            q[1] += a12;
            q[2] += a22;
            b[0] += a11 * s.y + a12 * y2;
            b[1] += a12 * s.y + a22 * y2;
        }
        None => {
            let a = 1.0 / (s.se * s.se);
            q[0] += a;
            b[0] += a * s.y;
        }
    }
    (q, b)
}

fn draw_2d<R: Rng + ?Sized>(q: [f64; 3], b: [f64; 2], rng: &mut R) -> [f64; 2] {
    // Q = L L^T; mean = Q^-1 b; draw = mean + L^-T z.
    let l11 = q[0].sqrt();
    let l21 = q[1] / l11;
    let l22 = (q[2] - l21 * l21).sqrt();
    let y1 = b[0] / l11;
    let y2 = (b[1] - l21 * y1) / l22;
    let z2 = normal(rng);
    let z1 = normal(rng);
    let x2 = (y2 + z2) / l22;
    let x1 = (y1 + z1 - l21 * x2) / l11;
    [x1, x2]
}

/// `rho = lo + (hi - lo) (tanh z + 1) / 2`.
fn rho_of(z: f64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (z.tanh() + 1.0) / 2.0
}

fn z_of(rho: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * (rho - lo) / (hi - lo) - 1.0).atanh()
}

fn ln_rho_jacobian(z: f64, lo: f64, hi: f64) -> f64 {
    let a = z.abs();
    ((hi - lo) / 2.0).ln() + 4f64.ln() - 2.0 * (a + (-2.0 * a).exp().ln_1p())
}

/// Study-level terms of the OS margin with `delta2` integrated out:
/// `y2 ~ N(l0 + l1 delta1 + r_shift, psi^2 + w)`.
#[derive(Debug, Clone, Copy, Default)]
struct Collapsed {
    r: f64,
    x: f64,
    w: f64,
}

pub(crate) struct Bivariate<'m> {
    model: &'m Model,
    roles: &'m BivariateRoles,
    lo: f64,
    hi: f64,
    pr: LocPriors,
    loc: LocationBlock,
    /// Studies reporting both endpoints, per indication.
    dual: Vec<Vec<usize>>,
    col: Vec<Collapsed>,
    obs: Vec<Vec<LinearObs>>,
    scratch: Vec<Vec<LinearObs>>,
    buf: Vec<LinearObs>,
    psi_slots: Vec<usize>,
    rho_rw: Vec<usize>,
    psi_rw: Vec<usize>,
    h_rw: Option<usize>,
    xi_rw: [Option<usize>; 2],
    pub rws: Vec<Rw>,
}

impl<'m> Bivariate<'m> {
    pub fn new(model: &'m Model) -> Self {
        let Roles::Bivariate(b) = &model.roles else {
            unreachable!("bivariate kernel on a univariate model")
        };
        let pr = &model.spec.priors;
        let n_ind = model.n_indications();
        let mut rws = Vec::new();
        let mut push = |off: usize| {
            rws.push(Rw::new(block_of(model, off)));
            rws.len() - 1
        };
        let rho_rw = (0..model.studies.len()).map(|i| push(b.rho + i)).collect();
        let psi = &b.cond_sd;
        let mut psi_slots: Vec<usize> = psi.common.into_iter().collect();
        if let Some(o) = psi.indep {
            psi_slots.extend(o..o + n_ind);
        }
        if let Some(o) = psi.exch {
            psi_slots.extend(o..o + n_ind);
        }
        let psi_rw = psi_slots.iter().map(|&s| push(s)).collect();
        let h_rw = psi.hyper_scale.map(&mut push);
        let xi_rw = [
            b.intercept.hyper_scale.map(&mut push),
            b.slope.hyper_scale.map(&mut push),
        ];
        let dual = model
            .by_indication
            .iter()
            .map(|ix| ix.iter().copied().filter(|&i| model.studies[i].os.is_some()).collect())
            .collect();
        Self {
            model,
            roles: b,
            lo: pr.rho_uniform_bounds.0,
            hi: pr.rho_uniform_bounds.1,
            pr: LocPriors {
                prior_var: pr.effect_normal_sd * pr.effect_normal_sd,
                hyper_hn: pr.xi_halfnormal_scale,
                beta: pr.mixture_beta,
            },
            loc: LocationBlock::new(model.layout.len, &[&b.intercept, &b.slope], n_ind),
            dual,
            col: vec![Collapsed::default(); model.studies.len()],
            obs: vec![Vec::new(); n_ind],
            scratch: Vec::new(),
            buf: Vec::new(),
            psi_slots,
            rho_rw,
            psi_rw,
            h_rw,
            xi_rw,
            rws,
        }
    }

    fn fams(&self) -> [&'m Family; 2] {
        [&self.roles.intercept, &self.roles.slope]
    }

    fn fill_obs(&mut self, v: &[f64]) {
        let psi = &self.roles.cond_sd;
        for (j, obs) in self.obs.iter_mut().enumerate() {
            let p2 = psi.value(v, j).powi(2);
            obs.clear();
            obs.extend(self.dual[j].iter().map(|&i| {
                let c = self.col[i];
                LinearObs {
                    x: [1.0, c.x],
                    r: c.r,
                    v: p2 + c.w,
                }
            }));
        }
    }

    /// Collapsed log likelihood of indication `j`'s OS estimates under `psi`.
    fn psi_loglik(&self, v: &[f64], j: usize, psi: f64) -> f64 {
        let [f0, f1] = self.fams();
        let (l0, l1) = (f0.value(v, j), f1.value(v, j));
        let p2 = psi * psi;
        self.dual[j]
            .iter()
            .map(|&i| {
                let c = self.col[i];
                dist::normal_ln_var(c.r - l0 - l1 * c.x, 0.0, p2 + c.w)
            })
            .sum()
    }

    pub fn sweep<R: Rng + ?Sized>(&mut self, v: &mut [f64], rng: &mut R) {
        let m = self.model;
        let b = self.roles;
        let (lo, hi) = (self.lo, self.hi);

        for (i, s) in m.studies.iter().enumerate() {
            let r = b.rho + i;
            match s.os {
                Some((y2, se2)) => {
                    let (r1, r2) = (s.y - v[b.delta1 + i], y2 - v[b.delta2 + i]);
                    let target = |z: f64| {
                        let rho = rho_of(z, lo, hi);
                        if !(rho.abs() < 1.0 - RHO_EDGE) {
                            return f64::NEG_INFINITY;
                        }
                        bvn_ln(r1, r2, s.se, se2, rho) + ln_rho_jacobian(z, lo, hi)
                    };
                    let z = self.rws[self.rho_rw[i]].step(rng, z_of(v[r], lo, hi), target);
                    v[r] = rho_of(z, lo, hi);
                }
                None => loop {
                    let u: f64 = rng.random();
                    let rho = lo + (hi - lo) * u;
                    if rho > lo && rho.abs() < 1.0 - RHO_EDGE {
                        v[r] = rho;
                        break;
                    }
                },
            }
        }

        for (i, s) in m.studies.iter().enumerate() {
            if let Some((y2, se2)) = s.os {
                let rho = v[b.rho + i];
                let d1 = v[b.delta1 + i];
                self.col[i] = Collapsed {
                    r: y2 - rho * se2 / s.se * (s.y - d1),
                    x: d1,
                    w: (1.0 - rho * rho) * se2 * se2,
                };
            }
        }

        self.psi_step(v, rng);
        self.fill_obs(v);

        let fams = self.fams();
        for k in 0..2 {
            if let Some(r) = self.xi_rw[k] {
                hyper_scale_step(
                    v,
                    &fams,
                    k,
                    &self.obs,
                    &self.pr,
                    &mut self.rws[r],
                    &mut self.scratch,
                    rng,
                );
            }
        }
        if m.spec.sharing.is_mixture() {
            if m.spec.tie_mixture_probabilities {
                self.tied_indicator_step(v, rng);
            } else {
                for k in 0..2 {
                    indicator_step(v, &fams, k, &self.obs, &self.pr, &mut self.buf, rng);
                }
            }
        }
        if b.cond_sd.sharing.is_mixture() && !self.psi_tied() {
            self.psi_indicator_step(v, rng);
        }
        self.fill_obs(v);
        self.loc.draw(v, &fams, &self.obs, self.pr.prior_var, rng);

        let psi = &b.cond_sd;
        for (i, s) in m.studies.iter().enumerate() {
            let j = s.indication;
            let (q, bb) = study_system(
                s,
                v[b.rho + i],
                fams[0].value(v, j),
                fams[1].value(v, j),
                psi.value(v, j),
                self.pr.prior_var,
            );
            let [d1, d2] = draw_2d(q, bb, rng);
            v[b.delta1 + i] = d1;
            v[b.delta2 + i] = d2;
        }
    }

    fn psi_tied(&self) -> bool {
        self.model.spec.tie_mixture_probabilities && self.roles.cond_sd.indicator == self.roles.intercept.indicator
    }

    fn psi_step<R: Rng + ?Sized>(&mut self, v: &mut [f64], rng: &mut R) {
        let m = self.model;
        let pr = &m.spec.priors;
        let psi = &self.roles.cond_sd;
        let n_ind = m.n_indications();
        for (k, &slot) in self.psi_slots.iter().enumerate() {
            let exch = psi.exch.is_some_and(|e| (e..e + n_ind).contains(&slot));
            let scale = if exch {
                v[psi.hyper_scale.unwrap()].sqrt()
            } else {
                pr.psi_halfnormal_scale
            };
            let users: Vec<usize> = (0..n_ind).filter(|&j| psi.active(v, j) == slot).collect();
            if users.is_empty() {
                v[slot] = (scale * normal(rng)).abs().max(f64::MIN_POSITIVE);
                continue;
            }
            let this = &*self;
            let target = |z: f64| {
                let p = z.exp();
                let mut lp = dist::half_normal_ln(p, scale) + z;
                for &j in &users {
                    lp += this.psi_loglik(v, j, p);
                }
                lp
            };
            let z = {
                let mut rw = self.rws[self.psi_rw[k]].clone();
                let z = rw.step(rng, v[slot].ln(), target);
                self.rws[self.psi_rw[k]] = rw;
                z
            };
            v[slot] = z.exp();
        }
        if let (Some(ex), Some(hs), Some(r)) = (psi.exch, psi.hyper_scale, self.h_rw) {
            let vals: Vec<f64> = v[ex..ex + n_ind].to_vec();
            let target = |z: f64| {
                let h = z.exp();
                let sd = h.sqrt();
                vals.iter().map(|&p| dist::half_normal_ln(p, sd)).sum::<f64>()
                    + dist::gamma_ln(h, pr.h_gamma_shape, pr.h_gamma_rate)
                    + z
            };
            v[hs] = self.rws[r].step(rng, v[hs].ln(), target).exp();
        }
    }

    fn psi_indicator_step<R: Rng + ?Sized>(&mut self, v: &mut [f64], rng: &mut R) {
        let psi = &self.roles.cond_sd;
        let (Some(c), Some(p), Some(ind)) = (psi.indicator, psi.prob, psi.indep) else {
            return;
        };
        let w = self.pr.share_weight();
        for j in 0..self.model.n_indications() {
            let g1 = self.psi_loglik(v, j, v[psi.sharing_component(j)]);
            let g0 = self.psi_loglik(v, j, v[ind + j]);
            let cj = draw_bit(rng, indicator_prob(w, g1, g0));
            v[c + j] = cj;
            v[p + j] = beta_draw(rng, self.pr.beta, cj);
        }
    }

    /// One indicator per indication switching intercept, slope (and the
    /// conditional sd when it is a mixture) together; the intercept and
    /// slope components are integrated out jointly.
    fn tied_indicator_step<R: Rng + ?Sized>(&mut self, v: &mut [f64], rng: &mut R) {
        let [f0, f1] = self.fams();
        let psi = &self.roles.cond_sd;
        let (Some(c), Some(p)) = (f0.indicator, f0.prob) else {
            return;
        };
        let (i0, i1) = (f0.indep.unwrap(), f1.indep.unwrap());
        let s2 = self.pr.prior_var;
        let sd = s2.sqrt();
        let vague = [(0.0, s2), (0.0, s2)];
        let w = self.pr.share_weight();
        let psi_tied = self.psi_tied();
        let mcip = f0.sharing == SharingStructure::MCIP;
        for j in 0..self.model.n_indications() {
            let psi_under = |cc: f64| {
                if psi_tied {
                    if cc == 1.0 {
                        v[psi.sharing_component(j)]
                    } else {
                        v[psi.indep.unwrap() + j]
                    }
                } else {
                    psi.value(v, j)
                }
            };
            let obs_under = |cc: f64| -> Vec<LinearObs> {
                let p2 = psi_under(cc).powi(2);
                self.dual[j]
                    .iter()
                    .map(|&i| {
                        let col = self.col[i];
                        LinearObs {
                            x: [1.0, col.x],
                            r: col.r,
                            v: p2 + col.w,
                        }
                    })
                    .collect()
            };
            let (obs0, obs1) = (obs_under(0.0), obs_under(1.0));
            let mut post0 = LinearPosterior::fit(&obs0, &[0, 1], &vague).expect("proper prior");
            let shared_prior = if mcip {
                None
            } else {
                let (b0, x0) = (v[f0.hyper_mean.unwrap()], v[f0.hyper_scale.unwrap()]);
                let (b1, x1) = (v[f1.hyper_mean.unwrap()], v[f1.hyper_scale.unwrap()]);
                Some([(b0, x0 * x0), (b1, x1 * x1)])
            };
            let mut post1 = shared_prior.map(|pr| LinearPosterior::fit(&obs1, &[0, 1], &pr).expect("proper prior"));
            let g1 = match &post1 {
                Some(fit) => fit.log_marginal,
                None => log_lik_fixed(&obs1, [v[f0.common.unwrap()], v[f1.common.unwrap()]]),
            };
            let cj = draw_bit(rng, indicator_prob(w, g1, post0.log_marginal));
            if cj == 1.0 {
                if let Some(fit) = post1.as_mut() {
                    let x = fit.sample(rng);
                    v[f0.exch.unwrap() + j] = x[0];
                    v[f1.exch.unwrap() + j] = x[1];
                }
                v[i0 + j] = sd * normal(rng);
                v[i1 + j] = sd * normal(rng);
            } else {
                let x = post0.sample(rng);
                v[i0 + j] = x[0];
                v[i1 + j] = x[1];
                if let Some(pr) = shared_prior {
                    v[f0.exch.unwrap() + j] = pr[0].0 + pr[0].1.sqrt() * normal(rng);
                    v[f1.exch.unwrap() + j] = pr[1].0 + pr[1].1.sqrt() * normal(rng);
                }
            }
            v[c + j] = cj;
            v[p + j] = beta_draw(rng, self.pr.beta, cj);
        }
    }
}
