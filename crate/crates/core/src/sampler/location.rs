//! Updates shared by every location family (pooled effects, surrogacy
//! intercepts and slopes). Family `k` of a group enters observation `o` as
//! `o.x[k] * value`; the observations are per indication and already have
//! the study-level effects integrated out.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::{normal, Rw};
use crate::dist;
use crate::gaussian::{log_lik_fixed, scalar_posterior, LinearObs, PrecisionSystem};
use crate::model::{Family, SharingStructure};

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LocPriors {
    /// Variance of the vague component priors.
    pub prior_var: f64,
    /// Half-normal scale of the exchangeable sd.
    pub hyper_hn: f64,
    pub beta: (f64, f64),
}

impl LocPriors {
    /// Prior probability of the sharing component with `p` integrated out.
    pub fn share_weight(&self) -> f64 {
        self.beta.0 / (self.beta.0 + self.beta.1)
    }
}

/// Joint Gaussian draw of every location slot of a group of families.
#[derive(Debug, Clone)]
pub(crate) struct LocationBlock {
    index: Vec<usize>,
    slots: Vec<usize>,
    sys: PrecisionSystem,
    out: Vec<f64>,
}

impl LocationBlock {
    pub fn new(layout_len: usize, fams: &[&Family], n_ind: usize) -> Self {
        let mut slots = Vec::new();
        for f in fams {
            slots.extend(f.common);
            if let Some(o) = f.indep {
                slots.extend(o..o + n_ind);
            }
            if let Some(o) = f.exch {
                slots.extend(o..o + n_ind);
            }
            slots.extend(f.hyper_mean);
        }
        let mut index = vec![NONE; layout_len];
        for (k, &s) in slots.iter().enumerate() {
            index[s] = k;
        }
        let n = slots.len();
        Self {
            index,
            slots,
            sys: PrecisionSystem::new(n),
            out: vec![0.0; n],
        }
    }

    pub fn contains(&self, offset: usize) -> bool {
        self.index.get(offset).is_some_and(|&i| i != NONE)
    }

    fn build(&mut self, v: &[f64], fams: &[&Family], obs: &[Vec<LinearObs>], prior_var: f64) {
        let sys = &mut self.sys;
        sys.reset();
        let n_ind = obs.len();
        let pp = 1.0 / prior_var;
        for f in fams {
            if let Some(c) = f.common {
                sys.add_diag(self.index[c], pp, 0.0);
            }
            if let Some(o) = f.indep {
                for j in 0..n_ind {
                    sys.add_diag(self.index[o + j], pp, 0.0);
                }
            }
            if let (Some(m), Some(ex), Some(s)) = (f.hyper_mean, f.exch, f.hyper_scale) {
                let mi = self.index[m];
                sys.add_diag(mi, pp, 0.0);
                let w = 1.0 / (v[s] * v[s]);
                for j in 0..n_ind {
                    let e = self.index[ex + j];
                    sys.add_q(e, e, w);
                    sys.add_q(mi, mi, w);
                    sys.add_q(e, mi, -w);
                }
            }
        }
        let mut a = [NONE; 2];
        for (j, obs_j) in obs.iter().enumerate() {
            for (k, f) in fams.iter().enumerate() {
                a[k] = self.index[f.active(v, j)];
            }
            for o in obs_j {
                let w = 1.0 / o.v;
                for k in 0..fams.len() {
                    sys.add_b(a[k], o.x[k] * o.r * w);
                    for l in 0..=k {
                        sys.add_q(a[k], a[l], o.x[k] * o.x[l] * w);
                    }
                }
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(
        &mut self,
        v: &mut [f64],
        fams: &[&Family],
        obs: &[Vec<LinearObs>],
        prior_var: f64,
        rng: &mut R,
    ) {
        self.build(v, fams, obs, prior_var);
        let mut out = std::mem::take(&mut self.out);
        if self.sys.sample(rng, &mut out).is_some() {
            for (&s, &x) in self.slots.iter().zip(&out) {
                v[s] = x;
            }
        }
        self.out = out;
    }

    /// Full conditional `(mean, var)` of the slot at `offset`.
    pub fn conditional(
        &mut self,
        v: &[f64],
        fams: &[&Family],
        obs: &[Vec<LinearObs>],
        prior_var: f64,
        offset: usize,
    ) -> Option<(f64, f64)> {
        if !self.contains(offset) {
            return None;
        }
        self.build(v, fams, obs, prior_var);
        let x: Vec<f64> = self.slots.iter().map(|&s| v[s]).collect();
        Some(self.sys.conditional(self.index[offset], &x))
    }
}

/// Observations of family `k` alone for indication `j`, with the other
/// families' contributions moved into the response.
pub(crate) fn partial_obs(
    v: &[f64],
    fams: &[&Family],
    k: usize,
    j: usize,
    obs_j: &[LinearObs],
    out: &mut Vec<LinearObs>,
) {
    out.clear();
    let others: [f64; 2] = std::array::from_fn(|l| {
        if l < fams.len() && l != k {
            fams[l].value(v, j)
        } else {
            0.0
        }
    });
    for o in obs_j {
        let r = o.r - o.x[0] * others[0] - o.x[1] * others[1];
        out.push(LinearObs {
            x: [o.x[k], 0.0],
            r,
            v: o.v,
        });
    }
}

/// Random walk on the log exchangeable sd with the exchangeable components
/// integrated out, followed by an exact redraw of those components.
pub(crate) fn hyper_scale_step<R: Rng + ?Sized>(
    v: &mut [f64],
    fams: &[&Family],
    k: usize,
    obs: &[Vec<LinearObs>],
    pr: &LocPriors,
    rw: &mut Rw,
    scratch: &mut Vec<Vec<LinearObs>>,
    rng: &mut R,
) {
    let f = fams[k];
    let (Some(ex), Some(hm), Some(hs)) = (f.exch, f.hyper_mean, f.hyper_scale) else {
        return;
    };
    let n = obs.len();
    scratch.resize_with(n, Vec::new);
    for j in 0..n {
        partial_obs(v, fams, k, j, &obs[j], &mut scratch[j]);
    }
    let m = v[hm];
    let active: Vec<bool> = (0..n).map(|j| f.active(v, j) == ex + j).collect();
    let data = &*scratch;
    let target = |z: f64| {
        let s = z.exp();
        let var = s * s;
        let mut lp = dist::half_normal_ln(s, pr.hyper_hn) + z;
        for j in (0..n).filter(|&j| active[j]) {
            lp += scalar_posterior(&data[j], 0, m, var).2;
        }
        lp
    };
    let z = rw.step(rng, v[hs].ln(), target);
    let s = z.exp();
    v[hs] = s;
    for j in 0..n {
        v[ex + j] = if active[j] {
            let (mu, var, _) = scalar_posterior(&data[j], 0, m, s * s);
            mu + var.sqrt() * normal(rng)
        } else {
            m + s * normal(rng)
        };
    }
}

pub(crate) fn beta_draw<R: Rng + ?Sized>(rng: &mut R, beta: (f64, f64), c: f64) -> f64 {
    let d = Beta::new(beta.0 + c, beta.1 + 1.0 - c).expect("positive beta parameters");
    d.sample(rng).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// `P(c = 1)` from log weights of the two components.
pub(crate) fn indicator_prob(w: f64, g1: f64, g0: f64) -> f64 {
    let logit = (w.ln() + g1) - ((1.0 - w).ln() + g0);
    if logit.is_nan() {
        return w;
    }
    1.0 / (1.0 + (-logit).exp())
}

/// Untied mixture indicators of family `k`: each `c_j` is drawn with its
/// indication's component and `p_j` integrated out, then the components and
/// `p_j` are redrawn.
pub(crate) fn indicator_step<R: Rng + ?Sized>(
    v: &mut [f64],
    fams: &[&Family],
    k: usize,
    obs: &[Vec<LinearObs>],
    pr: &LocPriors,
    buf: &mut Vec<LinearObs>,
    rng: &mut R,
) {
    let f = fams[k];
    let (Some(c), Some(p), Some(ind)) = (f.indicator, f.prob, f.indep) else {
        return;
    };
    let w = pr.share_weight();
    let prior_sd = pr.prior_var.sqrt();
    for j in 0..obs.len() {
        partial_obs(v, fams, k, j, &obs[j], buf);
        let (m0, var0, g0) = scalar_posterior(buf, 0, 0.0, pr.prior_var);
        let cj = match f.sharing {
            SharingStructure::MCIP => {
                let g1 = log_lik_fixed(buf, [v[f.common.unwrap()], 0.0]);
                let cj = draw_bit(rng, indicator_prob(w, g1, g0));
                v[ind + j] = if cj == 1.0 {
                    prior_sd * normal(rng)
                } else {
                    m0 + var0.sqrt() * normal(rng)
                };
                cj
            }
            SharingStructure::MRIP => {
                let (m, s) = (v[f.hyper_mean.unwrap()], v[f.hyper_scale.unwrap()]);
                let (m1, var1, g1) = scalar_posterior(buf, 0, m, s * s);
                let cj = draw_bit(rng, indicator_prob(w, g1, g0));
                let ex = f.exch.unwrap() + j;
                if cj == 1.0 {
                    v[ex] = m1 + var1.sqrt() * normal(rng);
                    v[ind + j] = prior_sd * normal(rng);
                } else {
                    v[ind + j] = m0 + var0.sqrt() * normal(rng);
                    v[ex] = m + s * normal(rng);
                }
                cj
            }
            _ => unreachable!("indicator on a non-mixture family"),
        };
        v[c + j] = cj;
        v[p + j] = beta_draw(rng, pr.beta, cj);
    }
}

pub(crate) fn draw_bit<R: Rng + ?Sized>(rng: &mut R, p1: f64) -> f64 {
    let u: f64 = rng.random();
    if u < p1 {
        1.0
    } else {
        0.0
    }
}
