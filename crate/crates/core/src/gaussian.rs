//! Precision-form Gaussian algebra for the conjugate updates.
//!
//! Systems here are tiny (at most a few dozen coordinates) and rebuilt every
//! sweep, so they use flat row-major buffers and a hand-written Cholesky
//! rather than a general linear-algebra crate.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dist::LN_2PI;

/// Dense symmetric system `Q x = b` describing `N(Q^-1 b, Q^-1)`.
#[derive(Debug, Clone)]
pub struct PrecisionSystem {
    n: usize,
    q: Vec<f64>,
    b: Vec<f64>,
    chol: Vec<f64>,
    work: Vec<f64>,
}

impl PrecisionSystem {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            q: vec![0.0; n * n],
            b: vec![0.0; n],
            chol: vec![0.0; n * n],
            work: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn reset(&mut self) {
        self.q.fill(0.0);
        self.b.fill(0.0);
    }

    /// Adds `prec * (x_i - mean)^2 / 2` to the negative log density.
    #[inline]
    pub fn add_diag(&mut self, i: usize, prec: f64, mean: f64) {
        self.q[i * self.n + i] += prec;
        self.b[i] += prec * mean;
    }

    #[inline]
    pub fn add_q(&mut self, i: usize, k: usize, val: f64) {
        self.q[i * self.n + k] += val;
        if i != k {
            self.q[k * self.n + i] += val;
        }
    }

    #[inline]
    pub fn add_b(&mut self, i: usize, val: f64) {
        self.b[i] += val;
    }

    pub fn q(&self, i: usize, k: usize) -> f64 {
        self.q[i * self.n + k]
    }

    pub fn b(&self, i: usize) -> f64 {
        self.b[i]
    }

    /// Full conditional `(mean, var)` of coordinate `i` given the others.
    pub fn conditional(&self, i: usize, x: &[f64]) -> (f64, f64) {
        let qii = self.q(i, i);
        let off: f64 = (0..self.n).filter(|&k| k != i).map(|k| self.q(i, k) * x[k]).sum();
        ((self.b[i] - off) / qii, 1.0 / qii)
    }

    fn factor(&mut self) -> bool {
        let n = self.n;
        let l = &mut self.chol;
        l.fill(0.0);
        for i in 0..n {
            for k in 0..=i {
                let mut s = self.q[i * n + k];
                for m in 0..k {
                    s -= l[i * n + m] * l[k * n + m];
                }
                if i == k {
                    if !(s > 0.0) {
                        return false;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + k] = s / l[k * n + k];
                }
            }
        }
        true
    }

    /// Solves `L y = rhs` in place.
    fn forward(&self, y: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = y[i];
            for m in 0..i {
                s -= self.chol[i * n + m] * y[m];
            }
            y[i] = s / self.chol[i * n + i];
        }
    }

    /// Solves `L^T x = rhs` in place.
    fn backward(&self, x: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = x[i];
            for m in i + 1..n {
                s -= self.chol[m * n + i] * x[m];
            }
            x[i] = s / self.chol[i * n + i];
        }
    }

    /// Mean `Q^-1 b`; `None` if `Q` is not positive definite.
    pub fn mean(&mut self, out: &mut [f64]) -> Option<()> {
        if !self.factor() {
            return None;
        }
        out.copy_from_slice(&self.b);
        self.forward(out);
        self.backward(out);
        Some(())
    }

    /// Draws from the distribution into `out`.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut [f64]) -> Option<()> {
        self.mean(out)?;
        let mut z = std::mem::take(&mut self.work);
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        self.backward(&mut z);
        for (o, zi) in out.iter_mut().zip(&z) {
            *o += zi;
        }
        self.work = z;
        Some(())
    }

    /// `log det Q`, valid after a successful [`Self::mean`] or [`Self::sample`].
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| 2.0 * self.chol[i * self.n + i].ln()).sum()
    }
}

/// Observation `r ~ N(x . coef, v)` of a small coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearObs {
    pub x: [f64; 2],
    pub r: f64,
    pub v: f64,
}

impl LinearObs {
    pub fn scalar(r: f64, v: f64) -> Self {
        Self { x: [1.0, 0.0], r, v }
    }
}

/// Posterior of up to two regression coefficients with independent normal
/// priors, and the log marginal likelihood of the observations.
#[derive(Debug, Clone)]
pub struct LinearPosterior {
    sys: PrecisionSystem,
    pub mean: Vec<f64>,
    pub log_marginal: f64,
}

impl LinearPosterior {
    /// `coefs[k]` selects which design column each coefficient uses; prior of
    /// coefficient `k` is `N(prior[k].0, prior[k].1)` (mean, variance).
    pub fn fit(obs: &[LinearObs], cols: &[usize], prior: &[(f64, f64)]) -> Option<Self> {
        let k = cols.len();
        let mut sys = PrecisionSystem::new(k);
        for (a, &(m, var)) in prior.iter().enumerate() {
            sys.add_diag(a, 1.0 / var, m);
        }
        for o in obs {
            let w = 1.0 / o.v;
            for a in 0..k {
                let xa = o.x[cols[a]];
                sys.add_b(a, xa * o.r * w);
                for c in 0..=a {
                    sys.add_q(a, c, xa * o.x[cols[c]] * w);
                }
            }
        }
        let mut mean = vec![0.0; k];
        sys.mean(&mut mean)?;
        // p(r) = p(r | mu) p(mu) / p(mu | r) evaluated at the posterior mean.
        let mut lm = 0.0;
        for o in obs {
            let fit: f64 = (0..k).map(|a| o.x[cols[a]] * mean[a]).sum();
            let z = o.r - fit;
            lm += -0.5 * (LN_2PI + o.v.ln() + z * z / o.v);
        }
        for (a, &(m, var)) in prior.iter().enumerate() {
            let z = mean[a] - m;
            lm += -0.5 * (LN_2PI + var.ln() + z * z / var);
        }
        lm += 0.5 * k as f64 * LN_2PI - 0.5 * sys.log_det();
        Some(Self {
            sys,
            mean,
            log_marginal: lm,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.mean.len()];
        self.sys.sample(rng, &mut out).expect("factored above");
        out
    }

    pub fn variance(&self, k: usize) -> f64 {
        // Only used for 1-d fits in practice; general inverse diagonal.
        let n = self.sys.dim();
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        self.sys.forward(&mut e);
        e.iter().map(|x| x * x).sum()
    }
}

/// One-coefficient special case of [`LinearPosterior`] without allocation:
/// returns `(mean, var, log_marginal)` for coefficient on design column `col`.
pub fn scalar_posterior(obs: &[LinearObs], col: usize, prior_mean: f64, prior_var: f64) -> (f64, f64, f64) {
    let mut prec = 1.0 / prior_var;
    let mut lin = prior_mean / prior_var;
    for o in obs {
        let x = o.x[col];
        prec += x * x / o.v;
        lin += x * o.r / o.v;
    }
    let mean = lin / prec;
    let mut lm = 0.0;
    for o in obs {
        let z = o.r - o.x[col] * mean;
        lm += -0.5 * (LN_2PI + o.v.ln() + z * z / o.v);
    }
    let z = mean - prior_mean;
    lm += -0.5 * (LN_2PI + prior_var.ln() + z * z / prior_var);
    lm += 0.5 * LN_2PI + 0.5 * (1.0 / prec).ln();
    (mean, 1.0 / prec, lm)
}

/// Log marginal likelihood of observations with all coefficients fixed.
pub fn log_lik_fixed(obs: &[LinearObs], coef: [f64; 2]) -> f64 {
    obs.iter()
        .map(|o| {
            let z = o.r - o.x[0] * coef[0] - o.x[1] * coef[1];
            -0.5 * (LN_2PI + o.v.ln() + z * z / o.v)
        })
        .sum()
}
