//! Closed-form and quadrature posteriors for small univariate models.
//!
//! The quadrature oracle integrates every location parameter analytically
//! (covariance form, given the scales and the mixture indicators), sums the
//! indicators out with their Beta-Bernoulli prior weights and applies
//! tensor-product Simpson rules over the remaining scale parameters.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evidence::EvidenceSet;
use crate::model::{Model, ModelSpec, SharingStructure};

/// Normal-normal posterior `(mean, sd)` of an effect with estimate `y`
/// (standard error `se`) and prior `N(prior_mean, prior_sd^2)`.
pub fn conjugate_posterior(y: f64, se: f64, prior_mean: f64, prior_sd: f64) -> (f64, f64) {
    let (w_data, w_prior) = (se.powi(-2), prior_sd.powi(-2));
    if w_prior.is_infinite() {
        return (prior_mean, 0.0);
    }
    let prec = w_data + w_prior;
    ((w_data * y + w_prior * prior_mean) / prec, prec.recip().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptions {
    /// Simpson nodes per axis (odd).
    pub nodes: usize,
    /// Upper end of each scale axis in prior half-normal scales.
    pub box_sds: f64,
    /// Largest tolerated posterior mass in the outer eighth of any axis.
    pub max_boundary_mass: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            nodes: 401,
            box_sds: 8.0,
            max_boundary_mass: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridMoment {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPosterior {
    pub moments: Vec<GridMoment>,
    /// `(indicator name, P(c = 1))` for mixture models.
    pub p_c1: Vec<(String, f64)>,
    /// Log marginal likelihood of the data.
    pub log_z: f64,
    pub boundary_mass: f64,
    pub axes: Vec<String>,
}

impl GridPosterior {
    pub fn get(&self, name: &str) -> Option<&GridMoment> {
        self.moments.iter().find(|m| m.name == name)
    }

    pub fn p_c(&self, name: &str) -> Option<f64> {
        self.p_c1.iter().find(|(n, _)| n == name).map(|p| p.1)
    }
}

/// Location parameter kinds, each a prior-independent `N(0, v0)` except the
/// exchangeable ones, which are `m_d + tau_d * z`.
#[derive(Clone, Copy, PartialEq)]
enum Loc {
    Vague,
    Hyper,
    Exch,
}

struct Toy {
    y: DVector<f64>,
    se2: Vec<f64>,
    study_ind: Vec<usize>,
    n_ind: usize,
    labels: Vec<String>,
    locs: Vec<(String, Loc)>,
    /// Component index used by indication `j` when its indicator is 1 / 0.
    shared: Vec<usize>,
    alone: Vec<usize>,
    mixture: bool,
    within_axes: Option<Vec<usize>>,
    hyper_axis: Option<usize>,
    axes: Vec<(String, f64)>,
    prior_var: f64,
    hn_scale: f64,
    ln_pc: (f64, f64),
}

impl Toy {
    fn new(spec: &ModelSpec, e: &EvidenceSet, opts: &GridOptions) -> Result<Self> {
        use SharingStructure::*;
        if spec.endpoint_mode.is_bivariate() {
            return Err(Error::UnsupportedOracle("bivariate models".into()));
        }
        let model = Model::new(spec, e)?;
        let labels = &model.indications;
        let n_ind = labels.len();
        let named = |p: &str| labels.iter().map(|l| format!("{p}[{l}]")).collect::<Vec<_>>();
        let mut locs: Vec<(String, Loc)> = Vec::new();
        let (shared, alone): (Vec<usize>, Vec<usize>) = match spec.sharing {
            CP => {
                locs.push(("theta".into(), Loc::Vague));
                (vec![0; n_ind], vec![0; n_ind])
            }
            IP => {
                locs.extend(named("d").into_iter().map(|n| (n, Loc::Vague)));
                ((0..n_ind).collect(), (0..n_ind).collect())
            }
            MCIP => {
                locs.push(("theta".into(), Loc::Vague));
                locs.extend(named("d").into_iter().map(|n| (n, Loc::Vague)));
                (vec![0; n_ind], (1..=n_ind).collect())
            }
            RP | MRIP => {
                locs.push(("m_d".into(), Loc::Hyper));
                locs.extend(named("d").into_iter().map(|n| (n, Loc::Exch)));
                let exch: Vec<usize> = (1..=n_ind).collect();
                if spec.sharing == MRIP {
                    locs.extend(named("d_ind").into_iter().map(|n| (n, Loc::Vague)));
                    (exch, (n_ind + 1..=2 * n_ind).collect())
                } else {
                    (exch.clone(), exch)
                }
            }
        };
        let hn_scale = spec.priors.tau_halfnormal_scale;
        let upper = opts.box_sds * hn_scale;
        let mut axes = Vec::new();
        let within_axes = (!spec.common_effect_within_indication).then(|| {
            named("tau")
                .into_iter()
                .map(|n| {
                    axes.push((n, upper));
                    axes.len() - 1
                })
                .collect()
        });
        let hyper_axis = matches!(spec.sharing, RP | MRIP).then(|| {
            axes.push(("tau_d".into(), upper));
            axes.len() - 1
        });
        if axes.len() > 3 {
            return Err(Error::UnsupportedOracle(format!(
                "{} scale parameters remain after marginalization (at most 3)",
                axes.len()
            )));
        }
        let mixture = spec.sharing.is_mixture();
        if mixture && n_ind > 12 {
            return Err(Error::UnsupportedOracle(format!(
                "{n_ind} mixture indicators (at most 12)"
            )));
        }
        let (a, b) = spec.priors.mixture_beta;
        Ok(Self {
            y: DVector::from_iterator(model.studies.len(), model.studies.iter().map(|s| s.y)),
            se2: model.studies.iter().map(|s| s.se * s.se).collect(),
            study_ind: model.studies.iter().map(|s| s.indication).collect(),
            n_ind,
            labels: labels.clone(),
            locs,
            shared,
            alone,
            mixture,
            within_axes,
            hyper_axis,
            axes,
            prior_var: spec.priors.effect_normal_sd.powi(2),
            hn_scale,
            ln_pc: ((a / (a + b)).ln(), (b / (a + b)).ln()),
        })
    }

    fn half_normal_ln(&self, x: f64) -> f64 {
        let s = self.hn_scale;
        (2.0 / std::f64::consts::PI).sqrt().ln() - s.ln() - 0.5 * (x / s).powi(2)
    }

    /// Log marginal density of the data and posterior moments of the
    /// location vector at scale values `s` and indicator configuration
    /// `bits` (bit `j` set means `c_j = 1`).
    fn conditional(&self, s: &[f64], bits: u32) -> Option<(f64, DVector<f64>, DVector<f64>)> {
        let g = self.locs.len();
        let n = self.y.len();
        let tau_d2 = self.hyper_axis.map_or(0.0, |k| s[k] * s[k]);
        let mut s0 = DMatrix::<f64>::zeros(g, g);
        for (a, (_, ka)) in self.locs.iter().enumerate() {
            for (b, (_, kb)) in self.locs.iter().enumerate() {
                s0[(a, b)] = match (ka, kb) {
                    (Loc::Vague, Loc::Vague) if a == b => self.prior_var,
                    (Loc::Hyper | Loc::Exch, Loc::Hyper | Loc::Exch) => {
                        self.prior_var + if a == b && *ka == Loc::Exch { tau_d2 } else { 0.0 }
                    }
                    _ => 0.0,
                };
            }
        }
        let mut h = DMatrix::<f64>::zeros(n, g);
        let mut r = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let j = self.study_ind[i];
            h[(i, self.component(j, bits))] = 1.0;
            let tau2 = self.within_axes.as_ref().map_or(0.0, |ax| s[ax[j]] * s[ax[j]]);
            r[(i, i)] = self.se2[i] + tau2;
        }
        let s0_ht = &s0 * h.transpose();
        let cov_y = &h * &s0_ht + r;
        let chol = cov_y.cholesky()?;
        let alpha = chol.solve(&self.y);
        let ln_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let ln_lik = -0.5 * (self.y.dot(&alpha) + ln_det + n as f64 * (2.0 * std::f64::consts::PI).ln());
        let mean = &s0_ht * alpha;
        let gain = chol.solve(&s0_ht.transpose());
        let cov = &s0 - &s0_ht * gain;
        Some((ln_lik, mean, cov.diagonal()))
    }

    fn component(&self, j: usize, bits: u32) -> usize {
        if !self.mixture || bits >> j & 1 == 1 {
            self.shared[j]
        } else {
            self.alone[j]
        }
    }
}

fn simpson_weights(n: usize, upper: f64) -> Vec<f64> {
    let h = upper / (n - 1) as f64;
    (0..n)
        .map(|k| {
            h / 3.0
                * if k == 0 || k == n - 1 {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                }
        })
        .collect()
}

/// Weighted sums kept relative to a running log-scale maximum.
#[derive(Clone)]
struct Acc {
    max: f64,
    w: f64,
    boundary: f64,
    axis: Vec<[f64; 2]>,
    loc: Vec<[f64; 2]>,
    effect: Vec<[f64; 2]>,
    c1: Vec<f64>,
}

impl Acc {
    fn new(n_axes: usize, n_loc: usize, n_ind: usize) -> Self {
        Self {
            max: f64::NEG_INFINITY,
            w: 0.0,
            boundary: 0.0,
            axis: vec![[0.0; 2]; n_axes],
            loc: vec![[0.0; 2]; n_loc],
            effect: vec![[0.0; 2]; n_ind],
            c1: vec![0.0; n_ind],
        }
    }

    fn rescale(&mut self, new_max: f64) {
        if new_max > self.max {
            let f = if self.max.is_finite() {
                (self.max - new_max).exp()
            } else {
                0.0
            };
            self.w *= f;
            self.boundary *= f;
            for v in self.axis.iter_mut().chain(&mut self.loc).chain(&mut self.effect) {
                v[0] *= f;
                v[1] *= f;
            }
            for v in &mut self.c1 {
                *v *= f;
            }
            self.max = new_max;
        }
    }

    fn merge(mut self, mut other: Self) -> Self {
        let m = self.max.max(other.max);
        if !m.is_finite() {
            return self;
        }
        self.rescale(m);
        other.rescale(m);
        self.w += other.w;
        self.boundary += other.boundary;
        for (a, b) in self
            .axis
            .iter_mut()
            .chain(&mut self.loc)
            .chain(&mut self.effect)
            .zip(other.axis.iter().chain(&other.loc).chain(&other.effect))
        {
            a[0] += b[0];
            a[1] += b[1];
        }
        for (a, b) in self.c1.iter_mut().zip(&other.c1) {
            *a += b;
        }
        self
    }
}

fn moments(sum: [f64; 2], w: f64) -> (f64, f64) {
    let mean = sum[0] / w;
    (mean, (sum[1] / w - mean * mean).max(0.0).sqrt())
}

/// Quadrature posterior of a univariate model whose scale parameters number
/// at most three. Returns moments of every location and scale parameter,
/// of the indication-level effects (`effect[L]`), and `P(c_j = 1)` for
/// mixture models.
pub fn grid_posterior(spec: &ModelSpec, e: &EvidenceSet, opts: &GridOptions) -> Result<GridPosterior> {
    if opts.nodes < 5 || opts.nodes % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "quadrature needs an odd node count >= 5, got {}",
            opts.nodes
        )));
    }
    let toy = Toy::new(spec, e, opts)?;
    let n_axes = toy.axes.len();
    let nodes = if n_axes == 0 { 1 } else { opts.nodes };
    let grids: Vec<(Vec<f64>, Vec<f64>)> = toy
        .axes
        .iter()
        .map(|(_, upper)| {
            let x = (0..nodes).map(|k| upper * k as f64 / (nodes - 1) as f64).collect();
            (x, simpson_weights(nodes, *upper))
        })
        .collect();
    let n_points = nodes.pow(n_axes as u32);
    let n_configs: u32 = if toy.mixture { 1 << toy.n_ind } else { 1 };
    let effect_mix = |bits: u32| -> Vec<usize> { (0..toy.n_ind).map(|j| toy.component(j, bits)).collect() };

    let acc = (0..n_points)
        .into_par_iter()
        .fold(
            || Acc::new(n_axes, toy.locs.len(), toy.n_ind),
            |mut acc, p| {
                let mut s = vec![0.0; n_axes];
                let mut ln_w = 0.0;
                let mut rest = p;
                let mut outer = false;
                for (k, (x, w)) in grids.iter().enumerate() {
                    let idx = rest % nodes;
                    rest /= nodes;
                    s[k] = x[idx];
                    if w[idx] == 0.0 {
                        return acc;
                    }
                    ln_w += w[idx].ln() + toy.half_normal_ln(s[k]);
                    outer |= 8 * idx > 7 * (nodes - 1);
                }
                for bits in 0..n_configs {
                    let Some((ln_lik, mean, var)) = toy.conditional(&s, bits) else {
                        continue;
                    };
                    let mut ln_pc = 0.0;
                    if toy.mixture {
                        for j in 0..toy.n_ind {
                            ln_pc += if bits >> j & 1 == 1 { toy.ln_pc.0 } else { toy.ln_pc.1 };
                        }
                    }
                    let lp = ln_w + ln_lik + ln_pc;
                    if !lp.is_finite() {
                        continue;
                    }
                    acc.rescale(lp);
                    let w = (lp - acc.max).exp();
                    acc.w += w;
                    if outer {
                        acc.boundary += w;
                    }
                    for (k, a) in acc.axis.iter_mut().enumerate() {
                        a[0] += w * s[k];
                        a[1] += w * s[k] * s[k];
                    }
                    for (g, a) in acc.loc.iter_mut().enumerate() {
                        a[0] += w * mean[g];
                        a[1] += w * (var[g] + mean[g] * mean[g]);
                    }
                    for (j, &g) in effect_mix(bits).iter().enumerate() {
                        let a = &mut acc.effect[j];
                        a[0] += w * mean[g];
                        a[1] += w * (var[g] + mean[g] * mean[g]);
                        if bits >> j & 1 == 1 {
                            acc.c1[j] += w;
                        }
                    }
                }
                acc
            },
        )
        .reduce(|| Acc::new(n_axes, toy.locs.len(), toy.n_ind), Acc::merge);

    if !(acc.w > 0.0) {
        return Err(Error::UnsupportedOracle("posterior has no mass on the grid".into()));
    }
    let boundary_mass = acc.boundary / acc.w;
    if boundary_mass > opts.max_boundary_mass {
        return Err(Error::QuadratureBox { mass: boundary_mass });
    }
    let labels = &toy.labels;
    let mut out = Vec::new();
    for ((name, _), sum) in toy.locs.iter().zip(&acc.loc) {
        let (mean, sd) = moments(*sum, acc.w);
        out.push(GridMoment {
            name: name.clone(),
            mean,
            sd,
        });
    }
    for ((name, _), sum) in toy.axes.iter().zip(&acc.axis) {
        let (mean, sd) = moments(*sum, acc.w);
        out.push(GridMoment {
            name: name.clone(),
            mean,
            sd,
        });
    }
    for (l, sum) in labels.iter().zip(&acc.effect) {
        let (mean, sd) = moments(*sum, acc.w);
        out.push(GridMoment {
            name: format!("effect[{l}]"),
            mean,
            sd,
        });
    }
    let p_c1 = if toy.mixture {
        labels
            .iter()
            .zip(&acc.c1)
            .map(|(l, c)| (format!("c[{l}]"), c / acc.w))
            .collect()
    } else {
        Vec::new()
    };
    Ok(GridPosterior {
        moments: out,
        p_c1,
        log_z: acc.max + acc.w.ln(),
        boundary_mass,
        axes: toy.axes.into_iter().map(|a| a.0).collect(),
    })
}
