//! Model family: endpoint mode, between-indication sharing structure, prior
//! settings and the parameter layout of a concrete model instance.
//!
//! Every indication-level quantity (the pooled effect in univariate mode;
//! intercept, slope and conditional sd in bivariate mode) is a [`Family`].
//! A family instantiates up to two components per indication, a shared one
//! (common parameter or exchangeable draw) and an independent one, and reads
//! the *active* component through the mixture indicator when there is one.
//! Inactive components stay in the state and are updated from their priors.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::dist;
use crate::error::{Error, Result};
use crate::evidence::EvidenceSet;

/// Between-indication sharing structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SharingStructure {
    /// Independent parameters.
    IP,
    /// Common parameter.
    CP,
    /// Mixture of common and independent parameters.
    MCIP,
    /// Random (exchangeable) parameters.
    RP,
    /// Mixture of random and independent parameters.
    MRIP,
}

impl SharingStructure {
    pub const ALL: [SharingStructure; 5] = [Self::IP, Self::CP, Self::MCIP, Self::RP, Self::MRIP];

    pub fn is_mixture(self) -> bool {
        matches!(self, Self::MCIP | Self::MRIP)
    }

    pub fn has_common(self) -> bool {
        matches!(self, Self::CP | Self::MCIP)
    }

    pub fn has_exchangeable(self) -> bool {
        matches!(self, Self::RP | Self::MRIP)
    }

    pub fn has_independent(self) -> bool {
        matches!(self, Self::IP | Self::MCIP | Self::MRIP)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::IP => "IP",
            Self::CP => "CP",
            Self::MCIP => "MCIP",
            Self::RP => "RP",
            Self::MRIP => "MRIP",
        }
    }
}

impl fmt::Display for SharingStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SharingStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "IP" => Ok(Self::IP),
            "CP" => Ok(Self::CP),
            "MCIP" => Ok(Self::MCIP),
            "RP" => Ok(Self::RP),
            "MRIP" => Ok(Self::MRIP),
            other => Err(Error::InvalidSpec(format!("unknown sharing structure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum EndpointMode {
    UnivariatePfs,
    UnivariateOs,
    BivariateSurrogacy,
}

impl EndpointMode {
    pub fn is_bivariate(self) -> bool {
        self == Self::BivariateSurrogacy
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::UnivariatePfs => "univariate-pfs",
            Self::UnivariateOs => "univariate-os",
            Self::BivariateSurrogacy => "bivariate",
        }
    }
}

impl fmt::Display for EndpointMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EndpointMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "univariate-pfs" | "pfs" => Ok(Self::UnivariatePfs),
            "univariate-os" | "os" => Ok(Self::UnivariateOs),
            "bivariate" | "bivariate-surrogacy" | "surrogacy" => Ok(Self::BivariateSurrogacy),
            other => Err(Error::InvalidSpec(format!("unknown endpoint mode `{other}`"))),
        }
    }
}

/// Hyperparameters of the prior families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriorSettings {
    /// Half-normal scale of within-indication and between-indication sds.
    pub tau_halfnormal_scale: f64,
    /// Sd of vague normal priors on effects, intercepts and slopes.
    pub effect_normal_sd: f64,
    pub psi_halfnormal_scale: f64,
    pub xi_halfnormal_scale: f64,
    pub h_gamma_shape: f64,
    pub h_gamma_rate: f64,
    pub mixture_beta: (f64, f64),
    pub rho_uniform_bounds: (f64, f64),
}

impl Default for PriorSettings {
    fn default() -> Self {
        default_priors()
    }
}

pub fn default_priors() -> PriorSettings {
    PriorSettings {
        tau_halfnormal_scale: 0.5,
        effect_normal_sd: 10.0,
        psi_halfnormal_scale: 0.5,
        xi_halfnormal_scale: 0.5,
        h_gamma_shape: 1.0,
        h_gamma_rate: 0.01,
        mixture_beta: (1.0, 1.0),
        rho_uniform_bounds: (-1.0, 1.0),
    }
}

impl PriorSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau_halfnormal_scale", self.tau_halfnormal_scale),
            ("effect_normal_sd", self.effect_normal_sd),
            ("psi_halfnormal_scale", self.psi_halfnormal_scale),
            ("xi_halfnormal_scale", self.xi_halfnormal_scale),
            ("h_gamma_shape", self.h_gamma_shape),
            ("h_gamma_rate", self.h_gamma_rate),
            ("mixture_beta.a", self.mixture_beta.0),
            ("mixture_beta.b", self.mixture_beta.1),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        let (lo, hi) = self.rho_uniform_bounds;
        if !(-1.0..=1.0).contains(&lo) || !(-1.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::InvalidSpec(format!(
                "rho_uniform_bounds must satisfy -1 <= lo < hi <= 1, got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelSpec {
    pub endpoint_mode: EndpointMode,
    pub sharing: SharingStructure,
    /// Structure for the conditional sd in bivariate mode; `None` inherits
    /// `sharing`.
    pub sharing_psi: Option<SharingStructure>,
    pub priors: PriorSettings,
    /// Fixes the within-indication between-study sd at zero.
    pub common_effect_within_indication: bool,
    /// One indicator per indication shared by all mixture surrogacy families.
    pub tie_mixture_probabilities: bool,
    /// Weight of the sharing component for a new indication.
    pub p_new: f64,
}

impl ModelSpec {
    pub fn new(endpoint_mode: EndpointMode, sharing: SharingStructure) -> Self {
        Self {
            endpoint_mode,
            sharing,
            sharing_psi: None,
            priors: default_priors(),
            common_effect_within_indication: false,
            tie_mixture_probabilities: false,
            p_new: 1.0,
        }
    }

    pub fn psi_sharing(&self) -> SharingStructure {
        self.sharing_psi.unwrap_or(self.sharing)
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        let bivariate = self.endpoint_mode.is_bivariate();
        if self.sharing_psi.is_some() && !bivariate {
            return Err(Error::InvalidSpec("sharing_psi applies to bivariate mode only".into()));
        }
        if self.tie_mixture_probabilities && !(bivariate && self.sharing.is_mixture()) {
            return Err(Error::InvalidSpec(
                "tie_mixture_probabilities requires bivariate mode with MCIP or MRIP".into(),
            ));
        }
        if self.common_effect_within_indication && bivariate {
            return Err(Error::InvalidSpec(
                "common_effect_within_indication applies to univariate mode only".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_new) {
            return Err(Error::InvalidSpec(format!(
                "p_new must lie in [0, 1], got {}",
                self.p_new
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Support {
    Real,
    Positive,
    UnitInterval,
    /// Open interval inside (-1, 1).
    Correlation,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UpdateKind {
    ConjugateNormal,
    ConjugateBernoulli,
    ConjugateBeta,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    pub name: String,
    pub dim: usize,
    pub support: Support,
    pub update: UpdateKind,
    /// Offset of the first scalar in the flat value vector.
    pub offset: usize,
    /// One label per scalar (study id, indication label, or empty).
    pub labels: Vec<String>,
    /// Entries that carry no likelihood term (missing OS).
    pub latent: Vec<bool>,
    pub study_level: bool,
}

impl Block {
    pub fn scalar_name(&self, k: usize) -> String {
        if self.dim == 1 && self.labels[0].is_empty() {
            self.name.clone()
        } else {
            format!("{}[{}]", self.name, self.labels[k])
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.dim
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ParameterLayout {
    pub blocks: Vec<Block>,
    pub len: usize,
}

impl ParameterLayout {
    fn push(
        &mut self,
        name: &str,
        labels: Vec<String>,
        support: Support,
        update: UpdateKind,
        study_level: bool,
    ) -> usize {
        let dim = labels.len();
        let offset = self.len;
        self.blocks.push(Block {
            name: name.to_string(),
            dim,
            support,
            update,
            offset,
            labels,
            latent: vec![false; dim],
            study_level,
        });
        self.len += dim;
        offset
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// `(name, dim)` pairs in layout order.
    pub fn shape(&self) -> Vec<(&str, usize)> {
        self.blocks.iter().map(|b| (b.name.as_str(), b.dim)).collect()
    }

    /// Name of every scalar in layout order.
    pub fn scalar_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| (0..b.dim).map(move |k| b.scalar_name(k)))
            .collect()
    }
}

/// One full assignment of parameter values, indexed by [`ParameterLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterValues(pub Vec<f64>);

impl ParameterValues {
    pub fn zeros(layout: &ParameterLayout) -> Self {
        Self(vec![0.0; layout.len])
    }

    pub fn block<'a>(&'a self, block: &Block) -> &'a [f64] {
        &self.0[block.range()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FamilyKind {
    /// Normal priors: effects, intercepts, slopes.
    Location,
    /// Half-normal priors: conditional sds.
    Scale,
}

/// Offsets of the blocks implementing one indication-level quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Family {
    pub name: &'static str,
    pub kind: FamilyKind,
    pub sharing: SharingStructure,
    pub common: Option<usize>,
    pub indep: Option<usize>,
    pub exch: Option<usize>,
    pub hyper_mean: Option<usize>,
    /// Sd of the exchangeable distribution (location) or its variance `h`
    /// (scale).
    pub hyper_scale: Option<usize>,
    pub indicator: Option<usize>,
    pub prob: Option<usize>,
}

impl Family {
    /// Offset of the component read by the likelihood for indication `j`.
    #[inline]
    pub fn active(&self, v: &[f64], j: usize) -> usize {
        match self.sharing {
            SharingStructure::IP => self.indep.unwrap() + j,
            SharingStructure::CP => self.common.unwrap(),
            SharingStructure::RP => self.exch.unwrap() + j,
            SharingStructure::MCIP => {
                if v[self.indicator.unwrap() + j] == 1.0 {
                    self.common.unwrap()
                } else {
                    self.indep.unwrap() + j
                }
            }
            SharingStructure::MRIP => {
                if v[self.indicator.unwrap() + j] == 1.0 {
                    self.exch.unwrap() + j
                } else {
                    self.indep.unwrap() + j
                }
            }
        }
    }

    #[inline]
    pub fn value(&self, v: &[f64], j: usize) -> f64 {
        v[self.active(v, j)]
    }

    /// Offset of the sharing component for indication `j` (mixtures only).
    pub fn sharing_component(&self, j: usize) -> usize {
        match self.sharing {
            SharingStructure::MCIP => self.common.unwrap(),
            SharingStructure::MRIP => self.exch.unwrap() + j,
            _ => unreachable!("sharing component of a non-mixture family"),
        }
    }
}

/// A study entering the fit. In univariate mode `y`/`se` hold the endpoint
/// being synthesised and `os` is unused.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Study {
    pub id: String,
    pub indication: usize,
    pub y: f64,
    pub se: f64,
    pub os: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnivariateRoles {
    pub delta: Option<usize>,
    pub tau: Option<usize>,
    pub effect: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BivariateRoles {
    pub delta1: usize,
    pub delta2: usize,
    pub rho: usize,
    pub intercept: Family,
    pub slope: Family,
    pub cond_sd: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Roles {
    Univariate(UnivariateRoles),
    Bivariate(BivariateRoles),
}

/// A model instance: spec bound to the studies it fits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub indications: Vec<String>,
    pub studies: Vec<Study>,
    /// Study indices per indication.
    pub by_indication: Vec<Vec<usize>>,
    pub layout: ParameterLayout,
    pub roles: Roles,
}

struct FamilyNames {
    family: &'static str,
    shared: &'static str,
    common: &'static str,
    other_indep: &'static str,
    hyper_mean: &'static str,
    hyper_scale: &'static str,
    indicator: &'static str,
    prob: &'static str,
}

const EFFECT_NAMES: FamilyNames = FamilyNames {
    family: "effect",
    shared: "d",
    common: "theta",
    other_indep: "d_ind",
    hyper_mean: "m_d",
    hyper_scale: "tau_d",
    indicator: "c",
    prob: "p",
};

const INTERCEPT_NAMES: FamilyNames = FamilyNames {
    family: "intercept",
    shared: "lambda0",
    common: "lambda0_common",
    other_indep: "lambda0_ind",
    hyper_mean: "beta0",
    hyper_scale: "xi0",
    indicator: "c_lambda0",
    prob: "p_lambda0",
};

const SLOPE_NAMES: FamilyNames = FamilyNames {
    family: "slope",
    shared: "lambda1",
    common: "lambda1_common",
    other_indep: "lambda1_ind",
    hyper_mean: "beta1",
    hyper_scale: "xi1",
    indicator: "c_lambda1",
    prob: "p_lambda1",
};

const COND_SD_NAMES: FamilyNames = FamilyNames {
    family: "cond_sd",
    shared: "psi",
    common: "psi_common",
    other_indep: "psi_ind",
    hyper_mean: "",
    hyper_scale: "h",
    indicator: "c_psi",
    prob: "p_psi",
};

fn push_family(
    layout: &mut ParameterLayout,
    names: &FamilyNames,
    kind: FamilyKind,
    sharing: SharingStructure,
    labels: &[String],
    tied: Option<(usize, usize)>,
) -> Family {
    use SharingStructure::*;
    let labels = labels.to_vec();
    let (support, update) = match kind {
        FamilyKind::Location => (Support::Real, UpdateKind::ConjugateNormal),
        FamilyKind::Scale => (Support::Positive, UpdateKind::RandomWalk),
    };
    let mut f = Family {
        name: names.family,
        kind,
        sharing,
        common: None,
        indep: None,
        exch: None,
        hyper_mean: None,
        hyper_scale: None,
        indicator: None,
        prob: None,
    };
    match sharing {
        IP => f.indep = Some(layout.push(names.shared, labels.clone(), support, update, false)),
        CP => f.common = Some(layout.push(names.common, vec![String::new()], support, update, false)),
        MCIP => {
            f.common = Some(layout.push(names.common, vec![String::new()], support, update, false));
            f.indep = Some(layout.push(names.shared, labels.clone(), support, update, false));
        }
        RP | MRIP => {
            f.exch = Some(layout.push(names.shared, labels.clone(), support, update, false));
            if sharing == MRIP {
                f.indep = Some(layout.push(names.other_indep, labels.clone(), support, update, false));
            }
            if kind == FamilyKind::Location {
                f.hyper_mean = Some(layout.push(
                    names.hyper_mean,
                    vec![String::new()],
                    Support::Real,
                    UpdateKind::ConjugateNormal,
                    false,
                ));
            }
            f.hyper_scale = Some(layout.push(
                names.hyper_scale,
                vec![String::new()],
                Support::Positive,
                UpdateKind::RandomWalk,
                false,
            ));
        }
    }
    if sharing.is_mixture() {
        let (c, p) = match tied {
            Some(pair) => pair,
            None => (
                layout.push(
                    names.indicator,
                    labels.clone(),
                    Support::Binary,
                    UpdateKind::ConjugateBernoulli,
                    false,
                ),
                layout.push(
                    names.prob,
                    labels,
                    Support::UnitInterval,
                    UpdateKind::ConjugateBeta,
                    false,
                ),
            ),
        };
        f.indicator = Some(c);
        f.prob = Some(p);
    }
    f
}

impl Model {
    /// Binds `spec` to the evidence it applies to and enumerates its
    /// parameter blocks.
    ///
    /// Studies lacking the synthesised endpoint are left out (OS-only records
    /// in bivariate mode, PFS-only records in univariate OS mode), as are
    /// indications left without studies.
    pub fn new(spec: &ModelSpec, evidence: &EvidenceSet) -> Result<Self> {
        spec.validate()?;
        let mut indications: Vec<String> = Vec::new();
        let mut studies = Vec::new();
        for rec in evidence.records() {
            let (primary, os) = match spec.endpoint_mode {
                EndpointMode::UnivariatePfs => (rec.pfs, None),
                EndpointMode::UnivariateOs => (rec.os, None),
                EndpointMode::BivariateSurrogacy => (rec.pfs, rec.os),
            };
            let Some(primary) = primary else { continue };
            let j = match indications.iter().position(|l| *l == rec.indication) {
                Some(j) => j,
                None => {
                    indications.push(rec.indication.clone());
                    indications.len() - 1
                }
            };
            studies.push(Study {
                id: rec.study_id.clone(),
                indication: j,
                y: primary.lhr,
                se: primary.se,
                os: os.map(|e| (e.lhr, e.se)),
            });
        }
        if studies.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "no studies report the endpoint required by {} mode",
                spec.endpoint_mode
            )));
        }
        if spec.endpoint_mode.is_bivariate() && !studies.iter().any(|s| s.os.is_some()) {
            return Err(Error::InvalidSpec(
                "bivariate mode needs at least one study reporting both endpoints".into(),
            ));
        }
        let mut by_indication = vec![Vec::new(); indications.len()];
        for (i, s) in studies.iter().enumerate() {
            by_indication[s.indication].push(i);
        }

        let study_labels: Vec<String> = studies.iter().map(|s| s.id.clone()).collect();
        let mut layout = ParameterLayout::default();
        let roles = if spec.endpoint_mode.is_bivariate() {
            let delta1 = layout.push(
                "delta1",
                study_labels.clone(),
                Support::Real,
                UpdateKind::ConjugateNormal,
                true,
            );
            let delta2 = layout.push(
                "delta2",
                study_labels.clone(),
                Support::Real,
                UpdateKind::ConjugateNormal,
                true,
            );
            let latent: Vec<bool> = studies.iter().map(|s| s.os.is_none()).collect();
            layout.blocks.last_mut().unwrap().latent = latent;
            let rho = layout.push(
                "rho_w",
                study_labels,
                Support::Correlation,
                UpdateKind::RandomWalk,
                true,
            );
            let tied = if spec.tie_mixture_probabilities {
                Some((
                    layout.push(
                        "c_surrogacy",
                        indications.clone(),
                        Support::Binary,
                        UpdateKind::ConjugateBernoulli,
                        false,
                    ),
                    layout.push(
                        "p_surrogacy",
                        indications.clone(),
                        Support::UnitInterval,
                        UpdateKind::ConjugateBeta,
                        false,
                    ),
                ))
            } else {
                None
            };
            let psi_sharing = spec.psi_sharing();
            let intercept = push_family(
                &mut layout,
                &INTERCEPT_NAMES,
                FamilyKind::Location,
                spec.sharing,
                &indications,
                tied,
            );
            let slope = push_family(
                &mut layout,
                &SLOPE_NAMES,
                FamilyKind::Location,
                spec.sharing,
                &indications,
                tied,
            );
            let cond_sd = push_family(
                &mut layout,
                &COND_SD_NAMES,
                FamilyKind::Scale,
                psi_sharing,
                &indications,
                tied.filter(|_| psi_sharing.is_mixture()),
            );
            Roles::Bivariate(BivariateRoles {
                delta1,
                delta2,
                rho,
                intercept,
                slope,
                cond_sd,
            })
        } else {
            let (delta, tau) = if spec.common_effect_within_indication {
                (None, None)
            } else {
                (
                    Some(layout.push("delta", study_labels, Support::Real, UpdateKind::ConjugateNormal, true)),
                    Some(layout.push(
                        "tau",
                        indications.clone(),
                        Support::Positive,
                        UpdateKind::RandomWalk,
                        false,
                    )),
                )
            };
            let effect = push_family(
                &mut layout,
                &EFFECT_NAMES,
                FamilyKind::Location,
                spec.sharing,
                &indications,
                None,
            );
            Roles::Univariate(UnivariateRoles { delta, tau, effect })
        };

        Ok(Self {
            spec: *spec,
            indications,
            studies,
            by_indication,
            layout,
            roles,
        })
    }

    pub fn n_indications(&self) -> usize {
        self.indications.len()
    }

    pub fn families(&self) -> Vec<&Family> {
        match &self.roles {
            Roles::Univariate(u) => vec![&u.effect],
            Roles::Bivariate(b) => vec![&b.intercept, &b.slope, &b.cond_sd],
        }
    }

    /// Sum of log prior densities of the top-level blocks: those whose prior
    /// does not depend on other parameters. Hierarchical terms belong to
    /// [`crate::likelihood::density_terms`].
    pub fn log_prior(&self, v: &ParameterValues) -> Result<f64> {
        self.check_dim(v)?;
        let v = &v.0;
        let pr = &self.spec.priors;
        for b in &self.layout.blocks {
            for &x in &v[b.range()] {
                let ok = match b.support {
                    Support::Real => x.is_finite(),
                    Support::Positive => x > 0.0 && x.is_finite(),
                    Support::UnitInterval => x > 0.0 && x < 1.0,
                    Support::Correlation => x > -1.0 && x < 1.0,
                    Support::Binary => x == 0.0 || x == 1.0,
                };
                if !ok {
                    return Ok(f64::NEG_INFINITY);
                }
            }
        }
        let mut lp = 0.0;
        let block_sum =
            |off: usize, dim: usize, f: &dyn Fn(f64) -> f64| -> f64 { v[off..off + dim].iter().map(|&x| f(x)).sum() };
        let j = self.n_indications();
        let n = self.studies.len();
        match &self.roles {
            Roles::Univariate(u) => {
                if let Some(tau) = u.tau {
                    lp += block_sum(tau, j, &|x| dist::half_normal_ln(x, pr.tau_halfnormal_scale));
                }
                lp += self.family_prior(&u.effect, v, pr.tau_halfnormal_scale);
            }
            Roles::Bivariate(b) => {
                lp += block_sum(b.delta1, n, &|x| dist::normal_ln(x, 0.0, pr.effect_normal_sd));
                let (lo, hi) = pr.rho_uniform_bounds;
                lp += block_sum(b.rho, n, &|x| dist::uniform_ln(x, lo, hi));
                lp += self.family_prior(&b.intercept, v, pr.xi_halfnormal_scale);
                lp += self.family_prior(&b.slope, v, pr.xi_halfnormal_scale);
                lp += self.family_prior(&b.cond_sd, v, pr.xi_halfnormal_scale);
                if self.spec.tie_mixture_probabilities {
                    // Tied indicator/probability blocks are shared by several
                    // families; count the Beta prior once.
                    let fams = [&b.intercept, &b.slope, &b.cond_sd];
                    let sharing_tied = fams.iter().filter(|f| f.prob.is_some()).count();
                    if sharing_tied > 1 {
                        let p = fams.iter().find_map(|f| f.prob).unwrap();
                        let once = block_sum(p, j, &|x| dist::beta_ln(x, pr.mixture_beta.0, pr.mixture_beta.1));
                        lp -= (sharing_tied - 1) as f64 * once;
                    }
                }
            }
        }
        Ok(lp)
    }

    fn family_prior(&self, f: &Family, v: &[f64], hyper_sd_scale: f64) -> f64 {
        let pr = &self.spec.priors;
        let j = self.n_indications();
        let component = |x: f64| match f.kind {
            FamilyKind::Location => dist::normal_ln(x, 0.0, pr.effect_normal_sd),
            FamilyKind::Scale => dist::half_normal_ln(x, pr.psi_halfnormal_scale),
        };
        let mut lp = 0.0;
        if let Some(c) = f.common {
            lp += component(v[c]);
        }
        if let Some(ind) = f.indep {
            lp += v[ind..ind + j].iter().map(|&x| component(x)).sum::<f64>();
        }
        if let Some(m) = f.hyper_mean {
            lp += dist::normal_ln(v[m], 0.0, pr.effect_normal_sd);
        }
        if let Some(s) = f.hyper_scale {
            lp += match f.kind {
                FamilyKind::Location => dist::half_normal_ln(v[s], hyper_sd_scale),
                FamilyKind::Scale => dist::gamma_ln(v[s], pr.h_gamma_shape, pr.h_gamma_rate),
            };
        }
        if let Some(p) = f.prob {
            lp += v[p..p + j]
                .iter()
                .map(|&x| dist::beta_ln(x, pr.mixture_beta.0, pr.mixture_beta.1))
                .sum::<f64>();
        }
        lp
    }

    pub(crate) fn check_dim(&self, v: &ParameterValues) -> Result<()> {
        if v.0.len() != self.layout.len {
            return Err(Error::Dimension {
                block: "parameters".into(),
                expected: self.layout.len,
                got: v.0.len(),
            });
        }
        Ok(())
    }

    /// Indicator blocks (offset, name) without duplicates.
    pub fn indicator_blocks(&self) -> Vec<&Block> {
        self.layout
            .blocks
            .iter()
            .filter(|b| b.support == Support::Binary)
            .collect()
    }
}

/// Enumerates the parameter blocks implied by `spec` on `evidence`.
pub fn build_layout(spec: &ModelSpec, evidence: &EvidenceSet) -> Result<ParameterLayout> {
    Model::new(spec, evidence).map(|m| m.layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::parse_evidence_str;

    const HEADER: &str = "study_id,indication,lhr_pfs,se_pfs,pfs_report_date,lhr_os,se_os,os_report_date\n";

    fn two_by_two() -> EvidenceSet {
        parse_evidence_str(&format!(
            "{HEADER}A1,A,-0.3,0.1,,-0.2,0.1,\nA2,A,-0.4,0.1,,-0.3,0.1,\nB1,B,-0.1,0.2,,-0.1,0.2,\nB2,B,-0.2,0.2,,-0.2,0.2,\n"
        ))
        .unwrap()
    }

    fn three_indications() -> EvidenceSet {
        parse_evidence_str(&format!(
            "{HEADER}A1,A,-0.3,0.1,,-0.2,0.1,\nB1,B,-0.1,0.2,,-0.1,0.2,\nC1,C,-0.2,0.2,,,,\n"
        ))
        .unwrap()
    }

    #[test]
    fn defaults() {
        let p = default_priors();
        assert_eq!(p.tau_halfnormal_scale, 0.5);
        assert_eq!(p.effect_normal_sd, 10.0);
        assert_eq!((p.h_gamma_shape, p.h_gamma_rate), (1.0, 0.01));
        assert_eq!(p.mixture_beta, (1.0, 1.0));
        assert_eq!(p.rho_uniform_bounds, (-1.0, 1.0));
    }

    #[test]
    fn univariate_ip_and_cp_layouts() {
        let e = two_by_two();
        let ip = build_layout(&ModelSpec::new(EndpointMode::UnivariateOs, SharingStructure::IP), &e).unwrap();
        assert_eq!(ip.shape(), [("delta", 4), ("tau", 2), ("d", 2)]);
        let cp = build_layout(&ModelSpec::new(EndpointMode::UnivariateOs, SharingStructure::CP), &e).unwrap();
        assert_eq!(cp.shape(), [("delta", 4), ("tau", 2), ("theta", 1)]);
        let rp = build_layout(&ModelSpec::new(EndpointMode::UnivariateOs, SharingStructure::RP), &e).unwrap();
        assert_eq!(
            rp.shape(),
            [("delta", 4), ("tau", 2), ("d", 2), ("m_d", 1), ("tau_d", 1)]
        );
        assert_eq!(rp.block("tau_d").unwrap().support, Support::Positive);
    }

    #[test]
    fn mixture_layouts() {
        let e = two_by_two();
        let mcip = build_layout(&ModelSpec::new(EndpointMode::UnivariatePfs, SharingStructure::MCIP), &e).unwrap();
        assert_eq!(
            mcip.shape(),
            [("delta", 4), ("tau", 2), ("theta", 1), ("d", 2), ("c", 2), ("p", 2)]
        );
        let mrip = build_layout(&ModelSpec::new(EndpointMode::UnivariatePfs, SharingStructure::MRIP), &e).unwrap();
        assert_eq!(
            mrip.shape(),
            [
                ("delta", 4),
                ("tau", 2),
                ("d", 2),
                ("d_ind", 2),
                ("m_d", 1),
                ("tau_d", 1),
                ("c", 2),
                ("p", 2)
            ]
        );
    }

    #[test]
    fn common_effect_removes_tau() {
        let mut spec = ModelSpec::new(EndpointMode::UnivariateOs, SharingStructure::IP);
        spec.common_effect_within_indication = true;
        let l = build_layout(&spec, &two_by_two()).unwrap();
        assert_eq!(l.shape(), [("d", 2)]);
    }

    #[test]
    fn bivariate_mrip_has_nine_indicators() {
        let spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::MRIP);
        let m = Model::new(&spec, &three_indications()).unwrap();
        let indicators: usize = m.indicator_blocks().iter().map(|b| b.dim).sum();
        assert_eq!(indicators, 9);
        assert_eq!(m.indicator_blocks().len(), 3);
        let d2 = m.layout.block("delta2").unwrap();
        assert_eq!(d2.latent, [false, false, true]);
        assert_eq!(m.layout.block("rho_w").unwrap().dim, 3);
    }

    #[test]
    fn tied_indicators_share_one_block() {
        let mut spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::MCIP);
        spec.tie_mixture_probabilities = true;
        let m = Model::new(&spec, &three_indications()).unwrap();
        assert_eq!(m.indicator_blocks().len(), 1);
        assert_eq!(m.indicator_blocks()[0].name, "c_surrogacy");
        let Roles::Bivariate(b) = &m.roles else { panic!() };
        assert_eq!(b.intercept.indicator, b.cond_sd.indicator);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = ModelSpec::new(EndpointMode::UnivariateOs, SharingStructure::MCIP);
        spec.tie_mixture_probabilities = true;
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::new(EndpointMode::UnivariateOs, SharingStructure::IP);
        spec.sharing_psi = Some(SharingStructure::IP);
        assert!(spec.validate().is_err());
        let mut spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::IP);
        spec.priors.tau_halfnormal_scale = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn bivariate_needs_dual_endpoint_study() {
        let e = parse_evidence_str(&format!("{HEADER}A1,A,-0.3,0.1,,,,\n")).unwrap();
        let spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::IP);
        assert!(Model::new(&spec, &e).is_err());
    }

    #[test]
    fn univariate_os_drops_pfs_only_studies() {
        let m = Model::new(
            &ModelSpec::new(EndpointMode::UnivariateOs, SharingStructure::IP),
            &three_indications(),
        )
        .unwrap();
        assert_eq!(m.studies.len(), 2);
        assert_eq!(m.indications, ["A", "B"]);
    }

    #[test]
    fn log_prior_terms() {
        let e = parse_evidence_str(&format!("{HEADER}A1,A,-0.3,0.1,,,,\n")).unwrap();
        let m = Model::new(&ModelSpec::new(EndpointMode::UnivariatePfs, SharingStructure::IP), &e).unwrap();
        let mut v = ParameterValues::zeros(&m.layout);
        // delta, tau, d
        v.0 = vec![0.0, 0.5, 0.0];
        let lp = m.log_prior(&v).unwrap();
        let expect = (1.0 / (10.0 * (2.0 * std::f64::consts::PI).sqrt())).ln() + dist::half_normal_ln(0.5, 0.5);
        assert!((lp - expect).abs() < 1e-12);
        assert!(((1.0f64 / (10.0 * (2.0 * std::f64::consts::PI).sqrt())).ln() + 3.2215).abs() < 1e-4);
        v.0[1] = -0.1;
        assert_eq!(m.log_prior(&v).unwrap(), f64::NEG_INFINITY);
        assert!(m.log_prior(&ParameterValues(vec![0.0])).is_err());
    }

    #[test]
    fn rho_prior_is_log_half() {
        let spec = ModelSpec::new(EndpointMode::BivariateSurrogacy, SharingStructure::CP);
        let e = parse_evidence_str(&format!("{HEADER}A1,A,-0.3,0.1,,-0.2,0.1,\n")).unwrap();
        let m = Model::new(&spec, &e).unwrap();
        let mut v = ParameterValues::zeros(&m.layout);
        let Roles::Bivariate(b) = &m.roles else { panic!() };
        v.0[b.cond_sd.common.unwrap()] = 0.3;
        let base = m.log_prior(&v).unwrap();
        // Moving delta1 off zero only changes the delta1 term; rho = 0 contributes log(0.5).
        let expected = dist::normal_ln(0.0, 0.0, 10.0) * 3.0 // delta1 + two common locations
            + 0.5f64.ln()
            + dist::half_normal_ln(0.3, 0.5);
        assert!((base - expected).abs() < 1e-12);
    }
}
