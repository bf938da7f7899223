//! Synthetic multi-indication evidence with a retained truth record, plus
//! the oracles used to check the sampler.

mod calibration;
mod oracle;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{fmt_f, KeyValues};
use crate::error::{Error, Result};
use crate::evidence::{Estimate, EvidenceSet, TrialRecord};
use crate::sampler::normal;

pub use calibration::{
    calibration_run, estimands, run_replication, CalibrationReport, EstimandResult, EstimandSummary, ReplicationResult,
};
pub use oracle::{conjugate_posterior, grid_posterior, GridMoment, GridOptions, GridPosterior};

/// How true indication-level PFS effects are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EffectMode {
    /// Every indication has effect `d`.
    Common { d: f64 },
    /// `d_j ~ N(m, tau^2)`.
    Exchangeable { m: f64, tau: f64 },
    /// Every indication has effect `d` except the last, which has `d + offset`.
    OneExtreme { d: f64, offset: f64 },
}

/// Between-study sd within an indication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum WithinTau {
    Fixed(f64),
    /// Drawn per indication from `|N(0, scale^2)|`.
    HalfNormal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSpec {
    pub n_indications: usize,
    pub trials_per_indication: usize,
    pub effect_mode: EffectMode,
    pub within_tau: WithinTau,
    /// Surrogacy intercepts: one shared value or one per indication.
    pub lambda0: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub psi: Vec<f64>,
    /// Within-study standard errors are uniform on this range (both
    /// endpoints).
    pub se_range: (f64, f64),
    pub rho_w: f64,
    pub missing_os_fraction: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_indications: 4,
            trials_per_indication: 4,
            effect_mode: EffectMode::Common { d: -0.3 },
            within_tau: WithinTau::Fixed(0.0),
            lambda0: vec![0.0],
            lambda1: vec![1.0],
            psi: vec![0.05],
            se_range: (0.1, 0.2),
            rho_w: 0.5,
            missing_os_fraction: 0.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndicationTruth {
    pub label: String,
    pub d_pfs: f64,
    pub tau: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub psi: f64,
    /// `lambda0 + lambda1 * d_pfs`.
    pub d_os: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyTruth {
    pub study_id: String,
    pub indication: String,
    pub delta_pfs: f64,
    pub delta_os: f64,
    pub se_pfs: f64,
    pub se_os: f64,
    pub rho_w: f64,
    pub os_observed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub scenario: ScenarioSpec,
    pub indications: Vec<IndicationTruth>,
    pub studies: Vec<StudyTruth>,
}

impl Truth {
    pub fn indication(&self, label: &str) -> Option<&IndicationTruth> {
        self.indications.iter().find(|t| t.label == label)
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_indications == 0 || self.trials_per_indication == 0 {
            return bad("scenario needs at least one indication and one trial per indication".into());
        }
        for (name, v) in [
            ("lambda0", &self.lambda0),
            ("lambda1", &self.lambda1),
            ("psi", &self.psi),
        ] {
            if v.len() != 1 && v.len() != self.n_indications {
                return bad(format!(
                    "`{name}` needs 1 or {} values, got {}",
                    self.n_indications,
                    v.len()
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("`{name}` must be finite"));
            }
        }
        if self.psi.iter().any(|&p| p < 0.0) {
            return bad("psi must be non-negative".into());
        }
        let (lo, hi) = self.se_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("se range must satisfy 0 < lo <= hi, got ({lo}, {hi})"));
        }
        if !(self.rho_w > -1.0 && self.rho_w < 1.0) {
            return bad(format!("rho_w must lie in (-1, 1), got {}", self.rho_w));
        }
        if !(0.0..=1.0).contains(&self.missing_os_fraction) {
            return bad(format!(
                "missing_os_fraction must lie in [0, 1], got {}",
                self.missing_os_fraction
            ));
        }
        match self.within_tau {
            WithinTau::Fixed(t) if !(t >= 0.0 && t.is_finite()) => {
                return bad(format!("within_tau must be >= 0, got {t}"))
            }
            WithinTau::HalfNormal(s) if !(s > 0.0 && s.is_finite()) => {
                return bad(format!("within_tau half-normal scale must be > 0, got {s}"))
            }
            _ => {}
        }
        match self.effect_mode {
            EffectMode::Exchangeable { tau, .. } if !(tau >= 0.0 && tau.is_finite()) => {
                bad(format!("effect_tau must be >= 0, got {tau}"))
            }
            _ => Ok(()),
        }
    }

    fn per_indication(v: &[f64], j: usize) -> f64 {
        if v.len() == 1 {
            v[0]
        } else {
            v[j]
        }
    }

    /// Reads a scenario from `key = value` text over the defaults.
    ///
    /// Keys: `n_indications`, `trials_per_indication`, `effect_mode`
    /// (`common`, `exchangeable`, `one-extreme`), `effect_mean`,
    /// `effect_tau`, `extreme_offset`, `within_tau` (a number or
    /// `halfnormal SCALE`), `lambda0`, `lambda1`, `psi` (one value or a
    /// comma-separated list per indication), `se_range`, `rho_w`,
    /// `missing_os_fraction`, `seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut s = Self::default();
        let (mut mode, mut mean, mut tau, mut offset) = ("common".to_string(), -0.3, 0.0, 0.0);
        for (line, k, v) in &kv.entries {
            let line = *line;
            let err = |msg: String| Error::Config { line, msg };
            let num = |x: &str| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| err(format!("invalid number `{x}` for `{k}`")))
            };
            let list = |x: &str| x.split(',').map(num).collect::<Result<Vec<f64>>>();
            let int = |x: &str| {
                x.parse::<u64>()
                    .map_err(|_| err(format!("invalid integer `{x}` for `{k}`")))
            };
            match k.as_str() {
                "n_indications" => s.n_indications = int(v)? as usize,
                "trials_per_indication" => s.trials_per_indication = int(v)? as usize,
                "effect_mode" => mode = v.to_ascii_lowercase(),
                "effect_mean" => mean = num(v)?,
                "effect_tau" => tau = num(v)?,
                "extreme_offset" => offset = num(v)?,
                "within_tau" => {
                    s.within_tau = match v.strip_prefix("halfnormal") {
                        Some(rest) => WithinTau::HalfNormal(num(rest)?),
                        None => WithinTau::Fixed(num(v)?),
                    }
                }
                "lambda0" => s.lambda0 = list(v)?,
                "lambda1" => s.lambda1 = list(v)?,
                "psi" => s.psi = list(v)?,
                "se_range" => match list(v)?.as_slice() {
                    [a, b] => s.se_range = (*a, *b),
                    _ => return Err(err("`se_range` expects two comma-separated numbers".into())),
                },
                "rho_w" => s.rho_w = num(v)?,
                "missing_os_fraction" => s.missing_os_fraction = num(v)?,
                "seed" => s.seed = int(v)?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        s.effect_mode = match mode.replace('_', "-").as_str() {
            "common" => EffectMode::Common { d: mean },
            "exchangeable" => EffectMode::Exchangeable { m: mean, tau },
            "one-extreme" => EffectMode::OneExtreme { d: mean, offset },
            other => return Err(Error::InvalidConfig(format!("unknown effect_mode `{other}`"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical rendering; parsing it back gives the same scenario.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let list = |v: &[f64]| v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(", ");
        let _ = writeln!(out, "n_indications = {}", self.n_indications);
        let _ = writeln!(out, "trials_per_indication = {}", self.trials_per_indication);
        match self.effect_mode {
            EffectMode::Common { d } => {
                let _ = writeln!(out, "effect_mode = common\neffect_mean = {}", fmt_f(d));
            }
            EffectMode::Exchangeable { m, tau } => {
                let _ = writeln!(
                    out,
                    "effect_mode = exchangeable\neffect_mean = {}\neffect_tau = {}",
                    fmt_f(m),
                    fmt_f(tau)
                );
            }
            EffectMode::OneExtreme { d, offset } => {
                let _ = writeln!(
                    out,
                    "effect_mode = one-extreme\neffect_mean = {}\nextreme_offset = {}",
                    fmt_f(d),
                    fmt_f(offset)
                );
            }
        }
        let _ = match self.within_tau {
            WithinTau::Fixed(t) => writeln!(out, "within_tau = {}", fmt_f(t)),
            WithinTau::HalfNormal(s) => writeln!(out, "within_tau = halfnormal {}", fmt_f(s)),
        };
        let _ = writeln!(out, "lambda0 = {}", list(&self.lambda0));
        let _ = writeln!(out, "lambda1 = {}", list(&self.lambda1));
        let _ = writeln!(out, "psi = {}", list(&self.psi));
        let _ = writeln!(out, "se_range = {}, {}", fmt_f(self.se_range.0), fmt_f(self.se_range.1));
        let _ = writeln!(out, "rho_w = {}", fmt_f(self.rho_w));
        let _ = writeln!(out, "missing_os_fraction = {}", fmt_f(self.missing_os_fraction));
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }
}

/// Draws true effects for `s` and then the observed estimates, PFS and OS
/// jointly normal within each study.
pub fn generate(s: &ScenarioSpec) -> Result<(EvidenceSet, Truth)> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let j_max = s.n_indications;
    let mut indications = Vec::with_capacity(j_max);
    for j in 0..j_max {
        let d_pfs = match s.effect_mode {
            EffectMode::Common { d } => d,
            EffectMode::Exchangeable { m, tau } => m + tau * normal(&mut rng),
            EffectMode::OneExtreme { d, offset } => d + if j + 1 == j_max { offset } else { 0.0 },
        };
        let tau = match s.within_tau {
            WithinTau::Fixed(t) => t,
            WithinTau::HalfNormal(scale) => (scale * normal(&mut rng)).abs(),
        };
        let (l0, l1, psi) = (
            ScenarioSpec::per_indication(&s.lambda0, j),
            ScenarioSpec::per_indication(&s.lambda1, j),
            ScenarioSpec::per_indication(&s.psi, j),
        );
        indications.push(IndicationTruth {
            label: format!("I{}", j + 1),
            d_pfs,
            tau,
            lambda0: l0,
            lambda1: l1,
            psi,
            d_os: l0 + l1 * d_pfs,
        });
    }
    let n = j_max * s.trials_per_indication;
    let n_missing = (s.missing_os_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut os_missing = vec![false; n];
    for &i in &order[..n_missing] {
        os_missing[i] = true;
    }
    let (lo, hi) = s.se_range;
    let mut records = Vec::with_capacity(n);
    let mut studies = Vec::with_capacity(n);
    for (j, t) in indications.iter().enumerate() {
        for k in 0..s.trials_per_indication {
            let i = j * s.trials_per_indication + k;
            let delta_pfs = t.d_pfs + t.tau * normal(&mut rng);
            let delta_os = t.lambda0 + t.lambda1 * delta_pfs + t.psi * normal(&mut rng);
            let se_pfs = lo + (hi - lo) * rng.random::<f64>();
            let se_os = lo + (hi - lo) * rng.random::<f64>();
            let (z1, z2) = (normal(&mut rng), normal(&mut rng));
            let y_pfs = delta_pfs + se_pfs * z1;
            let y_os = delta_os + se_os * (s.rho_w * z1 + (1.0 - s.rho_w * s.rho_w).sqrt() * z2);
            let study_id = format!("{}-S{}", t.label, k + 1);
            let observed = !os_missing[i];
            records.push(TrialRecord {
                study_id: study_id.clone(),
                indication: t.label.clone(),
                pfs: Some(Estimate {
                    lhr: y_pfs,
                    se: se_pfs,
                    report_date: None,
                }),
                os: observed.then_some(Estimate {
                    lhr: y_os,
                    se: se_os,
                    report_date: None,
                }),
            });
            studies.push(StudyTruth {
                study_id,
                indication: t.label.clone(),
                delta_pfs,
                delta_os,
                se_pfs,
                se_os,
                rho_w: s.rho_w,
                os_observed: observed,
            });
        }
    }
    let e = EvidenceSet::new(records)?;
    Ok((
        e,
        Truth {
            scenario: s.clone(),
            indications,
            studies,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_surrogacy_copies_effects() {
        let s = ScenarioSpec {
            lambda0: vec![0.0],
            lambda1: vec![1.0],
            psi: vec![0.0],
            within_tau: WithinTau::Fixed(0.2),
            effect_mode: EffectMode::Exchangeable { m: -0.2, tau: 0.3 },
            ..Default::default()
        };
        let (_, truth) = generate(&s).unwrap();
        for st in &truth.studies {
            assert_eq!(st.delta_os, st.delta_pfs);
        }
        for t in &truth.indications {
            assert_eq!(t.d_os, t.d_pfs);
        }
    }

    #[test]
    fn missing_fraction_bounds() {
        let all = ScenarioSpec {
            missing_os_fraction: 1.0,
            ..Default::default()
        };
        let (e, truth) = generate(&all).unwrap();
        assert!(e.records().iter().all(|r| r.os.is_none() && r.pfs.is_some()));
        assert!(truth.studies.iter().all(|s| !s.os_observed));
        let half = ScenarioSpec {
            missing_os_fraction: 0.5,
            ..Default::default()
        };
        let (e, _) = generate(&half).unwrap();
        assert_eq!(e.records().iter().filter(|r| r.os.is_none()).count(), 8);
    }

    #[test]
    fn one_extreme_shifts_last_indication() {
        let s = ScenarioSpec {
            effect_mode: EffectMode::OneExtreme { d: -0.3, offset: 0.8 },
            ..Default::default()
        };
        let (e, truth) = generate(&s).unwrap();
        let d: Vec<f64> = truth.indications.iter().map(|t| t.d_pfs).collect();
        assert_eq!(d, [-0.3, -0.3, -0.3, 0.5]);
        assert_eq!(e.n_indications(), 4);
        assert_eq!(e.len(), 16);
    }

    #[test]
    fn deterministic_under_seed() {
        let s = ScenarioSpec::default();
        let (a, ta) = generate(&s).unwrap();
        let (b, tb) = generate(&s).unwrap();
        assert_eq!(a.to_csv_string(), b.to_csv_string());
        assert_eq!(ta, tb);
        let (c, _) = generate(&ScenarioSpec { seed: 2, ..s }).unwrap();
        assert_ne!(a.to_csv_string(), c.to_csv_string());
    }

    #[test]
    fn scenario_text_round_trip() {
        let s = ScenarioSpec::parse(
            "n_indications = 3\neffect_mode = exchangeable\neffect_mean = -0.2\neffect_tau = 0.25\n\
             within_tau = halfnormal 0.5\nlambda1 = 0.9, 1.0, 1.1\nse_range = 0.05, 0.3\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(s.effect_mode, EffectMode::Exchangeable { m: -0.2, tau: 0.25 });
        assert_eq!(s.within_tau, WithinTau::HalfNormal(0.5));
        assert_eq!(s.lambda1, [0.9, 1.0, 1.1]);
        assert_eq!(ScenarioSpec::parse(&s.to_config_string()).unwrap(), s);
        assert!(ScenarioSpec::parse("lambda0 = 1, 2\n").is_err());
        assert!(matches!(
            ScenarioSpec::parse("n_indications = 2\nfoo = 1\n"),
            Err(Error::Config { line: 2, .. })
        ));
    }
}
