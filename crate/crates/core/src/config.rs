//! Flat `key = value` configuration files with `#` comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{EndpointMode, ModelSpec, SharingStructure};
use crate::sampler::SamplerConfig;

/// Parsed `key = value` lines in file order, each with its 1-based line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pub entries: Vec<(usize, String, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config {
                    line,
                    msg: "empty key".into(),
                });
            }
            if let Some((first, ..)) = entries.iter().find(|(_, key, _)| key == k) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{k}` (first set on line {first})"),
                });
            }
            entries.push((line, k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }

    fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Config {
            line,
            msg: format!("invalid value `{v}` for `{key}`"),
        })
    }

    fn pair(line: usize, key: &str, v: &str) -> Result<(f64, f64)> {
        let parts: Vec<&str> = v
            .trim_matches(|c| c == '(' || c == ')' || c == '[' || c == ']')
            .split(',')
            .map(str::trim)
            .collect();
        match parts.as_slice() {
            [a, b] => Ok((Self::value(line, key, a)?, Self::value(line, key, b)?)),
            _ => Err(Error::Config {
                line,
                msg: format!("`{key}` expects two comma-separated numbers, got `{v}`"),
            }),
        }
    }

    fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
        match v.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            _ => Err(Error::Config {
                line,
                msg: format!("invalid boolean `{v}` for `{key}`"),
            }),
        }
    }
}

/// Model spec plus sampler settings read from a run configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub sampler: SamplerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spec: ModelSpec::new(EndpointMode::UnivariatePfs, SharingStructure::RP),
            sampler: SamplerConfig::default(),
        }
    }
}

impl RunConfig {
    /// Applies each recognised key over the defaults. Unknown keys are
    /// errors.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut c = Self::default();
        for (line, key, v) in &kv.entries {
            let (line, k, v) = (*line, key.as_str(), v.as_str());
            let spec_err = |e: Error| Error::Config {
                line,
                msg: e.to_string(),
            };
            let p = &mut c.spec.priors;
            let s = &mut c.sampler;
            match k {
                "endpoint_mode" => c.spec.endpoint_mode = v.parse().map_err(spec_err)?,
                "sharing" => c.spec.sharing = v.parse().map_err(spec_err)?,
                "sharing_psi" => {
                    c.spec.sharing_psi = if v.eq_ignore_ascii_case("inherit") {
                        None
                    } else {
                        Some(v.parse().map_err(spec_err)?)
                    }
                }
                "tie_mixture_probabilities" => c.spec.tie_mixture_probabilities = KeyValues::boolean(line, k, v)?,
                "common_effect_within_indication" => {
                    c.spec.common_effect_within_indication = KeyValues::boolean(line, k, v)?
                }
                "p_new" => c.spec.p_new = KeyValues::value(line, k, v)?,
                "tau_halfnormal_scale" => p.tau_halfnormal_scale = KeyValues::value(line, k, v)?,
                "effect_normal_sd" => p.effect_normal_sd = KeyValues::value(line, k, v)?,
                "psi_halfnormal_scale" => p.psi_halfnormal_scale = KeyValues::value(line, k, v)?,
                "xi_halfnormal_scale" => p.xi_halfnormal_scale = KeyValues::value(line, k, v)?,
                "h_gamma_shape" => p.h_gamma_shape = KeyValues::value(line, k, v)?,
                "h_gamma_rate" => p.h_gamma_rate = KeyValues::value(line, k, v)?,
                "mixture_beta" => p.mixture_beta = KeyValues::pair(line, k, v)?,
                "rho_uniform_bounds" => p.rho_uniform_bounds = KeyValues::pair(line, k, v)?,
                "n_chains" => s.n_chains = KeyValues::value(line, k, v)?,
                "burn_in" => s.burn_in = KeyValues::value(line, k, v)?,
                "samples_per_chain" => s.samples_per_chain = KeyValues::value(line, k, v)?,
                "thin" => s.thin = KeyValues::value(line, k, v)?,
                "seed" => s.seed = KeyValues::value(line, k, v)?,
                "adapt_target_acceptance" => s.adapt_target_acceptance = KeyValues::value(line, k, v)?,
                "adapt_window" => s.adapt_window = KeyValues::value(line, k, v)?,
                _ => {
                    return Err(Error::Config {
                        line,
                        msg: format!("unknown key `{k}`"),
                    })
                }
            }
        }
        Ok(c)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.sampler.validate()
    }

    /// Canonical rendering; parsing it back gives the same config.
    pub fn to_config_string(&self) -> String {
        let (sp, p, s) = (&self.spec, &self.spec.priors, &self.sampler);
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("endpoint_mode", sp.endpoint_mode.as_str().into());
        put("sharing", sp.sharing.as_str().into());
        put("sharing_psi", sp.sharing_psi.map_or("inherit", |x| x.as_str()).into());
        put("tie_mixture_probabilities", sp.tie_mixture_probabilities.to_string());
        put(
            "common_effect_within_indication",
            sp.common_effect_within_indication.to_string(),
        );
        put("p_new", fmt_f(sp.p_new));
        put("tau_halfnormal_scale", fmt_f(p.tau_halfnormal_scale));
        put("effect_normal_sd", fmt_f(p.effect_normal_sd));
        put("psi_halfnormal_scale", fmt_f(p.psi_halfnormal_scale));
        put("xi_halfnormal_scale", fmt_f(p.xi_halfnormal_scale));
        put("h_gamma_shape", fmt_f(p.h_gamma_shape));
        put("h_gamma_rate", fmt_f(p.h_gamma_rate));
        put(
            "mixture_beta",
            format!("{}, {}", fmt_f(p.mixture_beta.0), fmt_f(p.mixture_beta.1)),
        );
        put(
            "rho_uniform_bounds",
            format!("{}, {}", fmt_f(p.rho_uniform_bounds.0), fmt_f(p.rho_uniform_bounds.1)),
        );
        put("n_chains", s.n_chains.to_string());
        put("burn_in", s.burn_in.to_string());
        put("samples_per_chain", s.samples_per_chain.to_string());
        put("thin", s.thin.to_string());
        put("seed", s.seed.to_string());
        put("adapt_target_acceptance", fmt_f(s.adapt_target_acceptance));
        put("adapt_window", s.adapt_window.to_string());
        out
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let c = RunConfig::parse(
            "# run\nendpoint_mode = bivariate\nsharing = MRIP  # mixture\nsharing_psi = IP\n\
             tie_mixture_probabilities = true\nmixture_beta = 2, 3\nseed = 42\nburn_in = 10\n",
        )
        .unwrap();
        assert_eq!(c.spec.endpoint_mode, EndpointMode::BivariateSurrogacy);
        assert_eq!(c.spec.sharing, SharingStructure::MRIP);
        assert_eq!(c.spec.sharing_psi, Some(SharingStructure::IP));
        assert!(c.spec.tie_mixture_probabilities);
        assert_eq!(c.spec.priors.mixture_beta, (2.0, 3.0));
        assert_eq!(c.sampler.seed, 42);
        assert_eq!(c.sampler.burn_in, 10);
        assert_eq!(c.sampler.n_chains, 3);
        c.validate().unwrap();
    }

    #[test]
    fn errors_cite_line() {
        let e = RunConfig::parse("seed = 1\n\nbogus = 2\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 3, .. }), "{e}");
        let e = RunConfig::parse("seed = x\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        let e = RunConfig::parse("seed\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
        let e = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }));
        let e = RunConfig::parse("rho_uniform_bounds = 0.5\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 1, .. }));
    }

    #[test]
    fn canonical_round_trip() {
        let mut c = RunConfig::default();
        c.spec.priors.rho_uniform_bounds = (-0.3, 0.95);
        c.spec.p_new = 0.1 + 0.2;
        c.sampler.seed = u64::MAX;
        let back = RunConfig::parse(&c.to_config_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }
}
