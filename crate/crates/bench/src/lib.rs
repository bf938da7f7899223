//! Fixtures shared by the benchmarks.

use mima_core::synthetic::{generate, EffectMode, ScenarioSpec, WithinTau};
use mima_core::EvidenceSet;

/// Synthetic dual-endpoint evidence with `j` indications of `n` trials each.
pub fn evidence(j: usize, n: usize) -> EvidenceSet {
    let s = ScenarioSpec {
        n_indications: j,
        trials_per_indication: n,
        effect_mode: EffectMode::Exchangeable { m: -0.3, tau: 0.2 },
        within_tau: WithinTau::Fixed(0.1),
        missing_os_fraction: 0.2,
        seed: 17,
        ..Default::default()
    };
    generate(&s).expect("valid scenario").0
}
