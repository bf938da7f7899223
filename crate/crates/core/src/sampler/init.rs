use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::normal;
use crate::model::{Model, ParameterValues, Support};

pub(crate) fn init_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * chain as u64 + 1);
    rng
}

/// Over-dispersed starting point for chain `chain_index`.
///
/// Study effects start at their estimates (0 for a missing OS estimate),
/// location parameters at `N(0, 1) * (1 + chain_index)`, scales at
/// `|N(0, 0.25)| + 0.1`, indicators at 1, probabilities at 0.5 and
/// correlations at 0 (the middle of the prior range if 0 is excluded).
pub fn initial_values(model: &Model, chain_index: usize, seed: u64) -> ParameterValues {
    draw_initial(model, chain_index, &mut init_rng(seed, chain_index))
}

pub(crate) fn draw_initial<R: Rng + ?Sized>(model: &Model, chain_index: usize, rng: &mut R) -> ParameterValues {
    let mut v = ParameterValues::zeros(&model.layout);
    let spread = 1.0 + chain_index as f64;
    let (lo, hi) = model.spec.priors.rho_uniform_bounds;
    let rho0 = if lo < 0.0 && hi > 0.0 { 0.0 } else { (lo + hi) / 2.0 };
    for b in &model.layout.blocks {
        for k in 0..b.dim {
            let s = model.studies.get(k);
            v.0[b.offset + k] = match (b.name.as_str(), b.support) {
                ("delta" | "delta1", _) => s.expect("study-level block").y,
                ("delta2", _) => s.expect("study-level block").os.map_or(0.0, |o| o.0),
                (_, Support::Real) => spread * normal(rng),
                (_, Support::Positive) => (0.5 * normal(rng)).abs() + 0.1,
                (_, Support::UnitInterval) => 0.5,
                (_, Support::Binary) => 1.0,
                (_, Support::Correlation) => rho0,
            };
        }
    }
    v
}
