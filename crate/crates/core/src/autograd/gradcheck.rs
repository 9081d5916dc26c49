//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, ValueGrid, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`, norms taken over
    /// all inputs jointly so that a parameter whose true gradient is zero
    /// (roundoff on both sides) is judged against the gradient as a whole.
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

/// Compares tape gradients of `f` against central differences.
///
/// The scalar being differentiated is `Σ rᵢ·yᵢ` with fixed random weights
/// `r` drawn from `seed`, so ops whose plain output sum is constant (softmax)
/// are still exercised.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[ValueGrid],
    f: F,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|g| tape.variable(g.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let weights: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    tape.backward_with(out, weights.clone());
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, g)| tape.grad(*v).map_or_else(|| vec![0.0; g.numel()], <[f64]>::to_vec))
        .collect();

    let objective = |values: &[ValueGrid]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|g| tape.constant(g.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.data(out).iter().zip(&weights).map(|(y, r)| y * r).sum())
    };

    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = objective(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = objective(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        all_analytic.extend_from_slice(&analytic[i]);
        all_numeric.extend(numeric);
    }
    let worst = relative_error(&all_analytic, &all_numeric);
    if !worst.is_finite() {
        return Err(Error::invalid("gradcheck", format!("{name}: non-finite gradient")));
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance,
    })
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// A grid of uniform values in `[-1, 1)`.
pub fn random_grid(rng: &mut impl Rng, shape: &[usize]) -> ValueGrid {
    let n: usize = shape.iter().product();
    ValueGrid::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("positive shape")
}

/// A grid whose entries are pairwise separated by at least `gap`, shuffled.
pub fn distinct_grid(rng: &mut impl Rng, shape: &[usize], gap: f64) -> ValueGrid {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    values.shuffle(rng);
    ValueGrid::new(shape.to_vec(), values).expect("positive shape")
}
