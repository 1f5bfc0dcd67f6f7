//! Central finite-difference oracle for analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

use super::tape::{Tape, Var};

/// Max relative error between `analytic` and the five-point central
/// difference of `f` over the coordinates in `coords`.
///
/// The stencil `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` has
/// truncation error O(h⁴). Per coordinate the error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], coords: &[usize], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = x[i];
        let mut at = |d: f64| {
            x[i] = orig + d;
            f(&x)
        };
        let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        x[i] = orig;
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    worst
}

/// A scalar-valued computation that can be recorded at any precision.
pub trait ScalarGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// `n` distinct coordinates out of `len`, or all of them when `n >= len`.
pub fn sample_coords(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = index::sample(&mut rng, len, n).into_vec();
    v.sort_unstable();
    v
}

/// Checks the gradient of `graph` with respect to every input.
///
/// The analytic gradient is computed at precision `T`; the finite-difference
/// reference always runs in 64-bit. `samples` limits the number of checked
/// coordinates per input.
pub fn gradient_error<T: Scalar, G: ScalarGraph>(
    graph: &G,
    inputs: &[Tensor<f64>],
    h: f64,
    samples: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let loss = graph.build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = graph.build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = tape.grad_tensor(vars[k]).to_f64_vec();
        let coords = sample_coords(input.len(), samples.unwrap_or(usize::MAX), seed ^ (k as u64) << 17);
        let mut err = None;
        let e = finite_diff_check(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                eval(&vals).unwrap_or_else(|e| {
                    err = Some(e);
                    f64::NAN
                })
            },
            input.data(),
            &analytic,
            &coords,
            h,
        );
        if let Some(e) = err {
            return Err(e);
        }
        worst = worst.max(e);
    }
    Ok(worst)
}
