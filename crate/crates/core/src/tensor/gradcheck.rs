//! Central finite-difference checking of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / (‖analytic‖₂ + ‖numeric‖₂)` for each input,
    /// taken as 0 when the difference is below [`ABS_FLOOR`].
    pub rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Builds `f(inputs)` on a fresh tape, contracts a non-scalar output with a
/// fixed random projection and compares the backward pass against central
/// differences with step `eps`.
pub fn check<F>(inputs: &[Tensor], eps: f64, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(&t.clone().with_requires_grad(true))).collect();
        let out = f(&mut tape, &vars)?;
        let n = tape.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = if n == 1 {
            out
        } else {
            let p = tape.input(tape.shape(out).to_vec(), proj, false)?;
            let m = tape.mul(out, p)?;
            tape.sum(m)
        };
        let value = tape.value(loss)[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rel_err = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        let mut work = inputs.to_vec();
        for j in 0..a.len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (plus - minus) / (2.0 * eps);
        }
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt() + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !diff.is_finite() {
            return Err(Error::Contract(format!("non-finite gradient for input {i}")));
        }
        rel_err.push(relative(diff, norm));
    }
    Ok(GradCheck { rel_err })
}

/// Differences smaller than this are finite-difference noise on a gradient
/// that is analytically zero (e.g. a key bias under softmax).
pub const ABS_FLOOR: f64 = 1e-9;

pub fn relative(diff: f64, norm: f64) -> f64 {
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / norm
    }
}
