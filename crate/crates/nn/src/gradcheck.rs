//! Central finite-difference gradient checks (double precision).

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{NnError, Result};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error `|a - b| / max(1e-8, |a| + |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(NnError::ShapeMismatch { op: "grad_check", detail: format!("function output {:?} is not scalar", t.shape()) });
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(NnError::NonFiniteOutput("grad_check"));
    }
    Ok(y)
}

/// Compares backprop gradients of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h` for every coordinate of every input.
/// Returns the maximum relative error.
pub fn finite_diff_grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let y = f(&mut tape, &vars)?;
        scalar_of(&tape, y)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = orig - h;
            let fm = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check over parameters of a store.
///
/// At most `per_param` randomly chosen coordinates of each parameter are
/// probed (all of them when the parameter is smaller).
pub fn param_grad_check<F, R>(store: &ParamStore<f64>, f: F, h: f64, per_param: usize, rng: &mut R) -> Result<f64>
where
    F: Fn(&mut Tape<f64>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic: Vec<(ParamId, Tensor<f64>)> = {
        let mut tape = Tape::with_params(store);
        let y = f(&mut tape)?;
        scalar_of(&tape, y)?;
        tape.param_grads(y)?
    };
    let mut probe = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let y = f(&mut tape)?;
        scalar_of(&tape, y)
    };
    let mut worst = 0.0f64;
    for (id, g) in &analytic {
        let n = g.numel();
        let coords: Vec<usize> = if n <= per_param { (0..n).collect() } else { sample(rng, n, per_param).into_vec() };
        for j in coords {
            let orig = probe.value(*id).data()[j];
            probe.value_mut(*id).data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe.value_mut(*id).data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe.value_mut(*id).data_mut()[j] = orig;
            worst = worst.max(rel_error(g.data()[j], (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}
