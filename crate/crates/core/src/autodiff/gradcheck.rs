//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the plain forward closure, so it stays
//! independent of every backward kernel it is used to validate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step for f32 central differences.
pub const F32_STEP: f32 = 1e-2;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let denom = a.l2_norm().max(b.l2_norm());
    if denom < 1e-12 {
        return 0.0;
    }
    a.l2_distance(b) / denom
}

fn project(out: &Tensor, proj: &Tensor) -> f64 {
    out.data().iter().zip(proj.data()).map(|(&o, &p)| o as f64 * p as f64).sum()
}

/// Numeric gradient of `<proj, f(inputs)>` with respect to `inputs[which]`.
pub fn numeric_grad<F>(f: &F, inputs: &[Tensor], which: usize, proj: &Tensor, step: f32) -> Result<Tensor>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut work = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for i in 0..inputs[which].numel() {
        let orig = inputs[which].data()[i];
        let (up, down) = (orig + step, orig - step);
        work[which].data_mut()[i] = up;
        let fp = project(&f(&work)?, proj);
        work[which].data_mut()[i] = down;
        let fm = project(&f(&work)?, proj);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = ((fp - fm) / (up as f64 - down as f64)) as f32;
    }
    Ok(grad)
}

/// Compare tape gradients against central differences for every input.
/// Returns the relative error per input.
pub fn check<F, G>(plain: F, taped: G, inputs: &[Tensor], step: f32, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    G: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = taped(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = Tensor::uniform(tape.value(out).shape(), -1.0, 1.0, &mut rng);
    let grads = tape.backward_with(out, proj.clone())?;
    let mut errs = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = numeric_grad(&plain, inputs, i, &proj, step)?;
        errs.push(relative_error(&analytic, &numeric));
    }
    Ok(errs)
}
