use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// All arithmetic runs in `f64`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    gradcheck_many(|_, vars| f(vars[0]), std::slice::from_ref(x), eps)
}

/// [`gradcheck`] over several inputs at once.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.dims().to_vec()));
        }
        let y = v.data()[0];
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "gradcheck" });
        }
        Ok(y)
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt(v)).collect()
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !err.is_finite() {
                return Err(Error::NonFinite { op: "gradcheck" });
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
