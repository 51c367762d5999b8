use super::tape::{Tape, Var};
use super::tensor::ParamSet;
use crate::error::Result;

/// Step used for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Compares the tape's analytic gradient of `f` against central finite
/// differences for every entry of every parameter in `params`.
///
/// Returns `max |analytic − numeric| / max(1, |numeric|)`. Everything runs in
/// `f64`; cast `f32` parameter sets with [`ParamSet::cast`] first.
pub fn grad_check<G>(params: &ParamSet<f64>, f: G) -> Result<f64>
where
    G: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    grad_check_with_step(params, GRAD_CHECK_STEP, f)
}

pub fn grad_check_with_step<G>(params: &ParamSet<f64>, h: f64, f: G) -> Result<f64>
where
    G: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        let grads = tape.backward(loss)?;
        params
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; params.get(id).len()])
            })
            .collect::<Vec<_>>()
    };

    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(ps);
        let loss = f(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        for (i, &exact) in analytic[id.index()].iter().enumerate() {
            let orig = work.get(id).values()[i];
            work.get_mut(id).values_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).values_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (exact - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
