//! Central finite-difference oracle for verifying reverse-mode gradients.
//!
//! The oracle only ever evaluates the forward function; it shares no code
//! with [`Tape::backward`](crate::Tape::backward).

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst element of one gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub rel_err: f64,
}

/// Numeric gradient of `f` at every coordinate of every input.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        out.push(Tensor::new(inputs[i].shape(), g)?);
    }
    Ok(out)
}

/// Builds `build` on a fresh tape with every input as a parameter, reduces
/// its output with the fixed projection `weights` and compares the reverse
/// pass against central differences. Returns the worst coordinate.
pub fn check<B>(
    build: B,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    step: f64,
    floor: f64,
) -> Result<GradReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let project = |tape: &mut Tape<f64>, out: Var| -> Result<Var> {
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vs)?;
        let l = project(&mut t, out)?;
        Ok(t.value(l).item())
    };
    let numeric = numeric_gradients(&eval, inputs, step)?;

    let mut worst = GradReport {
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: 0.0,
    };
    for (i, (v, num)) in vars.iter().zip(&numeric).enumerate() {
        let ana = grads.get(*v).expect("parameter gradient");
        for (j, (&a, &n)) in ana.data().iter().zip(num.data()).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > worst.rel_err {
                worst = GradReport {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric: n,
                    rel_err: rel,
                };
            }
        }
    }
    Ok(worst)
}
