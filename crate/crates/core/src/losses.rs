//! Entropy, cross-entropy and symmetric cross-entropy on probability rows.
//! Every loss is a batch mean.

use dplot_tensor::{Scalar, Tape, Tensor, Var, LOG_EPS};

use crate::error::{Error, Result};

pub const SIMPLEX_TOL: f64 = 1e-4;

fn rows_of<T: Scalar>(t: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, c] if n > 0 && c > 0 => Ok((n, c)),
        _ => Err(Error::Invalid(format!("{op}: expected a non-empty [N, C] matrix, got {:?}", t.shape()))),
    }
}

/// Checks that every row is a probability vector within [`SIMPLEX_TOL`].
pub fn check_simplex<T: Scalar>(p: &Tensor<T>, op: &str) -> Result<()> {
    let (_, c) = rows_of(p, op)?;
    for (i, row) in p.data().chunks_exact(c).enumerate() {
        let mut sum = 0.0;
        for &v in row {
            let v = v.as_f64();
            if v < -SIMPLEX_TOL {
                return Err(Error::Invalid(format!("{op}: row {i} has negative entry {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Invalid(format!("{op}: row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// `-(1/N) sum_n sum_c p_nc ln(max(q_nc, eps))`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, p: Var, q: Var) -> Result<Var> {
    let n = rows_of(tape.value(p), "cross_entropy")?.0;
    if tape.value(p).shape() != tape.value(q).shape() {
        return Err(Error::Invalid(format!(
            "cross_entropy: shapes {:?} and {:?}",
            tape.value(p).shape(),
            tape.value(q).shape()
        )));
    }
    let log_q = tape.log_clamped(q, T::from_f64_lossy(LOG_EPS))?;
    let prod = tape.mul(p, log_q)?;
    let total = tape.sum(prod)?;
    Ok(tape.scale(total, T::from_f64_lossy(-1.0 / n as f64))?)
}

/// Mean Shannon entropy of the probability rows of `probs`.
pub fn entropy_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var) -> Result<Var> {
    check_simplex(tape.value(probs), "entropy_loss")?;
    cross_entropy(tape, probs, probs)
}

/// `(CE(a, b) + CE(b, a)) / 2`, symmetric in its arguments bit for bit.
pub fn sce_loss<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let ab = cross_entropy(tape, a, b)?;
    let ba = cross_entropy(tape, b, a)?;
    let s = tape.add(ab, ba)?;
    Ok(tape.scale(s, T::from_f64_lossy(0.5))?)
}

/// Paired-view consistency `sce(y_hat, target) + sce(y_tilde, target)`.
pub fn paired_consistency<T: Scalar>(tape: &mut Tape<T>, y_hat: Var, y_tilde: Var, target: Var) -> Result<Var> {
    let a = sce_loss(tape, y_hat, target)?;
    let b = sce_loss(tape, y_tilde, target)?;
    Ok(tape.add(a, b)?)
}

/// Softmax cross-entropy against integer labels.
pub fn label_cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = rows_of(tape.value(logits), "label_cross_entropy")?;
    if labels.len() != n || labels.iter().any(|&l| l >= c) {
        return Err(Error::Invalid(format!("label_cross_entropy: {} labels for {n} rows of {c} classes", labels.len())));
    }
    let mut onehot = Tensor::zeros(&[n, c]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + l] = T::one();
    }
    let target = tape.constant(onehot);
    let probs = tape.softmax(logits)?;
    cross_entropy(tape, target, probs)
}

/// Per-row entropy of probability rows, in f64.
pub fn row_entropies<T: Scalar>(probs: &Tensor<T>) -> Vec<f64> {
    let c = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks_exact(c.max(1))
        .map(|row| {
            -row.iter()
                .map(|&p| {
                    let p = p.as_f64();
                    p * p.max(LOG_EPS).ln()
                })
                .sum::<f64>()
        })
        .collect()
}
