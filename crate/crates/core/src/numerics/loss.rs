use super::Matrix;
use crate::error::{Error, Result};

/// Mean token negative log-likelihood and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() {
        return Err(Error::Input(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Input(format!(
            "target index {} out of range for vocabulary of {}",
            t,
            logits.cols()
        )));
    }
    let n = targets.len().max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t];
        let g = grad.row_mut(r);
        for (gi, x) in g.iter_mut().zip(row) {
            *gi = (x - lse).exp() / n;
        }
        g[t] -= 1.0 / n;
    }
    Ok((total / n, grad))
}
