use super::mat::Mat;
use crate::error::{Error, Result};
use crate::remi::TokenId;

fn log_softmax_at(row: &[f64], target: usize) -> (f64, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    (row[target] - lse, lse)
}

/// Mean next-token cross-entropy over non-padding targets.
pub fn cross_entropy(logits: &[Vec<f64>], targets: &[TokenId]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &t) in logits.iter().zip(targets) {
        if t == TokenId::PAD {
            continue;
        }
        if t.index() >= row.len() {
            return Err(Error::TokenOutOfRange { index: count, id: t.id() as u32 });
        }
        total -= log_softmax_at(row, t.index()).0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllPadding);
    }
    Ok(total / count as f64)
}

/// Summed loss, non-padding count, and the gradient of the summed loss.
pub(crate) fn loss_sum_and_grad(logits: &Mat, targets: &[TokenId]) -> (f64, usize, Mat) {
    let mut d = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    let mut count = 0;
    for (t, &tgt) in targets.iter().enumerate() {
        if tgt == TokenId::PAD {
            continue;
        }
        let row = logits.row(t);
        let (lp, lse) = log_softmax_at(row, tgt.index());
        total -= lp;
        count += 1;
        let out = d.row_mut(t);
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - lse).exp();
        }
        out[tgt.index()] -= 1.0;
    }
    (total, count, d)
}
