//! Downstream-task metrics.

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a], &[b]));
    }
    if a == 0 {
        return Err(Error::Eval(format!("{op}: empty input")));
    }
    Ok(())
}

/// Mann–Whitney AUC: P(score⁺ > score⁻) with ties counted one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len(), "auc")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Eval("auc: NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Eval("auc needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the number of (pos, neg) pairs won by the positive.
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Binary F1 of the positive class; 0 when precision + recall = 0.
pub fn f1(pred: &[bool], labels: &[bool]) -> Result<f64> {
    check_len(pred.len(), labels.len(), "f1")?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 })
}

/// Unweighted mean of one-vs-rest F1 over `k` classes.
pub fn macro_f1(pred: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    check_len(pred.len(), labels.len(), "macro_f1")?;
    if k == 0 {
        return Err(Error::Eval("macro_f1 needs at least one class".into()));
    }
    let mut total = 0.0;
    for c in 0..k {
        let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let l: Vec<bool> = labels.iter().map(|&v| v == c).collect();
        total += f1(&p, &l)?;
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionScores {
    pub rmse: f64,
    /// `None` when the target has zero variance.
    pub r2: Option<f64>,
}

pub fn rmse_r2(pred: &[f64], target: &[f64]) -> Result<RegressionScores> {
    check_len(pred.len(), target.len(), "rmse_r2")?;
    let n = target.len() as f64;
    let sse: f64 = pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
    let mean = target.iter().sum::<f64>() / n;
    let sst: f64 = target.iter().map(|y| (y - mean) * (y - mean)).sum();
    Ok(RegressionScores {
        rmse: (sse / n).sqrt(),
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
    })
}
