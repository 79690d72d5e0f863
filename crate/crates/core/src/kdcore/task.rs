use crate::error::{LabError, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug)]
pub struct TaskLoss {
    pub loss: f64,
    /// `(softmax − onehot) / B`
    pub grad: Matrix,
}

/// Mean softmax cross-entropy over the batch.
pub fn task_loss(logits: &Matrix, labels: &[usize]) -> Result<TaskLoss> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(LabError::shape("task_loss", &[b, c], &[labels.len()]));
    }
    if b == 0 || c == 0 {
        return Err(LabError::shape("task_loss", &[b, c], &[1, 1]));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(LabError::Input(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
        let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + s.ln();
        total += lse - row[y];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(TaskLoss {
        loss: total / b as f64,
        grad,
    })
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}
