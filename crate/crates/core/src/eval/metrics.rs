use crate::error::{Error, Result};
use crate::losses::LogProbs;

fn check_len(lp: &LogProbs, labels: &[usize]) -> Result<()> {
    if lp.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            lp.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// Fraction of rows whose argmax (ties to the smaller index) equals the label.
pub fn accuracy(lp: &LogProbs, labels: &[usize]) -> Result<f64> {
    check_len(lp, labels)?;
    if labels.is_empty() {
        return Err(Error::Evaluation("accuracy of an empty set".into()));
    }
    let correct = lp.argmax().iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `counts[true][predicted]`.
pub fn confusion_matrix(lp: &LogProbs, labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    check_len(lp, labels)?;
    let c = lp.classes();
    let mut counts = vec![vec![0; c]; c];
    for (p, &y) in lp.argmax().into_iter().zip(labels) {
        if y >= c {
            return Err(Error::Label { label: y, classes: c });
        }
        counts[y][p] += 1;
    }
    Ok(counts)
}
