//! Evaluation metrics. Every function takes plain matrices and slices so
//! the same code scores live models and saved prediction files.

use crate::error::{Error, Result};
use crate::tensor::{cholesky, Matrix};

/// Root mean squared error over all entries. Callers de-standardize both
/// sides first when raw units are wanted.
pub fn rmse(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    check_same_shape("rmse", pred, truth)?;
    let n = (pred.rows() * pred.cols()).max(1) as f64;
    let sum: f64 = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sum / n).sqrt())
}

/// Fraction of rows whose highest-probability class matches the label.
/// Ties resolve to the lowest class index.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels("accuracy", probs, labels)?;
    let correct = labels.iter().enumerate().filter(|&(i, &label)| argmax(probs.row(i)) == label).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean negative log probability of the labels, with probabilities floored
/// to keep confidently wrong predictions finite.
pub fn classification_nll(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels("classification_nll", probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| -probs.get(i, label).max(1e-300).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean negative log predictive density of a Gaussian mixture over weight
/// draws: for each row the density is the average of N(y; out_s, Σ) across
/// samples, combined by log-mean-exp. `log_std_sum` shifts the result into
/// raw units when the targets were standardized (the log-Jacobian of the
/// per-column scaling).
pub fn regression_nll(samples: &[Matrix], noise: &Matrix, truth: &Matrix, log_std_sum: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("regression_nll needs at least one output sample".into()));
    }
    for s in samples {
        check_same_shape("regression_nll", s, truth)?;
    }
    let dy = truth.cols();
    if noise.rows() != dy || noise.cols() != dy {
        return Err(Error::Shape {
            context: "regression_nll",
            detail: format!("noise covariance {}x{} for {dy} outputs", noise.rows(), noise.cols()),
        });
    }
    let chol = cholesky(noise, 0.0)?;
    let norm = -0.5 * (dy as f64 * (2.0 * std::f64::consts::PI).ln() + chol.logdet());
    let n = truth.rows();
    let s_count = samples.len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let mut log_terms = Vec::with_capacity(samples.len());
        for s in samples {
            let r = Matrix::from_fn(dy, 1, |j, _| truth.get(i, j) - s.get(i, j));
            let half = chol.half_solve_mat(&r);
            let quad: f64 = half.data().iter().map(|v| v * v).sum();
            log_terms.push(norm - 0.5 * quad);
        }
        let max = log_terms.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max + log_terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += -(lse - s_count.ln());
    }
    Ok(total / n as f64 + log_std_sum)
}

/// Expected calibration error with equal-width confidence bins on the
/// maximum class probability, each bin weighted by its share of examples.
pub fn ece(probs: &Matrix, labels: &[usize], n_bins: usize) -> Result<f64> {
    check_labels("ece", probs, labels)?;
    if n_bins == 0 {
        return Err(Error::InvalidConfig("ece needs at least one bin".into()));
    }
    let mut bin_conf = vec![0.0; n_bins];
    let mut bin_acc = vec![0.0; n_bins];
    let mut bin_count = vec![0usize; n_bins];
    for (i, &label) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let conf = row[pred];
        let bin = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        bin_conf[bin] += conf;
        bin_acc[bin] += f64::from(pred == label);
        bin_count[bin] += 1;
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        if bin_count[b] == 0 {
            continue;
        }
        let c = bin_count[b] as f64;
        total += (c / n) * (bin_acc[b] / c - bin_conf[b] / c).abs();
    }
    Ok(total)
}

/// Area under the ROC curve via the rank statistic, with tied scores
/// assigned their average rank. Labels are true for the positive class.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            context: "auc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidConfig(format!(
            "auc needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("auc scores must not contain NaN"));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; every member of a tie group gets the average.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC points (false-positive rate, true-positive rate) swept from the
/// highest threshold down, one point per distinct score, ending at (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            context: "roc_curve",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidConfig(format!(
            "roc_curve needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("roc scores must not contain NaN"));
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn check_same_shape(context: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape {
            context,
            detail: format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        });
    }
    if a.rows() == 0 {
        return Err(Error::EmptyDataset(format!("{context} needs at least one row")));
    }
    Ok(())
}

fn check_labels(context: &'static str, probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::Shape {
            context,
            detail: format!("{} probability rows vs {} labels", probs.rows(), labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(format!("{context} needs at least one example")));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= probs.cols()) {
        return Err(Error::InvalidLabel { label, classes: probs.cols() });
    }
    Ok(())
}
