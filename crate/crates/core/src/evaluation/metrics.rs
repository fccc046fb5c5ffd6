use std::cmp::Ordering;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

fn check_scores(scores: &[f64], n_labels: usize) -> Result<()> {
    if scores.len() != n_labels {
        return Err(Error::dimension("metric inputs", format!("{n_labels} scores"), scores.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half (Mann-Whitney U over midranks).
pub fn binary_auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Sum of doubled midranks of positives keeps everything integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank doubled = i + j + 2
        let doubled_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        doubled_rank_sum += doubled_mid * pos_in_group;
        i = j + 1;
    }
    let p = n_pos as u64;
    // 2U = 2R - P(P+1)
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// Non-interpolated average precision: mean over positives of the precision
/// at each positive's rank. Descending scores, ties kept in input order.
pub fn binary_average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores(scores, labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "average precision needs both classes, got {n_pos} positive of {}",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// `targets[i][c]` is true when item `i` belongs to class `c`.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Vec<Vec<bool>> {
    labels
        .iter()
        .map(|&l| (0..n_classes).map(|c| c == l).collect())
        .collect()
}

fn per_class(
    scores: &[Vec<f64>],
    targets: &[Vec<bool>],
    metric: fn(&[f64], &[bool]) -> Result<f64>,
) -> Result<Vec<f64>> {
    if scores.len() != targets.len() {
        return Err(Error::dimension("macro metric", format!("{} rows", targets.len()), scores.len()));
    }
    let n_classes = targets.first().map_or(0, Vec::len);
    if n_classes == 0 {
        return Err(Error::UndefinedMetric("no classes".into()));
    }
    if scores.iter().any(|r| r.len() != n_classes) || targets.iter().any(|t| t.len() != n_classes)
    {
        return Err(Error::dimension("macro metric", format!("{n_classes} columns"), "ragged rows"));
    }
    (0..n_classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = targets.iter().map(|r| r[c]).collect();
            metric(&s, &l).map_err(|e| match e {
                Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("class {c}: {m}")),
                other => other,
            })
        })
        .collect()
}

/// One-vs-rest AUROC of every class.
pub fn per_class_auroc(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<Vec<f64>> {
    per_class(scores, targets, binary_auroc)
}

pub fn per_class_average_precision(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<Vec<f64>> {
    per_class(scores, targets, binary_average_precision)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unweighted mean of one-vs-rest AUROCs. Every class must have positives
/// and negatives.
pub fn macro_auroc(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<f64> {
    Ok(mean(&per_class_auroc(scores, targets)?))
}

pub fn macro_average_precision(scores: &[Vec<f64>], targets: &[Vec<bool>]) -> Result<f64> {
    Ok(mean(&per_class_average_precision(scores, targets)?))
}

/// Mean with a normal-approximation 95% interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub std_error: f64,
    pub low: f64,
    pub high: f64,
}

/// `mean ± 1.96 · s / √n` with the `n − 1` sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<ConfidenceInterval> {
    let n = values.len();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("confidence interval needs at least 2 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in confidence interval".into()));
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = var.sqrt() / (n as f64).sqrt();
    Ok(ConfidenceInterval {
        mean: m,
        std_error: se,
        low: m - 1.96 * se,
        high: m + 1.96 * se,
    })
}

fn sample_var(v: &[f64], m: f64) -> f64 {
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Variance indistinguishable from rounding noise in differences of
/// values of magnitude `scale`.
fn negligible(var: f64, scale: f64) -> bool {
    var.sqrt() <= 1e-12 * scale.max(f64::MIN_POSITIVE)
}

fn t_p_value(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// Two-sided t-test p-value: paired on differences, otherwise Welch's
/// unequal-variance test.
///
/// When the relevant variance is zero (up to rounding of the inputs) the
/// statistic is undefined; the convention is `p = 1` if the means agree and
/// `p = 0` otherwise.
pub fn two_sided_t_test(a: &[f64], b: &[f64], paired: bool) -> Result<f64> {
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in t-test".into()));
    }
    if paired {
        if a.len() != b.len() || a.len() < 2 {
            return Err(Error::UndefinedMetric(format!(
                "paired t-test needs two equal-length samples of at least 2, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let m = mean(&d);
        let var = sample_var(&d, m);
        let scale = a.iter().chain(b).fold(0.0f64, |acc, v| acc.max(v.abs()));
        if negligible(var, scale) {
            return Ok(if m == 0.0 { 1.0 } else { 0.0 });
        }
        let n = d.len() as f64;
        let t = m / (var / n).sqrt();
        Ok(t_p_value(t, n - 1.0))
    } else {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::UndefinedMetric(format!(
                "Welch t-test needs at least 2 values per sample, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let (ma, mb) = (mean(a), mean(b));
        let va = sample_var(a, ma) / a.len() as f64;
        let vb = sample_var(b, mb) / b.len() as f64;
        let se2 = va + vb;
        let scale = a.iter().chain(b).fold(0.0f64, |acc, v| acc.max(v.abs()));
        if negligible(se2, scale) {
            return Ok(if ma == mb { 1.0 } else { 0.0 });
        }
        let t = (ma - mb) / se2.sqrt();
        let df = se2 * se2
            / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
        Ok(t_p_value(t, df))
    }
}
