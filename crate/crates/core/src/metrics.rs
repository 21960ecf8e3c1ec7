//! Distribution-matching evaluation: IoU distance, generalized energy
//! distance (GED²) with its overlap/diversity decomposition, summary
//! statistics, and the Wilcoxon signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Intersection over union of two binary masks; both-empty counts as
/// perfect agreement (IoU 1).
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "masks differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// IoU distance `1 - IoU`.
pub fn mask_distance(a: &[bool], b: &[bool]) -> Result<f64> {
    Ok(1.0 - iou(a, b)?)
}

/// Squared generalized energy distance between a set of predicted masks and
/// a set of reference masks, with its decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct GedReport {
    /// `cross - pred_diversity - label_diversity`; may be slightly negative
    /// (finite-sample estimator) and is reported raw.
    pub ged_squared: f64,
    /// `2 E[d(S, Y)]` over all prediction/label pairs.
    pub cross: f64,
    /// `E[d(S, S')]` over ordered distinct prediction pairs.
    pub pred_diversity: f64,
    /// `E[d(Y, Y')]` over ordered distinct label pairs; 0 for a single label.
    pub label_diversity: f64,
    pub n_pred: usize,
    pub n_label: usize,
}

pub fn ged(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<GedReport> {
    if preds.len() < 2 {
        return Err(Error::data(format!(
            "prediction diversity needs at least 2 samples, got {}",
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::data("at least one reference mask required".to_string()));
    }
    let cross = 2.0 * mean_distance(preds, labels)?;
    let pred_diversity = mask_set_diversity(preds)?;
    let label_diversity = mask_set_diversity(labels)?;
    Ok(GedReport {
        ged_squared: cross - pred_diversity - label_diversity,
        cross,
        pred_diversity,
        label_diversity,
        n_pred: preds.len(),
        n_label: labels.len(),
    })
}

/// Mean pairwise distance across two mask sets: `E[d(S, Y)]`.
pub fn mean_distance(a: &[Vec<bool>], b: &[Vec<bool>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("mean distance needs at least one mask per set".to_string()));
    }
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += mask_distance(x, y)?;
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// Mean distance over ordered distinct pairs within one set; 0 for a single
/// mask.
pub fn mask_set_diversity(masks: &[Vec<bool>]) -> Result<f64> {
    let n = masks.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += mask_distance(&masks[i], &masks[j])?;
            }
        }
    }
    Ok(sum / (n * (n - 1)) as f64)
}

/// Mean, median, and Tukey hinges of a value list.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::data("cannot summarize an empty value list".to_string()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("metric values are comparable"));
    let n = sorted.len();
    // Tukey hinges: the halves share the middle element when n is odd
    let lower = &sorted[..n.div_ceil(2)];
    let upper = &sorted[n / 2..];
    Ok(Summary {
        count: n,
        mean: sorted.iter().sum::<f64>() / n as f64,
        median: median_of(&sorted),
        q1: median_of(lower),
        q3: median_of(upper),
    })
}

fn median_of(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Group values by label and summarize each group; groups come out sorted
/// by label for deterministic reporting.
pub fn summarize_grouped(pairs: &[(String, f64)]) -> Vec<(String, Summary)> {
    let mut labels: Vec<&String> = pairs.iter().map(|(g, _)| g).collect();
    labels.sort();
    labels.dedup();
    labels
        .into_iter()
        .map(|label| {
            let values: Vec<f64> = pairs
                .iter()
                .filter(|(g, _)| g == label)
                .map(|(_, v)| *v)
                .collect();
            let summary = summarize(&values).expect("group is non-empty by construction");
            (label.clone(), summary)
        })
        .collect()
}

/// Per-sample metric values for two methods over the same samples.
#[derive(Debug, Clone)]
pub struct PairedMetricSeries {
    ids: Vec<String>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PairedMetricSeries {
    pub fn new(ids: Vec<String>, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if ids.len() != a.len() || a.len() != b.len() {
            return Err(Error::data(format!(
                "paired series lengths disagree: {} ids, {} vs {} values",
                ids.len(),
                a.len(),
                b.len()
            )));
        }
        if ids.is_empty() {
            return Err(Error::data("paired series must not be empty".to_string()));
        }
        Ok(PairedMetricSeries { ids, a, b })
    }

    /// Pairs two evaluation runs; the sample ids must match exactly
    /// (same set, same order).
    pub fn from_runs(run_a: &[(String, f64)], run_b: &[(String, f64)]) -> Result<Self> {
        if run_a.len() != run_b.len() {
            return Err(Error::data(format!(
                "runs cover {} vs {} samples",
                run_a.len(),
                run_b.len()
            )));
        }
        for ((ia, _), (ib, _)) in run_a.iter().zip(run_b) {
            if ia != ib {
                return Err(Error::data(format!(
                    "sample ids misaligned: {ia} vs {ib}"
                )));
            }
        }
        PairedMetricSeries::new(
            run_a.iter().map(|(i, _)| i.clone()).collect(),
            run_a.iter().map(|(_, v)| *v).collect(),
            run_b.iter().map(|(_, v)| *v).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(x, y)| x - y).collect()
    }

    pub fn swapped(&self) -> Self {
        PairedMetricSeries {
            ids: self.ids.clone(),
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact null distribution by enumerating all sign assignments.
    Exact,
    /// Normal approximation with continuity and tie corrections.
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonTest {
    /// Sum of ranks of positive differences (W+).
    pub statistic: f64,
    /// Two-sided p-value in (0, 1].
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_used: usize,
    pub method: WilcoxonMethod,
}

/// Largest n for which the exact 2^n enumeration is used.
const WILCOXON_EXACT_LIMIT: usize = 12;
/// Smallest usable number of nonzero differences.
const WILCOXON_MIN_N: usize = 5;

/// Two-sided Wilcoxon signed-rank test on paired per-sample metrics.
/// Zero differences are dropped; tied magnitudes share average ranks.
/// Identical series are a defined result (p = 1.0); otherwise fewer than
/// 5 nonzero differences is an error.
pub fn wilcoxon_signed_rank(series: &PairedMetricSeries) -> Result<WilcoxonTest> {
    let diffs: Vec<f64> = series
        .differences()
        .into_iter()
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonTest {
            statistic: 0.0,
            p_value: 1.0,
            n_used: 0,
            method: WilcoxonMethod::Exact,
        });
    }
    if n < WILCOXON_MIN_N {
        return Err(Error::data(format!(
            "wilcoxon needs at least {WILCOXON_MIN_N} nonzero differences, got {n}"
        )));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    // + 0.0 turns the empty sum's -0.0 into a plain zero
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum::<f64>()
        + 0.0;
    let (p_value, method) = if n <= WILCOXON_EXACT_LIMIT {
        (exact_two_sided_p(&ranks, w_plus), WilcoxonMethod::Exact)
    } else {
        (normal_two_sided_p(&ranks, w_plus, n), WilcoxonMethod::NormalApprox)
    };
    Ok(WilcoxonTest {
        statistic: w_plus,
        p_value,
        n_used: n,
        method,
    })
}

/// 1-based ranks of `values`, ties sharing the average of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite metric values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p by enumerating all 2^n sign assignments of the ranks.
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len();
    let total = 1u64 << n;
    let mut le = 0u64;
    let mut ge = 0u64;
    const EPS: f64 = 1e-9;
    for assignment in 0..total {
        let mut w = 0.0;
        for (bit, r) in ranks.iter().enumerate() {
            if assignment >> bit & 1 == 1 {
                w += r;
            }
        }
        if w <= w_plus + EPS {
            le += 1;
        }
        if w >= w_plus - EPS {
            ge += 1;
        }
    }
    let tail = le.min(ge) as f64 / total as f64;
    (2.0 * tail).min(1.0)
}

/// Normal approximation with continuity correction; the variance drops by
/// `sum(t^3 - t)/48` per tie group of size `t`.
fn normal_two_sided_p(ranks: &[f64], w_plus: f64, n: usize) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    if var <= 0.0 {
        // every difference tied at the same magnitude both ways; no evidence
        return 1.0;
    }
    let centered = w_plus - mean;
    let corrected = centered - 0.5 * centered.signum();
    let z = corrected / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let p = 2.0 * (1.0 - normal.cdf(z.abs()));
    p.clamp(f64::MIN_POSITIVE, 1.0)
}
