//! Out-of-sample metrics and the paired signed-rank test.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::stats::normal_cdf;

/// Exact enumeration is used up to this many nonzero differences.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the test rows carry no demand.
    pub nv_cost: Option<f64>,
    /// `None` when the test rows carry no optimal quantity.
    pub rmse_q: Option<f64>,
    pub service_level: Option<f64>,
    pub service_gap: Option<f64>,
    /// Per-row `|y - Q*|`, present together with `rmse_q`.
    pub abs_errors: Option<Vec<f64>>,
    pub fit_seconds: f64,
}

fn check_len(test: &Dataset, predictions: &[f64]) -> Result<()> {
    if test.len() != predictions.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} test rows",
            predictions.len(),
            test.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    Ok(())
}

fn demands(test: &Dataset) -> Result<Vec<f64>> {
    test.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.demand
                .ok_or_else(|| Error::Evaluation(format!("test row {i} has no demand")))
        })
        .collect()
}

/// Mean of `alpha (d - y)^+ + (1 - alpha)(y - d)^+`.
pub fn nv_cost(test: &Dataset, predictions: &[f64], alpha: f64) -> Result<f64> {
    check_len(test, predictions)?;
    let d = demands(test)?;
    let total: f64 = d
        .iter()
        .zip(predictions)
        .map(|(&d, &y)| alpha * (d - y).max(0.0) + (1.0 - alpha) * (y - d).max(0.0))
        .sum();
    Ok(total / d.len() as f64)
}

fn abs_errors(test: &Dataset, predictions: &[f64]) -> Result<Vec<f64>> {
    check_len(test, predictions)?;
    test.rows
        .iter()
        .zip(predictions)
        .map(|(r, y)| {
            r.q_star.map(|q| (q - y).abs()).ok_or_else(|| {
                Error::Evaluation(
                    "RMSE against Q* requires the generative model; the test rows carry no q_star"
                        .into(),
                )
            })
        })
        .collect()
}

/// Root-mean-square distance to the distribution-optimal quantity.
pub fn rmse_q(test: &Dataset, predictions: &[f64]) -> Result<f64> {
    let e = abs_errors(test, predictions)?;
    Ok((e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt())
}

/// Fraction of rows where the decision strictly exceeds demand.
pub fn service_level(test: &Dataset, predictions: &[f64]) -> Result<f64> {
    check_len(test, predictions)?;
    let d = demands(test)?;
    let over = d.iter().zip(predictions).filter(|(d, y)| y > d).count();
    Ok(over as f64 / d.len() as f64)
}

pub fn savings_percent(cost_base: f64, cost_new: f64) -> Result<f64> {
    if !(cost_base > 0.0) {
        return Err(Error::Evaluation(format!(
            "baseline cost must be positive, got {cost_base}"
        )));
    }
    Ok(100.0 * (cost_base - cost_new) / cost_base)
}

/// All metrics that the test rows support. Predictions and test rows must be in
/// the same (original) units.
pub fn evaluate(test: &Dataset, predictions: &[f64], alpha: f64, fit_seconds: f64) -> Result<EvalReport> {
    check_len(test, predictions)?;
    let has_demand = test.rows.iter().all(|r| r.demand.is_some());
    let has_q = test.rows.iter().all(|r| r.q_star.is_some());
    let (nv, sl) = if has_demand {
        (
            Some(nv_cost(test, predictions, alpha)?),
            Some(service_level(test, predictions)?),
        )
    } else {
        (None, None)
    };
    let errs = if has_q {
        Some(abs_errors(test, predictions)?)
    } else {
        None
    };
    let rmse = errs
        .as_ref()
        .map(|e| (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt());
    Ok(EvalReport {
        nv_cost: nv,
        rmse_q: rmse,
        service_level: sl,
        service_gap: sl.map(|s| (s - alpha).abs()),
        abs_errors: errs,
        fit_seconds,
    })
}

/// Inclusive linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(q1, median, q3)` by inclusive linear interpolation.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::Evaluation("quartiles of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Evaluation("quartiles of a sample containing NaN".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok((
        quantile_sorted(&v, 0.25),
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.75),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub median_diff: f64,
    pub q1_diff: f64,
    pub q3_diff: f64,
    /// Number of nonzero differences.
    pub n_effective: usize,
    /// All differences were zero.
    pub degenerate: bool,
    pub exact: bool,
}

/// Average ranks of `values` (1-based), plus the tie-group sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided exact p-value of `min(W+, W-) <= stat` under random signs, for
/// ranks given in doubled (integer) units.
fn exact_p(doubled_ranks: &[usize], doubled_stat: usize) -> f64 {
    let total: usize = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled_ranks {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(doubled_ranks.len() as i32);
    let tail: f64 = counts[..=doubled_stat.min(total)].iter().sum();
    (2.0 * tail / all).min(1.0)
}

/// Two-sided paired signed-rank test on `a - b`.
///
/// Zero differences are dropped and tied magnitudes share their average rank.
/// Up to [`EXACT_MAX_N`] nonzero differences the p-value is exact; above that a
/// tie- and continuity-corrected normal approximation is used.
pub fn wilcoxon_paired(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Evaluation(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Evaluation("paired samples are empty".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Evaluation("non-finite paired difference".into()));
    }
    let (q1, med, q3) = quartiles(&diffs)?;
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            statistic: 0.0,
            p_value: 1.0,
            median_diff: med,
            q1_diff: q1,
            q3_diff: q3,
            n_effective: 0,
            degenerate: true,
            exact: true,
        });
    }
    let (ranks, ties, stat) = signed_rank(&nz);
    let (p, exact) = if n <= EXACT_MAX_N {
        (exact_from_ranks(&ranks, stat), true)
    } else {
        (normal_from_ties(n, &ties, stat), false)
    };
    Ok(WilcoxonResult {
        statistic: stat,
        p_value: p,
        median_diff: med,
        q1_diff: q1,
        q3_diff: q3,
        n_effective: n,
        degenerate: false,
        exact,
    })
}

/// Ranks, tie-group sizes and `min(W+, W-)` for nonzero differences.
fn signed_rank(nz: &[f64]) -> (Vec<f64>, Vec<usize>, f64) {
    let mags: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&mags);
    let w_plus: f64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (nz.len() * (nz.len() + 1)) as f64 / 2.0;
    (ranks, ties, w_plus.min(total - w_plus))
}

fn exact_from_ranks(ranks: &[f64], stat: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    exact_p(&doubled, (2.0 * stat).round() as usize)
}

fn normal_from_ties(n: usize, ties: &[usize], stat: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_adj: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj;
    let d = stat - mean;
    let corrected = if d == 0.0 { 0.0 } else { d - 0.5 * d.signum() };
    (2.0 * normal_cdf(-(corrected / var.sqrt()).abs())).min(1.0)
}

/// Normal-approximation p-value regardless of `n`.
pub fn wilcoxon_normal_p(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return 1.0;
    }
    let (_, ties, stat) = signed_rank(&nz);
    normal_from_ties(nz.len(), &ties, stat)
}

/// Exact p-value regardless of `n`.
pub fn wilcoxon_exact_p(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return 1.0;
    }
    let (ranks, _, stat) = signed_rank(&nz);
    exact_from_ranks(&ranks, stat)
}
