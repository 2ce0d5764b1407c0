//! Stability and generalization constants of the eps-nv learners, and
//! empirical probes that compare measured quantities against them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Row};
use crate::error::{Error, Result};
use crate::linear::{fit_lp_with_cap, LinearModel, DEFAULT_LP_CAP};
use crate::loss::LossSpec;
use crate::train::rng_for;

fn lip_and_floor(alpha: f64) -> (f64, f64) {
    (alpha.max(1.0 - alpha), alpha.min(1.0 - alpha))
}

/// Uniform stability parameter of the LP-trained linear learner,
/// `(p / n) * max(a, 1-a)^2 / min(a, 1-a) * (d_max + eps2)`.
pub fn stability_parameter(p: usize, n: usize, alpha: f64, d_max: f64, eps2: f64) -> f64 {
    let (hi, lo) = lip_and_floor(alpha);
    p as f64 / n as f64 * hi * hi / lo * (d_max + eps2)
}

/// Upper bound on `true risk - empirical risk` that holds with probability
/// `1 - delta` for the unregularized linear learner.
pub fn linear_generalization_bound(
    p: usize,
    n: usize,
    alpha: f64,
    d_max: f64,
    eps2: f64,
    delta: f64,
) -> f64 {
    let (hi, lo) = lip_and_floor(alpha);
    let ratio = hi / lo;
    let pf = p as f64;
    let nf = n as f64;
    let rel = 2.0 * pf / nf * ratio + (4.0 * pf * ratio + 1.0) * ((1.0 / delta).ln() / (2.0 * nf)).sqrt();
    hi * (d_max + eps2) * rel
}

/// The bracket multiplying `c` in the network generalization bound:
/// `max^2 (eta sqrt(nK) + 2 K eta) log n log(n / rho) + max d_max sqrt(log(1/rho) / n)`.
pub fn network_bound_shape(alpha: f64, eta: f64, n: usize, k_passes: usize, d_max: f64, rho: f64) -> f64 {
    let hi = alpha.max(1.0 - alpha);
    let nf = n as f64;
    let kf = k_passes as f64;
    hi * hi * (eta * (nf * kf).sqrt() + 2.0 * kf * eta) * nf.ln() * (nf / rho).ln()
        + hi * d_max * ((1.0 / rho).ln() / nf).sqrt()
}

/// Smallest `c` for which the network bound covers `gap` on a pilot run.
pub fn calibrate_network_constant(gap: f64, shape: f64) -> Result<f64> {
    if !(shape > 0.0) {
        return Err(Error::Config(format!("bound shape must be positive, got {shape}")));
    }
    Ok(gap.abs() / shape)
}

/// Coefficients of the [`unit_instance`] family for `seed`.
fn unit_beta(p: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed ^ 0x0B57_AB1E);
    (0..p)
        .map(|j| if j == 0 { 0.3 } else { rng.random_range(0.0..0.6) / p as f64 })
        .collect()
}

fn unit_rows(beta: &[f64], n: usize, rng: &mut impl Rng) -> Vec<Row> {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..beta.len())
                .map(|j| if j == 0 { 1.0 } else { rng.random_range(0.0..1.0) })
                .collect();
            let mean: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
            let s = (mean + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0);
            Row::plain(x, s)
        })
        .collect()
}

/// Random linear instance with features in `[0, 1]` (first column constant)
/// and targets clipped to `[0, 1]`, so that `d_max = 1`.
pub fn unit_instance(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    if p < 1 || n < 2 {
        return Err(Error::Config("unit instance needs p >= 1 and n >= 2".into()));
    }
    let beta = unit_beta(p, seed);
    Dataset::new(unit_rows(&beta, n, &mut rng_for(seed)))
}

/// Fresh rows from the same distribution as `unit_instance(_, p, seed)`.
pub fn unit_holdout(m: usize, p: usize, seed: u64) -> Result<Dataset> {
    let beta = unit_beta(p, seed);
    Dataset::new(unit_rows(&beta, m, &mut rng_for(seed ^ 0xF00D_F00D)))
}

/// Probe points `(x, s)`: a 20 x 10 grid over `[0, 1]^2` when `p == 2`,
/// otherwise 200 uniform draws over `[0, 1]^(p-1) x [0, 1]`.
pub fn probe_points(p: usize, seed: u64) -> Vec<Row> {
    let mut out = Vec::with_capacity(200);
    if p == 2 {
        for i in 0..20 {
            for j in 0..10 {
                out.push(Row::plain(vec![1.0, i as f64 / 19.0], j as f64 / 9.0));
            }
        }
        return out;
    }
    let mut rng = rng_for(seed ^ 0xA5A5_A5A5);
    for _ in 0..200 {
        let x: Vec<f64> = (0..p).map(|j| if j == 0 { 1.0 } else { rng.random_range(0.0..1.0) }).collect();
        out.push(Row::plain(x, rng.random_range(0.0..1.0)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    /// `sup_{i, z} |L(A_S, z) - L(A_{S \ i}, z)|`.
    pub sup_loo: f64,
    pub xi: f64,
    pub pass: bool,
}

/// Leave-one-out supremum of the per-point loss change over `probes`.
pub fn leave_one_out_sup(dataset: &Dataset, spec: &LossSpec, probes: &[Row]) -> Result<f64> {
    let full = fit_lp_with_cap(dataset, spec, DEFAULT_LP_CAP)?;
    let base: Vec<f64> = probe_losses(&full, spec, probes)?;
    let mut sup: f64 = 0.0;
    for i in 0..dataset.len() {
        let idx: Vec<usize> = (0..dataset.len()).filter(|&k| k != i).collect();
        let model = fit_lp_with_cap(&dataset.subset(&idx), spec, DEFAULT_LP_CAP)?;
        for (l, b) in probe_losses(&model, spec, probes)?.iter().zip(&base) {
            sup = sup.max((l - b).abs());
        }
    }
    Ok(sup)
}

fn probe_losses(model: &LinearModel, spec: &LossSpec, probes: &[Row]) -> Result<Vec<f64>> {
    probes
        .iter()
        .map(|z| Ok(spec.eval(z.sale, model.predict(&z.features)?).value))
        .collect()
}

/// One stability instance on [`unit_instance`] data.
pub fn stability_probe(n: usize, p: usize, spec: &LossSpec, seed: u64) -> Result<StabilityRecord> {
    let data = unit_instance(n, p, seed)?;
    let probes = probe_points(p, seed);
    let sup_loo = leave_one_out_sup(&data, spec, &probes)?;
    let xi = stability_parameter(p, n, spec.alpha, 1.0, spec.eps2);
    Ok(StabilityRecord {
        n,
        p,
        seed,
        sup_loo,
        xi,
        pass: sup_loo <= xi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRecord {
    pub n: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Gap between held-out and training eps-nv loss of the LP-trained linear
/// learner on [`unit_instance`] data, against the bound at confidence `delta`.
pub fn generalization_probe(
    n: usize,
    p: usize,
    spec: &LossSpec,
    seed: u64,
    holdout: usize,
    delta: f64,
) -> Result<GeneralizationRecord> {
    let train = unit_instance(n, p, seed)?;
    let test = unit_holdout(holdout, p, seed)?;
    let model = fit_lp_with_cap(&train, spec, DEFAULT_LP_CAP)?;
    let train_loss = crate::linear::dataset_loss(&model, &train, spec);
    let test_loss = crate::linear::dataset_loss(&model, &test, spec);
    let bound = linear_generalization_bound(p, n, spec.alpha, 1.0, spec.eps2, delta);
    Ok(GeneralizationRecord {
        n,
        seed,
        train_loss,
        test_loss,
        bound,
        pass: test_loss - train_loss <= bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UasRecord {
    pub seed: u64,
    pub swap_index: usize,
    pub distance: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Parameter distance of `k_passes`-pass SGD networks after swapping one row
/// of a [`unit_instance`] for a fresh draw, over `swaps` random indices.
#[allow(clippy::too_many_arguments)]
pub fn uas_records(
    n: usize,
    p: usize,
    arch_hidden: (usize, usize),
    spec: &LossSpec,
    eta: f64,
    k_passes: usize,
    seed: u64,
    swaps: usize,
) -> Result<Vec<UasRecord>> {
    let data = unit_instance(n, p, seed)?;
    let fresh = unit_holdout(swaps, p, seed)?;
    let arch = [p, arch_hidden.0, arch_hidden.1, 1];
    let config = crate::train::TrainConfig {
        eta,
        batch_size: 1,
        seed,
        ..crate::train::TrainConfig::default()
    };
    let bound = crate::nn::uas_bound(spec.alpha, eta, n, k_passes);
    let mut rng = rng_for(seed ^ 0x5A5A);
    (0..swaps)
        .map(|k| {
            let swap_index = rng.random_range(0..n);
            let distance = crate::nn::uas_probe(
                &data,
                spec,
                &arch,
                &config,
                swap_index,
                Some(&fresh.rows[k]),
                k_passes,
            )?;
            Ok(UasRecord {
                seed,
                swap_index,
                distance,
                bound,
                pass: distance <= bound,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stability_parameter_example() {
        let xi = stability_parameter(5, 100, 0.55, 1.0, 0.0022);
        assert_abs_diff_eq!(xi, 0.05 * 0.55 * 0.55 / 0.45 * 1.0022, epsilon = 1e-15);
        assert_abs_diff_eq!(xi, 0.03369, epsilon = 1e-5);
        assert_abs_diff_eq!(stability_parameter(5, 200, 0.55, 1.0, 0.0022), xi / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn generalization_bound_shrinks_with_n() {
        let a = linear_generalization_bound(3, 100, 0.75, 1.0, 0.01, 0.05);
        let b = linear_generalization_bound(3, 400, 0.75, 1.0, 0.01, 0.05);
        assert!(b < a && b > 0.0);
    }

    #[test]
    fn calibrated_constant_reproduces_gap() {
        let shape = network_bound_shape(0.85, 1e-3, 100, 3, 1.0, 0.05);
        let c = calibrate_network_constant(0.02, shape).unwrap();
        assert_abs_diff_eq!(c * shape, 0.02, epsilon = 1e-15);
        assert!(calibrate_network_constant(0.02, 0.0).is_err());
    }

    #[test]
    fn unit_instance_is_bounded() {
        let d = unit_instance(80, 3, 4).unwrap();
        assert!(d.rows.iter().all(|r| (0.0..=1.0).contains(&r.sale)));
        assert!(d.rows.iter().all(|r| r.features[0] == 1.0));
        assert_eq!(probe_points(2, 0).len(), 200);
        assert_eq!(probe_points(4, 0).len(), 200);
    }
}
