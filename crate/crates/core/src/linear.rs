//! Linear decision rules `y = x'theta`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{LossKind, LossSpec};
use crate::lp::{self, LpStatus};
use crate::train::{partition, rng_for, EarlyStopping, StopReason, TrainConfig, TrainTrace, Verdict};

/// Largest dataset [`fit_lp`] accepts by default.
pub const DEFAULT_LP_CAP: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `theta[0]` multiplies the constant feature.
    pub theta: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(p: usize) -> Self {
        LinearModel { theta: vec![0.0; p] }
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.theta.len() {
            return Err(Error::Dimension {
                expected: self.theta.len(),
                got: features.len(),
            });
        }
        Ok(dot(&self.theta, features))
    }

    pub fn predict_all(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        dataset.rows.iter().map(|r| self.predict(&r.features)).collect()
    }

    /// `p` followed by the coefficients, 17 significant digits each.
    pub fn to_text(&self) -> String {
        let mut out = self.theta.len().to_string();
        for v in &self.theta {
            out.push(' ');
            out.push_str(&format!("{v:.16e}"));
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut toks = text.split_whitespace();
        let bad = |msg: String| Error::Parse { row: 1, msg };
        let p: usize = toks
            .next()
            .ok_or_else(|| bad("empty model record".into()))?
            .parse()
            .map_err(|_| bad("first token must be the coefficient count".into()))?;
        let theta = toks
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("non-numeric coefficient `{t}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if theta.len() != p {
            return Err(bad(format!("expected {p} coefficients, found {}", theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(bad("coefficients must be finite".into()));
        }
        Ok(LinearModel { theta })
    }
}

/// `y = x'theta`.
pub fn predict(model: &LinearModel, features: &[f64]) -> Result<f64> {
    model.predict(features)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_loss(theta: &[f64], dataset: &Dataset, idx: &[usize], spec: &LossSpec) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let row = &dataset.rows[i];
            spec.eval(row.sale, dot(theta, &row.features)).value
        })
        .sum();
    total / idx.len() as f64
}

/// Mean loss of a linear model over a whole dataset (sales as targets).
pub fn dataset_loss(model: &LinearModel, dataset: &Dataset, spec: &LossSpec) -> f64 {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    mean_loss(&model.theta, dataset, &idx, spec)
}

/// Mini-batch (sub)gradient descent from `theta = 0`.
///
/// Each step applies `theta -= eta/|B| * sum_B dL/dy * x  +  eta * 2 lambda theta`
/// (intercept excluded from the penalty). Rows are split into train and
/// validation partitions; the parameters with the best validation loss are
/// returned.
pub fn fit_gd(
    dataset: &Dataset,
    spec: &LossSpec,
    config: &TrainConfig,
) -> Result<(LinearModel, TrainTrace)> {
    let start = Instant::now();
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let p = dataset.dim()?;
    let mut rng = rng_for(config.seed);
    let part = partition(dataset.len(), config, &mut rng);
    config.validate(part.train.len())?;

    let mut theta = vec![0.0; p];
    let mut best = theta.clone();
    let mut trace = TrainTrace::empty();
    let mut stopper = EarlyStopping::new(config, mean_loss(&theta, dataset, &part.val, spec));
    let mut grad = vec![0.0; p];

    for epoch in 1..=config.max_epochs {
        for batch in part.train.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let row = &dataset.rows[i];
                let d = spec.eval(row.sale, dot(&theta, &row.features)).subgrad;
                if d != 0.0 {
                    for (g, x) in grad.iter_mut().zip(&row.features) {
                        *g += d * x;
                    }
                }
            }
            let scale = config.eta / batch.len() as f64;
            for (j, (t, g)) in theta.iter_mut().zip(&grad).enumerate() {
                let decay = if j > 0 { 2.0 * config.lambda * *t } else { 0.0 };
                *t -= scale * g + config.eta * decay;
            }
        }
        let train_loss = mean_loss(&theta, dataset, &part.train, spec);
        let val_loss = mean_loss(&theta, dataset, &part.val, spec);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: None });
        }
        trace.train_loss.push(train_loss);
        trace.val_loss.push(val_loss);
        match stopper.observe(val_loss) {
            Verdict::Improved => {
                best.copy_from_slice(&theta);
                trace.best_epoch = epoch;
            }
            Verdict::Continue => {}
            Verdict::ImprovedAndStop(reason) => {
                best.copy_from_slice(&theta);
                trace.best_epoch = epoch;
                trace.stop_reason = reason;
                break;
            }
            Verdict::Stop(reason) => {
                trace.stop_reason = reason;
                break;
            }
        }
        if epoch == config.max_epochs {
            trace.stop_reason = StopReason::MaxEpochs;
        }
    }
    trace.fit_seconds = start.elapsed().as_secs_f64();
    Ok((LinearModel { theta: best }, trace))
}

/// Ordinary least squares via a Householder QR factorisation.
pub fn fit_mse_closed_form(dataset: &Dataset) -> Result<LinearModel> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot fit an empty dataset".into()));
    }
    let p = dataset.dim()?;
    let n = dataset.len();
    if n < p {
        return Err(Error::RankDeficient(f64::INFINITY));
    }
    let x = DMatrix::from_fn(n, p, |i, j| dataset.rows[i].features[j]);
    let s = DVector::from_iterator(n, dataset.rows.iter().map(|r| r.sale));
    let qr = x.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..p).map(|j| r[(j, j)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond < 1e12) {
        return Err(Error::RankDeficient(cond));
    }
    let qts = qr.q().transpose() * s;
    let theta = r
        .solve_upper_triangular(&qts)
        .ok_or(Error::RankDeficient(cond))?;
    Ok(LinearModel {
        theta: theta.iter().copied().collect(),
    })
}

/// Exact eps-nv minimiser through the LP oracle, for datasets up to `cap` rows.
pub fn fit_lp_with_cap(dataset: &Dataset, spec: &LossSpec, cap: usize) -> Result<LinearModel> {
    if spec.kind != LossKind::EpsNv {
        return Err(Error::Config("fit_lp requires an eps-nv loss".into()));
    }
    if dataset.len() > cap {
        return Err(Error::Capacity {
            rows: dataset.len(),
            cap,
        });
    }
    let lp = lp::build_eps_nv_lp(dataset, spec)?;
    let p = dataset.dim()?;
    let sol = lp::solve_simplex(&lp, lp::default_max_iters(&lp))?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(sol.status));
    }
    Ok(LinearModel {
        theta: (0..p).map(|j| sol.x[j] - sol.x[p + j]).collect(),
    })
}

pub fn fit_lp(dataset: &Dataset, spec: &LossSpec) -> Result<LinearModel> {
    fit_lp_with_cap(dataset, spec, DEFAULT_LP_CAP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn predict_examples() {
        assert_eq!(LinearModel::zeros(3).predict(&[1.0, 5.0, -2.0]).unwrap(), 0.0);
        let m = LinearModel { theta: vec![1.0, 2.0] };
        assert_eq!(predict(&m, &[1.0, 3.0]).unwrap(), 7.0);
        let e1 = LinearModel { theta: vec![1.0, 0.0, 0.0] };
        assert_eq!(e1.predict(&[1.0, 9.0, 4.0]).unwrap(), 1.0);
        assert!(m.predict(&[1.0]).is_err());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let m = LinearModel {
            theta: vec![0.1, -1.0 / 3.0, 1e-300, 123456.789],
        };
        let back = LinearModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert!(LinearModel::from_text("3 1 2").is_err());
    }

    #[test]
    fn ols_constant_target() {
        let ds = Dataset::from_xy(vec![vec![1.0]; 10], vec![5.0; 10]).unwrap();
        let m = fit_mse_closed_form(&ds).unwrap();
        assert_abs_diff_eq!(m.theta[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn ols_exact_linear_data() {
        let beta = [0.5, -2.0, 3.0];
        let xs: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![1.0, (i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()])
            .collect();
        let ys = xs.iter().map(|x| dot(x, &beta)).collect();
        let m = fit_mse_closed_form(&Dataset::from_xy(xs, ys).unwrap()).unwrap();
        for (t, b) in m.theta.iter().zip(beta) {
            assert_abs_diff_eq!(*t, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn ols_rejects_singular_design() {
        let xs = vec![vec![1.0, 2.0]; 5];
        let ds = Dataset::from_xy(xs, vec![1.0; 5]).unwrap();
        assert!(matches!(fit_mse_closed_form(&ds), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn gd_recovers_noiseless_slope() {
        let xs: Vec<Vec<f64>> = (0..200).map(|i| vec![1.0, i as f64 / 200.0]).collect();
        let ys = xs.iter().map(|x| 2.0 * x[1]).collect();
        let ds = Dataset::from_xy(xs, ys).unwrap();
        let cfg = TrainConfig {
            eta: 0.5,
            batch_size: 16,
            max_epochs: 2000,
            patience: 200,
            tolerance: 0.0,
            baseline: 1e-14,
            ..TrainConfig::default()
        };
        let (m, trace) = fit_gd(&ds, &LossSpec::mse(), &cfg).unwrap();
        assert_abs_diff_eq!(m.theta[1], 2.0, epsilon = 1e-3);
        assert!(trace.best_epoch > 0);
    }

    #[test]
    fn gd_nvc_median_lands_in_flat_region() {
        let xs = vec![vec![1.0]; 100];
        let ys = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { 3.0 }).collect();
        let ds = Dataset::from_xy(xs, ys).unwrap();
        let cfg = TrainConfig {
            eta: 0.05,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let (m, _) = fit_gd(&ds, &LossSpec::nvc(0.5).unwrap(), &cfg).unwrap();
        assert!(m.theta[0] >= 1.0 - 0.05 && m.theta[0] <= 3.0 + 0.05, "{:?}", m.theta);
    }

    #[test]
    fn gd_rejects_oversized_batch() {
        let ds = Dataset::from_xy(vec![vec![1.0]; 4], vec![1.0; 4]).unwrap();
        let cfg = TrainConfig {
            batch_size: 10,
            ..TrainConfig::default()
        };
        assert!(matches!(fit_gd(&ds, &LossSpec::mse(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn gd_reports_divergence() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![1.0, 1e3 * i as f64]).collect();
        let ys = (0..40).map(|i| i as f64).collect();
        let ds = Dataset::from_xy(xs, ys).unwrap();
        let cfg = TrainConfig {
            eta: 10.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert!(matches!(
            fit_gd(&ds, &LossSpec::mse(), &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn lp_cap_is_enforced() {
        let ds = Dataset::from_xy(vec![vec![1.0]; 5], vec![1.0; 5]).unwrap();
        let spec = LossSpec::eps_nv(0.5, 0.1, 0.0).unwrap();
        assert!(matches!(
            fit_lp_with_cap(&ds, &spec, 4),
            Err(Error::Capacity { rows: 5, cap: 4 })
        ));
        assert!(fit_lp(&ds, &LossSpec::nvc(0.5).unwrap()).is_err());
    }

    #[test]
    fn lp_intercept_only_is_a_sample_median() {
        let ys = vec![0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8];
        let ds = Dataset::from_xy(vec![vec![1.0]; ys.len()], ys.clone()).unwrap();
        let spec = LossSpec::eps_nv(0.5, 1e-9, 0.0).unwrap();
        let m = fit_lp(&ds, &spec).unwrap();
        let mut sorted = ys;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(m.theta[0], sorted[3], epsilon = 1e-6);
    }
}
