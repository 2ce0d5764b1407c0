//! Synthetic censored newsvendor data.
//!
//! Demand is linear in dummy-encoded product category, weekday and month plus
//! Gaussian noise. The historical order equals the deterministic part of
//! demand, and the recorded sale is the smaller of order and demand.

use chrono::{Datelike, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Row};
use crate::error::{Error, Result};
use crate::stats::normal_quantile;

pub const N_CATEGORIES: u8 = 9;
/// Category whose dummies are all zero.
pub const BASE_CATEGORY: u8 = 9;
pub const FEATURE_DIM: usize = 26;

/// Coefficients of the demand-generating linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemandModelParams {
    pub intercept: f64,
    /// Categories 1..=8; category 9 is the base.
    pub category_coefs: [f64; 8],
    /// Tuesday..Sunday; Monday is the base.
    pub weekday_coefs: [f64; 6],
    /// February..December; January is the base.
    pub month_coefs: [f64; 11],
    pub noise_mean: f64,
    pub noise_std: f64,
}

impl Default for DemandModelParams {
    fn default() -> Self {
        DemandModelParams {
            intercept: 113.40,
            category_coefs: [192.23, 151.66, -57.3, 51.56, 55.42, -76.14, 130.65, -106.29],
            weekday_coefs: [-3.64, -25.41, -29.90, -32.75, 21.15, 38.13],
            month_coefs: [
                -3.46, 1.57, 11.94, 7.88, -1.58, -13.21, -11.9, 1.96, -1.67, -3.48, 20.03,
            ],
            noise_mean: 0.0,
            noise_std: 46.57,
        }
    }
}

impl DemandModelParams {
    /// Coefficient vector aligned with [`encode_features`].
    pub fn beta(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(FEATURE_DIM);
        b.push(self.intercept);
        b.extend_from_slice(&self.category_coefs);
        b.extend_from_slice(&self.weekday_coefs);
        b.extend_from_slice(&self.month_coefs);
        b
    }

    /// Deterministic demand component `beta'x` for unscaled features.
    pub fn mean_demand(&self, features: &[f64]) -> Result<f64> {
        if features.len() != FEATURE_DIM {
            return Err(Error::Dimension {
                expected: FEATURE_DIM,
                got: features.len(),
            });
        }
        Ok(self.beta().iter().zip(features).map(|(b, x)| b * x).sum())
    }
}

/// Dummy encoding `[1, cat1..cat8, tue..sun, feb..dec]`.
pub fn encode_features(date: NaiveDate, category: u8) -> Vec<f64> {
    let mut x = vec![0.0; FEATURE_DIM];
    x[0] = 1.0;
    if (1..=8).contains(&category) {
        x[category as usize] = 1.0;
    }
    let wd = date.weekday().num_days_from_monday() as usize;
    if wd > 0 {
        x[8 + wd] = 1.0;
    }
    let month = date.month0() as usize;
    if month > 0 {
        x[14 + month] = 1.0;
    }
    x
}

pub fn calendar_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date")
}

pub fn calendar_end() -> NaiveDate {
    NaiveDate::from_ymd_opt(2017, 6, 30).expect("valid date")
}

/// Per-row generative components that are not part of a [`Row`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandDraw {
    /// `beta'x`.
    pub mean: f64,
    /// Raw Gaussian noise before truncation at zero.
    pub noise: f64,
    /// Historical order quantity.
    pub order: f64,
}

/// Generates the full calendar grid with its generative components.
pub fn generate_with_draws(params: &DemandModelParams, seed: u64) -> (Dataset, Vec<DemandDraw>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(params.noise_mean, params.noise_std).expect("finite noise std");
    let mut rows = Vec::new();
    let mut draws = Vec::new();
    let end = calendar_end();
    let mut date = calendar_start();
    while date <= end {
        for category in 1..=N_CATEGORIES {
            let features = encode_features(date, category);
            let mean = params
                .mean_demand(&features)
                .expect("encoder emits FEATURE_DIM features");
            let eps = noise.sample(&mut rng);
            let demand = (mean + eps).max(0.0);
            let order = mean.max(0.0);
            rows.push(Row {
                date: Some(date),
                category: Some(category),
                features,
                sale: order.min(demand),
                demand: Some(demand),
                q_star: None,
            });
            draws.push(DemandDraw {
                mean,
                noise: eps,
                order,
            });
        }
        date = date.succ_opt().expect("date in range");
    }
    (
        Dataset {
            rows,
            scaling: None,
        },
        draws,
    )
}

/// One row per (day, category) from 2016-01-01 to 2017-06-30.
pub fn generate(params: &DemandModelParams, seed: u64) -> Dataset {
    generate_with_draws(params, seed).0
}

/// Splits into calendar year 2016 (train) and the first half of 2017 (test).
pub fn split_chronological(dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    let mut dates: Vec<NaiveDate> = Vec::with_capacity(dataset.len());
    for (i, row) in dataset.rows.iter().enumerate() {
        dates.push(row.date.ok_or_else(|| {
            Error::Input(format!("row {i} has no date; chronological split needs dates"))
        })?);
    }
    dates.sort_unstable();
    dates.dedup();
    for pair in dates.windows(2) {
        if pair[0].succ_opt() != Some(pair[1]) {
            return Err(Error::Input(format!(
                "calendar gap between {} and {}",
                pair[0], pair[1]
            )));
        }
    }
    let test_start = NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid date");
    let test_end = NaiveDate::from_ymd_opt(2017, 6, 30).expect("valid date");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for row in &dataset.rows {
        let d = row.date.expect("checked above");
        if d.year() == 2016 {
            train.push(row.clone());
        } else if d >= test_start && d <= test_end {
            test.push(row.clone());
        }
    }
    Ok((
        Dataset {
            rows: train,
            scaling: dataset.scaling.clone(),
        },
        Dataset {
            rows: test,
            scaling: dataset.scaling.clone(),
        },
    ))
}

/// Distribution-optimal order quantity `beta'x + sigma * z(alpha)` for unscaled features.
pub fn q_star(params: &DemandModelParams, features: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mean = params.mean_demand(features)?;
    Ok(mean + params.noise_mean + params.noise_std * normal_quantile(alpha))
}

/// Copy of `dataset` (unscaled features) with `q_star` filled in for `alpha`.
pub fn with_q_star(dataset: &Dataset, params: &DemandModelParams, alpha: f64) -> Result<Dataset> {
    let mut out = dataset.clone();
    for row in &mut out.rows {
        row.q_star = Some(q_star(params, &row.features, alpha)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn base_row_mean_is_intercept() {
        let p = DemandModelParams::default();
        // 2016-01-04 is a Monday
        let x = encode_features(ymd(2016, 1, 4), BASE_CATEGORY);
        assert_eq!(x.iter().sum::<f64>(), 1.0);
        assert_abs_diff_eq!(p.mean_demand(&x).unwrap(), 113.40, epsilon = 1e-12);
    }

    #[test]
    fn category_one_sunday_december() {
        let p = DemandModelParams::default();
        // 2016-12-04 is a Sunday
        let x = encode_features(ymd(2016, 12, 4), 1);
        assert_abs_diff_eq!(p.mean_demand(&x).unwrap(), 363.79, epsilon = 1e-9);
    }

    #[test]
    fn rows_are_censored_by_the_order() {
        let (ds, draws) = generate_with_draws(&DemandModelParams::default(), 3);
        assert_eq!(ds.len(), 547 * 9);
        for (row, draw) in ds.rows.iter().zip(&draws) {
            let d = row.demand.unwrap();
            assert!(row.sale <= d);
            assert!(row.sale <= draw.order);
            assert!(row.sale >= 0.0 && d >= 0.0);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = DemandModelParams::default();
        assert_eq!(generate(&p, 9), generate(&p, 9));
        assert_ne!(generate(&p, 9), generate(&p, 10));
    }

    #[test]
    fn split_sizes() {
        let ds = generate(&DemandModelParams::default(), 1);
        let (train, test) = split_chronological(&ds).unwrap();
        assert_eq!(train.len(), 3294);
        assert_eq!(test.len(), 1629);
        let last_train = train.rows.iter().filter_map(|r| r.date).max().unwrap();
        let first_test = test.rows.iter().filter_map(|r| r.date).min().unwrap();
        assert!(last_train < first_test);
    }

    #[test]
    fn split_detects_gaps() {
        let mut ds = generate(&DemandModelParams::default(), 1);
        let gap = ymd(2016, 3, 3);
        ds.rows.retain(|r| r.date != Some(gap));
        assert!(split_chronological(&ds).is_err());
    }

    #[test]
    fn q_star_examples() {
        let p = DemandModelParams::default();
        let base = encode_features(ymd(2016, 1, 4), BASE_CATEGORY);
        assert_eq!(q_star(&p, &base, 0.5).unwrap(), 113.40);
        assert_abs_diff_eq!(q_star(&p, &base, 0.95).unwrap(), 190.0, epsilon = 0.01);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..100 {
            let q = q_star(&p, &base, k as f64 / 100.0).unwrap();
            assert!(q > prev);
            prev = q;
        }
        assert!(q_star(&p, &base, 1.0).is_err());
        assert!(q_star(&p, &base, 0.0).is_err());
    }
}
