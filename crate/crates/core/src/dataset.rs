//! Tabular observations, scaling, and the CSV file format.
//!
//! A dataset file is comma-separated with header
//! `date,category,sale,demand,f01,...,fNN` and an optional trailing `q_star`
//! column. Dates are ISO-8601, a missing demand is an empty cell. Scaling
//! metadata lives in a key-value sidecar written next to the CSV.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub date: Option<NaiveDate>,
    pub category: Option<u8>,
    /// Feature vector; the first entry is the constant 1.
    pub features: Vec<f64>,
    /// Observed (possibly censored) sale. This is the training target.
    pub sale: f64,
    /// True demand, when known.
    pub demand: Option<f64>,
    /// Distribution-optimal order quantity, when known.
    pub q_star: Option<f64>,
}

impl Row {
    /// Undated row with only features and a sale.
    pub fn plain(features: Vec<f64>, sale: f64) -> Self {
        Row {
            date: None,
            category: None,
            features,
            sale,
            demand: None,
            q_star: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub rows: Vec<Row>,
    pub scaling: Option<ScalingRecord>,
}

impl Dataset {
    pub fn new(rows: Vec<Row>) -> Result<Self> {
        let ds = Dataset {
            rows,
            scaling: None,
        };
        ds.dim()?;
        Ok(ds)
    }

    /// Undated dataset from raw features and targets.
    pub fn from_xy(features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::Dimension {
                expected: features.len(),
                got: targets.len(),
            });
        }
        let rows = features
            .into_iter()
            .zip(targets)
            .map(|(features, sale)| Row::plain(features, sale))
            .collect();
        Dataset::new(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Feature dimension; errors when rows disagree.
    pub fn dim(&self) -> Result<usize> {
        let Some(first) = self.rows.first() else {
            return Ok(0);
        };
        let p = first.features.len();
        for row in &self.rows {
            if row.features.len() != p {
                return Err(Error::Dimension {
                    expected: p,
                    got: row.features.len(),
                });
            }
        }
        Ok(p)
    }

    pub fn sales(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.sale).collect()
    }

    pub fn demands(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.demand).collect()
    }

    pub fn q_stars(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.q_star).collect()
    }

    /// Rows at `indices`, in that order. Scaling metadata is kept.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            scaling: self.scaling.clone(),
        }
    }
}

/// Affine transforms applied by [`scale`], kept for exact inversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub target_min: f64,
    pub target_max: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Columns left untouched because they had zero variance (or are the intercept).
    pub unscaled_columns: Vec<usize>,
}

impl ScalingRecord {
    pub fn target_range(&self) -> f64 {
        let r = self.target_max - self.target_min;
        if r > 0.0 {
            r
        } else {
            1.0
        }
    }

    pub fn scale_target(&self, v: f64) -> f64 {
        (v - self.target_min) / self.target_range()
    }

    pub fn invert_target(&self, v: f64) -> f64 {
        self.target_min + v * self.target_range()
    }

    pub fn scale_features(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.feature_mean[j]) / self.feature_std[j])
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "target_min = {:.16e}", self.target_min);
        let _ = writeln!(out, "target_max = {:.16e}", self.target_max);
        for (j, (m, s)) in self.feature_mean.iter().zip(&self.feature_std).enumerate() {
            let _ = writeln!(out, "feature_mean.{:02} = {:.16e}", j + 1, m);
            let _ = writeln!(out, "feature_std.{:02} = {:.16e}", j + 1, s);
        }
        let cols: Vec<String> = self
            .unscaled_columns
            .iter()
            .map(|c| format!("{:02}", c + 1))
            .collect();
        let _ = writeln!(out, "unscaled_columns = {}", cols.join(" "));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut target_min = None;
        let mut target_max = None;
        let mut means: Vec<(usize, f64)> = Vec::new();
        let mut stds: Vec<(usize, f64)> = Vec::new();
        let mut unscaled = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                row: lineno + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| err(format!("non-numeric value `{v}` for `{key}`")))
            };
            let index = |suffix: &str| {
                suffix
                    .parse::<usize>()
                    .ok()
                    .filter(|&i| i >= 1)
                    .map(|i| i - 1)
                    .ok_or_else(|| err(format!("bad feature index in `{key}`")))
            };
            match key {
                "target_min" => target_min = Some(num(value)?),
                "target_max" => target_max = Some(num(value)?),
                "unscaled_columns" => {
                    for tok in value.split_whitespace() {
                        unscaled.push(index(tok)?);
                    }
                }
                _ => {
                    if let Some(s) = key.strip_prefix("feature_mean.") {
                        means.push((index(s)?, num(value)?));
                    } else if let Some(s) = key.strip_prefix("feature_std.") {
                        stds.push((index(s)?, num(value)?));
                    } else {
                        return Err(err(format!("unknown key `{key}`")));
                    }
                }
            }
        }
        let collect = |mut v: Vec<(usize, f64)>, what: &str| -> Result<Vec<f64>> {
            v.sort_by_key(|e| e.0);
            for (k, (i, _)) in v.iter().enumerate() {
                if *i != k {
                    return Err(Error::Parse {
                        row: 0,
                        msg: format!("{what} entries are not contiguous"),
                    });
                }
            }
            Ok(v.into_iter().map(|e| e.1).collect())
        };
        let feature_mean = collect(means, "feature_mean")?;
        let feature_std = collect(stds, "feature_std")?;
        if feature_mean.len() != feature_std.len() {
            return Err(Error::Parse {
                row: 0,
                msg: "feature_mean and feature_std lengths differ".into(),
            });
        }
        let missing = |k: &str| Error::Parse {
            row: 0,
            msg: format!("missing key `{k}`"),
        };
        Ok(ScalingRecord {
            target_min: target_min.ok_or_else(|| missing("target_min"))?,
            target_max: target_max.ok_or_else(|| missing("target_max"))?,
            feature_mean,
            feature_std,
            unscaled_columns: unscaled,
        })
    }
}

/// Standardises features and min-max scales targets using `train` statistics,
/// then applies the same transform to `test`.
///
/// Column 0 (the intercept) and zero-variance columns are left unscaled and
/// listed in [`ScalingRecord::unscaled_columns`]. Sales, demands and optimal
/// quantities are mapped by `(v - min) / (max - min)` over the train sales;
/// test values are not clipped.
pub fn scale(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, ScalingRecord)> {
    if train.is_empty() {
        return Err(Error::Input("cannot fit scaling on an empty train set".into()));
    }
    let p = train.dim()?;
    let tp = test.dim()?;
    if !test.is_empty() && tp != p {
        return Err(Error::Dimension {
            expected: p,
            got: tp,
        });
    }
    let n = train.len() as f64;
    let mut feature_mean = vec![0.0; p];
    let mut feature_std = vec![1.0; p];
    let mut unscaled_columns = Vec::new();
    for j in 0..p {
        if j == 0 {
            unscaled_columns.push(0);
            continue;
        }
        let mean = train.rows.iter().map(|r| r.features[j]).sum::<f64>() / n;
        let var = train
            .rows
            .iter()
            .map(|r| (r.features[j] - mean).powi(2))
            .sum::<f64>()
            / n;
        if var > 0.0 {
            feature_mean[j] = mean;
            feature_std[j] = var.sqrt();
        } else {
            unscaled_columns.push(j);
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &train.rows {
        lo = lo.min(r.sale);
        hi = hi.max(r.sale);
    }
    let record = ScalingRecord {
        target_min: lo,
        target_max: hi,
        feature_mean,
        feature_std,
        unscaled_columns,
    };
    let apply = |ds: &Dataset| Dataset {
        rows: ds
            .rows
            .iter()
            .map(|r| Row {
                date: r.date,
                category: r.category,
                features: record.scale_features(&r.features),
                sale: record.scale_target(r.sale),
                demand: r.demand.map(|d| record.scale_target(d)),
                q_star: r.q_star.map(|q| record.scale_target(q)),
            })
            .collect(),
        scaling: Some(record.clone()),
    };
    Ok((apply(train), apply(test), record))
}

/// Sidecar path used by [`save_csv`] and [`load_csv`].
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".scaling");
    PathBuf::from(s)
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Writes the dataset CSV, plus the scaling sidecar when scaling is present.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let p = dataset.dim()?;
    let with_q = dataset.rows.iter().any(|r| r.q_star.is_some());
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header: Vec<String> = ["date", "category", "sale", "demand"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=p).map(|j| format!("f{j:02}")));
    if with_q {
        header.push("q_star".into());
    }
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    wtr.write_record(&header).map_err(csv_err)?;
    for row in &dataset.rows {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(row.date.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default());
        rec.push(row.category.map(|c| c.to_string()).unwrap_or_default());
        rec.push(fmt_num(row.sale));
        rec.push(row.demand.map(fmt_num).unwrap_or_default());
        rec.extend(row.features.iter().map(|&v| fmt_num(v)));
        if with_q {
            rec.push(row.q_star.map(fmt_num).unwrap_or_default());
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    if let Some(record) = &dataset.scaling {
        let side = sidecar_path(path);
        fs::write(&side, record.to_text()).map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads a dataset CSV (and its scaling sidecar, if one exists).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_csv(&text)?;
    let side = sidecar_path(path);
    if side.exists() {
        let side_text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        ds.scaling = Some(ScalingRecord::from_text(&side_text)?);
    }
    Ok(ds)
}

/// Parses dataset CSV text. Row numbers in errors count the header as row 1.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let sale_col = col("sale").ok_or_else(|| Error::Parse {
        row: 1,
        msg: "missing required column `sale`".into(),
    })?;
    let date_col = col("date");
    let cat_col = col("category");
    let demand_col = col("demand");
    let q_col = col("q_star");
    let mut feature_cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            let h = h.trim();
            let idx = h.strip_prefix('f')?.parse::<usize>().ok()?;
            Some((idx, i))
        })
        .collect();
    feature_cols.sort();
    for (k, (idx, _)) in feature_cols.iter().enumerate() {
        if *idx != k + 1 {
            return Err(Error::Parse {
                row: 1,
                msg: format!("feature columns must be f01..fNN without gaps (missing f{:02})", k + 1),
            });
        }
    }
    if feature_cols.is_empty() {
        return Err(Error::Parse {
            row: 1,
            msg: "no feature columns (f01..fNN)".into(),
        });
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (k, rec) in rdr.records().enumerate() {
        let rowno = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row: rowno,
            msg: e.to_string(),
        })?;
        let cell = |i: usize| rec.get(i).map(str::trim).unwrap_or("");
        let num = |i: usize, name: &str| -> Result<f64> {
            cell(i).parse::<f64>().map_err(|_| Error::Parse {
                row: rowno,
                msg: format!("non-numeric value `{}` in column `{name}`", cell(i)),
            })
        };
        let opt_num = |i: Option<usize>, name: &str| -> Result<Option<f64>> {
            match i {
                Some(i) if !cell(i).is_empty() => num(i, name).map(Some),
                _ => Ok(None),
            }
        };
        let date = match date_col {
            Some(i) if !cell(i).is_empty() => Some(
                NaiveDate::parse_from_str(cell(i), "%Y-%m-%d").map_err(|_| Error::Parse {
                    row: rowno,
                    msg: format!("invalid date `{}`", cell(i)),
                })?,
            ),
            _ => None,
        };
        let category = match cat_col {
            Some(i) if !cell(i).is_empty() => Some(cell(i).parse::<u8>().map_err(|_| {
                Error::Parse {
                    row: rowno,
                    msg: format!("invalid category `{}`", cell(i)),
                }
            })?),
            _ => None,
        };
        if let (Some(d), Some(c)) = (date, category) {
            if !seen.insert((d, c)) {
                return Err(Error::Parse {
                    row: rowno,
                    msg: format!("duplicate key (date {d}, category {c})"),
                });
            }
        }
        let features = feature_cols
            .iter()
            .map(|&(idx, i)| num(i, &format!("f{idx:02}")))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(Row {
            date,
            category,
            features,
            sale: num(sale_col, "sale")?,
            demand: opt_num(demand_col, "demand")?,
            q_star: opt_num(q_col, "q_star")?,
        });
    }
    Dataset::new(rows)
}
