//! End-to-end synthetic experiment: generate, tune, fit on censored sales,
//! evaluate against true demand, and write plot-ready reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{scale, Dataset, ScalingRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, savings_percent, wilcoxon_paired, EvalReport, WilcoxonResult};
use crate::learner::{loss_for, Hyperparams, LearnerRegistry};
use crate::synth::{generate, split_chronological, with_q_star, DemandModelParams};
use crate::tuning::{two_stage_protocol, CvPlan, SearchSpace, TunedConfig};

/// Pairs `(eps variant, plain-cost baseline, squared-loss baseline)`.
pub const FAMILIES: [(&str, &str, &str); 3] = [
    ("LR-eNVC-R", "LR-NVC", "LR-MSE"),
    ("LR-eNVC", "LR-NVC", "LR-MSE"),
    ("NN-eNVC", "NN-NVC", "NN-MSE"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<String>,
    /// Sampled configurations per tuning search.
    pub budget: usize,
    /// Hold-out splits per configuration.
    pub folds: usize,
    /// Starting point for every learner; the search overrides tuned fields.
    pub base: Hyperparams,
    pub data: DemandModelParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alphas: vec![0.55, 0.65, 0.75, 0.85, 0.95],
            seeds: vec![1, 2, 3, 4, 5],
            algorithms: ["LR-MSE", "LR-NVC", "LR-eNVC", "LR-eNVC-R", "NN-MSE", "NN-NVC", "NN-eNVC"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            budget: 30,
            folds: 4,
            base: Hyperparams::default(),
            data: DemandModelParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, registry: &LearnerRegistry) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms selected".into()));
        }
        for a in &self.algorithms {
            registry.get(a)?;
        }
        if self.alphas.is_empty() {
            return Err(Error::Config("no critical ratios given".into()));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::Config(format!("alpha {a} is outside (0, 1)")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.budget == 0 || self.folds == 0 {
            return Err(Error::Config("budget and folds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Scaled train/test partitions of one generated dataset, plus the original-unit test set.
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub test_original: Dataset,
    pub scaling: ScalingRecord,
}

pub fn prepare(params: &DemandModelParams, seed: u64) -> Result<PreparedData> {
    let full = generate(params, seed);
    let (train, test) = split_chronological(&full)?;
    let (train_s, test_s, scaling) = scale(&train, &test)?;
    Ok(PreparedData {
        train: train_s,
        test: test_s,
        test_original: test,
        scaling,
    })
}

/// One (seed, alpha, algorithm) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub alpha: f64,
    pub algorithm: String,
    pub hyperparams: Hyperparams,
    pub report: EvalReport,
    /// Test predictions in original units.
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub alpha: Option<f64>,
    pub algorithm: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunRecord>,
    pub tuned: Vec<TunedConfig>,
    pub failures: Vec<RunFailure>,
}

impl ExperimentOutcome {
    pub fn run(&self, seed: u64, alpha: f64, algorithm: &str) -> Option<&RunRecord> {
        self.runs
            .iter()
            .find(|r| r.seed == seed && r.alpha == alpha && r.algorithm == algorithm)
    }
}

/// Tunes one learner on `data.train` and evaluates it on the test set at every alpha.
pub fn run_learner(
    data: &PreparedData,
    registry: &LearnerRegistry,
    algorithm: &str,
    config: &ExperimentConfig,
    seed: u64,
    outcome: &mut ExperimentOutcome,
) {
    let fail = |alpha: Option<f64>, stage: &str, e: Error| RunFailure {
        seed,
        alpha,
        algorithm: algorithm.to_string(),
        stage: stage.to_string(),
        message: e.to_string(),
    };
    let learner = match registry.get(algorithm) {
        Ok(l) => l,
        Err(e) => return outcome.failures.push(fail(None, "lookup", e)),
    };
    let plan = CvPlan {
        folds: config.folds,
        shuffle: true,
        seed: seed.wrapping_mul(1000).wrapping_add(17),
        budget: config.budget,
    };
    let tuned = match two_stage_protocol(
        &data.train,
        learner,
        &config.base,
        &config.alphas,
        &SearchSpace::default_eps(),
        &plan,
    ) {
        Ok(t) => t,
        Err(e) => return outcome.failures.push(fail(None, "tune", e)),
    };
    for tc in tuned {
        let alpha = tc.alpha;
        let result = (|| -> Result<RunRecord> {
            let spec = loss_for(learner.loss_kind(), alpha, &tc.hyperparams)?;
            let fitted = learner.fit(&data.train, &spec, &tc.hyperparams, seed)?;
            let scaled = fitted.model.predict_all(&data.test)?;
            let predictions: Vec<f64> = scaled.iter().map(|&v| data.scaling.invert_target(v)).collect();
            let test = with_q_star(&data.test_original, &config.data, alpha)?;
            let report = evaluate(&test, &predictions, alpha, fitted.fit_seconds)?;
            Ok(RunRecord {
                seed,
                alpha,
                algorithm: algorithm.to_string(),
                hyperparams: tc.hyperparams.clone(),
                report,
                predictions,
            })
        })();
        match result {
            Ok(r) => outcome.runs.push(r),
            Err(e) => outcome.failures.push(fail(Some(alpha), "fit", e)),
        }
        outcome.tuned.push(tc);
    }
}

/// Runs every (seed, algorithm) pair; failures are recorded and the sweep continues.
pub fn run_experiment(config: &ExperimentConfig, registry: &LearnerRegistry) -> Result<ExperimentOutcome> {
    config.validate(registry)?;
    let mut outcome = ExperimentOutcome::default();
    for &seed in &config.seeds {
        let data = match prepare(&config.data, seed) {
            Ok(d) => d,
            Err(e) => {
                outcome.failures.push(RunFailure {
                    seed,
                    alpha: None,
                    algorithm: String::new(),
                    stage: "data".into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        for algorithm in &config.algorithms {
            run_learner(&data, registry, algorithm, config, seed, &mut outcome);
        }
    }
    Ok(outcome)
}

/// Decimal text with 10 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if !(-5..=15).contains(&mag) {
        return format!("{v:.9e}");
    }
    let decimals = (9 - mag).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Sample mean and (n - 1) standard deviation.
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd {
        mean,
        std,
        count: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub algorithm: String,
    pub alpha: f64,
    pub nv_cost: Option<MeanStd>,
    pub rmse_q: Option<MeanStd>,
    pub service_level: Option<MeanStd>,
    pub fit_seconds: Option<MeanStd>,
}

impl AggregateRow {
    /// `|mean service level - alpha|`.
    pub fn service_gap(&self) -> Option<f64> {
        self.service_level.map(|s| (s.mean - self.alpha).abs())
    }
}

/// Means and standard deviations across seeds per (algorithm, alpha).
pub fn aggregate(outcome: &ExperimentOutcome) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in &outcome.runs {
        groups
            .entry((r.algorithm.clone(), r.alpha.to_bits()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((algorithm, bits), runs)| {
            let collect = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
                let v: Vec<f64> = runs.iter().filter_map(|r| f(&r.report)).collect();
                mean_std(&v)
            };
            AggregateRow {
                algorithm,
                alpha: f64::from_bits(bits),
                nv_cost: collect(&|r| r.nv_cost),
                rmse_q: collect(&|r| r.rmse_q),
                service_level: collect(&|r| r.service_level),
                fit_seconds: collect(&|r| Some(r.fit_seconds)),
            }
        })
        .collect()
}

pub fn find_aggregate<'a>(rows: &'a [AggregateRow], algorithm: &str, alpha: f64) -> Option<&'a AggregateRow> {
    rows.iter().find(|r| r.algorithm == algorithm && r.alpha == alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub variant: String,
    pub baseline: String,
    pub alpha: f64,
    /// Mean over seeds of the per-seed percentage savings.
    pub mean_savings: f64,
    pub std_savings: f64,
    pub seeds: usize,
}

/// Percentage cost savings of each eps variant over its plain-cost baseline.
pub fn savings_table(outcome: &ExperimentOutcome, alphas: &[f64], seeds: &[u64]) -> Vec<SavingsRow> {
    let mut out = Vec::new();
    for (variant, baseline, _) in FAMILIES {
        for &alpha in alphas {
            let per_seed: Vec<f64> = seeds
                .iter()
                .filter_map(|&s| {
                    let v = outcome.run(s, alpha, variant)?.report.nv_cost?;
                    let b = outcome.run(s, alpha, baseline)?.report.nv_cost?;
                    savings_percent(b, v).ok()
                })
                .collect();
            if let Some(ms) = mean_std(&per_seed) {
                out.push(SavingsRow {
                    variant: variant.into(),
                    baseline: baseline.into(),
                    alpha,
                    mean_savings: ms.mean,
                    std_savings: ms.std,
                    seeds: ms.count,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonRow {
    pub variant: String,
    pub baseline: String,
    pub alpha: f64,
    pub seed: u64,
    pub result: WilcoxonResult,
}

/// Paired tests on `|y - Q*|` of each eps variant against its plain-cost baseline.
pub fn wilcoxon_table(outcome: &ExperimentOutcome, alphas: &[f64], seeds: &[u64]) -> Vec<WilcoxonRow> {
    let mut out = Vec::new();
    for (variant, baseline, _) in FAMILIES {
        for &alpha in alphas {
            for &seed in seeds {
                let errs = |name: &str| {
                    outcome
                        .run(seed, alpha, name)
                        .and_then(|r| r.report.abs_errors.clone())
                };
                let (Some(a), Some(b)) = (errs(variant), errs(baseline)) else {
                    continue;
                };
                if let Ok(result) = wilcoxon_paired(&a, &b) {
                    out.push(WilcoxonRow {
                        variant: variant.into(),
                        baseline: baseline.into(),
                        alpha,
                        seed,
                        result,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRow {
    pub variant: String,
    pub baseline: String,
    pub alpha: f64,
    pub gap_variant: f64,
    pub gap_baseline: f64,
    /// `100 (gap_baseline - gap_variant) / gap_baseline`.
    pub improvement_percent: f64,
}

/// Service-level gap improvement of each eps variant over both baselines.
pub fn service_table(aggregates: &[AggregateRow], alphas: &[f64]) -> Vec<ServiceRow> {
    let mut out = Vec::new();
    for (variant, nvc, mse) in FAMILIES {
        for baseline in [mse, nvc] {
            for &alpha in alphas {
                let gap = |name: &str| find_aggregate(aggregates, name, alpha).and_then(|r| r.service_gap());
                let (Some(gv), Some(gb)) = (gap(variant), gap(baseline)) else {
                    continue;
                };
                let improvement_percent = if gb > 0.0 {
                    100.0 * (gb - gv) / gb
                } else if gv == 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                out.push(ServiceRow {
                    variant: variant.into(),
                    baseline: baseline.into(),
                    alpha,
                    gap_variant: gv,
                    gap_baseline: gb,
                    improvement_percent,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub config: ExperimentConfig,
    pub tuned: Vec<TunedConfig>,
    pub failures: usize,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Writes the report tree under `dir`:
///
/// - `runs.csv`: one row per (algorithm, alpha, seed)
/// - `summary.json`: means and standard deviations across seeds
/// - `costs.csv`, `rmse_q.csv`, `fit_times.csv`: per-(algorithm, alpha) aggregates
/// - `savings.csv`, `wilcoxon.csv`, `service_level.csv`
/// - `failures.csv`, `manifest.json`
///
/// Every file except `fit_times.csv` is a deterministic function of the manifest.
pub fn write_reports(outcome: &ExperimentOutcome, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut runs = String::from("algorithm,alpha,seed,nv_cost,rmse_q,service_level,service_gap,eta,batch_size,lambda,units1,units2,eps1,eps2\n");
    for r in &outcome.runs {
        let h = &r.hyperparams;
        let _ = writeln!(
            runs,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.algorithm,
            fmt_sig(r.alpha),
            r.seed,
            opt(r.report.nv_cost),
            opt(r.report.rmse_q),
            opt(r.report.service_level),
            opt(r.report.service_gap),
            fmt_sig(h.eta),
            h.batch_size,
            fmt_sig(h.lambda),
            h.units1,
            h.units2,
            fmt_sig(h.eps1),
            fmt_sig(h.eps2),
        );
    }
    write(dir, "runs.csv", &runs)?;

    let aggregates = aggregate(outcome);
    let summary: Vec<_> = aggregates
        .iter()
        .map(|a| {
            let mut a = a.clone();
            a.fit_seconds = None;
            a
        })
        .collect();
    write(dir, "summary.json", &serde_json::to_string_pretty(&summary)?)?;

    let mut costs = String::from("algorithm,alpha,nv_cost_mean,nv_cost_std,service_level_mean,service_gap\n");
    let mut rmse = String::from("algorithm,alpha,rmse_q_mean,rmse_q_std\n");
    let mut times = String::from("algorithm,alpha,fit_seconds_mean,fit_seconds_std\n");
    for a in &aggregates {
        let _ = writeln!(
            costs,
            "{},{},{},{},{},{}",
            a.algorithm,
            fmt_sig(a.alpha),
            opt(a.nv_cost.map(|m| m.mean)),
            opt(a.nv_cost.map(|m| m.std)),
            opt(a.service_level.map(|m| m.mean)),
            opt(a.service_gap()),
        );
        let _ = writeln!(
            rmse,
            "{},{},{},{}",
            a.algorithm,
            fmt_sig(a.alpha),
            opt(a.rmse_q.map(|m| m.mean)),
            opt(a.rmse_q.map(|m| m.std)),
        );
        let _ = writeln!(
            times,
            "{},{},{},{}",
            a.algorithm,
            fmt_sig(a.alpha),
            opt(a.fit_seconds.map(|m| m.mean)),
            opt(a.fit_seconds.map(|m| m.std)),
        );
    }
    write(dir, "costs.csv", &costs)?;
    write(dir, "rmse_q.csv", &rmse)?;
    write(dir, "fit_times.csv", &times)?;

    let mut sav = String::from("variant,baseline,alpha,mean_savings_percent,std_savings_percent,seeds\n");
    for s in savings_table(outcome, &config.alphas, &config.seeds) {
        let _ = writeln!(
            sav,
            "{},{},{},{},{},{}",
            s.variant,
            s.baseline,
            fmt_sig(s.alpha),
            fmt_sig(s.mean_savings),
            fmt_sig(s.std_savings),
            s.seeds
        );
    }
    write(dir, "savings.csv", &sav)?;

    let mut wil = String::from("variant,baseline,alpha,seed,statistic,p_value,median_diff,q1_diff,q3_diff,n_effective\n");
    for w in wilcoxon_table(outcome, &config.alphas, &config.seeds) {
        let r = &w.result;
        let _ = writeln!(
            wil,
            "{},{},{},{},{},{},{},{},{},{}",
            w.variant,
            w.baseline,
            fmt_sig(w.alpha),
            w.seed,
            fmt_sig(r.statistic),
            fmt_sig(r.p_value),
            fmt_sig(r.median_diff),
            fmt_sig(r.q1_diff),
            fmt_sig(r.q3_diff),
            r.n_effective
        );
    }
    write(dir, "wilcoxon.csv", &wil)?;

    let mut svc = String::from("variant,baseline,alpha,gap_variant,gap_baseline,improvement_percent\n");
    for s in service_table(&aggregates, &config.alphas) {
        let _ = writeln!(
            svc,
            "{},{},{},{},{},{}",
            s.variant,
            s.baseline,
            fmt_sig(s.alpha),
            fmt_sig(s.gap_variant),
            fmt_sig(s.gap_baseline),
            fmt_sig(s.improvement_percent)
        );
    }
    write(dir, "service_level.csv", &svc)?;

    let mut fails = String::from("seed,alpha,algorithm,stage,message\n");
    for f in &outcome.failures {
        let _ = writeln!(
            fails,
            "{},{},{},{},\"{}\"",
            f.seed,
            opt(f.alpha),
            f.algorithm,
            f.stage,
            f.message.replace('"', "'")
        );
    }
    write(dir, "failures.csv", &fails)?;

    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        tuned: outcome.tuned.clone(),
        failures: outcome.failures.len(),
    };
    write(dir, "manifest.json", &serde_json::to_string_pretty(&manifest)?)
}
