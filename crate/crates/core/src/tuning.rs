//! Two-stage hyperparameter tuning by seeded random search and repeated
//! 75/25 hold-out splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::learner::{loss_for, Hyperparams, Learner};
use crate::loss::LossSpec;
use crate::train::rng_for;

/// Critical ratio used for the model-hyperparameter stage.
pub const STAGE_ONE_ALPHA: f64 = 0.55;
const TRAIN_SHARE: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamRange {
    Uniform { lo: f64, hi: f64 },
    /// Inclusive integer range.
    IntRange { lo: i64, hi: i64 },
}

impl ParamRange {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            ParamRange::Uniform { lo, hi } if lo == hi => lo,
            ParamRange::Uniform { lo, hi } => rng.random_range(lo..hi),
            ParamRange::IntRange { lo, hi } => rng.random_range(lo..=hi) as f64,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            ParamRange::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            ParamRange::IntRange { lo, hi } => lo <= hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("empty range for `{name}`")))
        }
    }
}

/// Named parameter ranges, sampled in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<(String, ParamRange)>,
}

impl SearchSpace {
    pub fn new() -> Self {
        SearchSpace::default()
    }

    pub fn with(mut self, name: &str, range: ParamRange) -> Self {
        self.params.retain(|(n, _)| n != name);
        self.params.push((name.to_string(), range));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// `eps1 ~ U(0, 0.20)`, `eps2 ~ U(0, 0.15)`.
    pub fn default_eps() -> Self {
        SearchSpace::new()
            .with("eps1", ParamRange::Uniform { lo: 0.0, hi: 0.20 })
            .with("eps2", ParamRange::Uniform { lo: 0.0, hi: 0.15 })
    }

    fn has_eps_pair(&self) -> bool {
        let has = |k: &str| self.params.iter().any(|(n, _)| n == k);
        has("eps1") && has("eps2")
    }

    /// Draws one configuration on top of `base`. When the space holds both
    /// insensitivity parameters, draws with `eps1 <= eps2` are rejected.
    fn sample(&self, base: &Hyperparams, rng: &mut ChaCha8Rng) -> Result<Hyperparams> {
        const MAX_REJECTIONS: usize = 10_000;
        for _ in 0..MAX_REJECTIONS {
            let mut hp = base.clone();
            for (name, range) in &self.params {
                hp.set(name, range.sample(rng))?;
            }
            if !self.has_eps_pair() || hp.eps1 > hp.eps2 {
                return Ok(hp);
            }
        }
        Err(Error::Config(
            "search space admits no eps1 > eps2 configuration".into(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub folds: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub budget: usize,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            folds: 4,
            shuffle: true,
            seed: 2024,
            budget: 50,
        }
    }
}

/// Mean held-out `spec` loss over `plan.folds` fresh 75/25 splits.
pub fn cv_score(
    train: &Dataset,
    learner: &dyn Learner,
    spec: &LossSpec,
    hp: &Hyperparams,
    plan: &CvPlan,
) -> Result<f64> {
    if plan.folds == 0 {
        return Err(Error::Config("at least one fold is required".into()));
    }
    if train.len() < 2 {
        return Err(Error::Input("cross-validation needs at least two rows".into()));
    }
    let n = train.len();
    let n_fit = ((n as f64 * TRAIN_SHARE).round() as usize).clamp(1, n - 1);
    let mut total = 0.0;
    for fold in 0..plan.folds {
        let mut idx: Vec<usize> = (0..n).collect();
        if plan.shuffle {
            let mut rng = rng_for(plan.seed.wrapping_add(fold as u64));
            idx.shuffle(&mut rng);
        }
        let fit_part = train.subset(&idx[..n_fit]);
        let held_out = train.subset(&idx[n_fit..]);
        let wrap = |e| Error::Fold {
            fold,
            source: Box::new(e),
        };
        let fitted = learner
            .fit(&fit_part, spec, hp, plan.seed.wrapping_add(fold as u64))
            .map_err(wrap)?;
        let preds = fitted.model.predict_all(&held_out).map_err(wrap)?;
        total += spec.mean(&held_out.sales(), &preds);
    }
    Ok(total / plan.folds as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConfig {
    pub hyperparams: Hyperparams,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Hyperparams,
    pub best_score: f64,
    /// Every sampled configuration in sampling order.
    pub table: Vec<ScoredConfig>,
}

/// Random search over `space`. Configuration `k` depends only on the plan seed
/// and `k`, so a larger budget extends the sample sequence of a smaller one.
/// The loss used for scoring is rebuilt from each configuration at `alpha`.
pub fn search(
    train: &Dataset,
    learner: &dyn Learner,
    base: &Hyperparams,
    alpha: f64,
    space: &SearchSpace,
    plan: &CvPlan,
) -> Result<SearchResult> {
    if space.is_empty() {
        return Err(Error::Config("search space is empty".into()));
    }
    if plan.budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    for (name, range) in &space.params {
        range.validate(name)?;
    }
    let mut rng = rng_for(plan.seed ^ 0x5EED_5EED_5EED_5EED);
    let mut table = Vec::with_capacity(plan.budget);
    for _ in 0..plan.budget {
        let hp = space.sample(base, &mut rng)?;
        let spec = loss_for(learner.loss_kind(), alpha, &hp)?;
        let score = cv_score(train, learner, &spec, &hp, plan)?;
        table.push(ScoredConfig {
            hyperparams: hp,
            score,
        });
    }
    let best = table
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.score.total_cmp(&b.score).then(i.cmp(j)))
        .map(|(_, c)| c.clone())
        .expect("budget >= 1");
    Ok(SearchResult {
        best: best.hyperparams,
        best_score: best.score,
        table,
    })
}

/// Tuned configuration of one learner at one critical ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedConfig {
    pub learner: String,
    pub alpha: f64,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    /// `None` when the learner has no model hyperparameters.
    pub stage1_score: Option<f64>,
    /// `None` when the second stage does not apply.
    pub stage2_score: Option<f64>,
}

/// Stage one tunes the model hyperparameters at [`STAGE_ONE_ALPHA`] with no
/// insensitive band. Stage two keeps them and, per `alpha`, tunes only the
/// band, for learners that have one.
pub fn two_stage_protocol(
    train: &Dataset,
    learner: &dyn Learner,
    base: &Hyperparams,
    alphas: &[f64],
    eps_space: &SearchSpace,
    plan: &CvPlan,
) -> Result<Vec<TunedConfig>> {
    if alphas.is_empty() {
        return Err(Error::Config("no critical ratios given".into()));
    }
    let stage1_base = Hyperparams {
        eps1: 0.0,
        eps2: 0.0,
        ..base.clone()
    };
    let model_space = learner.model_space();
    let (model_hp, stage1_score) = if model_space.is_empty() {
        (stage1_base, None)
    } else {
        let r = search(train, learner, &stage1_base, STAGE_ONE_ALPHA, &model_space, plan)?;
        (r.best, Some(r.best_score))
    };
    let mut out = Vec::with_capacity(alphas.len());
    for (k, &alpha) in alphas.iter().enumerate() {
        let (hp, stage2_score) = if learner.tunes_eps() {
            let stage2 = CvPlan {
                seed: plan.seed.wrapping_add(1 + k as u64),
                ..plan.clone()
            };
            let r = search(train, learner, &model_hp, alpha, eps_space, &stage2)?;
            (r.best, Some(r.best_score))
        } else {
            (model_hp.clone(), None)
        };
        out.push(TunedConfig {
            learner: learner.name().to_string(),
            alpha,
            seed: plan.seed,
            hyperparams: hp,
            stage1_score,
            stage2_score,
        });
    }
    Ok(out)
}

pub fn save_tuned(configs: &[TunedConfig], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(configs)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_tuned(path: &Path) -> Result<Vec<TunedConfig>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{LearnerRegistry, LinearGd};
    use crate::loss::LossKind;

    fn noisy(n: usize) -> Dataset {
        let mut rng = rng_for(8);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random_range(0.0..1.0)]).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| (0.3 + 0.4 * x[1] + rng.random_range(-0.1..0.1f64)).max(0.0))
            .collect();
        Dataset::from_xy(xs, ys).unwrap()
    }

    fn quick() -> Hyperparams {
        Hyperparams {
            max_epochs: 30,
            batch_size: 16,
            ..Hyperparams::default()
        }
    }

    fn plan(budget: usize) -> CvPlan {
        CvPlan {
            folds: 2,
            budget,
            ..CvPlan::default()
        }
    }

    #[test]
    fn wide_band_scores_zero() {
        let data = noisy(120);
        let reg = LearnerRegistry::default();
        let spec = LossSpec::eps_nv(0.6, 50.0, 0.0).unwrap();
        let lp = reg.get("LR-eNVC-LP").unwrap();
        assert_eq!(cv_score(&data, lp, &spec, &quick(), &plan(1)).unwrap(), 0.0);
    }

    #[test]
    fn single_fold_is_one_holdout() {
        let data = noisy(80);
        let reg = LearnerRegistry::default();
        let ols = reg.get("LR-MSE").unwrap();
        let p = CvPlan {
            folds: 1,
            ..plan(1)
        };
        let spec = LossSpec::mse();
        let score = cv_score(&data, ols, &spec, &quick(), &p).unwrap();
        let mut idx: Vec<usize> = (0..80).collect();
        idx.shuffle(&mut rng_for(p.seed));
        let fit = ols.fit(&data.subset(&idx[..60]), &spec, &quick(), 0).unwrap();
        let held = data.subset(&idx[60..]);
        let direct = spec.mean(&held.sales(), &fit.model.predict_all(&held).unwrap());
        assert_eq!(score, direct);
    }

    #[test]
    fn sampled_eps_pairs_respect_order() {
        let space = SearchSpace::default_eps();
        let mut rng = rng_for(1);
        for _ in 0..2000 {
            let hp = space.sample(&Hyperparams::default(), &mut rng).unwrap();
            assert!(hp.eps1 > hp.eps2 && hp.eps2 >= 0.0);
        }
        let impossible = SearchSpace::new()
            .with("eps1", ParamRange::Uniform { lo: 0.0, hi: 0.0 })
            .with("eps2", ParamRange::Uniform { lo: 0.1, hi: 0.1 });
        assert!(impossible.sample(&Hyperparams::default(), &mut rng).is_err());
    }

    #[test]
    fn pinned_space_returns_the_point() {
        let data = noisy(100);
        let lr = LinearGd::new("LR-NVC", LossKind::Nvc, false);
        let space = SearchSpace::new().with("eta", ParamRange::Uniform { lo: 0.02, hi: 0.02 });
        let r = search(&data, &lr, &quick(), 0.6, &space, &plan(3)).unwrap();
        assert_eq!(r.best.eta, 0.02);
        assert_eq!(r.table.len(), 3);
        assert!(search(&data, &lr, &quick(), 0.6, &SearchSpace::new(), &plan(3)).is_err());
        assert!(search(&data, &lr, &quick(), 0.6, &space, &plan(0)).is_err());
    }

    #[test]
    fn budget_prefix_and_determinism() {
        let data = noisy(100);
        let lr = LinearGd::new("LR-eNVC", LossKind::EpsNv, false);
        let space = SearchSpace::default_eps();
        let a = search(&data, &lr, &quick(), 0.8, &space, &plan(3)).unwrap();
        let b = search(&data, &lr, &quick(), 0.8, &space, &plan(6)).unwrap();
        let a2 = search(&data, &lr, &quick(), 0.8, &space, &plan(3)).unwrap();
        assert_eq!(a, a2);
        assert_eq!(a.table[..], b.table[..3]);
        assert!(b.best_score <= a.best_score);
        let one = search(&data, &lr, &quick(), 0.8, &space, &plan(1)).unwrap();
        assert_eq!(one.best, one.table[0].hyperparams);
    }

    #[test]
    fn protocol_structure() {
        let data = noisy(500);
        let reg = LearnerRegistry::default();
        let mse = two_stage_protocol(&data, reg.get("LR-MSE").unwrap(), &quick(), &[0.55, 0.95], &SearchSpace::default_eps(), &plan(2)).unwrap();
        assert_eq!(mse[0].hyperparams, mse[1].hyperparams);
        assert!(mse[0].stage2_score.is_none());

        let r = two_stage_protocol(&data, reg.get("LR-eNVC-R").unwrap(), &quick(), &[0.55, 0.95], &SearchSpace::default_eps(), &plan(2)).unwrap();
        assert_eq!(r.len(), 2);
        for key in ["eta", "lambda", "batch_size"] {
            assert_eq!(r[0].hyperparams.get(key).unwrap(), r[1].hyperparams.get(key).unwrap());
        }
        assert!(r.iter().all(|c| c.hyperparams.eps1 > c.hyperparams.eps2));
        assert!(two_stage_protocol(&data, reg.get("LR-MSE").unwrap(), &quick(), &[], &SearchSpace::default_eps(), &plan(2)).is_err());
    }

    #[test]
    fn tuned_configs_round_trip_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tuned.json");
        let cfg = TunedConfig {
            learner: "NN-eNVC".into(),
            alpha: 0.85,
            seed: 3,
            hyperparams: Hyperparams::default(),
            stage1_score: Some(0.1),
            stage2_score: None,
        };
        save_tuned(&[cfg.clone()], &path).unwrap();
        assert_eq!(load_tuned(&path).unwrap(), vec![cfg]);
    }
}
