//! Named learners behind a common trait, selected at run time.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linear::{self, LinearModel};
use crate::loss::{LossKind, LossSpec};
use crate::nn::{self, MlpModel};
use crate::train::{Optimizer, TrainConfig, TrainTrace};
use crate::tuning::{ParamRange, SearchSpace};

/// Every tunable knob of every learner. Each learner reads the fields it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub eta: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub units1: usize,
    pub units2: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub max_epochs: usize,
    /// Capped at `max_epochs` when building a training configuration.
    pub patience: usize,
    pub optimizer: Optimizer,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            eta: 0.01,
            lambda: 0.0,
            batch_size: 128,
            units1: 7,
            units2: 5,
            eps1: 0.0,
            eps2: 0.0,
            max_epochs: 500,
            patience: 30,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl Hyperparams {
    /// Sets the field called `name`; integer fields are rounded.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let as_count = || -> Result<usize> {
            if value.is_finite() && value >= 1.0 {
                Ok(value.round() as usize)
            } else {
                Err(Error::Config(format!("{name} must be a positive integer, got {value}")))
            }
        };
        match name {
            "eta" => self.eta = value,
            "lambda" => self.lambda = value,
            "batch_size" => self.batch_size = as_count()?,
            "units1" => self.units1 = as_count()?,
            "units2" => self.units2 = as_count()?,
            "eps1" => self.eps1 = value,
            "eps2" => self.eps2 = value,
            "max_epochs" => self.max_epochs = as_count()?,
            other => return Err(Error::Config(format!("unknown hyperparameter `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "eta" => self.eta,
            "lambda" => self.lambda,
            "batch_size" => self.batch_size as f64,
            "units1" => self.units1 as f64,
            "units2" => self.units2 as f64,
            "eps1" => self.eps1,
            "eps2" => self.eps2,
            "max_epochs" => self.max_epochs as f64,
            other => return Err(Error::Config(format!("unknown hyperparameter `{other}`"))),
        })
    }

    fn train_config(&self, seed: u64, lambda: f64) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience.min(self.max_epochs),
            lambda,
            seed,
            optimizer: self.optimizer,
            ..TrainConfig::default()
        }
    }
}

/// Training loss of a learner family at critical ratio `alpha`. An eps-nv
/// learner with `eps1 == eps2 == 0` trains on the plain newsvendor cost.
pub fn loss_for(kind: LossKind, alpha: f64, hp: &Hyperparams) -> Result<LossSpec> {
    match kind {
        LossKind::Mse => Ok(LossSpec::mse()),
        LossKind::Nvc => LossSpec::nvc(alpha),
        LossKind::EpsNv if hp.eps1 == 0.0 && hp.eps2 == 0.0 => LossSpec::nvc(alpha),
        LossKind::EpsNv => LossSpec::eps_nv(alpha, hp.eps1, hp.eps2),
        LossKind::EpsCp | LossKind::EpsRp => Err(Error::Unsupported(
            "training with the pricing or replacement losses",
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Linear(LinearModel),
    Mlp(MlpModel),
}

impl TrainedModel {
    pub fn predict_all(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Linear(m) => m.predict_all(dataset),
            TrainedModel::Mlp(m) => m.predict_all(dataset),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TrainedModel::Linear(m) => m.theta.len(),
            TrainedModel::Mlp(m) => m.input_dim(),
        }
    }

    /// Linear records start with the dimension, network records with `mlp`.
    pub fn to_text(&self) -> String {
        match self {
            TrainedModel::Linear(m) => m.to_text(),
            TrainedModel::Mlp(m) => m.to_text(),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        if text.trim_start().starts_with("mlp") {
            MlpModel::from_text(text).map(TrainedModel::Mlp)
        } else {
            LinearModel::from_text(text).map(TrainedModel::Linear)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainedModel::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Output of [`Learner::fit`].
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: TrainedModel,
    /// Absent for closed-form and LP fits.
    pub trace: Option<TrainTrace>,
    pub fit_seconds: f64,
}

pub trait Learner: Send + Sync {
    fn name(&self) -> &str;

    fn loss_kind(&self) -> LossKind;

    /// Model hyperparameters searched in the first tuning stage.
    fn model_space(&self) -> SearchSpace;

    fn fit(&self, train: &Dataset, spec: &LossSpec, hp: &Hyperparams, seed: u64) -> Result<Fitted>;

    /// Whether the insensitivity parameters are searched in the second stage.
    fn tunes_eps(&self) -> bool {
        self.loss_kind() == LossKind::EpsNv
    }
}

fn eta_batch_space() -> SearchSpace {
    SearchSpace::new()
        .with("eta", ParamRange::Uniform { lo: 0.005, hi: 0.025 })
        .with("batch_size", ParamRange::IntRange { lo: 64, hi: 256 })
}

/// Ordinary least squares.
pub struct LinearOls;

impl Learner for LinearOls {
    fn name(&self) -> &str {
        "LR-MSE"
    }

    fn loss_kind(&self) -> LossKind {
        LossKind::Mse
    }

    fn model_space(&self) -> SearchSpace {
        SearchSpace::new()
    }

    fn fit(&self, train: &Dataset, _spec: &LossSpec, _hp: &Hyperparams, _seed: u64) -> Result<Fitted> {
        let start = Instant::now();
        let model = linear::fit_mse_closed_form(train)?;
        Ok(Fitted {
            model: TrainedModel::Linear(model),
            trace: None,
            fit_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Linear model trained by mini-batch gradient descent.
pub struct LinearGd {
    name: &'static str,
    kind: LossKind,
    regularized: bool,
}

impl LinearGd {
    pub fn new(name: &'static str, kind: LossKind, regularized: bool) -> Self {
        LinearGd {
            name,
            kind,
            regularized,
        }
    }
}

impl Learner for LinearGd {
    fn name(&self) -> &str {
        self.name
    }

    fn loss_kind(&self) -> LossKind {
        self.kind
    }

    fn model_space(&self) -> SearchSpace {
        let space = eta_batch_space();
        if self.regularized {
            space.with("lambda", ParamRange::Uniform { lo: 0.0, hi: 0.001 })
        } else {
            space
        }
    }

    fn fit(&self, train: &Dataset, spec: &LossSpec, hp: &Hyperparams, seed: u64) -> Result<Fitted> {
        let lambda = if self.regularized { hp.lambda } else { 0.0 };
        let config = TrainConfig {
            optimizer: Optimizer::Sgd,
            ..hp.train_config(seed, lambda)
        };
        let (model, trace) = linear::fit_gd(train, spec, &config)?;
        Ok(Fitted {
            model: TrainedModel::Linear(model),
            fit_seconds: trace.fit_seconds,
            trace: Some(trace),
        })
    }
}

/// Exact eps-nv linear learner through the LP oracle (small data only).
pub struct LinearLp;

impl Learner for LinearLp {
    fn name(&self) -> &str {
        "LR-eNVC-LP"
    }

    fn loss_kind(&self) -> LossKind {
        LossKind::EpsNv
    }

    fn model_space(&self) -> SearchSpace {
        SearchSpace::new()
    }

    fn fit(&self, train: &Dataset, spec: &LossSpec, _hp: &Hyperparams, _seed: u64) -> Result<Fitted> {
        let start = Instant::now();
        let spec = if spec.kind == LossKind::Nvc {
            // eps1 must exceed eps2; the smallest positive band approximates the plain cost
            LossSpec::eps_nv(spec.alpha, f64::MIN_POSITIVE, 0.0)?
        } else {
            *spec
        };
        let model = linear::fit_lp(train, &spec)?;
        Ok(Fitted {
            model: TrainedModel::Linear(model),
            trace: None,
            fit_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Two-hidden-layer sigmoid network.
pub struct Mlp {
    name: &'static str,
    kind: LossKind,
}

impl Mlp {
    pub fn new(name: &'static str, kind: LossKind) -> Self {
        Mlp { name, kind }
    }
}

impl Learner for Mlp {
    fn name(&self) -> &str {
        self.name
    }

    fn loss_kind(&self) -> LossKind {
        self.kind
    }

    fn model_space(&self) -> SearchSpace {
        eta_batch_space()
            .with("units1", ParamRange::IntRange { lo: 4, hi: 10 })
            .with("units2", ParamRange::IntRange { lo: 3, hi: 8 })
    }

    fn fit(&self, train: &Dataset, spec: &LossSpec, hp: &Hyperparams, seed: u64) -> Result<Fitted> {
        let p = train.dim()?;
        let arch = [p, hp.units1, hp.units2, 1];
        let (model, trace) = nn::fit_sgd(train, spec, &arch, &hp.train_config(seed, 0.0))?;
        Ok(Fitted {
            model: TrainedModel::Mlp(model),
            fit_seconds: trace.fit_seconds,
            trace: Some(trace),
        })
    }
}

/// Learners addressable by name.
pub struct LearnerRegistry {
    entries: Vec<Box<dyn Learner>>,
}

impl Default for LearnerRegistry {
    fn default() -> Self {
        let mut r = LearnerRegistry::empty();
        r.register(Box::new(LinearOls));
        r.register(Box::new(LinearGd::new("LR-NVC", LossKind::Nvc, false)));
        r.register(Box::new(LinearGd::new("LR-eNVC", LossKind::EpsNv, false)));
        r.register(Box::new(LinearGd::new("LR-eNVC-R", LossKind::EpsNv, true)));
        r.register(Box::new(LinearLp));
        r.register(Box::new(Mlp::new("NN-MSE", LossKind::Mse)));
        r.register(Box::new(Mlp::new("NN-NVC", LossKind::Nvc)));
        r.register(Box::new(Mlp::new("NN-eNVC", LossKind::EpsNv)));
        r
    }
}

impl LearnerRegistry {
    pub fn empty() -> Self {
        LearnerRegistry {
            entries: Vec::new(),
        }
    }

    /// Adds a learner, replacing any previous one with the same name.
    pub fn register(&mut self, learner: Box<dyn Learner>) {
        self.entries.retain(|l| l.name() != learner.name());
        self.entries.push(learner);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Learner> {
        self.entries
            .iter()
            .find(|l| l.name() == name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownLearner(name.to_string()))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|l| l.name()).collect()
    }
}
