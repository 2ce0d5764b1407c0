//! Operational cost functions and their subgradients with respect to the decision.
//!
//! Every loss is evaluated per sample as `L(s, y)`, where `s` is the observed
//! (possibly censored) value and `y` the decision. Subgradients are taken with
//! respect to `y`; at kinks the zero element is returned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Loss families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// Epsilon-insensitive newsvendor cost.
    EpsNv,
    /// Standard newsvendor (pinball) cost.
    Nvc,
    /// Squared error.
    Mse,
    /// Epsilon-insensitive cost for pricing.
    EpsCp,
    /// Custom cost for preventive replacement.
    EpsRp,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::EpsNv => "eps-nv",
            LossKind::Nvc => "nvc",
            LossKind::Mse => "mse",
            LossKind::EpsCp => "eps-cp",
            LossKind::EpsRp => "eps-rp",
        }
    }
}

/// A fully parameterised loss.
///
/// `alpha` is the critical ratio `c_u / (c_u + c_o)`. `eps1`/`eps2` are the upper
/// and lower offsets of the insensitive band; `c1`/`c2` are the unit costs used by
/// the pricing and replacement variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub alpha: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Value and subgradient (with respect to the decision) of a per-sample loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub subgrad: f64,
}

impl LossSpec {
    pub fn eps_nv(alpha: f64, eps1: f64, eps2: f64) -> Result<Self> {
        let spec = LossSpec {
            kind: LossKind::EpsNv,
            alpha,
            eps1,
            eps2,
            c1: 0.0,
            c2: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn nvc(alpha: f64) -> Result<Self> {
        let spec = LossSpec {
            kind: LossKind::Nvc,
            alpha,
            eps1: 0.0,
            eps2: 0.0,
            c1: 0.0,
            c2: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mse() -> Self {
        LossSpec {
            kind: LossKind::Mse,
            alpha: 0.5,
            eps1: 0.0,
            eps2: 0.0,
            c1: 0.0,
            c2: 0.0,
        }
    }

    pub fn eps_cp(c1: f64, c2: f64, eps: f64) -> Result<Self> {
        let spec = LossSpec {
            kind: LossKind::EpsCp,
            alpha: 0.5,
            eps1: eps,
            eps2: 0.0,
            c1,
            c2,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn eps_rp(c1: f64, c2: f64, eps: f64) -> Result<Self> {
        let spec = LossSpec {
            kind: LossKind::EpsRp,
            alpha: 0.5,
            eps1: eps,
            eps2: 0.0,
            c1,
            c2,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the per-kind parameter constraints.
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.eps1, self.eps2, self.c1, self.c2]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        match self.kind {
            LossKind::EpsNv => {
                check_alpha(self.alpha)?;
                if self.eps2 < 0.0 || self.eps1 <= self.eps2 {
                    return Err(Error::Config(format!(
                        "eps-nv requires eps1 > eps2 >= 0 (got eps1={}, eps2={})",
                        self.eps1, self.eps2
                    )));
                }
            }
            LossKind::Nvc | LossKind::Mse => {
                if self.kind == LossKind::Nvc {
                    check_alpha(self.alpha)?;
                }
                if self.eps1 != 0.0 || self.eps2 != 0.0 {
                    return Err(Error::Config(format!(
                        "{} takes no insensitive band (eps1 = eps2 = 0)",
                        self.kind.name()
                    )));
                }
            }
            LossKind::EpsCp => {
                if self.c1 <= 0.0 || self.c2 <= 0.0 || self.eps1 <= 0.0 {
                    return Err(Error::Config(
                        "eps-cp requires c1 > 0, c2 > 0 and eps > 0".into(),
                    ));
                }
            }
            LossKind::EpsRp => {
                if self.c1 <= 0.0 || self.c2 <= self.c1 || self.eps1 <= 0.0 {
                    return Err(Error::Config(
                        "eps-rp requires c2 > c1 > 0 and eps > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Per-sample value and subgradient, dispatched on `kind`.
    pub fn eval(&self, s: f64, y: f64) -> LossEval {
        match self.kind {
            LossKind::EpsNv => eps_nv_unchecked(s, y, self.alpha, self.eps1, self.eps2),
            LossKind::Nvc => nvc_unchecked(s, y, self.alpha),
            LossKind::Mse => eval_mse(s, y),
            LossKind::EpsCp => eps_cp_unchecked(s, y, self.c1, self.c2, self.eps1),
            LossKind::EpsRp => eps_rp_unchecked(s, y, self.c1, self.c2, self.eps1),
        }
    }

    /// Mean loss over paired targets and decisions.
    pub fn mean(&self, targets: &[f64], decisions: &[f64]) -> f64 {
        debug_assert_eq!(targets.len(), decisions.len());
        if targets.is_empty() {
            return 0.0;
        }
        let total: f64 = targets
            .iter()
            .zip(decisions)
            .map(|(&s, &y)| self.eval(s, y).value)
            .sum();
        total / targets.len() as f64
    }

    /// Same loss family with a different critical ratio.
    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn require(spec: &LossSpec, kind: LossKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Config(format!(
            "expected a {} loss, got {}",
            kind.name(),
            spec.kind.name()
        )));
    }
    spec.validate()
}

/// Epsilon-insensitive newsvendor cost
/// `(1-a)(y-s-eps1)^+ + a(s+eps2-y)^+`.
pub fn eval_eps_nv(s: f64, y: f64, spec: &LossSpec) -> Result<LossEval> {
    require(spec, LossKind::EpsNv)?;
    Ok(eps_nv_unchecked(s, y, spec.alpha, spec.eps1, spec.eps2))
}

/// Standard newsvendor cost `a(s-y)^+ + (1-a)(y-s)^+`.
pub fn eval_nvc(s: f64, y: f64, alpha: f64) -> Result<LossEval> {
    check_alpha(alpha)?;
    Ok(nvc_unchecked(s, y, alpha))
}

/// Squared error `(y-s)^2`.
pub fn eval_mse(s: f64, y: f64) -> LossEval {
    let r = y - s;
    LossEval {
        value: r * r,
        subgrad: 2.0 * r,
    }
}

/// Pricing cost `c2(s-y)^+ + c1(y-s-eps)^+`.
pub fn eval_eps_cp(s: f64, y: f64, spec: &LossSpec) -> Result<LossEval> {
    require(spec, LossKind::EpsCp)?;
    Ok(eps_cp_unchecked(s, y, spec.c1, spec.c2, spec.eps1))
}

/// Preventive replacement cost. Piecewise constant in `y`, so the returned
/// subgradient is always zero.
pub fn eval_eps_rp(s: f64, y: f64, spec: &LossSpec) -> Result<LossEval> {
    require(spec, LossKind::EpsRp)?;
    Ok(eps_rp_unchecked(s, y, spec.c1, spec.c2, spec.eps1))
}

fn eps_nv_unchecked(s: f64, y: f64, alpha: f64, eps1: f64, eps2: f64) -> LossEval {
    let upper = s + eps1;
    let lower = s + eps2;
    if y > upper {
        LossEval {
            value: (1.0 - alpha) * (y - upper),
            subgrad: 1.0 - alpha,
        }
    } else if y < lower {
        LossEval {
            value: alpha * (lower - y),
            subgrad: -alpha,
        }
    } else {
        LossEval {
            value: 0.0,
            subgrad: 0.0,
        }
    }
}

fn nvc_unchecked(s: f64, y: f64, alpha: f64) -> LossEval {
    if y > s {
        LossEval {
            value: (1.0 - alpha) * (y - s),
            subgrad: 1.0 - alpha,
        }
    } else if y < s {
        LossEval {
            value: alpha * (s - y),
            subgrad: -alpha,
        }
    } else {
        LossEval {
            value: 0.0,
            subgrad: 0.0,
        }
    }
}

fn eps_cp_unchecked(s: f64, y: f64, c1: f64, c2: f64, eps: f64) -> LossEval {
    if y < s {
        LossEval {
            value: c2 * (s - y),
            subgrad: -c2,
        }
    } else if y > s + eps {
        LossEval {
            value: c1 * (y - s - eps),
            subgrad: c1,
        }
    } else {
        LossEval {
            value: 0.0,
            subgrad: 0.0,
        }
    }
}

fn eps_rp_unchecked(s: f64, y: f64, c1: f64, c2: f64, eps: f64) -> LossEval {
    let weight = (-s).exp();
    let mut value = 0.0;
    if y - s - eps > 0.0 {
        value += c2 * weight;
    }
    if s + eps - y > 0.0 {
        value += c1 * weight;
    }
    LossEval {
        value,
        subgrad: 0.0,
    }
}

/// Tight uniform bound `max(a, 1-a) * (d_max + eps2)` on the eps-nv cost when
/// targets and decisions lie in `[0, d_max]`.
pub fn uniform_bound(spec: &LossSpec, d_max: f64) -> Result<f64> {
    if spec.kind != LossKind::EpsNv {
        return Err(Error::Unsupported("uniform_bound"));
    }
    spec.validate()?;
    if !(d_max > 0.0) {
        return Err(Error::Config(format!("d_max must be positive, got {d_max}")));
    }
    Ok(spec.alpha.max(1.0 - spec.alpha) * (d_max + spec.eps2))
}

/// Lipschitz constant `max(a, 1-a)` of the (eps-)newsvendor cost in the decision.
pub fn lipschitz_constant(spec: &LossSpec) -> Result<f64> {
    match spec.kind {
        LossKind::EpsNv | LossKind::Nvc => {
            spec.validate()?;
            Ok(spec.alpha.max(1.0 - spec.alpha))
        }
        _ => Err(Error::Unsupported("lipschitz_constant")),
    }
}
