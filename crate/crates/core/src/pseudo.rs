//! Pseudo-label assignment from a local and a global prediction.
//!
//! The collaborative rule prefers the local model when it is confident and
//! falls back to the global model otherwise. The SAGE rule additionally
//! softens a confident local label toward the global model's class by
//! `lambda = exp(-kappa * |max p_l - max p_g|)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::ClassDistribution;
use crate::error::{Error, Result};
use crate::model::Prediction;

/// Sensitivity that gives equal weight to both models at a confidence gap of
/// 0.05, the width of the interval above the default threshold: `ln 2 / 0.05`.
pub const DEFAULT_KAPPA: f64 = 13.86;
pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub tau: f64,
    pub kappa: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            tau: DEFAULT_TAU,
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl CorrectionConfig {
    pub fn new(tau: f64, kappa: f64) -> Result<Self> {
        let cfg = CorrectionConfig { tau, kappa };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig("tau must lie in (0, 1)".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::InvalidConfig("kappa must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecisionKind {
    /// Local model confident; target interpolates local and global classes.
    CorrectedSoft,
    /// Hard label taken from the local model.
    LocalHard,
    /// Hard label taken from the global model.
    GlobalHard,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelDecision {
    pub kind: DecisionKind,
    /// `None` iff `kind == Abstain`.
    pub target: Option<ClassDistribution>,
    pub local_confidence: f64,
    pub global_confidence: f64,
    /// Present iff `kind == CorrectedSoft`.
    pub lambda: Option<f64>,
    pub local_class: usize,
    pub global_class: usize,
}

impl PseudoLabelDecision {
    fn base(p_l: &Prediction, p_g: &Prediction) -> Self {
        PseudoLabelDecision {
            kind: DecisionKind::Abstain,
            target: None,
            local_confidence: p_l.max(),
            global_confidence: p_g.max(),
            lambda: None,
            local_class: p_l.argmax(),
            global_class: p_g.argmax(),
        }
    }

    fn hard(mut self, kind: DecisionKind, class: usize, num_classes: usize) -> Self {
        self.kind = kind;
        self.target = Some(ClassDistribution::one_hot(num_classes, class));
        self
    }

    pub fn is_abstain(&self) -> bool {
        self.kind == DecisionKind::Abstain
    }

    /// Argmax of the target, `None` on abstention.
    pub fn target_class(&self) -> Option<usize> {
        self.target.as_ref().map(ClassDistribution::argmax)
    }

    /// Turn the decision into an abstention, keeping the diagnostics.
    pub fn abstained(mut self) -> Self {
        self.kind = DecisionKind::Abstain;
        self.target = None;
        self.lambda = None;
        self
    }
}

fn check_pair(p_l: &Prediction, p_g: &Prediction) -> Result<()> {
    if p_l.num_classes() != p_g.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: p_l.num_classes(),
            got: p_g.num_classes(),
        });
    }
    Ok(())
}

/// Collaborative assignment: confident local hard label, else confident
/// global hard label, else abstain.
pub fn cpg_assign(
    p_l: &Prediction,
    p_g: &Prediction,
    cfg: &CorrectionConfig,
) -> Result<PseudoLabelDecision> {
    check_pair(p_l, p_g)?;
    let d = PseudoLabelDecision::base(p_l, p_g);
    let c = p_l.num_classes();
    Ok(if d.local_confidence > cfg.tau {
        let class = d.local_class;
        d.hard(DecisionKind::LocalHard, class, c)
    } else if d.global_confidence > cfg.tau {
        let class = d.global_class;
        d.hard(DecisionKind::GlobalHard, class, c)
    } else {
        d
    })
}

pub fn confidence_gap(p_l: &Prediction, p_g: &Prediction) -> f64 {
    (p_l.max() - p_g.max()).abs()
}

pub fn correction_coefficient(delta_c: f64, kappa: f64) -> f64 {
    (-kappa * delta_c).exp()
}

/// `lambda * onehot(argmax p_l) + (1 - lambda) * onehot(argmax p_g)`.
pub fn soft_correct(p_l: &Prediction, p_g: &Prediction, lambda: f64) -> ClassDistribution {
    let c = p_l.num_classes();
    let (local, global) = (p_l.argmax(), p_g.argmax());
    if local == global {
        return ClassDistribution::one_hot(c, local);
    }
    let mut mass = vec![0.0; c];
    mass[local] = lambda;
    mass[global] = 1.0 - lambda;
    ClassDistribution::from_raw(mass)
}

/// Collaborative assignment with the confident-local branch replaced by the
/// confidence-driven soft correction.
pub fn sage_assign(
    p_l: &Prediction,
    p_g: &Prediction,
    cfg: &CorrectionConfig,
) -> Result<PseudoLabelDecision> {
    check_pair(p_l, p_g)?;
    let mut d = PseudoLabelDecision::base(p_l, p_g);
    if d.local_confidence > cfg.tau {
        let lambda = correction_coefficient(confidence_gap(p_l, p_g), cfg.kappa);
        d.kind = DecisionKind::CorrectedSoft;
        d.target = Some(soft_correct(p_l, p_g, lambda));
        d.lambda = Some(lambda);
        Ok(d)
    } else if d.global_confidence > cfg.tau {
        let class = d.global_class;
        Ok(d.hard(DecisionKind::GlobalHard, class, p_l.num_classes()))
    } else {
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoMode {
    /// Local model only (FixMatch-LPL).
    Lpl,
    /// Global model only (FixMatch-GPL).
    Gpl,
    /// Collaborative generation without correction.
    Cpg,
    Sage,
}

impl FromStr for PseudoMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lpl" => Ok(PseudoMode::Lpl),
            "gpl" => Ok(PseudoMode::Gpl),
            "cpg" => Ok(PseudoMode::Cpg),
            "sage" => Ok(PseudoMode::Sage),
            _ => Err(Error::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for PseudoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PseudoMode::Lpl => "lpl",
            PseudoMode::Gpl => "gpl",
            PseudoMode::Cpg => "cpg",
            PseudoMode::Sage => "sage",
        };
        f.write_str(name)
    }
}

pub fn strategy_assign(
    mode: PseudoMode,
    p_l: &Prediction,
    p_g: &Prediction,
    cfg: &CorrectionConfig,
) -> Result<PseudoLabelDecision> {
    check_pair(p_l, p_g)?;
    let c = p_l.num_classes();
    match mode {
        PseudoMode::Lpl => {
            let d = PseudoLabelDecision::base(p_l, p_g);
            Ok(if d.local_confidence > cfg.tau {
                let class = d.local_class;
                d.hard(DecisionKind::LocalHard, class, c)
            } else {
                d
            })
        }
        PseudoMode::Gpl => {
            let d = PseudoLabelDecision::base(p_l, p_g);
            Ok(if d.global_confidence > cfg.tau {
                let class = d.global_class;
                d.hard(DecisionKind::GlobalHard, class, c)
            } else {
                d
            })
        }
        PseudoMode::Cpg => cpg_assign(p_l, p_g, cfg),
        PseudoMode::Sage => sage_assign(p_l, p_g, cfg),
    }
}
