use serde::{Deserialize, Serialize};

use super::SslError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    NegCosine,
    NtXent,
    InfoNceQueue,
}

impl LossKind {
    pub fn default_temperature(self) -> f64 {
        match self {
            LossKind::NegCosine => 1.0,
            LossKind::NtXent => 0.5,
            LossKind::InfoNceQueue => 0.07,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Byol,
    SimSiam,
    SimClr,
    MoCo,
}

/// Toggle set that defines a Siamese SSL method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub has_predictor: bool,
    pub stop_gradient: bool,
    /// Target encoder follows the online encoder by per-batch EMA.
    pub target_ema: bool,
    /// Target encoder *is* the online encoder.
    pub weight_sharing: bool,
    pub loss_kind: LossKind,
    pub temperature: f64,
    pub queue_size: usize,
    /// Target EMA momentum: `target <- m * target + (1 - m) * online`.
    pub momentum: f64,
    /// Average the negative-cosine loss over both view orders.
    pub symmetrize: bool,
}

pub const DEFAULT_QUEUE_SIZE: usize = 256;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

impl MethodConfig {
    pub fn preset(p: Preset) -> Self {
        let (has_predictor, stop_gradient, target_ema, weight_sharing, loss_kind) = match p {
            Preset::Byol => (true, true, true, false, LossKind::NegCosine),
            Preset::SimSiam => (true, true, false, true, LossKind::NegCosine),
            Preset::SimClr => (false, false, false, true, LossKind::NtXent),
            Preset::MoCo => (false, true, true, false, LossKind::InfoNceQueue),
        };
        Self {
            has_predictor,
            stop_gradient,
            target_ema,
            weight_sharing,
            loss_kind,
            temperature: loss_kind.default_temperature(),
            queue_size: DEFAULT_QUEUE_SIZE,
            momentum: DEFAULT_MOMENTUM,
            symmetrize: true,
        }
    }

    pub fn byol() -> Self {
        Self::preset(Preset::Byol)
    }

    pub fn simsiam() -> Self {
        Self::preset(Preset::SimSiam)
    }

    pub fn simclr() -> Self {
        Self::preset(Preset::SimClr)
    }

    pub fn moco() -> Self {
        Self::preset(Preset::MoCo)
    }

    pub fn without_predictor(mut self) -> Self {
        self.has_predictor = false;
        self
    }

    pub fn without_stop_gradient(mut self) -> Self {
        self.stop_gradient = false;
        self
    }

    pub fn without_ema(mut self) -> Self {
        self.target_ema = false;
        self
    }

    /// Whether a separate target network exists.
    pub fn has_distinct_target(&self) -> bool {
        !self.weight_sharing
    }

    pub fn validate(&self) -> Result<(), SslError> {
        if self.weight_sharing && self.target_ema {
            return Err(SslError::InvalidMethod(
                "weight_sharing and target_ema are mutually exclusive".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SslError::Temperature(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(SslError::InvalidMethod(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if self.loss_kind == LossKind::InfoNceQueue && self.queue_size == 0 {
            return Err(SslError::InvalidMethod("queue_size must be positive".into()));
        }
        Ok(())
    }
}
