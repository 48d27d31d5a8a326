use serde::{Deserialize, Serialize};

use super::{ClientState, FedError};
use crate::params::{blend_into, compute_mu, encoder_divergence, NamedParams, ENCODER, PREDICTOR};

/// How the FedEMA scaler is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaler {
    /// One `lambda` for every client.
    Fixed(f64),
    /// Per-client `lambda_k = tau / divergence`, set once at the client's
    /// first aggregation.
    Autoscale { tau: f64 },
}

/// Client-side rule for absorbing the new global model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateStrategy {
    /// Online encoder and predictor take the global model; target stays local.
    Replace,
    /// Online encoder, predictor and target all take the global model.
    UpdateBoth,
    /// Divergence-aware EMA of local and global models.
    FedEma { scaler: Scaler },
    /// EMA with fixed decay rates.
    ConstantMu { mu_encoder: f64, mu_predictor: f64 },
    /// No communication: clients keep training their own models.
    Standalone,
}

impl UpdateStrategy {
    pub fn fedema_autoscale(tau: f64) -> Self {
        UpdateStrategy::FedEma { scaler: Scaler::Autoscale { tau } }
    }

    pub fn fedema_fixed(lambda: f64) -> Self {
        UpdateStrategy::FedEma { scaler: Scaler::Fixed(lambda) }
    }

    pub fn label(&self) -> String {
        match self {
            UpdateStrategy::Replace => "replace".into(),
            UpdateStrategy::UpdateBoth => "update_both".into(),
            UpdateStrategy::FedEma { scaler: Scaler::Fixed(l) } => format!("fedema_lambda_{l}"),
            UpdateStrategy::FedEma { scaler: Scaler::Autoscale { tau } } => format!("fedema_tau_{tau}"),
            UpdateStrategy::ConstantMu { mu_encoder, mu_predictor } => {
                format!("constant_mu_{mu_encoder}_{mu_predictor}")
            }
            UpdateStrategy::Standalone => "standalone".into(),
        }
    }

    /// `lambda_k` a freshly registered client starts with.
    pub fn initial_lambda(&self) -> Option<f64> {
        match self {
            UpdateStrategy::FedEma { scaler: Scaler::Fixed(l) } => Some(*l),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: String| Err(FedError::InvalidStrategy(m));
        match *self {
            UpdateStrategy::FedEma { scaler: Scaler::Fixed(l) } if !(l >= 0.0 && l.is_finite()) => {
                bad(format!("lambda {l} must be a nonnegative number"))
            }
            UpdateStrategy::FedEma { scaler: Scaler::Autoscale { tau } } if !(0.0..1.0).contains(&tau) => {
                bad(format!("tau {tau} must be in [0, 1)"))
            }
            UpdateStrategy::ConstantMu { mu_encoder, mu_predictor }
                if !(0.0..=1.0).contains(&mu_encoder) || !(0.0..=1.0).contains(&mu_predictor) =>
            {
                bad(format!("constant mu ({mu_encoder}, {mu_predictor}) outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// What `apply_update` did to one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    /// Decay rate on the online encoder (0 = took the global model).
    pub mu: f64,
    /// FedEMA reset branch fired.
    pub reset: bool,
    /// Encoder divergence between the incoming global model and the
    /// client's last trained online encoder.
    pub divergence: f64,
}

fn set_online(client: &mut ClientState, global: &NamedParams, mu_enc: f64, mu_pred: f64) -> Result<(), FedError> {
    let enc = global.group(ENCODER)?;
    let mut blended = enc.to_vec();
    blend_into(&mut blended, client.nets.online.params(), mu_enc);
    client.nets.online.set_params(&blended)?;
    if let Some(pred) = client.nets.predictor.as_mut() {
        let mut blended = global.group(PREDICTOR)?.to_vec();
        blend_into(&mut blended, pred.params(), mu_pred);
        pred.set_params(&blended)?;
    }
    Ok(())
}

fn set_target(client: &mut ClientState, global: &NamedParams) -> Result<(), FedError> {
    if let Some(target) = client.nets.target.as_mut() {
        target.set_params(global.group(ENCODER)?)?;
    }
    Ok(())
}

/// Applies the strategy's client update for round `round`.
///
/// Round 0 is a plain replacement for every strategy except FedEMA, whose
/// reset branch covers it. The FedEMA reset branch fires when `lambda_k` is
/// unset or the client did not train in round `round - 1`.
pub fn apply_update(
    client: &mut ClientState,
    global: &NamedParams,
    strategy: &UpdateStrategy,
    round: usize,
    allow_off_label: bool,
) -> Result<UpdateOutcome, FedError> {
    let local = client.nets.online_params();
    global.check_same_shape(&local)?;
    let divergence = encoder_divergence(global, &local)?;

    if round == 0 && !matches!(strategy, UpdateStrategy::FedEma { .. }) {
        set_online(client, global, 0.0, 0.0)?;
        return Ok(UpdateOutcome { mu: 0.0, reset: false, divergence });
    }

    let (mu, reset) = match *strategy {
        UpdateStrategy::Replace => {
            set_online(client, global, 0.0, 0.0)?;
            (0.0, false)
        }
        UpdateStrategy::UpdateBoth => {
            set_online(client, global, 0.0, 0.0)?;
            set_target(client, global)?;
            (0.0, false)
        }
        UpdateStrategy::ConstantMu { mu_encoder, mu_predictor } => {
            set_online(client, global, mu_encoder, mu_predictor)?;
            (mu_encoder, false)
        }
        UpdateStrategy::Standalone => (1.0, false),
        UpdateStrategy::FedEma { .. } => {
            if client.nets.shares_weights() && !allow_off_label {
                return Err(FedError::OffLabel);
            }
            let consecutive = round > 0 && client.last_selected_round == Some(round - 1);
            match client.lambda_k {
                Some(lambda) if consecutive => {
                    let mu = compute_mu(lambda, divergence)?;
                    set_online(client, global, mu, mu)?;
                    (mu, false)
                }
                _ => {
                    set_online(client, global, 0.0, 0.0)?;
                    set_target(client, global)?;
                    (0.0, true)
                }
            }
        }
    };
    Ok(UpdateOutcome { mu, reset, divergence })
}
