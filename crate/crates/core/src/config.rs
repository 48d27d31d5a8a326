//! TOML experiment configuration.
//!
//! Every section is optional; missing keys take desk-scale defaults and
//! unknown keys are rejected. Parsing resolves defaults that depend on
//! other fields (the FedEMA `tau`), so `parse(emit(cfg)) == cfg`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugSpec, BlobSpec, PartitionSpec};
use crate::eval::LinearEvalParams;
use crate::fed::{FedConfig, UpdateStrategy};
use crate::ssl::{LossKind, MethodConfig, NetSpecs, Preset, TrainParams};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TAU: f64 = 0.7;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found}, expected {SCHEMA_VERSION}")]
    Schema { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Prefix of the run id.
    pub name: String,
    pub seed: u64,
    /// Client-training threads. Does not affect results.
    pub workers: usize,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub method: MethodSection,
    pub strategy: StrategySection,
    pub model: ModelConfig,
    pub augmentation: AugSpec,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "run".into(),
            seed: 0,
            workers: 1,
            data: DataConfig::default(),
            federation: FederationConfig::default(),
            method: MethodSection::default(),
            strategy: StrategySection::default(),
            model: ModelConfig::default(),
            augmentation: AugSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Synthetic blob dataset and its label-skew split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    /// Non-IID level `l`: distinct classes per client.
    pub classes_per_client: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let b = BlobSpec::default();
        Self {
            classes: b.classes,
            per_class: b.per_class,
            test_per_class: b.test_per_class,
            dim: b.dim,
            spread: b.spread,
            classes_per_client: 2,
        }
    }
}

impl DataConfig {
    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            classes: self.classes,
            per_class: self.per_class,
            test_per_class: self.test_per_class,
            dim: self.dim,
            spread: self.spread,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    /// `K`.
    pub clients: usize,
    /// Participants per round; all clients when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    /// `R`.
    pub rounds: usize,
    /// `E`.
    pub local_epochs: usize,
    /// `B`.
    pub batch_size: usize,
    /// Base learning rate of the cosine schedule.
    pub lr: f64,
    /// Route messages through the binary frame codec.
    pub wire: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self { clients: 5, clients_per_round: None, rounds: 100, local_epochs: 5, batch_size: 32, lr: 0.5, wire: false }
    }
}

/// A preset plus optional per-toggle overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub preset: Preset,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictor: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_gradient: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_ema: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_sharing: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue_size: Option<usize>,
    /// Target EMA momentum `m`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symmetrize: Option<bool>,
}

impl Default for MethodSection {
    fn default() -> Self {
        Self {
            preset: Preset::Byol,
            predictor: None,
            stop_gradient: None,
            target_ema: None,
            weight_sharing: None,
            loss: None,
            temperature: None,
            queue_size: None,
            momentum: None,
            symmetrize: None,
        }
    }
}

fn preset_name(p: Preset) -> &'static str {
    match p {
        Preset::Byol => "byol",
        Preset::SimSiam => "simsiam",
        Preset::SimClr => "simclr",
        Preset::MoCo => "moco",
    }
}

impl MethodSection {
    pub fn resolve(&self) -> MethodConfig {
        let mut m = MethodConfig::preset(self.preset);
        if let Some(v) = self.predictor {
            m.has_predictor = v;
        }
        if let Some(v) = self.stop_gradient {
            m.stop_gradient = v;
        }
        if let Some(v) = self.target_ema {
            m.target_ema = v;
        }
        if let Some(v) = self.weight_sharing {
            m.weight_sharing = v;
        }
        if let Some(v) = self.loss {
            m.loss_kind = v;
            m.temperature = v.default_temperature();
        }
        if let Some(v) = self.temperature {
            m.temperature = v;
        }
        if let Some(v) = self.queue_size {
            m.queue_size = v;
        }
        if let Some(v) = self.momentum {
            m.momentum = v;
        }
        if let Some(v) = self.symmetrize {
            m.symmetrize = v;
        }
        m
    }

    /// Preset name followed by the toggles that differ from it.
    pub fn label(&self) -> String {
        let base = MethodConfig::preset(self.preset);
        let m = self.resolve();
        let mut label = preset_name(self.preset).to_string();
        let flags = [
            (m.has_predictor != base.has_predictor, if m.has_predictor { "+predictor" } else { "-predictor" }),
            (m.stop_gradient != base.stop_gradient, if m.stop_gradient { "+stopgrad" } else { "-stopgrad" }),
            (m.target_ema != base.target_ema, if m.target_ema { "+ema" } else { "-ema" }),
            (m.weight_sharing != base.weight_sharing, if m.weight_sharing { "+sharing" } else { "-sharing" }),
        ];
        for (differs, tag) in flags {
            if differs {
                label.push_str(tag);
            }
        }
        label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Fedema,
    Replace,
    UpdateBoth,
    ConstantMu,
    Standalone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    pub kind: StrategyKind,
    /// Fixed FedEMA scaler. Exclusive with `tau`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// FedEMA autoscaler target. Exclusive with `lambda`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_encoder: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_predictor: Option<f64>,
    pub allow_off_label: bool,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Fedema,
            lambda: None,
            tau: None,
            mu_encoder: None,
            mu_predictor: None,
            allow_off_label: false,
        }
    }
}

impl StrategySection {
    pub fn fedema_tau(tau: f64) -> Self {
        Self { tau: Some(tau), ..Self::default() }
    }

    pub fn fedema_lambda(lambda: f64) -> Self {
        Self { lambda: Some(lambda), ..Self::default() }
    }

    pub fn of(kind: StrategyKind) -> Self {
        Self { kind, ..Self::default() }.resolved()
    }

    /// Fills the autoscaler default when FedEMA has neither `lambda` nor `tau`.
    fn resolved(mut self) -> Self {
        if self.kind == StrategyKind::Fedema && self.lambda.is_none() && self.tau.is_none() {
            self.tau = Some(DEFAULT_TAU);
        }
        self
    }

    pub fn to_strategy(&self) -> Result<UpdateStrategy> {
        let only_fedema = |name: &str, set: bool| {
            if set && self.kind != StrategyKind::Fedema {
                Err(ConfigError::Invalid(format!("`{name}` only applies to the fedema strategy")))
            } else {
                Ok(())
            }
        };
        only_fedema("lambda", self.lambda.is_some())?;
        only_fedema("tau", self.tau.is_some())?;
        if self.kind != StrategyKind::ConstantMu && (self.mu_encoder.is_some() || self.mu_predictor.is_some()) {
            return Err(ConfigError::Invalid("`mu_encoder`/`mu_predictor` only apply to constant_mu".into()));
        }
        let s = match self.kind {
            StrategyKind::Fedema => match (self.lambda, self.tau) {
                (Some(_), Some(_)) => {
                    return Err(ConfigError::Invalid("give either `lambda` or `tau` for fedema, not both".into()))
                }
                (Some(l), None) => UpdateStrategy::fedema_fixed(l),
                (None, t) => UpdateStrategy::fedema_autoscale(t.unwrap_or(DEFAULT_TAU)),
            },
            StrategyKind::Replace => UpdateStrategy::Replace,
            StrategyKind::UpdateBoth => UpdateStrategy::UpdateBoth,
            StrategyKind::Standalone => UpdateStrategy::Standalone,
            StrategyKind::ConstantMu => match (self.mu_encoder, self.mu_predictor) {
                (Some(e), p) => UpdateStrategy::ConstantMu { mu_encoder: e, mu_predictor: p.unwrap_or(e) },
                _ => return Err(ConfigError::Invalid("constant_mu needs `mu_encoder`".into())),
            },
        };
        s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_hidden: usize,
    pub embedding: usize,
    pub predictor_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder_hidden: 64, embedding: 32, predictor_hidden: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub knn_k: usize,
    /// kNN/collapse monitor period in rounds; 0 = final round only.
    pub every: usize,
    pub linear: LinearEvalParams,
    /// Also write global and uploaded parameters after every round.
    pub checkpoint_every_round: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { knn_k: 5, every: 5, linear: LinearEvalParams::default(), checkpoint_every_round: false }
    }
}

impl ExperimentConfig {
    /// Parses, fills dependent defaults and validates.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills dependent defaults and validates. Call after editing fields.
    pub fn finish(mut self) -> Result<Self> {
        self.strategy = self.strategy.resolved();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema { found: self.schema_version });
        }
        let d = &self.data;
        let f = &self.federation;
        let m = &self.model;
        let positive = [
            ("workers", self.workers),
            ("data.classes", d.classes),
            ("data.per_class", d.per_class),
            ("data.test_per_class", d.test_per_class),
            ("data.dim", d.dim),
            ("data.classes_per_client", d.classes_per_client),
            ("federation.clients", f.clients),
            ("federation.local_epochs", f.local_epochs),
            ("federation.batch_size", f.batch_size),
            ("model.encoder_hidden", m.encoder_hidden),
            ("model.embedding", m.embedding),
            ("model.predictor_hidden", m.predictor_hidden),
            ("eval.knn_k", self.eval.knn_k),
            ("eval.linear.batch_size", self.eval.linear.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(d.spread > 0.0 && d.spread.is_finite()) {
            return bad("data.spread must be positive");
        }
        if d.classes_per_client > d.classes {
            return bad("data.classes_per_client exceeds data.classes");
        }
        if let Some(p) = f.clients_per_round {
            if p == 0 || p > f.clients {
                return bad("federation.clients_per_round must be in 1..=clients");
            }
        }
        if !(f.lr > 0.0 && f.lr.is_finite()) {
            return bad("federation.lr must be positive");
        }
        if !(self.eval.linear.lr > 0.0 && self.eval.linear.lr.is_finite()) {
            return bad("eval.linear.lr must be positive");
        }
        if self.eval.knn_k > d.classes * d.per_class {
            return bad("eval.knn_k exceeds the training set");
        }
        self.augmentation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.method.resolve().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.strategy.to_strategy()?;
        Ok(())
    }

    pub fn method_config(&self) -> MethodConfig {
        self.method.resolve()
    }

    pub fn net_specs(&self) -> NetSpecs {
        NetSpecs::new(self.data.dim, self.model.encoder_hidden, self.model.embedding, self.model.predictor_hidden)
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec { clients: self.federation.clients, classes_per_client: self.data.classes_per_client, seed: self.seed }
    }

    pub fn fed_config(&self) -> Result<FedConfig> {
        let f = &self.federation;
        Ok(FedConfig {
            method: self.method_config(),
            strategy: self.strategy.to_strategy()?,
            specs: self.net_specs(),
            train: TrainParams { epochs: f.local_epochs, batch_size: f.batch_size, aug: self.augmentation.clone() },
            base_lr: f.lr,
            rounds: f.rounds,
            clients_per_round: f.clients_per_round.unwrap_or(f.clients),
            seed: self.seed,
            workers: self.workers,
            wire: f.wire,
            allow_off_label: self.strategy.allow_off_label,
        })
    }

    /// Method and strategy, e.g. `byol-predictor/fedema_tau_0.7`.
    pub fn label(&self) -> String {
        let strategy = self.strategy.to_strategy().map(|s| s.label()).unwrap_or_else(|_| "invalid".into());
        format!("{}/{}", self.method.label(), strategy)
    }

    pub fn run_id(&self) -> String {
        format!("{}-{}-{}-seed{}", self.name, self.method.label(), self.strategy.to_strategy().map(|s| s.label()).unwrap_or_default(), self.seed)
    }
}
