//! Experiment description. The on-disk form is TOML; see `docs/config.md`.

use serde::{Deserialize, Serialize};

use crate::attacks::{DecoderAttackConfig, GradientMatchConfig};
use crate::bottleneck::BasisInit;
use crate::data::PoisonSpec;
use crate::error::{Error, Result};
use crate::linalg::fnv1a64;
use crate::nn::OptimizerRule;
use crate::protocol::{CutSpec, HeadOwnership, LiftSpec};
use crate::wcc::WccConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BottleneckKind {
    Raw,
    Projection,
    #[serde(rename = "learned-1x1")]
    Learned1x1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LiftKind {
    Fixed,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    /// Client and server called directly in one thread.
    Direct,
    /// Server thread behind an in-process channel pair.
    Inproc,
    /// Server thread behind a TCP connection on `addr`.
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub spread: f64,
    /// Share of samples held out for testing (and attacker auxiliary data).
    pub test_fraction: f64,
    pub images: String,
    pub labels: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            classes: 4,
            per_class: 250,
            height: 16,
            width: 16,
            spread: 0.2,
            test_fraction: 0.2,
            images: String::new(),
            labels: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Conv-ReLU-pool blocks on the client before the cut.
    pub head_depth: usize,
    pub head_channels: usize,
    pub backbone_channels: usize,
    pub backbone_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            head_depth: 1,
            head_channels: 4,
            backbone_channels: 8,
            backbone_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Held-out images attacked; the rest of the test split is auxiliary data.
    pub victims: usize,
    pub decoder: Option<DecoderAttackConfig>,
    pub gradient_match: Option<GradientMatchConfig>,
    pub gm_victims: usize,
    /// Start the clone head from the trained victim head instead of a fresh init.
    pub clone_from_victim: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            victims: 32,
            decoder: Some(DecoderAttackConfig::default()),
            gradient_match: None,
            gm_victims: 4,
            clone_from_victim: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub alpha: f64,
    pub head_ownership: HeadOwnership,
    pub bottleneck: BottleneckKind,
    /// Compression ratio d/k (projection) or C/k_ch (1x1 codec).
    pub cr: f64,
    /// Explicit projection width; overrides `cr`.
    pub k: Option<usize>,
    pub lift: LiftKind,
    pub lift_hidden: usize,
    pub basis_init: BasisInit,
    pub wcc_lambda: f32,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub batch: usize,
    pub rounds: usize,
    /// Evaluate every this many rounds; 0 evaluates only at the end.
    pub eval_every: usize,
    pub transport: TransportKind,
    pub addr: String,
    pub timeout_ms: u64,
    pub out_dir: Option<String>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub poison: Option<PoisonSpec>,
    pub attack: Option<AttackConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 10,
            alpha: 1e7,
            head_ownership: HeadOwnership::Shared,
            bottleneck: BottleneckKind::Projection,
            cr: 8.0,
            k: None,
            lift: LiftKind::Fixed,
            lift_hidden: 128,
            basis_init: BasisInit::Gaussian,
            wcc_lambda: 0.0,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch: 32,
            rounds: 20,
            eval_every: 0,
            transport: TransportKind::Direct,
            addr: "127.0.0.1:7878".into(),
            timeout_ms: 30_000,
            out_dir: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            poison: None,
            attack: None,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses and validates a config document; missing keys take defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
        parse_config(&text)
    }

    /// Canonical TOML with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// FNV-1a of the canonical TOML.
    pub fn hash(&self) -> Result<u64> {
        Ok(fnv1a64(self.to_toml()?.as_bytes()))
    }

    /// Flattened cut shape `[C, H, W]` produced by the head.
    pub fn feature_shape(&self) -> [usize; 3] {
        let m = &self.model;
        let mut h = self.dataset.height;
        let mut w = self.dataset.width;
        for _ in 0..m.head_depth {
            h /= 2;
            w /= 2;
        }
        let c = if m.head_depth == 0 { 1 } else { m.head_channels };
        [c, h, w]
    }

    pub fn cut_dim(&self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Projection width: explicit `k`, else `max(1, round(d / cr))`.
    pub fn projection_k(&self) -> usize {
        self.k
            .unwrap_or_else(|| ((self.cut_dim() as f64 / self.cr).round() as usize).max(1))
    }

    pub fn cut_spec(&self) -> CutSpec {
        match self.bottleneck {
            BottleneckKind::Raw => CutSpec::Raw,
            BottleneckKind::Projection => CutSpec::Projection {
                k: self.projection_k(),
                init: self.basis_init,
                lift: match self.lift {
                    LiftKind::Fixed => LiftSpec::Fixed,
                    LiftKind::Learned => LiftSpec::Learned {
                        hidden: self.lift_hidden,
                    },
                },
            },
            BottleneckKind::Learned1x1 => CutSpec::Channel1x1 { cr: self.cr },
        }
    }

    pub fn optimizer_rule(&self) -> OptimizerRule {
        match self.optimizer {
            OptimizerKind::Adam => OptimizerRule::adam(self.lr),
            OptimizerKind::Sgd => OptimizerRule::sgd(self.lr),
        }
    }

    pub fn wcc(&self) -> Result<WccConfig> {
        WccConfig::new(self.wcc_lambda).map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(config_err("clients must be >= 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(config_err(format!("alpha must be finite and > 0, got {}", self.alpha)));
        }
        if !(self.cr >= 1.0) || !self.cr.is_finite() {
            return Err(config_err(format!("cr must be >= 1, got {}", self.cr)));
        }
        if self.batch == 0 {
            return Err(config_err("batch must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config_err(format!("lr must be > 0, got {}", self.lr)));
        }
        self.wcc()?;
        let ds = &self.dataset;
        if ds.kind == DatasetKind::Blobs {
            if ds.classes < 2 {
                return Err(config_err("dataset.classes must be >= 2"));
            }
            if ds.per_class == 0 || ds.height == 0 || ds.width == 0 {
                return Err(config_err("dataset sizes must be positive"));
            }
        } else if ds.images.is_empty() || ds.labels.is_empty() {
            return Err(config_err("idx dataset needs dataset.images and dataset.labels"));
        }
        if !(0.0..1.0).contains(&ds.test_fraction) {
            return Err(config_err(format!("dataset.test_fraction {} outside [0, 1)", ds.test_fraction)));
        }
        let m = &self.model;
        if m.head_depth > 0 && m.head_channels == 0 {
            return Err(config_err("model.head_channels must be >= 1"));
        }
        if m.backbone_channels == 0 || m.backbone_hidden == 0 {
            return Err(config_err("backbone sizes must be positive"));
        }
        if ds.kind == DatasetKind::Blobs {
            let [c, h, w] = self.feature_shape();
            if c * h * w == 0 {
                return Err(config_err(format!(
                    "head_depth {} pools a {}x{} image to nothing",
                    m.head_depth, ds.height, ds.width
                )));
            }
            let d = c * h * w;
            if let Some(k) = self.k {
                if k == 0 || k > d {
                    return Err(config_err(format!("k = {k} must lie in [1, d = {d}]")));
                }
            }
        }
        if self.bottleneck == BottleneckKind::Learned1x1 && m.head_depth == 0 {
            return Err(config_err("learned-1x1 needs a convolutional cut (head_depth >= 1)"));
        }
        if self.lift == LiftKind::Learned && self.lift_hidden == 0 {
            return Err(config_err("lift_hidden must be >= 1"));
        }
        if let Some(p) = &self.poison {
            p.validate().map_err(|e| config_err(e.to_string()))?;
            if self.clients < 3 {
                return Err(config_err("poisoning runs need >= 3 clients for detection"));
            }
        }
        if let Some(a) = &self.attack {
            if a.victims == 0 {
                return Err(config_err("attack.victims must be >= 1"));
            }
        }
        Ok(())
    }
}
