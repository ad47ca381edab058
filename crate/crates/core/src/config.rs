//! Declarative run configuration.
//!
//! Every knob has a default; a config file only overrides what it names.
//! `Config::set` implements the CLI's `--set section.key=value` overrides,
//! and `apply_ablation` maps the named ablation presets onto the underlying
//! switches.

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleKind;
use crate::error::{CadirecError, Result};
use crate::sr_encoder::MixerKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewSource {
    /// Context-conditioned reverse diffusion (the full model).
    Diffusion,
    /// Uniform random substitution (the no-context-guidance ablation).
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub max_len: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { max_len: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub denoiser_layers: usize,
    pub denoiser_heads: usize,
    pub denoiser_kind: MixerKind,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d: 64,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            denoiser_layers: 1,
            denoiser_heads: 2,
            denoiser_kind: MixerKind::Attention,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSection {
    #[serde(rename = "T")]
    pub t_max: usize,
    pub schedule: ScheduleKind,
    pub beta0: f64,
    /// Rounding term over every non-pad position instead of selected only.
    pub rounding_full_sequence: bool,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            t_max: 1000,
            schedule: ScheduleKind::Linear,
            beta0: 1e-4,
            rounding_full_sequence: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    /// Respaced reverse steps used when sampling views.
    pub respace_steps: usize,
    /// Feed the argmax-rounded prediction into the posterior mean.
    pub snap_posterior: bool,
    pub view_source: ViewSource,
    /// Generate views once per epoch instead of fresh at every step.
    pub cache_per_epoch: bool,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            respace_steps: 50,
            snap_posterior: true,
            view_source: ViewSource::Diffusion,
            cache_per_epoch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveSection {
    /// Similarity divisor; 1.0 reproduces the plain inner-product loss.
    pub temperature: f64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection { temperature: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha: 0.2,
            beta: 0.4,
            rho: 0.2,
            lr: 1e-3,
            batch_size: 256,
            epochs: 200,
            seed: 42,
            patience: 10,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub exclude_seen: bool,
    /// Inclusive upper bounds of the sequence-length buckets.
    pub length_boundaries: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![5, 10],
            exclude_seen: false,
            length_boundaries: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub augment: AugmentSection,
    pub contrastive: ContrastiveSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(CadirecError::Config(msg.to_string()))
            }
        };
        c(self.model.d >= 1, "model.d must be >= 1")?;
        c(
            self.model.d % self.model.heads == 0,
            "model.d must be divisible by model.heads",
        )?;
        c(
            self.model.d % self.model.denoiser_heads == 0,
            "model.d must be divisible by model.denoiser_heads",
        )?;
        c(
            (0.0..1.0).contains(&self.model.dropout),
            "model.dropout must be in [0,1)",
        )?;
        c(self.diffusion.t_max >= 1, "diffusion.T must be >= 1")?;
        c(
            (0.0..1.0).contains(&self.diffusion.beta0),
            "diffusion.beta0 must be in [0,1)",
        )?;
        c(self.train.alpha >= 0.0, "train.alpha must be >= 0")?;
        c(self.train.beta >= 0.0, "train.beta must be >= 0")?;
        c(
            (0.0..=1.0).contains(&self.train.rho),
            "train.rho must be in [0,1]",
        )?;
        c(self.train.lr >= 0.0, "train.lr must be >= 0")?;
        c(self.train.batch_size >= 1, "train.batch_size must be >= 1")?;
        c(self.data.max_len >= 1, "data.max_len must be >= 1")?;
        c(
            self.augment.respace_steps >= 1,
            "augment.respace_steps must be >= 1",
        )?;
        c(
            self.contrastive.temperature > 0.0,
            "contrastive.temperature must be > 0",
        )?;
        c(!self.eval.ks.is_empty(), "eval.ks must be nonempty")?;
        Ok(())
    }

    /// Apply one `section.key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| CadirecError::Config(format!("cannot parse {what} from {value:?}"));
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad(stringify!($ty)))?
            };
        }
        match key {
            "data.max_len" => self.data.max_len = num!(usize),
            "model.d" => self.model.d = num!(usize),
            "model.layers" => self.model.layers = num!(usize),
            "model.heads" => self.model.heads = num!(usize),
            "model.dropout" => self.model.dropout = num!(f64),
            "model.denoiser_layers" => self.model.denoiser_layers = num!(usize),
            "model.denoiser_heads" => self.model.denoiser_heads = num!(usize),
            "model.denoiser_kind" => {
                self.model.denoiser_kind = match value {
                    "attention" => MixerKind::Attention,
                    "feed_forward" => MixerKind::FeedForward,
                    _ => return Err(bad("denoiser kind (attention|feed_forward)")),
                }
            }
            "model.init_std" => self.model.init_std = num!(f64),
            "diffusion.T" => self.diffusion.t_max = num!(usize),
            "diffusion.schedule" => self.diffusion.schedule = value.parse()?,
            "diffusion.beta0" => self.diffusion.beta0 = num!(f64),
            "diffusion.rounding_full_sequence" => {
                self.diffusion.rounding_full_sequence = num!(bool)
            }
            "augment.respace_steps" => self.augment.respace_steps = num!(usize),
            "augment.snap_posterior" => self.augment.snap_posterior = num!(bool),
            "augment.view_source" => {
                self.augment.view_source = match value {
                    "diffusion" => ViewSource::Diffusion,
                    "random" => ViewSource::Random,
                    _ => return Err(bad("view source (diffusion|random)")),
                }
            }
            "augment.cache_per_epoch" => self.augment.cache_per_epoch = num!(bool),
            "contrastive.temperature" => self.contrastive.temperature = num!(f64),
            "train.alpha" => self.train.alpha = num!(f64),
            "train.beta" => self.train.beta = num!(f64),
            "train.rho" => self.train.rho = num!(f64),
            "train.lr" => self.train.lr = num!(f64),
            "train.batch_size" => self.train.batch_size = num!(usize),
            "train.epochs" => self.train.epochs = num!(usize),
            "train.seed" => self.train.seed = num!(u64),
            "train.patience" => self.train.patience = num!(usize),
            "train.clip_norm" => self.train.clip_norm = num!(f64),
            "eval.exclude_seen" => self.eval.exclude_seen = num!(bool),
            other => {
                return Err(CadirecError::Config(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Named ablation presets:
    /// - `wo-cg`: random-substitution views (no context guidance)
    /// - `wo-benc`: denoiser attention replaced by a position-wise
    ///   feed-forward of equal width
    /// - `wo-ld`: diffusion loss weight β = 0
    /// - `wo-lcl`: contrastive loss weight α = 0
    pub fn apply_ablation(&mut self, preset: &str) -> Result<()> {
        match preset {
            "wo-cg" => self.augment.view_source = ViewSource::Random,
            "wo-benc" => self.model.denoiser_kind = MixerKind::FeedForward,
            "wo-ld" => self.train.beta = 0.0,
            "wo-lcl" => self.train.alpha = 0.0,
            other => {
                return Err(CadirecError::Config(format!(
                    "unknown ablation preset {other:?} (wo-cg|wo-benc|wo-ld|wo-lcl)"
                )))
            }
        }
        Ok(())
    }

    /// Stable fingerprint of the canonical JSON encoding (FNV-1a).
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}
