//! Run configuration, read from a TOML file with the sections `model`,
//! `prompts`, `svip`, `perturb`, `losses`, `optim`, `data` and `run`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Result, ScingError};
use crate::losses::LossWeights;
use crate::perturb::PerturbConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub prompts: PromptConfig,
    pub svip: SvipConfig,
    pub perturb: PerturbConfig,
    pub losses: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub run: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    /// Initial temperature; stored as `ln(1/tau)`.
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: ImageEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            tau_init: 0.07,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Learnable tokens per class, `L`.
    pub tokens: usize,
    /// Tokens that take part in fusion, `M`.
    pub fused: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            tokens: 4,
            fused: 2,
        }
    }
}

/// How image features enter the prompts during the first stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Plain learnable prompts.
    Static,
    /// One meta-net condition added to every token.
    #[serde(rename = "metanet")]
    MetaNet,
    /// Gated per-token fusion into the first `M` tokens.
    #[default]
    Svip,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Static => "static",
            Fusion::MetaNet => "metanet",
            Fusion::Svip => "svip",
        }
    }
}

/// Where the frozen second-stage class embeddings come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Raw learned prompts with the condition path switched off.
    #[default]
    Raw,
    /// Per-class mean of fused text embeddings over the training images.
    FusedMean,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvipConfig {
    pub fusion: Fusion,
    pub stage2_targets: TargetMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay epochs on the reference schedule of `reference_epochs`;
    /// rescaled to the configured epoch count.
    pub milestones: Vec<usize>,
    pub reference_epochs: usize,
    pub decay: f64,
    /// Identities per batch, `P`.
    pub ids_per_batch: usize,
    /// Images per identity, `K`.
    pub images_per_id: usize,
    /// Second-stage logit scale; `None` reuses `1/tau` from the first stage.
    pub stage2_scale: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            stage1_epochs: 20,
            stage2_epochs: 20,
            stage1_lr: 3.5e-3,
            stage2_lr: 2e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            milestones: vec![30, 50],
            reference_epochs: 120,
            decay: 0.1,
            ids_per_batch: 16,
            images_per_id: 4,
            stage2_scale: None,
        }
    }
}

impl OptimConfig {
    /// Preset matching the full-scale schedule: lr 5e-5, decay at 30 and 50,
    /// 120 epochs per stage.
    pub fn full_schedule() -> Self {
        OptimConfig {
            stage1_epochs: 120,
            stage2_epochs: 120,
            stage1_lr: 5e-5,
            stage2_lr: 5e-5,
            ..OptimConfig::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.images_per_id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train_identities: usize,
    pub eval_identities: usize,
    pub cameras: usize,
    pub images_per_id_per_cam: usize,
    /// Query images per evaluation identity and camera; the rest go to the
    /// gallery.
    pub queries_per_id_per_cam: usize,
    /// Fraction of query images carrying an occluder.
    pub occluded_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data/desk"),
            train_identities: 50,
            eval_identities: 20,
            cameras: 2,
            images_per_id_per_cam: 12,
            queries_per_id_per_cam: 2,
            occluded_fraction: 0.4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 1 keeps every reduction in a fixed order.
    pub threads: usize,
    /// Drop gallery entries sharing identity and camera with the query.
    pub exclude_same_camera: bool,
    /// Write a checkpoint after every epoch, not only at the end of a stage.
    pub checkpoint_every_epoch: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            threads: 1,
            exclude_same_camera: true,
            checkpoint_every_epoch: true,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| ScingError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ScingError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            ScingError::Config(msg) => ScingError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.image.validate()?;
        if !(self.model.tau_init > 0.0) {
            return Err(ScingError::Config("model.tau_init must be positive".into()));
        }
        let p = &self.prompts;
        if p.fused == 0 || p.fused >= p.tokens {
            return Err(ScingError::Config(format!(
                "prompts.fused={} must satisfy 1 <= M < L={}",
                p.fused, p.tokens
            )));
        }
        self.perturb.validate()?;
        self.losses.validate()?;
        let o = &self.optim;
        if o.ids_per_batch == 0 || o.images_per_id == 0 {
            return Err(ScingError::Config("batch dimensions must be positive".into()));
        }
        for (name, v) in [
            ("stage1_lr", o.stage1_lr),
            ("stage2_lr", o.stage2_lr),
            ("eps", o.eps),
            ("decay", o.decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScingError::Config(format!("optim.{name}={v} must be positive")));
            }
        }
        if o.weight_decay < 0.0 || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(ScingError::Config("optim moments or weight decay out of range".into()));
        }
        if o.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ScingError::Config("optim.milestones must be strictly increasing".into()));
        }
        if o.milestones.last().is_some_and(|m| *m >= o.reference_epochs) {
            return Err(ScingError::Config(
                "optim.milestones must lie below optim.reference_epochs".into(),
            ));
        }
        if let Some(s) = o.stage2_scale {
            if !(s > 0.0) {
                return Err(ScingError::Config("optim.stage2_scale must be positive".into()));
            }
        }
        let d = &self.data;
        if d.train_identities < 2 || d.eval_identities < 1 || d.cameras < 1 {
            return Err(ScingError::Config(
                "data needs >= 2 training identities, >= 1 evaluation identity and >= 1 camera"
                    .into(),
            ));
        }
        if d.queries_per_id_per_cam >= d.images_per_id_per_cam {
            return Err(ScingError::Config(
                "data.queries_per_id_per_cam must leave gallery images".into(),
            ));
        }
        if !(0.0..=1.0).contains(&d.occluded_fraction) {
            return Err(ScingError::Config("data.occluded_fraction must be in [0, 1]".into()));
        }
        if self.run.threads == 0 {
            return Err(ScingError::Config("run.threads must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = Config::default();
        let back = Config::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = Config::from_toml("[svip]\nfusion = \"metanet\"\n[losses]\nlambda = 0.0\n").unwrap();
        assert_eq!(cfg.svip.fusion, Fusion::MetaNet);
        assert_eq!(cfg.losses.lambda, 0.0);
        assert_eq!(cfg.prompts, PromptConfig::default());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Config::from_toml("[optim]\nstage1_lr = 1e-3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, ScingError::Config(_)));
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = Config::default();
        cfg.prompts.fused = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.optim.milestones = vec![50, 30];
        assert!(cfg.validate().is_err());
    }
}
