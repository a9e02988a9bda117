//! Training configuration and its flat `key = value` file format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agda::{AgdaConfig, AgdaMode};
use crate::attention::SpliceMode;
use crate::backbone::StageSpec;
use crate::error::{config_err, Error, Result};
use crate::losses::{CenterGrad, CenterUpdate, LossConfig};
use crate::nn::optim::AdamConfig;

/// Auxiliary loss on the semantic vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLoss {
    None,
    Ams,
    #[default]
    Ril,
}

impl std::fmt::Display for AuxLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuxLoss::None => "none",
            AuxLoss::Ams => "ams",
            AuxLoss::Ril => "ril",
        })
    }
}

impl std::str::FromStr for AuxLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AuxLoss::None),
            "ams" => Ok(AuxLoss::Ams),
            "ril" => Ok(AuxLoss::Ril),
            other => Err(config_err!("unknown auxiliary loss `{}`", other)),
        }
    }
}

/// Whether augmented samples accompany or replace the clean ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgdaPass {
    #[default]
    Accompany,
    Replace,
}

/// Backbones this crate can build.
pub const BACKBONES: &[&str] = &["tiny", "effnet-b4-layout"];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub backbone: String,
    pub sl_t: String,
    pub sl_a: String,
    pub num_attentions: usize,
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub aux_loss: AuxLoss,
    pub center_grad: CenterGrad,
    pub center_update: CenterUpdate,
    pub alpha: f64,
    pub alpha_decay: f64,
    pub ril_on_augmented: bool,
    pub agda: AgdaConfig,
    pub agda_pass: AgdaPass,
    pub patch_size: usize,
    pub growth_rate: usize,
    pub texture_channels: usize,
    pub splice: SpliceMode,
    pub dropout: f64,
    pub real_oversample: usize,
    pub frames_per_video: usize,
    /// Checkpoint whose model weights initialise training (e.g. HQ -> LQ
    /// finetuning). Empty means train from scratch.
    pub init_from: String,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale settings: 380px inputs, batch 48, EfficientNet-B4 stage
    /// layout tapped at L2 (texture) and L5 (attention).
    pub fn full() -> Self {
        TrainConfig {
            backbone: "effnet-b4-layout".into(),
            sl_t: "L2".into(),
            sl_a: "L5".into(),
            num_attentions: 4,
            resolution: 380,
            batch_size: 48,
            epochs: 20,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            aux_loss: AuxLoss::Ril,
            center_grad: CenterGrad::Detached,
            center_update: CenterUpdate::All,
            alpha: 0.05,
            alpha_decay: 0.9,
            ril_on_augmented: true,
            agda: AgdaConfig::default(),
            agda_pass: AgdaPass::Accompany,
            // L2 is 95x95 at 380px, so 2x2 patches would leave a ragged edge
            patch_size: 5,
            growth_rate: 32,
            texture_channels: 96,
            splice: SpliceMode::Sum,
            dropout: 0.0,
            real_oversample: 4,
            frames_per_video: 30,
            init_from: String::new(),
            seed: 0,
        }
    }

    /// Desk-scale preset for the synthetic 64px dataset and tiny backbone.
    pub fn desk() -> Self {
        TrainConfig {
            backbone: "tiny".into(),
            sl_t: "s2".into(),
            sl_a: "s3".into(),
            resolution: 64,
            batch_size: 16,
            epochs: 4,
            growth_rate: 8,
            texture_channels: 16,
            patch_size: 2,
            real_oversample: 1,
            ..Self::full()
        }
    }

    /// Minimal preset for smoke runs.
    pub fn toy() -> Self {
        TrainConfig {
            resolution: 32,
            batch_size: 8,
            epochs: 1,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            other => Err(config_err!("unknown preset `{}` (full, desk, toy)", other)),
        }
    }

    pub fn stage_spec(&self) -> Result<StageSpec> {
        match self.backbone.as_str() {
            "tiny" => Ok(StageSpec::tiny()),
            "effnet-b4-layout" => Ok(StageSpec::efficientnet_b4()),
            other => Err(config_err!(
                "unknown backbone `{}` (available: {})",
                other,
                BACKBONES.join(", ")
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.stage_spec()?;
        spec.index_of(&self.sl_t)
            .map_err(|_| config_err!("sl_t: stage `{}` not in backbone `{}`", self.sl_t, self.backbone))?;
        spec.index_of(&self.sl_a)
            .map_err(|_| config_err!("sl_a: stage `{}` not in backbone `{}`", self.sl_a, self.backbone))?;
        let positive = [
            ("M", self.num_attentions),
            ("resolution", self.resolution),
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("growth_rate", self.growth_rate),
            ("texture_channels", self.texture_channels),
            ("real_oversample", self.real_oversample),
            ("frames_per_video", self.frames_per_video),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(config_err!("{} must be positive", k));
            }
        }
        let (hs, ws) = spec.spatial_size(&self.sl_t, self.resolution, self.resolution)?;
        if hs % self.patch_size != 0 || ws % self.patch_size != 0 {
            return Err(config_err!(
                "patch_size {} does not divide the {} stage size {}x{}",
                self.patch_size,
                self.sl_t,
                hs,
                ws
            ));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(config_err!("lr must be positive"));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config_err!("alpha must lie in [0, 1]"));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return Err(config_err!("alpha_decay must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must lie in [0, 1)"));
        }
        self.loss.validate()?;
        self.agda.validate()?;
        Ok(())
    }

    pub fn to_file(&self) -> RunConfigFile {
        RunConfigFile {
            backbone: self.backbone.clone(),
            sl_t: self.sl_t.clone(),
            sl_a: self.sl_a.clone(),
            m: self.num_attentions,
            resolution: self.resolution,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.optimizer.lr,
            weight_decay: self.optimizer.weight_decay,
            m_in_real: self.loss.m_in_real,
            m_in_fake: self.loss.m_in_fake,
            m_out: self.loss.m_out,
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
            aux_loss: self.aux_loss,
            center_grad: self.center_grad,
            center_update: self.center_update,
            alpha: self.alpha,
            alpha_decay: self.alpha_decay,
            ril_on_augmented: self.ril_on_augmented,
            agda_mode: self.agda.mode,
            agda_resize: self.agda.resize_factor,
            agda_sigma: self.agda.sigma,
            agda_theta: self.agda.theta_d,
            agda_prob: self.agda.apply_probability,
            agda_pass: self.agda_pass,
            patch_size: self.patch_size,
            growth_rate: self.growth_rate,
            texture_channels: self.texture_channels,
            splice: self.splice,
            dropout: self.dropout,
            real_oversample: self.real_oversample,
            frames_per_video: self.frames_per_video,
            init_from: self.init_from.clone(),
            seed: self.seed,
        }
    }

    /// Canonical text form.
    pub fn to_text(&self) -> String {
        self.to_file().to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg = RunConfigFile::parse(text)?.into_config();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The settings that determine parameter shapes; two configs that
    /// agree here can exchange weights.
    pub fn architecture(&self) -> (String, String, String, usize, usize, usize, usize, usize) {
        (
            self.backbone.clone(),
            self.sl_t.clone(),
            self.sl_a.clone(),
            self.num_attentions,
            self.resolution,
            self.patch_size,
            self.growth_rate,
            self.texture_channels,
        )
    }
}

/// Flat on-disk form of [`TrainConfig`]. Every key is required and unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub backbone: String,
    pub sl_t: String,
    pub sl_a: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub m_in_real: f64,
    pub m_in_fake: f64,
    pub m_out: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub aux_loss: AuxLoss,
    pub center_grad: CenterGrad,
    pub center_update: CenterUpdate,
    pub alpha: f64,
    pub alpha_decay: f64,
    pub ril_on_augmented: bool,
    pub agda_mode: AgdaMode,
    pub agda_resize: f64,
    pub agda_sigma: f64,
    pub agda_theta: f64,
    pub agda_prob: f64,
    pub agda_pass: AgdaPass,
    pub patch_size: usize,
    pub growth_rate: usize,
    pub texture_channels: usize,
    pub splice: SpliceMode,
    pub dropout: f64,
    pub real_oversample: usize,
    pub frames_per_video: usize,
    pub init_from: String,
    pub seed: u64,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    pub fn into_config(self) -> TrainConfig {
        TrainConfig {
            backbone: self.backbone,
            sl_t: self.sl_t,
            sl_a: self.sl_a,
            num_attentions: self.m,
            resolution: self.resolution,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            loss: LossConfig {
                m_in_real: self.m_in_real,
                m_in_fake: self.m_in_fake,
                m_out: self.m_out,
                lambda1: self.lambda1,
                lambda2: self.lambda2,
            },
            aux_loss: self.aux_loss,
            center_grad: self.center_grad,
            center_update: self.center_update,
            alpha: self.alpha,
            alpha_decay: self.alpha_decay,
            ril_on_augmented: self.ril_on_augmented,
            agda: AgdaConfig {
                mode: self.agda_mode,
                resize_factor: self.agda_resize,
                sigma: self.agda_sigma,
                theta_d: self.agda_theta,
                apply_probability: self.agda_prob,
            },
            agda_pass: self.agda_pass,
            patch_size: self.patch_size,
            growth_rate: self.growth_rate,
            texture_channels: self.texture_channels,
            splice: self.splice,
            dropout: self.dropout,
            real_oversample: self.real_oversample,
            frames_per_video: self.frames_per_video,
            init_from: self.init_from,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["full", "desk", "toy"] {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn full_preset_carries_reference_hyperparameters() {
        let c = TrainConfig::full();
        assert_eq!((c.resolution, c.batch_size, c.num_attentions), (380, 48, 4));
        assert_eq!((c.optimizer.lr, c.optimizer.weight_decay), (1e-3, 1e-6));
        assert_eq!((c.alpha, c.alpha_decay), (0.05, 0.9));
        assert_eq!((c.sl_t.as_str(), c.sl_a.as_str()), ("L2", "L5"));
        assert_eq!((c.agda.resize_factor, c.agda.sigma, c.agda.theta_d), (0.3, 7.0, 0.5));
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let mut c = TrainConfig::desk();
        c.optimizer.lr = 0.1 + 0.2;
        c.agda.sigma = 1.0 / 3.0;
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = TrainConfig::toy()
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("M "))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = TrainConfig::from_text(&text).unwrap_err().to_string();
        assert!(err.contains("`M`"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{}bogus = 1\n", TrainConfig::toy().to_text());
        let err = TrainConfig::from_text(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = TrainConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn bad_stage_names_are_config_errors() {
        let mut c = TrainConfig::toy();
        c.sl_a = "L5".into();
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("sl_a")));
    }
}
