//! Run configuration (TOML) and its hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::generators::GeneratorConfig;
use crate::nn::Activation;
use crate::objectives::ObjectiveConfig;
use crate::synth::{Action, SynthDomainSpec, ViewSpec};

/// Where a domain's poses come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSource {
    Synth(SynthDomainSpec),
    /// Pose-file pairs (`<stem>.2d`, `<stem>.3d`) for training and evaluation.
    File {
        name: String,
        train: PathBuf,
        eval: PathBuf,
    },
}

impl DomainSource {
    pub fn name(&self) -> &str {
        match self {
            DomainSource::Synth(s) => &s.name,
            DomainSource::File { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub channels: usize,
    pub kernel: usize,
    pub activation: Activation,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            kernel: 3,
            activation: Activation::LeakyRelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub lr_estimator: f64,
    /// Overrides `lr_estimator` for source pretraining only.
    pub lr_pretrain: Option<f64>,
    pub lr_gen_dis: f64,
    pub batch_size: usize,
    pub ema_eta: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 40,
            adapt_epochs: 30,
            lr_estimator: 5e-5,
            lr_pretrain: None,
            lr_gen_dis: 1e-4,
            batch_size: 64,
            ema_eta: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub use_ema: bool,
    pub use_l2d: bool,
    pub use_l3d: bool,
    pub use_dis: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_ema: true,
            use_l2d: true,
            use_l3d: true,
            use_dis: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Default seed; `--seed` overrides it. Not part of the hash.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Training clips generated per synthetic domain.
    #[serde(default = "default_clips")]
    pub clips_per_domain: usize,
    #[serde(default = "default_eval_clips")]
    pub eval_clips: usize,
    /// Required gap between source-only target error and source error, mm.
    /// No check when absent.
    #[serde(default)]
    pub shift_margin_mm: Option<f64>,
    pub source: DomainSource,
    #[serde(default)]
    pub targets: Vec<DomainSource>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_frames() -> usize {
    27
}

fn default_clips() -> usize {
    2000
}

fn default_eval_clips() -> usize {
    500
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Temporal blocks implied by `frames` and the kernel.
    pub fn estimator_blocks(&self) -> Result<usize> {
        let k = self.estimator.kernel;
        let mut rf = k;
        let mut blocks = 0;
        while rf < self.frames {
            rf *= k;
            blocks += 1;
        }
        if rf != self.frames || k < 3 || k % 2 == 0 {
            return Err(Error::config(
                "frames",
                format!("must be a power of the odd kernel {k} (e.g. 9, 27, 81)"),
            ));
        }
        Ok(blocks)
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator_blocks()?;
        if self.estimator.channels == 0 {
            return Err(Error::config("estimator.channels", "must be positive"));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        for (name, lr) in [
            ("training.lr_estimator", Some(t.lr_estimator)),
            ("training.lr_pretrain", t.lr_pretrain),
            ("training.lr_gen_dis", Some(t.lr_gen_dis)),
        ] {
            if let Some(lr) = lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::config(name, "must be positive"));
                }
            }
        }
        if !(0.0..=1.0).contains(&t.ema_eta) {
            return Err(Error::config("training.ema_eta", "must lie in [0, 1]"));
        }
        if self.clips_per_domain == 0 || self.eval_clips == 0 {
            return Err(Error::config("clips_per_domain", "clip counts must be positive"));
        }
        if self.shift_margin_mm.is_some_and(|m| !(m >= 0.0)) {
            return Err(Error::config("shift_margin_mm", "must be >= 0"));
        }
        self.generator.validate()?;
        self.objective.weights.validate()?;
        self.diffusion.validate()?;
        let mut names = vec![self.source.name().to_string()];
        for (i, d) in std::iter::once(&self.source).chain(&self.targets).enumerate() {
            if let DomainSource::Synth(s) = d {
                s.validate()
                    .map_err(|e| Error::config(format!("domain[{i}]"), e.to_string()))?;
            }
            if i > 0 {
                if names.iter().any(|n| n == d.name()) {
                    return Err(Error::config(
                        format!("targets[{}].name", i - 1),
                        "domain names must be unique",
                    ));
                }
                names.push(d.name().to_string());
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form with the seed removed. JSON
    /// objects are key-sorted, so the hash ignores key order in the file.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("seed");
        }
        let text = serde_json::to_string(&v).expect("json");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }

    /// `<hash>-seed<seed>`.
    pub fn run_dir_name(&self, seed: u64) -> String {
        format!("{}-seed{seed}", self.hash())
    }

    /// Paper-default hyperparameters on three small synthetic domains.
    pub fn demo() -> Self {
        let mut source = SynthDomainSpec::plain("source", 11);
        source.view = ViewSpec {
            yaw_deg: 0.0,
            yaw_jitter_deg: 30.0,
            pitch_deg: 0.0,
        };
        source.noise_px = 1.0;
        let mut tg1 = SynthDomainSpec::plain("tg1", 12);
        tg1.view = ViewSpec {
            yaw_deg: 75.0,
            yaw_jitter_deg: 15.0,
            pitch_deg: 20.0,
        };
        tg1.scale = 1.15;
        tg1.noise_px = 2.0;
        tg1.actions = [
            (Action::Walk, 0.2),
            (Action::Reach, 0.2),
            (Action::Squat, 0.2),
            (Action::Wave, 0.4),
        ]
        .into_iter()
        .collect();
        let mut tg2 = SynthDomainSpec::plain("tg2", 13);
        tg2.view = ViewSpec {
            yaw_deg: -70.0,
            yaw_jitter_deg: 15.0,
            pitch_deg: -15.0,
        };
        tg2.scale = 0.9;
        tg2.noise_px = 2.0;
        tg2.actions = [
            (Action::Walk, 0.4),
            (Action::Reach, 0.1),
            (Action::Squat, 0.4),
            (Action::Wave, 0.1),
        ]
        .into_iter()
        .collect();
        Self {
            seed: 0,
            frames: default_frames(),
            clips_per_domain: default_clips(),
            eval_clips: default_eval_clips(),
            shift_margin_mm: Some(20.0),
            source: DomainSource::Synth(source),
            targets: vec![DomainSource::Synth(tg1), DomainSource::Synth(tg2)],
            estimator: EstimatorConfig::default(),
            // 40 epochs at the paper's 5e-5 barely move a fresh network on 2k clips.
            training: TrainingConfig {
                lr_pretrain: Some(1e-3),
                ..TrainingConfig::default()
            },
            generator: GeneratorConfig::default(),
            objective: ObjectiveConfig::default(),
            // Ten epochs is a few hundred steps at this size; samples land
            // farther from the data than the initial noise.
            diffusion: DiffusionConfig {
                epochs: 100,
                learning_rate: 1e-3,
                ..DiffusionConfig::default()
            },
            ablation: AblationConfig::default(),
        }
    }
}
