//! The full two-tower bundle: frozen patch encoder, trainable
//! projector, language model, and the learnable contrastive
//! temperature. Which parts bind as trainable depends on the stage.

use serde::{Deserialize, Serialize};

use crate::init;
use crate::lm::{LanguageModel, LmConfig, LmVars};
use crate::projector::{Projector, ProjectorVariant, ProjectorVars};
use crate::tensor::{Result as TResult, Tape, Tensor, Var};
use crate::vision::{patchify, EncoderConfig, EncoderVars, ImageTensor, VisionEncoder};

/// CLIP-convention temperature init: 1 / 0.07.
pub const TAU_INIT: f64 = 1.0 / 0.07;
pub const TAU_MIN: f64 = 1.0;
pub const TAU_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Stage 1: only the projector and the temperature train.
    #[serde(rename = "align")]
    Align,
    /// Stage 2: projector and language model train; temperature frozen.
    #[serde(rename = "tune")]
    Tune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Align => write!(f, "align"),
            Stage::Tune => write!(f, "tune"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub lm: LmConfig,
    pub encoder: EncoderConfig,
    pub projector: ProjectorVariant,
    pub image_h: usize,
    pub image_w: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            encoder: EncoderConfig::default(),
            projector: ProjectorVariant::Mlp2Gelu,
            image_h: 28,
            image_w: 28,
        }
    }
}

impl ModelConfig {
    pub fn patch_count(&self) -> usize {
        (self.image_h / self.encoder.patch_size) * (self.image_w / self.encoder.patch_size)
    }
}

#[derive(Debug, Clone)]
pub struct VlmModel {
    pub config: ModelConfig,
    pub encoder: VisionEncoder,
    pub projector: Projector,
    pub lm: LanguageModel,
    pub log_tau: Tensor,
}

impl VlmModel {
    pub fn init(seed: u64, config: ModelConfig) -> Self {
        let mut rng = init::seeded_rng(seed);
        let encoder = VisionEncoder::init(&mut rng, config.encoder.clone());
        let projector = Projector::init(
            &mut rng,
            config.projector,
            config.encoder.feature_width,
            config.lm.width,
        );
        let lm = LanguageModel::init(&mut rng, config.lm.clone());
        Self {
            config,
            encoder,
            projector,
            lm,
            log_tau: Tensor::scalar(TAU_INIT.ln()),
        }
    }

    pub fn bind(&self, tape: &Tape, stage: Stage) -> ModelVars {
        let (proj_train, lm_train, tau_train) = match stage {
            Stage::Align => (true, false, true),
            Stage::Tune => (true, true, false),
        };
        ModelVars {
            stage,
            encoder: self.encoder.bind(tape),
            projector: self.projector.bind(tape, proj_train),
            lm: self.lm.bind(tape, lm_train),
            log_tau: tape.leaf(&self.log_tau.clone().with_requires_grad(tau_train)),
        }
    }

    /// All named parameters in a fixed deterministic order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit(f);
        self.projector.visit(f);
        self.lm.visit(f);
        f("tau.log", &self.log_tau);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_mut(f);
        self.projector.visit_mut(f);
        self.lm.visit_mut(f);
        f("tau.log", &mut self.log_tau);
    }

    /// Whether a named parameter trains in the given stage.
    pub fn is_trainable(name: &str, stage: Stage) -> bool {
        match stage {
            Stage::Align => name.starts_with("proj.") || name == "tau.log",
            Stage::Tune => name.starts_with("proj.") || name.starts_with("lm."),
        }
    }

    /// Clamps the temperature into [TAU_MIN, TAU_MAX]; applied after
    /// every optimizer step.
    pub fn clamp_tau(&mut self) {
        let v = self.log_tau.data()[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());
        self.log_tau.data_mut()[0] = v;
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    /// Frozen patch features of an image, computed off-tape; cacheable
    /// because the encoder never changes.
    pub fn encode_image(&self, image: &ImageTensor) -> Result<Tensor, crate::vision::VisionError> {
        let patches = patchify(image, self.config.encoder.patch_size)?;
        self.encoder.encode_tensor(&patches)
    }
}

pub struct ModelVars {
    pub stage: Stage,
    pub encoder: EncoderVars,
    pub projector: ProjectorVars,
    pub lm: LmVars,
    pub log_tau: Var,
}

impl ModelVars {
    /// tau = exp(log_tau), as a tape node so gradients reach log_tau.
    pub fn tau(&self) -> Var {
        self.log_tau.exp()
    }

    /// Projects cached patch features (a constant) into LM space.
    pub fn project_features(&self, tape: &Tape, features: &Tensor) -> TResult<Var> {
        self.projector.project(&tape.constant(features))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Var)) {
        self.encoder.visit(f);
        self.projector.visit(f);
        self.lm.visit(f);
        f("tau.log", &self.log_tau);
    }
}
