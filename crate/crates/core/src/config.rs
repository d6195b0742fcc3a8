//! Whole-pipeline configuration with cross-module checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::duolm::train::TrainConfig;
use crate::duolm::DuoLmConfig;
use crate::error::{Error, Result};
use crate::flowdec::{FlowConfig, FlowTrainConfig, VocoderConfig};
use crate::frontend::{FrontendConfig, WarmupConfig};
use crate::fsq::TokenizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Generation cap per utterance; hitting it marks the output truncated.
    pub max_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_steps: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data: GenConfig,
    pub frontend: FrontendConfig,
    pub warmup: WarmupConfig,
    pub tokenizer: TokenizerConfig,
    pub duolm: DuoLmConfig,
    pub pretrain: TrainConfig,
    pub s2st: TrainConfig,
    pub flow: FlowConfig,
    pub flow_train: FlowTrainConfig,
    pub vocoder: VocoderConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: "runs/default".into(),
            data: GenConfig::default(),
            frontend: FrontendConfig::default(),
            warmup: WarmupConfig::default(),
            tokenizer: TokenizerConfig::default(),
            duolm: DuoLmConfig::default(),
            pretrain: TrainConfig {
                epochs: 15,
                ..Default::default()
            },
            s2st: TrainConfig {
                epochs: 20,
                ..Default::default()
            },
            flow: FlowConfig::default(),
            flow_train: FlowTrainConfig::default(),
            vocoder: VocoderConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn mismatch(field: &str, message: String) -> Error {
    Error::config(field, message)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Longest joint sequence the corpus can produce (text or delayed audio,
    /// each with its EOS).
    pub fn max_joint_len(&self) -> usize {
        let d = &self.data;
        (d.max_len + 1).max(d.max_len * d.max_expansion + 1 + self.duolm.delay)
    }

    /// Validates every section, then the agreements between them.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.frontend.validate()?;
        self.tokenizer.validate()?;
        self.duolm.validate()?;
        self.flow.validate()?;
        self.pretrain.validate("pretrain")?;
        self.s2st.validate("s2st")?;
        let d = &self.data;
        if self.frontend.lm_dim != self.duolm.d_model {
            return Err(mismatch(
                "frontend.lm_dim",
                format!("{} must equal duolm.d_model {}", self.frontend.lm_dim, self.duolm.d_model),
            ));
        }
        if self.frontend.feat_dim != d.feat_dim || self.tokenizer.feat_dim != d.feat_dim {
            return Err(mismatch("frontend.feat_dim", format!("frontend and tokenizer must use data.feat_dim {}", d.feat_dim)));
        }
        if self.duolm.text_vocab.words != d.n_words {
            return Err(mismatch(
                "duolm.text_vocab.words",
                format!("{} must equal data.n_words {}", self.duolm.text_vocab.words, d.n_words),
            ));
        }
        if self.tokenizer.n_classes != d.n_words || self.tokenizer.frames_per_label != d.frames_per_token {
            return Err(mismatch(
                "tokenizer.n_classes",
                "tokenizer classes and frames_per_label must match data.n_words and data.frames_per_token".into(),
            ));
        }
        if self.duolm.audio_vocab.codebook < d.codebook_size {
            return Err(mismatch(
                "duolm.audio_vocab.codebook",
                format!("{} cannot hold data.codebook_size {}", self.duolm.audio_vocab.codebook, d.codebook_size),
            ));
        }
        if self.flow.codebook_size < d.codebook_size || self.tokenizer.fsq.codebook_size() < d.codebook_size {
            return Err(mismatch(
                "flow.codebook_size",
                format!("flow decoder and FSQ codebook must cover data.codebook_size {}", d.codebook_size),
            ));
        }
        let longest = d.max_len * d.frames_per_token;
        let prefix = self.frontend.output_len(longest).ok_or_else(|| {
            mismatch(
                "frontend.conv",
                format!("shortest utterance ({} frames) is too short for the subsampler", d.min_len * d.frames_per_token),
            )
        })?;
        if self.frontend.output_len(d.min_len * d.frames_per_token).is_none() {
            return Err(mismatch("frontend.conv", "shortest utterance is too short for the subsampler".into()));
        }
        if prefix > self.frontend.max_positions {
            return Err(mismatch(
                "frontend.max_positions",
                format!("{} < {prefix} encoder positions needed", self.frontend.max_positions),
            ));
        }
        let needed = prefix + 1 + self.max_joint_len();
        if self.duolm.max_positions < needed {
            return Err(mismatch(
                "duolm.max_positions",
                format!("{} < {needed} positions needed for the longest utterance", self.duolm.max_positions),
            ));
        }
        if self.eval.max_steps == 0 || self.duolm.max_positions < prefix + 1 + self.eval.max_steps {
            return Err(mismatch(
                "eval.max_steps",
                format!("must be positive and fit in duolm.max_positions after a {prefix}-row prefix"),
            ));
        }
        if self.vocoder.hop == 0 || self.vocoder.window == 0 || self.vocoder.sample_rate == 0 {
            return Err(mismatch("vocoder", "hop, window and sample_rate must be positive".into()));
        }
        if self.flow_train.batch_size == 0 || self.warmup.batch_size == 0 {
            return Err(mismatch("flow_train.batch_size", "batch sizes must be positive".into()));
        }
        Ok(())
    }
}
