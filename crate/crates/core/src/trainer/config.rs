use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::sfn::{FusionMode, SfnConfig};

/// Ablation switches for the two retrieval streams and the fusion network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub use_i2t: bool,
    pub use_i2i: bool,
    pub use_sfn: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        use_i2t: true,
        use_i2i: true,
        use_sfn: true,
    };
    pub const I2T_ONLY: Toggles = Toggles {
        use_i2t: true,
        use_i2i: false,
        use_sfn: false,
    };

    /// Table label such as `I2T+I2I+SFN`. Fusion without the image stream
    /// is marked as text-sourced.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_i2t {
            parts.push("I2T");
        }
        if self.use_i2i {
            parts.push("I2I");
        }
        if self.use_sfn {
            parts.push(if self.use_i2i { "SFN" } else { "SFN(text)" });
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_sfn && !self.use_i2i && !self.use_i2t {
            return Err(Error::Config(
                "use_sfn needs a keyword source: enable use_i2i or use_i2t".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.use_i2t {
            parts.push("i2t");
        }
        if self.use_i2i {
            parts.push("i2i");
        }
        if self.use_sfn {
            parts.push("sfn");
        }
        f.write_str(&parts.join(","))
    }
}

/// Parses a comma list such as `i2t,sfn`; an empty string or `none`
/// turns everything off.
impl FromStr for Toggles {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles {
            use_i2t: false,
            use_i2i: false,
            use_sfn: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part.to_ascii_lowercase().as_str() {
                "i2t" => t.use_i2t = true,
                "i2i" => t.use_i2i = true,
                "sfn" => t.use_sfn = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown toggle {other:?}; expected i2t, i2i or sfn"
                    )))
                }
            }
        }
        Ok(t)
    }
}

/// Every training and decoding hyperparameter of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Captions retrieved for the text prompt.
    pub k: usize,
    /// Images retrieved for keyword extraction.
    pub m: usize,
    /// Keyword budget.
    pub p: usize,
    pub fusion_mode: FusionMode,
    pub toggles: Toggles,
    pub sfn_heads: usize,
    pub sfn_d_k: usize,
    pub d_text: usize,
    pub decoder: DecoderConfig,
    pub beam: usize,
    pub max_gen_len: usize,
    /// Epochs of language-model pretraining of the decoder backbone before
    /// it is frozen.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Share of pretraining sequences that use the bare template.
    pub pretrain_bare_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.05,
            k: 4,
            m: 3,
            p: 12,
            fusion_mode: FusionMode::CrossAttention,
            toggles: Toggles::FULL,
            sfn_heads: 4,
            sfn_d_k: 16,
            d_text: 48,
            decoder: DecoderConfig::default(),
            beam: 3,
            max_gen_len: 24,
            pretrain_epochs: 3,
            pretrain_lr: 3e-3,
            pretrain_bare_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("m", self.m),
            ("p", self.p),
            ("sfn_heads", self.sfn_heads),
            ("sfn_d_k", self.sfn_d_k),
            ("d_text", self.d_text),
            ("beam", self.beam),
            ("max_gen_len", self.max_gen_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain_bare_fraction) {
            return Err(Error::Config("pretrain_bare_fraction must be in [0, 1]".into()));
        }
        self.decoder.validate()?;
        if self.prompt_budget() < 8 {
            return Err(Error::Config(format!(
                "max_ctx {} leaves no room for a prompt after {} generated tokens",
                self.decoder.max_ctx, self.max_gen_len
            )));
        }
        self.toggles.validate()
    }

    /// Prompt tokens that fit in the context next to BOS and a full-length
    /// generation.
    pub fn prompt_budget(&self) -> usize {
        self.decoder.max_ctx.saturating_sub(self.max_gen_len + 1)
    }

    pub fn sfn_config(&self, d_vision: usize) -> SfnConfig {
        SfnConfig {
            heads: self.sfn_heads,
            d_k: self.sfn_d_k,
            d_vision,
            d_text: self.d_text,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        crate::checkpoint::fingerprint(self)
    }
}
