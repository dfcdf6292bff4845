use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Full model plus the five ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Text prompts drive projected vision prompts, gated and modality-weighted.
    Dmdp,
    /// One prompt matrix shared verbatim by both towers.
    Upt,
    /// Independent text and vision prompts, no projection.
    Ipt,
    /// Gate fixed to 1.
    NoGate,
    /// Modality weight fixed to 0.5.
    NoWeightmod,
    /// Vision prompts drive projected text prompts.
    VToT,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Dmdp,
        Variant::Upt,
        Variant::Ipt,
        Variant::NoGate,
        Variant::NoWeightmod,
        Variant::VToT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dmdp => "DMDP",
            Variant::Upt => "UPT",
            Variant::Ipt => "IPT",
            Variant::NoGate => "NO_GATE",
            Variant::NoWeightmod => "NO_WEIGHTMOD",
            Variant::VToT => "V_TO_T",
        }
    }

    pub fn has_gate(self) -> bool {
        self != Variant::NoGate
    }

    pub fn has_weight_mod(self) -> bool {
        self != Variant::NoWeightmod
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Prompt tokens per injection layer (c).
    pub length: usize,
    /// Number of layers receiving fresh prompts (S).
    pub depth: usize,
    pub variant: Variant,
    /// Initial value of the gate prior τ.
    pub gate_prior_init: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            length: 2,
            depth: 9,
            variant: Variant::Dmdp,
            gate_prior_init: 0.5,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.length == 0 {
            return Err(Error::Config("prompt.length must be at least 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("prompt.depth must be at least 1".into()));
        }
        if self.depth > enc.layers {
            return Err(Error::Depth {
                depth: self.depth,
                layers: enc.layers,
            });
        }
        if !self.gate_prior_init.is_finite() {
            return Err(Error::Config("prompt.gate_prior_init must be finite".into()));
        }
        if self.variant == Variant::Upt && enc.text_width != enc.vision_width {
            return Err(Error::Config(format!(
                "UPT shares one prompt matrix and needs text_width == vision_width (got {} and {})",
                enc.text_width, enc.vision_width
            )));
        }
        Ok(())
    }

    /// Same config with the depth clipped to the encoder depth.
    pub fn capped(&self, layers: usize) -> Self {
        PromptConfig {
            depth: self.depth.min(layers),
            ..self.clone()
        }
    }
}
