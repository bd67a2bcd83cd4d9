use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionDims;
use crate::config::{self, Section};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Cnp,
    Rcnp,
    Tnp,
    PtTnp,
    TeTnp,
    TePtTnp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Cnp,
        Variant::Rcnp,
        Variant::Tnp,
        Variant::PtTnp,
        Variant::TeTnp,
        Variant::TePtTnp,
    ];

    pub fn uses_pseudo_tokens(self) -> bool {
        matches!(self, Variant::PtTnp | Variant::TePtTnp)
    }

    /// Whether predictions are invariant to a joint shift of all inputs.
    pub fn is_translation_equivariant(self) -> bool {
        matches!(self, Variant::Rcnp | Variant::TeTnp | Variant::TePtTnp)
    }

    pub fn is_transformer(self) -> bool {
        !matches!(self, Variant::Cnp | Variant::Rcnp)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cnp => "cnp",
            Variant::Rcnp => "rcnp",
            Variant::Tnp => "tnp",
            Variant::PtTnp => "pt-tnp",
            Variant::TeTnp => "te-tnp",
            Variant::TePtTnp => "te-pt-tnp",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?} (expected one of cnp, rcnp, tnp, pt-tnp, te-tnp, te-pt-tnp)")))
    }
}

/// Wiring between pseudo-tokens, context and targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoStyle {
    /// Pseudo-tokens cross-attend the context then self-attend each layer;
    /// targets read the final pseudo-tokens once.
    Perceiver,
    /// Pseudo-tokens cross-attend the context, then context and targets
    /// cross-attend the pseudo-tokens, every layer.
    Ist,
}

impl fmt::Display for PseudoStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PseudoStyle::Perceiver => "perceiver",
            PseudoStyle::Ist => "ist",
        })
    }
}

impl FromStr for PseudoStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perceiver" => Ok(PseudoStyle::Perceiver),
            "ist" => Ok(PseudoStyle::Ist),
            _ => Err(Error::Config(format!(
                "unknown pseudo-token style {s:?} (expected perceiver or ist)"
            ))),
        }
    }
}

/// How TE-PT-TNP places pseudo-locations relative to the context inputs:
/// `v_m = v0_m + sum_n psi_mn x_n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoLocationInit {
    /// `psi` is single-head attention from pseudo-tokens to context tokens.
    Attention,
    /// `psi = 1 / N_c`.
    Uniform,
    /// `v = v0` with no data-dependent offset. Breaks translation
    /// equivariance; exists to check that the suites notice.
    Fixed,
}

impl fmt::Display for PseudoLocationInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PseudoLocationInit::Attention => "attention",
            PseudoLocationInit::Uniform => "uniform",
            PseudoLocationInit::Fixed => "fixed",
        })
    }
}

impl FromStr for PseudoLocationInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(PseudoLocationInit::Attention),
            "uniform" => Ok(PseudoLocationInit::Uniform),
            "fixed" => Ok(PseudoLocationInit::Fixed),
            _ => Err(Error::Config(format!("unknown pseudo-location init {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub qk_dim: usize,
    pub value_dim: usize,
    /// Zero for variants without pseudo-tokens.
    pub pseudo_tokens: usize,
    pub pseudo_style: PseudoStyle,
    pub scaled_logits: bool,
    /// Input-location updates inside TE attention layers.
    pub location_updates: bool,
    pub pseudo_locations: PseudoLocationInit,
    pub input_dim: usize,
    pub output_dim: usize,
}

pub const DEFAULT_PSEUDO_TOKENS: usize = 16;

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn new(variant: Variant) -> Self {
        ModelConfig {
            variant,
            token_dim: 64,
            layers: 3,
            heads: 4,
            qk_dim: 16,
            value_dim: 16,
            pseudo_tokens: if variant.uses_pseudo_tokens() {
                DEFAULT_PSEUDO_TOKENS
            } else {
                0
            },
            pseudo_style: PseudoStyle::Ist,
            scaled_logits: false,
            location_updates: true,
            pseudo_locations: PseudoLocationInit::Attention,
            input_dim: 1,
            output_dim: 1,
        }
    }

    /// A small instance for tests and gradient checks.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            token_dim: 8,
            layers: 2,
            heads: 2,
            qk_dim: 4,
            value_dim: 4,
            pseudo_tokens: if variant.uses_pseudo_tokens() { 3 } else { 0 },
            ..Self::new(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("token_dim", self.token_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("qk_dim", self.qk_dim),
            ("value_dim", self.value_dim),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        match (self.variant.uses_pseudo_tokens(), self.pseudo_tokens) {
            (true, 0) => Err(Error::Invalid(format!(
                "{} needs at least one pseudo-token",
                self.variant
            ))),
            (false, m) if m > 0 => Err(Error::Invalid(format!(
                "{} has no pseudo-tokens but pseudo_tokens = {m}",
                self.variant
            ))),
            _ => Ok(()),
        }
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            token_dim: self.token_dim,
            heads: self.heads,
            qk_dim: self.qk_dim,
            value_dim: self.value_dim,
            scaled: self.scaled_logits,
        }
    }
}

impl Section for ModelConfig {
    const NAME: &'static str = "model";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("token_dim", self.token_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("qk_dim", self.qk_dim.to_string()),
            ("value_dim", self.value_dim.to_string()),
            ("pseudo_tokens", self.pseudo_tokens.to_string()),
            ("pseudo_style", self.pseudo_style.to_string()),
            ("scaled_logits", self.scaled_logits.to_string()),
            ("location_updates", self.location_updates.to_string()),
            ("pseudo_locations", self.pseudo_locations.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("output_dim", self.output_dim.to_string()),
        ]
    }

    /// Setting `variant` also resets `pseudo_tokens` when its current value
    /// is incompatible with the new variant.
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "variant" => {
                self.variant = v.parse()?;
                let pseudo = self.variant.uses_pseudo_tokens();
                if pseudo && self.pseudo_tokens == 0 {
                    self.pseudo_tokens = DEFAULT_PSEUDO_TOKENS;
                } else if !pseudo {
                    self.pseudo_tokens = 0;
                }
            }
            "token_dim" => self.token_dim = config::parse_value(key, v)?,
            "layers" => self.layers = config::parse_value(key, v)?,
            "heads" => self.heads = config::parse_value(key, v)?,
            "qk_dim" => self.qk_dim = config::parse_value(key, v)?,
            "value_dim" => self.value_dim = config::parse_value(key, v)?,
            "pseudo_tokens" => self.pseudo_tokens = config::parse_value(key, v)?,
            "pseudo_style" => self.pseudo_style = v.parse()?,
            "scaled_logits" => self.scaled_logits = config::parse_bool(key, v)?,
            "location_updates" => self.location_updates = config::parse_bool(key, v)?,
            "pseudo_locations" => self.pseudo_locations = v.parse()?,
            "input_dim" => self.input_dim = config::parse_value(key, v)?,
            "output_dim" => self.output_dim = config::parse_value(key, v)?,
            _ => return Err(config::unknown_key(key)),
        }
        Ok(())
    }
}
