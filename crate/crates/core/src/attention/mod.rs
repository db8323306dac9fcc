//! Triangular attention over edge states and the edge-transformer layer.

pub mod layer;
pub mod mask;
pub mod params;

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

pub use layer::{edge_layer, triangular_attention, triangular_attention_head, triangular_attention_weights, EdgeState};
pub use mask::PivotMask;
pub use params::{head_width, EdgeLayerParams, HeadParams, Init, TriAttnParams, FFN_MULT};

/// Attention variant. `ValueAblation` drops the `(l, j)` edge from values;
/// `AttentionAblation` keys on `x_ij` so scores no longer depend on `x_lj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AblationMode {
    #[default]
    Base,
    ValueAblation,
    AttentionAblation,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Base, AblationMode::ValueAblation, AblationMode::AttentionAblation];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Base => "base",
            AblationMode::ValueAblation => "value_ablation",
            AblationMode::AttentionAblation => "attention_ablation",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?} (base, value_ablation, attention_ablation)")))
    }
}
