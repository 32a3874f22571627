use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Masked-LM cross-entropy only.
    MlmOnly,
    /// Token-alignment contrastive loss on every content token, plus MLM.
    Taco,
    /// Contrastive anchors restricted to the masked positions, plus MLM.
    ConcentratedTaco,
    /// MLM plus token prediction on every unmasked content position.
    ExtendedMlm,
}

impl Variant {
    pub fn uses_contrastive(self) -> bool {
        matches!(self, Variant::Taco | Variant::ConcentratedTaco)
    }

    pub fn uses_token_prediction(self) -> bool {
        self == Variant::ExtendedMlm
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mlm_only" | "mlm" => Some(Variant::MlmOnly),
            "taco" => Some(Variant::Taco),
            "concentrated_taco" => Some(Variant::ConcentratedTaco),
            "extended_mlm" => Some(Variant::ExtendedMlm),
            _ => None,
        }
    }
}

/// Which static embedding is subtracted from a hidden state to get its
/// global bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorEmbeddingSource {
    /// Embedding of the uncorrupted token.
    OriginalToken,
    /// Embedding of whatever was fed in (`[MASK]` at masked positions).
    InputToken,
}

impl AnchorEmbeddingSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "original_token" => Some(Self::OriginalToken),
            "input_token" => Some(Self::InputToken),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    /// Negatives per anchor (K).
    pub negatives: usize,
    /// Positive window radius (W): candidates satisfy `1 ≤ |j_c − j| ≤ W`.
    pub window: usize,
    /// Temperature τ of the cosine score.
    pub temperature: f64,
    pub anchor_embedding_source: AnchorEmbeddingSource,
    /// Multiplier on the contrastive term in the combined loss.
    pub tc_weight: f64,
    /// Draw one negative set per row instead of one per anchor.
    pub shared_negatives: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            variant: Variant::Taco,
            negatives: 50,
            window: 5,
            temperature: 0.07,
            anchor_embedding_source: AnchorEmbeddingSource::OriginalToken,
            tc_weight: 1.0,
            shared_negatives: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 {
            return Err(Error::Config("negatives (K) must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window (W) must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.tc_weight.is_finite() {
            return Err(Error::Config("tc_weight must be finite".into()));
        }
        Ok(())
    }
}
