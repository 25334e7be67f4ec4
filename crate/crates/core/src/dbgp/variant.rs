//! The model ladder: which weight blocks are stochastic and which head
//! classifies the pooled representation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear logit layer, stochastic iff the variant's output flag is set.
    BayesDense,
    WhitenedGp,
    KissGp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelVariant {
    /// Stochastic embeddings feeding a KISS-GP head.
    Dbgp,
    /// Stochastic embeddings, deterministic dense head.
    Be,
    /// Deterministic encoder, stochastic dense head.
    Bo,
    BeBo,
    WhitenedGp,
    KissGp,
    /// Fully deterministic dense baseline.
    Deterministic,
}

impl ModelVariant {
    /// The six probabilistic variants.
    pub const PROBABILISTIC: [ModelVariant; 6] = [
        ModelVariant::Dbgp,
        ModelVariant::Be,
        ModelVariant::Bo,
        ModelVariant::BeBo,
        ModelVariant::WhitenedGp,
        ModelVariant::KissGp,
    ];

    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::Dbgp,
        ModelVariant::Be,
        ModelVariant::Bo,
        ModelVariant::BeBo,
        ModelVariant::WhitenedGp,
        ModelVariant::KissGp,
        ModelVariant::Deterministic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Dbgp => "DBGP",
            ModelVariant::Be => "BE",
            ModelVariant::Bo => "BO",
            ModelVariant::BeBo => "BE_BO",
            ModelVariant::WhitenedGp => "WHITENED_GP",
            ModelVariant::KissGp => "KISS_GP",
            ModelVariant::Deterministic => "DETERMINISTIC",
        }
    }

    pub fn embedding_stochastic(self) -> bool {
        matches!(self, ModelVariant::Dbgp | ModelVariant::Be | ModelVariant::BeBo)
    }

    pub fn output_stochastic(self) -> bool {
        matches!(self, ModelVariant::Bo | ModelVariant::BeBo)
    }

    pub fn head(self) -> HeadKind {
        match self {
            ModelVariant::Dbgp | ModelVariant::KissGp => HeadKind::KissGp,
            ModelVariant::WhitenedGp => HeadKind::WhitenedGp,
            _ => HeadKind::BayesDense,
        }
    }

    pub fn has_gp_head(self) -> bool {
        self.head() != HeadKind::BayesDense
    }

    /// True when some weight block is drawn from a variational posterior.
    pub fn has_stochastic_weights(self) -> bool {
        self.embedding_stochastic() || self.output_stochastic()
    }

    /// True when repeated predictions of one patient can differ.
    pub fn is_probabilistic(self) -> bool {
        self.has_stochastic_weights() || self.has_gp_head()
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace(['-', '+'], "_");
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| {
                let known: Vec<&str> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
                Error::config("variant", format!("unknown variant `{s}`; expected one of {}", known.join(", ")))
            })
    }
}
