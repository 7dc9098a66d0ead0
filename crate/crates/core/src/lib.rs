//! Contrastive masked auto-encoder hashing for image / point-cloud
//! cross-modal retrieval.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod retrieval;
pub mod seed;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Point,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Point => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Point),
            other => Err(Error::format(format!("unknown modality tag {other}"))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Image => Modality::Point,
            Modality::Point => Modality::Image,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Point => "point",
        })
    }
}
