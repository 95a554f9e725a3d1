//! JSON checkpoints.
//!
//! Field order is fixed:
//!
//! ```text
//! { "format": "fedpac-checkpoint",
//!   "version": 1,
//!   "dims": { "input", "hidden", "depth", "feature", "classes" },
//!   "models": [ { "client", "theta": [...], "phi": [...] }, ... ] }
//! ```
//!
//! `theta` is the flat extractor buffer (per layer: weights row-major as
//! `out x in`, then biases, input layer first); `phi` is the head row-major
//! as `classes x feature`. Floats are written in shortest round-trip decimal
//! form, so reading a checkpoint back reproduces every bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Extractor, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FORMAT: &str = "fedpac-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub models: Vec<ModelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub client: usize,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl Checkpoint {
    /// `models[i]` is stored under client id `i`.
    pub fn from_models(models: &[ModelParams]) -> Result<Self> {
        let dims = *models.first().ok_or(Error::Empty("checkpoint models"))?.dims();
        if models.iter().any(|m| *m.dims() != dims) {
            return Err(Error::shape("checkpoint models have different dims"));
        }
        Ok(Self {
            format: FORMAT.to_string(),
            version: VERSION,
            dims,
            models: models
                .iter()
                .enumerate()
                .map(|(client, m)| ModelEntry {
                    client,
                    theta: m.theta().as_slice().to_vec(),
                    phi: m.phi().as_slice().to_vec(),
                })
                .collect(),
        })
    }

    pub fn to_models(&self) -> Result<Vec<ModelParams>> {
        if self.format != FORMAT {
            return Err(Error::invalid(format!("not a checkpoint: format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        self.models
            .iter()
            .map(|e| {
                ModelParams::new(
                    self.dims,
                    Extractor::from_flat(&self.dims, e.theta.clone())?,
                    Matrix::new(self.dims.classes, self.dims.feature, e.phi.clone())?,
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn field_order_is_stable() {
        let m = ModelParams::init(ModelDims::default(), 1).unwrap();
        let text = Checkpoint::from_models(&[m]).unwrap().to_json().unwrap();
        let pos = |key: &str| text.find(key).unwrap();
        assert!(pos("\"format\"") < pos("\"version\""));
        assert!(pos("\"version\"") < pos("\"dims\""));
        assert!(pos("\"dims\"") < pos("\"models\""));
        assert!(pos("\"theta\"") < pos("\"phi\""));
    }

    #[test]
    fn rejects_foreign_documents() {
        let m = ModelParams::init(ModelDims::default(), 1).unwrap();
        let mut cp = Checkpoint::from_models(&[m]).unwrap();
        cp.version = 7;
        assert!(cp.to_models().is_err());
        cp.version = VERSION;
        cp.models[0].phi.pop();
        assert!(cp.to_models().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), scale in -1e12f64..1e12) {
            let dims = ModelDims { input: 3, hidden: 4, depth: 2, feature: 2, classes: 3 };
            let mut m = ModelParams::init(dims, seed).unwrap();
            let phi = m.phi().scale(scale).unwrap();
            m.set_phi(phi).unwrap();
            let text = Checkpoint::from_models(&[m.clone(), m.clone()]).unwrap().to_json().unwrap();
            let back = Checkpoint::from_json(&text).unwrap().to_models().unwrap();
            for b in back {
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(b.theta().as_slice()), bits(m.theta().as_slice()));
                prop_assert_eq!(bits(b.phi().as_slice()), bits(m.phi().as_slice()));
            }
        }
    }
}
