//! Versioned JSON checkpoint for a single network.
//!
//! ```json
//! {
//!   "format": "mars-mlp",
//!   "version": 1,
//!   "hidden_activation": "relu",
//!   "output_activation": "tanh",
//!   "layers": [ { "rows": 64, "cols": 13, "weights": [...], "bias": [...] } ]
//! }
//! ```
//!
//! `weights` is row-major with `rows` = output width and `cols` = input width.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dense, HiddenActivation, Network, NnError, OutputActivation};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "mars-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint<T> {
    pub format: String,
    pub version: u32,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
    pub layers: Vec<LayerRecord<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord<T> {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> From<&Network<T>> for NetworkCheckpoint<T> {
    fn from(net: &Network<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            hidden_activation: net.hidden,
            output_activation: net.output,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.out_dim,
                    cols: l.in_dim,
                    weights: l.weights.clone(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> NetworkCheckpoint<T> {
    pub fn into_network(self) -> Result<Network<T>, NnError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.layers.is_empty() {
            return Err(NnError::Checkpoint("no layers".into()));
        }
        let mut prev: Option<usize> = None;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.into_iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(NnError::Checkpoint(format!("layer {k} arrays do not match {}x{}", l.rows, l.cols)));
            }
            if let Some(p) = prev {
                if p != l.cols {
                    return Err(NnError::Checkpoint(format!("layer {k} expects {} inputs, previous emits {p}", l.cols)));
                }
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(NnError::Checkpoint(format!("layer {k} has non-finite entries")));
            }
            prev = Some(l.rows);
            layers.push(Dense { in_dim: l.cols, out_dim: l.rows, weights: l.weights, bias: l.bias });
        }
        Ok(Network { layers, hidden: self.hidden_activation, output: self.output_activation })
    }
}

impl<T: Scalar> Network<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&NetworkCheckpoint::from(self)).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let ck: NetworkCheckpoint<T> = serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        ck.into_network()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let s = std::fs::read_to_string(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let net = Network::<f64>::new(&[6, 5, 3], OutputActivation::Tanh, Some(3e-3), &mut rng);
        let s = net.to_json();
        assert!(s.starts_with("{\"format\":\"mars-mlp\",\"version\":1"));
        assert_eq!(Network::<f64>::from_json(&s).unwrap(), net);
        assert_eq!(Network::<f64>::from_json(&s).unwrap().to_json(), s);
    }

    #[test]
    fn rejects_inconsistent_layers() {
        let net = Network::<f64>::zeros(&[2, 3, 1], OutputActivation::Linear);
        let mut ck = NetworkCheckpoint::from(&net);
        ck.layers[1].cols = 4;
        ck.layers[1].weights.push(0.0);
        assert!(ck.into_network().is_err());
        let mut ck = NetworkCheckpoint::from(&net);
        ck.version = 9;
        assert!(ck.into_network().is_err());
    }
}
