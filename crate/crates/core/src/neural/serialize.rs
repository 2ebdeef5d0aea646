//! JSON encoding for networks.
//!
//! Layout (fields in this order):
//!
//! ```text
//! { "format": "split-koopman/network", "version": 1,
//!   "layers": [ { "in": n, "out": m, "activation": "relu" | "linear",
//!                 "weights": [m*n values, row-major], "biases": [m values] }, ... ] }
//! ```
//!
//! Floats are written with the shortest round-trip representation, so a
//! save/load cycle reproduces every parameter bit for bit.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::network::{Activation, DenseLayer, Network};
use crate::error::{Error, Result};

pub const NETWORK_FORMAT: &str = "split-koopman/network";
pub const NETWORK_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(rename = "in")]
    pub in_dim: usize,
    #[serde(rename = "out")]
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerRecord>,
}

/// Row-major flattening used by every on-disk matrix.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn matrix_from_rows(rows: usize, cols: usize, values: &[f64]) -> Result<DMatrix<f64>> {
    if values.len() != rows * cols {
        return Err(Error::Serialization(format!(
            "expected {} values for a {rows}x{cols} matrix, found {}",
            rows * cols,
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, values))
}

impl From<&Network> for NetworkRecord {
    fn from(net: &Network) -> Self {
        Self {
            format: NETWORK_FORMAT.into(),
            version: NETWORK_VERSION,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation,
                    weights: matrix_to_rows(&l.weights),
                    biases: l.biases.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<&NetworkRecord> for Network {
    type Error = Error;

    fn try_from(rec: &NetworkRecord) -> Result<Self> {
        if rec.format != NETWORK_FORMAT {
            return Err(Error::Serialization(format!("unknown format '{}'", rec.format)));
        }
        if rec.version != NETWORK_VERSION {
            return Err(Error::Serialization(format!("unsupported version {}", rec.version)));
        }
        let layers = rec
            .layers
            .iter()
            .map(|l| {
                Ok(DenseLayer {
                    weights: matrix_from_rows(l.out_dim, l.in_dim, &l.weights)?,
                    biases: matrix_from_rows(l.out_dim, 1, &l.biases)?,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Network::from_layers(layers)
    }
}

pub fn network_to_json(net: &Network) -> Result<String> {
    Ok(serde_json::to_string(&NetworkRecord::from(net))?)
}

pub fn network_from_json(s: &str) -> Result<Network> {
    let rec: NetworkRecord = serde_json::from_str(s)?;
    Network::try_from(&rec)
}
