//! Dense networks, reverse-mode gradients and the Adam optimizer.

mod adam;
mod network;
mod serialize;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use network::{init_weights, Activation, DenseLayer, GradientSet, Network, NetworkVars};
pub use serialize::{
    matrix_from_rows, matrix_to_rows, network_from_json, network_to_json, LayerRecord, NetworkRecord,
    NETWORK_FORMAT, NETWORK_VERSION,
};
pub use tape::{Gradients, Tape, Var};
