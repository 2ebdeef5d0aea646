//! JSON checkpoints for trained models.
//!
//! ```text
//! { "format": "split-koopman/checkpoint", "version": 1,
//!   "dims": {p, q, d}, "depth": M_d, "schedule": "special_case" | "general_case",
//!   "anchored": bool, "encoder": <network>, "sensing": {k11, k12, q_tilde, decoder},
//!   "controlling": null | {k21, k22, decoder, latent_mode} }
//! ```
//!
//! Matrices are stored as `{rows, cols, values}` with row-major values.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::model::{ActuatorLatent, ControllingModel, Encoder, KoopmanDims, SensingModel};
use super::schedule::ScheduleMode;
use crate::error::{Error, Result};
use crate::neural::{matrix_from_rows, matrix_to_rows, Network, NetworkRecord};

pub const CHECKPOINT_FORMAT: &str = "split-koopman/checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            values: matrix_to_rows(m),
        }
    }
}

impl MatrixRecord {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(self.rows, self.cols, &self.values)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SensingRecord {
    k11: MatrixRecord,
    k12: MatrixRecord,
    q_tilde: MatrixRecord,
    decoder: NetworkRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ControllingRecord {
    k21: MatrixRecord,
    k22: MatrixRecord,
    decoder: NetworkRecord,
    latent_mode: ActuatorLatent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    dims: KoopmanDims,
    depth: usize,
    schedule: ScheduleMode,
    anchored: bool,
    encoder: NetworkRecord,
    sensing: SensingRecord,
    controlling: Option<ControllingRecord>,
}

/// Sensing model, optional controlling model and the training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub sensing: SensingModel,
    pub controlling: Option<ControllingModel>,
    pub depth: usize,
    pub schedule: ScheduleMode,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let s = &self.sensing;
        let rec = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: s.dims,
            depth: self.depth,
            schedule: self.schedule,
            anchored: s.encoder.anchored,
            encoder: (&s.encoder.net).into(),
            sensing: SensingRecord {
                k11: (&s.k11).into(),
                k12: (&s.k12).into(),
                q_tilde: (&s.q_tilde).into(),
                decoder: (&s.decoder).into(),
            },
            controlling: self.controlling.as_ref().map(|c| ControllingRecord {
                k21: (&c.k21).into(),
                k22: (&c.k22).into(),
                decoder: (&c.decoder).into(),
                latent_mode: c.latent_mode,
            }),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: CheckpointRecord = serde_json::from_str(text)?;
        if rec.format != CHECKPOINT_FORMAT {
            return Err(Error::Serialization(format!("unknown format '{}'", rec.format)));
        }
        if rec.version != CHECKPOINT_VERSION {
            return Err(Error::Serialization(format!("unsupported version {}", rec.version)));
        }
        let encoder = Encoder {
            net: Network::try_from(&rec.encoder)?,
            anchored: rec.anchored,
        };
        let sensing = SensingModel {
            dims: rec.dims,
            encoder: encoder.clone(),
            k11: rec.sensing.k11.to_matrix()?,
            k12: rec.sensing.k12.to_matrix()?,
            decoder: Network::try_from(&rec.sensing.decoder)?,
            q_tilde: rec.sensing.q_tilde.to_matrix()?,
        };
        sensing.validate().map_err(|e| Error::Serialization(e.to_string()))?;
        let controlling = match rec.controlling {
            None => None,
            Some(c) => {
                let sensing_blocks = (c.latent_mode == ActuatorLatent::Advance).then(|| (sensing.k11.clone(), sensing.k12.clone()));
                let model = ControllingModel {
                    dims: rec.dims,
                    encoder,
                    k21: c.k21.to_matrix()?,
                    k22: c.k22.to_matrix()?,
                    decoder: Network::try_from(&c.decoder)?,
                    latent_mode: c.latent_mode,
                    sensing_blocks,
                };
                model.validate().map_err(|e| Error::Serialization(e.to_string()))?;
                Some(model)
            }
        };
        Ok(Self {
            sensing,
            controlling,
            depth: rec.depth,
            schedule: rec.schedule,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
