//! Per-loop records and split-boundary messages.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, LinkOutcome, LinkStatus};
use crate::error::{Error, Result};
use crate::koopman::KoopmanDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `[g(x); x]` from the sensor during phase 1.
    ActivationsUp,
    ActionDown,
    /// Boundary gradient for the encoder, one latent-sized block per offset.
    GradientDown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBoundaryMessage {
    pub direction: Direction,
    pub payload: Vec<f64>,
    /// Packet size `L_m`, bits.
    pub size_bits: usize,
}

impl SplitBoundaryMessage {
    pub fn new(direction: Direction, payload: Vec<f64>, dims: &KoopmanDims, channel: &ChannelConfig) -> Result<Self> {
        let ok = match direction {
            Direction::ActivationsUp => payload.len() == dims.d + dims.p,
            Direction::ActionDown => payload.len() == dims.q,
            Direction::GradientDown => !payload.is_empty() && payload.len() % dims.d == 0,
        };
        if !ok {
            return Err(Error::InvalidState(format!(
                "{direction:?} payload of {} scalars does not fit d={}, p={}, q={}",
                payload.len(),
                dims.d,
                dims.p,
                dims.q
            )));
        }
        let size_bits = channel.payload_bits(payload.len());
        Ok(Self {
            direction,
            payload,
            size_bits,
        })
    }
}

/// How one side obtained the quantity it used in a loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SideUse {
    Received,
    /// `depth` loops since the last reception.
    Predicted { depth: usize },
    /// Nothing received yet; a zero command is used.
    ColdStart,
}

impl SideUse {
    pub fn depth(&self) -> usize {
        match self {
            SideUse::Predicted { depth } => *depth,
            _ => 0,
        }
    }
}

/// Serializable part of a [`LinkOutcome`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub status: LinkStatus,
    pub snr_draw: f64,
    /// `None` when the rate is zero.
    pub latency: Option<f64>,
}

impl From<&LinkOutcome> for LinkRecord {
    fn from(o: &LinkOutcome) -> Self {
        Self {
            status: o.status,
            snr_draw: o.snr_draw,
            latency: o.latency.is_finite().then_some(o.latency),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRecord {
    pub m: usize,
    pub uplink: LinkRecord,
    pub downlink: LinkRecord,
    pub state_use: SideUse,
    pub action_use: SideUse,
    /// Uplink plus downlink airtime of this loop, seconds.
    pub tau_comm: f64,
    pub tau_comp: f64,
    /// Longest completed downlink loss run up to and including this loop.
    pub m_lost: usize,
}

pub fn write_records<W: Write>(records: &[LoopRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<LoopRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
