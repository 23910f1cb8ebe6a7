//! On-disk formats shared by the engine, the exporter and the service.
//!
//! * tensor archives (`ACTENSR1` magic, JSON header, little-endian f32 payload)
//! * row-major run-length encoded binary masks
//! * one-JSON-object-per-line proposal and change files
//! * session manifests tying the pieces of one bitemporal pair together
//! * 1-bit PNG change maps

mod manifest;
mod raster_io;
mod records;
mod rle;
mod session;
mod tensor;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use manifest::SessionManifest;
pub use raster_io::{
    encode_change_map_png, encode_rgb_png, read_label_raster, read_rgb_image, write_change_map_png,
    write_rgb_png, LabelRaster,
};
pub use records::{
    read_change_file, read_mask_file, read_proposal_file, write_change_file, write_proposal_file,
    ChangeLine, ProposalRecord,
};
pub use rle::{BinaryMask, RleMask, RleOrder};
pub use session::{DemodulationPolicy, LoadOptions, Session};
pub use tensor::{read_tensor_archive, write_tensor_archive, TensorHeader, TENSOR_MAGIC};

/// Acquisition time of one image of a bitemporal pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Time {
    T0,
    T1,
}

impl Time {
    pub const BOTH: [Time; 2] = [Time::T0, Time::T1];

    pub fn other(self) -> Time {
        match self {
            Time::T0 => Time::T1,
            Time::T1 => Time::T0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Time::T0 => 0,
            Time::T1 => 1,
        }
    }
}

impl fmt::Display for Time {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Time::T0 => "T0",
            Time::T1 => "T1",
        })
    }
}

impl FromStr for Time {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "0" | "t0" | "pre" => Ok(Time::T0),
            "1" | "t1" | "post" => Ok(Time::T1),
            _ => Err(format!("unknown time {s:?} (expected t0/t1)")),
        }
    }
}
