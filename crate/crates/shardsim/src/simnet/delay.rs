//! Message delay models, including the measured inter-zone latency matrix
//! used for wide-area runs.

use crate::time::SimDuration;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Cloud zones of the wide-area deployment the latency matrix was measured
/// on. Actors are mapped onto zones round-robin by actor index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub enum Region {
    UsWest1B,
    UsWest2A,
    UsEast1B,
    UsEast4B,
    AsiaEast1B,
    AsiaSoutheast1B,
    EuropeWest1B,
    EuropeWest2A,
}

impl Region {
    pub const ALL: [Region; 8] = [
        Region::UsWest1B,
        Region::UsWest2A,
        Region::UsEast1B,
        Region::UsEast4B,
        Region::AsiaEast1B,
        Region::AsiaSoutheast1B,
        Region::EuropeWest1B,
        Region::EuropeWest2A,
    ];

    fn index(self) -> usize {
        Region::ALL.iter().position(|r| *r == self).expect("listed")
    }

    pub fn zone_name(self) -> &'static str {
        match self {
            Region::UsWest1B => "us-west1-b",
            Region::UsWest2A => "us-west2-a",
            Region::UsEast1B => "us-east1-b",
            Region::UsEast4B => "us-east4-b",
            Region::AsiaEast1B => "asia-east1-b",
            Region::AsiaSoutheast1B => "asia-southeast1-b",
            Region::EuropeWest1B => "europe-west1-b",
            Region::EuropeWest2A => "europe-west2-a",
        }
    }

    /// Round-robin zone for the actor with global index `i`.
    pub fn of_index(i: usize) -> Region {
        Region::ALL[i % Region::ALL.len()]
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.zone_name())
    }
}

/// One-way latency in milliseconds, row = sending zone, column = receiving
/// zone, in `Region::ALL` order. Measured values; the matrix is directed
/// and not exactly symmetric.
const ZONE_LATENCY_MS: [[f64; 8]; 8] = [
    [0.0, 24.7, 66.7, 59.0, 120.2, 150.8, 138.9, 132.7],
    [24.7, 0.0, 62.9, 60.5, 129.5, 160.5, 140.4, 136.1],
    [66.7, 62.9, 0.0, 12.7, 183.8, 216.6, 93.1, 88.2],
    [59.1, 60.4, 12.7, 0.0, 176.6, 208.4, 81.9, 75.6],
    [118.7, 129.5, 184.9, 176.6, 0.0, 50.5, 255.5, 252.5],
    [150.8, 160.5, 216.7, 208.3, 50.6, 0.0, 288.8, 283.8],
    [138.9, 140.5, 93.2, 81.8, 255.7, 288.7, 0.0, 7.1],
    [132.1, 134.9, 88.1, 76.6, 252.1, 283.9, 7.1, 0.0],
];

pub fn zone_latency_ms(from: Region, to: Region) -> f64 {
    ZONE_LATENCY_MS[from.index()][to.index()]
}

/// How long a message spends on the wire. All models are non-negative and
/// sampled (where random) from the engine's dedicated delay stream, so a
/// run is a pure function of its configuration.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub enum DelayModel {
    /// Every message takes exactly this long.
    Fixed { millis: f64 },
    /// Uniform per-message delay in `[lo, hi]` milliseconds.
    Uniform { lo_millis: f64, hi_millis: f64 },
    /// The measured inter-zone matrix; actors sit in zones round-robin by
    /// actor index.
    RegionMatrix,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel::RegionMatrix
    }
}

impl DelayModel {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            DelayModel::Fixed { millis } => {
                if !millis.is_finite() || *millis < 0.0 {
                    return Err(format!("fixed delay must be finite and >= 0, got {millis}"));
                }
            }
            DelayModel::Uniform {
                lo_millis,
                hi_millis,
            } => {
                if !lo_millis.is_finite() || !hi_millis.is_finite() {
                    return Err("uniform delay bounds must be finite".into());
                }
                if *lo_millis < 0.0 || hi_millis < lo_millis {
                    return Err(format!(
                        "uniform delay needs 0 <= lo <= hi, got [{lo_millis}, {hi_millis}]"
                    ));
                }
            }
            DelayModel::RegionMatrix => {}
        }
        Ok(())
    }

    /// Largest delay the model can produce; what a delaying adversary holds
    /// messages to.
    pub fn max_delay(&self) -> SimDuration {
        match self {
            DelayModel::Fixed { millis } => SimDuration::from_millis_f64(*millis),
            DelayModel::Uniform { hi_millis, .. } => SimDuration::from_millis_f64(*hi_millis),
            DelayModel::RegionMatrix => {
                let max = ZONE_LATENCY_MS
                    .iter()
                    .flatten()
                    .copied()
                    .fold(0.0_f64, f64::max);
                SimDuration::from_millis_f64(max)
            }
        }
    }

    /// Delay for one message between the actors with global indices
    /// `from_idx` and `to_idx`.
    pub fn sample(&self, from_idx: usize, to_idx: usize, rng: &mut ChaCha20Rng) -> SimDuration {
        match self {
            DelayModel::Fixed { millis } => SimDuration::from_millis_f64(*millis),
            DelayModel::Uniform {
                lo_millis,
                hi_millis,
            } => {
                let ms = if hi_millis > lo_millis {
                    rng.gen_range(*lo_millis..=*hi_millis)
                } else {
                    *lo_millis
                };
                SimDuration::from_millis_f64(ms)
            }
            DelayModel::RegionMatrix => {
                let from = Region::of_index(from_idx);
                let to = Region::of_index(to_idx);
                SimDuration::from_millis_f64(zone_latency_ms(from, to))
            }
        }
    }
}
