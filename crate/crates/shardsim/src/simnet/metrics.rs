//! Aggregated measurements of a run: commit counts, windowed throughput,
//! latency samples and protocol incident counters.

use crate::ids::CommitteeId;
use crate::time::{SimDuration, SimTime};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Everything a run reports. The accounting identity
/// `issued = committed + aborted + pending` holds by construction:
/// `finalize` derives `pending` from the other three.
#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub master_seed: u64,
    pub duration: SimDuration,
    /// Client-issued user transactions.
    pub issued: u64,
    pub committed: u64,
    pub aborted: u64,
    pub pending: u64,
    /// Client-observed submit-to-decision latencies.
    pub latency_samples: Vec<SimDuration>,
    /// Committed user transactions per window, indexed by window number.
    pub window: SimDuration,
    pub throughput_series: Vec<u64>,
    pub committed_per_committee: BTreeMap<CommitteeId, u64>,
    pub view_changes: u64,
    pub new_views: u64,
    pub dropped_messages: u64,
    pub stale_blocks: u64,
    pub equivocation_refusals: u64,
}

impl Metrics {
    pub fn new(master_seed: u64, duration: SimDuration, window: SimDuration) -> Self {
        Metrics {
            master_seed,
            duration,
            window,
            ..Metrics::default()
        }
    }

    pub(crate) fn bump_window(&mut self, at: SimTime) {
        if self.window.is_zero() {
            return;
        }
        let idx = (at.nanos() / self.window.nanos()) as usize;
        if self.throughput_series.len() <= idx {
            self.throughput_series.resize(idx + 1, 0);
        }
        self.throughput_series[idx] += 1;
    }

    /// Pads the window series out to the run duration and derives
    /// `pending`.
    pub(crate) fn finalize(&mut self) {
        if !self.window.is_zero() {
            let windows = self.duration.nanos().div_ceil(self.window.nanos()) as usize;
            if self.throughput_series.len() < windows {
                self.throughput_series.resize(windows, 0);
            }
        }
        self.pending = self.issued.saturating_sub(self.committed + self.aborted);
    }

    /// Committed transactions per simulated second over the full run.
    pub fn throughput_tps(&self) -> f64 {
        let secs = self.duration.as_secs_f64();
        if secs == 0.0 {
            return 0.0;
        }
        self.committed as f64 / secs
    }

    /// Latency percentile over the recorded samples, `q` in [0, 1].
    /// Nearest-rank on the sorted samples; `None` when empty.
    pub fn latency_quantile(&self, q: f64) -> Option<SimDuration> {
        if self.latency_samples.is_empty() {
            return None;
        }
        let mut sorted = self.latency_samples.clone();
        sorted.sort_unstable();
        let rank = ((q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize)
            .clamp(1, sorted.len());
        Some(sorted[rank - 1])
    }

    pub fn abort_rate(&self) -> f64 {
        let settled = self.committed + self.aborted;
        if settled == 0 {
            return 0.0;
        }
        self.aborted as f64 / settled as f64
    }

    /// One CSV row per window: `window_index,window_start_s,committed`.
    pub fn throughput_csv(&self) -> String {
        let mut out = String::from("window_index,window_start_s,committed\n");
        let window_s = self.window.as_secs_f64();
        for (i, c) in self.throughput_series.iter().enumerate() {
            out.push_str(&format!("{i},{:.3},{c}\n", i as f64 * window_s));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}
