//! Run-level figures of merit: uptime, loss, detection and recovery latency,
//! utilization, agent overhead and message counts per tree tier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::armor::FatalAudit;
use crate::dataflow::{DropStage, LossAccounts};
use crate::faults::{Detector, FaultId, FaultKind, FaultRecord};
use crate::kernel::{SimDuration, SimTime};
use crate::managers::{GlobalAudit, GlobalDirective};
use crate::topology::NodeAddress;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// When off, nothing is recorded; the simulation itself is unchanged.
    pub enabled: bool,
    pub flush_period_ms: f64,
    /// Share of nominal capacity (at both levels) that counts as "up".
    pub uptime_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { enabled: true, flush_period_ms: 1000.0, uptime_threshold: 0.9 }
    }
}

impl MetricsConfig {
    pub fn flush_period(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.flush_period_ms * 1e-3)
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        if !(self.flush_period_ms.is_finite() && self.flush_period_ms > 0.0) {
            return Err(("metrics.flush_period_ms".into(), "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uptime_threshold) {
            return Err(("metrics.uptime_threshold".into(), "must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub min_s: f64,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p90_s: f64,
    pub p99_s: f64,
    pub max_s: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: impl IntoIterator<Item = SimDuration>) -> Option<Self> {
        let mut v: Vec<f64> = samples.into_iter().map(|d| d.as_secs_f64()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(LatencySummary {
            count: v.len(),
            min_s: v[0],
            mean_s: v.iter().sum::<f64>() / v.len() as f64,
            p50_s: percentile(&v, 50.0)?,
            p90_s: percentile(&v, 90.0)?,
            p99_s: percentile(&v, 99.0)?,
            max_s: v[v.len() - 1],
        })
    }
}

/// Integrates time spent with both levels at or above the capacity threshold.
#[derive(Debug, Clone)]
pub struct UptimeTracker {
    threshold: f64,
    since: SimTime,
    up: bool,
    up_ns: u64,
    pub l1_ratio: f64,
    pub l23_ratio: f64,
}

impl UptimeTracker {
    pub fn new(threshold: f64) -> Self {
        UptimeTracker { threshold, since: SimTime::ZERO, up: true, up_ns: 0, l1_ratio: 1.0, l23_ratio: 1.0 }
    }

    /// Records the capacity ratios in force from `now` on.
    pub fn update(&mut self, now: SimTime, l1_ratio: f64, l23_ratio: f64) {
        if self.up {
            self.up_ns += now.since(self.since).0;
        }
        self.since = now;
        self.l1_ratio = l1_ratio;
        self.l23_ratio = l23_ratio;
        self.up = l1_ratio >= self.threshold - 1e-12 && l23_ratio >= self.threshold - 1e-12;
    }

    pub fn is_up(&self) -> bool {
        self.up
    }

    pub fn up_time(&self, now: SimTime) -> SimDuration {
        SimDuration(self.up_ns + if self.up { now.since(self.since).0 } else { 0 })
    }

    pub fn fraction(&self, now: SimTime) -> f64 {
        if now.0 == 0 {
            return if self.up { 1.0 } else { 0.0 };
        }
        (self.up_time(now).0 as f64 / now.0 as f64).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    WorkerToRegional,
    RegionalToGlobal,
    GlobalToRegional,
    RegionalToWorker,
}

impl Tier {
    /// Tier of a message between two nodes, by their levels in the tree.
    pub fn between(from: &NodeAddress, to: &NodeAddress) -> Option<Tier> {
        let level = |a: &NodeAddress| {
            let k = a.kind();
            if k == crate::topology::NodeKind::GlobalManager {
                0
            } else if k.is_regional() {
                1
            } else {
                2
            }
        };
        match (level(from), level(to)) {
            (2, 1) => Some(Tier::WorkerToRegional),
            (1, 0) => Some(Tier::RegionalToGlobal),
            (0, 1) => Some(Tier::GlobalToRegional),
            (1, 2) => Some(Tier::RegionalToWorker),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts {
    pub worker_to_regional: u64,
    pub regional_to_global: u64,
    pub global_to_regional: u64,
    pub regional_to_worker: u64,
    /// Messages lost to a failed link.
    pub dropped: u64,
}

impl MessageCounts {
    pub fn count(&mut self, tier: Tier) {
        match tier {
            Tier::WorkerToRegional => self.worker_to_regional += 1,
            Tier::RegionalToGlobal => self.regional_to_global += 1,
            Tier::GlobalToRegional => self.global_to_regional += 1,
            Tier::RegionalToWorker => self.regional_to_worker += 1,
        }
    }
}

/// Values sampled at the flush cadence: `(window start, value)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub points: Vec<(SimTime, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesSet {
    pub series: BTreeMap<String, MetricSeries>,
}

impl SeriesSet {
    pub fn push(&mut self, name: &str, window_start: SimTime, value: f64) {
        self.series.entry(name.to_string()).or_default().points.push((window_start, value));
    }

    pub fn latest(&self) -> BTreeMap<String, f64> {
        self.series.iter().filter_map(|(k, s)| s.points.last().map(|(_, v)| (k.clone(), *v))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub id: FaultId,
    pub kind: FaultKind,
    pub target: NodeAddress,
    pub onset_s: f64,
    pub detected_by: Option<Detector>,
    pub detection_latency_s: Option<f64>,
    pub recovery_latency_s: Option<f64>,
    pub cleared_at_s: Option<f64>,
    pub replacement: Option<NodeAddress>,
    pub operator: bool,
}

impl From<&FaultRecord> for FaultEntry {
    fn from(r: &FaultRecord) -> Self {
        FaultEntry {
            id: r.id,
            kind: r.kind,
            target: r.target,
            onset_s: r.onset.as_secs_f64(),
            detected_by: r.detection.map(|d| d.detector),
            detection_latency_s: r.detection_latency().map(|d| d.as_secs_f64()),
            recovery_latency_s: r.recovery_latency().map(|d| d.as_secs_f64()),
            cleared_at_s: r.cleared_at.map(|t| t.as_secs_f64()),
            replacement: r.replacement,
            operator: r.operator,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub l1: f64,
    pub l23: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub vla_reports: u64,
    pub reports_evicted: u64,
    pub reports_dropped: u64,
    pub escalations_to_regional: u64,
    pub escalations_to_global: u64,
    pub local_actions: u64,
    pub regional_actions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub events_delivered: u64,
    pub uptime: f64,
    pub crossings: LossAccounts,
    pub in_flight: u64,
    pub drop_fraction: f64,
    pub stage_drop_fractions: BTreeMap<DropStage, f64>,
    pub detection_latency: Option<LatencySummary>,
    pub recovery_latency: Option<LatencySummary>,
    pub faults: Vec<FaultEntry>,
    pub utilization: Utilization,
    pub vla_overhead: f64,
    pub messages: MessageCounts,
    pub reports: ReportCounts,
    pub fatal_audit: FatalAudit,
    pub global_audit: GlobalAudit,
    pub directives: Vec<GlobalDirective>,
    pub throttle: f64,
}

impl RunReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn detected_faults(&self) -> impl Iterator<Item = &FaultEntry> {
        self.faults.iter().filter(|f| f.detection_latency_s.is_some())
    }
}
