//! Fault kinds, their applicability, and per-fault lifecycle records.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kernel::{SimDuration, SimTime};
use crate::topology::{NodeAddress, NodeKind};
use crate::vla::{ConditionReport, MetricId};

pub type FaultId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Process stops heartbeating and working; the in-flight item is lost.
    ProcessCrash,
    /// Work stalls while heartbeats continue.
    Hang,
    /// The target's parent link goes down.
    LinkFailure,
    /// Service times are multiplied by the factor.
    Overload(f64),
    /// Temperature sensor reads this value (Celsius).
    CpuOverTemp(f64),
    /// io_errors metric reads this rate (per second).
    IoErrorBurst(f64),
    /// Every process on the board crashes and its uplink goes down. Permanent.
    BoardFailure,
    /// Permanent process crash with dead sensors. Permanent.
    NodeFailure,
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::ProcessCrash => "process_crash",
            FaultKind::Hang => "hang",
            FaultKind::LinkFailure => "link_failure",
            FaultKind::Overload(_) => "overload",
            FaultKind::CpuOverTemp(_) => "cpu_over_temp",
            FaultKind::IoErrorBurst(_) => "io_error_burst",
            FaultKind::BoardFailure => "board_failure",
            FaultKind::NodeFailure => "node_failure",
        }
    }

    /// Faults that can only be undone by management recovery, never cleared.
    pub fn is_destructive(&self) -> bool {
        matches!(self, FaultKind::BoardFailure | FaultKind::NodeFailure)
    }

    /// One-shot faults act at onset only; ending them repairs nothing.
    pub fn is_one_shot(&self) -> bool {
        matches!(self, FaultKind::ProcessCrash | FaultKind::Hang)
    }

    /// Whether the fault takes capacity away (and so has a recovery time).
    pub fn impairs_capacity(&self) -> bool {
        !matches!(self, FaultKind::CpuOverTemp(_) | FaultKind::IoErrorBurst(_))
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            FaultKind::Overload(f) if !(f.is_finite() && f > 1.0) => Err(format!("slowdown factor {f} must exceed 1")),
            FaultKind::CpuOverTemp(t) if !t.is_finite() => Err("temperature must be finite".into()),
            FaultKind::IoErrorBurst(r) if !(r.is_finite() && r >= 0.0) => Err(format!("rate {r} must be non-negative")),
            _ => Ok(()),
        }
    }

    pub fn applies_to(&self, target: &NodeAddress) -> bool {
        let kind = target.kind();
        match self {
            FaultKind::BoardFailure => kind == NodeKind::Board,
            FaultKind::LinkFailure => kind != NodeKind::GlobalManager,
            _ => kind.is_worker(),
        }
    }

    /// Metrics whose reports count as detecting this kind of fault.
    pub fn relevant_metrics(&self) -> &'static [MetricId] {
        use MetricId::*;
        match self {
            FaultKind::ProcessCrash | FaultKind::NodeFailure => &[ProcessDead, NodeSilent, RestartFailed],
            FaultKind::Hang => &[TimeoutHang],
            FaultKind::LinkFailure => &[NodeSilent, LinkErrors, ProcessDead],
            FaultKind::Overload(_) => &[ServiceTimeEwma, Utilization, MigrationRequest, QueueOccupancy, TimeoutHang],
            FaultKind::CpuOverTemp(_) => &[CpuTemperature],
            FaultKind::IoErrorBurst(_) => &[IoErrors],
            FaultKind::BoardFailure => &[NodeSilent, ProcessDead],
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultKind::Overload(x) => write!(f, "overload(x{x})"),
            FaultKind::CpuOverTemp(t) => write!(f, "cpu_over_temp({t}C)"),
            FaultKind::IoErrorBurst(r) => write!(f, "io_error_burst({r}/s)"),
            other => f.write_str(other.name()),
        }
    }
}

/// A fault as written in a scenario or posted live. Times are sim seconds;
/// a missing onset means "as soon as injected", a missing duration means permanent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: NodeAddress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub onset_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

impl FaultSpec {
    pub fn new(kind: FaultKind, target: NodeAddress, onset_s: f64) -> Self {
        FaultSpec { kind, target, onset_s: Some(onset_s), duration_s: None }
    }

    pub fn lasting(mut self, duration_s: f64) -> Self {
        self.duration_s = Some(duration_s);
        self
    }

    /// Field-level checks that do not depend on the farm. Errors carry a
    /// field suffix relative to this fault entry.
    pub fn validate_shape(&self) -> Result<(), (&'static str, String)> {
        self.kind.validate().map_err(|m| ("kind", m))?;
        if !self.kind.applies_to(&self.target) {
            return Err(("target", format!("{} cannot target {} ({:?})", self.kind.name(), self.target, self.target.kind())));
        }
        if let Some(onset) = self.onset_s {
            if !(onset.is_finite() && onset >= 0.0) {
                return Err(("onset_s", "must be a non-negative number of seconds".into()));
            }
        }
        if let Some(d) = self.duration_s {
            if !(d.is_finite() && d > 0.0) {
                return Err(("duration_s", "must be positive".into()));
            }
            if self.kind.is_destructive() {
                return Err(("duration_s", format!("{} is permanent", self.kind.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Heartbeat,
    Watchdog,
    Silence,
    Vla,
    Armor,
}

impl Detector {
    pub fn for_metric(metric: MetricId) -> Detector {
        match metric {
            MetricId::ProcessDead => Detector::Heartbeat,
            MetricId::TimeoutHang => Detector::Watchdog,
            MetricId::NodeSilent => Detector::Silence,
            MetricId::RestartFailed | MetricId::RestartStorm | MetricId::MigrationRequest | MetricId::Utilization => Detector::Armor,
            _ => Detector::Vla,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub t: SimTime,
    pub detector: Detector,
    pub report_id: u64,
    pub metric: MetricId,
}

/// Lifecycle of one injected fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub id: FaultId,
    pub kind: FaultKind,
    pub target: NodeAddress,
    pub onset: SimTime,
    /// Scheduled end, if not permanent.
    pub planned_end: Option<SimTime>,
    pub active: bool,
    pub cleared_at: Option<SimTime>,
    pub detection: Option<Detection>,
    pub recovered_at: Option<SimTime>,
    /// Every detector that raised a relevant signal while the fault was unrecovered.
    pub signals: BTreeSet<Detector>,
    /// Spare or sibling that took over the target's duty.
    pub replacement: Option<NodeAddress>,
    /// Injected live through the control interface.
    pub operator: bool,
}

impl FaultRecord {
    pub fn new(id: FaultId, spec: &FaultSpec, onset: SimTime, operator: bool) -> Self {
        FaultRecord {
            id,
            kind: spec.kind,
            target: spec.target,
            onset,
            planned_end: spec.duration_s.map(|d| onset + SimDuration::from_secs_f64(d)),
            active: false,
            cleared_at: None,
            detection: None,
            recovered_at: None,
            signals: BTreeSet::new(),
            replacement: None,
            operator,
        }
    }

    pub fn detection_latency(&self) -> Option<SimDuration> {
        self.detection.map(|d| d.t.since(self.onset))
    }

    pub fn recovery_latency(&self) -> Option<SimDuration> {
        self.recovered_at.map(|t| t.since(self.onset))
    }

    /// Whether `report` is a relevant signal for this fault: right metric,
    /// and raised about the target (or anything on a targeted board).
    pub fn is_signal(&self, report: &ConditionReport) -> bool {
        if !self.kind.relevant_metrics().contains(&report.metric) || report.t_observed < self.onset {
            return false;
        }
        match self.target.kind() {
            NodeKind::Board => report.source.is_within(&self.target),
            _ => report.source == self.target,
        }
    }

    /// Records a signal reaching management at `at`; the first one is the detection.
    pub fn observe(&mut self, report: &ConditionReport, at: SimTime) -> bool {
        if self.recovered_at.is_some() || !self.is_signal(report) {
            return false;
        }
        let detector = Detector::for_metric(report.metric);
        self.signals.insert(detector);
        if self.detection.is_none() {
            self.detection = Some(Detection { t: at, detector, report_id: report.id, metric: report.metric });
            return true;
        }
        false
    }
}

/// Background failures: a Poisson process per worker node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFaults {
    /// Failure rate per worker node, per sim hour.
    pub rate_per_node_per_hour: f64,
    /// Mean of the exponential fault duration.
    pub mttr_s: f64,
    #[serde(default = "default_random_kind")]
    pub kind: FaultKind,
}

fn default_random_kind() -> FaultKind {
    FaultKind::ProcessCrash
}

impl RandomFaults {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.rate_per_node_per_hour.is_finite() && self.rate_per_node_per_hour >= 0.0) {
            return Err(("rate_per_node_per_hour", "must be non-negative".into()));
        }
        if !(self.mttr_s.is_finite() && self.mttr_s > 0.0) {
            return Err(("mttr_s", "must be positive".into()));
        }
        if self.kind.is_destructive() || self.kind == FaultKind::LinkFailure {
            return Err(("kind", format!("{} cannot be drawn at random", self.kind.name())));
        }
        self.kind.validate().map_err(|m| ("kind", m))
    }
}
