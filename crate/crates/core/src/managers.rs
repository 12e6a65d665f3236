//! Regional and global managers.
//!
//! Regional managers see their region's node statistics, condition reports
//! and escalations; they decide out-of-service, reassignment and migration
//! and forward what they cannot handle. Once per window they send one
//! summary upward. The global manager combines summaries into farm-wide
//! directives such as input throttling.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::armor::EscalationReason;
use crate::kernel::{SimDuration, SimTime};
use crate::topology::{NodeAddress, NodeKind, NodeStatus};
use crate::vla::{ConditionReport, MetricId, Severity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseLink {
    pub node: NodeAddress,
    pub report_id: u64,
}

/// A condition forwarded up the tree with the path it took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub report: ConditionReport,
    pub reason: EscalationReason,
    pub cause: Vec<CauseLink>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub restart_history: Vec<SimTime>,
}

impl Escalation {
    pub fn new(report: ConditionReport, reason: EscalationReason, origin: NodeAddress) -> Self {
        let cause = vec![CauseLink { node: origin, report_id: report.id }];
        Escalation { report, reason, cause, restart_history: Vec::new() }
    }

    /// Appends `node` unless it is already the last hop.
    pub fn through(mut self, node: NodeAddress) -> Self {
        if self.cause.last().map(|c| c.node) != Some(node) {
            self.cause.push(CauseLink { node, report_id: self.report.id });
        }
        self
    }

    pub fn regional_hops(&self) -> usize {
        self.cause.iter().map(|c| c.node).filter(|n| n.kind().is_regional()).collect::<BTreeSet<_>>().len()
    }

    pub fn cause_ids(&self) -> Vec<u64> {
        self.cause.iter().map(|c| c.report_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionalPolicy {
    /// Escalated Fatal conditions on one node within the window that take it out of service.
    pub fatal_limit: usize,
    pub fatal_window_s: f64,
    /// Share of a region's nodes that may be lost before the global manager is told.
    pub degraded_fraction: f64,
    /// Highest utilization at which a sibling may take a migrated duty.
    pub sibling_max_utilization: f64,
}

impl Default for RegionalPolicy {
    fn default() -> Self {
        RegionalPolicy { fatal_limit: 2, fatal_window_s: 300.0, degraded_fraction: 0.2, sibling_max_utilization: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManagerConfig {
    pub window_s: f64,
    pub silence_timeout_s: f64,
    pub silence_check_ms: f64,
    pub policy: RegionalPolicy,
    /// Consecutive short (or healthy) windows before throttling (or releasing).
    pub throttle_windows: u32,
    /// Admitted load as a share of measured capacity while throttled.
    pub throttle_margin: f64,
    pub hop_latency_us: f64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            window_s: 10.0,
            silence_timeout_s: 3.0,
            silence_check_ms: 1000.0,
            policy: RegionalPolicy::default(),
            throttle_windows: 3,
            throttle_margin: 0.95,
            hop_latency_us: 100.0,
        }
    }
}

impl ManagerConfig {
    pub fn window(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.window_s)
    }

    pub fn silence_timeout(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.silence_timeout_s)
    }

    pub fn silence_check(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.silence_check_ms * 1e-3)
    }

    pub fn hop_latency(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.hop_latency_us * 1e-6)
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        let positive = [
            ("managers.window_s", self.window_s),
            ("managers.silence_timeout_s", self.silence_timeout_s),
            ("managers.silence_check_ms", self.silence_check_ms),
            ("managers.policy.fatal_window_s", self.policy.fatal_window_s),
            ("managers.throttle_margin", self.throttle_margin),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err((name.into(), "must be positive".into()));
            }
        }
        if !(self.hop_latency_us.is_finite() && self.hop_latency_us >= 0.0) {
            return Err(("managers.hop_latency_us".into(), "must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.policy.degraded_fraction) {
            return Err(("managers.policy.degraded_fraction".into(), "must be in [0, 1]".into()));
        }
        if self.throttle_margin > 1.0 {
            return Err(("managers.throttle_margin".into(), "must not exceed 1".into()));
        }
        if self.policy.fatal_limit == 0 {
            return Err(("managers.policy.fatal_limit".into(), "must be at least 1".into()));
        }
        if self.throttle_windows == 0 {
            return Err(("managers.throttle_windows".into(), "must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-worker figures carried in a node's periodic statistics message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerStat {
    pub worker: NodeAddress,
    pub utilization: f64,
    pub queue: usize,
    /// Ratio of measured to nominal service time.
    pub service_ratio: f64,
    /// Items per second this worker can currently process; zero if down.
    pub capacity_hz: f64,
}

/// Periodic statistics from a board front-end or a PC ARMOR. Also the
/// regional manager's liveness signal for that node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node: NodeAddress,
    pub t: SimTime,
    pub workers: Vec<WorkerStat>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: u64,
    pub sum: f64,
    pub max: f64,
}

impl Aggregate {
    pub fn add(&mut self, v: f64) {
        if self.count == 0 || v > self.max {
            self.max = v;
        }
        self.count += 1;
        self.sum += v;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// One region's summary for a closed window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryWindow {
    pub region: NodeAddress,
    pub t0: SimTime,
    pub t1: SimTime,
    pub aggregates: BTreeMap<MetricId, Aggregate>,
    pub reports: BTreeMap<Severity, u64>,
    pub escalations: u64,
    pub census: BTreeMap<NodeStatus, usize>,
    /// Summed capacity of dispatchable, reporting workers.
    pub capacity_hz: f64,
}

impl SummaryWindow {
    pub fn report_count(&self) -> u64 {
        self.reports.values().sum()
    }

    pub fn dispatchable(&self) -> usize {
        self.census.iter().filter(|(s, _)| s.is_dispatchable()).map(|(_, n)| *n).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RegionalAction {
    Restart { node: NodeAddress },
    OutOfService { node: NodeAddress },
    /// Pull `spare` into service in place of `replaces`.
    Reassign { spare: NodeAddress, replaces: NodeAddress },
    /// Move `from`'s duty to an underloaded sibling.
    Migrate { from: NodeAddress, to: NodeAddress },
    ReturnToService { node: NodeAddress },
    EscalateToGlobal { escalation: Box<Escalation> },
}

/// What the regional manager knows about one of its managed units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeView {
    pub addr: NodeAddress,
    pub status: NodeStatus,
    pub utilization: f64,
}

#[derive(Debug, Clone)]
pub struct RegionalManager {
    addr: NodeAddress,
    policy: RegionalPolicy,
    fatal_history: BTreeMap<NodeAddress, VecDeque<SimTime>>,
    last_seen: BTreeMap<NodeAddress, SimTime>,
    silenced: BTreeSet<NodeAddress>,
    degraded_reported: bool,
    window_start: SimTime,
    aggregates: BTreeMap<MetricId, Aggregate>,
    reports: BTreeMap<Severity, u64>,
    escalations: u64,
    latest: BTreeMap<NodeAddress, WorkerStat>,
}

impl RegionalManager {
    pub fn new(addr: NodeAddress, policy: RegionalPolicy) -> Self {
        assert!(addr.kind().is_regional(), "{addr} is not a regional manager");
        RegionalManager {
            addr,
            policy,
            fatal_history: BTreeMap::new(),
            last_seen: BTreeMap::new(),
            silenced: BTreeSet::new(),
            degraded_reported: false,
            window_start: SimTime::ZERO,
            aggregates: BTreeMap::new(),
            reports: BTreeMap::new(),
            escalations: 0,
            latest: BTreeMap::new(),
        }
    }

    pub fn addr(&self) -> NodeAddress {
        self.addr
    }

    pub fn policy(&self) -> &RegionalPolicy {
        &self.policy
    }

    /// Starts liveness tracking for a node that sends periodic statistics.
    pub fn watch(&mut self, node: NodeAddress, now: SimTime) {
        self.last_seen.insert(node, now);
    }

    pub fn is_silenced(&self, node: &NodeAddress) -> bool {
        self.silenced.contains(node)
    }

    pub fn latest_stat(&self, worker: &NodeAddress) -> Option<&WorkerStat> {
        self.latest.get(worker)
    }

    /// Records a statistics message. Returns true when it comes from a node
    /// previously declared silent.
    pub fn record_stats(&mut self, stats: &NodeStats, now: SimTime) -> bool {
        self.last_seen.insert(stats.node, now);
        for w in &stats.workers {
            self.aggregates.entry(MetricId::Utilization).or_default().add(w.utilization);
            self.aggregates.entry(MetricId::QueueOccupancy).or_default().add(w.queue as f64);
            self.aggregates.entry(MetricId::ServiceTimeEwma).or_default().add(w.service_ratio);
            self.latest.insert(w.worker, *w);
        }
        self.silenced.remove(&stats.node)
    }

    pub fn record_report(&mut self, report: &ConditionReport) {
        *self.reports.entry(report.severity).or_insert(0) += 1;
    }

    /// Nodes whose statistics stopped for longer than `timeout`, each reported once.
    pub fn silent_nodes(&mut self, now: SimTime, timeout: SimDuration) -> Vec<NodeAddress> {
        let fresh: Vec<NodeAddress> = self
            .last_seen
            .iter()
            .filter(|(n, t)| now.since(**t) > timeout && !self.silenced.contains(n))
            .map(|(n, _)| *n)
            .collect();
        self.silenced.extend(fresh.iter().copied());
        fresh
    }

    fn pick_spare(&self, view: &[NodeView]) -> Option<NodeAddress> {
        view.iter()
            .filter(|v| v.status == NodeStatus::Spare && !self.silenced.contains(&v.addr))
            .map(|v| v.addr)
            .next()
    }

    fn pick_sibling(&self, view: &[NodeView], exclude: NodeAddress) -> Option<NodeAddress> {
        view.iter()
            .filter(|v| {
                v.addr != exclude
                    && v.status.is_dispatchable()
                    && v.utilization < self.policy.sibling_max_utilization
                    && !self.silenced.contains(&v.addr)
            })
            .min_by(|a, b| a.utilization.total_cmp(&b.utilization).then(a.addr.cmp(&b.addr)))
            .map(|v| v.addr)
    }

    fn no_target(&self, node: NodeAddress, report: &ConditionReport, now: SimTime, next_id: &mut u64) -> RegionalAction {
        let derived = ConditionReport {
            id: *next_id,
            source: node,
            metric: MetricId::NoTargetAvailable,
            observed: 0.0,
            threshold: 0.0,
            severity: Severity::Error,
            priority: 1,
            t_observed: now,
        };
        *next_id += 1;
        let mut esc = Escalation::new(derived, EscalationReason::NoTargetAvailable, node).through(self.addr);
        esc.cause.insert(0, CauseLink { node: report.source, report_id: report.id });
        RegionalAction::EscalateToGlobal { escalation: Box::new(esc) }
    }

    /// Takes `node` out and pulls a spare in its place (L2/3 only).
    fn replace(&self, node: NodeAddress, report: &ConditionReport, view: &[NodeView], now: SimTime, next_id: &mut u64) -> Vec<RegionalAction> {
        let mut actions = vec![RegionalAction::OutOfService { node }];
        if node.kind() == NodeKind::WorkerPC {
            match self.pick_spare(view) {
                Some(spare) => actions.push(RegionalAction::Reassign { spare, replaces: node }),
                None => actions.push(self.no_target(node, report, now, next_id)),
            }
        }
        actions
    }

    pub fn on_escalation(&mut self, esc: Escalation, view: &[NodeView], now: SimTime, next_id: &mut u64) -> Vec<RegionalAction> {
        self.escalations += 1;
        let esc = esc.through(self.addr);
        let node = esc.report.source;
        match esc.report.metric {
            MetricId::ProcessDead | MetricId::TimeoutHang if esc.report.severity == Severity::Fatal => {
                let window = SimDuration::from_secs_f64(self.policy.fatal_window_s);
                let history = self.fatal_history.entry(node).or_default();
                while history.front().is_some_and(|t| now.since(*t) >= window) {
                    history.pop_front();
                }
                history.push_back(now);
                if history.len() >= self.policy.fatal_limit {
                    history.clear();
                    self.replace(node, &esc.report, view, now, next_id)
                } else {
                    vec![RegionalAction::Restart { node }]
                }
            }
            MetricId::RestartStorm | MetricId::RestartFailed => self.replace(node, &esc.report, view, now, next_id),
            MetricId::MigrationRequest | MetricId::Utilization => {
                if let Some(spare) = self.pick_spare(view) {
                    vec![RegionalAction::OutOfService { node }, RegionalAction::Reassign { spare, replaces: node }]
                } else if let Some(to) = self.pick_sibling(view, node) {
                    vec![RegionalAction::Migrate { from: node, to }]
                } else {
                    vec![self.no_target(node, &esc.report, now, next_id)]
                }
            }
            _ if esc.report.severity == Severity::Fatal => vec![RegionalAction::EscalateToGlobal { escalation: Box::new(esc) }],
            _ => Vec::new(),
        }
    }

    /// Reaction to a node declared silent. `report` is the NodeSilent
    /// condition the manager raised about it.
    pub fn on_silence(&mut self, report: &ConditionReport, view: &[NodeView], now: SimTime, next_id: &mut u64) -> Vec<RegionalAction> {
        match report.source {
            NodeAddress::FrontEnd { region, board } => vec![RegionalAction::OutOfService { node: NodeAddress::Board { region, board } }],
            node @ NodeAddress::Pc { .. } => {
                if view.iter().any(|v| v.addr == node && v.status == NodeStatus::Spare) {
                    vec![RegionalAction::OutOfService { node }]
                } else {
                    self.replace(node, report, view, now, next_id)
                }
            }
            _ => Vec::new(),
        }
    }

    /// Statistics resumed from a node it had declared silent.
    pub fn on_resume(&mut self, node: NodeAddress, status_of: impl Fn(&NodeAddress) -> Option<NodeStatus>) -> Vec<RegionalAction> {
        let unit = match node {
            NodeAddress::FrontEnd { region, board } => NodeAddress::Board { region, board },
            other => other,
        };
        match status_of(&unit) {
            Some(NodeStatus::OutOfService) => vec![RegionalAction::ReturnToService { node: unit }],
            _ => Vec::new(),
        }
    }

    /// Closes the current window. `configured` is the region's nominal worker
    /// count; `dispatchable` how many are usable now.
    pub fn close_window(
        &mut self,
        now: SimTime,
        census: BTreeMap<NodeStatus, usize>,
        capacity_hz: f64,
        configured: usize,
        dispatchable: usize,
        next_id: &mut u64,
    ) -> (SummaryWindow, Vec<RegionalAction>) {
        let summary = SummaryWindow {
            region: self.addr,
            t0: self.window_start,
            t1: now,
            aggregates: std::mem::take(&mut self.aggregates),
            reports: std::mem::take(&mut self.reports),
            escalations: std::mem::take(&mut self.escalations),
            census,
            capacity_hz,
        };
        self.window_start = now;
        let mut actions = Vec::new();
        let lost = configured.saturating_sub(dispatchable);
        let degraded = configured > 0 && lost as f64 > self.policy.degraded_fraction * configured as f64;
        if degraded && !self.degraded_reported {
            self.degraded_reported = true;
            let report = ConditionReport {
                id: *next_id,
                source: self.addr,
                metric: MetricId::RegionDegraded,
                observed: lost as f64 / configured as f64,
                threshold: self.policy.degraded_fraction,
                severity: Severity::Error,
                priority: 1,
                t_observed: now,
            };
            *next_id += 1;
            let esc = Escalation::new(report, EscalationReason::RegionDegraded, self.addr);
            actions.push(RegionalAction::EscalateToGlobal { escalation: Box::new(esc) });
        } else if !degraded {
            self.degraded_reported = false;
        }
        (summary, actions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "snake_case")]
pub enum DirectiveKind {
    ThrottleInput { fraction: f64 },
    PauseRun,
    ResumeRun,
    RegionOutOfService { region: NodeAddress },
    PolicyBroadcast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDirective {
    pub kind: DirectiveKind,
    pub issued_at: SimTime,
    pub cause: Vec<u64>,
}

/// Audit of everything the global manager has been handed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalAudit {
    pub escalations: u64,
    /// Escalations whose cause chain did not pass through exactly one regional manager.
    pub chain_violations: u64,
    pub by_metric: BTreeMap<MetricId, u64>,
}

#[derive(Debug, Clone)]
pub struct GlobalManager {
    throttle_windows: u32,
    margin: f64,
    summaries: BTreeMap<NodeAddress, SummaryWindow>,
    short_streak: u32,
    healthy_streak: u32,
    throttle: f64,
    regions_out: BTreeSet<NodeAddress>,
    pending_causes: Vec<u64>,
    pub audit: GlobalAudit,
}

impl GlobalManager {
    pub fn new(config: &ManagerConfig) -> Self {
        GlobalManager {
            throttle_windows: config.throttle_windows,
            margin: config.throttle_margin,
            summaries: BTreeMap::new(),
            short_streak: 0,
            healthy_streak: 0,
            throttle: 1.0,
            regions_out: BTreeSet::new(),
            pending_causes: Vec::new(),
            audit: GlobalAudit::default(),
        }
    }

    pub fn throttle(&self) -> f64 {
        self.throttle
    }

    pub fn summaries(&self) -> &BTreeMap<NodeAddress, SummaryWindow> {
        &self.summaries
    }

    /// Status census assembled from the latest regional summaries.
    pub fn census(&self) -> BTreeMap<NodeStatus, usize> {
        let mut out = BTreeMap::new();
        for s in self.summaries.values() {
            for (status, n) in &s.census {
                *out.entry(*status).or_insert(0) += n;
            }
        }
        out
    }

    pub fn on_summary(&mut self, summary: SummaryWindow) {
        self.summaries.insert(summary.region, summary);
    }

    pub fn on_escalation(&mut self, esc: &Escalation) {
        self.audit.escalations += 1;
        *self.audit.by_metric.entry(esc.report.metric).or_insert(0) += 1;
        if esc.regional_hops() != 1 {
            self.audit.chain_violations += 1;
        }
        self.pending_causes.push(esc.report.id);
    }

    fn capacity(&self, kind: NodeKind) -> f64 {
        self.summaries.values().filter(|s| s.region.kind() == kind).map(|s| s.capacity_hz).sum()
    }

    /// Farm-wide evaluation after a window's summaries have arrived.
    /// `offered_l1_hz` is the unthrottled crossing rate, `offered_l23_hz` the
    /// rate of L1 accepts it implies.
    pub fn evaluate(&mut self, now: SimTime, offered_l1_hz: f64, offered_l23_hz: f64) -> Vec<GlobalDirective> {
        let mut out = Vec::new();
        let cause = std::mem::take(&mut self.pending_causes);
        let ratio = |cap: f64, offered: f64| if offered > 0.0 { cap / offered } else { f64::INFINITY };
        let need = ratio(self.capacity(NodeKind::L1RegionalManager), offered_l1_hz)
            .min(ratio(self.capacity(NodeKind::L23RegionalManager), offered_l23_hz));
        if need < 1.0 {
            self.short_streak += 1;
            self.healthy_streak = 0;
            let target = (need * self.margin).clamp(0.0, 1.0);
            if self.short_streak >= self.throttle_windows && (self.throttle - target).abs() > 0.02 {
                self.throttle = target;
                out.push(GlobalDirective { kind: DirectiveKind::ThrottleInput { fraction: target }, issued_at: now, cause: cause.clone() });
            }
        } else {
            self.short_streak = 0;
            if self.throttle < 1.0 {
                self.healthy_streak += 1;
                if self.healthy_streak >= self.throttle_windows {
                    self.throttle = 1.0;
                    self.healthy_streak = 0;
                    out.push(GlobalDirective { kind: DirectiveKind::ThrottleInput { fraction: 1.0 }, issued_at: now, cause: cause.clone() });
                }
            }
        }
        for s in self.summaries.values() {
            if s.dispatchable() == 0 && self.regions_out.insert(s.region) {
                out.push(GlobalDirective { kind: DirectiveKind::RegionOutOfService { region: s.region }, issued_at: now, cause: cause.clone() });
            }
        }
        out
    }
}
