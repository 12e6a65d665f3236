//! Node-level managers hosting pluggable elements.
//!
//! An [`Armor`] fans condition reports out to its registered elements in
//! registration order and collects their outputs: local recovery requests,
//! escalations and derived reports. Fatal reports nobody claims are escalated
//! automatically. Process supervision (heartbeats, restarts, migrations) is
//! modelled by [`ProcessRecord`] and [`HeartbeatMonitor`].

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kernel::{SimDuration, SimTime};
use crate::topology::NodeAddress;
use crate::vla::{ConditionReport, MetricId, Severity};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArmorError {
    #[error("element id `{0}` is already registered")]
    DuplicateElementId(String),
    #[error("no element with id `{0}`")]
    UnknownElementId(String),
    #[error("no built-in element named `{0}`")]
    UnknownElement(String),
    #[error("illegal process transition {from:?} -> {to:?}")]
    IllegalTransition { from: ProcessState, to: ProcessState },
    #[error("restart storm: {} restarts inside the window", restarts.len())]
    RestartStorm { restarts: Vec<SimTime> },
    #[error("no migration target available")]
    NoTargetAvailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    Detection,
    Analysis,
    Recovery,
}

/// Which reports an element consumes. An empty metric list means any metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub metrics: Vec<MetricId>,
    pub min_severity: Severity,
}

impl Subscription {
    pub fn matches(&self, report: &ConditionReport) -> bool {
        report.severity >= self.min_severity && (self.metrics.is_empty() || self.metrics.contains(&report.metric))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum RecoveryAction {
    Restart { node: NodeAddress },
    /// Move the node's filter process; `to: None` lets the regional tier pick.
    Migrate { from: NodeAddress, to: Option<NodeAddress> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ElementOutput {
    EmitReport(ConditionReport),
    RequestAction(RecoveryAction),
    Escalate(ConditionReport),
}

#[derive(Debug, Clone, Copy)]
pub struct ElementContext {
    pub armor: NodeAddress,
    pub now: SimTime,
}

/// Element behaviour. Implementations must be deterministic and free of side
/// effects beyond their returned outputs.
pub trait ElementLogic: Send + Sync + fmt::Debug {
    fn handle(&self, ctx: &ElementContext, report: &ConditionReport) -> Vec<ElementOutput>;
}

#[derive(Debug, Clone)]
pub struct Element {
    pub id: String,
    pub kind: ElementKind,
    pub subscription: Subscription,
    pub logic: Arc<dyn ElementLogic>,
}

#[derive(Debug)]
struct RestartSource;

impl ElementLogic for RestartSource {
    fn handle(&self, _ctx: &ElementContext, report: &ConditionReport) -> Vec<ElementOutput> {
        vec![ElementOutput::RequestAction(RecoveryAction::Restart { node: report.source })]
    }
}

#[derive(Debug)]
struct RequestMigration;

impl ElementLogic for RequestMigration {
    fn handle(&self, _ctx: &ElementContext, report: &ConditionReport) -> Vec<ElementOutput> {
        vec![ElementOutput::RequestAction(RecoveryAction::Migrate { from: report.source, to: None })]
    }
}

#[derive(Debug)]
struct EscalateEverything;

impl ElementLogic for EscalateEverything {
    fn handle(&self, _ctx: &ElementContext, report: &ConditionReport) -> Vec<ElementOutput> {
        vec![ElementOutput::Escalate(report.clone())]
    }
}

pub const BUILTIN_ELEMENTS: [&str; 4] = ["restart-on-crash", "restart-on-hang", "migrate-on-overload", "escalate-all"];

/// Looks up a built-in element by name; the element id is the name.
pub fn builtin_element(name: &str) -> Result<Element, ArmorError> {
    let (kind, subscription, logic): (ElementKind, Subscription, Arc<dyn ElementLogic>) = match name {
        "restart-on-crash" => (
            ElementKind::Recovery,
            Subscription { metrics: vec![MetricId::ProcessDead], min_severity: Severity::Warning },
            Arc::new(RestartSource),
        ),
        "restart-on-hang" => (
            ElementKind::Recovery,
            Subscription { metrics: vec![MetricId::TimeoutHang], min_severity: Severity::Fatal },
            Arc::new(RestartSource),
        ),
        "migrate-on-overload" => (
            ElementKind::Recovery,
            Subscription { metrics: vec![MetricId::Utilization], min_severity: Severity::Warning },
            Arc::new(RequestMigration),
        ),
        "escalate-all" => (
            ElementKind::Analysis,
            Subscription { metrics: vec![], min_severity: Severity::Warning },
            Arc::new(EscalateEverything),
        ),
        other => return Err(ArmorError::UnknownElement(other.to_string())),
    };
    Ok(Element { id: name.to_string(), kind, subscription, logic })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    /// An element asked for it.
    Requested,
    /// Fatal report nobody handled.
    Unclaimed,
    RestartStorm,
    RestartFailed,
    NoTargetAvailable,
    RegionDegraded,
    /// Condition detected by the regional tier itself.
    RegionalDetection,
}

/// Result of delivering one report into an ARMOR.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Delivery {
    pub actions: Vec<RecoveryAction>,
    pub escalations: Vec<(ConditionReport, EscalationReason)>,
    /// Elements that saw the report, in invocation order.
    pub invoked: Vec<String>,
    /// No element consumed the report; it only feeds node statistics.
    pub absorbed: bool,
}

/// Fatal-report audit: every Fatal is acted on or escalated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FatalAudit {
    pub received: u64,
    pub acted: u64,
    pub escalated: u64,
}

#[derive(Debug, Clone)]
pub struct Armor {
    node: NodeAddress,
    elements: Vec<Element>,
    pub absorbed: BTreeMap<Severity, u64>,
    pub audit: FatalAudit,
}

const MAX_EMIT_DEPTH: usize = 4;

impl Armor {
    pub fn new(node: NodeAddress) -> Self {
        Armor { node, elements: Vec::new(), absorbed: BTreeMap::new(), audit: FatalAudit::default() }
    }

    pub fn node(&self) -> NodeAddress {
        self.node
    }

    pub fn element_ids(&self) -> Vec<String> {
        self.elements.iter().map(|e| e.id.clone()).collect()
    }

    pub fn register_element(&mut self, element: Element) -> Result<(), ArmorError> {
        if self.elements.iter().any(|e| e.id == element.id) {
            return Err(ArmorError::DuplicateElementId(element.id));
        }
        self.elements.push(element);
        Ok(())
    }

    pub fn remove_element(&mut self, id: &str) -> Result<Element, ArmorError> {
        let idx = self.elements.iter().position(|e| e.id == id).ok_or_else(|| ArmorError::UnknownElementId(id.to_string()))?;
        Ok(self.elements.remove(idx))
    }

    /// Replaces the roster with built-ins named in `names`, keeping order.
    pub fn set_roster(&mut self, names: &[String]) -> Result<(), ArmorError> {
        let mut fresh = Armor::new(self.node);
        for name in names {
            fresh.register_element(builtin_element(name)?)?;
        }
        self.elements = fresh.elements;
        Ok(())
    }

    pub fn deliver_report(&mut self, report: &ConditionReport, now: SimTime) -> Delivery {
        let mut delivery = Delivery::default();
        self.deliver_inner(report, now, &mut delivery, 0);
        if report.severity == Severity::Fatal {
            self.audit.received += 1;
            if delivery.actions.is_empty() && delivery.escalations.is_empty() {
                delivery.escalations.push((report.clone(), EscalationReason::Unclaimed));
            }
            if delivery.actions.is_empty() {
                self.audit.escalated += 1;
            } else {
                self.audit.acted += 1;
            }
        }
        if delivery.invoked.is_empty() {
            delivery.absorbed = true;
            *self.absorbed.entry(report.severity).or_insert(0) += 1;
        }
        delivery
    }

    fn deliver_inner(&mut self, report: &ConditionReport, now: SimTime, delivery: &mut Delivery, depth: usize) {
        let ctx = ElementContext { armor: self.node, now };
        let mut emitted = Vec::new();
        for element in self.elements.iter().filter(|e| e.subscription.matches(report)) {
            if depth == 0 {
                delivery.invoked.push(element.id.clone());
            }
            for output in element.logic.handle(&ctx, report) {
                match output {
                    ElementOutput::RequestAction(action) => delivery.actions.push(action),
                    ElementOutput::Escalate(r) => delivery.escalations.push((r, EscalationReason::Requested)),
                    ElementOutput::EmitReport(r) => emitted.push(r),
                }
            }
        }
        if depth < MAX_EMIT_DEPTH {
            for r in emitted {
                self.deliver_inner(&r, now, delivery, depth + 1);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProcessState {
    Running,
    Crashed,
    Hung,
    Restarting,
    Migrating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProcessRole {
    TriggerFilter,
    Auxiliary,
}

/// Saved progress of the in-flight item, as a fraction of its service time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t_checkpoint: SimTime,
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub pid: u32,
    pub role: ProcessRole,
    pub state: ProcessState,
    pub restart_count: u32,
    pub last_checkpoint: Option<Checkpoint>,
    /// Recent restart times, for storm detection.
    pub restart_history: VecDeque<SimTime>,
}

impl ProcessRecord {
    pub fn new(pid: u32, role: ProcessRole) -> Self {
        ProcessRecord {
            pid,
            role,
            state: ProcessState::Running,
            restart_count: 0,
            last_checkpoint: None,
            restart_history: VecDeque::new(),
        }
    }

    pub fn can_transition(from: ProcessState, to: ProcessState) -> bool {
        use ProcessState::*;
        matches!(
            (from, to),
            (Running, Crashed)
                | (Running, Hung)
                | (Running, Migrating)
                | (Crashed, Restarting)
                | (Hung, Restarting)
                | (Crashed, Migrating)
                | (Hung, Migrating)
                | (Restarting, Running)
                | (Restarting, Crashed)
                | (Migrating, Running)
        )
    }

    pub fn transition(&mut self, to: ProcessState) -> Result<(), ArmorError> {
        if !Self::can_transition(self.state, to) {
            return Err(ArmorError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    pub fn restarts_within(&self, now: SimTime, window: SimDuration) -> usize {
        self.restart_history.iter().filter(|t| now.since(**t) < window).count()
    }

    /// Starts a restart unless the storm limit has been reached. Returns the
    /// instant the process is back.
    pub fn restart_process(&mut self, now: SimTime, policy: &RestartPolicy) -> Result<SimTime, ArmorError> {
        if !matches!(self.state, ProcessState::Crashed | ProcessState::Hung) {
            return Err(ArmorError::IllegalTransition { from: self.state, to: ProcessState::Restarting });
        }
        while self.restart_history.front().is_some_and(|t| now.since(*t) >= policy.storm_window) {
            self.restart_history.pop_front();
        }
        if self.restart_history.len() >= policy.storm_limit {
            return Err(ArmorError::RestartStorm { restarts: self.restart_history.iter().copied().collect() });
        }
        self.transition(ProcessState::Restarting)?;
        self.restart_history.push_back(now);
        self.restart_count += 1;
        Ok(now + policy.restart_delay)
    }

    pub fn migrate_process(&mut self, now: SimTime, migrate_delay: SimDuration) -> Result<SimTime, ArmorError> {
        self.transition(ProcessState::Migrating)?;
        Ok(now + migrate_delay)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestartPolicy {
    pub restart_delay: SimDuration,
    pub storm_limit: usize,
    pub storm_window: SimDuration,
}

/// Progress retained from the most recent checkpoint taken every `period`
/// during a task that has been running for `elapsed`.
pub fn checkpoint_progress(elapsed: SimDuration, service: SimDuration, period: SimDuration) -> f64 {
    if period.0 == 0 || service.0 == 0 {
        return 0.0;
    }
    let saved = (elapsed.0 / period.0) * period.0;
    (saved as f64 / service.0 as f64).min(1.0)
}

/// Work left after resuming from a checkpoint.
pub fn resume_remaining(service: SimDuration, progress: f64) -> SimDuration {
    SimDuration::from_nanos((service.0 as f64 * (1.0 - progress.clamp(0.0, 1.0))).round() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeartbeatConfig {
    pub period: SimDuration,
    pub miss_threshold: u32,
}

impl HeartbeatConfig {
    pub fn timeout(&self) -> SimDuration {
        SimDuration(self.period.0 * u64::from(self.miss_threshold))
    }

    /// Worst-case crash-to-detection latency.
    pub fn detection_bound(&self) -> SimDuration {
        SimDuration(self.period.0 * (u64::from(self.miss_threshold) + 1))
    }
}

/// Tracks last heartbeat per watched process.
#[derive(Debug, Clone)]
pub struct HeartbeatMonitor {
    config: HeartbeatConfig,
    last: BTreeMap<NodeAddress, SimTime>,
}

impl HeartbeatMonitor {
    pub fn new(config: HeartbeatConfig) -> Self {
        HeartbeatMonitor { config, last: BTreeMap::new() }
    }

    pub fn config(&self) -> &HeartbeatConfig {
        &self.config
    }

    pub fn watch(&mut self, node: NodeAddress, now: SimTime) {
        self.last.insert(node, now);
    }

    pub fn beat(&mut self, node: NodeAddress, now: SimTime) {
        if let Some(t) = self.last.get_mut(&node) {
            *t = now;
        }
    }

    pub fn last_beat(&self, node: &NodeAddress) -> Option<SimTime> {
        self.last.get(node).copied()
    }

    /// Watched processes whose last heartbeat is older than
    /// `period × miss_threshold`, among those `is_running` says are up.
    pub fn heartbeat_tick(&self, now: SimTime, is_running: impl Fn(&NodeAddress) -> bool) -> Vec<NodeAddress> {
        let timeout = self.config.timeout();
        self.last
            .iter()
            .filter(|(node, t)| now.since(**t) > timeout && is_running(node))
            .map(|(node, _)| *node)
            .collect()
    }
}

/// Sustained-overload detector over a utilization EWMA updated once per stats period.
#[derive(Debug, Clone)]
pub struct OverloadTracker {
    alpha: f64,
    threshold: f64,
    sustain: SimDuration,
    ewma: f64,
    above_since: Option<SimTime>,
    requested: bool,
}

impl OverloadTracker {
    pub fn new(alpha: f64, threshold: f64, sustain: SimDuration) -> Self {
        OverloadTracker { alpha, threshold, sustain, ewma: 0.0, above_since: None, requested: false }
    }

    pub fn ewma(&self) -> f64 {
        self.ewma
    }

    pub fn seed(&mut self, value: f64) {
        self.ewma = value;
    }

    /// Returns true exactly once per overload episode, when the EWMA has
    /// stayed above the threshold for the sustain period.
    pub fn update(&mut self, now: SimTime, utilization: f64) -> bool {
        self.ewma = self.alpha * utilization + (1.0 - self.alpha) * self.ewma;
        if self.ewma > self.threshold {
            let since = *self.above_since.get_or_insert(now);
            if !self.requested && now.since(since) >= self.sustain {
                self.requested = true;
                return true;
            }
        } else {
            self.above_since = None;
            self.requested = false;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElementRoster {
    /// Elements on every L2/3 worker PC's ARMOR.
    pub pc: Vec<String>,
    /// Elements on each L1 region's ARMOR (supervising that region's DSPs).
    pub l1_regional: Vec<String>,
}

impl Default for ElementRoster {
    fn default() -> Self {
        ElementRoster {
            pc: vec!["restart-on-crash".into(), "restart-on-hang".into(), "migrate-on-overload".into()],
            l1_regional: vec!["restart-on-crash".into(), "restart-on-hang".into()],
        }
    }
}

impl ElementRoster {
    pub fn validate(&self) -> Result<(), (String, String)> {
        for (tier, names) in [("pc", &self.pc), ("l1_regional", &self.l1_regional)] {
            let mut probe = Armor::new(NodeAddress::Global);
            for (i, name) in names.iter().enumerate() {
                let element = builtin_element(name).map_err(|e| (format!("armor.elements.{tier}[{i}]"), e.to_string()))?;
                probe.register_element(element).map_err(|e| (format!("armor.elements.{tier}[{i}]"), e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmorConfig {
    pub heartbeat_period_ms: f64,
    pub miss_threshold: u32,
    pub restart_delay_ms: f64,
    pub migrate_delay_ms: f64,
    pub storm_limit: usize,
    pub storm_window_s: f64,
    /// Periodic checkpointing of in-flight L2/3 work; off when absent.
    pub checkpoint_period_ms: Option<f64>,
    pub stats_period_ms: f64,
    pub overload_threshold: f64,
    pub overload_sustain_s: f64,
    pub overload_ewma_alpha: f64,
    pub sibling_max_utilization: f64,
    pub elements: ElementRoster,
}

impl Default for ArmorConfig {
    fn default() -> Self {
        ArmorConfig {
            heartbeat_period_ms: 1000.0,
            miss_threshold: 3,
            restart_delay_ms: 2000.0,
            migrate_delay_ms: 5000.0,
            storm_limit: 3,
            storm_window_s: 60.0,
            checkpoint_period_ms: None,
            stats_period_ms: 1000.0,
            overload_threshold: 0.98,
            overload_sustain_s: 30.0,
            overload_ewma_alpha: 0.5,
            sibling_max_utilization: 0.5,
            elements: ElementRoster::default(),
        }
    }
}

impl ArmorConfig {
    pub fn heartbeat(&self) -> HeartbeatConfig {
        HeartbeatConfig {
            period: SimDuration::from_secs_f64(self.heartbeat_period_ms * 1e-3),
            miss_threshold: self.miss_threshold,
        }
    }

    pub fn restart_policy(&self) -> RestartPolicy {
        RestartPolicy {
            restart_delay: SimDuration::from_secs_f64(self.restart_delay_ms * 1e-3),
            storm_limit: self.storm_limit,
            storm_window: SimDuration::from_secs_f64(self.storm_window_s),
        }
    }

    pub fn migrate_delay(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.migrate_delay_ms * 1e-3)
    }

    pub fn stats_period(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.stats_period_ms * 1e-3)
    }

    pub fn validate(&self) -> Result<(), (String, String)> {
        let positive = [
            ("armor.heartbeat_period_ms", self.heartbeat_period_ms),
            ("armor.restart_delay_ms", self.restart_delay_ms),
            ("armor.migrate_delay_ms", self.migrate_delay_ms),
            ("armor.storm_window_s", self.storm_window_s),
            ("armor.stats_period_ms", self.stats_period_ms),
            ("armor.overload_sustain_s", self.overload_sustain_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err((name.into(), "must be positive".into()));
            }
        }
        if self.miss_threshold < 1 {
            return Err(("armor.miss_threshold".into(), "must be at least 1".into()));
        }
        if !(self.overload_ewma_alpha > 0.0 && self.overload_ewma_alpha <= 1.0) {
            return Err(("armor.overload_ewma_alpha".into(), "must be in (0, 1]".into()));
        }
        if let Some(cp) = self.checkpoint_period_ms {
            if !(cp.is_finite() && cp > 0.0) {
                return Err(("armor.checkpoint_period_ms".into(), "must be positive".into()));
            }
        }
        self.elements.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PC: NodeAddress = NodeAddress::Pc { region: 0, slot: 3 };

    fn report(metric: MetricId, severity: Severity) -> ConditionReport {
        ConditionReport {
            id: 1,
            source: PC,
            metric,
            observed: 1.0,
            threshold: 0.0,
            severity,
            priority: 0,
            t_observed: SimTime(0),
        }
    }

    #[test]
    fn registration_and_removal() {
        let mut armor = Armor::new(PC);
        let hang = report(MetricId::TimeoutHang, Severity::Fatal);
        assert!(armor.deliver_report(&hang, SimTime(0)).actions.is_empty());
        armor.register_element(builtin_element("restart-on-hang").unwrap()).unwrap();
        let d = armor.deliver_report(&hang, SimTime(1));
        assert_eq!(d.actions, vec![RecoveryAction::Restart { node: PC }]);
        assert!(d.escalations.is_empty());
        armor.remove_element("restart-on-hang").unwrap();
        assert!(armor.deliver_report(&hang, SimTime(2)).actions.is_empty());
        assert_eq!(armor.remove_element("restart-on-hang").unwrap_err(), ArmorError::UnknownElementId("restart-on-hang".into()));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut armor = Armor::new(PC);
        armor.register_element(builtin_element("escalate-all").unwrap()).unwrap();
        assert_eq!(
            armor.register_element(builtin_element("escalate-all").unwrap()),
            Err(ArmorError::DuplicateElementId("escalate-all".into()))
        );
        assert!(matches!(builtin_element("reboot-universe"), Err(ArmorError::UnknownElement(_))));
    }

    #[test]
    fn invocation_follows_registration_order() {
        let mut armor = Armor::new(PC);
        armor.register_element(builtin_element("escalate-all").unwrap()).unwrap();
        armor.register_element(builtin_element("restart-on-hang").unwrap()).unwrap();
        let d = armor.deliver_report(&report(MetricId::TimeoutHang, Severity::Fatal), SimTime(0));
        assert_eq!(d.invoked, vec!["escalate-all".to_string(), "restart-on-hang".to_string()]);
        assert_eq!(d.actions.len(), 1);
        assert_eq!(d.escalations.len(), 1);
    }

    #[test]
    fn unclaimed_fatal_auto_escalates() {
        let mut armor = Armor::new(PC);
        let d = armor.deliver_report(&report(MetricId::ProcessDead, Severity::Fatal), SimTime(0));
        assert_eq!(d.escalations.len(), 1);
        assert_eq!(d.escalations[0].1, EscalationReason::Unclaimed);
        assert_eq!(armor.audit, FatalAudit { received: 1, acted: 0, escalated: 1 });
    }

    #[test]
    fn info_without_subscribers_is_absorbed() {
        let mut armor = Armor::new(PC);
        armor.set_roster(&["restart-on-crash".into()]).unwrap();
        let d = armor.deliver_report(&report(MetricId::CpuHeadroom, Severity::Info), SimTime(0));
        assert!(d.absorbed && d.actions.is_empty() && d.escalations.is_empty());
        assert_eq!(armor.absorbed[&Severity::Info], 1);
    }

    #[test]
    fn replay_into_fresh_armor_is_identical() {
        let reports: Vec<ConditionReport> = [
            (MetricId::ProcessDead, Severity::Fatal),
            (MetricId::TimeoutHang, Severity::Warning),
            (MetricId::TimeoutHang, Severity::Fatal),
            (MetricId::Utilization, Severity::Warning),
            (MetricId::CpuTemperature, Severity::Error),
        ]
        .into_iter()
        .map(|(m, s)| report(m, s))
        .collect();
        let run = || {
            let mut armor = Armor::new(PC);
            armor.set_roster(&BUILTIN_ELEMENTS.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap();
            reports.iter().map(|r| armor.deliver_report(r, SimTime(0))).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn policy() -> RestartPolicy {
        RestartPolicy { restart_delay: SimDuration::from_secs(2), storm_limit: 3, storm_window: SimDuration::from_secs(60) }
    }

    #[test]
    fn restart_cycle() {
        let mut p = ProcessRecord::new(1, ProcessRole::TriggerFilter);
        p.transition(ProcessState::Crashed).unwrap();
        let ready = p.restart_process(SimTime::from_secs_f64(10.0), &policy()).unwrap();
        assert_eq!(ready, SimTime::from_secs_f64(12.0));
        assert_eq!(p.state, ProcessState::Restarting);
        p.transition(ProcessState::Running).unwrap();
        assert_eq!(p.restart_count, 1);
    }

    #[test]
    fn fourth_crash_within_a_minute_is_a_storm() {
        let mut p = ProcessRecord::new(1, ProcessRole::TriggerFilter);
        for i in 0..3 {
            p.transition(ProcessState::Crashed).unwrap();
            p.restart_process(SimTime::from_secs_f64(10.0 * i as f64), &policy()).unwrap();
            p.transition(ProcessState::Running).unwrap();
        }
        p.transition(ProcessState::Crashed).unwrap();
        match p.restart_process(SimTime::from_secs_f64(35.0), &policy()) {
            Err(ArmorError::RestartStorm { restarts }) => assert_eq!(restarts.len(), 3),
            other => panic!("expected storm, got {other:?}"),
        }
        // Once the oldest restart ages out, restarting is allowed again.
        assert!(p.restart_process(SimTime::from_secs_f64(61.0), &policy()).is_ok());
    }

    #[test]
    fn running_cannot_go_straight_to_running() {
        let mut p = ProcessRecord::new(1, ProcessRole::TriggerFilter);
        assert!(p.transition(ProcessState::Running).is_err());
        assert!(p.transition(ProcessState::Restarting).is_err());
        let mut p = ProcessRecord::new(1, ProcessRole::TriggerFilter);
        assert!(p.restart_process(SimTime(0), &policy()).is_err(), "only crashed/hung processes restart");
    }

    #[test]
    fn checkpoint_resume() {
        let service = SimDuration::from_millis(100);
        let progress = checkpoint_progress(SimDuration::from_millis(57), service, SimDuration::from_millis(10));
        assert!((progress - 0.5).abs() < 1e-12);
        assert_eq!(resume_remaining(service, progress), SimDuration::from_millis(50));
        assert_eq!(resume_remaining(service, 0.0), service);
    }

    #[test]
    fn heartbeat_detection_respects_bound_for_all_phases() {
        // Process beats on a 1 s comb with phase `beat_phase`; the monitor
        // checks on a 1 s comb at phase 0. Sweep crash instants over a period.
        let cfg = HeartbeatConfig { period: SimDuration::from_secs(1), miss_threshold: 3 };
        let p = cfg.period.0;
        for beat_phase in [0, p / 3, p - 1] {
            for step in 0..50u64 {
                let crash = SimTime(10 * p + step * p / 50);
                let mut mon = HeartbeatMonitor::new(cfg);
                mon.watch(PC, SimTime(0));
                let mut t = beat_phase;
                while t < crash.0 {
                    mon.beat(PC, SimTime(t));
                    t += p;
                }
                let mut check = (crash.0 / p) * p;
                let detected = loop {
                    if check >= crash.0 && !mon.heartbeat_tick(SimTime(check), |_| true).is_empty() {
                        break SimTime(check);
                    }
                    check += p;
                };
                let latency = detected.since(crash);
                assert!(latency <= cfg.detection_bound(), "phase {beat_phase} step {step}: {latency}");
            }
        }
    }

    #[test]
    fn healthy_heartbeats_raise_nothing() {
        let cfg = HeartbeatConfig { period: SimDuration::from_secs(1), miss_threshold: 3 };
        let mut mon = HeartbeatMonitor::new(cfg);
        mon.watch(PC, SimTime(0));
        for s in 1..20 {
            mon.beat(PC, SimTime::from_secs_f64(s as f64 - 0.5));
            assert!(mon.heartbeat_tick(SimTime::from_secs_f64(s as f64), |_| true).is_empty());
        }
    }

    #[test]
    fn overload_request_after_sustained_crossing() {
        // Seeded at 0.5, stepped to 1.0: after update k (from 0) the EWMA is
        // 1 - 0.5 * (1 - alpha)^(k + 1).
        let alpha: f64 = 0.5;
        let first_above = (0..).find(|k: &i32| 1.0 - 0.5 * (1.0 - alpha).powi(k + 1) > 0.98).unwrap();
        assert_eq!(first_above, 4);
        let mut tracker = OverloadTracker::new(alpha, 0.98, SimDuration::from_secs(30));
        tracker.seed(0.5);
        let mut fired_at = None;
        for k in 0..60i32 {
            if tracker.update(SimTime::from_secs_f64(k as f64), 1.0) {
                fired_at = Some(k);
                break;
            }
        }
        assert_eq!(fired_at, Some(first_above + 30));
    }

    #[test]
    fn roster_validation_names_the_field() {
        let roster = ElementRoster { pc: vec!["restart-on-crash".into(), "bogus".into()], l1_regional: vec![] };
        let (field, _) = roster.validate().unwrap_err();
        assert_eq!(field, "armor.elements.pc[1]");
    }
}
