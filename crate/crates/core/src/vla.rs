//! Very lightweight agents: threshold rules evaluated against a worker's
//! local measures, a bounded priority report queue, duty-cycle adaptation and
//! per-task watchdogs.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kernel::{SimDuration, SimTime};
use crate::topology::NodeAddress;

/// Measures and detector conditions a report can be about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    QueueOccupancy,
    CpuHeadroom,
    LinkErrors,
    CpuTemperature,
    /// Recent service time as a multiple of the level's nominal mean.
    ServiceTimeEwma,
    /// I/O errors per second over the last sampling period.
    IoErrors,
    Utilization,
    TimeoutHang,
    ProcessDead,
    NodeSilent,
    RestartStorm,
    RestartFailed,
    MigrationRequest,
    NoTargetAvailable,
    RegionDegraded,
}

impl MetricId {
    /// Measures a VLA can sample; the rest are raised by detectors.
    pub fn is_sampled(self) -> bool {
        matches!(
            self,
            MetricId::QueueOccupancy
                | MetricId::CpuHeadroom
                | MetricId::LinkErrors
                | MetricId::CpuTemperature
                | MetricId::ServiceTimeEwma
                | MetricId::IoErrors
        )
    }

    /// Hardware sensors keep reporting while the worker process is down.
    pub fn is_hardware_sensor(self) -> bool {
        matches!(self, MetricId::CpuTemperature | MetricId::LinkErrors | MetricId::IoErrors)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Info,
    Warning,
    Error,
    Fatal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<=")]
    Le,
}

impl Comparison {
    pub fn holds(self, observed: f64, threshold: f64) -> bool {
        match self {
            Comparison::Gt => observed > threshold,
            Comparison::Lt => observed < threshold,
            Comparison::Ge => observed >= threshold,
            Comparison::Le => observed <= threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleTier {
    /// Evaluated and counted on the worker; never sent upward.
    LocalCheckOnly,
    ReportUpward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlaRule {
    pub metric: MetricId,
    pub op: Comparison,
    pub threshold: f64,
    pub severity: Severity,
    /// Lower is more urgent.
    pub priority: u8,
    pub tier: RuleTier,
}

impl VlaRule {
    pub fn validate(&self) -> Result<(), String> {
        if !self.threshold.is_finite() {
            return Err("threshold must be finite".into());
        }
        if !self.metric.is_sampled() {
            return Err(format!("metric `{}` cannot be sampled by an agent", self.metric));
        }
        Ok(())
    }
}

/// A versioned rule set; swapping versions resets suppression state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub version: u32,
    pub rules: Vec<VlaRule>,
}

impl RuleSet {
    pub fn new(version: u32, rules: Vec<VlaRule>) -> Self {
        RuleSet { version, rules }
    }
}

pub fn default_rules() -> Vec<VlaRule> {
    let rule = |metric, op, threshold, severity, priority, tier| VlaRule { metric, op, threshold, severity, priority, tier };
    vec![
        rule(MetricId::CpuTemperature, Comparison::Ge, 85.0, Severity::Error, 1, RuleTier::ReportUpward),
        rule(MetricId::IoErrors, Comparison::Gt, 50.0, Severity::Error, 2, RuleTier::ReportUpward),
        rule(MetricId::LinkErrors, Comparison::Gt, 0.0, Severity::Warning, 2, RuleTier::ReportUpward),
        rule(MetricId::QueueOccupancy, Comparison::Gt, 56.0, Severity::Warning, 3, RuleTier::ReportUpward),
        rule(MetricId::ServiceTimeEwma, Comparison::Gt, 1.5, Severity::Warning, 4, RuleTier::ReportUpward),
        rule(MetricId::CpuHeadroom, Comparison::Lt, 0.02, Severity::Info, 6, RuleTier::LocalCheckOnly),
    ]
}

/// Measures visible to an agent at one sampling instant.
pub type MetricSnapshot = BTreeMap<MetricId, f64>;

/// Pure rule evaluation: indexes of rules whose comparison holds.
pub fn evaluate(rules: &[VlaRule], snapshot: &MetricSnapshot) -> Vec<usize> {
    rules
        .iter()
        .enumerate()
        .filter(|(_, r)| snapshot.get(&r.metric).is_some_and(|v| r.op.holds(*v, r.threshold)))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub id: u64,
    pub source: NodeAddress,
    pub metric: MetricId,
    pub observed: f64,
    pub threshold: f64,
    pub severity: Severity,
    pub priority: u8,
    pub t_observed: SimTime,
}

impl fmt::Display for ConditionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#{} {:?} {} from {} observed {} vs {}",
            self.id, self.severity, self.metric, self.source, self.observed, self.threshold
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PushOutcome {
    Queued,
    /// Queued after evicting this less urgent report.
    Evicted(ConditionReport),
    /// Queue full of equally or more urgent reports; newcomer dropped.
    Dropped,
}

/// Bounded priority queue: most urgent first, FIFO within a priority.
#[derive(Debug, Clone)]
pub struct ReportQueue {
    capacity: usize,
    entries: Vec<(u8, u64, ConditionReport)>,
    seq: u64,
    pub evicted: u64,
    pub dropped: u64,
}

impl ReportQueue {
    pub fn new(capacity: usize) -> Self {
        ReportQueue { capacity, entries: Vec::new(), seq: 0, evicted: 0, dropped: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn enqueue(&mut self, report: ConditionReport) -> PushOutcome {
        let mut outcome = PushOutcome::Queued;
        if self.entries.len() >= self.capacity {
            // Least urgent is the largest priority; among those, the newest.
            let worst = self
                .entries
                .iter()
                .enumerate()
                .max_by_key(|(_, (p, s, _))| (*p, *s))
                .map(|(i, (p, _, _))| (i, *p));
            match worst {
                Some((idx, p)) if report.priority < p => {
                    let (_, _, old) = self.entries.remove(idx);
                    self.evicted += 1;
                    outcome = PushOutcome::Evicted(old);
                }
                _ => {
                    self.dropped += 1;
                    return PushOutcome::Dropped;
                }
            }
        }
        let seq = self.seq;
        self.seq += 1;
        let pos = self.entries.partition_point(|(p, s, _)| (*p, *s) < (report.priority, seq));
        self.entries.insert(pos, (report.priority, seq, report));
        outcome
    }

    pub fn pop(&mut self) -> Option<ConditionReport> {
        if self.entries.is_empty() {
            None
        } else {
            Some(self.entries.remove(0).2)
        }
    }

    pub fn drain_all(&mut self) -> Vec<ConditionReport> {
        self.entries.drain(..).map(|(_, _, r)| r).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VlaConfig {
    pub rules: Vec<VlaRule>,
    pub dsp_period_ms: f64,
    pub pc_period_ms: f64,
    pub min_period_ms: f64,
    pub max_period_ms: f64,
    /// Share of worker capacity the agent may consume.
    pub budget_fraction: f64,
    pub dsp_cost_us: f64,
    pub pc_cost_us: f64,
    pub report_queue_capacity: usize,
    pub refractory_samples: u32,
}

impl Default for VlaConfig {
    fn default() -> Self {
        VlaConfig {
            rules: default_rules(),
            dsp_period_ms: 10.0,
            pc_period_ms: 100.0,
            min_period_ms: 1.0,
            max_period_ms: 10_000.0,
            budget_fraction: 0.02,
            dsp_cost_us: 50.0,
            pc_cost_us: 500.0,
            report_queue_capacity: 32,
            refractory_samples: 10,
        }
    }
}

impl VlaConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        for (i, rule) in self.rules.iter().enumerate() {
            rule.validate().map_err(|m| (format!("vla.rules[{i}]"), m))?;
        }
        let positive = [
            ("vla.dsp_period_ms", self.dsp_period_ms),
            ("vla.pc_period_ms", self.pc_period_ms),
            ("vla.min_period_ms", self.min_period_ms),
            ("vla.max_period_ms", self.max_period_ms),
            ("vla.budget_fraction", self.budget_fraction),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err((name.into(), "must be positive".into()));
            }
        }
        if self.min_period_ms > self.max_period_ms {
            return Err(("vla.min_period_ms".into(), "exceeds max_period_ms".into()));
        }
        for (name, p) in [("vla.dsp_period_ms", self.dsp_period_ms), ("vla.pc_period_ms", self.pc_period_ms)] {
            if p < self.min_period_ms || p > self.max_period_ms {
                return Err((name.into(), "outside [min_period_ms, max_period_ms]".into()));
            }
        }
        if self.report_queue_capacity == 0 {
            return Err(("vla.report_queue_capacity".into(), "must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct RuleMemory {
    active: bool,
    since_fire: u32,
}

/// Per-worker agent state.
#[derive(Debug, Clone)]
pub struct VlaAgent {
    period: SimDuration,
    min_period: SimDuration,
    max_period: SimDuration,
    cost: SimDuration,
    budget_fraction: f64,
    refractory: u32,
    rules: Arc<RuleSet>,
    memory: Vec<RuleMemory>,
    /// Reports raised by local-only rules.
    pub local_hits: u64,
}

impl VlaAgent {
    pub fn new(period: SimDuration, cost: SimDuration, config: &VlaConfig, rules: Arc<RuleSet>) -> Self {
        let min_period = SimDuration::from_secs_f64(config.min_period_ms * 1e-3);
        let max_period = SimDuration::from_secs_f64(config.max_period_ms * 1e-3);
        VlaAgent {
            period,
            min_period,
            max_period,
            cost,
            budget_fraction: config.budget_fraction,
            refractory: config.refractory_samples,
            memory: vec![RuleMemory::default(); rules.rules.len()],
            rules,
            local_hits: 0,
        }
    }

    pub fn period(&self) -> SimDuration {
        self.period
    }

    pub fn cost(&self) -> SimDuration {
        self.cost
    }

    pub fn rules(&self) -> &Arc<RuleSet> {
        &self.rules
    }

    /// Hot-swaps the rule set when the version differs.
    pub fn install_rules(&mut self, rules: Arc<RuleSet>) {
        if rules.version != self.rules.version || rules.rules != self.rules.rules {
            self.memory = vec![RuleMemory::default(); rules.rules.len()];
            self.rules = rules;
        }
    }

    /// Shortest period that keeps the per-tick cost within budget.
    pub fn period_floor(&self) -> SimDuration {
        let budget_floor = SimDuration::from_secs_f64(self.cost.as_secs_f64() / self.budget_fraction);
        self.min_period.max(budget_floor)
    }

    /// Applies rules with duplicate suppression. Returns reports for
    /// upward-tier rules; local-only hits are only counted.
    pub fn sample(&mut self, source: NodeAddress, snapshot: &MetricSnapshot, now: SimTime, next_id: &mut u64) -> Vec<ConditionReport> {
        let holding = evaluate(&self.rules.rules, snapshot);
        let mut out = Vec::new();
        for (idx, rule) in self.rules.rules.iter().enumerate() {
            let mem = &mut self.memory[idx];
            if !holding.contains(&idx) {
                *mem = RuleMemory::default();
                continue;
            }
            let fire = if mem.active {
                mem.since_fire += 1;
                mem.since_fire >= self.refractory
            } else {
                true
            };
            if !fire {
                continue;
            }
            mem.active = true;
            mem.since_fire = 0;
            match rule.tier {
                RuleTier::LocalCheckOnly => self.local_hits += 1,
                RuleTier::ReportUpward => {
                    out.push(ConditionReport {
                        id: *next_id,
                        source,
                        metric: rule.metric,
                        observed: snapshot[&rule.metric],
                        threshold: rule.threshold,
                        severity: rule.severity,
                        priority: rule.priority,
                        t_observed: now,
                    });
                    *next_id += 1;
                }
            }
        }
        out
    }

    /// Backs off when starved of CPU, speeds up when there is room.
    pub fn adapt(&mut self, cpu_headroom: f64) -> SimDuration {
        self.period = adapt_period(self.period, cpu_headroom, self.period_floor(), self.max_period);
        self.period
    }
}

/// headroom < 0.05 doubles the period (capped); > 0.25 halves it (floored).
pub fn adapt_period(period: SimDuration, cpu_headroom: f64, floor: SimDuration, cap: SimDuration) -> SimDuration {
    if cpu_headroom < 0.05 {
        SimDuration(period.0.saturating_mul(2)).min(cap)
    } else if cpu_headroom > 0.25 {
        SimDuration(period.0 / 2).max(floor)
    } else {
        period
    }
}

/// Task deadlines default to ten times the level's mean service.
pub fn default_deadline(mean: SimDuration) -> SimDuration {
    SimDuration(mean.0 * 10)
}

/// Fires once a task has run past its deadline: Fatal when the task is
/// stalled, Warning when it is merely slow and will still complete.
pub fn watchdog_check(elapsed: SimDuration, deadline: SimDuration, stalled: bool) -> Option<Severity> {
    if elapsed > deadline {
        Some(if stalled { Severity::Fatal } else { Severity::Warning })
    } else {
        None
    }
}
