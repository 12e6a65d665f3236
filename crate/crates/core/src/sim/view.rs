//! Read-only views: per-worker info, snapshots, the run report and the
//! periodic metric flush.

use serde::Serialize;

use crate::armor::{FatalAudit, ProcessState};
use crate::control::{FarmSnapshot, MetricsSnapshot, TreeNode};
use crate::faults::FaultId;
use crate::kernel::{Kernel, SimDuration, SimTime, Target};
use crate::metrics::{FaultEntry, LatencySummary, ReportCounts, RunReport, Utilization};
use crate::topology::{NodeAddress, NodeStatus};

use super::world::World;
use super::{Payload, SimError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerInfo {
    pub addr: NodeAddress,
    pub status: NodeStatus,
    pub process: ProcessState,
    pub restart_count: u32,
    pub hung: bool,
    pub dead: bool,
    pub queue: usize,
    pub busy: bool,
    pub tasks_done: u64,
    pub service_busy_s: f64,
    pub vla_busy_s: f64,
    pub vla_period_s: f64,
    pub slowdown: f64,
    pub link_up: bool,
    pub suspected: bool,
}

impl World {
    pub(super) fn worker_info(&self, addr: &NodeAddress) -> Option<WorkerInfo> {
        let wk = &self.workers[*self.index.get(addr)?];
        Some(WorkerInfo {
            addr: wk.addr,
            status: wk.status,
            process: wk.process.state,
            restart_count: wk.process.restart_count,
            hung: wk.hung,
            dead: wk.dead,
            queue: wk.queue.len(),
            busy: wk.task.is_some(),
            tasks_done: wk.tasks_done,
            service_busy_s: SimDuration(wk.svc_ns).as_secs_f64(),
            vla_busy_s: SimDuration(wk.vla_ns).as_secs_f64(),
            vla_period_s: wk.vla.period().as_secs_f64(),
            slowdown: wk.slowdown(),
            link_up: wk.link_up,
            suspected: wk.suspected,
        })
    }

    fn report_counts(&self) -> ReportCounts {
        let mut counts = self.report_counts.clone();
        for b in &self.boards {
            counts.reports_evicted += b.reports.evicted;
            counts.reports_dropped += b.reports.dropped;
        }
        counts
    }

    fn utilization(&self, now: SimTime) -> Utilization {
        let span = now.0.max(1) as f64;
        let (mut l1, mut l23) = (0u64, 0u64);
        for w in &self.workers {
            if w.dsp {
                l1 += w.service_busy(now);
            } else {
                l23 += w.service_busy(now);
            }
        }
        Utilization { l1: l1 as f64 / (self.dsp_count as f64 * span), l23: l23 as f64 / (self.configured_pcs as f64 * span) }
    }

    pub(super) fn report(&self, now: SimTime, events: u64) -> RunReport {
        let span = now.0.max(1) as f64;
        let vla_ns: u64 = self.workers.iter().map(|w| w.vla_ns).sum();
        let mut fatal_audit = FatalAudit::default();
        let armors = self.l1.iter().map(|r| &r.armor).chain(self.workers.iter().filter_map(|w| w.armor.as_ref()).map(|a| &a.armor));
        for a in armors {
            fatal_audit.received += a.audit.received;
            fatal_audit.acted += a.audit.acted;
            fatal_audit.escalated += a.audit.escalated;
        }
        RunReport {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            duration_s: now.as_secs_f64(),
            events_delivered: events,
            uptime: self.uptime.fraction(now),
            crossings: self.accounts.clone(),
            in_flight: self.in_flight(),
            drop_fraction: self.accounts.drop_fraction(),
            stage_drop_fractions: self.accounts.stage_fractions(),
            detection_latency: LatencySummary::from_samples(self.faults.iter().filter_map(|f| f.detection_latency())),
            recovery_latency: LatencySummary::from_samples(self.faults.iter().filter_map(|f| f.recovery_latency())),
            faults: self.faults.iter().map(FaultEntry::from).collect(),
            utilization: self.utilization(now),
            vla_overhead: vla_ns as f64 / (self.workers.len() as f64 * span),
            messages: self.messages.clone(),
            reports: self.report_counts(),
            fatal_audit,
            global_audit: self.global.audit.clone(),
            directives: self.directives.clone(),
            throttle: self.generator.throttle(),
        }
    }

    fn active_faults_on(&self, addr: &NodeAddress) -> Vec<FaultId> {
        self.faults.iter().filter(|f| f.active && f.target == *addr).map(|f| f.id).collect()
    }

    fn tree(&self, addr: NodeAddress) -> TreeNode {
        let rec = self.farm.node(&addr).expect("farm address");
        let worker = self.index.get(&addr).map(|&w| &self.workers[w]);
        TreeNode {
            addr,
            kind: rec.kind,
            status: rec.status,
            link_up: rec.link_up,
            process: worker.map(|w| w.process.state),
            queue: worker.map(|w| w.occupancy()),
            active_faults: self.active_faults_on(&addr),
            children: self.farm.children(&addr).unwrap_or_default().into_iter().map(|c| self.tree(c)).collect(),
        }
    }

    pub(super) fn farm_snapshot(&self, now: SimTime) -> FarmSnapshot {
        FarmSnapshot {
            t: now,
            t_s: now.as_secs_f64(),
            config: *self.farm.config(),
            root: self.tree(NodeAddress::Global),
            active_faults: self.faults.iter().filter(|f| f.active).map(FaultEntry::from).collect(),
            throttle: self.generator.throttle(),
            generation_paused: self.generator.is_paused(),
        }
    }

    pub(super) fn metrics_snapshot(&self, now: SimTime) -> MetricsSnapshot {
        let (l1, l23) = self.capacity_ratios();
        MetricsSnapshot {
            t: now,
            t_s: now.as_secs_f64(),
            crossings: self.accounts.clone(),
            in_flight: self.in_flight(),
            drop_fraction: self.accounts.drop_fraction(),
            uptime_so_far: self.uptime.fraction(now),
            capacity_ratio_l1: l1,
            capacity_ratio_l23: l23,
            messages: self.messages.clone(),
            throttle: self.generator.throttle(),
            latest: self.series.latest(),
            windows: self.global.summaries().values().cloned().collect(),
            faults: self.faults.iter().map(FaultEntry::from).collect(),
        }
    }

    /// Checks conservation and, with metrics on, records one point per series.
    pub(super) fn on_flush(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        let now = k.now();
        self.accounts.check_conservation(self.in_flight())?;
        if self.scenario.metrics.enabled {
            let t0 = self.flush_mark;
            let dt = now.since(t0).as_secs_f64().max(1e-9);
            let prev = &self.flush_accounts;
            let admitted = (self.accounts.generated - self.accounts.throttled) - (prev.generated - prev.throttled);
            let dropped = self.accounts.dropped_total() - prev.dropped_total();
            let accepted = self.accounts.accepted_l3 - prev.accepted_l3;
            let (l1, l23) = self.capacity_ratios();
            let points = [
                ("admitted_hz", admitted as f64 / dt),
                ("accepted_hz", accepted as f64 / dt),
                ("drop_fraction", if admitted > 0 { dropped as f64 / admitted as f64 } else { 0.0 }),
                ("throttle", self.generator.throttle()),
                ("capacity_l1", l1),
                ("capacity_l23", l23),
                ("in_flight", self.in_flight() as f64),
                ("uptime", self.uptime.fraction(now)),
            ];
            for (name, v) in points {
                self.series.push(name, t0, v);
            }
            self.flush_accounts = self.accounts.clone();
        }
        self.flush_mark = now;
        k.schedule_after(self.scenario.metrics.flush_period(), Target::Kernel, Payload::MetricFlush)?;
        Ok(())
    }
}
