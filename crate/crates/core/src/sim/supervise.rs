//! Heartbeats, VLA sampling, watchdogs, ARMOR delivery, restarts and
//! migrations, node statistics, silence detection, regional windows and the
//! global manager.

use std::collections::BTreeMap;

use crate::armor::{ArmorError, Delivery, EscalationReason, ProcessState, RecoveryAction};
use crate::control::StreamKind;
use crate::managers::{Escalation, GlobalDirective, NodeStats, NodeView, RegionalAction, WorkerStat};
use crate::kernel::{Kernel, SimDuration, SimTime, Target};
use crate::metrics::Tier;
use crate::topology::{NodeAddress, NodeKind, NodeStatus};
use crate::vla::{default_deadline, watchdog_check, ConditionReport, MetricId, MetricSnapshot, Severity};

use super::world::{World, EVALUATE_DELAY, FE_FLUSH, IDLE_TEMP_C, LOAD_TEMP_C, THERMAL_ALPHA};
use super::{Message, MessageBody, Payload, SimError, Timer};

/// The regional manager that owns `addr`, or `addr` itself if it is one.
pub(super) fn region_of(addr: NodeAddress) -> NodeAddress {
    if addr.kind().is_regional() {
        addr
    } else {
        addr.regional_manager().unwrap_or(NodeAddress::Global)
    }
}

fn describe(action: &RegionalAction) -> (NodeAddress, String) {
    match action {
        RegionalAction::Restart { node } => (*node, format!("restart {node}")),
        RegionalAction::OutOfService { node } => (*node, format!("take {node} out of service")),
        RegionalAction::Reassign { spare, replaces } => (*replaces, format!("reassign spare {spare} in place of {replaces}")),
        RegionalAction::Migrate { from, to } => (*from, format!("migrate {from} to {to}")),
        RegionalAction::ReturnToService { node } => (*node, format!("return {node} to service")),
        RegionalAction::EscalateToGlobal { escalation } => {
            (escalation.report.source, format!("escalate {} ({:?}) to global", escalation.report.metric, escalation.reason))
        }
    }
}

impl World {
    pub(super) fn on_heartbeat_tick(&mut self, k: &mut Kernel<Payload>, w: usize) -> Result<(), SimError> {
        let now = k.now();
        let wk = &self.workers[w];
        if wk.dead {
            return Ok(());
        }
        let addr = wk.addr;
        k.schedule_after(self.heartbeat.period, Target::Node(addr), Payload::HeartbeatTick { worker: w as u32 })?;
        if !matches!(wk.process.state, ProcessState::Running | ProcessState::Hung) {
            return Ok(());
        }
        if wk.dsp {
            let region = self.l1[wk.region].addr;
            self.send(k, addr, region, MessageBody::Heartbeat { worker: addr })?;
        } else if let Some(pa) = self.workers[w].armor.as_mut() {
            pa.monitor.beat(addr, now);
            self.workers[w].suspected = false;
        }
        Ok(())
    }

    pub(super) fn on_vla_sample(&mut self, k: &mut Kernel<Payload>, w: usize) -> Result<(), SimError> {
        let now = k.now();
        let deadline_of = |s| default_deadline(self.scenario.service.level(s).mean());
        let wk = &mut self.workers[w];
        if wk.dead {
            return Ok(());
        }
        let mut snap = MetricSnapshot::new();
        let temp = wk.temps.values().last().copied().unwrap_or(IDLE_TEMP_C + LOAD_TEMP_C * wk.util_ewma);
        snap.insert(MetricId::CpuTemperature, temp);
        snap.insert(MetricId::LinkErrors, (wk.link_errors - wk.link_errors_seen) as f64);
        wk.link_errors_seen = wk.link_errors;
        snap.insert(MetricId::IoErrors, wk.io_rates.values().sum());
        let busy = wk.busy(now);
        let elapsed = now.since(wk.sample_mark.0).0;
        let headroom = if elapsed > 0 { (1.0 - busy.saturating_sub(wk.sample_mark.1) as f64 / elapsed as f64).clamp(0.0, 1.0) } else { 1.0 };
        if matches!(wk.process.state, ProcessState::Running | ProcessState::Hung) {
            snap.insert(MetricId::QueueOccupancy, wk.queue.len() as f64);
            snap.insert(MetricId::CpuHeadroom, headroom);
            snap.insert(MetricId::ServiceTimeEwma, wk.service_ratio);
        }
        let addr = wk.addr;
        let reports = wk.vla.sample(addr, &snap, now, &mut self.next_report_id);

        let cost = wk.vla.cost();
        wk.vla_ns += cost.0;
        let target = Target::Node(addr);
        match wk.task.as_mut() {
            Some(task) if task.complete.is_some() => {
                task.done_at = task.done_at + cost;
                task.vla_in += cost;
                if let Some(h) = task.complete.take() {
                    k.cancel(h);
                }
                let worker = w as u32;
                task.complete = Some(k.schedule(task.done_at, target, Payload::ServiceComplete { worker, token: task.token })?);
                let deadline = deadline_of(task.job.stage);
                if task.watchdog.is_none() && !task.watchdog_fired && task.done_at.since(task.started) > deadline {
                    let at = (task.started + deadline + SimDuration(1)).max(now);
                    task.watchdog = Some(k.schedule(at, target, Payload::Timer(Timer::Watchdog { worker, token: task.token }))?);
                }
            }
            _ => wk.vla_busy_until = wk.vla_busy_until.max(now) + cost,
        }
        wk.sample_mark = (now, wk.busy(now));
        let period = wk.vla.adapt(headroom);
        k.schedule_after(period, target, Payload::VlaSampleTick { worker: w as u32 })?;

        self.report_counts.vla_reports += reports.len() as u64;
        for report in reports {
            self.route_worker_report(k, w, report)?;
        }
        Ok(())
    }

    /// DSP reports go through the board front-end; PC reports to the local ARMOR.
    fn route_worker_report(&mut self, k: &mut Kernel<Payload>, w: usize, report: ConditionReport) -> Result<(), SimError> {
        let wk = &self.workers[w];
        match wk.board {
            Some(b) => {
                if wk.link_up && !self.boards[b].fe_dead {
                    self.boards[b].reports.enqueue(report);
                } else {
                    self.report_counts.reports_dropped += 1;
                    self.workers[w].link_errors += 1;
                }
                Ok(())
            }
            None => self.to_pc_armor(k, w, report),
        }
    }

    pub(super) fn on_watchdog(&mut self, k: &mut Kernel<Payload>, w: usize, token: u64) -> Result<(), SimError> {
        let now = k.now();
        let wk = &mut self.workers[w];
        let stalled = wk.hung;
        let Some(task) = wk.task.as_mut().filter(|t| t.token == token) else { return Ok(()) };
        task.watchdog = None;
        if task.watchdog_fired {
            return Ok(());
        }
        let deadline = default_deadline(self.scenario.service.level(task.job.stage).mean());
        let elapsed = now.since(task.started);
        let Some(severity) = watchdog_check(elapsed, deadline, stalled) else { return Ok(()) };
        task.watchdog_fired = true;
        if severity == Severity::Fatal && wk.process.state == ProcessState::Running {
            wk.process.transition(ProcessState::Hung).ok();
            self.dirty = true;
        }
        let addr = wk.addr;
        let priority = if severity == Severity::Fatal { 0 } else { 3 };
        let report = self.make_report(addr, MetricId::TimeoutHang, elapsed.as_secs_f64(), deadline.as_secs_f64(), severity, priority, now);
        self.route_worker_report(k, w, report)
    }

    pub(super) fn on_armor_check(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        let now = k.now();
        let timeout = self.heartbeat.timeout();
        let quiet = |s: ProcessState| !matches!(s, ProcessState::Restarting | ProcessState::Migrating);
        for r in 0..self.l1.len() {
            let (workers, index) = (&self.workers, &self.index);
            let flagged = self.l1[r].monitor.heartbeat_tick(now, |a| {
                let wk = &workers[index[a]];
                !wk.suspected && quiet(wk.process.state)
            });
            for dsp in flagged {
                let w = self.index[&dsp];
                self.workers[w].suspected = true;
                let stale = self.l1[r].monitor.last_beat(&dsp).map_or(0.0, |t| now.since(t).as_secs_f64());
                let report = self.make_report(dsp, MetricId::ProcessDead, stale, timeout.as_secs_f64(), Severity::Fatal, 0, now);
                self.to_l1_armor(k, r, report)?;
            }
        }
        for w in 0..self.workers.len() {
            let wk = &self.workers[w];
            if wk.dead || wk.suspected || !quiet(wk.process.state) {
                continue;
            }
            let Some(pa) = wk.armor.as_ref() else { continue };
            if pa.monitor.heartbeat_tick(now, |_| true).is_empty() {
                continue;
            }
            let stale = pa.monitor.last_beat(&wk.addr).map_or(0.0, |t| now.since(t).as_secs_f64());
            let addr = wk.addr;
            self.workers[w].suspected = true;
            let report = self.make_report(addr, MetricId::ProcessDead, stale, timeout.as_secs_f64(), Severity::Fatal, 0, now);
            self.to_pc_armor(k, w, report)?;
        }
        k.schedule_after(self.heartbeat.period, Target::Kernel, Payload::Timer(Timer::ArmorCheck))?;
        Ok(())
    }

    fn to_l1_armor(&mut self, k: &mut Kernel<Payload>, r: usize, report: ConditionReport) -> Result<(), SimError> {
        let now = k.now();
        self.observe(&report, now);
        self.emit(now, StreamKind::Report, report.source, Some(report.severity), report.to_string(), vec![report.id]);
        self.l1[r].manager.record_report(&report);
        let delivery = self.l1[r].armor.deliver_report(&report, now);
        let node = self.l1[r].addr;
        self.after_delivery(k, node, delivery)
    }

    pub(super) fn to_pc_armor(&mut self, k: &mut Kernel<Payload>, w: usize, report: ConditionReport) -> Result<(), SimError> {
        let now = k.now();
        if self.workers[w].dead {
            return Ok(());
        }
        self.observe(&report, now);
        self.emit(now, StreamKind::Report, report.source, Some(report.severity), report.to_string(), vec![report.id]);
        let node = self.workers[w].addr;
        let Some(pa) = self.workers[w].armor.as_mut() else { return Ok(()) };
        let delivery = pa.armor.deliver_report(&report, now);
        self.after_delivery(k, node, delivery)
    }

    fn after_delivery(&mut self, k: &mut Kernel<Payload>, armor: NodeAddress, delivery: Delivery) -> Result<(), SimError> {
        let now = k.now();
        for action in delivery.actions {
            self.report_counts.local_actions += 1;
            match action {
                RecoveryAction::Restart { node } => {
                    self.emit(now, StreamKind::Action, node, None, format!("{armor} restarts {node}"), Vec::new());
                    if node == armor {
                        if let Some(&w) = self.index.get(&node) {
                            self.restart_worker(k, w, armor)?;
                        }
                    } else {
                        self.send(k, armor, node, MessageBody::Restart { node })?;
                    }
                }
                RecoveryAction::Migrate { from, .. } => {
                    let report = self.make_report(from, MetricId::MigrationRequest, 0.0, 0.0, Severity::Warning, 2, now);
                    self.observe(&report, now);
                    self.escalate_up(k, armor, Escalation::new(report, EscalationReason::Requested, armor))?;
                }
            }
        }
        for (report, reason) in delivery.escalations {
            self.escalate_up(k, armor, Escalation::new(report, reason, armor))?;
        }
        Ok(())
    }

    /// Hands an escalation from an ARMOR to its regional manager.
    fn escalate_up(&mut self, k: &mut Kernel<Payload>, from: NodeAddress, esc: Escalation) -> Result<(), SimError> {
        self.report_counts.escalations_to_regional += 1;
        let region = region_of(from);
        if region == from {
            self.regional_escalation(k, region, esc)
        } else {
            self.send(k, from, region, MessageBody::Escalation(esc)).map(|_| ())
        }
    }

    pub(super) fn restart_worker(&mut self, k: &mut Kernel<Payload>, w: usize, requester: NodeAddress) -> Result<(), SimError> {
        let now = k.now();
        let policy = self.restart_policy;
        let wk = &mut self.workers[w];
        let addr = wk.addr;
        match wk.process.restart_process(now, &policy) {
            Ok(ready) => {
                wk.hung = false;
                self.abort_task(k, w);
                k.schedule(ready, Target::Node(addr), Payload::Timer(Timer::RestartDone { worker: w as u32 }))?;
                self.dirty = true;
                Ok(())
            }
            Err(ArmorError::RestartStorm { restarts }) => {
                let n = restarts.len() as f64;
                let report = self.make_report(addr, MetricId::RestartStorm, n, policy.storm_limit as f64, Severity::Fatal, 0, now);
                self.observe(&report, now);
                self.emit(now, StreamKind::Report, addr, Some(Severity::Fatal), report.to_string(), vec![report.id]);
                let mut esc = Escalation::new(report, EscalationReason::RestartStorm, requester);
                esc.restart_history = restarts;
                self.escalate_up(k, requester, esc)
            }
            Err(_) => Ok(()),
        }
    }

    pub(super) fn on_restart_done(&mut self, k: &mut Kernel<Payload>, w: usize) -> Result<(), SimError> {
        let now = k.now();
        let wk = &mut self.workers[w];
        if wk.process.state != ProcessState::Restarting {
            return Ok(());
        }
        let addr = wk.addr;
        if wk.dead {
            wk.process.transition(ProcessState::Crashed).ok();
            if !wk.dsp {
                // The PC's own ARMOR died with it; silence detection takes over.
                return Ok(());
            }
            let supervisor = region_of(addr);
            let report = self.make_report(addr, MetricId::RestartFailed, 1.0, 0.0, Severity::Fatal, 0, now);
            self.observe(&report, now);
            self.emit(now, StreamKind::Report, addr, Some(Severity::Fatal), report.to_string(), vec![report.id]);
            return self.escalate_up(k, supervisor, Escalation::new(report, EscalationReason::RestartFailed, supervisor));
        }
        wk.process.transition(ProcessState::Running).ok();
        wk.suspected = false;
        self.dirty = true;
        self.rearm_monitor(w, now);
        self.emit(now, StreamKind::Action, addr, None, format!("{addr} restarted"), Vec::new());
        self.start_next(k, w)
    }

    fn rearm_monitor(&mut self, w: usize, now: SimTime) {
        let wk = &mut self.workers[w];
        let addr = wk.addr;
        if wk.dsp {
            self.l1[wk.region].monitor.beat(addr, now);
        } else if let Some(pa) = wk.armor.as_mut() {
            pa.monitor.beat(addr, now);
        }
    }

    pub(super) fn start_migration(&mut self, k: &mut Kernel<Payload>, w: usize) -> Result<(), SimError> {
        let now = k.now();
        let delay = self.scenario.armor.migrate_delay();
        let wk = &mut self.workers[w];
        if let Ok(ready) = wk.process.migrate_process(now, delay) {
            let addr = wk.addr;
            self.dirty = true;
            k.schedule(ready, Target::Node(addr), Payload::Timer(Timer::MigrationDone { worker: w as u32 }))?;
        }
        Ok(())
    }

    pub(super) fn on_migration_done(&mut self, k: &mut Kernel<Payload>, w: usize) -> Result<(), SimError> {
        let now = k.now();
        let wk = &mut self.workers[w];
        if wk.process.state != ProcessState::Migrating {
            return Ok(());
        }
        wk.process.transition(ProcessState::Running).ok();
        wk.suspected = false;
        let addr = wk.addr;
        self.dirty = true;
        self.rearm_monitor(w, now);
        self.emit(now, StreamKind::Action, addr, None, format!("{addr} took over its new duty"), Vec::new());
        self.start_next(k, w)
    }

    fn capacity_hz(&self, w: usize) -> f64 {
        let wk = &self.workers[w];
        if wk.process.state != ProcessState::Running {
            return 0.0;
        }
        let s = &self.scenario.service;
        let mean = if wk.dsp {
            s.l1.mean().as_secs_f64()
        } else {
            s.l2.mean().as_secs_f64() + self.scenario.accept.p_accept_l2 * s.l3.mean().as_secs_f64()
        };
        1.0 / (mean * wk.service_ratio.max(0.01))
    }

    fn worker_stat(&self, w: usize) -> WorkerStat {
        let wk = &self.workers[w];
        WorkerStat {
            worker: wk.addr,
            utilization: wk.util,
            queue: wk.queue.len(),
            service_ratio: wk.service_ratio,
            capacity_hz: self.capacity_hz(w),
        }
    }

    pub(super) fn on_stats_tick(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        let now = k.now();
        let mut overloaded = Vec::new();
        for w in 0..self.workers.len() {
            let wk = &mut self.workers[w];
            let busy = wk.service_busy(now);
            let dt = now.since(wk.stats_mark.0).0;
            wk.util = if dt > 0 { (busy.saturating_sub(wk.stats_mark.1) as f64 / dt as f64).min(1.0) } else { 0.0 };
            wk.util_ewma += THERMAL_ALPHA * (wk.util - wk.util_ewma);
            wk.stats_mark = (now, busy);
            let util = wk.util;
            if !wk.dead {
                if let Some(pa) = wk.armor.as_mut() {
                    if pa.overload.update(now, util) {
                        overloaded.push((w, pa.overload.ewma()));
                    }
                }
            }
        }
        for b in 0..self.boards.len() {
            let board = &self.boards[b];
            if board.fe_dead {
                continue;
            }
            let workers = board.dsps.iter().filter(|&&d| self.workers[d].link_up).map(|&d| self.worker_stat(d)).collect();
            let (fe, region) = (board.fe, self.l1[board.region].addr);
            self.send(k, fe, region, MessageBody::Stats(NodeStats { node: fe, t: now, workers }))?;
        }
        for r in 0..self.l23.len() {
            let region = self.l23[r].addr;
            for i in 0..self.l23[r].pcs.len() {
                let w = self.l23[r].pcs[i];
                if self.workers[w].dead {
                    continue;
                }
                let node = self.workers[w].addr;
                let stats = NodeStats { node, t: now, workers: vec![self.worker_stat(w)] };
                self.send(k, node, region, MessageBody::Stats(stats))?;
            }
        }
        let threshold = self.scenario.armor.overload_threshold;
        for (w, ewma) in overloaded {
            let addr = self.workers[w].addr;
            let report = self.make_report(addr, MetricId::Utilization, ewma, threshold, Severity::Warning, 2, now);
            self.to_pc_armor(k, w, report)?;
        }
        k.schedule_after(self.scenario.armor.stats_period(), Target::Kernel, Payload::Timer(Timer::StatsTick))?;
        Ok(())
    }

    pub(super) fn on_fe_flush(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        for b in 0..self.boards.len() {
            let board = &self.boards[b];
            if board.fe_dead || board.reports.is_empty() {
                continue;
            }
            let (fe, region) = (board.fe, self.l1[board.region].addr);
            if self.farm.route(&fe, &region).is_err() {
                continue;
            }
            let batch = self.boards[b].reports.drain_all();
            self.send(k, fe, region, MessageBody::Reports(batch))?;
        }
        k.schedule_after(FE_FLUSH, Target::Kernel, Payload::Timer(Timer::FrontEndFlush))?;
        Ok(())
    }

    fn regional_addrs(&self) -> Vec<NodeAddress> {
        self.l1.iter().map(|r| r.addr).chain(self.l23.iter().map(|r| r.addr)).collect()
    }

    /// Status of a worker as its regional manager sees it: a DSP on a board
    /// out of service is out of service too.
    pub(super) fn effective_status(&self, w: usize) -> NodeStatus {
        let wk = &self.workers[w];
        match wk.board {
            Some(b) if !self.boards[b].status.is_dispatchable() => NodeStatus::OutOfService,
            _ => wk.status,
        }
    }

    fn region_view(&self, region: &NodeAddress) -> Vec<NodeView> {
        let manager = self.manager(region);
        self.region_workers(region)
            .into_iter()
            .map(|w| {
                let addr = self.workers[w].addr;
                NodeView {
                    addr,
                    status: self.effective_status(w),
                    utilization: manager.and_then(|m| m.latest_stat(&addr)).map_or(0.0, |s| s.utilization),
                }
            })
            .collect()
    }

    pub(super) fn on_silence_check(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        let now = k.now();
        let timeout = self.scenario.managers.silence_timeout();
        for region in self.regional_addrs() {
            let silent = self.manager_mut(&region).map(|m| m.silent_nodes(now, timeout)).unwrap_or_default();
            for node in silent {
                let report = self.make_report(node, MetricId::NodeSilent, timeout.as_secs_f64(), timeout.as_secs_f64(), Severity::Error, 1, now);
                self.observe(&report, now);
                self.emit(now, StreamKind::Report, node, Some(Severity::Error), report.to_string(), vec![report.id]);
                let view = self.region_view(&region);
                let mut next = self.next_report_id;
                let actions = match self.manager_mut(&region) {
                    Some(m) => {
                        m.record_report(&report);
                        m.on_silence(&report, &view, now, &mut next)
                    }
                    None => Vec::new(),
                };
                self.next_report_id = next;
                self.apply_regional(k, region, actions)?;
            }
        }
        k.schedule_after(self.scenario.managers.silence_check(), Target::Kernel, Payload::Timer(Timer::SilenceCheck))?;
        Ok(())
    }

    pub(super) fn on_message(&mut self, k: &mut Kernel<Payload>, m: Message) -> Result<(), SimError> {
        let now = k.now();
        match m.body {
            MessageBody::Heartbeat { worker } => {
                if let NodeAddress::L1Region { region } = m.to {
                    self.l1[region as usize].monitor.beat(worker, m.sent);
                }
                if let Some(&w) = self.index.get(&worker) {
                    self.workers[w].suspected = false;
                }
            }
            MessageBody::Reports(batch) => {
                if let NodeAddress::L1Region { region } = m.to {
                    for report in batch {
                        self.to_l1_armor(k, region as usize, report)?;
                    }
                }
            }
            MessageBody::Stats(stats) => {
                let farm = &self.farm;
                let manager = match m.to {
                    NodeAddress::L1Region { region } => &mut self.l1[region as usize].manager,
                    NodeAddress::L23Region { region } => &mut self.l23[region as usize].manager,
                    _ => return Ok(()),
                };
                if manager.record_stats(&stats, now) {
                    let actions = manager.on_resume(stats.node, |a| farm.status(a).ok());
                    self.apply_regional(k, m.to, actions)?;
                }
            }
            MessageBody::Escalation(esc) => {
                if m.to == NodeAddress::Global {
                    self.global.on_escalation(&esc);
                    let cause = esc.cause_ids();
                    let summary = format!("global received {} ({:?})", esc.report.metric, esc.reason);
                    self.emit(now, StreamKind::Escalation, esc.report.source, Some(esc.report.severity), summary, cause);
                } else {
                    self.regional_escalation(k, m.to, esc)?;
                }
            }
            MessageBody::Summary(summary) => self.global.on_summary(summary),
            MessageBody::Directive(_) => {}
            MessageBody::Restart { node } => {
                if let Some(&w) = self.index.get(&node) {
                    self.restart_worker(k, w, m.from)?;
                }
            }
        }
        Ok(())
    }

    fn regional_escalation(&mut self, k: &mut Kernel<Payload>, region: NodeAddress, esc: Escalation) -> Result<(), SimError> {
        let now = k.now();
        self.observe(&esc.report, now);
        let summary = format!("{} escalated {} ({:?}) from {}", region, esc.report.metric, esc.reason, esc.report.source);
        self.emit(now, StreamKind::Escalation, esc.report.source, Some(esc.report.severity), summary, esc.cause_ids());
        let view = self.region_view(&region);
        let mut next = self.next_report_id;
        let actions = match self.manager_mut(&region) {
            Some(m) => m.on_escalation(esc, &view, now, &mut next),
            None => Vec::new(),
        };
        self.next_report_id = next;
        self.apply_regional(k, region, actions)
    }

    pub(super) fn apply_regional(&mut self, k: &mut Kernel<Payload>, region: NodeAddress, actions: Vec<RegionalAction>) -> Result<(), SimError> {
        let now = k.now();
        for action in actions {
            let (subject, summary) = describe(&action);
            let cause = match &action {
                RegionalAction::EscalateToGlobal { escalation } => escalation.cause_ids(),
                _ => Vec::new(),
            };
            self.emit(now, StreamKind::Action, subject, None, format!("{region}: {summary}"), cause);
            match action {
                RegionalAction::Restart { node } => {
                    self.report_counts.regional_actions += 1;
                    if self.index.contains_key(&node) {
                        self.send(k, region, node, MessageBody::Restart { node })?;
                    }
                }
                RegionalAction::OutOfService { node } => {
                    self.report_counts.regional_actions += 1;
                    self.take_out(k, node)?;
                }
                RegionalAction::Reassign { spare, replaces } => {
                    self.report_counts.regional_actions += 1;
                    self.bring_in_spare(k, spare, replaces)?;
                }
                RegionalAction::Migrate { from, to } => {
                    self.report_counts.regional_actions += 1;
                    self.take_out(k, from)?;
                    self.mark_replacement(from, to);
                }
                RegionalAction::ReturnToService { node } => {
                    self.report_counts.regional_actions += 1;
                    if self.status(&node) == Some(NodeStatus::OutOfService) {
                        self.set_status(node, NodeStatus::InService);
                    }
                }
                RegionalAction::EscalateToGlobal { escalation } => {
                    self.report_counts.escalations_to_global += 1;
                    self.send(k, region, NodeAddress::Global, MessageBody::Escalation(*escalation))?;
                }
            }
        }
        Ok(())
    }

    /// Marks a node out of service and moves its queued work elsewhere.
    pub(super) fn take_out(&mut self, k: &mut Kernel<Payload>, node: NodeAddress) -> Result<(), SimError> {
        self.set_status(node, NodeStatus::OutOfService);
        match node.kind() {
            NodeKind::WorkerDSP | NodeKind::WorkerPC => {
                if let Some(&w) = self.index.get(&node) {
                    self.requeue(k, w)?;
                }
            }
            NodeKind::Board => {
                if let Some(&b) = self.board_index.get(&node) {
                    for d in self.boards[b].dsps.clone() {
                        self.requeue(k, d)?;
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub(super) fn bring_in_spare(&mut self, k: &mut Kernel<Payload>, spare: NodeAddress, replaces: NodeAddress) -> Result<(), SimError> {
        let Some(&w) = self.index.get(&spare) else { return Ok(()) };
        self.set_status(spare, NodeStatus::Reassigned);
        if let Some(tier) = Tier::between(&region_of(spare), &spare) {
            self.messages.count(tier);
        }
        self.start_migration(k, w)?;
        self.mark_replacement(replaces, spare);
        Ok(())
    }

    pub(super) fn mark_replacement(&mut self, replaced: NodeAddress, by: NodeAddress) {
        for f in self.faults.iter_mut().filter(|f| f.target == replaced && f.recovered_at.is_none()) {
            f.replacement = Some(by);
        }
        self.dirty = true;
    }

    pub(super) fn on_window_close(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        let now = k.now();
        for region in self.regional_addrs() {
            let mut census: BTreeMap<NodeStatus, usize> = BTreeMap::new();
            for (_, rec) in self.farm.nodes().filter(|(a, _)| a.is_within(&region)) {
                *census.entry(rec.status).or_insert(0) += 1;
            }
            let workers = self.region_workers(&region);
            let manager = self.manager(&region).expect("regional address");
            let mut capacity = 0.0;
            let mut dispatchable = 0;
            for &w in &workers {
                if !self.effective_status(w).is_dispatchable() {
                    continue;
                }
                dispatchable += 1;
                let addr = self.workers[w].addr;
                let reporter = match addr {
                    NodeAddress::Dsp { region, board, .. } => NodeAddress::FrontEnd { region, board },
                    other => other,
                };
                if !manager.is_silenced(&reporter) {
                    capacity += manager.latest_stat(&addr).map_or(0.0, |s| s.capacity_hz);
                }
            }
            let configured = match region {
                NodeAddress::L23Region { .. } => self.scenario.farm.pcs_per_region as usize,
                _ => workers.len(),
            };
            let mut next = self.next_report_id;
            let (summary, actions) =
                self.manager_mut(&region).expect("regional address").close_window(now, census, capacity, configured, dispatchable, &mut next);
            self.next_report_id = next;
            self.send(k, region, NodeAddress::Global, MessageBody::Summary(summary))?;
            self.apply_regional(k, region, actions)?;
        }
        k.schedule_after(EVALUATE_DELAY, Target::Kernel, Payload::Timer(Timer::GlobalEvaluate))?;
        k.schedule_after(self.scenario.managers.window(), Target::Kernel, Payload::Timer(Timer::WindowClose))?;
        Ok(())
    }

    pub(super) fn on_global_evaluate(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        let now = k.now();
        let offered_l1 = if self.generator.is_paused() { 0.0 } else { self.generator.rate_hz() };
        let offered_l23 = offered_l1 * self.scenario.accept.p_accept_l1;
        for directive in self.global.evaluate(now, offered_l1, offered_l23) {
            self.issue_directive(k, directive)?;
        }
        Ok(())
    }

    pub(super) fn issue_directive(&mut self, k: &mut Kernel<Payload>, d: GlobalDirective) -> Result<(), SimError> {
        use crate::managers::DirectiveKind;
        let now = k.now();
        match d.kind {
            DirectiveKind::ThrottleInput { fraction } => self.generator.set_throttle(fraction),
            DirectiveKind::PauseRun => {
                if !self.generator.is_paused() {
                    self.generator.pause();
                    if let Some(h) = self.arrival.take() {
                        k.cancel(h);
                    }
                }
            }
            DirectiveKind::ResumeRun => {
                if self.generator.is_paused() {
                    let (id, at) = self.generator.resume(now);
                    self.arrival = Some(k.schedule(at, Target::Kernel, Payload::CrossingArrival { id })?);
                }
            }
            DirectiveKind::RegionOutOfService { region } => self.set_status(region, NodeStatus::OutOfService),
            DirectiveKind::PolicyBroadcast => {}
        }
        let summary = serde_json::to_string(&d.kind).unwrap_or_default();
        self.emit(now, StreamKind::Directive, NodeAddress::Global, None, summary, d.cause.clone());
        for region in self.regional_addrs() {
            self.send(k, NodeAddress::Global, region, MessageBody::Directive(d.clone()))?;
        }
        self.directives.push(d);
        Ok(())
    }
}
