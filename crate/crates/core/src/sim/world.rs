use std::collections::BTreeMap;
use std::sync::Arc;

use crate::armor::{Armor, HeartbeatConfig, HeartbeatMonitor, OverloadTracker, ProcessRecord, ProcessRole, ProcessState, RestartPolicy};
use crate::control::{CommandError, CommandOutcome, EventStreamRecord, StreamKind};
use crate::dataflow::{BoundedQueue, CrossingGenerator, LossAccounts, RoundRobin, Stage};
use crate::faults::{FaultId, FaultRecord};
use crate::kernel::{EventHandle, Kernel, RngStream, SimDuration, SimTime, StreamId, Target};
use crate::managers::{GlobalDirective, GlobalManager, RegionalManager};
use crate::metrics::{MessageCounts, ReportCounts, SeriesSet, Tier, UptimeTracker};
use crate::scenario::{Scenario, ScenarioError};
use crate::topology::{build_farm, Farm, NodeAddress, NodeKind, NodeStatus};
use crate::vla::{ConditionReport, ReportQueue, RuleSet, Severity, VlaAgent};

use super::{Message, MessageBody, Payload, SimError, Timer};

/// Front-end reports batch up and leave the board at this cadence.
pub(super) const FE_FLUSH: SimDuration = SimDuration::from_millis(10);
/// Global evaluation runs this long after the window closes, once summaries are in.
pub(super) const EVALUATE_DELAY: SimDuration = SimDuration::from_millis(1);
/// Smoothing of the per-worker service-time ratio.
pub(super) const SERVICE_EWMA_ALPHA: f64 = 0.01;
/// Smoothing of the per-worker utilization that drives the temperature model.
pub(super) const THERMAL_ALPHA: f64 = 0.5;
pub(super) const IDLE_TEMP_C: f64 = 45.0;
pub(super) const LOAD_TEMP_C: f64 = 35.0;

#[derive(Debug, Clone, Copy)]
pub(super) struct Job {
    pub stage: Stage,
    pub t_gen: SimTime,
    /// Work left after a checkpointed restart.
    pub remaining: Option<SimDuration>,
}

#[derive(Debug, Clone)]
pub(super) struct Task {
    pub job: Job,
    pub token: u64,
    pub started: SimTime,
    pub done_at: SimTime,
    pub service: SimDuration,
    /// Agent time spliced into this task.
    pub vla_in: SimDuration,
    pub complete: Option<EventHandle>,
    pub watchdog: Option<EventHandle>,
    pub watchdog_fired: bool,
}

/// Node-local ARMOR on a PC.
#[derive(Debug)]
pub(super) struct PcArmor {
    pub armor: Armor,
    pub monitor: HeartbeatMonitor,
    pub overload: OverloadTracker,
}

#[derive(Debug)]
pub(super) struct Worker {
    pub addr: NodeAddress,
    pub dsp: bool,
    pub board: Option<usize>,
    pub region: usize,
    pub status: NodeStatus,
    pub link_up: bool,
    pub process: ProcessRecord,
    pub queue: BoundedQueue<Job>,
    pub resume: Option<Job>,
    pub task: Option<Task>,
    pub next_token: u64,
    pub hung: bool,
    /// Node failure: process, sensors and local ARMOR are gone.
    pub dead: bool,
    pub overloads: BTreeMap<FaultId, f64>,
    pub temps: BTreeMap<FaultId, f64>,
    pub io_rates: BTreeMap<FaultId, f64>,
    pub link_errors: u64,
    pub link_errors_seen: u64,
    pub svc_ns: u64,
    pub vla_ns: u64,
    pub tasks_done: u64,
    pub vla_busy_until: SimTime,
    pub vla: VlaAgent,
    pub sample_mark: (SimTime, u64),
    pub stats_mark: (SimTime, u64),
    pub util: f64,
    pub util_ewma: f64,
    pub service_ratio: f64,
    /// The supervising ARMOR has flagged this process as dead.
    pub suspected: bool,
    pub armor: Option<Box<PcArmor>>,
}

impl Worker {
    pub fn slowdown(&self) -> f64 {
        self.overloads.values().product()
    }

    pub fn occupancy(&self) -> usize {
        self.queue.len() + usize::from(self.task.is_some()) + usize::from(self.resume.is_some())
    }

    /// Service time consumed so far, excluding agent time.
    pub fn service_busy(&self, now: SimTime) -> u64 {
        let partial = self.task.as_ref().map_or(0, |t| now.since(t.started).0.saturating_sub(t.vla_in.0));
        self.svc_ns + partial
    }

    pub fn busy(&self, now: SimTime) -> u64 {
        self.service_busy(now) + self.vla_ns
    }

    pub fn is_running(&self) -> bool {
        self.process.state == ProcessState::Running && !self.hung && !self.dead
    }
}

#[derive(Debug)]
pub(super) struct Board {
    pub fe: NodeAddress,
    pub region: usize,
    pub dsps: Vec<usize>,
    pub status: NodeStatus,
    pub link_up: bool,
    pub fe_dead: bool,
    pub reports: ReportQueue,
}

#[derive(Debug)]
pub(super) struct L1Region {
    pub addr: NodeAddress,
    pub manager: RegionalManager,
    pub armor: Armor,
    pub monitor: HeartbeatMonitor,
    pub boards: Vec<usize>,
}

#[derive(Debug)]
pub(super) struct L23Region {
    pub addr: NodeAddress,
    pub manager: RegionalManager,
    pub pcs: Vec<usize>,
}

pub(super) struct World {
    pub scenario: Scenario,
    pub farm: Farm,
    pub workers: Vec<Worker>,
    pub index: BTreeMap<NodeAddress, usize>,
    pub boards: Vec<Board>,
    pub board_index: BTreeMap<NodeAddress, usize>,
    pub l1: Vec<L1Region>,
    pub l23: Vec<L23Region>,
    pub global: GlobalManager,
    pub generator: CrossingGenerator,
    pub arrival: Option<EventHandle>,
    pub board_rr: RoundRobin,
    pub region_rr: RoundRobin,
    pub rng_flow: RngStream,
    pub rng_faults: RngStream,
    pub accounts: LossAccounts,
    pub faults: Vec<FaultRecord>,
    pub fault_end: BTreeMap<FaultId, EventHandle>,
    pub fault_onset: BTreeMap<FaultId, EventHandle>,
    pub link_down: BTreeMap<NodeAddress, u32>,
    pub rules: Arc<RuleSet>,
    pub next_report_id: u64,
    pub messages: MessageCounts,
    pub report_counts: ReportCounts,
    pub directives: Vec<GlobalDirective>,
    pub uptime: UptimeTracker,
    pub series: SeriesSet,
    pub flush_mark: SimTime,
    pub flush_accounts: LossAccounts,
    pub dirty: bool,
    pub stream: Option<Vec<EventStreamRecord>>,
    pub stream_seq: u64,
    pub command_result: Option<Result<CommandOutcome, CommandError>>,
    pub heartbeat: HeartbeatConfig,
    pub restart_policy: RestartPolicy,
    pub dsp_count: usize,
    pub configured_pcs: usize,
    pub random_pool: Vec<usize>,
}

impl World {
    pub fn build(scenario: Scenario, k: &mut Kernel<Payload>) -> Result<World, ScenarioError> {
        let farm = build_farm(scenario.farm).map_err(|e| ScenarioError::Validation { field: "farm".into(), message: e.to_string() })?;
        let cfg = scenario.farm;
        let mut rng_vla = RngStream::new(scenario.seed, StreamId::Vla);
        let mut rng_armor = RngStream::new(scenario.seed, StreamId::Armor);
        let rules = Arc::new(RuleSet::new(1, scenario.vla.rules.clone()));
        let heartbeat = scenario.armor.heartbeat();
        let ms = |v: f64| SimDuration::from_secs_f64(v * 1e-3);
        let dsp_period = ms(scenario.vla.dsp_period_ms);
        let pc_period = ms(scenario.vla.pc_period_ms);
        let dsp_cost = SimDuration::from_secs_f64(scenario.vla.dsp_cost_us * 1e-6);
        let pc_cost = SimDuration::from_secs_f64(scenario.vla.pc_cost_us * 1e-6);

        let mut workers = Vec::new();
        let mut index = BTreeMap::new();
        let mut boards = Vec::new();
        let mut board_index = BTreeMap::new();
        let mut l1 = Vec::new();
        let mut l23 = Vec::new();
        let mut pid = 0u32;
        let mut new_worker = |addr: NodeAddress, dsp: bool, board: Option<usize>, region: usize, status: NodeStatus| {
            pid += 1;
            let (period, cost) = if dsp { (dsp_period, dsp_cost) } else { (pc_period, pc_cost) };
            Worker {
                addr,
                dsp,
                board,
                region,
                status,
                link_up: true,
                process: ProcessRecord::new(pid, ProcessRole::TriggerFilter),
                queue: BoundedQueue::new(scenario.queue_capacity),
                resume: None,
                task: None,
                next_token: 0,
                hung: false,
                dead: false,
                overloads: BTreeMap::new(),
                temps: BTreeMap::new(),
                io_rates: BTreeMap::new(),
                link_errors: 0,
                link_errors_seen: 0,
                svc_ns: 0,
                vla_ns: 0,
                tasks_done: 0,
                vla_busy_until: SimTime::ZERO,
                vla: VlaAgent::new(period, cost, &scenario.vla, rules.clone()),
                sample_mark: (SimTime::ZERO, 0),
                stats_mark: (SimTime::ZERO, 0),
                util: 0.0,
                util_ewma: 0.0,
                service_ratio: 1.0,
                suspected: false,
                armor: None,
            }
        };

        let armor_err = |e: crate::armor::ArmorError| ScenarioError::Validation { field: "armor.elements".into(), message: e.to_string() };
        for region in 0..cfg.l1_regions {
            let addr = NodeAddress::L1Region { region };
            let mut armor = Armor::new(addr);
            armor.set_roster(&scenario.armor.elements.l1_regional).map_err(armor_err)?;
            let mut manager = RegionalManager::new(addr, scenario.managers.policy);
            let mut monitor = HeartbeatMonitor::new(heartbeat);
            let mut region_boards = Vec::new();
            for board in 0..cfg.boards_per_region {
                let b_addr = NodeAddress::Board { region, board };
                let fe = NodeAddress::FrontEnd { region, board };
                let b_idx = boards.len();
                let mut dsps = Vec::new();
                for slot in 0..cfg.dsps_per_board {
                    let d = NodeAddress::Dsp { region, board, slot };
                    index.insert(d, workers.len());
                    dsps.push(workers.len());
                    workers.push(new_worker(d, true, Some(b_idx), l1.len(), NodeStatus::InService));
                    monitor.watch(d, SimTime::ZERO);
                }
                manager.watch(fe, SimTime::ZERO);
                board_index.insert(b_addr, b_idx);
                board_index.insert(fe, b_idx);
                boards.push(Board {
                    fe,
                    region: l1.len(),
                    dsps,
                    status: NodeStatus::InService,
                    link_up: true,
                    fe_dead: false,
                    reports: ReportQueue::new(scenario.vla.report_queue_capacity),
                });
                region_boards.push(b_idx);
            }
            l1.push(L1Region { addr, manager, armor, monitor, boards: region_boards });
        }
        let armor_cfg = &scenario.armor;
        for region in 0..cfg.l23_regions {
            let addr = NodeAddress::L23Region { region };
            let mut manager = RegionalManager::new(addr, scenario.managers.policy);
            let mut pcs = Vec::new();
            for slot in 0..cfg.pcs_per_region + cfg.spares_per_region {
                let p = NodeAddress::Pc { region, slot };
                let status = if slot < cfg.pcs_per_region { NodeStatus::InService } else { NodeStatus::Spare };
                let mut w = new_worker(p, false, None, l23.len(), status);
                let mut armor = Armor::new(p);
                armor.set_roster(&armor_cfg.elements.pc).map_err(armor_err)?;
                let mut monitor = HeartbeatMonitor::new(heartbeat);
                monitor.watch(p, SimTime::ZERO);
                w.armor = Some(Box::new(PcArmor {
                    armor,
                    monitor,
                    overload: OverloadTracker::new(
                        armor_cfg.overload_ewma_alpha,
                        armor_cfg.overload_threshold,
                        SimDuration::from_secs_f64(armor_cfg.overload_sustain_s),
                    ),
                }));
                manager.watch(p, SimTime::ZERO);
                index.insert(p, workers.len());
                pcs.push(workers.len());
                workers.push(w);
            }
            l23.push(L23Region { addr, manager, pcs });
        }

        let random_pool: Vec<usize> = (0..workers.len()).filter(|&i| workers[i].status != NodeStatus::Spare).collect();
        let mut world = World {
            generator: CrossingGenerator::new(scenario.crossing_interval(), scenario.arrival),
            global: GlobalManager::new(&scenario.managers),
            farm,
            workers,
            index,
            boards,
            board_index,
            l1,
            l23,
            arrival: None,
            board_rr: RoundRobin::default(),
            region_rr: RoundRobin::default(),
            rng_flow: RngStream::new(scenario.seed, StreamId::Dataflow),
            rng_faults: RngStream::new(scenario.seed, StreamId::Faults),
            accounts: LossAccounts::default(),
            faults: Vec::new(),
            fault_end: BTreeMap::new(),
            fault_onset: BTreeMap::new(),
            link_down: BTreeMap::new(),
            rules,
            next_report_id: 1,
            messages: MessageCounts::default(),
            report_counts: ReportCounts::default(),
            directives: Vec::new(),
            uptime: UptimeTracker::new(scenario.metrics.uptime_threshold),
            series: SeriesSet::default(),
            flush_mark: SimTime::ZERO,
            flush_accounts: LossAccounts::default(),
            dirty: false,
            stream: None,
            stream_seq: 0,
            command_result: None,
            heartbeat,
            restart_policy: scenario.armor.restart_policy(),
            dsp_count: cfg.dsp_count(),
            configured_pcs: cfg.l23_regions as usize * cfg.pcs_per_region as usize,
            random_pool,
            scenario,
        };

        let schedule = |k: &mut Kernel<Payload>, at: SimTime, target: Target, payload: Payload| {
            k.schedule(at, target, payload).expect("initial events lie in the future");
        };
        let (id, t0) = world.generator.first();
        let handle = k.schedule(t0, Target::Kernel, Payload::CrossingArrival { id }).expect("first arrival");
        world.arrival = Some(handle);
        for (i, w) in world.workers.iter().enumerate() {
            let hb_phase = SimDuration::from_secs_f64(rng_armor.unit() * heartbeat.period.as_secs_f64());
            schedule(k, SimTime::ZERO + hb_phase, Target::Node(w.addr), Payload::HeartbeatTick { worker: i as u32 });
            let vla_phase = SimDuration::from_secs_f64(rng_vla.unit() * w.vla.period().as_secs_f64());
            schedule(k, SimTime::ZERO + vla_phase, Target::Node(w.addr), Payload::VlaSampleTick { worker: i as u32 });
        }
        let at = |d: SimDuration| SimTime::ZERO + d;
        schedule(k, at(heartbeat.period), Target::Kernel, Payload::Timer(Timer::ArmorCheck));
        schedule(k, at(world.scenario.armor.stats_period()), Target::Kernel, Payload::Timer(Timer::StatsTick));
        schedule(k, at(world.scenario.managers.silence_check()), Target::Kernel, Payload::Timer(Timer::SilenceCheck));
        schedule(k, at(FE_FLUSH), Target::Kernel, Payload::Timer(Timer::FrontEndFlush));
        schedule(k, at(world.scenario.managers.window()), Target::Kernel, Payload::Timer(Timer::WindowClose));
        schedule(k, at(world.scenario.metrics.flush_period()), Target::Kernel, Payload::MetricFlush);
        for spec in world.scenario.faults.clone() {
            world.create_fault(k, &spec, false).expect("scenario faults are validated");
        }
        if let Some(rf) = world.scenario.random_faults {
            if rf.rate_per_node_per_hour > 0.0 {
                let gap = world.random_gap();
                schedule(k, at(gap), Target::Kernel, Payload::Timer(Timer::RandomFault));
            }
        }
        Ok(world)
    }

    pub fn take_report_id(&mut self) -> u64 {
        let id = self.next_report_id;
        self.next_report_id += 1;
        id
    }

    #[allow(clippy::too_many_arguments)]
    pub fn make_report(
        &mut self,
        source: NodeAddress,
        metric: crate::vla::MetricId,
        observed: f64,
        threshold: f64,
        severity: Severity,
        priority: u8,
        now: SimTime,
    ) -> ConditionReport {
        ConditionReport { id: self.take_report_id(), source, metric, observed, threshold, severity, priority, t_observed: now }
    }

    pub fn emit(&mut self, now: SimTime, kind: StreamKind, source: NodeAddress, severity: Option<Severity>, summary: String, cause: Vec<u64>) {
        if let Some(stream) = self.stream.as_mut() {
            self.stream_seq += 1;
            stream.push(EventStreamRecord {
                seq: self.stream_seq,
                t: now,
                t_s: now.as_secs_f64(),
                wall_ms: None,
                kind,
                source,
                severity,
                summary,
                cause,
            });
        }
    }

    /// Sends a message along the tree. Returns false (and counts a drop) when
    /// a link on the path is down.
    pub fn send(&mut self, k: &mut Kernel<Payload>, from: NodeAddress, to: NodeAddress, body: MessageBody) -> Result<bool, SimError> {
        match self.farm.route(&from, &to) {
            Ok(path) => {
                if let Some(tier) = Tier::between(&from, &to) {
                    self.messages.count(tier);
                }
                let hops = path.len().saturating_sub(1) as u64;
                let delay = SimDuration(self.scenario.managers.hop_latency().0 * hops);
                let msg = Message { from, to, sent: k.now(), body };
                k.schedule_after(delay, Target::Node(to), Payload::Message(Box::new(msg)))?;
                Ok(true)
            }
            Err(_) => {
                self.messages.dropped += 1;
                if let Some(&w) = self.index.get(&from) {
                    self.workers[w].link_errors += 1;
                }
                Ok(false)
            }
        }
    }

    pub fn set_status(&mut self, addr: NodeAddress, status: NodeStatus) {
        if self.farm.set_status(&addr, status).is_err() {
            return;
        }
        if let Some(&w) = self.index.get(&addr) {
            self.workers[w].status = status;
        } else if addr.kind() == NodeKind::Board {
            if let Some(&b) = self.board_index.get(&addr) {
                self.boards[b].status = status;
            }
        }
        self.dirty = true;
    }

    pub fn status(&self, addr: &NodeAddress) -> Option<NodeStatus> {
        self.farm.status(addr).ok()
    }

    pub fn set_link(&mut self, addr: NodeAddress, up: bool) {
        if self.farm.set_link(&addr, up).is_err() {
            return;
        }
        if let Some(&w) = self.index.get(&addr) {
            self.workers[w].link_up = up;
        } else if addr.kind() == NodeKind::Board {
            if let Some(&b) = self.board_index.get(&addr) {
                self.boards[b].link_up = up;
            }
        }
        self.dirty = true;
    }

    /// Whether a worker contributes capacity right now.
    pub fn worker_effective(&self, w: usize) -> bool {
        let wk = &self.workers[w];
        if !(wk.is_running() && wk.status.is_dispatchable() && wk.link_up) {
            return false;
        }
        match wk.board {
            Some(b) => self.boards[b].status.is_dispatchable() && self.boards[b].link_up,
            None => true,
        }
    }

    /// Effective capacity over nominal at L1 and L2/3.
    pub fn capacity_ratios(&self) -> (f64, f64) {
        let mut l1 = 0.0;
        let mut l23 = 0.0;
        for (i, w) in self.workers.iter().enumerate() {
            if self.worker_effective(i) {
                let share = 1.0 / w.slowdown();
                if w.dsp {
                    l1 += share;
                } else {
                    l23 += share;
                }
            }
        }
        ((l1 / self.dsp_count as f64).min(1.0), (l23 / self.configured_pcs as f64).min(1.0))
    }

    pub fn in_flight(&self) -> u64 {
        self.workers.iter().map(|w| w.occupancy() as u64).sum()
    }

    /// Records every open fault that `report` is evidence for.
    pub fn observe(&mut self, report: &ConditionReport, now: SimTime) {
        let mut detected = Vec::new();
        for f in self.faults.iter_mut().filter(|f| f.onset <= now) {
            if f.observe(report, now) {
                detected.push((f.id, f.target, f.detection.map(|d| d.detector)));
            }
        }
        for (id, target, detector) in detected {
            let by = detector.map(|d| format!("{d:?}").to_lowercase()).unwrap_or_default();
            self.emit(now, StreamKind::Fault, target, Some(report.severity), format!("fault {id} detected by {by}"), vec![report.id]);
        }
    }

    fn fault_restored(&self, f: &FaultRecord) -> bool {
        let target_ok = match f.target.kind() {
            NodeKind::WorkerDSP | NodeKind::WorkerPC => {
                let w = self.index[&f.target];
                self.worker_effective(w) && self.workers[w].slowdown() <= 1.0
            }
            NodeKind::Board => {
                let b = &self.boards[self.board_index[&f.target]];
                b.status.is_dispatchable() && b.link_up && !b.fe_dead && b.dsps.iter().all(|&d| self.workers[d].is_running())
            }
            _ => self.farm.link_up(&f.target).unwrap_or(false),
        };
        let replacement_ok = f.replacement.and_then(|r| self.index.get(&r)).is_some_and(|&w| self.worker_effective(w));
        target_ok || replacement_ok
    }

    /// Re-derives capacity, uptime and recovery after a state change.
    pub fn refresh(&mut self, now: SimTime) {
        if !self.dirty {
            return;
        }
        self.dirty = false;
        let (l1, l23) = self.capacity_ratios();
        self.uptime.update(now, l1, l23);
        let mut recovered = Vec::new();
        for i in 0..self.faults.len() {
            let f = &self.faults[i];
            if f.onset <= now && f.detection.is_some() && f.recovered_at.is_none() && f.kind.impairs_capacity() && self.fault_restored(f) {
                recovered.push(i);
            }
        }
        for i in recovered {
            self.faults[i].recovered_at = Some(now);
            let (id, target) = (self.faults[i].id, self.faults[i].target);
            self.emit(now, StreamKind::Fault, target, None, format!("fault {id} recovered"), Vec::new());
        }
    }

    pub fn armor_at(&self, addr: &NodeAddress) -> Option<&Armor> {
        match addr {
            NodeAddress::L1Region { region } => self.l1.get(*region as usize).map(|r| &r.armor),
            NodeAddress::Pc { .. } => self.index.get(addr).and_then(|&w| self.workers[w].armor.as_ref()).map(|a| &a.armor),
            _ => None,
        }
    }

    pub fn armor_at_mut(&mut self, addr: &NodeAddress) -> Option<&mut Armor> {
        match addr {
            NodeAddress::L1Region { region } => self.l1.get_mut(*region as usize).map(|r| &mut r.armor),
            NodeAddress::Pc { .. } => match self.index.get(addr) {
                Some(&w) => self.workers[w].armor.as_mut().map(|a| &mut a.armor),
                None => None,
            },
            _ => None,
        }
    }

    pub fn manager_mut(&mut self, addr: &NodeAddress) -> Option<&mut RegionalManager> {
        match addr {
            NodeAddress::L1Region { region } => self.l1.get_mut(*region as usize).map(|r| &mut r.manager),
            NodeAddress::L23Region { region } => self.l23.get_mut(*region as usize).map(|r| &mut r.manager),
            _ => None,
        }
    }

    pub fn manager(&self, addr: &NodeAddress) -> Option<&RegionalManager> {
        match addr {
            NodeAddress::L1Region { region } => self.l1.get(*region as usize).map(|r| &r.manager),
            NodeAddress::L23Region { region } => self.l23.get(*region as usize).map(|r| &r.manager),
            _ => None,
        }
    }

    /// Workers supervised by a regional manager.
    pub fn region_workers(&self, addr: &NodeAddress) -> Vec<usize> {
        match addr {
            NodeAddress::L1Region { region } => self
                .l1
                .get(*region as usize)
                .map(|r| r.boards.iter().flat_map(|&b| self.boards[b].dsps.iter().copied()).collect())
                .unwrap_or_default(),
            NodeAddress::L23Region { region } => self.l23.get(*region as usize).map(|r| r.pcs.clone()).unwrap_or_default(),
            _ => Vec::new(),
        }
    }
}
