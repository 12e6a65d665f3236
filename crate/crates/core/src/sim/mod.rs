//! The farm simulation: dataflow, supervision and fault injection driven by
//! the event kernel.
//!
//! [`Simulation`] owns the kernel and all model state. Batch runs call
//! [`Simulation::run_to_end`]; live runs advance in slices with
//! [`Simulation::run_until`] and feed operator commands through
//! [`Simulation::apply`], which schedules them as ordinary events so that a
//! command log replays to the same trace.

mod flow;
mod inject;
mod supervise;
mod view;
mod world;


use std::fmt;

use crate::control::{CommandAck, CommandError, ControlCommand, EventStreamRecord, FarmSnapshot, MetricsSnapshot};
use crate::dataflow::{ConservationViolation, LossAccounts};
use crate::faults::{FaultId, FaultRecord};
use crate::kernel::{EventPayload, Kernel, KernelStats, RunError, ScheduleError, SimEvent, SimTime, Target, TraceSink};
use crate::managers::{Escalation, GlobalDirective, GlobalManager, NodeStats, SummaryWindow};
use crate::metrics::{RunReport, SeriesSet};
use crate::scenario::{Scenario, ScenarioError};
use crate::topology::{Farm, NodeAddress};
use crate::vla::ConditionReport;

pub use view::WorkerInfo;
use world::World;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Conservation(#[from] ConservationViolation),
}

/// Periodic and one-off internal timers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    Watchdog { worker: u32, token: u64 },
    RestartDone { worker: u32 },
    MigrationDone { worker: u32 },
    ArmorCheck,
    StatsTick,
    SilenceCheck,
    FrontEndFlush,
    WindowClose,
    GlobalEvaluate,
    RandomFault,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MessageBody {
    /// Heartbeat stamped with its send time.
    Heartbeat { worker: NodeAddress },
    Reports(Vec<ConditionReport>),
    Stats(NodeStats),
    Escalation(Escalation),
    Summary(SummaryWindow),
    Directive(GlobalDirective),
    Restart { node: NodeAddress },
}

impl MessageBody {
    fn name(&self) -> &'static str {
        match self {
            MessageBody::Heartbeat { .. } => "heartbeat",
            MessageBody::Reports(_) => "reports",
            MessageBody::Stats(_) => "stats",
            MessageBody::Escalation(_) => "escalation",
            MessageBody::Summary(_) => "summary",
            MessageBody::Directive(_) => "directive",
            MessageBody::Restart { .. } => "restart",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: NodeAddress,
    pub to: NodeAddress,
    pub sent: SimTime,
    pub body: MessageBody,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    CrossingArrival { id: u64 },
    ServiceComplete { worker: u32, token: u64 },
    HeartbeatTick { worker: u32 },
    VlaSampleTick { worker: u32 },
    FaultOnset { fault: FaultId },
    FaultEnd { fault: FaultId },
    Message(Box<Message>),
    Command(Box<ControlCommand>),
    MetricFlush,
    Timer(Timer),
}

impl EventPayload for Payload {
    fn kind(&self) -> &'static str {
        match self {
            Payload::CrossingArrival { .. } => "crossing_arrival",
            Payload::ServiceComplete { .. } => "service_complete",
            Payload::HeartbeatTick { .. } => "heartbeat_tick",
            Payload::VlaSampleTick { .. } => "vla_sample",
            Payload::FaultOnset { .. } => "fault_onset",
            Payload::FaultEnd { .. } => "fault_end",
            Payload::Message(_) => "message",
            Payload::Command(_) => "control_command",
            Payload::MetricFlush => "metric_flush",
            Payload::Timer(_) => "timer",
        }
    }

    fn summary(&self) -> String {
        match self {
            Payload::CrossingArrival { id } => id.to_string(),
            Payload::ServiceComplete { worker, token } => format!("w{worker} task {token}"),
            Payload::HeartbeatTick { worker } | Payload::VlaSampleTick { worker } => format!("w{worker}"),
            Payload::FaultOnset { fault } | Payload::FaultEnd { fault } => format!("fault {fault}"),
            Payload::Message(m) => format!("{} {} -> {}", m.body.name(), m.from, m.to),
            Payload::Command(c) => format!("operator {}", serde_json::to_string(c).unwrap_or_default()),
            Payload::MetricFlush => String::new(),
            Payload::Timer(t) => format!("{t:?}"),
        }
    }
}

pub struct Simulation {
    kernel: Kernel<Payload>,
    world: World,
    end: SimTime,
    failed: Option<String>,
}

impl fmt::Debug for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulation")
            .field("scenario", &self.world.scenario.name)
            .field("now", &self.kernel.now())
            .field("end", &self.end)
            .finish()
    }
}

impl Simulation {
    /// Validates the scenario and schedules the initial events.
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let end = SimTime(scenario.duration().0);
        let mut kernel = Kernel::new();
        let world = World::build(scenario, &mut kernel)?;
        Ok(Simulation { kernel, world, end, failed: None })
    }

    pub fn with_trace(mut self, sink: TraceSink) -> Self {
        self.kernel.set_trace(sink);
        self
    }

    pub fn set_trace(&mut self, sink: TraceSink) {
        self.kernel.set_trace(sink);
    }

    pub fn trace(&self) -> Option<&TraceSink> {
        self.kernel.trace()
    }

    pub fn take_trace(&mut self) -> Option<TraceSink> {
        self.kernel.take_trace()
    }

    /// Collect event stream records for [`Simulation::drain_stream`].
    pub fn enable_stream(&mut self) {
        self.world.stream.get_or_insert_with(Vec::new);
    }

    pub fn drain_stream(&mut self) -> Vec<EventStreamRecord> {
        self.world.stream.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn scenario(&self) -> &Scenario {
        &self.world.scenario
    }

    pub fn now(&self) -> SimTime {
        self.kernel.now()
    }

    pub fn end(&self) -> SimTime {
        self.end
    }

    pub fn is_finished(&self) -> bool {
        self.failed.is_some() || self.kernel.now() >= self.end
    }

    pub fn failure(&self) -> Option<&str> {
        self.failed.as_deref()
    }

    /// Advances to `t` (clamped to the end of the run).
    pub fn run_until(&mut self, t: SimTime) -> Result<KernelStats, RunError<SimError>> {
        let t = t.min(self.end);
        let world = &mut self.world;
        let result = self.kernel.run_until(t, |k, ev| world.handle(k, ev));
        if let Err(e) = &result {
            self.failed = Some(e.to_string());
        }
        result
    }

    pub fn run_to_end(&mut self) -> Result<RunReport, RunError<SimError>> {
        self.run_until(self.end)?;
        Ok(self.report())
    }

    /// Applies a simulation-level command at the current instant. Invalid
    /// commands are rejected before anything is scheduled.
    pub fn apply(&mut self, command: ControlCommand) -> Result<CommandAck, CommandError> {
        if !command.is_simulation_command() {
            return Err(CommandError::invalid(format!("{} is handled by the runner", command.name())));
        }
        if let Some(message) = &self.failed {
            return Err(CommandError::Failed { message: message.clone() });
        }
        if self.kernel.now() >= self.end {
            return Err(CommandError::Finished);
        }
        let now = self.kernel.now();
        // Same ordering as a replay, which runs up to `now` before applying.
        self.run_until(now).map_err(|e| CommandError::Failed { message: e.to_string() })?;
        self.world.validate_command(&command, now)?;
        self.kernel
            .schedule(now, Target::Kernel, Payload::Command(Box::new(command)))
            .map_err(|e| CommandError::Failed { message: e.to_string() })?;
        self.run_until(now).map_err(|e| CommandError::Failed { message: e.to_string() })?;
        let outcome = self.world.command_result.take().unwrap_or_else(|| Err(CommandError::invalid("command was not applied")))?;
        Ok(CommandAck { effective_t: now, effective_s: now.as_secs_f64(), outcome })
    }

    pub fn farm(&self) -> &Farm {
        &self.world.farm
    }

    pub fn faults(&self) -> &[FaultRecord] {
        &self.world.faults
    }

    pub fn accounts(&self) -> &LossAccounts {
        &self.world.accounts
    }

    pub fn in_flight(&self) -> u64 {
        self.world.in_flight()
    }

    pub fn directives(&self) -> &[GlobalDirective] {
        &self.world.directives
    }

    pub fn global(&self) -> &GlobalManager {
        &self.world.global
    }

    pub fn series(&self) -> &SeriesSet {
        &self.world.series
    }

    /// Ground-truth effective capacity at L1 and L2/3 as fractions of nominal.
    pub fn capacity_ratios(&self) -> (f64, f64) {
        self.world.capacity_ratios()
    }

    pub fn throttle(&self) -> f64 {
        self.world.generator.throttle()
    }

    pub fn generation_paused(&self) -> bool {
        self.world.generator.is_paused()
    }

    pub fn worker(&self, addr: &NodeAddress) -> Option<WorkerInfo> {
        self.world.worker_info(addr)
    }

    /// Element ids on the ARMOR at `addr` (a PC or an L1 regional manager).
    pub fn armor_elements(&self, addr: &NodeAddress) -> Option<Vec<String>> {
        self.world.armor_at(addr).map(|a| a.element_ids())
    }

    /// Version of the VLA rule set installed on a worker.
    pub fn rules_version(&self, addr: &NodeAddress) -> Option<u32> {
        self.world.index.get(addr).map(|&w| self.world.workers[w].vla.rules().version)
    }

    pub fn report(&self) -> RunReport {
        self.world.report(self.kernel.now(), self.kernel.delivered_total())
    }

    pub fn farm_snapshot(&self) -> FarmSnapshot {
        self.world.farm_snapshot(self.kernel.now())
    }

    pub fn metrics_snapshot(&self) -> MetricsSnapshot {
        self.world.metrics_snapshot(self.kernel.now())
    }
}

impl World {
    fn handle(&mut self, k: &mut Kernel<Payload>, ev: SimEvent<Payload>) -> Result<(), SimError> {
        let now = ev.fire_at;
        match ev.payload {
            Payload::CrossingArrival { .. } => self.on_arrival(k)?,
            Payload::ServiceComplete { worker, token } => self.on_service_complete(k, worker as usize, token)?,
            Payload::HeartbeatTick { worker } => self.on_heartbeat_tick(k, worker as usize)?,
            Payload::VlaSampleTick { worker } => self.on_vla_sample(k, worker as usize)?,
            Payload::FaultOnset { fault } => self.on_fault_onset(k, fault)?,
            Payload::FaultEnd { fault } => self.on_fault_end(k, fault)?,
            Payload::Message(m) => self.on_message(k, *m)?,
            Payload::Command(c) => {
                let result = self.apply_command(k, *c)?;
                self.command_result = Some(result);
            }
            Payload::MetricFlush => self.on_flush(k)?,
            Payload::Timer(t) => match t {
                Timer::Watchdog { worker, token } => self.on_watchdog(k, worker as usize, token)?,
                Timer::RestartDone { worker } => self.on_restart_done(k, worker as usize)?,
                Timer::MigrationDone { worker } => self.on_migration_done(k, worker as usize)?,
                Timer::ArmorCheck => self.on_armor_check(k)?,
                Timer::StatsTick => self.on_stats_tick(k)?,
                Timer::SilenceCheck => self.on_silence_check(k)?,
                Timer::FrontEndFlush => self.on_fe_flush(k)?,
                Timer::WindowClose => self.on_window_close(k)?,
                Timer::GlobalEvaluate => self.on_global_evaluate(k)?,
                Timer::RandomFault => self.on_random_fault(k)?,
            },
        }
        if self.dirty {
            self.refresh(now);
        }
        Ok(())
    }
}
