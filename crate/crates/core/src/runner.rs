//! Live and replayed execution on top of [`Simulation`].
//!
//! A [`Runner`] owns the simulation on one thread. Callers hand it commands
//! and wall-clock instants; it paces sim time against the wall clock, keeps
//! the command log, and produces snapshots and stream records for
//! publication. Nothing here blocks or spawns.

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::control::{CommandAck, CommandError, CommandOutcome, ControlCommand, EventStreamRecord, FarmSnapshot, LoggedCommand, MetricsSnapshot, RunState, Speed};
use crate::kernel::{RunError, SimDuration, SimTime};
use crate::metrics::RunReport;
use crate::sim::{SimError, Simulation};

/// Largest sim-time step taken between inbox checks.
pub const DEFAULT_MAX_STEP: SimDuration = SimDuration::from_millis(100);

#[derive(Debug)]
pub struct Runner {
    sim: Simulation,
    speed: Speed,
    paused: bool,
    max_step: SimDuration,
    /// Wall instant and sim time the pacing is measured from.
    anchor: Option<(Instant, SimTime)>,
    log: Vec<LoggedCommand>,
}

/// What one call to [`Runner::advance`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Advanced,
    /// Paced run is ahead of the wall clock; nothing to do until then.
    Waiting(Duration),
    Paused,
    Finished,
}

impl Runner {
    pub fn new(mut sim: Simulation, speed: Speed) -> Self {
        sim.enable_stream();
        Runner { sim, speed, paused: false, max_step: DEFAULT_MAX_STEP, anchor: None, log: Vec::new() }
    }

    pub fn with_max_step(mut self, step: SimDuration) -> Self {
        self.max_step = SimDuration(step.0.max(1));
        self
    }

    pub fn start_paused(mut self) -> Self {
        self.paused = true;
        self
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulation {
        &mut self.sim
    }

    pub fn into_sim(self) -> Simulation {
        self.sim
    }

    pub fn speed(&self) -> Speed {
        self.speed
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    /// Simulation commands applied so far, with their effective times.
    pub fn command_log(&self) -> &[LoggedCommand] {
        &self.log
    }

    pub fn state(&self) -> RunState {
        RunState {
            paused: self.paused,
            speed: self.speed,
            finished: self.sim.is_finished(),
            t_s: self.sim.now().as_secs_f64(),
            end_s: self.sim.end().as_secs_f64(),
        }
    }

    /// Applies one command between events. Simulation commands go into the
    /// log only when they succeed.
    pub fn handle(&mut self, command: ControlCommand) -> Result<CommandAck, CommandError> {
        let now = self.sim.now();
        let ack = |outcome| Ok(CommandAck { effective_t: now, effective_s: now.as_secs_f64(), outcome });
        match command {
            ControlCommand::Pause => {
                self.paused = true;
                self.anchor = None;
                ack(CommandOutcome::Paused)
            }
            ControlCommand::Resume => {
                self.paused = false;
                self.anchor = None;
                ack(CommandOutcome::Resumed)
            }
            ControlCommand::SetSpeed { speed } => {
                speed.validate().map_err(CommandError::invalid)?;
                self.speed = speed;
                self.anchor = None;
                ack(CommandOutcome::SpeedSet { speed })
            }
            ControlCommand::Snapshot => ack(CommandOutcome::Snapshot),
            command => {
                let entry = LoggedCommand { t_ns: now.0, command: command.clone() };
                let result = self.sim.apply(command);
                if result.is_ok() {
                    self.log.push(entry);
                }
                result
            }
        }
    }

    /// Runs the next slice of sim time allowed by the pacing at `wall`.
    pub fn advance(&mut self, wall: Instant) -> Result<Progress, RunError<SimError>> {
        if self.sim.is_finished() {
            return Ok(Progress::Finished);
        }
        if self.paused {
            return Ok(Progress::Paused);
        }
        let now = self.sim.now();
        let target = match self.speed {
            Speed::Max => now + self.max_step,
            Speed::Factor(f) => {
                let (w0, s0) = *self.anchor.get_or_insert((wall, now));
                let elapsed = wall.saturating_duration_since(w0).as_secs_f64() * f;
                let due = s0 + SimDuration::from_secs_f64(elapsed);
                if due <= now {
                    let wait = SimDuration(self.max_step.0.min(1_000_000)).as_secs_f64() / f;
                    return Ok(Progress::Waiting(Duration::from_secs_f64(wait.min(0.05))));
                }
                due.min(now + self.max_step)
            }
        };
        self.sim.run_until(target)?;
        Ok(if self.sim.is_finished() { Progress::Finished } else { Progress::Advanced })
    }

    /// Stream records produced since the last call, stamped with wall time.
    pub fn drain_events(&mut self) -> Vec<EventStreamRecord> {
        let wall_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        let mut records = self.sim.drain_stream();
        for r in &mut records {
            r.wall_ms = Some(wall_ms);
        }
        records
    }

    pub fn farm_snapshot(&self) -> FarmSnapshot {
        self.sim.farm_snapshot()
    }

    pub fn metrics_snapshot(&self) -> MetricsSnapshot {
        self.sim.metrics_snapshot()
    }

    pub fn report(&self) -> RunReport {
        self.sim.report()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("command {index} at t={t_ns} ns: {source}")]
    Command { index: usize, t_ns: u64, source: CommandError },
    #[error("command {index} at t={t_ns} ns lies beyond the end of the run")]
    PastEnd { index: usize, t_ns: u64 },
    #[error(transparent)]
    Run(#[from] RunError<SimError>),
}

/// Runs `sim` to the end, applying each logged command at its recorded time.
pub fn replay(sim: &mut Simulation, log: &[LoggedCommand]) -> Result<RunReport, ReplayError> {
    for (index, entry) in log.iter().enumerate() {
        let t = SimTime(entry.t_ns);
        if t >= sim.end() {
            return Err(ReplayError::PastEnd { index, t_ns: entry.t_ns });
        }
        sim.run_until(t)?;
        sim.apply(entry.command.clone()).map_err(|source| ReplayError::Command { index, t_ns: entry.t_ns, source })?;
    }
    Ok(sim.run_to_end()?)
}
