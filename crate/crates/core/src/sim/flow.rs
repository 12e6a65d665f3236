//! Crossing arrivals, dispatch, service and accept/reject decisions.

use crate::armor::{checkpoint_progress, resume_remaining, ProcessState};
use crate::dataflow::{least_occupied, Candidate, Decision, DropStage, Fate, Stage};
use crate::kernel::{Kernel, SimDuration, Target};
use crate::vla::default_deadline;

use super::world::{Job, Task, Worker, World};
use super::{Payload, SimError, Timer};

fn eligible(w: &Worker) -> bool {
    w.status.is_dispatchable() && w.link_up && w.process.state != ProcessState::Migrating
}

fn candidate(w: &Worker, index: usize) -> Candidate {
    Candidate {
        index,
        occupancy: w.occupancy(),
        queue_full: w.queue.is_full(),
        idle: w.process.state == ProcessState::Running && w.occupancy() == 0,
    }
}

impl World {
    pub(super) fn on_arrival(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        let now = k.now();
        self.accounts.generated += 1;
        if self.generator.admit() {
            self.dispatch_l1(k, Job { stage: Stage::L1, t_gen: now, remaining: None })?;
        } else {
            self.accounts.throttled += 1;
        }
        let (next, at) = self.generator.next_after(now, &mut self.rng_flow);
        self.arrival = Some(k.schedule(at, Target::Kernel, Payload::CrossingArrival { id: next })?);
        Ok(())
    }

    /// Round-robin over boards in service, then the least occupied DSP on the board.
    pub(super) fn dispatch_l1(&mut self, k: &mut Kernel<Payload>, job: Job) -> Result<(), SimError> {
        let boards = &self.boards;
        let workers = &self.workers;
        let pick = self
            .board_rr
            .pick(boards.len(), |b| boards[b].status.is_dispatchable())
            .and_then(|b| least_occupied(boards[b].dsps.iter().filter(|&&d| eligible(&workers[d])).map(|&d| candidate(&workers[d], d))));
        match pick {
            Some(w) => self.assign(k, w, job, DropStage::L1Input),
            None => {
                self.accounts.record(Fate::DroppedAtStage(DropStage::L1Input));
                Ok(())
            }
        }
    }

    /// Round-robin over L2/3 regions with room, then the least occupied PC.
    pub(super) fn dispatch_l23(&mut self, k: &mut Kernel<Payload>, job: Job, fresh: bool) -> Result<(), SimError> {
        if fresh {
            self.accounts.entered_l23 += 1;
        }
        let regions = &self.l23;
        let workers = &self.workers;
        let best = |r: usize| least_occupied(regions[r].pcs.iter().filter(|&&p| eligible(&workers[p])).map(|&p| candidate(&workers[p], p)));
        let pick = self.region_rr.pick(regions.len(), |r| best(r).is_some()).and_then(best);
        match pick {
            Some(w) => self.assign(k, w, job, DropStage::L23Input),
            None => {
                self.accounts.record(Fate::DroppedAtStage(DropStage::L23Input));
                Ok(())
            }
        }
    }

    fn assign(&mut self, k: &mut Kernel<Payload>, w: usize, job: Job, overflow: DropStage) -> Result<(), SimError> {
        let wk = &mut self.workers[w];
        if wk.process.state == ProcessState::Running && wk.occupancy() == 0 {
            return self.start_task(k, w, job);
        }
        if wk.queue.push(job).is_err() {
            self.accounts.record(Fate::DroppedAtStage(overflow));
        }
        Ok(())
    }

    /// Starts the next queued job if the process is up and free.
    pub(super) fn start_next(&mut self, k: &mut Kernel<Payload>, w: usize) -> Result<(), SimError> {
        let now = k.now();
        let l1_mean = self.scenario.service.l1.mean();
        let factor = self.scenario.l1_deadline_factor;
        loop {
            let wk = &mut self.workers[w];
            if wk.task.is_some() || wk.process.state != ProcessState::Running {
                return Ok(());
            }
            let Some(job) = wk.resume.take().or_else(|| wk.queue.pop()) else {
                return Ok(());
            };
            if let (Stage::L1, Some(f)) = (job.stage, factor) {
                if now.since(job.t_gen) > l1_mean.mul_f64(f) {
                    self.accounts.record(Fate::DroppedAtStage(DropStage::L1Deadline));
                    continue;
                }
            }
            return self.start_task(k, w, job);
        }
    }

    pub(super) fn start_task(&mut self, k: &mut Kernel<Payload>, w: usize, job: Job) -> Result<(), SimError> {
        let now = k.now();
        let dist = *self.scenario.service.level(job.stage);
        let mean = dist.mean();
        let wk = &mut self.workers[w];
        let service = match job.remaining {
            Some(r) => r,
            None => {
                let s = dist.draw(&mut self.rng_flow, wk.slowdown());
                let ratio = s.as_secs_f64() / mean.as_secs_f64();
                wk.service_ratio += super::world::SERVICE_EWMA_ALPHA * (ratio - wk.service_ratio);
                s
            }
        };
        let lead = wk.vla_busy_until.since(now);
        let done_at = now + lead + service;
        wk.next_token += 1;
        let token = wk.next_token;
        let deadline = default_deadline(mean);
        let target = Target::Node(wk.addr);
        let worker = w as u32;
        let complete = if wk.hung { None } else { Some(k.schedule(done_at, target, Payload::ServiceComplete { worker, token })?) };
        let watchdog = if wk.hung || done_at.since(now) > deadline {
            Some(k.schedule(now + deadline + SimDuration(1), target, Payload::Timer(Timer::Watchdog { worker, token }))?)
        } else {
            None
        };
        wk.task = Some(Task { job, token, started: now, done_at, service, vla_in: lead, complete, watchdog, watchdog_fired: false });
        Ok(())
    }

    pub(super) fn on_service_complete(&mut self, k: &mut Kernel<Payload>, w: usize, token: u64) -> Result<(), SimError> {
        let now = k.now();
        let wk = &mut self.workers[w];
        let task = match wk.task.take() {
            Some(t) if t.token == token => t,
            other => {
                wk.task = other;
                return Ok(());
            }
        };
        if let Some(h) = task.watchdog {
            k.cancel(h);
        }
        wk.svc_ns += now.since(task.started).0.saturating_sub(task.vla_in.0);
        wk.tasks_done += 1;
        let job = task.job;
        let decision = self.scenario.accept.decide(job.stage, &mut self.rng_flow);
        match (job.stage, decision) {
            (Stage::L1, Decision::Reject) => self.accounts.record(Fate::RejectedL1),
            (Stage::L1, Decision::Accept) => {
                let wk = &self.workers[w];
                let uplink = wk.link_up && wk.board.is_some_and(|b| self.boards[b].link_up);
                if uplink {
                    self.dispatch_l23(k, Job { stage: Stage::L2, remaining: None, ..job }, true)?;
                } else {
                    self.accounts.record(Fate::DroppedAtStage(DropStage::L1Output));
                }
            }
            (Stage::L2, Decision::Reject) => self.accounts.record(Fate::RejectedL2),
            (Stage::L2, Decision::Accept) => {
                self.start_task(k, w, Job { stage: Stage::L3, remaining: None, ..job })?;
            }
            (Stage::L3, Decision::Reject) => self.accounts.record(Fate::RejectedL3),
            (Stage::L3, Decision::Accept) => self.accounts.record(Fate::AcceptedL3),
        }
        self.start_next(k, w)
    }

    /// Stops the in-flight task of a dying or restarting process. With
    /// checkpointing on, PC work survives and resumes after the restart.
    pub(super) fn abort_task(&mut self, k: &mut Kernel<Payload>, w: usize) {
        let now = k.now();
        let checkpoint = self.scenario.armor.checkpoint_period_ms.map(|ms| SimDuration::from_secs_f64(ms * 1e-3));
        let wk = &mut self.workers[w];
        let Some(task) = wk.task.take() else { return };
        for h in [task.complete, task.watchdog].into_iter().flatten() {
            k.cancel(h);
        }
        let ran = now.since(task.started).0.saturating_sub(task.vla_in.0);
        wk.svc_ns += ran;
        if let (false, Some(period)) = (wk.dsp, checkpoint) {
            let progress = checkpoint_progress(SimDuration(ran), task.service, period);
            wk.resume = Some(Job { remaining: Some(resume_remaining(task.service, progress)), ..task.job });
            return;
        }
        let stage = if wk.dsp { DropStage::L1Service } else { DropStage::L23Service };
        self.accounts.record(Fate::DroppedAtStage(stage));
    }

    /// Pulls queued work off a worker leaving service and sends it elsewhere.
    /// Work held by a dead node is lost.
    pub(super) fn requeue(&mut self, k: &mut Kernel<Payload>, w: usize) -> Result<(), SimError> {
        let wk = &mut self.workers[w];
        let mut jobs: Vec<Job> = wk.resume.take().into_iter().collect();
        jobs.extend(wk.queue.drain());
        let (dead, dsp) = (wk.dead, wk.dsp);
        for job in jobs {
            if dead {
                let stage = if dsp { DropStage::L1Service } else { DropStage::L23Service };
                self.accounts.record(Fate::DroppedAtStage(stage));
            } else if dsp {
                self.dispatch_l1(k, job)?;
            } else {
                self.dispatch_l23(k, job, false)?;
            }
        }
        Ok(())
    }
}
