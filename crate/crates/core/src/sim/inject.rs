//! Fault lifecycles and operator commands.

use std::sync::Arc;

use crate::armor::{builtin_element, ProcessState};
use crate::control::{CommandError, CommandOutcome, ControlCommand, OperatorAction, PolicyUpdate, StreamKind};
use crate::faults::{FaultId, FaultKind, FaultRecord, FaultSpec};
use crate::kernel::{Kernel, SimDuration, SimTime, Target};
use crate::managers::{DirectiveKind, GlobalDirective};
use crate::topology::{NodeAddress, NodeKind, NodeStatus};
use crate::vla::{default_deadline, RuleSet};

use super::supervise::region_of;
use super::world::World;
use super::{Payload, SimError, Timer};

fn unknown(addr: &NodeAddress) -> CommandError {
    CommandError::UnknownTarget { target: addr.to_string() }
}

impl World {
    /// Records a fault and schedules its onset.
    pub(super) fn create_fault(&mut self, k: &mut Kernel<Payload>, spec: &FaultSpec, operator: bool) -> Result<FaultId, SimError> {
        let now = k.now();
        let onset = spec.onset_s.map_or(now, SimTime::from_secs_f64).max(now);
        let id = self.faults.len() as FaultId;
        self.faults.push(FaultRecord::new(id, spec, onset, operator));
        let handle = k.schedule(onset, Target::Node(spec.target), Payload::FaultOnset { fault: id })?;
        self.fault_onset.insert(id, handle);
        Ok(id)
    }

    pub(super) fn on_fault_onset(&mut self, k: &mut Kernel<Payload>, id: FaultId) -> Result<(), SimError> {
        let now = k.now();
        self.fault_onset.remove(&id);
        let f = &mut self.faults[id as usize];
        f.active = true;
        let (kind, target, end) = (f.kind, f.target, f.planned_end);
        if let Some(end) = end {
            let handle = k.schedule(end.max(now), Target::Node(target), Payload::FaultEnd { fault: id })?;
            self.fault_end.insert(id, handle);
        }
        let worker = self.index.get(&target).copied();
        match (kind, worker) {
            (FaultKind::ProcessCrash, Some(w)) => self.crash_worker(k, w, false),
            (FaultKind::NodeFailure, Some(w)) => self.crash_worker(k, w, true),
            (FaultKind::Hang, Some(w)) => self.hang_worker(k, w)?,
            (FaultKind::Overload(x), Some(w)) => {
                self.workers[w].overloads.insert(id, x);
                self.dirty = true;
            }
            (FaultKind::CpuOverTemp(c), Some(w)) => {
                self.workers[w].temps.insert(id, c);
            }
            (FaultKind::IoErrorBurst(r), Some(w)) => {
                self.workers[w].io_rates.insert(id, r);
            }
            (FaultKind::LinkFailure, _) => self.link_fault(target, true),
            (FaultKind::BoardFailure, _) => {
                if let Some(&b) = self.board_index.get(&target) {
                    for d in self.boards[b].dsps.clone() {
                        self.crash_worker(k, d, true);
                    }
                    self.boards[b].fe_dead = true;
                    let lost = self.boards[b].reports.drain_all().len() as u64;
                    self.report_counts.reports_dropped += lost;
                    self.link_fault(target, true);
                }
            }
            _ => {}
        }
        self.dirty = true;
        self.emit(now, StreamKind::Fault, target, None, format!("fault {id} {kind} on {target}"), Vec::new());
        Ok(())
    }

    fn link_fault(&mut self, target: NodeAddress, down: bool) {
        let count = self.link_down.entry(target).or_insert(0);
        if down {
            *count += 1;
        } else {
            *count = count.saturating_sub(1);
        }
        let up = *count == 0;
        if up {
            self.link_down.remove(&target);
        }
        self.set_link(target, up);
    }

    fn crash_worker(&mut self, k: &mut Kernel<Payload>, w: usize, permanent: bool) {
        let wk = &mut self.workers[w];
        if permanent {
            wk.dead = true;
            wk.process.state = ProcessState::Crashed;
            wk.hung = false;
        } else if matches!(wk.process.state, ProcessState::Running | ProcessState::Restarting) {
            wk.process.transition(ProcessState::Crashed).ok();
            wk.hung = false;
        }
        if wk.process.state == ProcessState::Crashed {
            self.abort_task(k, w);
        }
        self.dirty = true;
    }

    fn hang_worker(&mut self, k: &mut Kernel<Payload>, w: usize) -> Result<(), SimError> {
        let now = k.now();
        let wk = &mut self.workers[w];
        if wk.process.state != ProcessState::Running || wk.hung {
            return Ok(());
        }
        wk.hung = true;
        self.dirty = true;
        let addr = wk.addr;
        if let Some(task) = wk.task.as_mut() {
            if let Some(h) = task.complete.take() {
                k.cancel(h);
            }
            if task.watchdog.is_none() {
                let deadline = default_deadline(self.scenario.service.level(task.job.stage).mean());
                let at = (task.started + deadline + SimDuration(1)).max(now);
                task.watchdog_fired = false;
                let timer = Timer::Watchdog { worker: w as u32, token: task.token };
                task.watchdog = Some(k.schedule(at, Target::Node(addr), Payload::Timer(timer))?);
            }
        }
        Ok(())
    }

    pub(super) fn on_fault_end(&mut self, k: &mut Kernel<Payload>, id: FaultId) -> Result<(), SimError> {
        self.fault_end.remove(&id);
        self.end_fault(k.now(), id);
        Ok(())
    }

    /// Clears a transient fault and undoes its effect. Crashes and hangs stay
    /// until the process is restarted.
    fn end_fault(&mut self, now: SimTime, id: FaultId) {
        let f = &mut self.faults[id as usize];
        if !f.active {
            return;
        }
        f.active = false;
        f.cleared_at = Some(now);
        let (kind, target) = (f.kind, f.target);
        let worker = self.index.get(&target).copied();
        match (kind, worker) {
            (FaultKind::LinkFailure, _) => self.link_fault(target, false),
            (FaultKind::Overload(_), Some(w)) => {
                self.workers[w].overloads.remove(&id);
            }
            (FaultKind::CpuOverTemp(_), Some(w)) => {
                self.workers[w].temps.remove(&id);
            }
            (FaultKind::IoErrorBurst(_), Some(w)) => {
                self.workers[w].io_rates.remove(&id);
            }
            _ => {}
        }
        self.dirty = true;
        self.emit(now, StreamKind::Fault, target, None, format!("fault {id} cleared"), Vec::new());
    }

    /// Time to the next background fault anywhere in the pool.
    pub(super) fn random_gap(&mut self) -> SimDuration {
        let rate = self.scenario.random_faults.map_or(0.0, |rf| rf.rate_per_node_per_hour) * self.random_pool.len() as f64 / 3600.0;
        let u = self.rng_faults.unit();
        SimDuration::from_secs_f64(-(1.0 - u).ln() / rate).max(SimDuration(1))
    }

    pub(super) fn on_random_fault(&mut self, k: &mut Kernel<Payload>) -> Result<(), SimError> {
        let Some(rf) = self.scenario.random_faults else { return Ok(()) };
        let now = k.now();
        let w = self.random_pool[self.rng_faults.below(self.random_pool.len() as u64) as usize];
        let duration_s = (!rf.kind.is_one_shot()).then(|| -(1.0 - self.rng_faults.unit()).ln() * rf.mttr_s);
        let spec = FaultSpec { kind: rf.kind, target: self.workers[w].addr, onset_s: Some(now.as_secs_f64()), duration_s };
        self.create_fault(k, &spec, false)?;
        let gap = self.random_gap();
        k.schedule_after(gap, Target::Kernel, Payload::Timer(Timer::RandomFault))?;
        Ok(())
    }

    fn worker_of(&self, addr: &NodeAddress) -> Result<usize, CommandError> {
        self.index.get(addr).copied().ok_or_else(|| unknown(addr))
    }

    fn pc_of(&self, addr: &NodeAddress) -> Result<usize, CommandError> {
        if addr.kind() != NodeKind::WorkerPC {
            return Err(CommandError::invalid(format!("{addr} is not an L2/3 PC")));
        }
        self.worker_of(addr)
    }

    fn serviceable(&self, addr: &NodeAddress) -> Result<(), CommandError> {
        if !matches!(addr.kind(), NodeKind::Board | NodeKind::WorkerDSP | NodeKind::WorkerPC) {
            return Err(CommandError::invalid(format!("{addr} is not a board, DSP or PC")));
        }
        if !self.farm.contains(addr) {
            return Err(unknown(addr));
        }
        Ok(())
    }

    fn first_spare(&self, region: NodeAddress) -> Option<NodeAddress> {
        self.region_workers(&region).into_iter().map(|w| &self.workers[w]).find(|w| w.status == NodeStatus::Spare).map(|w| w.addr)
    }

    /// Where a migration off `target` lands: `to` if given, else a spare,
    /// else the least loaded sibling in service.
    fn migration_target(&self, target: &NodeAddress, to: Option<NodeAddress>) -> Result<NodeAddress, CommandError> {
        let region = region_of(*target);
        if let Some(to) = to {
            let w = self.pc_of(&to)?;
            if to == *target || region_of(to) != region {
                return Err(CommandError::invalid(format!("{to} is not another PC in {region}")));
            }
            let st = self.workers[w].status;
            if !(st == NodeStatus::Spare || st.is_dispatchable()) || self.workers[w].dead {
                return Err(CommandError::invalid(format!("{to} cannot take the duty")));
            }
            return Ok(to);
        }
        if let Some(spare) = self.first_spare(region) {
            return Ok(spare);
        }
        self.region_workers(&region)
            .into_iter()
            .filter(|&w| self.workers[w].addr != *target && self.workers[w].status.is_dispatchable() && self.workers[w].is_running())
            .min_by(|&a, &b| self.workers[a].util.total_cmp(&self.workers[b].util))
            .map(|w| self.workers[w].addr)
            .ok_or_else(|| CommandError::invalid(format!("no spare or sibling in {region} to take the duty")))
    }

    fn reassign_spare(&self, target: &NodeAddress, spare: Option<NodeAddress>) -> Result<NodeAddress, CommandError> {
        let region = region_of(*target);
        match spare {
            Some(s) => {
                let w = self.pc_of(&s)?;
                if region_of(s) != region || self.workers[w].status != NodeStatus::Spare {
                    return Err(CommandError::invalid(format!("{s} is not a spare in {region}")));
                }
                Ok(s)
            }
            None => self.first_spare(region).ok_or_else(|| CommandError::invalid(format!("no spare left in {region}"))),
        }
    }

    fn validate_policy(&self, update: &PolicyUpdate) -> Result<(), CommandError> {
        if let Some(rules) = &update.rules {
            for (i, rule) in rules.iter().enumerate() {
                rule.validate().map_err(|m| CommandError::invalid(format!("rules[{i}]: {m}")))?;
            }
        }
        if let Some(scope) = &update.scope {
            if update.rules.is_none() {
                return Err(CommandError::invalid("scope only applies to a rule install"));
            }
            if !self.farm.contains(scope) {
                return Err(unknown(scope));
            }
        }
        if let Some(roster) = &update.elements {
            roster.validate().map_err(|(f, m)| CommandError::invalid(format!("{f}: {m}")))?;
        }
        for change in &update.register {
            let armor = self.armor_at(&change.armor).ok_or_else(|| unknown(&change.armor))?;
            builtin_element(&change.element).map_err(|e| CommandError::invalid(e.to_string()))?;
            if armor.element_ids().contains(&change.element) {
                return Err(CommandError::invalid(format!("{} already runs {}", change.armor, change.element)));
            }
        }
        for change in &update.remove {
            let armor = self.armor_at(&change.armor).ok_or_else(|| unknown(&change.armor))?;
            if !armor.element_ids().contains(&change.element) {
                return Err(CommandError::invalid(format!("{} does not run {}", change.armor, change.element)));
            }
        }
        Ok(())
    }

    /// Checks a command against the current state without changing anything.
    pub(super) fn validate_command(&self, cmd: &ControlCommand, now: SimTime) -> Result<(), CommandError> {
        match cmd {
            ControlCommand::InjectFault { fault } => {
                fault.validate_shape().map_err(|(f, m)| CommandError::invalid(format!("fault.{f}: {m}")))?;
                if !self.farm.contains(&fault.target) {
                    return Err(unknown(&fault.target));
                }
                if fault.onset_s.is_some_and(|s| SimTime::from_secs_f64(s) < now) {
                    return Err(CommandError::invalid(format!("onset {}s is in the past", fault.onset_s.unwrap_or_default())));
                }
                Ok(())
            }
            ControlCommand::ClearFault { id } => {
                let f = self.faults.get(*id as usize).ok_or(CommandError::UnknownFault { id: *id })?;
                if f.kind.is_destructive() {
                    return Err(CommandError::invalid(format!("{} is permanent", f.kind.name())));
                }
                if f.cleared_at.is_some() {
                    return Err(CommandError::invalid(format!("fault {id} is already cleared")));
                }
                Ok(())
            }
            ControlCommand::Action { action } => match action {
                OperatorAction::OutOfService { target } => self.serviceable(target),
                OperatorAction::ReturnToService { target } => {
                    self.serviceable(target)?;
                    if self.status(target) != Some(NodeStatus::OutOfService) {
                        return Err(CommandError::invalid(format!("{target} is not out of service")));
                    }
                    Ok(())
                }
                OperatorAction::Restart { target } => {
                    if !target.kind().is_worker() {
                        return Err(CommandError::invalid(format!("{target} is not a worker")));
                    }
                    let w = self.worker_of(target)?;
                    let state = self.workers[w].process.state;
                    if !matches!(state, ProcessState::Crashed | ProcessState::Hung) {
                        return Err(CommandError::invalid(format!("{target} is {state:?}; only crashed or hung processes restart")));
                    }
                    Ok(())
                }
                OperatorAction::Migrate { target, to } => {
                    self.pc_of(target)?;
                    self.migration_target(target, *to).map(|_| ())
                }
                OperatorAction::Reassign { target, spare } => {
                    self.pc_of(target)?;
                    self.reassign_spare(target, *spare).map(|_| ())
                }
                OperatorAction::PauseRun | OperatorAction::ResumeRun => Ok(()),
            },
            ControlCommand::PolicyUpdate { update } => self.validate_policy(update),
            other => Err(CommandError::invalid(format!("{} is handled by the runner", other.name()))),
        }
    }

    pub(super) fn apply_command(&mut self, k: &mut Kernel<Payload>, cmd: ControlCommand) -> Result<Result<CommandOutcome, CommandError>, SimError> {
        let now = k.now();
        if let Err(e) = self.validate_command(&cmd, now) {
            return Ok(Err(e));
        }
        let summary = serde_json::to_string(&cmd).unwrap_or_default();
        let source = match &cmd {
            ControlCommand::InjectFault { fault } => fault.target,
            ControlCommand::Action { action } => match action {
                OperatorAction::OutOfService { target }
                | OperatorAction::ReturnToService { target }
                | OperatorAction::Restart { target }
                | OperatorAction::Migrate { target, .. }
                | OperatorAction::Reassign { target, .. } => *target,
                _ => NodeAddress::Global,
            },
            _ => NodeAddress::Global,
        };
        self.emit(now, StreamKind::Command, source, None, summary, Vec::new());
        let outcome = match cmd {
            ControlCommand::InjectFault { fault } => {
                let id = self.create_fault(k, &fault, true)?;
                CommandOutcome::FaultInjected { id, onset: self.faults[id as usize].onset }
            }
            ControlCommand::ClearFault { id } => {
                if let Some(h) = self.fault_onset.remove(&id) {
                    k.cancel(h);
                    self.faults[id as usize].cleared_at = Some(now);
                } else {
                    if let Some(h) = self.fault_end.remove(&id) {
                        k.cancel(h);
                    }
                    self.end_fault(now, id);
                }
                CommandOutcome::FaultCleared { id }
            }
            ControlCommand::Action { action } => {
                self.apply_action(k, action)?;
                CommandOutcome::Applied
            }
            ControlCommand::PolicyUpdate { update } => {
                self.apply_policy(update);
                CommandOutcome::Applied
            }
            other => return Ok(Err(CommandError::invalid(format!("{} is handled by the runner", other.name())))),
        };
        Ok(Ok(outcome))
    }

    fn apply_action(&mut self, k: &mut Kernel<Payload>, action: OperatorAction) -> Result<(), SimError> {
        let now = k.now();
        match action {
            OperatorAction::OutOfService { target } => self.take_out(k, target)?,
            OperatorAction::ReturnToService { target } => self.set_status(target, NodeStatus::InService),
            OperatorAction::Restart { target } => {
                let w = self.index[&target];
                self.restart_worker(k, w, region_of(target))?;
            }
            OperatorAction::Migrate { target, to } => {
                let Ok(to) = self.migration_target(&target, to) else { return Ok(()) };
                self.take_out(k, target)?;
                if self.status(&to) == Some(NodeStatus::Spare) {
                    self.bring_in_spare(k, to, target)?;
                } else {
                    self.mark_replacement(target, to);
                }
            }
            OperatorAction::Reassign { target, spare } => {
                let Ok(spare) = self.reassign_spare(&target, spare) else { return Ok(()) };
                self.take_out(k, target)?;
                self.bring_in_spare(k, spare, target)?;
            }
            OperatorAction::PauseRun => {
                self.issue_directive(k, GlobalDirective { kind: DirectiveKind::PauseRun, issued_at: now, cause: Vec::new() })?
            }
            OperatorAction::ResumeRun => {
                self.issue_directive(k, GlobalDirective { kind: DirectiveKind::ResumeRun, issued_at: now, cause: Vec::new() })?
            }
        }
        Ok(())
    }

    fn apply_policy(&mut self, update: PolicyUpdate) {
        if let Some(rules) = update.rules {
            let set = Arc::new(RuleSet::new(self.rules.version + 1, rules));
            self.rules = set.clone();
            for w in self.workers.iter_mut().filter(|w| update.scope.is_none_or(|s| w.addr.is_within(&s))) {
                w.vla.install_rules(set.clone());
            }
        }
        if let Some(roster) = update.elements {
            for r in &mut self.l1 {
                r.armor.set_roster(&roster.l1_regional).ok();
            }
            for w in &mut self.workers {
                if let Some(pa) = w.armor.as_mut() {
                    pa.armor.set_roster(&roster.pc).ok();
                }
            }
            self.scenario.armor.elements = roster;
        }
        for change in update.register {
            if let (Some(armor), Ok(element)) = (self.armor_at_mut(&change.armor), builtin_element(&change.element)) {
                armor.register_element(element).ok();
            }
        }
        for change in update.remove {
            if let Some(armor) = self.armor_at_mut(&change.armor) {
                armor.remove_element(&change.element).ok();
            }
        }
    }
}
