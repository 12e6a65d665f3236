//! Commands accepted from operators, their acknowledgements, the replayable
//! command log, the event stream record and the published snapshots.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::armor::{ElementRoster, ProcessState};
use crate::dataflow::LossAccounts;
use crate::faults::{FaultId, FaultSpec};
use crate::kernel::SimTime;
use crate::managers::SummaryWindow;
use crate::metrics::{FaultEntry, MessageCounts};
use crate::topology::{FarmConfig, NodeAddress, NodeKind, NodeStatus};
use crate::vla::{Severity, VlaRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorAction {
    OutOfService { target: NodeAddress },
    ReturnToService { target: NodeAddress },
    Restart { target: NodeAddress },
    /// Move a PC's duty to `to`, or let the regional manager pick.
    Migrate {
        target: NodeAddress,
        #[serde(default)]
        to: Option<NodeAddress>,
    },
    /// Pull a spare in place of `target`.
    Reassign {
        target: NodeAddress,
        #[serde(default)]
        spare: Option<NodeAddress>,
    },
    /// Stop crossing generation (global directive).
    PauseRun,
    ResumeRun,
}

/// Adds or removes one element on one ARMOR (a PC or an L1 regional manager).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementChange {
    pub armor: NodeAddress,
    pub element: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyUpdate {
    /// New VLA rule set, installed as the next version.
    pub rules: Option<Vec<VlaRule>>,
    /// Limits the rule install to workers under this node.
    pub scope: Option<NodeAddress>,
    /// Replaces element rosters tier-wide.
    pub elements: Option<ElementRoster>,
    pub register: Vec<ElementChange>,
    pub remove: Vec<ElementChange>,
}

/// Real-time factor, or as fast as possible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Speed {
    Max,
    Factor(f64),
}

impl Speed {
    pub fn validate(&self) -> Result<(), String> {
        match self {
            Speed::Factor(f) if !(f.is_finite() && *f > 0.0) => Err(format!("speed {f} must be positive")),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Speed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speed::Max => f.write_str("max"),
            Speed::Factor(x) => write!(f, "{x}"),
        }
    }
}

impl std::str::FromStr for Speed {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("max") {
            return Ok(Speed::Max);
        }
        let f: f64 = s.parse().map_err(|_| format!("`{s}` is neither a number nor `max`"))?;
        let speed = Speed::Factor(f);
        speed.validate()?;
        Ok(speed)
    }
}

impl Serialize for Speed {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Speed::Max => s.serialize_str("max"),
            Speed::Factor(f) => s.serialize_f64(*f),
        }
    }
}

impl<'de> Deserialize<'de> for Speed {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(f) => {
                let s = Speed::Factor(f);
                s.validate().map_err(serde::de::Error::custom)?;
                Ok(s)
            }
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlCommand {
    InjectFault { fault: FaultSpec },
    ClearFault { id: FaultId },
    Action { action: OperatorAction },
    PolicyUpdate { update: PolicyUpdate },
    Pause,
    Resume,
    SetSpeed { speed: Speed },
    Snapshot,
}

impl ControlCommand {
    /// Commands that change the simulation and so go into the command log.
    pub fn is_simulation_command(&self) -> bool {
        matches!(
            self,
            ControlCommand::InjectFault { .. } | ControlCommand::ClearFault { .. } | ControlCommand::Action { .. } | ControlCommand::PolicyUpdate { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            ControlCommand::InjectFault { .. } => "inject_fault",
            ControlCommand::ClearFault { .. } => "clear_fault",
            ControlCommand::Action { .. } => "action",
            ControlCommand::PolicyUpdate { .. } => "policy_update",
            ControlCommand::Pause => "pause",
            ControlCommand::Resume => "resume",
            ControlCommand::SetSpeed { .. } => "set_speed",
            ControlCommand::Snapshot => "snapshot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CommandOutcome {
    FaultInjected { id: FaultId, onset: SimTime },
    FaultCleared { id: FaultId },
    Applied,
    Paused,
    Resumed,
    SpeedSet { speed: Speed },
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandAck {
    /// Sim time at which the command took effect.
    pub effective_t: SimTime,
    pub effective_s: f64,
    pub outcome: CommandOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum CommandError {
    #[error("unknown target {target}")]
    UnknownTarget { target: String },
    #[error("unknown fault {id}")]
    UnknownFault { id: FaultId },
    #[error("invalid command: {message}")]
    Invalid { message: String },
    #[error("simulation has finished")]
    Finished,
    #[error("simulation failed: {message}")]
    Failed { message: String },
}

impl CommandError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CommandError::Invalid { message: message.into() }
    }
}

/// One line of a command log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggedCommand {
    pub t_ns: u64,
    pub command: ControlCommand,
}

impl LoggedCommand {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("command serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("command log line {line}: {message}")]
pub struct CommandLogError {
    pub line: usize,
    pub message: String,
}

/// Parses a JSONL command log; blank lines are skipped. Times must not decrease.
pub fn parse_command_log(text: &str) -> Result<Vec<LoggedCommand>, CommandLogError> {
    let mut out: Vec<LoggedCommand> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let entry: LoggedCommand = serde_json::from_str(raw).map_err(|e| CommandLogError { line: i + 1, message: e.to_string() })?;
        if out.last().is_some_and(|prev| prev.t_ns > entry.t_ns) {
            return Err(CommandLogError { line: i + 1, message: "time goes backwards".into() });
        }
        if !entry.command.is_simulation_command() {
            return Err(CommandLogError { line: i + 1, message: format!("{} is not a loggable command", entry.command.name()) });
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Report,
    Escalation,
    Action,
    Directive,
    Fault,
    Command,
}

/// One entry of the live event stream, in simulation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStreamRecord {
    pub seq: u64,
    pub t: SimTime,
    pub t_s: f64,
    /// Milliseconds since the Unix epoch when published; absent in batch runs.
    pub wall_ms: Option<u64>,
    pub kind: StreamKind,
    pub source: NodeAddress,
    pub severity: Option<Severity>,
    pub summary: String,
    pub cause: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub addr: NodeAddress,
    pub kind: NodeKind,
    pub status: NodeStatus,
    pub link_up: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub active_faults: Vec<FaultId>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn leaves(&self) -> Vec<&TreeNode> {
        if self.children.is_empty() {
            return vec![self];
        }
        self.children.iter().flat_map(|c| c.leaves()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmSnapshot {
    pub t: SimTime,
    pub t_s: f64,
    pub config: FarmConfig,
    pub root: TreeNode,
    pub active_faults: Vec<FaultEntry>,
    pub throttle: f64,
    pub generation_paused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub t: SimTime,
    pub t_s: f64,
    pub crossings: LossAccounts,
    pub in_flight: u64,
    pub drop_fraction: f64,
    pub uptime_so_far: f64,
    pub capacity_ratio_l1: f64,
    pub capacity_ratio_l23: f64,
    pub messages: MessageCounts,
    pub throttle: f64,
    /// Latest flush-window values by series name.
    pub latest: BTreeMap<String, f64>,
    /// Latest regional summary per region.
    pub windows: Vec<SummaryWindow>,
    pub faults: Vec<FaultEntry>,
}

/// Runner-level state surfaced next to the snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub paused: bool,
    pub speed: Speed,
    pub finished: bool,
    pub t_s: f64,
    pub end_s: f64,
}
