//! Scenario documents: everything needed to determine a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::armor::ArmorConfig;
use crate::dataflow::{AcceptModel, ArrivalMode, ServiceModel, CROSSING_INTERVAL_DESK, CROSSING_INTERVAL_FULL};
use crate::faults::{FaultSpec, RandomFaults};
use crate::kernel::SimDuration;
use crate::managers::ManagerConfig;
use crate::metrics::MetricsConfig;
use crate::topology::FarmConfig;
use crate::vla::VlaConfig;

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
}

impl ScenarioError {
    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ScenarioError::Validation { field: field.into(), message: message.into() }
    }
}

/// Level-1 processing budget check: `processors × crossing interval` must
/// equal the per-event budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L1Budget {
    pub processors: u64,
    pub per_event_budget_us: f64,
}

impl L1Budget {
    pub fn product(&self, interval: SimDuration) -> SimDuration {
        SimDuration(self.processors * interval.0)
    }

    pub fn holds(&self, interval: SimDuration) -> bool {
        (self.product(interval).0 as f64 - self.per_event_budget_us * 1e3).abs() < 0.5
    }
}

fn default_name() -> String {
    "unnamed".into()
}
fn default_farm() -> FarmConfig {
    FarmConfig::DESK
}
fn default_interval() -> u64 {
    CROSSING_INTERVAL_DESK.0
}
fn default_service() -> ServiceModel {
    ServiceModel::desk()
}
fn default_queue() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_farm")]
    pub farm: FarmConfig,
    #[serde(default = "default_interval")]
    pub crossing_interval_ns: u64,
    #[serde(default)]
    pub arrival: ArrivalMode,
    #[serde(default = "default_service")]
    pub service: ServiceModel,
    #[serde(default)]
    pub accept: AcceptModel,
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
    /// Drop L1 work that waited longer than this multiple of the L1 mean. Off when absent.
    #[serde(default)]
    pub l1_deadline_factor: Option<f64>,
    #[serde(default)]
    pub vla: VlaConfig,
    #[serde(default)]
    pub armor: ArmorConfig,
    #[serde(default)]
    pub managers: ManagerConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub random_faults: Option<RandomFaults>,
    #[serde(default)]
    pub l1_budget: Option<L1Budget>,
}

impl Scenario {
    /// Desk-scale defaults with the given seed and length.
    pub fn desk(seed: u64, duration_s: f64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed, "duration_s": duration_s })).expect("defaults deserialize")
    }

    /// Full-scale farm at the 132 ns crossing clock with its L1 budget check.
    pub fn full_scale(seed: u64, duration_s: f64) -> Self {
        Scenario {
            name: "full_scale".into(),
            farm: FarmConfig::FULL_SCALE,
            crossing_interval_ns: CROSSING_INTERVAL_FULL.0,
            service: ServiceModel::full_scale(),
            l1_budget: Some(L1Budget { processors: 2500, per_event_budget_us: 330.0 }),
            ..Scenario::desk(seed, duration_s)
        }
    }

    pub fn crossing_interval(&self) -> SimDuration {
        SimDuration(self.crossing_interval_ns)
    }

    pub fn duration(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.duration_s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(ScenarioError::field("duration_s", "must be positive"));
        }
        self.farm.validate().map_err(|e| ScenarioError::field("farm", e.to_string()))?;
        if self.crossing_interval_ns == 0 {
            return Err(ScenarioError::field("crossing_interval_ns", "must be positive"));
        }
        for (level, dist) in [("l1", &self.service.l1), ("l2", &self.service.l2), ("l3", &self.service.l3)] {
            dist.validate().map_err(|m| ScenarioError::field(format!("service.{level}"), m))?;
        }
        self.accept.validate().map_err(|(f, m)| ScenarioError::field(format!("accept.{f}"), m))?;
        if self.queue_capacity == 0 {
            return Err(ScenarioError::field("queue_capacity", "must be at least 1"));
        }
        if let Some(f) = self.l1_deadline_factor {
            if !(f.is_finite() && f > 0.0) {
                return Err(ScenarioError::field("l1_deadline_factor", "must be positive"));
            }
        }
        self.vla.validate().map_err(|(f, m)| ScenarioError::field(f, m))?;
        self.armor.validate().map_err(|(f, m)| ScenarioError::field(f, m))?;
        self.managers.validate().map_err(|(f, m)| ScenarioError::field(f, m))?;
        self.metrics.validate().map_err(|(f, m)| ScenarioError::field(f, m))?;
        for (i, fault) in self.faults.iter().enumerate() {
            fault.validate_shape().map_err(|(f, m)| ScenarioError::field(format!("faults[{i}].{f}"), m))?;
            if !self.farm.contains(&fault.target) {
                return Err(ScenarioError::field(format!("faults[{i}].target"), format!("no node {} in this farm", fault.target)));
            }
            if fault.onset_s.unwrap_or(0.0) >= self.duration_s {
                return Err(ScenarioError::field(format!("faults[{i}].onset_s"), "must fall within the run"));
            }
        }
        if let Some(rf) = &self.random_faults {
            rf.validate().map_err(|(f, m)| ScenarioError::field(format!("random_faults.{f}"), m))?;
        }
        if let Some(budget) = &self.l1_budget {
            if !budget.holds(self.crossing_interval()) {
                return Err(ScenarioError::field(
                    "l1_budget",
                    format!(
                        "{} processors x {} ns = {} ns, not the {} us budget",
                        budget.processors,
                        self.crossing_interval_ns,
                        budget.product(self.crossing_interval()).0,
                        budget.per_event_budget_us
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(text)
        .map_err(|e| ScenarioError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario(&text)
}
