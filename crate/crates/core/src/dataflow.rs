//! Crossing generation, queueing and trigger decisions.
//!
//! The L1 path is: detector comb → round-robin over boards → least-occupied
//! DSP on the chosen board. L1 accepts are sprayed round-robin over L2/3
//! regions and land on the least-occupied PC of the region, where L2 and (on
//! accept) L3 run back to back.

use std::collections::{BTreeMap, VecDeque};

use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::kernel::{RngStream, SimDuration, SimTime};

/// Drawn service times never exceed this multiple of the mean.
pub const SERVICE_TRUNCATION: f64 = 100.0;

/// Detector crossing interval of the full-scale machine.
pub const CROSSING_INTERVAL_FULL: SimDuration = SimDuration::from_nanos(132);
/// Desk-scale interval: the full-scale rate divided by 100.
pub const CROSSING_INTERVAL_DESK: SimDuration = SimDuration::from_nanos(13_200);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    L1,
    L2,
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropStage {
    /// No room (or no server) at L1 dispatch.
    L1Input,
    /// In service on a DSP when its process died.
    L1Service,
    /// Accepted by L1 but its board uplink was down.
    L1Output,
    /// Waited past the optional L1 deadline.
    L1Deadline,
    /// No room (or no server) at L2/3 dispatch.
    L23Input,
    /// In service on a PC when its process died.
    L23Service,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fate {
    RejectedL1,
    RejectedL2,
    RejectedL3,
    AcceptedL3,
    DroppedAtStage(DropStage),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    Fixed,
    Exponential,
    LogNormal,
}

/// One level's service-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDist {
    pub kind: DistKind,
    pub mean_us: f64,
    /// Log-space standard deviation; only used by `log_normal`.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_sigma() -> f64 {
    0.5
}

impl ServiceDist {
    pub fn exponential_us(mean_us: f64) -> Self {
        ServiceDist { kind: DistKind::Exponential, mean_us, sigma: default_sigma() }
    }

    pub fn fixed_us(mean_us: f64) -> Self {
        ServiceDist { kind: DistKind::Fixed, mean_us, sigma: default_sigma() }
    }

    pub fn mean(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.mean_us * 1e-6)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mean_us.is_finite() && self.mean_us > 0.0) {
            return Err("mean_us must be positive".into());
        }
        if self.kind == DistKind::LogNormal && !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err("sigma must be positive".into());
        }
        Ok(())
    }

    /// Draws one service time in microseconds, truncated at 100x the mean.
    pub fn draw_us(&self, rng: &mut RngStream) -> f64 {
        let raw = match self.kind {
            DistKind::Fixed => self.mean_us,
            DistKind::Exponential => Exp::new(1.0 / self.mean_us).expect("positive rate").sample(rng),
            DistKind::LogNormal => {
                // Parameterised so that E[X] = mean_us.
                let mu = self.mean_us.ln() - 0.5 * self.sigma * self.sigma;
                LogNormal::new(mu, self.sigma).expect("valid lognormal").sample(rng)
            }
        };
        raw.min(SERVICE_TRUNCATION * self.mean_us)
    }

    pub fn draw(&self, rng: &mut RngStream, slowdown: f64) -> SimDuration {
        SimDuration::from_secs_f64(self.draw_us(rng) * slowdown * 1e-6).max(SimDuration(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceModel {
    pub l1: ServiceDist,
    pub l2: ServiceDist,
    pub l3: ServiceDist,
}

impl ServiceModel {
    pub fn desk() -> Self {
        ServiceModel {
            l1: ServiceDist::exponential_us(285.0),
            l2: ServiceDist::exponential_us(13_000.0),
            l3: ServiceDist::exponential_us(130_000.0),
        }
    }

    pub fn full_scale() -> Self {
        ServiceModel { l1: ServiceDist::exponential_us(300.0), ..Self::desk() }
    }

    pub fn level(&self, stage: Stage) -> &ServiceDist {
        match stage {
            Stage::L1 => &self.l1,
            Stage::L2 => &self.l2,
            Stage::L3 => &self.l3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptModel {
    pub p_accept_l1: f64,
    pub p_accept_l2: f64,
    pub p_accept_l3: f64,
}

impl Default for AcceptModel {
    fn default() -> Self {
        AcceptModel { p_accept_l1: 0.01, p_accept_l2: 0.1, p_accept_l3: 0.1 }
    }
}

impl AcceptModel {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        for (name, p) in [("p_accept_l1", self.p_accept_l1), ("p_accept_l2", self.p_accept_l2), ("p_accept_l3", self.p_accept_l3)] {
            if !(0.0..=1.0).contains(&p) {
                return Err((name, format!("{p} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn probability(&self, stage: Stage) -> f64 {
        match stage {
            Stage::L1 => self.p_accept_l1,
            Stage::L2 => self.p_accept_l2,
            Stage::L3 => self.p_accept_l3,
        }
    }

    pub fn decide(&self, stage: Stage, rng: &mut RngStream) -> Decision {
        if rng.bernoulli(self.probability(stage)) {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }
}

/// Analytic offered utilization `λ·s̄/N`.
pub fn offered_utilization(arrival_rate_hz: f64, mean_service_s: f64, servers: usize) -> f64 {
    arrival_rate_hz * mean_service_s / servers as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Fixed comb: crossing k arrives at k·interval.
    #[default]
    Comb,
    /// Exponential gaps with the same mean, for stress tests.
    Poisson,
}

/// Lazily produces crossing arrival times one at a time.
#[derive(Debug, Clone)]
pub struct CrossingGenerator {
    interval: SimDuration,
    mode: ArrivalMode,
    next_id: u64,
    paused: bool,
    /// Admission fraction in [0,1]; the remainder is throttled at the source.
    throttle: f64,
    credit: f64,
}

impl CrossingGenerator {
    pub fn new(interval: SimDuration, mode: ArrivalMode) -> Self {
        assert!(interval.0 > 0, "crossing interval must be positive");
        CrossingGenerator { interval, mode, next_id: 0, paused: false, throttle: 1.0, credit: 0.0 }
    }

    pub fn interval(&self) -> SimDuration {
        self.interval
    }

    pub fn rate_hz(&self) -> f64 {
        1.0 / self.interval.as_secs_f64()
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn throttle(&self) -> f64 {
        self.throttle
    }

    /// First arrival: crossing 0 at t = 0.
    pub fn first(&mut self) -> (u64, SimTime) {
        self.next_id = 1;
        (0, SimTime::ZERO)
    }

    /// The arrival following `(id, at)`.
    pub fn next_after(&mut self, at: SimTime, rng: &mut RngStream) -> (u64, SimTime) {
        let id = self.next_id;
        self.next_id += 1;
        let t = match self.mode {
            ArrivalMode::Comb => SimTime(id * self.interval.0),
            ArrivalMode::Poisson => {
                let gap = Exp::new(1.0).expect("unit rate").sample(rng) * self.interval.0 as f64;
                at + SimDuration((gap.round() as u64).max(1))
            }
        };
        (id, t)
    }

    pub fn pause(&mut self) {
        self.paused = true;
    }

    /// Resumes on the comb: the next crossing is the first comb slot at or after `now`.
    pub fn resume(&mut self, now: SimTime) -> (u64, SimTime) {
        self.paused = false;
        let id = now.0.div_ceil(self.interval.0).max(self.next_id);
        self.next_id = id + 1;
        (id, SimTime(id * self.interval.0))
    }

    pub fn set_throttle(&mut self, fraction: f64) {
        self.throttle = fraction.clamp(0.0, 1.0);
        self.credit = 0.0;
    }

    /// Deterministic credit-based admission: admits a long-run fraction `throttle`.
    pub fn admit(&mut self) -> bool {
        if self.throttle >= 1.0 {
            return true;
        }
        self.credit += self.throttle;
        if self.credit >= 1.0 - 1e-12 {
            self.credit -= 1.0;
            true
        } else {
            false
        }
    }

    /// Number of comb arrivals with t < until.
    pub fn comb_count(interval: SimDuration, until: SimTime) -> u64 {
        until.0.div_ceil(interval.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueFull;

/// Bounded FIFO at one queueing point.
#[derive(Debug, Clone)]
pub struct BoundedQueue<T> {
    items: VecDeque<T>,
    capacity: usize,
}

impl<T> BoundedQueue<T> {
    pub fn new(capacity: usize) -> Self {
        BoundedQueue { items: VecDeque::with_capacity(capacity.min(1024)), capacity }
    }

    pub fn push(&mut self, item: T) -> Result<(), QueueFull> {
        if self.items.len() >= self.capacity {
            return Err(QueueFull);
        }
        self.items.push_back(item);
        Ok(())
    }

    pub fn pop(&mut self) -> Option<T> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn drain(&mut self) -> impl Iterator<Item = T> + '_ {
        self.items.drain(..)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }
}

/// Round-robin pointer over a fixed list, skipping ineligible entries.
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    next: usize,
}

impl RoundRobin {
    pub fn pick(&mut self, len: usize, eligible: impl Fn(usize) -> bool) -> Option<usize> {
        for step in 0..len {
            let idx = (self.next + step) % len;
            if eligible(idx) {
                self.next = (idx + 1) % len;
                return Some(idx);
            }
        }
        None
    }
}

/// A candidate server for least-occupied selection.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub index: usize,
    /// Queued items plus one if busy.
    pub occupancy: usize,
    pub queue_full: bool,
    pub idle: bool,
}

/// Least occupied candidate (lowest index on ties); `None` when every
/// candidate's queue is full and no one is idle.
pub fn least_occupied(candidates: impl IntoIterator<Item = Candidate>) -> Option<usize> {
    candidates
        .into_iter()
        .filter(|c| c.idle || !c.queue_full)
        .min_by_key(|c| (c.occupancy, c.index))
        .map(|c| c.index)
}

/// Per-stage crossing bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossAccounts {
    pub generated: u64,
    pub throttled: u64,
    pub rejected_l1: u64,
    pub rejected_l2: u64,
    pub rejected_l3: u64,
    pub accepted_l3: u64,
    pub dropped: BTreeMap<DropStage, u64>,
    /// Crossings handed to L2/3 dispatch.
    pub entered_l23: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("conservation violated: generated {generated} != accounted {accounted} (in flight {in_flight})")]
pub struct ConservationViolation {
    pub generated: u64,
    pub accounted: u64,
    pub in_flight: u64,
}

impl LossAccounts {
    pub fn record(&mut self, fate: Fate) {
        match fate {
            Fate::RejectedL1 => self.rejected_l1 += 1,
            Fate::RejectedL2 => self.rejected_l2 += 1,
            Fate::RejectedL3 => self.rejected_l3 += 1,
            Fate::AcceptedL3 => self.accepted_l3 += 1,
            Fate::DroppedAtStage(stage) => *self.dropped.entry(stage).or_insert(0) += 1,
        }
    }

    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }

    pub fn dropped_at(&self, stage: DropStage) -> u64 {
        self.dropped.get(&stage).copied().unwrap_or(0)
    }

    pub fn finished(&self) -> u64 {
        self.rejected_l1 + self.rejected_l2 + self.rejected_l3 + self.accepted_l3 + self.dropped_total()
    }

    /// Dropped over admitted (generated minus throttled).
    pub fn drop_fraction(&self) -> f64 {
        let admitted = self.generated - self.throttled;
        if admitted == 0 {
            0.0
        } else {
            self.dropped_total() as f64 / admitted as f64
        }
    }

    pub fn stage_fractions(&self) -> BTreeMap<DropStage, f64> {
        let admitted = (self.generated - self.throttled).max(1) as f64;
        self.dropped.iter().map(|(s, n)| (*s, *n as f64 / admitted)).collect()
    }

    /// generated = finished + throttled + in_flight, exactly.
    pub fn check_conservation(&self, in_flight: u64) -> Result<(), ConservationViolation> {
        let accounted = self.finished() + self.throttled + in_flight;
        if accounted == self.generated {
            Ok(())
        } else {
            Err(ConservationViolation { generated: self.generated, accounted, in_flight })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::StreamId;

    #[test]
    fn comb_counts() {
        assert_eq!(CrossingGenerator::comb_count(SimDuration(132), SimTime(1320)), 10);
        // ceil(1e9 / 13200) = ceil(75757.57...) = 75758
        assert_eq!(CrossingGenerator::comb_count(CROSSING_INTERVAL_DESK, SimTime(1_000_000_000)), 75_758);
    }

    #[test]
    fn generator_walks_the_comb() {
        let mut g = CrossingGenerator::new(SimDuration(132), ArrivalMode::Comb);
        let mut rng = RngStream::new(1, StreamId::Dataflow);
        let (mut id, mut t) = g.first();
        let mut count = 0;
        while t < SimTime(1320) {
            assert_eq!(t, SimTime(id * 132));
            count += 1;
            (id, t) = g.next_after(t, &mut rng);
        }
        assert_eq!(count, 10);
    }

    #[test]
    fn full_scale_budget_identity() {
        // 2500 processors sharing a 132 ns comb each see one crossing every 330 us.
        assert_eq!(CROSSING_INTERVAL_FULL.0 * 2500, SimDuration::from_micros(330).0);
    }

    #[test]
    fn resume_is_phase_aligned() {
        let mut g = CrossingGenerator::new(SimDuration(100), ArrivalMode::Comb);
        let mut rng = RngStream::new(1, StreamId::Dataflow);
        g.first();
        g.next_after(SimTime(0), &mut rng);
        g.pause();
        assert_eq!(g.resume(SimTime(1050)), (11, SimTime(1100)));
        assert_eq!(g.resume(SimTime(1200)), (12, SimTime(1200)));
    }

    #[test]
    fn throttle_admits_the_requested_fraction() {
        let mut g = CrossingGenerator::new(SimDuration(100), ArrivalMode::Comb);
        g.set_throttle(0.25);
        let admitted = (0..1000).filter(|_| g.admit()).count();
        assert_eq!(admitted, 250);
        g.set_throttle(1.0);
        assert!((0..10).all(|_| g.admit()));
    }

    #[test]
    fn service_draws_are_truncated_and_positive() {
        let d = ServiceDist::exponential_us(10.0);
        let mut rng = RngStream::new(3, StreamId::Dataflow);
        let mut sum = 0.0;
        let n = 200_000;
        for _ in 0..n {
            let x = d.draw_us(&mut rng);
            assert!(x > 0.0 && x <= 1000.0);
            sum += x;
        }
        assert!((sum / n as f64 - 10.0).abs() < 0.1);
        let ln = ServiceDist { kind: DistKind::LogNormal, mean_us: 50.0, sigma: 0.5 };
        let mean: f64 = (0..n).map(|_| ln.draw_us(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 50.0).abs() < 0.5, "lognormal mean {mean}");
        assert_eq!(ServiceDist::fixed_us(330.0).draw(&mut rng, 1.0), SimDuration::from_micros(330));
        assert_eq!(ServiceDist::fixed_us(330.0).draw(&mut rng, 2.0), SimDuration::from_micros(660));
    }

    #[test]
    fn degenerate_accept_probabilities() {
        let mut rng = RngStream::new(5, StreamId::Dataflow);
        let never = AcceptModel { p_accept_l1: 0.0, ..Default::default() };
        assert!((0..1000).all(|_| never.decide(Stage::L1, &mut rng) == Decision::Reject));
        let always = AcceptModel { p_accept_l1: 1.0, ..Default::default() };
        assert!((0..1000).all(|_| always.decide(Stage::L1, &mut rng) == Decision::Accept));
        assert!(AcceptModel { p_accept_l2: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn round_robin_over_two_boards() {
        let mut rr = RoundRobin::default();
        let picks: Vec<usize> = (0..4).map(|_| rr.pick(2, |_| true).unwrap()).collect();
        assert_eq!(picks, vec![0, 1, 0, 1]);
    }

    #[test]
    fn round_robin_skips_out_of_service() {
        let mut rr = RoundRobin::default();
        let picks: Vec<usize> = (0..6).map(|_| rr.pick(3, |i| i != 1).unwrap()).collect();
        assert_eq!(picks, vec![0, 2, 0, 2, 0, 2]);
        assert_eq!(rr.pick(3, |_| false), None);
    }

    #[test]
    fn least_occupied_prefers_idle_and_low_index() {
        let c = |index, occupancy, queue_full, idle| Candidate { index, occupancy, queue_full, idle };
        assert_eq!(least_occupied([c(0, 3, false, false), c(1, 1, false, false), c(2, 1, false, false)]), Some(1));
        assert_eq!(least_occupied([c(0, 65, true, false), c(1, 65, true, false)]), None);
        assert_eq!(least_occupied([c(0, 65, true, false), c(1, 0, false, true)]), Some(1));
    }

    #[test]
    fn bounded_queue_rejects_overflow() {
        let mut q = BoundedQueue::new(2);
        assert!(q.push(1).is_ok());
        assert!(q.push(2).is_ok());
        assert_eq!(q.push(3), Err(QueueFull));
        assert_eq!(q.pop(), Some(1));
    }

    #[test]
    fn conservation_identity() {
        let mut acc = LossAccounts { generated: 10, throttled: 1, ..Default::default() };
        acc.record(Fate::RejectedL1);
        acc.record(Fate::RejectedL1);
        acc.record(Fate::AcceptedL3);
        acc.record(Fate::DroppedAtStage(DropStage::L1Input));
        assert!(acc.check_conservation(5).is_ok());
        assert!(acc.check_conservation(4).is_err());
        assert!((acc.drop_fraction() - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn desk_and_full_scale_utilizations() {
        // Desk L1: 285 us / (13.2 us * 24) ≈ 0.90
        let rho_l1 = offered_utilization(1.0 / 13.2e-6, 285e-6, 24);
        assert!((rho_l1 - 0.8996).abs() < 1e-3);
        // Full-scale L2/3: 7.576 MHz * 0.01 * (13 ms + 0.1 * 130 ms) / 2500 ≈ 0.79
        let rho_l23 = offered_utilization(1.0 / 132e-9 * 0.01, 13e-3 + 0.1 * 130e-3, 2500);
        assert!((rho_l23 - 0.788).abs() < 1e-3);
    }
}
