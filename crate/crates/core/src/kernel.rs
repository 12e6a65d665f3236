//! Discrete-event kernel: virtual clock, ordered event queue, seeded random
//! streams and the run loop.
//!
//! Events are ordered by `(fire_at, seq)` where `seq` is a per-run insertion
//! counter, so two events scheduled for the same instant are delivered in the
//! order they were scheduled. Handlers may schedule at the current instant;
//! such zero-delay chains are capped at [`MAX_ZERO_DELAY_DEPTH`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::ops::{Add, AddAssign, Sub};
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::topology::NodeAddress;

/// Longest permitted chain of events scheduled at the instant they were
/// scheduled from.
pub const MAX_ZERO_DELAY_DEPTH: u32 = 10_000;

/// Nanoseconds since run start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

/// A span of simulated time in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimDuration(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs_f64(secs: f64) -> SimTime {
        SimTime(SimDuration::from_secs_f64(secs).0)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    /// Elapsed time since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimTime) -> SimDuration {
        SimDuration(self.0.saturating_sub(earlier.0))
    }
}

impl SimDuration {
    pub const ZERO: SimDuration = SimDuration(0);

    pub const fn from_nanos(ns: u64) -> SimDuration {
        SimDuration(ns)
    }

    pub const fn from_micros(us: u64) -> SimDuration {
        SimDuration(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> SimDuration {
        SimDuration(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> SimDuration {
        SimDuration(s * 1_000_000_000)
    }

    /// Rounds to the nearest nanosecond; negative and non-finite inputs map to zero.
    pub fn from_secs_f64(secs: f64) -> SimDuration {
        if !secs.is_finite() || secs <= 0.0 {
            return SimDuration::ZERO;
        }
        SimDuration((secs * 1e9).round() as u64)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn mul_f64(self, factor: f64) -> SimDuration {
        SimDuration::from_secs_f64(self.as_secs_f64() * factor)
    }
}

impl Add<SimDuration> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimDuration) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign<SimDuration> for SimTime {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub<SimTime> for SimTime {
    type Output = SimDuration;
    fn sub(self, rhs: SimTime) -> SimDuration {
        SimDuration(self.0 - rhs.0)
    }
}

impl Add for SimDuration {
    type Output = SimDuration;
    fn add(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0 + rhs.0)
    }
}

impl AddAssign for SimDuration {
    fn add_assign(&mut self, rhs: SimDuration) {
        self.0 += rhs.0;
    }
}

impl Sub for SimDuration {
    type Output = SimDuration;
    fn sub(self, rhs: SimDuration) -> SimDuration {
        SimDuration(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}s", self.0 / 1_000_000_000, self.0 % 1_000_000_000)
    }
}

impl fmt::Display for SimDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}s", self.0 / 1_000_000_000, self.0 % 1_000_000_000)
    }
}

/// Who an event is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Target {
    Kernel,
    Node(NodeAddress),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Kernel => f.write_str("kernel"),
            Target::Node(addr) => addr.fmt(f),
        }
    }
}

/// Payloads carried by the kernel must name their tag and describe themselves
/// for the trace.
pub trait EventPayload {
    fn kind(&self) -> &'static str;
    fn summary(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: Target,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle {
    fire_at: SimTime,
    seq: u64,
}

impl EventHandle {
    pub fn fire_at(&self) -> SimTime {
        self.fire_at
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("cannot schedule at {at}: clock is already at {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
    #[error("zero-delay chain at {at} exceeded depth {depth}")]
    ZeroDelayLivelock { at: SimTime, depth: u32 },
}

#[derive(Debug, thiserror::Error)]
pub enum RunError<E: std::error::Error + 'static> {
    #[error("handler panicked on {kind} for {target} at {at}: {message}")]
    HandlerPanic {
        at: SimTime,
        target: String,
        kind: &'static str,
        message: String,
    },
    #[error("handler failed on {kind} for {target} at {at}: {source}")]
    Handler {
        at: SimTime,
        target: String,
        kind: &'static str,
        #[source]
        source: E,
    },
}

/// Outcome of one `run_until` call. Equality ignores the wall-clock field,
/// which is the only non-reproducible part.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KernelStats {
    pub events_delivered: u64,
    pub clock: SimTime,
    #[serde(skip)]
    pub wall: Duration,
}

impl PartialEq for KernelStats {
    fn eq(&self, other: &Self) -> bool {
        self.events_delivered == other.events_delivered && self.clock == other.clock
    }
}

impl Eq for KernelStats {}

struct Pending<P> {
    target: Target,
    payload: P,
    depth: u32,
}

pub struct Kernel<P> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), Pending<P>>,
    /// Zero-delay depth of the event currently being handled.
    current_depth: Option<u32>,
    delivered_total: u64,
    trace: Option<TraceSink>,
}

impl<P: EventPayload> Default for Kernel<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventPayload> Kernel<P> {
    pub fn new() -> Self {
        Kernel {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BTreeMap::new(),
            current_depth: None,
            delivered_total: 0,
            trace: None,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn delivered_total(&self) -> u64 {
        self.delivered_total
    }

    pub fn set_trace(&mut self, sink: TraceSink) {
        self.trace = Some(sink);
    }

    pub fn trace(&self) -> Option<&TraceSink> {
        self.trace.as_ref()
    }

    pub fn take_trace(&mut self) -> Option<TraceSink> {
        self.trace.take()
    }

    pub fn schedule(&mut self, at: SimTime, target: Target, payload: P) -> Result<EventHandle, ScheduleError> {
        if at < self.now {
            return Err(ScheduleError::SchedulingInPast { at, now: self.now });
        }
        let depth = match self.current_depth {
            Some(d) if at == self.now => d + 1,
            _ => 0,
        };
        if depth > MAX_ZERO_DELAY_DEPTH {
            return Err(ScheduleError::ZeroDelayLivelock { at, depth });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), Pending { target, payload, depth });
        Ok(EventHandle { fire_at: at, seq })
    }

    pub fn schedule_after(&mut self, delay: SimDuration, target: Target, payload: P) -> Result<EventHandle, ScheduleError> {
        self.schedule(self.now + delay, target, payload)
    }

    /// Returns true when the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.queue.remove(&(handle.fire_at, handle.seq)).is_some()
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.queue.contains_key(&(handle.fire_at, handle.seq))
    }

    pub fn next_fire_time(&self) -> Option<SimTime> {
        self.queue.keys().next().map(|(t, _)| *t)
    }

    /// Delivers every event with `fire_at <= t_end` in `(fire_at, seq)` order,
    /// then leaves the clock at `t_end` (or where it is, if already later).
    pub fn run_until<F, E>(&mut self, t_end: SimTime, mut handler: F) -> Result<KernelStats, RunError<E>>
    where
        F: FnMut(&mut Kernel<P>, SimEvent<P>) -> Result<(), E>,
        E: std::error::Error + 'static,
    {
        let started = Instant::now();
        let mut delivered = 0u64;
        loop {
            let Some(entry) = self.queue.first_entry() else { break };
            let (at, seq) = *entry.key();
            if at > t_end {
                break;
            }
            let pending = entry.remove();
            debug_assert!(at >= self.now, "clock would move backwards");
            self.now = at;
            self.current_depth = Some(pending.depth);
            if let Some(trace) = self.trace.as_mut() {
                trace.record(at, seq, &pending.target, &pending.payload);
            }
            let kind = pending.payload.kind();
            let target = pending.target;
            let event = SimEvent { fire_at: at, seq, target, payload: pending.payload };
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| handler(self, event)));
            self.current_depth = None;
            delivered += 1;
            self.delivered_total += 1;
            match outcome {
                Ok(Ok(())) => {}
                Ok(Err(source)) => {
                    return Err(RunError::Handler { at, target: target.to_string(), kind, source });
                }
                Err(panic) => {
                    let message = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "non-string panic payload".to_string());
                    return Err(RunError::HandlerPanic { at, target: target.to_string(), kind, message });
                }
            }
        }
        if t_end > self.now {
            self.now = t_end;
        }
        Ok(KernelStats { events_delivered: delivered, clock: self.now, wall: started.elapsed() })
    }
}

/// Which subsystem a random stream belongs to. Each gets an independent
/// ChaCha stream derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamId {
    Dataflow = 1,
    Faults = 2,
    Vla = 3,
    Armor = 4,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    id: StreamId,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        RngStream { id, rng }
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Uniform in [0, 1).
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.unit() < p
        }
    }

    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.rng.next_u64() % n
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    t: u64,
    seq: u64,
    target: &'a str,
    kind: &'static str,
    summary: &'a str,
}

/// Newline-delimited JSON trace of delivered events. Every sink keeps a
/// running SHA-256 so two runs can be compared without storing the bytes.
pub struct TraceSink {
    out: Option<Box<dyn Write + Send>>,
    hasher: Sha256,
    records: u64,
    bytes: u64,
    error: Option<io::Error>,
    line: Vec<u8>,
}

impl fmt::Debug for TraceSink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TraceSink").field("records", &self.records).field("bytes", &self.bytes).finish()
    }
}

impl TraceSink {
    /// Digest only.
    pub fn digest() -> Self {
        TraceSink { out: None, hasher: Sha256::new(), records: 0, bytes: 0, error: None, line: Vec::with_capacity(256) }
    }

    pub fn to_writer(w: Box<dyn Write + Send>) -> Self {
        TraceSink { out: Some(w), ..Self::digest() }
    }

    fn record<P: EventPayload>(&mut self, at: SimTime, seq: u64, target: &Target, payload: &P) {
        let target = target.to_string();
        let summary = payload.summary();
        let line = TraceLine { t: at.0, seq, target: &target, kind: payload.kind(), summary: &summary };
        self.line.clear();
        serde_json::to_writer(&mut self.line, &line).expect("trace line serializes");
        self.line.push(b'\n');
        self.hasher.update(&self.line);
        self.records += 1;
        self.bytes += self.line.len() as u64;
        if let Some(out) = self.out.as_mut() {
            if self.error.is_none() {
                if let Err(e) = out.write_all(&self.line) {
                    self.error = Some(e);
                }
            }
        }
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn hex_digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    /// Flushes the writer and surfaces the first write error, if any.
    pub fn finish(mut self) -> io::Result<String> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(self.hex_digest())
    }
}

/// A cloneable in-memory writer, handy for capturing traces in tests.
#[derive(Debug, Clone, Default)]
pub struct SharedBuffer(Arc<Mutex<Vec<u8>>>);

impl SharedBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().expect("buffer lock").clone()
    }
}

impl Write for SharedBuffer {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().expect("buffer lock").extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}
