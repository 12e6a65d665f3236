//! The simulation thread and the state it shares with the HTTP side.
//!
//! Only two things cross the thread boundary: a command inbox and
//! immutable snapshots swapped in behind an `Arc`. Handlers never touch the
//! live simulation.

use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use serde::Serialize;
use tokio::sync::{broadcast, oneshot, watch};

use trigfarm_core::control::{CommandAck, CommandError, ControlCommand, EventStreamRecord, FarmSnapshot, LoggedCommand, MetricsSnapshot, RunState};
use trigfarm_core::kernel::RunError;
use trigfarm_core::metrics::RunReport;
use trigfarm_core::runner::{Progress, Runner};
use trigfarm_core::sim::SimError;

#[derive(Debug, Clone)]
pub struct DriverOptions {
    /// Minimum wall time between routine snapshot publications.
    pub publish_every: Duration,
    /// Stream records buffered per subscriber before it starts lagging.
    pub event_buffer: usize,
}

impl Default for DriverOptions {
    fn default() -> Self {
        DriverOptions { publish_every: Duration::from_millis(100), event_buffer: 8192 }
    }
}

/// Runner state plus the failure message, if the run stopped on an error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStatus {
    #[serde(flatten)]
    pub state: RunState,
    pub failure: Option<String>,
}

/// One consistent set of read-only views, replaced wholesale on publish.
#[derive(Debug)]
pub struct Published {
    pub status: RunStatus,
    pub farm: FarmSnapshot,
    pub metrics: MetricsSnapshot,
    pub report: RunReport,
    pub commands: Vec<LoggedCommand>,
}

type Reply = oneshot::Sender<Result<CommandAck, CommandError>>;

enum Request {
    Command(ControlCommand, Reply),
    Shutdown,
}

/// Cheap handle used by HTTP handlers.
#[derive(Clone)]
pub struct Client {
    inbox: mpsc::Sender<Request>,
    published: Arc<RwLock<Arc<Published>>>,
    events: broadcast::Sender<Arc<EventStreamRecord>>,
    status: watch::Receiver<RunStatus>,
}

impl Client {
    /// Queues a command and waits for the sim thread to apply it.
    pub async fn command(&self, command: ControlCommand) -> Result<CommandAck, CommandError> {
        let (tx, rx) = oneshot::channel();
        let stopped = || CommandError::Failed { message: "simulation thread has stopped".into() };
        self.inbox.send(Request::Command(command, tx)).map_err(|_| stopped())?;
        rx.await.map_err(|_| stopped())?
    }

    pub fn published(&self) -> Arc<Published> {
        self.published.read().clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<EventStreamRecord>> {
        self.events.subscribe()
    }

    pub fn status(&self) -> watch::Receiver<RunStatus> {
        self.status.clone()
    }

    /// Resolves once the run has finished or failed.
    pub async fn finished(&self) -> RunStatus {
        let mut rx = self.status.clone();
        let status = rx.wait_for(|s| s.state.finished || s.failure.is_some()).await;
        match status {
            Ok(s) => s.clone(),
            Err(_) => self.published().status.clone(),
        }
    }
}

/// What the sim thread hands back when it stops.
pub struct Stopped {
    pub runner: Runner,
    /// The error that ended the run early, if any.
    pub error: Option<RunError<SimError>>,
}

/// Owns the sim thread.
pub struct SimHandle {
    client: Client,
    thread: Option<JoinHandle<Stopped>>,
}

impl SimHandle {
    pub fn spawn(runner: Runner, options: DriverOptions) -> Self {
        let (inbox, rx) = mpsc::channel();
        let (events, _) = broadcast::channel(options.event_buffer.max(1));
        let first = publish(&runner, None);
        let (status_tx, status) = watch::channel(first.status.clone());
        let published = Arc::new(RwLock::new(Arc::new(first)));
        let client = Client { inbox, published: published.clone(), events: events.clone(), status };
        let thread = std::thread::Builder::new()
            .name("sim".into())
            .spawn(move || Driver { runner, rx, published, events, status: status_tx, options, failure: None, error: None }.run())
            .expect("spawn simulation thread");
        SimHandle { client, thread: Some(thread) }
    }

    pub fn client(&self) -> Client {
        self.client.clone()
    }

    /// Stops the sim thread and hands back the runner as it stands.
    pub fn shutdown(mut self) -> Stopped {
        let _ = self.client.inbox.send(Request::Shutdown);
        let thread = self.thread.take().expect("joined once");
        match thread.join() {
            Ok(stopped) => stopped,
            Err(panic) => std::panic::resume_unwind(panic),
        }
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        if let Some(thread) = self.thread.take() {
            let _ = self.client.inbox.send(Request::Shutdown);
            let _ = thread.join();
        }
    }
}

fn publish(runner: &Runner, failure: Option<String>) -> Published {
    Published {
        status: RunStatus { state: runner.state(), failure },
        farm: runner.farm_snapshot(),
        metrics: runner.metrics_snapshot(),
        report: runner.report(),
        commands: runner.command_log().to_vec(),
    }
}

struct Driver {
    runner: Runner,
    rx: mpsc::Receiver<Request>,
    published: Arc<RwLock<Arc<Published>>>,
    events: broadcast::Sender<Arc<EventStreamRecord>>,
    status: watch::Sender<RunStatus>,
    options: DriverOptions,
    failure: Option<String>,
    error: Option<RunError<SimError>>,
}

impl Driver {
    fn run(mut self) -> Stopped {
        let mut backlog: Vec<Request> = Vec::new();
        let mut last_publish = Instant::now();
        let mut was_done = false;
        loop {
            let mut replies = Vec::new();
            let mut stop = false;
            backlog.extend(self.rx.try_iter());
            for req in backlog.drain(..) {
                match req {
                    Request::Command(cmd, reply) => {
                        let result = match &self.failure {
                            Some(message) if cmd.is_simulation_command() => Err(CommandError::Failed { message: message.clone() }),
                            _ => self.runner.handle(cmd),
                        };
                        replies.push((reply, result));
                    }
                    Request::Shutdown => stop = true,
                }
            }
            // A command can fail the run while it drains events up to `now`.
            if self.failure.is_none() {
                self.failure = self.runner.sim().failure().map(str::to_string);
            }

            let progress = if stop || self.failure.is_some() {
                Progress::Finished
            } else {
                match self.runner.advance(Instant::now()) {
                    Ok(p) => p,
                    Err(e) => {
                        self.failure = Some(e.to_string());
                        self.error = Some(e);
                        Progress::Finished
                    }
                }
            };
            for record in self.runner.drain_events() {
                let _ = self.events.send(Arc::new(record));
            }

            let done = progress == Progress::Finished;
            if !replies.is_empty() || stop || (done && !was_done) || last_publish.elapsed() >= self.options.publish_every {
                self.publish();
                last_publish = Instant::now();
            }
            was_done = done;
            for (reply, result) in replies {
                let _ = reply.send(result);
            }
            if stop {
                return self.stopped();
            }

            let wait = match progress {
                Progress::Advanced => continue,
                Progress::Waiting(d) => d,
                Progress::Paused | Progress::Finished => Duration::from_millis(50),
            };
            match self.rx.recv_timeout(wait) {
                Ok(req) => backlog.push(req),
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => return self.stopped(),
            }
        }
    }

    fn stopped(self) -> Stopped {
        Stopped { runner: self.runner, error: self.error }
    }

    fn publish(&mut self) {
        let p = publish(&self.runner, self.failure.clone());
        let status = p.status.clone();
        *self.published.write() = Arc::new(p);
        self.status.send_replace(status);
    }
}
