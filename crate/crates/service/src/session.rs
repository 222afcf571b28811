//! One pipeline and the thread that ticks it.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use ringflow_core::codec::ToyCodec;
use ringflow_core::driver::{Control, StreamDriver};
use ringflow_core::pipeline::{Pipeline, Snapshot};
use ringflow_core::{ConditionSet, Latent, ModelConfig, Request, ToyModel};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::time::MissedTickBehavior;
use tracing::{debug, error, info};

use crate::config::{Clock, SessionConfig};
use crate::error::ServiceError;
use crate::telemetry::{AppliedControl, CompletionSummary, Telemetry, TelemetryMessage, TickTelemetry};

pub const CONTROL_CAPACITY: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub control: String,
    /// First tick whose steps see the change.
    pub visible_tick: u64,
}

pub(crate) enum Command {
    Control(Control, oneshot::Sender<Result<Ack, String>>),
    Step(u64, oneshot::Sender<Result<Option<u64>, String>>),
    Stop(oneshot::Sender<Option<u64>>),
}

/// State readable from request handlers while the loop runs.
pub struct SessionShared {
    pub running: AtomicBool,
    capacity: usize,
    ring: Mutex<VecDeque<Arc<TelemetryMessage>>>,
    snapshot: Mutex<Snapshot>,
    registry_digest: Mutex<String>,
    latest: Mutex<Option<(u64, Latent)>>,
}

impl SessionShared {
    pub fn recent(&self, since: Option<u64>) -> Vec<Arc<TelemetryMessage>> {
        let ring = self.ring.lock().unwrap();
        ring.iter()
            .filter(|m| m.tick().is_some_and(|t| since.is_none_or(|s| t.tick >= s)))
            .cloned()
            .collect()
    }

    pub fn last_tick(&self) -> Option<u64> {
        self.ring.lock().unwrap().back().and_then(|m| m.tick().map(|t| t.tick))
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot.lock().unwrap().clone()
    }

    pub fn registry_digest(&self) -> String {
        self.registry_digest.lock().unwrap().clone()
    }

    /// Latest completed latent and the tick that emitted it.
    pub fn latest(&self) -> Option<(u64, Latent)> {
        self.latest.lock().unwrap().clone()
    }
}

pub struct Session {
    pub id: u64,
    pub config: SessionConfig,
    pub shared: Arc<SessionShared>,
    pub codec: Arc<ToyCodec>,
    /// Measured receptive field of `codec`, the default PCM overlap.
    pub receptive_field: usize,
    tx: mpsc::Sender<Command>,
    thread: Option<thread::JoinHandle<()>>,
}

impl Session {
    pub fn start(id: u64, config: SessionConfig, telemetry: broadcast::Sender<Arc<TelemetryMessage>>) -> Result<Self, ServiceError> {
        config.validate()?;
        let model = Arc::new(ToyModel::new(ModelConfig {
            frames: config.frames,
            channels: config.channels,
            ..ModelConfig::streaming()
        })?);
        let pipeline = Pipeline::new(config.pipeline_config(), model)?;
        let driver = StreamDriver::new(pipeline, Request::new(ConditionSet::new(config.prompt)))?;
        let codec = Arc::new(ToyCodec::new(config.channels, config.hop, config.codec_seed)?);
        let receptive_field = codec.measure_receptive_field(config.frames)?;

        let shared = Arc::new(SessionShared {
            running: AtomicBool::new(true),
            capacity: config.telemetry_capacity,
            ring: Mutex::new(VecDeque::new()),
            snapshot: Mutex::new(driver.snapshot()),
            registry_digest: Mutex::new(driver.pipeline().registry().digest()),
            latest: Mutex::new(None),
        });
        let (tx, rx) = mpsc::channel(CONTROL_CAPACITY);
        let tick_loop = TickLoop {
            id,
            driver,
            shared: Arc::clone(&shared),
            telemetry,
            applied: Vec::new(),
        };
        let (clock, rate) = (config.clock, config.tick_rate);
        let thread = thread::Builder::new()
            .name(format!("tick-loop-{id}"))
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_current_thread()
                    .enable_time()
                    .build()
                    .expect("tick loop runtime");
                rt.block_on(tick_loop.run(rx, clock, rate));
            })
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        info!(session = id, ?clock, depth = config.depth, "session started");
        Ok(Self {
            id,
            config,
            shared,
            codec,
            receptive_field,
            tx,
            thread: Some(thread),
        })
    }

    pub fn is_running(&self) -> bool {
        self.shared.running.load(Ordering::SeqCst)
    }

    pub async fn control(&self, control: Control) -> Result<Ack, ServiceError> {
        let (ack, rx) = oneshot::channel();
        self.tx.try_send(Command::Control(control, ack)).map_err(|e| match e {
            mpsc::error::TrySendError::Full(_) => ServiceError::QueueFull,
            mpsc::error::TrySendError::Closed(_) => ServiceError::NotRunning,
        })?;
        rx.await.map_err(|_| ServiceError::NotRunning)?.map_err(ServiceError::Rejected)
    }

    pub async fn step(&self, ticks: u64) -> Result<Option<u64>, ServiceError> {
        let (ack, rx) = oneshot::channel();
        self.tx
            .send(Command::Step(ticks, ack))
            .await
            .map_err(|_| ServiceError::NotRunning)?;
        rx.await.map_err(|_| ServiceError::NotRunning)?.map_err(ServiceError::Rejected)
    }

    /// Stops the loop and waits for its thread. Telemetry stays readable.
    pub async fn stop(&mut self) -> Result<Option<u64>, ServiceError> {
        let (ack, rx) = oneshot::channel();
        self.tx.send(Command::Stop(ack)).await.map_err(|_| ServiceError::NotRunning)?;
        let last = rx.await.map_err(|_| ServiceError::NotRunning)?;
        if let Some(handle) = self.thread.take() {
            tokio::task::spawn_blocking(move || handle.join())
                .await
                .map_err(|e| ServiceError::Internal(e.to_string()))?
                .map_err(|_| ServiceError::Internal("tick loop panicked".into()))?;
        }
        Ok(last)
    }
}

struct TickLoop {
    id: u64,
    driver: StreamDriver,
    shared: Arc<SessionShared>,
    telemetry: broadcast::Sender<Arc<TelemetryMessage>>,
    applied: Vec<AppliedControl>,
}

impl TickLoop {
    async fn run(mut self, mut rx: mpsc::Receiver<Command>, clock: Clock, rate: f64) {
        let period = if clock == Clock::Rate {
            Duration::from_secs_f64(1.0 / rate)
        } else {
            Duration::from_secs(3600)
        };
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let failure = loop {
            let command = match clock {
                Clock::Manual => rx.recv().await,
                Clock::Rate => tokio::select! {
                    biased;
                    c = rx.recv() => c,
                    _ = interval.tick() => match self.tick() {
                        Ok(()) => continue,
                        Err(e) => break Some(e),
                    },
                },
                Clock::Max => match rx.try_recv() {
                    Ok(c) => Some(c),
                    Err(mpsc::error::TryRecvError::Empty) => {
                        if let Err(e) = self.tick() {
                            break Some(e);
                        }
                        tokio::task::yield_now().await;
                        continue;
                    }
                    Err(mpsc::error::TryRecvError::Disconnected) => None,
                },
            };
            match command {
                None => break None,
                Some(Command::Stop(ack)) => {
                    let _ = ack.send(self.shared.last_tick());
                    break None;
                }
                Some(Command::Control(control, ack)) => {
                    let _ = ack.send(self.apply(&control));
                }
                Some(Command::Step(n, ack)) => {
                    if clock != Clock::Manual {
                        let _ = ack.send(Err("stepping requires the manual clock".into()));
                        continue;
                    }
                    match (0..n).try_for_each(|_| self.tick()) {
                        Ok(()) => {
                            let _ = ack.send(Ok(self.shared.last_tick()));
                        }
                        Err(e) => {
                            let _ = ack.send(Err(e.clone()));
                            break Some(e);
                        }
                    }
                }
            }
        };
        self.shared.running.store(false, Ordering::SeqCst);
        if let Some(e) = &failure {
            error!(session = self.id, error = %e, "tick loop failed");
        }
        let _ = self.telemetry.send(Arc::new(TelemetryMessage::new(Telemetry::Stopped {
            session: self.id,
            last_tick: self.shared.last_tick(),
            error: failure,
        })));
        info!(session = self.id, "session stopped");
    }

    /// Applied between ticks, so the change is visible from the next tick on.
    fn apply(&mut self, control: &Control) -> Result<Ack, String> {
        self.driver.apply(control).map_err(|e| e.to_string())?;
        let ack = Ack {
            control: control.name().to_string(),
            visible_tick: self.driver.pipeline().tick_index(),
        };
        debug!(session = self.id, control = %ack.control, visible_tick = ack.visible_tick, "control applied");
        self.applied.push(AppliedControl {
            control: ack.control.clone(),
            visible_tick: ack.visible_tick,
        });
        *self.shared.snapshot.lock().unwrap() = self.driver.snapshot();
        *self.shared.registry_digest.lock().unwrap() = self.driver.pipeline().registry().digest();
        Ok(ack)
    }

    fn tick(&mut self) -> Result<(), String> {
        let denoise = self.driver.pipeline().denoise();
        let mode = self.driver.pipeline().mode();
        let registry_digest = self.driver.pipeline().registry().digest();
        let report = self.driver.step().map_err(|e| e.to_string())?;
        let snapshot = self.driver.snapshot();
        if let Some(c) = report.completions.last() {
            *self.shared.latest.lock().unwrap() = Some((report.tick, c.latent.clone()));
        }
        let record = Arc::new(TelemetryMessage::new(Telemetry::Tick(TickTelemetry {
            session: self.id,
            tick: report.tick,
            mode,
            denoise,
            queue_depth: snapshot.queue_depth,
            distinct_schedules: report.distinct_schedules,
            registry_digest: registry_digest.clone(),
            controls: std::mem::take(&mut self.applied),
            completions: report.completions.iter().map(CompletionSummary::from).collect(),
            slots: snapshot.slots.clone(),
        })));
        {
            let mut ring = self.shared.ring.lock().unwrap();
            if ring.len() == self.shared.capacity {
                ring.pop_front();
            }
            ring.push_back(Arc::clone(&record));
        }
        *self.shared.snapshot.lock().unwrap() = snapshot;
        *self.shared.registry_digest.lock().unwrap() = registry_digest;
        let _ = self.telemetry.send(record);
        Ok(())
    }
}
