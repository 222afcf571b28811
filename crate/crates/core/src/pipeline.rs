//! The ring buffer of in-flight generations.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::curve::{Curve, CurveField};
use crate::engine::{DiffusionEngine, Request};
use crate::error::{out_of_range, Error, Result};
use crate::latent::{mse, rms_diff, Latent};
use crate::model::{ModelWeights, ToyModel};
use crate::registry::SharedRegistry;
use crate::schedule::{migrate_schedule, quantize_denoise, ScheduleCache, ScheduleId, TimestepSchedule};
use crate::solver::StepState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    PerSlot,
    GlobalReset,
    Migration,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PerSlot => "per-slot",
            Mode::GlobalReset => "global-reset",
            Mode::Migration => "migration",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::PerSlot, Mode::GlobalReset, Mode::Migration]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub depth: usize,
    pub steps: usize,
    pub mode: Mode,
    pub similarity_threshold: f64,
    pub seed: u64,
    pub frames: usize,
    pub channels: usize,
    pub shift: f64,
    pub frame_rate: f64,
    pub admissions_per_tick: usize,
    pub initial_denoise: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            steps: 8,
            mode: Mode::PerSlot,
            similarity_threshold: 1e-3,
            seed: 1528,
            frames: 96,
            channels: 8,
            shift: 3.0,
            frame_rate: 25.0,
            admissions_per_tick: 1,
            initial_denoise: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Submission {
    id: u64,
    request: Arc<Request>,
    schedule: Arc<TimestepSchedule>,
    hash: u64,
}

#[derive(Clone, Debug)]
struct Slot {
    submission: Submission,
    schedule: Arc<TimestepSchedule>,
    step: usize,
    x: Latent,
    state: StepState,
    admitted_tick: u64,
    schedule_ids: Vec<ScheduleId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub tick: u64,
    pub slot: usize,
    pub submission_id: u64,
    pub admitted_tick: u64,
    pub schedule_id: ScheduleId,
    pub denoise: f64,
    /// Trajectory touched more than one schedule.
    pub hybrid: bool,
    pub decode_skipped: bool,
    pub rms_vs_reference: Option<f64>,
    /// Ticks since the last control op (0 = first tick after it).
    pub since_change: Option<u64>,
    pub latent: Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub completions: Vec<CompletionRecord>,
    /// Sigma each slot stepped from this tick, `None` for idle slots.
    pub timesteps: Vec<Option<f64>>,
    /// Number of distinct schedules among the rows of this tick's batch.
    pub distinct_schedules: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotView {
    pub submission_id: u64,
    pub denoise: f64,
    pub step: usize,
    pub schedule_id: ScheduleId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Ticks executed so far.
    pub tick: u64,
    pub mode: Mode,
    pub denoise: f64,
    pub queue_depth: usize,
    pub slots: Vec<Option<SlotView>>,
}

impl Snapshot {
    /// Distinct denoise values across occupied slots, ascending.
    pub fn denoise_values(&self) -> Vec<f64> {
        let mut vs: Vec<f64> = self.slots.iter().flatten().map(|s| s.denoise).collect();
        vs.sort_by(f64::total_cmp);
        vs.dedup();
        vs
    }

    pub fn occupied(&self) -> usize {
        self.slots.iter().flatten().count()
    }
}

pub struct Pipeline {
    config: PipelineConfig,
    engine: DiffusionEngine,
    cache: ScheduleCache,
    registry: SharedRegistry,
    weights: ModelWeights,
    slots: Vec<Option<Slot>>,
    queue: VecDeque<Submission>,
    denoise: f64,
    migration_target: Option<Arc<TimestepSchedule>>,
    tick: u64,
    next_id: u64,
    last_emitted: Option<Latent>,
    reference: Option<Latent>,
    change_tick: Option<u64>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, model: Arc<ToyModel>) -> Result<Self> {
        if config.depth < 1 || config.steps < 1 || config.admissions_per_tick < 1 {
            return Err(Error::Invalid("depth, steps and admissions per tick must be at least 1".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(config.similarity_threshold >= 0.0) {
            return Err(out_of_range("similarity_threshold", config.similarity_threshold));
        }
        if model.shape() != (config.frames, config.channels) {
            return Err(Error::ShapeMismatch {
                left: model.shape(),
                right: (config.frames, config.channels),
            });
        }
        let mut cache = ScheduleCache::new();
        let start = cache.get(config.initial_denoise, config.steps, config.shift)?;
        let migration_target = (config.mode == Mode::Migration).then_some(start);
        Ok(Self {
            engine: DiffusionEngine::new(model, config.seed),
            cache,
            registry: SharedRegistry::new(),
            weights: ModelWeights::zero(config.frames, config.channels),
            slots: vec![None; config.depth],
            queue: VecDeque::new(),
            denoise: config.initial_denoise,
            migration_target,
            tick: 0,
            next_id: 0,
            last_emitted: None,
            reference: None,
            change_tick: None,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn engine(&self) -> &DiffusionEngine {
        &self.engine
    }

    pub fn model(&self) -> &Arc<ToyModel> {
        self.engine.model()
    }

    pub fn registry(&self) -> &SharedRegistry {
        &self.registry
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn denoise(&self) -> f64 {
        self.denoise
    }

    /// Index of the next tick to run.
    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn last_emitted(&self) -> Option<&Latent> {
        self.last_emitted.as_ref()
    }

    pub fn schedule_for(&mut self, denoise: f64) -> Result<Arc<TimestepSchedule>> {
        self.cache.get(denoise, self.config.steps, self.config.shift)
    }

    /// Freezes `request` at the current denoise and queues it.
    pub fn submit(&mut self, request: Request) -> Result<u64> {
        request.validate(self.config.frames, self.config.channels)?;
        if self.queue.len() >= self.config.depth {
            return Err(Error::QueueFull(self.config.depth));
        }
        let schedule = self.schedule_for(self.denoise)?;
        let hash = request.conditioning_hash(schedule.denoise());
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push_back(Submission {
            id,
            request: Arc::new(request),
            schedule,
            hash,
        });
        Ok(id)
    }

    /// Submissions the end-of-tick refill could admit beyond what is queued.
    pub fn admission_demand(&self) -> usize {
        let steps = self.config.steps;
        let free_at_end = self
            .slots
            .iter()
            .filter(|s| s.as_ref().is_none_or(|s| s.step + 1 >= steps))
            .count();
        free_at_end
            .min(self.config.admissions_per_tick)
            .saturating_sub(self.queue.len())
    }

    /// Marks the last emitted completion as the reference for rms tracking.
    pub fn capture_reference(&mut self) {
        self.reference = self.last_emitted.clone();
        self.change_tick = Some(self.tick);
    }

    pub fn set_denoise(&mut self, value: f64) -> Result<()> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(out_of_range("denoise", value));
        }
        let target = self.schedule_for(value)?;
        let changed = quantize_denoise(value) != quantize_denoise(self.denoise);
        self.capture_reference();
        match self.config.mode {
            Mode::PerSlot => {}
            Mode::GlobalReset => {
                if changed {
                    debug!(tick = self.tick, value, "global reset wipes in-flight slots");
                    self.slots.iter_mut().for_each(|s| *s = None);
                }
            }
            Mode::Migration => self.migration_target = Some(target),
        }
        self.denoise = value;
        Ok(())
    }

    pub fn set_shared_curve(&mut self, field: CurveField, curve: Curve) -> Result<()> {
        self.registry.set_curve(field, curve, self.config.frames)?;
        self.capture_reference();
        Ok(())
    }

    pub fn clear_shared_curve(&mut self, field: CurveField) {
        self.registry.clear_curve(field);
        self.capture_reference();
    }

    pub fn set_x0_target(&mut self, target: Option<Latent>) -> Result<()> {
        if let Some(t) = &target {
            if t.shape() != (self.config.frames, self.config.channels) {
                return Err(Error::ShapeMismatch {
                    left: t.shape(),
                    right: (self.config.frames, self.config.channels),
                });
            }
        }
        self.registry.set_x0_target(target);
        self.capture_reference();
        Ok(())
    }

    pub fn set_model_weights(&mut self, offset: Latent) -> Result<()> {
        self.weights.replace(offset)?;
        self.capture_reference();
        Ok(())
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        self.migration_target = match mode {
            Mode::Migration => Some(self.schedule_for(self.denoise)?),
            _ => None,
        };
        self.config.mode = mode;
        self.capture_reference();
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            tick: self.tick,
            mode: self.config.mode,
            denoise: self.denoise,
            queue_depth: self.queue.len(),
            slots: self
                .slots
                .iter()
                .map(|s| {
                    s.as_ref().map(|s| SlotView {
                        submission_id: s.submission.id,
                        denoise: s.schedule.denoise(),
                        step: s.step,
                        schedule_id: s.schedule.id(),
                    })
                })
                .collect(),
        }
    }

    fn migrate(&mut self) {
        let Some(target) = self.migration_target.clone() else {
            return;
        };
        for slot in self.slots.iter_mut().flatten() {
            if slot.schedule.id() == target.id() {
                continue;
            }
            match migrate_schedule(&slot.schedule, slot.step, &target) {
                Ok(s) => {
                    slot.schedule = s;
                    if !slot.schedule_ids.contains(&target.id()) {
                        slot.schedule_ids.push(target.id());
                    }
                }
                Err(e) => warn!(error = %e, "migration refused, slot keeps its schedule"),
            }
        }
    }

    /// One batched step of every in-flight slot.
    pub fn tick(&mut self) -> Result<TickReport> {
        let tick = self.tick;
        if self.config.mode == Mode::Migration {
            self.migrate();
        }

        let timesteps: Vec<Option<f64>> = self
            .slots
            .iter()
            .map(|s| s.as_ref().map(|s| s.schedule.sigma(s.step)))
            .collect();
        let mut ids: Vec<ScheduleId> = self.slots.iter().flatten().map(|s| s.schedule.id()).collect();
        ids.sort();
        ids.dedup();

        for slot in self.slots.iter_mut().flatten() {
            slot.x = self.engine.step(
                &slot.submission.request,
                slot.submission.hash,
                &slot.x,
                &mut slot.state,
                &slot.schedule,
                slot.step,
                &self.registry,
                &self.weights,
            )?;
            slot.step += 1;
        }

        let mut completions = Vec::new();
        for i in 0..self.slots.len() {
            if self.slots[i].as_ref().is_some_and(|s| s.step == self.config.steps) {
                let slot = self.slots[i].take().unwrap();
                completions.push(self.emit(i, slot, tick)?);
            }
        }

        let mut admitted = 0;
        while admitted < self.config.admissions_per_tick {
            let Some(free) = self.slots.iter().position(Option::is_none) else {
                break;
            };
            let Some(sub) = self.queue.pop_front() else {
                break;
            };
            let x = self.engine.init_latent(&sub.request, sub.hash, &sub.schedule);
            self.slots[free] = Some(Slot {
                schedule: Arc::clone(&sub.schedule),
                schedule_ids: vec![sub.schedule.id()],
                submission: sub,
                step: 0,
                x,
                state: StepState::new(),
                admitted_tick: tick,
            });
            admitted += 1;
        }

        self.tick += 1;
        Ok(TickReport {
            tick,
            completions,
            timesteps,
            distinct_schedules: ids.len(),
        })
    }

    fn emit(&mut self, index: usize, slot: Slot, tick: u64) -> Result<CompletionRecord> {
        let latent = slot.x;
        let decode_skipped = match &self.last_emitted {
            Some(prev) => mse(&latent, prev)? < self.config.similarity_threshold,
            None => false,
        };
        let rms_vs_reference = self
            .reference
            .as_ref()
            .map(|r| rms_diff(&latent, r))
            .transpose()?;
        self.last_emitted = Some(latent.clone());
        Ok(CompletionRecord {
            tick,
            slot: index,
            submission_id: slot.submission.id,
            admitted_tick: slot.admitted_tick,
            schedule_id: slot.schedule.id(),
            denoise: slot.schedule.denoise(),
            hybrid: slot.schedule_ids.len() > 1,
            decode_skipped,
            rms_vs_reference,
            since_change: self.change_tick.map(|c| tick - c),
            latent,
        })
    }
}
