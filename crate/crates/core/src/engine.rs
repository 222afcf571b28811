//! One denoising step for one generation. Streaming slots and the sequential
//! reference loop both go through [`DiffusionEngine::step`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::curve::{CurveField, CurveSet, ResolvedCurves};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::model::{ConditionSet, ModelWeights, ToyModel};
use crate::registry::SharedRegistry;
use crate::rng::{noise, ContentHasher, NoiseKey, Purpose};
use crate::schedule::{quantize_denoise, TimestepSchedule};
use crate::solver::{
    blend_conditions, guided_velocity, ode_step, sde_step, GuidanceMode, Morph, SolverKind, StepState,
};

/// Everything frozen into a slot at submit time, except the denoise value,
/// which the pipeline supplies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub cond: ConditionSet,
    #[serde(default)]
    pub solver: SolverKind,
    #[serde(default)]
    pub guidance: GuidanceMode,
    #[serde(default)]
    pub curves: CurveSet,
}

impl Request {
    pub fn new(cond: ConditionSet) -> Self {
        Self {
            cond,
            solver: SolverKind::Ode,
            guidance: GuidanceMode::Off,
            curves: CurveSet::default(),
        }
    }

    pub fn validate(&self, frames: usize, channels: usize) -> Result<()> {
        self.cond.validate(frames, channels)?;
        self.curves.validate(frames, channels)
    }

    /// Key for all noise drawn on behalf of this request.
    pub fn conditioning_hash(&self, denoise: f64) -> u64 {
        let mut h = ContentHasher::new("request");
        self.cond.hash_into(&mut h);
        // guidance mode is left out: at unit scale every mode must reproduce
        // the unguided trajectory, noise included
        h.u64(match self.solver {
            SolverKind::Ode => 0,
            SolverKind::Sde => 1,
        });
        // sentinel curves are equivalent to absent ones, so they hash alike
        for (field, curve) in self.curves.curves.iter().filter(|(_, c)| !c.is_sentinel()) {
            h.str(field.name()).f64s(curve.values());
        }
        h.option(self.curves.x0_target.as_ref(), |h, t| {
            h.latent(t);
        });
        h.u64(quantize_denoise(denoise) as u64);
        h.finish_u64()
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionEngine {
    model: Arc<ToyModel>,
    seed: u64,
}

impl DiffusionEngine {
    pub fn new(model: Arc<ToyModel>, seed: u64) -> Self {
        Self { model, seed }
    }

    pub fn model(&self) -> &Arc<ToyModel> {
        &self.model
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, hash: u64, step: usize, purpose: Purpose) -> NoiseKey {
        NoiseKey::new(self.seed, hash, step as u64, purpose)
    }

    /// Starting latent for a slot admitted at `schedule.denoise()`.
    pub fn init_latent(&self, request: &Request, hash: u64, schedule: &TimestepSchedule) -> Latent {
        let (frames, channels) = self.model.shape();
        let n = noise(&self.key(hash, 0, Purpose::Init), frames, channels);
        let d = schedule.denoise();
        if d >= 1.0 {
            return n;
        }
        match &request.cond.source {
            Some(src) => Latent::lerp_frames(&vec![d; frames], &n, &vec![1.0 - d; frames], src),
            None => n.scale(d),
        }
    }

    fn cond_velocity(&self, x: &Latent, t: f64, cond: &ConditionSet, weights: &ModelWeights, key: &NoiseKey) -> Result<Latent> {
        let primary = self.model.velocity(x, t, cond, weights, key)?;
        if cond.blend.is_empty() {
            return Ok(primary);
        }
        let frames = x.frames();
        let mut velocities = vec![primary];
        let mut curves = vec![cond.primary_weights.clone().unwrap_or_else(|| vec![1.0; frames])];
        for term in &cond.blend {
            let x0 = self
                .model
                .x0_for_prompt(term.prompt, cond.hint_strength, cond.timbre_strength, weights);
            velocities.push(self.model.velocity_toward(x, t, &x0, key)?);
            curves.push(term.weights.clone());
        }
        blend_conditions(&velocities, &curves)
    }

    /// Advances `x` from `schedule[step]` to `schedule[step + 1]`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        request: &Request,
        hash: u64,
        x: &Latent,
        state: &mut StepState,
        schedule: &TimestepSchedule,
        step: usize,
        shared: &SharedRegistry,
        weights: &ModelWeights,
    ) -> Result<Latent> {
        let steps = schedule.steps();
        if step >= steps {
            return Err(Error::Invalid(format!("step {step} of {steps}")));
        }
        let (t_curr, t_next) = (schedule.sigma(step), schedule.sigma(step + 1));
        let frames = x.frames();
        let curves = ResolvedCurves::resolve(frames, &[shared.curves(), &request.curves.curves]);
        let target = shared.x0_target().or(request.curves.x0_target.as_ref());
        if target.is_none() && !curves.is_sentinel(CurveField::X0TargetStrength) {
            return Err(Error::MissingTarget);
        }

        let key = self.key(hash, step, Purpose::Model);
        let v_cond = self.cond_velocity(x, t_curr, &request.cond, weights, &key)?;
        let v_uncond = if request.guidance.needs_uncond(state) {
            Some(
                self.model
                    .velocity(x, t_curr, &ConditionSet::unconditional(), weights, &key)?,
            )
        } else {
            None
        };
        let v = guided_velocity(&v_cond, v_uncond.as_ref(), request.guidance, &curves, state)?;

        let alpha = curves.get(CurveField::X0TargetStrength);
        let morph = match target {
            Some(t) if step >= steps / 2 => Some(Morph { target: t, alpha }),
            _ => None,
        };
        let (channels, purpose) = (x.channels(), match request.solver {
            SolverKind::Ode => Purpose::Ode,
            SolverKind::Sde => Purpose::Sde,
        });
        let n = noise(&self.key(hash, step, purpose), frames, channels);
        let out = match request.solver {
            SolverKind::Ode => ode_step(x, &v, t_curr, t_next, &curves, morph, &n)?,
            SolverKind::Sde => sde_step(x, &v, t_curr, t_next, request.cond.source.as_ref(), &curves, morph, &n)?,
        };
        state.step = step + 1;
        if !out.is_finite() {
            return Err(Error::NonFinite("step output"));
        }
        Ok(out)
    }

    /// Sequential reference loop: all steps of one request back to back.
    pub fn generate(
        &self,
        request: &Request,
        schedule: &TimestepSchedule,
        shared: &SharedRegistry,
        weights: &ModelWeights,
    ) -> Result<Latent> {
        let hash = request.conditioning_hash(schedule.denoise());
        let mut x = self.init_latent(request, hash, schedule);
        let mut state = StepState::new();
        for step in 0..schedule.steps() {
            x = self.step(request, hash, &x, &mut state, schedule, step, shared, weights)?;
        }
        Ok(x)
    }
}
