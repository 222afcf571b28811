//! Continuous stream: keeps the ring fed with the current request and applies
//! control messages between ticks.

use serde::{Deserialize, Serialize};

use crate::curve::{Curve, CurveField};
use crate::engine::Request;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::model::ToyModel;
use crate::pipeline::{Mode, Pipeline, Snapshot, TickReport};
use crate::solver::{GuidanceMode, SolverKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveSpec {
    Constant { value: f64 },
    Ramp { from: f64, to: f64 },
    Values { values: Vec<f64> },
}

impl CurveSpec {
    pub fn build(&self, field: CurveField, frames: usize) -> Result<Curve> {
        match self {
            CurveSpec::Constant { value } => Curve::constant(field, frames, *value),
            CurveSpec::Ramp { from, to } => Curve::ramp(field, frames, *from, *to),
            CurveSpec::Values { values } => {
                if values.len() != frames {
                    return Err(Error::Invalid(format!(
                        "{field} needs {frames} values, got {}",
                        values.len()
                    )));
                }
                Curve::new(field, values.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentSpec {
    /// Base pattern of a prompt key (also used for source fixtures).
    Pattern { key: u64 },
    /// The model's x0 for a prompt at full hint and timbre.
    Prompt { prompt: u64 },
    /// Zero-mean smooth pattern scaled by `scale`.
    Offset { key: u64, scale: f64 },
    Zeros,
    Values { rows: Vec<Vec<f64>> },
}

impl LatentSpec {
    pub fn build(&self, model: &ToyModel, weights: &crate::model::ModelWeights) -> Result<Latent> {
        let (frames, channels) = model.shape();
        let l = match self {
            LatentSpec::Pattern { key } => model.base_pattern(*key),
            LatentSpec::Prompt { prompt } => model.x0_for_prompt(*prompt, 1.0, 1.0, weights),
            LatentSpec::Offset { key, scale } => {
                if !scale.is_finite() {
                    return Err(Error::NonFinite("offset scale"));
                }
                model.pattern(*key, *scale)
            }
            LatentSpec::Zeros => Latent::zeros(frames, channels),
            LatentSpec::Values { rows } => Latent::try_from(rows.clone())?,
        };
        if l.shape() != (frames, channels) {
            return Err(Error::ShapeMismatch {
                left: l.shape(),
                right: (frames, channels),
            });
        }
        Ok(l)
    }
}

/// Changes to the request used for future submissions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timbre_strength: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<LatentSpec>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clear_source: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Control {
    SetDenoise { value: f64 },
    SetSharedCurve { name: CurveField, curve: CurveSpec },
    ClearSharedCurve { name: CurveField },
    SetX0Target { target: LatentSpec },
    ClearX0Target,
    SetModelWeights { offset: LatentSpec },
    SetMode { mode: Mode },
    UpdateRequest { patch: RequestPatch },
}

impl Control {
    pub fn name(&self) -> &'static str {
        match self {
            Control::SetDenoise { .. } => "set_denoise",
            Control::SetSharedCurve { .. } => "set_shared_curve",
            Control::ClearSharedCurve { .. } => "clear_shared_curve",
            Control::SetX0Target { .. } => "set_x0_target",
            Control::ClearX0Target => "clear_x0_target",
            Control::SetModelWeights { .. } => "set_model_weights",
            Control::SetMode { .. } => "set_mode",
            Control::UpdateRequest { .. } => "update_request",
        }
    }
}

pub struct StreamDriver {
    pipeline: Pipeline,
    request: Request,
}

impl StreamDriver {
    pub fn new(pipeline: Pipeline, request: Request) -> Result<Self> {
        let (frames, channels) = (pipeline.config().frames, pipeline.config().channels);
        request.validate(frames, channels)?;
        Ok(Self { pipeline, request })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn pipeline_mut(&mut self) -> &mut Pipeline {
        &mut self.pipeline
    }

    pub fn request(&self) -> &Request {
        &self.request
    }

    /// Replaces the streamed request and marks the reference point.
    pub fn set_request(&mut self, request: Request) -> Result<()> {
        let (frames, channels) = (self.pipeline.config().frames, self.pipeline.config().channels);
        request.validate(frames, channels)?;
        self.request = request;
        self.pipeline.capture_reference();
        Ok(())
    }

    /// Validates fully before touching any state, so a rejected message
    /// leaves the stream unchanged.
    pub fn apply(&mut self, control: &Control) -> Result<()> {
        let frames = self.pipeline.config().frames;
        match control {
            Control::SetDenoise { value } => self.pipeline.set_denoise(*value),
            Control::SetSharedCurve { name, curve } => {
                let curve = curve.build(*name, frames)?;
                let morphs = *name == CurveField::X0TargetStrength && !curve.is_sentinel();
                if morphs && self.pipeline.registry().x0_target().is_none() && self.request.curves.x0_target.is_none() {
                    return Err(Error::MissingTarget);
                }
                self.pipeline.set_shared_curve(*name, curve)
            }
            Control::ClearSharedCurve { name } => {
                self.pipeline.clear_shared_curve(*name);
                Ok(())
            }
            Control::SetX0Target { target } => {
                let t = target.build(self.pipeline.model(), self.pipeline.weights())?;
                self.pipeline.set_x0_target(Some(t))
            }
            Control::ClearX0Target => {
                let strength = self.pipeline.registry().curve(CurveField::X0TargetStrength);
                if strength.is_some_and(|c| !c.is_sentinel()) && self.request.curves.x0_target.is_none() {
                    return Err(Error::MissingTarget);
                }
                self.pipeline.set_x0_target(None)
            }
            Control::SetModelWeights { offset } => {
                let o = offset.build(self.pipeline.model(), self.pipeline.weights())?;
                self.pipeline.set_model_weights(o)
            }
            Control::SetMode { mode } => self.pipeline.set_mode(*mode),
            Control::UpdateRequest { patch } => {
                let mut r = self.request.clone();
                if let Some(p) = patch.prompt {
                    r.cond.prompt = p;
                }
                if let Some(h) = patch.hint_strength {
                    r.cond.hint_strength = h;
                }
                if let Some(t) = patch.timbre_strength {
                    r.cond.timbre_strength = t;
                }
                if patch.clear_source {
                    r.cond.source = None;
                }
                if let Some(s) = &patch.source {
                    r.cond.source = Some(s.build(self.pipeline.model(), self.pipeline.weights())?);
                }
                if let Some(s) = patch.solver {
                    r.solver = s;
                }
                if let Some(g) = patch.guidance {
                    r.guidance = g;
                }
                self.set_request(r)
            }
        }
    }

    /// Submits on demand, then runs one tick.
    pub fn step(&mut self) -> Result<TickReport> {
        for _ in 0..self.pipeline.admission_demand() {
            self.pipeline.submit(self.request.clone())?;
        }
        self.pipeline.tick()
    }

    pub fn run(&mut self, ticks: usize) -> Result<Vec<TickReport>> {
        (0..ticks).map(|_| self.step()).collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.pipeline.snapshot()
    }
}
