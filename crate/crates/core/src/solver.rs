//! Per-step denoising math.

use serde::{Deserialize, Serialize};

use crate::curve::{CurveField, ResolvedCurves};
use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Ode,
    Sde,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    #[default]
    Off,
    FullCfg,
    OnetimeNegative,
    SelfNegative,
}

impl GuidanceMode {
    pub fn code(self) -> u64 {
        match self {
            GuidanceMode::Off => 0,
            GuidanceMode::FullCfg => 1,
            GuidanceMode::OnetimeNegative => 2,
            GuidanceMode::SelfNegative => 3,
        }
    }

    /// Whether this step needs a fresh unconditional forward pass.
    pub fn needs_uncond(self, state: &StepState) -> bool {
        match self {
            GuidanceMode::Off => false,
            GuidanceMode::FullCfg => true,
            GuidanceMode::OnetimeNegative => state.residual.is_none(),
            GuidanceMode::SelfNegative => state.prev_cond.is_none(),
        }
    }
}

/// Slot-owned solver memory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepState {
    pub momentum: Option<Latent>,
    pub residual: Option<Latent>,
    pub prev_cond: Option<Latent>,
    pub step: usize,
}

impl StepState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Guidance output. `v_uncond` may be `None` once the mode has cached a
/// negative.
pub fn guided_velocity(
    v_cond: &Latent,
    v_uncond: Option<&Latent>,
    mode: GuidanceMode,
    curves: &ResolvedCurves,
    state: &mut StepState,
) -> Result<Latent> {
    let delta = match mode {
        GuidanceMode::Off => return Ok(v_cond.clone()),
        GuidanceMode::FullCfg => {
            let u = v_uncond.ok_or(Error::MissingNegative)?;
            v_cond.check_same_shape(u)?;
            v_cond.sub(u)
        }
        GuidanceMode::OnetimeNegative => match (v_uncond, &state.residual) {
            (Some(u), _) => {
                v_cond.check_same_shape(u)?;
                let r = v_cond.sub(u);
                if state.residual.is_none() {
                    state.residual = Some(r.clone());
                }
                r
            }
            (None, Some(r)) => r.clone(),
            (None, None) => return Err(Error::MissingNegative),
        },
        GuidanceMode::SelfNegative => {
            let neg = v_uncond
                .or(state.prev_cond.as_ref())
                .ok_or(Error::MissingNegative)?;
            v_cond.check_same_shape(neg)?;
            let d = v_cond.sub(neg);
            state.prev_cond = Some(v_cond.clone());
            d
        }
    };

    let beta = curves.get(CurveField::ApgMomentum);
    let m = match &state.momentum {
        Some(prev) => Latent::lerp_frames(&vec![1.0; delta.frames()], &delta, beta, prev),
        None => delta,
    };
    state.momentum = Some(m.clone());

    let scale: Vec<f64> = curves.get(CurveField::Guidance).iter().map(|s| s - 1.0).collect();
    let guided = Latent::lerp_frames(&vec![1.0; m.frames()], v_cond, &scale, &m);

    let phi = curves.get(CurveField::CfgRescale);
    let n_g = guided.frame_norms();
    let n_c = v_cond.frame_norms();
    let factor: Vec<f64> = (0..guided.frames())
        .map(|t| {
            if n_g[t] == 0.0 {
                1.0
            } else {
                (phi[t] * n_g[t] + (1.0 - phi[t]) * n_c[t]) / n_g[t]
            }
        })
        .collect();
    Ok(guided.mul_frames(&factor))
}

/// Per-frame normalized weighted sum of condition velocities.
pub fn blend_conditions(velocities: &[Latent], weights: &[Vec<f64>]) -> Result<Latent> {
    let first = velocities
        .first()
        .ok_or_else(|| Error::Invalid("blend needs at least one condition".into()))?;
    if velocities.len() != weights.len() {
        return Err(Error::Invalid("one weight curve per condition".into()));
    }
    if velocities.len() == 1 {
        return Ok(first.clone());
    }
    let frames = first.frames();
    for (v, w) in velocities.iter().zip(weights) {
        first.check_same_shape(v)?;
        if w.len() != frames || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Invalid("weights must be T non-negative values".into()));
        }
    }
    let totals: Vec<f64> = (0..frames).map(|t| weights.iter().map(|w| w[t]).sum()).collect();
    if let Some(t) = totals.iter().position(|s| *s <= 0.0) {
        return Err(Error::Invalid(format!("blend weights sum to zero at frame {t}")));
    }
    let mut acc = Latent::zeros(frames, first.channels());
    for (v, w) in velocities.iter().zip(weights) {
        let norm: Vec<f64> = w.iter().zip(&totals).map(|(a, s)| a / s).collect();
        acc = Latent::lerp_frames(&vec![1.0; frames], &acc, &norm, v);
    }
    Ok(acc)
}

/// `(1 - a) x0_pred + a target`, per frame.
pub fn morph_x0(x0_pred: &Latent, target: &Latent, alpha: &[f64]) -> Latent {
    let keep: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
    Latent::lerp_frames(&keep, x0_pred, alpha, target)
}

/// Morph applied to the x0 prediction inside a step.
#[derive(Clone, Copy, Debug)]
pub struct Morph<'a> {
    pub target: &'a Latent,
    pub alpha: &'a [f64],
}

fn check_pair(t_curr: f64, t_next: f64) -> Result<()> {
    // Negated so NaN fails.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(t_next < t_curr) || !(t_curr > 0.0) {
        return Err(Error::TimestepOrder { t_curr, t_next });
    }
    Ok(())
}

pub fn ode_step(
    x_t: &Latent,
    v: &Latent,
    t_curr: f64,
    t_next: f64,
    curves: &ResolvedCurves,
    morph: Option<Morph<'_>>,
    noise: &Latent,
) -> Result<Latent> {
    check_pair(t_curr, t_next)?;
    x_t.check_same_shape(v)?;
    x_t.check_same_shape(noise)?;
    let mut v = v.mul_frames(curves.get(CurveField::VelocityScale));
    if let Some(m) = morph {
        x_t.check_same_shape(m.target)?;
        let x0_pred = x_t.sub(&v.scale(t_curr));
        let morphed = morph_x0(&x0_pred, m.target, m.alpha);
        v = v.add(&x0_pred.sub(&morphed).scale(1.0 / t_curr));
    }
    let dt = t_next - t_curr;
    let det = x_t.add(&v.scale(dt));
    Ok(Latent::lerp_frames(
        &vec![1.0; det.frames()],
        &det,
        curves.get(CurveField::OdeNoise),
        noise,
    ))
}

/// Re-noise step with per-frame blending toward a source-anchored re-noise.
#[allow(clippy::too_many_arguments)]
pub fn sde_step(
    x_t: &Latent,
    v: &Latent,
    t_curr: f64,
    t_next: f64,
    source: Option<&Latent>,
    curves: &ResolvedCurves,
    morph: Option<Morph<'_>>,
    noise: &Latent,
) -> Result<Latent> {
    check_pair(t_curr, t_next)?;
    x_t.check_same_shape(v)?;
    x_t.check_same_shape(noise)?;
    let v = v.mul_frames(curves.get(CurveField::VelocityScale));
    let mut x0_pred = x_t.sub(&v.scale(t_curr));
    if let Some(m) = morph {
        x_t.check_same_shape(m.target)?;
        x0_pred = morph_x0(&x0_pred, m.target, m.alpha);
    }
    let frames = x_t.frames();
    let tn = vec![t_next; frames];
    let keep = vec![1.0 - t_next; frames];
    let full = Latent::lerp_frames(&tn, noise, &keep, &x0_pred);
    let c = curves.get(CurveField::SdeDenoise);
    match source {
        Some(src) => {
            x_t.check_same_shape(src)?;
            let anchored = Latent::lerp_frames(&tn, noise, &keep, src);
            let rest: Vec<f64> = c.iter().map(|c| 1.0 - c).collect();
            Ok(Latent::lerp_frames(c, &full, &rest, &anchored))
        }
        None if c.iter().all(|c| *c == 1.0) => Ok(full),
        None => Err(Error::MissingSource),
    }
}
