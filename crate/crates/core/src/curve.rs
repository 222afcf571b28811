//! Per-frame control curves and their sentinel semantics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};
use crate::latent::Latent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Multiplicative,
    Additive,
}

impl CurveKind {
    pub fn sentinel(self) -> f64 {
        match self {
            CurveKind::Multiplicative => 1.0,
            CurveKind::Additive => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CurveField {
    #[serde(rename = "sde_denoise_curve")]
    SdeDenoise,
    #[serde(rename = "guidance_curve")]
    Guidance,
    #[serde(rename = "velocity_scale")]
    VelocityScale,
    #[serde(rename = "ode_noise_curve")]
    OdeNoise,
    #[serde(rename = "apg_momentum")]
    ApgMomentum,
    #[serde(rename = "cfg_rescale_curve")]
    CfgRescale,
    #[serde(rename = "x0_target_strength")]
    X0TargetStrength,
}

impl CurveField {
    pub const ALL: [CurveField; 7] = [
        CurveField::SdeDenoise,
        CurveField::Guidance,
        CurveField::VelocityScale,
        CurveField::OdeNoise,
        CurveField::ApgMomentum,
        CurveField::CfgRescale,
        CurveField::X0TargetStrength,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CurveField::SdeDenoise => "sde_denoise_curve",
            CurveField::Guidance => "guidance_curve",
            CurveField::VelocityScale => "velocity_scale",
            CurveField::OdeNoise => "ode_noise_curve",
            CurveField::ApgMomentum => "apg_momentum",
            CurveField::CfgRescale => "cfg_rescale_curve",
            CurveField::X0TargetStrength => "x0_target_strength",
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            CurveField::SdeDenoise => (0.0, 1.0),
            CurveField::Guidance => (0.0, 8.0),
            CurveField::VelocityScale => (0.0, 4.0),
            CurveField::OdeNoise => (0.0, 1.0),
            CurveField::ApgMomentum => (-1.0, 1.0),
            CurveField::CfgRescale => (0.0, 1.0),
            CurveField::X0TargetStrength => (0.0, 1.0),
        }
    }

    /// Momentum and morph strength are neutral at zero.
    pub fn kind(self) -> CurveKind {
        match self {
            CurveField::OdeNoise | CurveField::ApgMomentum | CurveField::X0TargetStrength => {
                CurveKind::Additive
            }
            _ => CurveKind::Multiplicative,
        }
    }

    pub fn sentinel(self) -> f64 {
        self.kind().sentinel()
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|f| *f == self).unwrap()
    }
}

impl fmt::Display for CurveField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownCurve(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    kind: CurveKind,
    values: Vec<f64>,
}

impl Curve {
    /// Values are clamped into the field's declared range.
    pub fn new(field: CurveField, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid(format!("{field} curve is empty")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(out_of_range(field.name(), *v));
        }
        let (lo, hi) = field.range();
        Ok(Self {
            kind: field.kind(),
            values: values.into_iter().map(|v| v.clamp(lo, hi)).collect(),
        })
    }

    pub fn constant(field: CurveField, frames: usize, value: f64) -> Result<Self> {
        Self::new(field, vec![value; frames])
    }

    /// Linear from `from` at frame 0 to `to` at the last frame.
    pub fn ramp(field: CurveField, frames: usize, from: f64, to: f64) -> Result<Self> {
        let last = frames.saturating_sub(1).max(1) as f64;
        Self::new(
            field,
            (0..frames)
                .map(|i| from + (to - from) * i as f64 / last)
                .collect(),
        )
    }

    pub fn sentinel(field: CurveField, frames: usize) -> Self {
        Self {
            kind: field.kind(),
            values: vec![field.sentinel(); frames],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_sentinel(&self) -> bool {
        let s = self.kind.sentinel();
        self.values.iter().all(|v| *v == s)
    }
}

/// Per-request curve snapshot plus the optional morph target.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    #[serde(default)]
    pub curves: BTreeMap<CurveField, Curve>,
    #[serde(default)]
    pub x0_target: Option<Latent>,
}

impl CurveSet {
    pub fn with(mut self, field: CurveField, curve: Curve) -> Self {
        self.curves.insert(field, curve);
        self
    }

    pub fn with_target(mut self, target: Latent) -> Self {
        self.x0_target = Some(target);
        self
    }

    pub fn get(&self, field: CurveField) -> Option<&Curve> {
        self.curves.get(&field)
    }

    pub fn validate(&self, frames: usize, channels: usize) -> Result<()> {
        for (field, c) in &self.curves {
            if c.len() != frames {
                return Err(Error::Invalid(format!(
                    "{field} has {} values for {frames} frames",
                    c.len()
                )));
            }
        }
        if let Some(t) = &self.x0_target {
            if t.shape() != (frames, channels) {
                return Err(Error::ShapeMismatch {
                    left: t.shape(),
                    right: (frames, channels),
                });
            }
        }
        Ok(())
    }
}

/// Effective per-frame values of all seven curves for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedCurves {
    values: [Vec<f64>; 7],
}

impl ResolvedCurves {
    pub fn sentinel(frames: usize) -> Self {
        Self {
            values: CurveField::ALL.map(|f| vec![f.sentinel(); frames]),
        }
    }

    /// First match wins; an absent curve resolves to the sentinel.
    pub fn resolve(frames: usize, layers: &[&BTreeMap<CurveField, Curve>]) -> Self {
        Self {
            values: CurveField::ALL.map(|f| {
                layers
                    .iter()
                    .find_map(|l| l.get(&f))
                    .map(|c| c.values().to_vec())
                    .unwrap_or_else(|| vec![f.sentinel(); frames])
            }),
        }
    }

    pub fn from_set(frames: usize, set: &CurveSet) -> Self {
        Self::resolve(frames, &[&set.curves])
    }

    pub fn get(&self, field: CurveField) -> &[f64] {
        &self.values[field.index()]
    }

    pub fn set(&mut self, field: CurveField, values: Vec<f64>) {
        self.values[field.index()] = values;
    }

    pub fn is_sentinel(&self, field: CurveField) -> bool {
        let s = field.sentinel();
        self.get(field).iter().all(|v| *v == s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for f in CurveField::ALL {
            assert_eq!(f.name().parse::<CurveField>().unwrap(), f);
            let json = serde_json::to_string(&f).unwrap();
            assert_eq!(json, format!("\"{}\"", f.name()));
        }
        assert!(matches!(
            "sde_curve".parse::<CurveField>(),
            Err(Error::UnknownCurve(_))
        ));
    }

    #[test]
    fn clamps_into_range() {
        let c = Curve::new(CurveField::Guidance, vec![-1.0, 3.0, 12.0]).unwrap();
        assert_eq!(c.values(), &[0.0, 3.0, 8.0]);
        assert!(Curve::new(CurveField::Guidance, vec![f64::NAN]).is_err());
    }

    #[test]
    fn ramp_endpoints() {
        let c = Curve::ramp(CurveField::SdeDenoise, 5, 0.0, 1.0).unwrap();
        assert_eq!(c.values(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(Curve::ramp(CurveField::SdeDenoise, 1, 0.3, 1.0).unwrap().values(), &[0.3]);
    }

    #[test]
    fn sentinels() {
        for f in CurveField::ALL {
            assert!(Curve::sentinel(f, 4).is_sentinel());
        }
        let r = ResolvedCurves::sentinel(3);
        assert_eq!(r.get(CurveField::Guidance), &[1.0; 3]);
        assert_eq!(r.get(CurveField::OdeNoise), &[0.0; 3]);
    }

    #[test]
    fn resolution_order() {
        let mut shared = BTreeMap::new();
        shared.insert(CurveField::Guidance, Curve::constant(CurveField::Guidance, 2, 3.0).unwrap());
        let mut snap = BTreeMap::new();
        snap.insert(CurveField::Guidance, Curve::constant(CurveField::Guidance, 2, 2.0).unwrap());
        snap.insert(CurveField::VelocityScale, Curve::constant(CurveField::VelocityScale, 2, 0.5).unwrap());
        let r = ResolvedCurves::resolve(2, &[&shared, &snap]);
        assert_eq!(r.get(CurveField::Guidance), &[3.0, 3.0]);
        assert_eq!(r.get(CurveField::VelocityScale), &[0.5, 0.5]);
        assert_eq!(r.get(CurveField::CfgRescale), &[1.0, 1.0]);
    }
}
