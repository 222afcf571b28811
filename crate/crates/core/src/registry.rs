use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::curve::{Curve, CurveField};
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::rng::ContentHasher;

/// Field-name keyed state read by every slot at every step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SharedRegistry {
    curves: BTreeMap<CurveField, Curve>,
    x0_target: Option<Latent>,
    writes: u64,
}

impl SharedRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_curve(&mut self, field: CurveField, curve: Curve, frames: usize) -> Result<()> {
        if curve.len() != frames {
            return Err(Error::Invalid(format!(
                "{field} has {} values for {frames} frames",
                curve.len()
            )));
        }
        self.curves.insert(field, curve);
        self.writes += 1;
        Ok(())
    }

    pub fn clear_curve(&mut self, field: CurveField) {
        if self.curves.remove(&field).is_some() {
            self.writes += 1;
        }
    }

    pub fn set_x0_target(&mut self, target: Option<Latent>) {
        self.x0_target = target;
        self.writes += 1;
    }

    pub fn curves(&self) -> &BTreeMap<CurveField, Curve> {
        &self.curves
    }

    pub fn curve(&self, field: CurveField) -> Option<&Curve> {
        self.curves.get(&field)
    }

    pub fn x0_target(&self) -> Option<&Latent> {
        self.x0_target.as_ref()
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    /// Content digest, independent of the write count.
    pub fn digest(&self) -> String {
        let mut h = ContentHasher::new("registry");
        for (field, curve) in &self.curves {
            h.str(field.name()).f64s(curve.values());
        }
        h.option(self.x0_target.as_ref(), |h, t| {
            h.latent(t);
        });
        h.finish_hex()[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_and_digest() {
        let mut r = SharedRegistry::new();
        let empty = r.digest();
        let c = Curve::constant(CurveField::SdeDenoise, 4, 0.5).unwrap();
        r.set_curve(CurveField::SdeDenoise, c.clone(), 4).unwrap();
        assert_eq!(r.writes(), 1);
        assert_ne!(r.digest(), empty);
        assert!(r.set_curve(CurveField::SdeDenoise, c, 5).is_err());
        r.clear_curve(CurveField::SdeDenoise);
        assert_eq!(r.digest(), empty);
        assert_eq!(r.writes(), 2);
    }
}
