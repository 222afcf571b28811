use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};
use crate::rng::ContentHasher;

/// Shift warp, monotone on [0, 1] with fixed points 0 and 1.
pub fn warp(u: f64, shift: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    shift * u / (1.0 + (shift - 1.0) * u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScheduleId(pub u64);

impl fmt::Display for ScheduleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepSchedule {
    sigmas: Vec<f64>,
    denoise: f64,
    steps: usize,
    shift: f64,
    id: ScheduleId,
}

impl TimestepSchedule {
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    pub fn denoise(&self) -> f64 {
        self.denoise
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn id(&self) -> ScheduleId {
        self.id
    }
}

pub fn build_schedule(denoise: f64, steps: usize, shift: f64) -> Result<TimestepSchedule> {
    if !(denoise > 0.0 && denoise <= 1.0) {
        return Err(out_of_range("denoise", denoise));
    }
    if steps < 1 {
        return Err(Error::Invalid("steps must be at least 1".into()));
    }
    if !(shift > 0.0 && shift.is_finite()) {
        return Err(out_of_range("shift", shift));
    }
    let s = steps as f64;
    let sigmas: Vec<f64> = (0..=steps)
        .map(|i| denoise * warp((steps - i) as f64 / s, shift))
        .collect();
    let mut h = ContentHasher::new("schedule");
    h.u64(steps as u64).f64(shift).f64(denoise).f64s(&sigmas);
    Ok(TimestepSchedule {
        sigmas,
        denoise,
        steps,
        shift,
        id: ScheduleId(h.finish_u64()),
    })
}

/// Returns the schedule a slot at `slot_step` should continue with. The step
/// index itself is untouched by the caller.
pub fn migrate_schedule(
    current: &Arc<TimestepSchedule>,
    slot_step: usize,
    new: &Arc<TimestepSchedule>,
) -> Result<Arc<TimestepSchedule>> {
    if current.steps != new.steps {
        return Err(Error::StepMismatch {
            slot: current.steps,
            target: new.steps,
        });
    }
    if slot_step > current.steps {
        return Err(Error::Invalid(format!(
            "slot step {slot_step} beyond {} steps",
            current.steps
        )));
    }
    Ok(Arc::clone(new))
}

pub fn quantize_denoise(denoise: f64) -> i64 {
    (denoise * 1e6).round() as i64
}

#[derive(Debug, Default)]
pub struct ScheduleCache {
    map: HashMap<(i64, usize, u64), Arc<TimestepSchedule>>,
}

impl ScheduleCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from the quantized denoise so equal slider values share one
    /// schedule regardless of float noise below 1e-6.
    pub fn get(&mut self, denoise: f64, steps: usize, shift: f64) -> Result<Arc<TimestepSchedule>> {
        if !(denoise > 0.0 && denoise <= 1.0) {
            return Err(out_of_range("denoise", denoise));
        }
        let q = quantize_denoise(denoise);
        if q <= 0 {
            return Err(out_of_range("denoise", denoise));
        }
        let key = (q, steps, shift.to_bits());
        if let Some(s) = self.map.get(&key) {
            return Ok(Arc::clone(s));
        }
        let sched = Arc::new(build_schedule(q as f64 / 1e6, steps, shift)?);
        self.map.insert(key, Arc::clone(&sched));
        Ok(sched)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_at_unit_shift() {
        let s = build_schedule(1.0, 8, 1.0).unwrap();
        let want: Vec<f64> = (0..=8).map(|i| 1.0 - i as f64 * 0.125).collect();
        assert_eq!(s.sigmas(), want.as_slice());
    }

    #[test]
    fn hand_evaluated_warp() {
        let s = build_schedule(1.0, 2, 3.0).unwrap();
        assert_eq!(s.sigmas(), &[1.0, 0.75, 0.0]);
    }

    #[test]
    fn truncated_schedule_keeps_length() {
        let s = build_schedule(0.5, 8, 3.0).unwrap();
        assert_eq!(s.sigmas().len(), 9);
        assert_eq!(s.sigma(0), 0.5);
        assert_eq!(s.sigma(8), 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(build_schedule(0.0, 8, 3.0).is_err());
        assert!(build_schedule(1.2, 8, 3.0).is_err());
        assert!(build_schedule(0.5, 0, 3.0).is_err());
        assert!(build_schedule(0.5, 4, 0.0).is_err());
    }

    #[test]
    fn cache_shares_ids() {
        let mut c = ScheduleCache::new();
        let a = c.get(0.5, 8, 3.0).unwrap();
        let b = c.get(0.5000000001, 8, 3.0).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        let d = c.get(1.0, 8, 3.0).unwrap();
        assert_ne!(a.id(), d.id());
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn migration_keeps_target_and_refuses_mismatch() {
        let old = Arc::new(build_schedule(1.0, 8, 3.0).unwrap());
        let new = Arc::new(build_schedule(0.5, 8, 3.0).unwrap());
        let m = migrate_schedule(&old, 3, &new).unwrap();
        assert_eq!(m.sigma(3), new.sigma(3));
        assert_eq!(migrate_schedule(&old, 3, &old).unwrap().id(), old.id());
        let other = Arc::new(build_schedule(0.5, 4, 3.0).unwrap());
        assert!(matches!(
            migrate_schedule(&old, 3, &other),
            Err(Error::StepMismatch { .. })
        ));
        assert!(migrate_schedule(&old, 9, &new).is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(d in 1e-3f64..=1.0, steps in 1usize..40, shift in 0.05f64..20.0) {
            let s = build_schedule(d, steps, shift).unwrap();
            prop_assert_eq!(s.sigmas().len(), steps + 1);
            prop_assert_eq!(s.sigma(0), d);
            prop_assert_eq!(s.sigma(steps), 0.0);
            for w in s.sigmas().windows(2) {
                prop_assert!(w[0] > w[1]);
            }
            prop_assert!(s.sigmas().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn warp_monotone_with_fixed_points(a in 0.0f64..=1.0, b in 0.0f64..=1.0, shift in 0.05f64..20.0) {
            prop_assert_eq!(warp(0.0, shift), 0.0);
            prop_assert_eq!(warp(1.0, shift), 1.0);
            if a < b {
                prop_assert!(warp(a, shift) <= warp(b, shift));
            }
        }
    }
}
