//! Keyed noise. Every tensor of noise is a pure function of its key: the
//! generator is ChaCha20 seeded with the 32 key bytes
//! `seed | conditioning hash | step | purpose` (each u64, little endian),
//! and samples are drawn row-major from a standard normal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::latent::Latent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Init,
    Sde,
    Ode,
    Model,
    /// Seeded patterns of the toy model and fixtures.
    Pattern,
}

impl Purpose {
    pub fn tag(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Sde => 2,
            Purpose::Ode => 3,
            Purpose::Model => 4,
            Purpose::Pattern => 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub conditioning: u64,
    pub step: u64,
    pub purpose: Purpose,
}

impl NoiseKey {
    pub fn new(seed: u64, conditioning: u64, step: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            conditioning,
            step,
            purpose,
        }
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        Self { purpose, ..self }
    }

    pub fn with_step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    pub fn seed_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out[0..8].copy_from_slice(&self.seed.to_le_bytes());
        out[8..16].copy_from_slice(&self.conditioning.to_le_bytes());
        out[16..24].copy_from_slice(&self.step.to_le_bytes());
        out[24..32].copy_from_slice(&self.purpose.tag().to_le_bytes());
        out
    }

    pub fn generator(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.seed_bytes())
    }
}

pub fn noise(key: &NoiseKey, frames: usize, channels: usize) -> Latent {
    let mut rng = key.generator();
    let values: Vec<f64> = (0..frames * channels)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Latent::from_vec(frames, channels, values).expect("normal samples are finite")
}

/// SHA-256 over a canonical byte stream, truncated where a u64 is needed.
#[derive(Clone, Default)]
pub struct ContentHasher {
    inner: Sha256,
}

impl ContentHasher {
    pub fn new(domain: &str) -> Self {
        let mut h = Self::default();
        h.str(domain);
        h
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.inner.update(v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u64(s.len() as u64);
        self.inner.update(s.as_bytes());
        self
    }

    pub fn latent(&mut self, l: &Latent) -> &mut Self {
        self.u64(l.frames() as u64).u64(l.channels() as u64);
        for v in l.values() {
            self.f64(v);
        }
        self
    }

    pub fn option<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) -> &mut Self {
        match v {
            None => {
                self.u64(0);
            }
            Some(x) => {
                self.u64(1);
                f(self, x);
            }
        }
        self
    }

    pub fn finish_bytes(self) -> [u8; 32] {
        let out = self.inner.finalize();
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&out);
        bytes
    }

    pub fn finish_u64(self) -> u64 {
        let b = self.finish_bytes();
        u64::from_le_bytes(b[0..8].try_into().unwrap())
    }

    pub fn finish_hex(self) -> String {
        self.finish_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_noise() {
        let k = NoiseKey::new(7, 42, 3, Purpose::Sde);
        assert_eq!(noise(&k, 16, 4), noise(&k, 16, 4));
    }

    #[test]
    fn purposes_do_not_collide() {
        let base = NoiseKey::new(7, 42, 3, Purpose::Init);
        let tags = [Purpose::Init, Purpose::Sde, Purpose::Ode, Purpose::Model, Purpose::Pattern];
        for (i, a) in tags.iter().enumerate() {
            for b in &tags[i + 1..] {
                assert_ne!(
                    noise(&base.with_purpose(*a), 8, 2),
                    noise(&base.with_purpose(*b), 8, 2)
                );
            }
        }
        assert_ne!(noise(&base, 8, 2), noise(&base.with_step(4), 8, 2));
    }

    #[test]
    fn pinned_first_sample() {
        // guards the documented generator layout against silent changes
        let k = NoiseKey::new(1, 2, 3, Purpose::Init);
        assert_eq!(
            k.seed_bytes()[..17],
            [1, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0, 3]
        );
        let a = noise(&k, 1, 1).get(0, 0);
        let b = noise(&k, 4, 4).get(0, 0);
        assert_eq!(a, b);
    }

    #[test]
    fn roughly_standard_normal() {
        let n = noise(&NoiseKey::new(0, 0, 0, Purpose::Init), 200, 50);
        let len = 10_000.0;
        let mean = n.values().sum::<f64>() / len;
        let var = n.values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;
        assert!(mean.abs() < 0.05);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn hasher_separates_fields() {
        let mut a = ContentHasher::new("x");
        a.str("ab").str("c");
        let mut b = ContentHasher::new("x");
        b.str("a").str("bc");
        assert_ne!(a.finish_u64(), b.finish_u64());
    }
}
