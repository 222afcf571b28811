//! Deterministic stand-in for the decoder network: a flow-matching velocity
//! field pulling toward an explicit x0 built from seeded smooth patterns.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};
use crate::latent::Latent;
use crate::rng::{noise, ContentHasher, NoiseKey, Purpose};

const SINUSOIDS_PER_CHANNEL: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frames: usize,
    pub channels: usize,
    pub pattern_seed: u64,
    /// Fraction of the current deviation `x_t - x0` the prediction keeps.
    /// Zero gives the exact oracle.
    pub damping: f64,
    /// Amplitude of the seeded velocity perturbation.
    pub jitter: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 96,
            channels: 8,
            pattern_seed: 7,
            damping: 0.0,
            jitter: 0.0,
        }
    }
}

impl ModelConfig {
    /// Imperfect predictor used for streaming runs, so that the initial mix
    /// and every step's curves leave a trace in the output.
    pub fn streaming() -> Self {
        Self {
            damping: 0.5,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    style_offset: Latent,
    version: u64,
}

impl ModelWeights {
    pub fn zero(frames: usize, channels: usize) -> Self {
        Self {
            style_offset: Latent::zeros(frames, channels),
            version: 0,
        }
    }

    pub fn style_offset(&self) -> &Latent {
        &self.style_offset
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Replaces the offset and bumps the version.
    pub fn replace(&mut self, offset: Latent) -> Result<()> {
        self.style_offset.check_same_shape(&offset)?;
        self.style_offset = offset;
        self.version += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendTerm {
    pub prompt: u64,
    /// Per-frame weight, length T.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSet {
    pub prompt: u64,
    pub hint_strength: f64,
    pub timbre_strength: f64,
    #[serde(default)]
    pub source: Option<Latent>,
    /// Extra prompts blended per frame with the primary one.
    #[serde(default)]
    pub blend: Vec<BlendTerm>,
    /// Per-frame weight of the primary prompt when blending (default ones).
    #[serde(default)]
    pub primary_weights: Option<Vec<f64>>,
}

impl ConditionSet {
    pub fn new(prompt: u64) -> Self {
        Self {
            prompt,
            hint_strength: 1.0,
            timbre_strength: 1.0,
            source: None,
            blend: Vec::new(),
            primary_weights: None,
        }
    }

    pub fn unconditional() -> Self {
        Self {
            hint_strength: 0.0,
            timbre_strength: 0.0,
            ..Self::new(0)
        }
    }

    pub fn validate(&self, frames: usize, channels: usize) -> Result<()> {
        for (name, v) in [("hint_strength", self.hint_strength), ("timbre_strength", self.timbre_strength)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(out_of_range(name, v));
            }
        }
        if let Some(src) = &self.source {
            if src.shape() != (frames, channels) {
                return Err(Error::ShapeMismatch {
                    left: src.shape(),
                    right: (frames, channels),
                });
            }
        }
        let weight_lists = self
            .blend
            .iter()
            .map(|b| &b.weights)
            .chain(self.primary_weights.iter());
        for w in weight_lists {
            if w.len() != frames || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Invalid("blend weights must be T non-negative values".into()));
            }
        }
        Ok(())
    }

    pub fn hash_into(&self, h: &mut ContentHasher) {
        h.u64(self.prompt)
            .f64(self.hint_strength)
            .f64(self.timbre_strength)
            .option(self.source.as_ref(), |h, s| {
                h.latent(s);
            })
            .u64(self.blend.len() as u64);
        for b in &self.blend {
            h.u64(b.prompt).f64s(&b.weights);
        }
        h.option(self.primary_weights.as_ref(), |h, w| {
            h.f64s(w);
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum PatternTag {
    Base,
    Hint,
    Timbre,
    Profile,
}

impl PatternTag {
    fn code(self) -> u64 {
        match self {
            PatternTag::Base => 1,
            PatternTag::Hint => 2,
            PatternTag::Timbre => 3,
            PatternTag::Profile => 4,
        }
    }
}

#[derive(Debug)]
pub struct ToyModel {
    config: ModelConfig,
    profile: Vec<f64>,
    cache: Mutex<HashMap<(u64, PatternTag), Arc<Latent>>>,
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.frames == 0 || config.channels == 0 {
            return Err(Error::Invalid("model shape must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&config.damping) {
            return Err(out_of_range("damping", config.damping));
        }
        if !(config.jitter.is_finite() && config.jitter >= 0.0) {
            return Err(out_of_range("jitter", config.jitter));
        }
        let mut rng = NoiseKey::new(config.pattern_seed, 0, PatternTag::Profile.code(), Purpose::Pattern)
            .generator();
        let profile = (0..config.channels)
            .map(|_| {
                let mag: f64 = rng.random_range(0.4..0.9);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Ok(Self {
            config,
            profile,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.config.frames, self.config.channels)
    }

    fn smooth(&self, key: u64, tag: PatternTag) -> Arc<Latent> {
        if let Some(p) = self.cache.lock().unwrap().get(&(key, tag)) {
            return Arc::clone(p);
        }
        let (frames, channels) = self.shape();
        let mut rng = NoiseKey::new(self.config.pattern_seed, key, tag.code(), Purpose::Pattern).generator();
        let mut data = vec![0.0; frames * channels];
        for c in 0..channels {
            for _ in 0..SINUSOIDS_PER_CHANNEL {
                let freq: f64 = rng.random_range(2.0..12.0);
                let amp: f64 = rng.random_range(0.5..1.0);
                let phase: f64 = rng.random_range(0.0..2.0 * PI);
                for t in 0..frames {
                    let arg = 2.0 * PI * freq * t as f64 / frames as f64 + phase;
                    data[t * channels + c] += 0.5 * amp * arg.sin();
                }
            }
        }
        if tag == PatternTag::Base {
            for t in 0..frames {
                for c in 0..channels {
                    data[t * channels + c] += self.profile[c];
                }
            }
        } else {
            data.iter_mut().for_each(|v| *v *= 0.5);
        }
        let p = Arc::new(Latent::from_vec(frames, channels, data).expect("finite pattern"));
        self.cache.lock().unwrap().insert((key, tag), Arc::clone(&p));
        p
    }

    /// Prompt-dependent base signal; also serves as a source fixture.
    pub fn base_pattern(&self, key: u64) -> Latent {
        (*self.smooth(key, PatternTag::Base)).clone()
    }

    pub fn hint_pattern(&self, key: u64) -> Latent {
        (*self.smooth(key, PatternTag::Hint)).clone()
    }

    pub fn timbre_pattern(&self, key: u64) -> Latent {
        (*self.smooth(key, PatternTag::Timbre)).clone()
    }

    /// Seeded smooth zero-mean pattern, handy for offsets and fixtures.
    pub fn pattern(&self, key: u64, scale: f64) -> Latent {
        self.smooth(key, PatternTag::Hint).scale(2.0 * scale)
    }

    pub fn x0_for_prompt(&self, prompt: u64, hint: f64, timbre: f64, weights: &ModelWeights) -> Latent {
        let base = self.smooth(prompt, PatternTag::Base);
        let h = self.smooth(prompt, PatternTag::Hint);
        let tb = self.smooth(prompt, PatternTag::Timbre);
        let arr = base.array() + &(h.array() * hint) + &(tb.array() * timbre) + weights.style_offset().array();
        Latent::from_array_unchecked(arr)
    }

    pub fn x0_of(&self, cond: &ConditionSet, weights: &ModelWeights) -> Latent {
        self.x0_for_prompt(cond.prompt, cond.hint_strength, cond.timbre_strength, weights)
    }

    /// Velocity under `x_t = (1 - t) x0 + t n`, `v = n - x0`.
    pub fn velocity_toward(&self, x_t: &Latent, t: f64, x0: &Latent, key: &NoiseKey) -> Result<Latent> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(out_of_range("t", t));
        }
        x_t.check_same_shape(x0)?;
        let k = (1.0 - self.config.damping) / t;
        let mut v = x_t.sub(x0).scale(k);
        if self.config.jitter > 0.0 {
            let (frames, channels) = x_t.shape();
            let n = noise(&key.with_purpose(Purpose::Model), frames, channels);
            v = v.add(&n.scale(self.config.jitter * t));
        }
        Ok(v)
    }

    pub fn velocity(
        &self,
        x_t: &Latent,
        t: f64,
        cond: &ConditionSet,
        weights: &ModelWeights,
        key: &NoiseKey,
    ) -> Result<Latent> {
        self.velocity_toward(x_t, t, &self.x0_of(cond, weights), key)
    }
}
