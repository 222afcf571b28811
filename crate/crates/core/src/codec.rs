//! Toy convolutional decoder with a known receptive field, and windowed
//! decoding with overlap margins.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::rng::{NoiseKey, Purpose};

pub const KERNEL: usize = 3;
pub const TOY_DILATIONS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcmHeader {
    pub hop: usize,
    pub start_frame: usize,
    pub frame_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcmChunk {
    pub samples: Vec<i16>,
    pub start_frame: usize,
    pub hop: usize,
}

impl PcmChunk {
    pub fn frame_count(&self) -> usize {
        self.samples.len() / self.hop
    }

    pub fn header(&self) -> PcmHeader {
        PcmHeader {
            hop: self.hop,
            start_frame: self.start_frame,
            frame_count: self.frame_count(),
        }
    }

    /// Raw little-endian mono samples.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.samples.iter().flat_map(|s| s.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(header: &PcmHeader, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != header.frame_count * header.hop * 2 {
            return Err(Error::Invalid("PCM blob length does not match header".into()));
        }
        Ok(Self {
            samples: bytes
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]))
                .collect(),
            start_frame: header.start_frame,
            hop: header.hop,
        })
    }

    /// Largest absolute sample difference against an aligned chunk.
    pub fn max_diff(&self, other: &PcmChunk) -> Result<i32> {
        if self.samples.len() != other.samples.len() || self.start_frame != other.start_frame {
            return Err(Error::Invalid("chunks are not aligned".into()));
        }
        Ok(self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (*a as i32 - *b as i32).abs())
            .max()
            .unwrap_or(0))
    }
}

/// Round half away from zero, clip to the 16-bit range.
pub fn quantize(x: f64) -> i16 {
    (x * 32767.0).round().clamp(-32768.0, 32767.0) as i16
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    dilation: usize,
    in_ch: usize,
    out_ch: usize,
    /// `[out][in][tap]`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn w(&self, o: usize, i: usize, k: usize) -> f64 {
        self.weights[(o * self.in_ch + i) * KERNEL + k]
    }

    /// Zero-padded centred conv over `input` (`[frames][in_ch]`) with tanh.
    fn apply(&self, input: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = input.len() as isize;
        let d = self.dilation as isize;
        (0..n)
            .map(|t| {
                (0..self.out_ch)
                    .map(|o| {
                        let mut acc = self.bias[o];
                        for k in 0..KERNEL {
                            let src = t + (k as isize - 1) * d;
                            if src < 0 || src >= n {
                                continue;
                            }
                            let row = &input[src as usize];
                            for (i, v) in row.iter().enumerate() {
                                acc += self.w(o, i, k) * v;
                            }
                        }
                        acc.tanh()
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub frames_decoded: usize,
    /// Frame-layer evaluations, the unit of decode cost.
    pub ops: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyCodec {
    channels: usize,
    hop: usize,
    layers: Vec<ConvLayer>,
    /// `[hop][width]`
    upsample: Vec<f64>,
}

impl ToyCodec {
    pub fn new(channels: usize, hop: usize, seed: u64) -> Result<Self> {
        Self::with_dilations(channels, hop, &TOY_DILATIONS, seed)
    }

    pub fn with_dilations(channels: usize, hop: usize, dilations: &[usize], seed: u64) -> Result<Self> {
        if channels == 0 || hop == 0 || dilations.is_empty() || dilations.contains(&0) {
            return Err(Error::Invalid("codec needs channels, hop and positive dilations".into()));
        }
        let width = channels;
        let mut rng = NoiseKey::new(seed, 0, 0, Purpose::Pattern).generator();
        let gain = 1.5;
        let layers = dilations
            .iter()
            .enumerate()
            .map(|(li, &dilation)| {
                let in_ch = if li == 0 { channels } else { width };
                let bound = gain / ((KERNEL * in_ch) as f64).sqrt();
                ConvLayer {
                    dilation,
                    in_ch,
                    out_ch: width,
                    weights: (0..width * in_ch * KERNEL)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; width],
                }
            })
            .collect();
        let ub = 1.0 / (width as f64).sqrt();
        let upsample = (0..hop * width).map(|_| rng.random_range(-ub..ub)).collect();
        Ok(Self {
            channels,
            hop,
            layers,
            upsample,
        })
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// One-sided support of the conv stack in frames.
    pub fn analytic_receptive_field(&self) -> usize {
        self.layers.iter().map(|l| l.dilation * (KERNEL / 2)).sum()
    }

    fn render(&self, latent: &Latent, range: Range<usize>) -> (Vec<f64>, DecodeStats) {
        let mut feats: Vec<Vec<f64>> = (range.clone())
            .map(|t| (0..latent.channels()).map(|c| latent.get(t, c)).collect())
            .collect();
        for layer in &self.layers {
            feats = layer.apply(&feats);
        }
        let width = self.layers.last().map_or(self.channels, |l| l.out_ch);
        let mut out = Vec::with_capacity(feats.len() * self.hop);
        for f in &feats {
            for h in 0..self.hop {
                let row = &self.upsample[h * width..(h + 1) * width];
                let s: f64 = row.iter().zip(f).map(|(w, v)| w * v).sum();
                out.push(s.tanh());
            }
        }
        let stats = DecodeStats {
            frames_decoded: range.len(),
            ops: range.len() * self.layers.len(),
        };
        (out, stats)
    }

    fn check(&self, latent: &Latent) -> Result<()> {
        if latent.channels() != self.channels {
            return Err(Error::ShapeMismatch {
                left: latent.shape(),
                right: (latent.frames(), self.channels),
            });
        }
        if !latent.is_finite() {
            return Err(Error::NonFinite("latent"));
        }
        Ok(())
    }

    /// Unquantized render of the whole latent.
    pub fn decode_float(&self, latent: &Latent) -> Result<Vec<f64>> {
        self.check(latent)?;
        Ok(self.render(latent, 0..latent.frames()).0)
    }

    pub fn full_decode(&self, latent: &Latent) -> Result<PcmChunk> {
        Ok(self.full_decode_with_stats(latent)?.0)
    }

    pub fn full_decode_with_stats(&self, latent: &Latent) -> Result<(PcmChunk, DecodeStats)> {
        self.check(latent)?;
        let (out, stats) = self.render(latent, 0..latent.frames());
        Ok((
            PcmChunk {
                samples: out.into_iter().map(quantize).collect(),
                start_frame: 0,
                hop: self.hop,
            },
            stats,
        ))
    }

    pub fn windowed_decode(&self, latent: &Latent, window: Range<usize>, overlap: usize) -> Result<PcmChunk> {
        Ok(self.windowed_decode_with_stats(latent, window, overlap)?.0)
    }

    /// Decodes `window` extended by `overlap` frames each side (clamped at the
    /// latent's edges, where the zero padding matches the full decode), then
    /// trims back to the window.
    pub fn windowed_decode_with_stats(
        &self,
        latent: &Latent,
        window: Range<usize>,
        overlap: usize,
    ) -> Result<(PcmChunk, DecodeStats)> {
        self.check(latent)?;
        if window.start >= window.end || window.end > latent.frames() {
            return Err(Error::Invalid(format!(
                "window {window:?} outside 0..{}",
                latent.frames()
            )));
        }
        let lo = window.start.saturating_sub(overlap);
        let hi = (window.end + overlap).min(latent.frames());
        let ext = latent.slice_frames(lo, hi)?;
        let (out, stats) = self.render(&ext, 0..ext.frames());
        let skip = (window.start - lo) * self.hop;
        let take = window.len() * self.hop;
        Ok((
            PcmChunk {
                samples: out[skip..skip + take].iter().copied().map(quantize).collect(),
                start_frame: window.start,
                hop: self.hop,
            },
            stats,
        ))
    }

    /// Lossy inverse of the upsample stage: least-squares projection of each
    /// frame's samples, for preparing source latents from PCM.
    pub fn encode(&self, pcm: &PcmChunk) -> Result<Latent> {
        if pcm.hop != self.hop || !pcm.samples.len().is_multiple_of(self.hop) || pcm.samples.is_empty() {
            return Err(Error::Invalid("PCM does not match codec hop".into()));
        }
        let width = self.layers.last().map_or(self.channels, |l| l.out_ch);
        let frames = pcm.samples.len() / self.hop;
        let mut values = Vec::with_capacity(frames * self.channels);
        for f in 0..frames {
            let chunk = &pcm.samples[f * self.hop..(f + 1) * self.hop];
            for c in 0..self.channels.min(width) {
                let (mut num, mut den) = (0.0, 0.0);
                for (h, s) in chunk.iter().enumerate() {
                    let w = self.upsample[h * width + c];
                    num += w * (*s as f64 / 32767.0).clamp(-0.999, 0.999).atanh();
                    den += w * w;
                }
                values.push(if den > 0.0 { num / den } else { 0.0 });
            }
            values.extend(std::iter::repeat_n(0.0, self.channels.saturating_sub(width)));
        }
        Latent::from_vec(frames, self.channels, values)
    }

    /// Impulse probe: the farthest frame distance at which a unit bump on one
    /// latent frame moves any output sample by at least one LSB.
    pub fn measure_receptive_field(&self, frames: usize) -> Result<usize> {
        let rf = self.analytic_receptive_field();
        let frames = frames.max(4 * rf + 3);
        let centre = frames / 2;
        let base = Latent::zeros(frames, self.channels);
        let bumped = Latent::from_fn(frames, self.channels, |t, _| if t == centre { 1.0 } else { 0.0 });
        let a = self.full_decode(&base)?;
        let b = self.full_decode(&bumped)?;
        let mut far = 0;
        for (i, (x, y)) in a.samples.iter().zip(&b.samples).enumerate() {
            if (*x as i32 - *y as i32).abs() >= 1 {
                far = far.max((i / self.hop).abs_diff(centre));
            }
        }
        Ok(far)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ToyModel};
    use proptest::prelude::*;

    fn codec() -> ToyCodec {
        ToyCodec::new(8, 64, 11).unwrap()
    }

    fn fixture(frames: usize) -> Latent {
        let m = ToyModel::new(ModelConfig { frames, ..ModelConfig::default() }).unwrap();
        m.base_pattern(50)
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 32767);
        assert_eq!(quantize(-1.0), -32767);
        assert_eq!(quantize(2.0), 32767);
        assert_eq!(quantize(-2.0), -32768);
        assert_eq!(quantize(0.5 / 32767.0), 1);
        assert_eq!(quantize(-0.5 / 32767.0), -1);
    }

    #[test]
    fn shape_and_zero_laws() {
        let c = codec();
        let z = c.full_decode(&Latent::zeros(20, 8)).unwrap();
        assert_eq!(z.samples.len(), 20 * 64);
        assert!(z.samples.iter().all(|s| *s == 0));
        let x = fixture(40);
        assert_eq!(c.full_decode(&x).unwrap(), c.full_decode(&x).unwrap());
        assert_eq!(c.windowed_decode(&x, 0..40, 0).unwrap(), c.full_decode(&x).unwrap());
    }

    #[test]
    fn receptive_field_matches_geometry() {
        let c = codec();
        assert_eq!(c.analytic_receptive_field(), 15);
        assert_eq!(c.measure_receptive_field(96).unwrap(), 15);
        let single = ToyCodec::with_dilations(8, 64, &[1], 3).unwrap();
        assert_eq!(single.measure_receptive_field(16).unwrap(), 1);
    }

    #[test]
    fn overlap_zero_breaks_interior() {
        let c = codec();
        let x = fixture(96);
        let full = c.full_decode(&x).unwrap();
        let w = c.windowed_decode(&x, 30..50, 0).unwrap();
        let slice = PcmChunk {
            samples: full.samples[30 * 64..50 * 64].to_vec(),
            start_frame: 30,
            hop: 64,
        };
        assert!(w.max_diff(&slice).unwrap() > 0);
    }

    #[test]
    fn cost_follows_window_not_length() {
        let c = codec();
        let short = fixture(64);
        let long = fixture(512);
        let (_, a) = c.windowed_decode_with_stats(&short, 20..30, 15).unwrap();
        let (_, b) = c.windowed_decode_with_stats(&long, 200..210, 15).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ops, 40 * 4);
        let (_, full) = c.full_decode_with_stats(&long).unwrap();
        assert_eq!(full.ops, 512 * 4);
    }

    #[test]
    fn blob_round_trip() {
        let c = codec();
        let chunk = c.windowed_decode(&fixture(32), 4..12, 15).unwrap();
        let h = chunk.header();
        assert_eq!(h.frame_count, 8);
        let bytes = chunk.to_le_bytes();
        assert_eq!(PcmChunk::from_le_bytes(&h, &bytes).unwrap(), chunk);
        let enc = c.encode(&chunk).unwrap();
        assert_eq!(enc.shape(), (8, 8));
    }

    #[test]
    fn rejects_bad_windows() {
        let c = codec();
        let x = fixture(32);
        assert!(c.windowed_decode(&x, 10..10, 2).is_err());
        assert!(c.windowed_decode(&x, 10..40, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sufficient_overlap_is_exact(start in 0usize..90, len in 1usize..40, extra in 0usize..6) {
            let c = codec();
            let x = fixture(128);
            let end = (start + len).min(128);
            let full = c.full_decode(&x).unwrap();
            let w = c.windowed_decode(&x, start..end, 15 + extra).unwrap();
            prop_assert_eq!(&w.samples[..], &full.samples[start * 64..end * 64]);
        }
    }
}
