//! Latent tensors and the latent-space metrics used across the pipeline.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `[T, D]` block of latent frames. Frame axis is axis 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Latent {
    data: Array2<f64>,
}

impl Latent {
    pub fn zeros(frames: usize, channels: usize) -> Self {
        Self {
            data: Array2::zeros((frames, channels)),
        }
    }

    pub fn from_elem(frames: usize, channels: usize, value: f64) -> Self {
        Self {
            data: Array2::from_elem((frames, channels), value),
        }
    }

    pub fn from_fn(frames: usize, channels: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self {
            data: Array2::from_shape_fn((frames, channels), |(t, c)| f(t, c)),
        }
    }

    /// Row-major values.
    pub fn from_vec(frames: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || channels == 0 {
            return Err(Error::Invalid("latent needs at least one frame and channel".into()));
        }
        let data = Array2::from_shape_vec((frames, channels), values)
            .map_err(|e| Error::Invalid(e.to_string()))?;
        Self::from_array(data)
    }

    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Invalid("latent needs at least one frame and channel".into()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(Self { data })
    }

    pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames(), self.channels())
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn get(&self, frame: usize, channel: usize) -> f64 {
        self.data[(frame, channel)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frames `[start, end)` as a new latent.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Latent> {
        if start >= end || end > self.frames() {
            return Err(Error::Invalid(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        Ok(Self {
            data: self.data.slice(ndarray::s![start..end, ..]).to_owned(),
        })
    }

    pub fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Latent) -> Latent {
        Self::from_array_unchecked(&self.data + &other.data)
    }

    pub fn sub(&self, other: &Latent) -> Latent {
        Self::from_array_unchecked(&self.data - &other.data)
    }

    pub fn scale(&self, k: f64) -> Latent {
        Self::from_array_unchecked(&self.data * k)
    }

    /// Multiply every frame `t` by `w[t]`.
    pub fn mul_frames(&self, w: &[f64]) -> Latent {
        debug_assert_eq!(w.len(), self.frames());
        let mut out = self.data.clone();
        for (mut row, &k) in out.axis_iter_mut(Axis(0)).zip(w) {
            row.mapv_inplace(|v| v * k);
        }
        Self::from_array_unchecked(out)
    }

    /// Per-frame L2 norm across channels.
    pub fn frame_norms(&self) -> Vec<f64> {
        self.data
            .axis_iter(Axis(0))
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// `a * x + b * y` element-wise with per-frame weights.
    pub fn lerp_frames(a: &[f64], x: &Latent, b: &[f64], y: &Latent) -> Latent {
        let mut out = Array2::zeros(x.data.raw_dim());
        for (t, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (ka, kb) = (a[t], b[t]);
            Zip::from(&mut row)
                .and(x.data.row(t))
                .and(y.data.row(t))
                .for_each(|o, &xv, &yv| *o = ka * xv + kb * yv);
        }
        Self::from_array_unchecked(out)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }
}

impl From<Latent> for Vec<Vec<f64>> {
    fn from(l: Latent) -> Self {
        l.to_rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Latent {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let frames = rows.len();
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::Invalid("ragged latent rows".into()));
        }
        Latent::from_vec(frames, channels, rows.into_iter().flatten().collect())
    }
}

pub fn mse(a: &Latent, b: &Latent) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = Zip::from(&a.data)
        .and(&b.data)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
    Ok(sum / a.data.len() as f64)
}

pub fn rms_diff(a: &Latent, b: &Latent) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// Cosine similarity of each of `n_segments` frame segments; the last one
/// takes the remainder frames.
pub fn segment_cosine_similarity(a: &Latent, b: &Latent, n_segments: usize) -> Result<Vec<f64>> {
    a.check_same_shape(b)?;
    let t = a.frames();
    if n_segments < 1 || n_segments > t {
        return Err(Error::Invalid(format!(
            "n_segments {n_segments} must be in 1..={t}"
        )));
    }
    let len = t / n_segments;
    Ok((0..n_segments)
        .map(|i| {
            let start = i * len;
            let end = if i + 1 == n_segments { t } else { start + len };
            let sa = a.data.slice(ndarray::s![start..end, ..]);
            let sb = b.data.slice(ndarray::s![start..end, ..]);
            let dot: f64 = Zip::from(&sa).and(&sb).fold(0.0, |acc, &x, &y| acc + x * y);
            let na = sa.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = sb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (dot / (na * nb)).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{noise, NoiseKey, Purpose};
    use proptest::prelude::*;

    fn random(seed: u64, t: usize, d: usize) -> Latent {
        noise(&NoiseKey::new(seed, 0, 0, Purpose::Init), t, d)
    }

    #[test]
    fn mse_identity_and_unit() {
        let x = random(1, 8, 4);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        let z = Latent::zeros(2, 2);
        let o = Latent::from_elem(2, 2, 1.0);
        assert_eq!(mse(&z, &o).unwrap(), 1.0);
        assert_eq!(rms_diff(&z, &o).unwrap(), 1.0);
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let a = random(11, 8, 4);
        let b = random(12, 8, 4);
        let mut acc = 0.0;
        for t in 0..8 {
            for c in 0..4 {
                let d = a.get(t, c) - b.get(t, c);
                acc += d * d;
            }
        }
        let oracle = acc / 32.0;
        assert!((mse(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert!((rms_diff(&a, &b).unwrap() - oracle.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Latent::zeros(4, 2);
        let b = Latent::zeros(4, 3);
        assert!(matches!(mse(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn segments_identity_and_negation() {
        let a = random(3, 10, 3);
        for s in segment_cosine_similarity(&a, &a, 4).unwrap() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let neg = a.scale(-1.0);
        for s in segment_cosine_similarity(&a, &neg, 4).unwrap() {
            assert!((s + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn segments_match_dot_oracle() {
        // first half equal, second half unrelated
        let a = random(21, 10, 2);
        let other = random(22, 10, 2);
        let b = Latent::from_fn(10, 2, |t, c| if t < 5 { a.get(t, c) } else { other.get(t, c) });
        let got = segment_cosine_similarity(&a, &b, 4).unwrap();
        let bounds = [(0, 2), (2, 4), (4, 6), (6, 10)];
        for (i, (s, e)) in bounds.iter().enumerate() {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for t in *s..*e {
                for c in 0..2 {
                    dot += a.get(t, c) * b.get(t, c);
                    na += a.get(t, c) * a.get(t, c);
                    nb += b.get(t, c) * b.get(t, c);
                }
            }
            let oracle = dot / (na.sqrt() * nb.sqrt());
            assert!((got[i] - oracle).abs() < 1e-12, "segment {i}");
        }
        assert!((got[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_segment_gives_zero() {
        let a = Latent::zeros(4, 2);
        let b = random(5, 4, 2);
        assert_eq!(segment_cosine_similarity(&a, &b, 2).unwrap(), vec![0.0, 0.0]);
        assert!(segment_cosine_similarity(&a, &b, 0).is_err());
        assert!(segment_cosine_similarity(&a, &b, 5).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let a = random(9, 3, 2);
        let json = serde_json::to_string(&a).unwrap();
        let back: Latent = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
        assert!(serde_json::from_str::<Latent>("[[1.0],[2.0,3.0]]").is_err());
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_nonnegative(s1 in 0u64..500, s2 in 0u64..500, t in 1usize..12, d in 1usize..5) {
            let a = random(s1, t, d);
            let b = random(s2 + 1000, t, d);
            let m = mse(&a, &b).unwrap();
            prop_assert!(m >= 0.0 && m.is_finite());
            prop_assert_eq!(m, mse(&b, &a).unwrap());
            prop_assert_eq!(rms_diff(&a, &b).unwrap(), m.sqrt());
            for s in segment_cosine_similarity(&a, &b, 1.max(t / 3)).unwrap() {
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }
    }
}
