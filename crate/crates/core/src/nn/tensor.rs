use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{shape_err, Result};

/// Dense 4-d activation tensor stored channel-major: `[c][n][h][w]`.
///
/// Keeping the channel axis outermost lets a convolution be a single matrix
/// product whose output is already in this layout, and lets batch
/// normalization see each channel as one contiguous slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        batch: usize,
        height: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != channels * batch * height * width {
            return Err(shape_err(format!(
                "buffer of {} values for shape {}x{}x{}x{}",
                data.len(),
                channels,
                batch,
                height,
                width
            )));
        }
        Ok(Self { channels, batch, height, width, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.batch, self.height, self.width]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// Number of values per channel, `n * h * w`.
    pub fn plane(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.batch + n) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, n, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element type (used to run a trained f32 model in f64).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat of zero tensors"))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        if parts.iter().any(|t| t.channels != c || t.height != h || t.width != w) {
            return Err(shape_err("concat_batch requires equal c/h/w"));
        }
        let batch: usize = parts.iter().map(|t| t.batch).sum();
        let mut data = Vec::with_capacity(c * batch * h * w);
        for ch in 0..c {
            for t in parts {
                data.extend_from_slice(t.channel(ch));
            }
        }
        Ok(Self { channels: c, batch, height: h, width: w, data })
    }

    /// Copies out samples `start..start + len` of the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.batch);
        let s = self.spatial();
        let mut data = Vec::with_capacity(self.channels * len * s);
        for ch in 0..self.channels {
            let base = (ch * self.batch + start) * s;
            data.extend_from_slice(&self.data[base..base + len * s]);
        }
        Self { channels: self.channels, batch: len, height: self.height, width: self.width, data }
    }
}

/// Softmax over the channel axis at every (n, y, x) cell, max-subtracted.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let plane = logits.plane();
    let c = logits.channels;
    for i in 0..plane {
        let mut m = T::neg_infinity();
        for ch in 0..c {
            m = m.max(logits.data[ch * plane + i]);
        }
        let mut z = T::zero();
        for ch in 0..c {
            let e = (logits.data[ch * plane + i] - m).exp();
            out.data[ch * plane + i] = e;
            z += e;
        }
        for ch in 0..c {
            out.data[ch * plane + i] /= z;
        }
    }
    out
}

/// Log-softmax over the channel axis.
pub fn log_softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let plane = logits.plane();
    let c = logits.channels;
    for i in 0..plane {
        let mut m = T::neg_infinity();
        for ch in 0..c {
            m = m.max(logits.data[ch * plane + i]);
        }
        let mut z = T::zero();
        for ch in 0..c {
            z += (logits.data[ch * plane + i] - m).exp();
        }
        let lz = m + z.ln();
        for ch in 0..c {
            out.data[ch * plane + i] = logits.data[ch * plane + i] - lz;
        }
    }
    out
}

/// Vector-Jacobian product of the channel softmax: given probabilities `p`
/// and upstream `dp`, returns `p * (dp - sum_c p * dp)`.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Tensor<T> {
    assert!(probs.same_shape(grad_probs));
    let plane = probs.plane();
    let c = probs.channels;
    let mut out = probs.clone();
    for i in 0..plane {
        let mut dot = T::zero();
        for ch in 0..c {
            dot += probs.data[ch * plane + i] * grad_probs.data[ch * plane + i];
        }
        for ch in 0..c {
            let p = probs.data[ch * plane + i];
            out.data[ch * plane + i] = p * (grad_probs.data[ch * plane + i] - dot);
        }
    }
    out
}

/// Index of the largest channel at every cell, in `[n][y][x]` order.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let plane = t.plane();
    (0..plane)
        .map(|i| {
            let mut best = 0;
            let mut best_v = t.data[i];
            for ch in 1..t.channels {
                let v = t.data[ch * plane + i];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let t = Tensor::from_vec(3, 2, 1, 1, vec![1.0f64, -2.0, 0.5, 3.0, 100.0, 100.0]).unwrap();
        let p = softmax_channels(&t);
        for i in 0..2 {
            let s: f64 = (0..3).map(|c| p.data[c * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = t.map(|v| v + 7.0);
        let q = softmax_channels(&shifted);
        for (a, b) in p.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let lp = log_softmax_channels(&t);
        for (a, b) in lp.data.iter().zip(&p.data) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_slice_batch_roundtrip() {
        let a = Tensor::from_vec(2, 1, 1, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(2, 2, 1, 2, vec![5.0f32, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = Tensor::concat_batch(&[&a, &b]).unwrap();
        assert_eq!(c.batch, 3);
        assert_eq!(c.slice_batch(0, 1), a);
        assert_eq!(c.slice_batch(1, 2), b);
    }
}
