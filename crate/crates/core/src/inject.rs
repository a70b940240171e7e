//! Reshaping teacher tensors into student shapes.
//!
//! `combo_injection` blends a center crop `a` with a multilinear resize `b`
//! as `λ·a + (1-λ)·b` where the crop actually copied source values, and
//! uses `b` alone where the crop had to pad. Same-shape inputs come back
//! untouched, so transferring between identical architectures reproduces
//! plain weight loading.

use serde::Serialize;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{advance, check_shape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InjectError {
    #[error("rank mismatch: source {src:?} vs target {target:?}")]
    RankMismatch {
        src: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("candidate shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("no candidates to mix")]
    NoCandidates,
    #[error("invalid injection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InjectionConfig {
    /// Weight of the center crop in the blend.
    pub lambda: f64,
    /// Softmax temperature over match scores.
    pub temperature: f64,
    /// Number of teacher candidates mixed per student tensor.
    pub k: usize,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.75,
            temperature: 1.0,
            k: 1,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<(), InjectError> {
        check_lambda(self.lambda)?;
        check_temperature(self.temperature)?;
        if self.k == 0 {
            return Err(InjectError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<(), InjectError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(InjectError::InvalidConfig(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<(), InjectError> {
    if !(t.is_finite() && t > 0.0) {
        return Err(InjectError::InvalidConfig(format!(
            "temperature {t} must be positive"
        )));
    }
    Ok(())
}

fn check_ranks(src: &[usize], target: &[usize]) -> Result<(), InjectError> {
    if src.len() != target.len() {
        return Err(InjectError::RankMismatch {
            src: src.to_vec(),
            target: target.to_vec(),
        });
    }
    check_shape(target)?;
    Ok(())
}

/// Output of [`center_crop`]: the cropped tensor and, per element, whether
/// it was copied from the source (`true`) or zero-filled padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Cropped<T> {
    pub tensor: Tensor<T>,
    pub overlap: Vec<bool>,
}

/// Centered window of `src` in `target` shape.
///
/// Per dimension with source size `n` and target size `m`: shrinking copies
/// the window starting at `(n - m) / 2`; growing places the source at offset
/// `(m - n) / 2` and zero-fills around it.
pub fn center_crop<T: Scalar>(src: &Tensor<T>, target: &[usize]) -> Result<Cropped<T>, InjectError> {
    check_ranks(src.shape(), target)?;
    // Signed shift from target index to source index, per dimension.
    let shift: Vec<isize> = src
        .shape()
        .iter()
        .zip(target)
        .map(|(&n, &m)| {
            if m <= n {
                ((n - m) / 2) as isize
            } else {
                -(((m - n) / 2) as isize)
            }
        })
        .collect();
    let src_strides = crate::tensor::strides(src.shape());
    let total: usize = target.iter().product();
    let mut data = Vec::with_capacity(total);
    let mut overlap = Vec::with_capacity(total);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..total {
        let mut flat = 0usize;
        let mut inside = true;
        for d in 0..target.len() {
            let s = idx[d] as isize + shift[d];
            if s < 0 || s as usize >= src.shape()[d] {
                inside = false;
                break;
            }
            flat += s as usize * src_strides[d];
        }
        if inside {
            data.push(src.data()[flat]);
        } else {
            data.push(T::zero());
        }
        overlap.push(inside);
        advance(&mut idx, target);
    }
    Ok(Cropped {
        tensor: Tensor::new(target.to_vec(), data)?,
        overlap,
    })
}

/// Multilinear resize with aligned endpoints.
///
/// Target index `j` of a dimension resized from `n` to `m` samples the source
/// at `j·(n-1)/(m-1)`, or at the midpoint `(n-1)/2` when `m == 1`. Applied
/// one dimension at a time; dimensions whose size is unchanged are skipped,
/// so a same-shape resize returns the source bit for bit.
pub fn resize<T: Scalar>(src: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>, InjectError> {
    check_ranks(src.shape(), target)?;
    let mut shape = src.shape().to_vec();
    let mut data = src.data().to_vec();
    for axis in 0..shape.len() {
        if shape[axis] != target[axis] {
            data = resize_axis(&data, &shape, axis, target[axis]);
            shape[axis] = target[axis];
        }
    }
    Ok(Tensor::new(shape, data)?)
}

fn resize_axis<T: Scalar>(data: &[T], shape: &[usize], axis: usize, m: usize) -> Vec<T> {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps: Vec<(usize, usize, f64)> = (0..m)
        .map(|j| {
            let coord = if m > 1 {
                (j * (n - 1)) as f64 / (m - 1) as f64
            } else {
                (n - 1) as f64 / 2.0
            };
            let i0 = (coord.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, coord - i0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(outer * m * inner);
    for o in 0..outer {
        let base = o * n * inner;
        for &(i0, i1, frac) in &taps {
            let frac_t = T::from_f64(frac);
            for k in 0..inner {
                let v0 = data[base + i0 * inner + k];
                if frac == 0.0 || i0 == i1 {
                    out.push(v0);
                } else {
                    let v1 = data[base + i1 * inner + k];
                    out.push(lerp(v0, v1, frac_t));
                }
            }
        }
    }
    out
}

/// `a + (b - a)·t`, kept within `[min(a, b), max(a, b)]` against rounding.
#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    let v = a + (b - a) * t;
    v.max(a.min(b)).min(a.max(b))
}

/// Blend of [`center_crop`] and [`resize`] into `target` shape.
pub fn combo_injection<T: Scalar>(
    src: &Tensor<T>,
    target: &[usize],
    lambda: f64,
) -> Result<Tensor<T>, InjectError> {
    check_lambda(lambda)?;
    check_ranks(src.shape(), target)?;
    if src.shape() == target {
        return Ok(src.clone());
    }
    let Cropped { tensor: a, overlap } = center_crop(src, target)?;
    let mut b = resize(src, target)?;
    let lam = T::from_f64(lambda);
    let one_minus = T::from_f64(1.0 - lambda);
    for ((x, &av), &inside) in b.data_mut().iter_mut().zip(a.data()).zip(&overlap) {
        if inside {
            *x = lam * av + one_minus * *x;
        }
    }
    Ok(b)
}

/// Softmax of `scores / temperature`.
pub fn softmax_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>, InjectError> {
    check_temperature(temperature)?;
    if scores.is_empty() {
        return Err(InjectError::NoCandidates);
    }
    let scaled: Vec<f64> = scores.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax-weighted sum of same-shape candidates, weighted by their scores.
pub fn softmax_mix<T: Scalar>(
    candidates: &[(Tensor<T>, f64)],
    temperature: f64,
) -> Result<Tensor<T>, InjectError> {
    let (first, _) = candidates.first().ok_or(InjectError::NoCandidates)?;
    for (t, _) in &candidates[1..] {
        if t.shape() != first.shape() {
            return Err(InjectError::ShapeMismatch(
                first.shape().to_vec(),
                t.shape().to_vec(),
            ));
        }
    }
    let scores: Vec<f64> = candidates.iter().map(|(_, z)| *z).collect();
    let weights = softmax_weights(&scores, temperature)?;
    let w0 = T::from_f64(weights[0]);
    let mut out = first.map(|v| w0 * v);
    for ((t, _), &w) in candidates[1..].iter().zip(&weights[1..]) {
        let w = T::from_f64(w);
        for (acc, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *acc = *acc + w * v;
        }
    }
    Ok(out)
}
