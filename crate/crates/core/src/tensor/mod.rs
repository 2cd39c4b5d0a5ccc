//! Dense n-dimensional `f32` tensors with reverse-mode automatic
//! differentiation on a per-pass tape.
//!
//! Values are stored flat in row-major order with explicit shape
//! arithmetic; there is no broadcasting beyond scalar operands. The tape
//! (`Tape`) is rebuilt on every forward pass and supports a guided
//! backward mode that additionally masks negative gradients at ReLU
//! nodes, plus activation/gradient capture at named layers.

mod tape;

pub use tape::{BackwardMode, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("unknown layer name `{0}`")]
    UnknownLayer(String),
    #[error("capture requires a completed backward pass")]
    NoBackward,
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense tensor: a shape and a flat row-major `f32` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-0-like scalar, stored as shape `[1]`.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a plain vector.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn rand_uniform<R: rand::Rng>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Box-Muller normal draws; two uniforms consumed per sample.
    pub fn rand_normal<R: rand::Rng>(shape: &[usize], mean: f32, std: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + std * normal_draw(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }
}

pub fn normal_draw<R: rand::Rng>(rng: &mut R) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Trilinear resampling of a 3-D scalar field onto a new grid.
///
/// Grid corners map onto grid corners (align-corners convention).
pub fn trilinear_resize3(data: &[f32], dims: [usize; 3], out_dims: [usize; 3]) -> Vec<f32> {
    assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
    let mut out = vec![0.0f32; out_dims[0] * out_dims[1] * out_dims[2]];
    let scale = |od: usize, id: usize| -> f64 {
        if od <= 1 {
            0.0
        } else {
            (id as f64 - 1.0) / (od as f64 - 1.0)
        }
    };
    let (s0, s1, s2) = (
        scale(out_dims[0], dims[0]),
        scale(out_dims[1], dims[1]),
        scale(out_dims[2], dims[2]),
    );
    let idx = |i: usize, j: usize, k: usize| (i * dims[1] + j) * dims[2] + k;
    let mut o = 0;
    for i in 0..out_dims[0] {
        let fi = i as f64 * s0;
        let i0 = fi.floor() as usize;
        let i1 = (i0 + 1).min(dims[0] - 1);
        let di = (fi - i0 as f64) as f32;
        for j in 0..out_dims[1] {
            let fj = j as f64 * s1;
            let j0 = fj.floor() as usize;
            let j1 = (j0 + 1).min(dims[1] - 1);
            let dj = (fj - j0 as f64) as f32;
            for k in 0..out_dims[2] {
                let fk = k as f64 * s2;
                let k0 = fk.floor() as usize;
                let k1 = (k0 + 1).min(dims[2] - 1);
                let dk = (fk - k0 as f64) as f32;
                let c000 = data[idx(i0, j0, k0)];
                let c001 = data[idx(i0, j0, k1)];
                let c010 = data[idx(i0, j1, k0)];
                let c011 = data[idx(i0, j1, k1)];
                let c100 = data[idx(i1, j0, k0)];
                let c101 = data[idx(i1, j0, k1)];
                let c110 = data[idx(i1, j1, k0)];
                let c111 = data[idx(i1, j1, k1)];
                let c00 = c000 + (c001 - c000) * dk;
                let c01 = c010 + (c011 - c010) * dk;
                let c10 = c100 + (c101 - c100) * dk;
                let c11 = c110 + (c111 - c110) * dk;
                let c0 = c00 + (c01 - c00) * dj;
                let c1 = c10 + (c11 - c10) * dj;
                out[o] = c0 + (c1 - c0) * di;
                o += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn trilinear_identity_when_dims_match() {
        let data: Vec<f32> = (0..27).map(|v| v as f32).collect();
        let out = trilinear_resize3(&data, [3, 3, 3], [3, 3, 3]);
        assert_eq!(out, data);
    }

    #[test]
    fn trilinear_upsamples_linear_ramp_exactly() {
        // A ramp along one axis stays a ramp under trilinear interpolation.
        let data: Vec<f32> = (0..4).flat_map(|i| vec![i as f32; 4]).collect();
        let out = trilinear_resize3(&data, [4, 2, 2], [7, 2, 2]);
        for i in 0..7 {
            let expect = i as f32 * 0.5;
            assert!((out[i * 4] - expect).abs() < 1e-6);
        }
    }
}
