//! Dense `f64` arrays, a reverse-mode tape over them, and the optimizer
//! primitives used to train both networks.

mod checkpoint;
mod kernels;
mod norm;
mod optim;
mod tape;

pub use checkpoint::{meta_field, parse_meta, ArrayContainer, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use kernels::{conv2d_3x3_forward, maxpool_2x2_forward, pooled_len};
pub use norm::{batch_norm, BatchStats, NormMode, RunningStats};
pub use optim::{nesterov_step, sgd_step, ParamId, Parameter, ParameterStore, StepStats};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm of a model probability.
pub const PROB_EPS: f64 = 1e-7;

/// Row-major dense array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::ValueCount {
                shape: shape.to_vec(),
                expected,
                found: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {:?}",
            input.shape()
        )));
    }
    let n = input.shape[axis];
    let inner: usize = input.shape[axis + 1..].iter().product();
    let outer: usize = input.shape[..axis].iter().product();
    let mut out = input.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let idx = |k: usize| base + k * inner;
            let max = (0..n)
                .map(|k| input.data[idx(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..n {
                let e = (input.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[idx(k)] /= sum;
            }
        }
    }
    Ok(Tensor {
        shape: input.shape.clone(),
        data: out,
    })
}

/// Binary cross-entropy of a single probability against a {0,1} label,
/// with the probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(prediction: f64, label: f64) -> f64 {
    let p = prediction.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    kernels::gemm(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_value_count() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![0.0; 5]),
            Err(Error::ValueCount { expected: 6, found: 5, .. })
        ));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Tensor::matrix(3, 2, vec![1.0, -2.0, 3.5, 0.0, 4.0, 9.0]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &m).unwrap(), m);

        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn sigmoid_symmetry_and_saturation() {
        assert_eq!(sigmoid(0.0), 0.5);
        let low = sigmoid(-30.0);
        assert!(low > 0.0 && low < 1e-6);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
        assert!(sigmoid(-1000.0).is_finite());
    }

    #[test]
    fn softmax_closed_form_and_uniform() {
        let out = softmax(&Tensor::vector(vec![0.0, 2f64.ln()]), 0).unwrap();
        assert!((out.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((out.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let u = softmax(&Tensor::filled(&[5], 0.3), 0).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_along_first_axis_of_matrix() {
        let t = Tensor::matrix(2, 2, vec![0.0, 5.0, 2f64.ln(), 5.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.at2(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.at2(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.at2(0, 1) - 0.5).abs() < 1e-15);
        assert!(softmax(&t, 2).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(1.0 - 1e-12, 1.0) < 1e-6);
        let clamped = bce_loss(1.0, 0.0);
        assert!(clamped.is_finite());
        assert!((clamped - (1.0 / PROB_EPS).ln()).abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_normalizes_and_is_shift_invariant(
                logits in prop::collection::vec(-50.0f64..50.0, 1..12),
                shift in -100.0f64..100.0,
            ) {
                let t = Tensor::vector(logits.clone());
                let p = softmax(&t, 0).unwrap();
                let sum: f64 = p.data().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(p.data().iter().all(|&v| v >= 0.0));
                let shifted = softmax(&Tensor::vector(logits.iter().map(|v| v + shift).collect()), 0).unwrap();
                for (a, b) in p.data().iter().zip(shifted.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn sigmoid_in_open_interval(x in -30.0f64..30.0) {
                let s = sigmoid(x);
                prop_assert!(s > 0.0 && s < 1.0);
            }

            #[test]
            fn bce_finite_everywhere(p in 0.0f64..=1.0, label in 0u8..=1) {
                prop_assert!(bce_loss(p, label as f64).is_finite());
            }
        }
    }
}
