use super::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Per-channel batch statistics (biased variance) of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of values each channel's statistics were computed over.
    pub count: usize,
}

/// Exponential running estimates used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Folds one batch into the running estimates, using the unbiased
    /// variance of the batch.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * stats.mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * stats.var[c] * correction;
        }
    }
}

/// `(batch, channels, values per channel per example)` for a `[N, C, ...]` shape.
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape {
            op: "batch_norm",
            left: shape.to_vec(),
            right: vec![],
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub(crate) fn compute_stats(data: &[f64], n: usize, c: usize, inner: usize) -> BatchStats {
    let count = n * inner;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals = || (0..n).flat_map(move |b| data[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter());
        let mu = vals().sum::<f64>() / count as f64;
        mean[ch] = mu;
        var[ch] = vals().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
    }
    BatchStats { mean, var, count }
}

/// Normalizes with the given per-channel mean/variance and applies the affine
/// transform. Returns the output and the normalized (pre-affine) values.
pub(crate) fn normalize(
    data: &[f64],
    (n, c, inner): (usize, usize, usize),
    mean: &[f64],
    var: &[f64],
    scale: &[f64],
    shift: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; data.len()];
    let mut xhat = vec![0.0; data.len()];
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
            let range = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            for i in range {
                let z = (data[i] - mean[ch]) * inv;
                xhat[i] = z;
                out[i] = scale[ch] * z + shift[ch];
            }
        }
    }
    (out, xhat)
}

fn check_affine(c: usize, scale: &[f64], shift: &[f64], running: &RunningStats) -> Result<()> {
    for (what, len) in [
        ("batch_norm scale", scale.len()),
        ("batch_norm shift", shift.len()),
        ("batch_norm running stats", running.channels()),
    ] {
        if len != c {
            return Err(Error::DimMismatch {
                what: what.into(),
                expected: c,
                found: len,
            });
        }
    }
    Ok(())
}

/// Batch normalization over every axis except the channel axis (axis 1).
///
/// Train mode normalizes by the batch statistics and folds them into
/// `running`; eval mode normalizes by `running` and leaves it untouched.
pub fn batch_norm(
    input: &Tensor,
    scale: &[f64],
    shift: &[f64],
    running: &mut RunningStats,
    mode: NormMode,
) -> Result<Tensor> {
    let layout = channel_layout(input.shape())?;
    check_affine(layout.1, scale, shift, running)?;
    let out = match mode {
        NormMode::Train => {
            if layout.0 < 2 {
                return Err(Error::BatchTooSmall(layout.0));
            }
            let stats = compute_stats(input.data(), layout.0, layout.1, layout.2);
            let (out, _) = normalize(input.data(), layout, &stats.mean, &stats.var, scale, shift);
            running.update(&stats);
            out
        }
        NormMode::Eval => {
            normalize(input.data(), layout, &running.mean, &running.var, scale, shift).0
        }
    };
    Tensor::new(input.shape(), out)
}
