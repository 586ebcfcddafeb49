//! Elementwise invertible maps parameterized by conditioner outputs.

use serde::{Deserialize, Serialize};

/// Smallest scale an affine layer can reach.
pub const MIN_SCALE: f64 = 1e-3;
/// Smallest probability mass of any spline bin.
pub const MIN_BIN_MASS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TransformKind {
    /// `z = x * scale + shift`.
    Affine,
    /// Monotone piecewise-linear map of `[-bound, bound]` onto itself with
    /// `bins` equal-width bins; identity outside the interval.
    PiecewiseLinear { bins: usize, bound: f64 },
}

impl TransformKind {
    pub fn params_per_dim(&self) -> usize {
        match self {
            TransformKind::Affine => 2,
            TransformKind::PiecewiseLinear { bins, .. } => *bins,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            TransformKind::Affine => Ok(()),
            TransformKind::PiecewiseLinear { bins, bound } => {
                if bins < 2 {
                    return Err(format!("spline needs at least 2 bins, got {bins}"));
                }
                if bins as f64 * MIN_BIN_MASS >= 1.0 {
                    return Err(format!("too many spline bins: {bins}"));
                }
                if !(bound > 0.0 && bound.is_finite()) {
                    return Err(format!("spline bound {bound} must be positive"));
                }
                Ok(())
            }
        }
    }

    /// Returns `(z, log|dz/dx|)`.
    pub fn forward(&self, x: f64, p: &[f64]) -> (f64, f64) {
        match *self {
            TransformKind::Affine => affine_forward(x, p[0], p[1]),
            TransformKind::PiecewiseLinear { bins, bound } => pl_forward(x, &p[..bins], bound),
        }
    }

    /// Returns `(x, log|dx/dz|)`.
    pub fn inverse(&self, z: f64, p: &[f64]) -> (f64, f64) {
        match *self {
            TransformKind::Affine => affine_inverse(z, p[0], p[1]),
            TransformKind::PiecewiseLinear { bins, bound } => pl_inverse(z, &p[..bins], bound),
        }
    }

    /// Given upstream gradients on `z` and on the log-determinant, returns
    /// `dL/dx` and writes `dL/dp` into `gp`.
    pub fn backward(&self, x: f64, p: &[f64], gz: f64, gld: f64, gp: &mut [f64]) -> f64 {
        match *self {
            TransformKind::Affine => affine_backward(x, p[0], p[1], gz, gld, gp),
            TransformKind::PiecewiseLinear { bins, bound } => {
                pl_backward(x, &p[..bins], bound, gz, gld, &mut gp[..bins])
            }
        }
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Offset making the scale exactly one at a zero raw output.
fn scale_offset() -> f64 {
    ((1.0 - MIN_SCALE).exp() - 1.0).ln()
}

pub fn affine_scale(raw: f64) -> f64 {
    softplus(raw + scale_offset()) + MIN_SCALE
}

fn affine_forward(x: f64, shift: f64, raw: f64) -> (f64, f64) {
    let s = affine_scale(raw);
    (x * s + shift, s.ln())
}

fn affine_inverse(z: f64, shift: f64, raw: f64) -> (f64, f64) {
    let s = affine_scale(raw);
    ((z - shift) / s, -s.ln())
}

fn affine_backward(x: f64, shift: f64, raw: f64, gz: f64, gld: f64, gp: &mut [f64]) -> f64 {
    let _ = shift;
    let s = affine_scale(raw);
    let ds = sigmoid(raw + scale_offset());
    gp[0] = gz;
    gp[1] = (gz * x + gld / s) * ds;
    gz * s
}

/// Bin masses from unnormalized logits, each at least `MIN_BIN_MASS`.
pub fn bin_masses(logits: &[f64], out: &mut Vec<f64>) {
    let k = logits.len() as f64;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|&l| (l - m).exp()));
    let total: f64 = out.iter().sum();
    let free = 1.0 - k * MIN_BIN_MASS;
    for q in out.iter_mut() {
        *q = MIN_BIN_MASS + free * *q / total;
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let t: f64 = e.iter().sum();
    e.into_iter().map(|v| v / t).collect()
}

/// Bin index and position inside the bin for `x` in `[-bound, bound]`.
fn locate(x: f64, bins: usize, bound: f64) -> (usize, f64) {
    let t = (x + bound) / (2.0 * bound) * bins as f64;
    let k = (t.floor().max(0.0) as usize).min(bins - 1);
    (k, (t - k as f64).clamp(0.0, 1.0))
}

fn inside(x: f64, bound: f64) -> bool {
    (-bound..=bound).contains(&x)
}

fn pl_forward(x: f64, logits: &[f64], bound: f64) -> (f64, f64) {
    if !inside(x, bound) {
        return (x, 0.0);
    }
    let bins = logits.len();
    let mut q = Vec::with_capacity(bins);
    bin_masses(logits, &mut q);
    let (k, a) = locate(x, bins, bound);
    let cdf: f64 = q[..k].iter().sum::<f64>() + a * q[k];
    (-bound + 2.0 * bound * cdf, (bins as f64 * q[k]).ln())
}

fn pl_inverse(z: f64, logits: &[f64], bound: f64) -> (f64, f64) {
    if !inside(z, bound) {
        return (z, 0.0);
    }
    let bins = logits.len();
    let mut q = Vec::with_capacity(bins);
    bin_masses(logits, &mut q);
    let c = (z + bound) / (2.0 * bound);
    let mut k = 0;
    let mut cum = 0.0;
    while k + 1 < bins && cum + q[k] <= c {
        cum += q[k];
        k += 1;
    }
    let a = ((c - cum) / q[k]).clamp(0.0, 1.0);
    let u = (k as f64 + a) / bins as f64;
    (-bound + 2.0 * bound * u, -(bins as f64 * q[k]).ln())
}

fn pl_backward(x: f64, logits: &[f64], bound: f64, gz: f64, gld: f64, gp: &mut [f64]) -> f64 {
    if !inside(x, bound) {
        gp.fill(0.0);
        return gz;
    }
    let bins = logits.len();
    let s = softmax(logits);
    let free = 1.0 - bins as f64 * MIN_BIN_MASS;
    let (k, a) = locate(x, bins, bound);
    let qk = MIN_BIN_MASS + free * s[k];
    // dL/dq_j
    let gq = |j: usize| -> f64 {
        let dz = 2.0
            * bound
            * if j < k {
                1.0
            } else if j == k {
                a
            } else {
                0.0
            };
        gz * dz + if j == k { gld / qk } else { 0.0 }
    };
    let dot: f64 = (0..bins).map(|j| s[j] * gq(j)).sum();
    for (i, g) in gp.iter_mut().enumerate() {
        *g = free * s[i] * (gq(i) - dot);
    }
    gz * bins as f64 * qk
}
