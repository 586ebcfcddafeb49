//! Dense networks with optional connectivity masks and manual backprop.
//!
//! Parameters live in a flat slice owned by the caller; the network only
//! records shapes, offsets and masks. Weights are row-major `out x in`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::model::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
    mask: Option<Vec<f64>>,
}

/// Feed-forward network; hidden layers use `activation`, the output layer
/// is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedMlp {
    layers: Vec<Dense>,
    n_params: usize,
    activation: Activation,
}

/// Per-layer activations from the last forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], |v| v.as_slice())
    }
}

impl MaskedMlp {
    fn build(sizes: &[usize], masks: Vec<Option<Vec<f64>>>, activation: Activation) -> Self {
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for (w, mask) in sizes.windows(2).zip(masks) {
            let (n_in, n_out) = (w[0], w[1]);
            layers.push(Dense {
                n_in,
                n_out,
                w_off: off,
                b_off: off + n_in * n_out,
                mask,
            });
            off += n_in * n_out + n_out;
        }
        Self {
            layers,
            n_params: off,
            activation,
        }
    }

    /// Unmasked network with the given layer widths.
    pub fn dense(n_in: usize, hidden: &[usize], n_out: usize, activation: Activation) -> Self {
        let sizes: Vec<usize> = std::iter::once(n_in)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(n_out))
            .collect();
        let masks = vec![None; sizes.len() - 1];
        Self::build(&sizes, masks, activation)
    }

    /// Conditional MADE over `target_dim` autoregressive inputs followed by
    /// `context_dim` unrestricted inputs. Output `d * out_per_dim + p`
    /// depends only on targets `0..d` and the context.
    pub fn made(
        target_dim: usize,
        context_dim: usize,
        hidden_units: usize,
        hidden_layers: usize,
        out_per_dim: usize,
        activation: Activation,
    ) -> Self {
        assert!(target_dim > 0 && hidden_units > 0 && hidden_layers > 0);
        let d = target_dim;
        let in_deg: Vec<usize> = (1..=d).collect();
        let hid_deg: Vec<usize> = (0..hidden_units)
            .map(|u| if d > 1 { u % (d - 1) + 1 } else { 0 })
            .collect();
        let out_deg: Vec<usize> = (0..d * out_per_dim).map(|o| o / out_per_dim + 1).collect();

        let mut masks = Vec::new();
        let n_in = d + context_dim;
        let first: Vec<f64> = (0..hidden_units)
            .flat_map(|h| {
                let hd = hid_deg[h];
                let in_deg = &in_deg;
                (0..n_in).map(move |i| if i >= d || hd >= in_deg[i] { 1.0 } else { 0.0 })
            })
            .collect();
        masks.push(Some(first));
        for _ in 1..hidden_layers {
            let m: Vec<f64> = (0..hidden_units)
                .flat_map(|o| {
                    let od = hid_deg[o];
                    hid_deg.iter().map(move |&id| if od >= id { 1.0 } else { 0.0 })
                })
                .collect();
            masks.push(Some(m));
        }
        let last: Vec<f64> = out_deg
            .iter()
            .flat_map(|&od| hid_deg.iter().map(move |&hd| if od > hd { 1.0 } else { 0.0 }))
            .collect();
        masks.push(Some(last));

        let mut sizes = vec![n_in];
        sizes.extend(std::iter::repeat_n(hidden_units, hidden_layers));
        sizes.push(d * out_per_dim);
        Self::build(&sizes, masks, activation)
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization; the output layer is scaled
    /// by `output_scale` so a small value starts the network near zero.
    pub fn init_params(&self, rng: &mut Rng, output_scale: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let bound = 1.0 / (layer.n_in as f64).sqrt();
            let scale = if l == last { output_scale } else { 1.0 };
            for v in &mut p[layer.w_off..layer.w_off + layer.n_in * layer.n_out] {
                *v = scale * bound * (2.0 * rng.random::<f64>() - 1.0);
            }
            if l != last {
                for v in &mut p[layer.b_off..layer.b_off + layer.n_out] {
                    *v = bound * (2.0 * rng.random::<f64>() - 1.0);
                }
            }
        }
        p
    }

    /// Zeroes the output layer so the network outputs exactly zero.
    pub fn zero_output_layer(&self, params: &mut [f64]) {
        let layer = self.layers.last().expect("at least one layer");
        params[layer.w_off..layer.b_off + layer.n_out].fill(0.0);
    }

    /// Whether weight `(o, i)` of `layer` is active.
    pub fn connected(&self, layer: usize, o: usize, i: usize) -> bool {
        let l = &self.layers[layer];
        l.mask.as_ref().is_none_or(|m| m[o * l.n_in + i] != 0.0)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<'c>(&self, params: &[f64], input: &[f64], cache: &'c mut MlpCache) -> &'c [f64] {
        debug_assert_eq!(input.len(), self.n_in());
        cache.acts.resize(self.layers.len() + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = cache.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let y = &mut rest[0];
            y.clear();
            let w = &params[layer.w_off..layer.w_off + layer.n_in * layer.n_out];
            let b = &params[layer.b_off..layer.b_off + layer.n_out];
            for o in 0..layer.n_out {
                let row = &w[o * layer.n_in..(o + 1) * layer.n_in];
                let mut acc = b[o];
                match &layer.mask {
                    Some(m) => {
                        let mrow = &m[o * layer.n_in..(o + 1) * layer.n_in];
                        for ((wi, mi), xi) in row.iter().zip(mrow).zip(x) {
                            acc += wi * mi * xi;
                        }
                    }
                    None => {
                        for (wi, xi) in row.iter().zip(x) {
                            acc += wi * xi;
                        }
                    }
                }
                y.push(if l == last { acc } else { self.activation.apply(acc) });
            }
        }
        cache.output()
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/doutput`; optionally
    /// writes `dL/dinput` into `grad_input` (overwriting it).
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        grad_output: &[f64],
        grad: &mut [f64],
        grad_input: Option<&mut [f64]>,
    ) {
        let last = self.layers.len() - 1;
        let mut g: Vec<f64> = grad_output.to_vec();
        let mut g_prev: Vec<f64> = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l != last {
                for (gi, &y) in g.iter_mut().zip(&cache.acts[l + 1]) {
                    *gi *= self.activation.derivative_from_output(y);
                }
            }
            let x = &cache.acts[l];
            let need_input = l > 0 || grad_input.is_some();
            g_prev.clear();
            g_prev.resize(layer.n_in, 0.0);
            let w = &params[layer.w_off..layer.w_off + layer.n_in * layer.n_out];
            for o in 0..layer.n_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                grad[layer.b_off + o] += go;
                let gw = &mut grad[layer.w_off + o * layer.n_in..layer.w_off + (o + 1) * layer.n_in];
                let row = &w[o * layer.n_in..(o + 1) * layer.n_in];
                match &layer.mask {
                    Some(m) => {
                        let mrow = &m[o * layer.n_in..(o + 1) * layer.n_in];
                        for i in 0..layer.n_in {
                            gw[i] += go * x[i] * mrow[i];
                            if need_input {
                                g_prev[i] += row[i] * mrow[i] * go;
                            }
                        }
                    }
                    None => {
                        for i in 0..layer.n_in {
                            gw[i] += go * x[i];
                            if need_input {
                                g_prev[i] += row[i] * go;
                            }
                        }
                    }
                }
            }
            std::mem::swap(&mut g, &mut g_prev);
        }
        if let Some(gi) = grad_input {
            gi.copy_from_slice(&g);
        }
    }
}
