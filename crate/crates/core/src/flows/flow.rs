//! Conditional autoregressive flows with a standard normal base.
//!
//! Each layer is an elementwise transform whose parameters for dimension
//! `d` come from a MADE conditioner that sees dimensions `0..d` and the
//! context. The dimension order is reversed between layers.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::made::{Activation, MaskedMlp, MlpCache};
use super::transforms::TransformKind;
use crate::error::{Error, Result};
use crate::model::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub transform: TransformKind,
    pub n_layers: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl FlowConfig {
    /// Masked affine autoregressive flow: five layers, two hidden layers of 50.
    pub fn maf() -> Self {
        Self {
            transform: TransformKind::Affine,
            n_layers: 5,
            hidden_units: 50,
            hidden_layers: 2,
            activation: Activation::Relu,
        }
    }

    /// Piecewise-linear spline flow with conditioners of two hidden layers of 20.
    pub fn linear_spline() -> Self {
        Self {
            transform: TransformKind::PiecewiseLinear { bins: 10, bound: 3.0 },
            n_layers: 5,
            hidden_units: 20,
            hidden_layers: 2,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate().map_err(Error::Config)?;
        if self.n_layers == 0 || self.hidden_units == 0 || self.hidden_layers == 0 {
            return Err(Error::Config(format!("flow sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlowState {
    config: FlowConfig,
    dim: usize,
    context_dim: usize,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowState", into = "FlowState")]
pub struct ConditionalFlow {
    config: FlowConfig,
    dim: usize,
    context_dim: usize,
    conditioners: Vec<MaskedMlp>,
    offsets: Vec<usize>,
    pub params: Vec<f64>,
}

impl From<ConditionalFlow> for FlowState {
    fn from(f: ConditionalFlow) -> Self {
        Self {
            config: f.config,
            dim: f.dim,
            context_dim: f.context_dim,
            params: f.params,
        }
    }
}

impl TryFrom<FlowState> for ConditionalFlow {
    type Error = Error;

    fn try_from(s: FlowState) -> Result<Self> {
        let mut flow = Self::skeleton(s.dim, s.context_dim, s.config)?;
        if s.params.len() != flow.n_params() {
            return Err(Error::DimensionMismatch {
                expected: flow.n_params(),
                got: s.params.len(),
            });
        }
        flow.params = s.params;
        Ok(flow)
    }
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    h_in: Vec<f64>,
    mlp: MlpCache,
}

/// Scratch space reused across evaluations of one flow.
#[derive(Debug, Clone, Default)]
pub struct FlowCache {
    layers: Vec<LayerCache>,
    input: Vec<f64>,
    z: Vec<f64>,
}

impl ConditionalFlow {
    fn skeleton(dim: usize, context_dim: usize, config: FlowConfig) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::Config("flow dimension must be positive".into()));
        }
        let ppd = config.transform.params_per_dim();
        let mut conditioners = Vec::with_capacity(config.n_layers);
        let mut offsets = Vec::with_capacity(config.n_layers + 1);
        let mut off = 0;
        for _ in 0..config.n_layers {
            let net = MaskedMlp::made(
                dim,
                context_dim,
                config.hidden_units,
                config.hidden_layers,
                ppd,
                config.activation,
            );
            offsets.push(off);
            off += net.n_params();
            conditioners.push(net);
        }
        offsets.push(off);
        Ok(Self {
            config,
            dim,
            context_dim,
            conditioners,
            offsets,
            params: vec![0.0; off],
        })
    }

    /// Random conditioner weights with a near-zero output layer, so the
    /// untrained flow is close to the identity map.
    pub fn new(dim: usize, context_dim: usize, config: FlowConfig, rng: &mut Rng) -> Result<Self> {
        let mut flow = Self::skeleton(dim, context_dim, config)?;
        for (l, net) in flow.conditioners.iter().enumerate() {
            let p = net.init_params(rng, 0.01);
            flow.params[flow.offsets[l]..flow.offsets[l + 1]].copy_from_slice(&p);
        }
        Ok(flow)
    }

    /// Flow whose every layer is exactly the identity.
    pub fn identity(dim: usize, context_dim: usize, config: FlowConfig, rng: &mut Rng) -> Result<Self> {
        let mut flow = Self::new(dim, context_dim, config, rng)?;
        for l in 0..flow.conditioners.len() {
            let (a, b) = (flow.offsets[l], flow.offsets[l + 1]);
            flow.conditioners[l].zero_output_layer(&mut flow.params[a..b]);
        }
        Ok(flow)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.offsets[self.offsets.len() - 1]
    }

    fn check(&self, target: &[f64], context: &[f64]) -> Result<()> {
        if target.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: target.len(),
            });
        }
        if context.len() != self.context_dim {
            return Err(Error::DimensionMismatch {
                expected: self.context_dim,
                got: context.len(),
            });
        }
        Ok(())
    }

    fn layer_params(&self, l: usize) -> &[f64] {
        &self.params[self.offsets[l]..self.offsets[l + 1]]
    }

    /// Runs data to noise, leaving intermediates in `cache`. Returns the
    /// log-determinant; the noise is in `cache.z`.
    fn forward_cached(&self, target: &[f64], context: &[f64], cache: &mut FlowCache) -> f64 {
        let ppd = self.config.transform.params_per_dim();
        let n_layers = self.conditioners.len();
        cache.layers.resize(n_layers, LayerCache::default());
        cache.z.clear();
        cache.z.extend_from_slice(target);
        let mut logdet = 0.0;
        for l in 0..n_layers {
            cache.input.clear();
            cache.input.extend_from_slice(&cache.z);
            cache.input.extend_from_slice(context);
            let lc = &mut cache.layers[l];
            lc.h_in.clear();
            lc.h_in.extend_from_slice(&cache.z);
            let out = self.conditioners[l].forward(self.layer_params(l), &cache.input, &mut lc.mlp);
            for d in 0..self.dim {
                let (z, ld) = self.config.transform.forward(lc.h_in[d], &out[d * ppd..(d + 1) * ppd]);
                cache.z[d] = z;
                logdet += ld;
            }
            if l + 1 < n_layers {
                cache.z.reverse();
            }
        }
        logdet
    }

    /// Maps a target to base noise; returns `(z, log|det dz/dx|)`.
    pub fn forward(&self, target: &[f64], context: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(target, context)?;
        let mut cache = FlowCache::default();
        let ld = self.forward_cached(target, context, &mut cache);
        Ok((cache.z, ld))
    }

    /// Maps base noise to a target; returns `(x, log|det dx/dz|)`.
    pub fn inverse(&self, z: &[f64], context: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check(z, context)?;
        let ppd = self.config.transform.params_per_dim();
        let n_layers = self.conditioners.len();
        let mut h = z.to_vec();
        let mut logdet = 0.0;
        let mut mlp = MlpCache::default();
        let mut input = vec![0.0; self.dim + self.context_dim];
        input[self.dim..].copy_from_slice(context);
        for l in (0..n_layers).rev() {
            if l + 1 < n_layers {
                h.reverse();
            }
            let mut x = vec![0.0; self.dim];
            for d in 0..self.dim {
                input[..self.dim].copy_from_slice(&x);
                let out = self.conditioners[l].forward(self.layer_params(l), &input, &mut mlp);
                let (v, ld) = self.config.transform.inverse(h[d], &out[d * ppd..(d + 1) * ppd]);
                x[d] = v;
                logdet += ld;
            }
            h = x;
        }
        Ok((h, logdet))
    }

    pub fn log_prob(&self, target: &[f64], context: &[f64]) -> Result<f64> {
        self.check(target, context)?;
        let mut cache = FlowCache::default();
        Ok(self.log_prob_cached(target, context, &mut cache))
    }

    pub fn log_prob_cached(&self, target: &[f64], context: &[f64], cache: &mut FlowCache) -> f64 {
        let ld = self.forward_cached(target, context, cache);
        base_log_density(&cache.z) + ld
    }

    /// Log density, accumulating `weight * dlogp/dparams` into `grad` and,
    /// when requested, `weight * dlogp/dcontext` into `grad_context`.
    pub fn log_prob_grad(
        &self,
        target: &[f64],
        context: &[f64],
        weight: f64,
        grad: &mut [f64],
        grad_context: Option<&mut [f64]>,
        cache: &mut FlowCache,
    ) -> f64 {
        let logp = self.log_prob_cached(target, context, cache);
        self.backward_cached(cache, weight, grad, grad_context);
        logp
    }

    /// Backward pass for the evaluation currently held in `cache`.
    pub fn backward_cached(&self, cache: &FlowCache, weight: f64, grad: &mut [f64], grad_context: Option<&mut [f64]>) {
        let ppd = self.config.transform.params_per_dim();
        let n_layers = self.conditioners.len();
        let mut g_h: Vec<f64> = cache.z.iter().map(|z| -weight * z).collect();
        let mut g_ctx = vec![0.0; self.context_dim];
        let mut g_out = vec![0.0; self.dim * ppd];
        let mut g_in = vec![0.0; self.dim + self.context_dim];
        let want_ctx = grad_context.is_some();
        for l in (0..n_layers).rev() {
            if l + 1 < n_layers {
                g_h.reverse();
            }
            let lc = &cache.layers[l];
            let out = lc.mlp.output();
            for d in 0..self.dim {
                let span = d * ppd..(d + 1) * ppd;
                g_h[d] =
                    self.config
                        .transform
                        .backward(lc.h_in[d], &out[span.clone()], g_h[d], weight, &mut g_out[span]);
            }
            let (a, b) = (self.offsets[l], self.offsets[l + 1]);
            let need_input = l > 0 || want_ctx;
            self.conditioners[l].backward(
                &self.params[a..b],
                &lc.mlp,
                &g_out,
                &mut grad[a..b],
                if need_input { Some(&mut g_in) } else { None },
            );
            if need_input {
                for d in 0..self.dim {
                    g_h[d] += g_in[d];
                }
                for (g, v) in g_ctx.iter_mut().zip(&g_in[self.dim..]) {
                    *g += v;
                }
            }
        }
        if let Some(gc) = grad_context {
            for (g, v) in gc.iter_mut().zip(&g_ctx) {
                *g += v;
            }
        }
    }

    pub fn sample(&self, n: usize, context: &[f64], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        if context.len() != self.context_dim {
            return Err(Error::DimensionMismatch {
                expected: self.context_dim,
                got: context.len(),
            });
        }
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
                self.inverse(&z, context).map(|(x, _)| x)
            })
            .collect()
    }

    /// Conditioner index range of layer `l` inside `params`.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }
}

pub fn base_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seeded_rng;

    fn configs() -> Vec<FlowConfig> {
        let mut maf = FlowConfig::maf();
        maf.hidden_units = 12;
        maf.n_layers = 3;
        let mut spline = FlowConfig::linear_spline();
        spline.n_layers = 3;
        spline.hidden_units = 12;
        vec![maf, spline]
    }

    fn randomized(cfg: FlowConfig, dim: usize, ctx: usize, seed: u64) -> ConditionalFlow {
        let mut rng = seeded_rng(seed);
        let mut flow = ConditionalFlow::new(dim, ctx, cfg, &mut rng).unwrap();
        let mut r2 = seeded_rng(seed + 100);
        for (l, net) in flow.conditioners.iter().enumerate() {
            let p = net.init_params(&mut r2, 1.0);
            let range = flow.layer_range(l);
            flow.params[range].copy_from_slice(&p);
        }
        flow
    }

    #[test]
    fn identity_flow_is_standard_normal() {
        for cfg in configs() {
            let flow = ConditionalFlow::identity(2, 1, cfg, &mut seeded_rng(0)).unwrap();
            let x = [0.3, -1.1];
            let lp = flow.log_prob(&x, &[0.5]).unwrap();
            assert!((lp - base_log_density(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_undoes_forward() {
        for cfg in configs() {
            let flow = randomized(cfg, 3, 2, 1);
            let ctx = [0.4, -0.9];
            for x in [[0.1, 0.2, -0.3], [1.5, -2.0, 0.7], [-2.5, 2.5, 0.0]] {
                let (z, ld) = flow.forward(&x, &ctx).unwrap();
                let (back, ild) = flow.inverse(&z, &ctx).unwrap();
                for (a, b) in x.iter().zip(&back) {
                    assert!((a - b).abs() < 1e-8, "{x:?} vs {back:?}");
                }
                assert!((ld + ild).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for cfg in configs() {
            let mut flow = randomized(cfg, 2, 2, 2);
            let x = [0.35, -0.6];
            let ctx = [0.2, 0.9];
            let mut grad = vec![0.0; flow.n_params()];
            let mut gctx = vec![0.0; 2];
            let mut cache = FlowCache::default();
            flow.log_prob_grad(&x, &ctx, 1.0, &mut grad, Some(&mut gctx), &mut cache);
            let h = 1e-6;
            for i in (0..flow.n_params()).step_by(5) {
                let orig = flow.params[i];
                flow.params[i] = orig + h;
                let up = flow.log_prob(&x, &ctx).unwrap();
                flow.params[i] = orig - h;
                let dn = flow.log_prob(&x, &ctx).unwrap();
                flow.params[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "param {i}: {fd} vs {}",
                    grad[i]
                );
            }
            for j in 0..2 {
                let mut c = ctx;
                c[j] += h;
                let up = flow.log_prob(&x, &c).unwrap();
                c[j] -= 2.0 * h;
                let fd = (up - flow.log_prob(&x, &c).unwrap()) / (2.0 * h);
                assert!((fd - gctx[j]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn dimension_errors() {
        let flow = ConditionalFlow::new(2, 1, FlowConfig::maf(), &mut seeded_rng(0)).unwrap();
        assert!(matches!(
            flow.log_prob(&[0.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(flow.log_prob(&[0.0, 0.0], &[]).is_err());
        assert!(flow.sample(3, &[0.0, 1.0], &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let flow = randomized(configs()[1].clone(), 2, 3, 4);
        let json = serde_json::to_string(&flow).unwrap();
        let back: ConditionalFlow = serde_json::from_str(&json).unwrap();
        assert_eq!(flow, back);
    }
}
