//! Hierarchical posterior estimator: simulated training sets, the two
//! likelihood losses, the atomic proposal correction and the multi-round
//! training loop.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{AggregatorKind, ConditionalFlow, DeepSet, FlowCache, FlowConfig};
use crate::model::{
    derive_seed, in_support, prior_log_density, sample_local, sample_prior, seeded_rng, ObservationBundle, PriorSpec,
    Rng, SimRecord, SimulatedDataset, Simulator, Theta,
};
use crate::optim::{clip_norm, Adam};

/// Largest tolerated fraction of failed simulations in one round.
pub const MAX_FAILURE_RATE: f64 = 0.2;
/// Redraws allowed when a proposal sample falls outside the prior box.
pub const MAX_PROPOSAL_TRIES: usize = 1000;
const MAX_SIM_ATTEMPTS: usize = 100;

const TAG_INIT: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_ROUND: u64 = 3;

/// Affine map to zero mean and unit variance per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Moments of the uniform distribution on the box.
    pub fn from_box(bounds: &[(f64, f64)]) -> Self {
        Self {
            mean: bounds.iter().map(|(l, u)| 0.5 * (l + u)).collect(),
            scale: bounds.iter().map(|(l, u)| (u - l) / 12f64.sqrt()).collect(),
        }
    }

    /// Empirical moments; coordinates without spread keep unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for i in 0..dim {
                sum[i] += r[i];
                sq[i] += r[i] * r[i];
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                if var.sqrt() > 1e-12 * (1.0 + m.abs()) {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    /// `sum log scale`, the log-Jacobian of `invert`.
    pub fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}

/// Architecture of the two flows and the set aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub beta_flow: FlowConfig,
    pub alpha_flow: FlowConfig,
    pub aggregator: AggregatorKind,
}

impl ModelConfig {
    /// Linear spline flows and mean aggregation.
    pub fn toy() -> Self {
        Self {
            beta_flow: FlowConfig::linear_spline(),
            alpha_flow: FlowConfig::linear_spline(),
            aggregator: AggregatorKind::Mean,
        }
    }

    /// Masked autoregressive flows and mean aggregation.
    pub fn neural_mass() -> Self {
        Self {
            beta_flow: FlowConfig::maf(),
            alpha_flow: FlowConfig::maf(),
            aggregator: AggregatorKind::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.beta_flow.validate()?;
        self.alpha_flow.validate()
    }
}

/// `q(beta | x0, f(X))` and `q(alpha | beta, x0)` with their aggregator and
/// standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HnpeModel {
    pub prior: PriorSpec,
    pub n_extra: usize,
    pub obs_dim: usize,
    pub config: ModelConfig,
    pub alpha_std: Standardizer,
    pub beta_std: Standardizer,
    pub obs_std: Standardizer,
    pub q_beta: ConditionalFlow,
    pub q_alpha: ConditionalFlow,
    pub aggregator: DeepSet,
}

/// A record moved to standardized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub x0: Vec<f64>,
    pub members: Vec<Vec<f64>>,
    pub log_prior: f64,
}

/// Which objective a round minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LossMode {
    /// Negative log-likelihood `L_alpha + L_beta`.
    MaximumLikelihood,
    /// Atomic proposal correction over the joint `(alpha, beta)` with
    /// `n_atoms` atoms drawn from the batch.
    Atomic { n_atoms: usize },
}

/// Loss of one batch split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl HnpeModel {
    pub fn new(
        prior: PriorSpec,
        n_extra: usize,
        obs_dim: usize,
        config: ModelConfig,
        obs_std: Standardizer,
        rng: &mut Rng,
    ) -> Result<Self> {
        prior.validate()?;
        config.validate()?;
        if obs_dim == 0 || obs_std.dim() != obs_dim {
            return Err(Error::Config(format!(
                "observation dimension {obs_dim} incompatible with standardizer of size {}",
                obs_std.dim()
            )));
        }
        let aggregator = DeepSet::new(config.aggregator.clone(), obs_dim, rng);
        let embed_dim = if n_extra > 0 { aggregator.output_dim() } else { 0 };
        let q_beta = ConditionalFlow::new(prior.global_dim(), obs_dim + embed_dim, config.beta_flow.clone(), rng)?;
        let q_alpha = ConditionalFlow::new(
            prior.local_dim(),
            prior.global_dim() + obs_dim,
            config.alpha_flow.clone(),
            rng,
        )?;
        Ok(Self {
            alpha_std: Standardizer::from_box(&prior.local_bounds()),
            beta_std: Standardizer::from_box(&prior.global_bounds()),
            prior,
            n_extra,
            obs_dim,
            config,
            obs_std,
            q_beta,
            q_alpha,
            aggregator,
        })
    }

    pub fn n_params(&self) -> usize {
        self.q_beta.n_params() + self.q_alpha.n_params() + self.aggregator.n_params()
    }

    /// Index ranges of `(q_beta, q_alpha, aggregator)` in the flat layout.
    pub fn param_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.q_beta.n_params();
        let b = a + self.q_alpha.n_params();
        [0..a, a..b, b..b + self.aggregator.n_params()]
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.q_beta.params.clone();
        p.extend_from_slice(&self.q_alpha.params);
        p.extend_from_slice(&self.aggregator.params);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let [rb, ra, rg] = self.param_ranges();
        self.q_beta.params.copy_from_slice(&p[rb]);
        self.q_alpha.params.copy_from_slice(&p[ra]);
        self.aggregator.params.copy_from_slice(&p[rg]);
    }

    fn check_bundle(&self, bundle: &ObservationBundle) -> Result<()> {
        if bundle.n_extra() != self.n_extra {
            return Err(Error::ExtraCountMismatch {
                expected: self.n_extra,
                got: bundle.n_extra(),
            });
        }
        if bundle.x0.len() != self.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim,
                got: bundle.x0.len(),
            });
        }
        if let Some(bad) = bundle.extra.iter().find(|x| x.len() != self.obs_dim) {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim,
                got: bad.len(),
            });
        }
        Ok(())
    }

    fn beta_context_std(&self, x0: &[f64], members: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut ctx = x0.to_vec();
        if self.n_extra > 0 {
            ctx.extend(self.aggregator.embed(members)?.value);
        }
        Ok(ctx)
    }

    /// Conditioning vector of `q_beta` for a bundle.
    pub fn beta_context(&self, bundle: &ObservationBundle) -> Result<Vec<f64>> {
        self.check_bundle(bundle)?;
        let members: Vec<Vec<f64>> = bundle.extra.iter().map(|x| self.obs_std.apply(x)).collect();
        self.beta_context_std(&self.obs_std.apply(&bundle.x0), &members)
    }

    fn alpha_context_std(beta: &[f64], x0: &[f64]) -> Vec<f64> {
        let mut c = beta.to_vec();
        c.extend_from_slice(x0);
        c
    }

    /// `log q(beta | x0, f(X))` in the original parameter units.
    pub fn log_prob_beta(&self, beta: &[f64], bundle: &ObservationBundle) -> Result<f64> {
        let ctx = self.beta_context(bundle)?;
        Ok(self.q_beta.log_prob(&self.beta_std.apply(beta), &ctx)? - self.beta_std.log_scale_sum())
    }

    /// `log q(alpha | beta, x0)` in the original parameter units.
    pub fn log_prob_alpha(&self, alpha: &[f64], beta: &[f64], bundle: &ObservationBundle) -> Result<f64> {
        self.check_bundle(bundle)?;
        let ctx = Self::alpha_context_std(&self.beta_std.apply(beta), &self.obs_std.apply(&bundle.x0));
        Ok(self.q_alpha.log_prob(&self.alpha_std.apply(alpha), &ctx)? - self.alpha_std.log_scale_sum())
    }

    /// Joint log density `log q(beta | x0, X) + log q(alpha | beta, x0)`.
    pub fn log_prob(&self, theta: &Theta, bundle: &ObservationBundle) -> Result<f64> {
        Ok(self.log_prob_beta(&theta.beta, bundle)? + self.log_prob_alpha(&theta.alpha, &theta.beta, bundle)?)
    }

    /// `beta ~ q(. | x0, f(X))`, then `alpha ~ q(. | beta, x0)`.
    pub fn sample(&self, bundle: &ObservationBundle, n: usize, rng: &mut Rng) -> Result<Vec<Theta>> {
        let ctx = self.beta_context(bundle)?;
        let x0 = self.obs_std.apply(&bundle.x0);
        self.sample_with_context(&ctx, &x0, n, rng)
    }

    fn sample_with_context(&self, beta_ctx: &[f64], x0_std: &[f64], n: usize, rng: &mut Rng) -> Result<Vec<Theta>> {
        let betas = self.q_beta.sample(n, beta_ctx, rng)?;
        betas
            .into_iter()
            .map(|b| {
                let a = self
                    .q_alpha
                    .sample(1, &Self::alpha_context_std(&b, x0_std), rng)?
                    .remove(0);
                Ok(Theta::new(self.alpha_std.invert(&a), self.beta_std.invert(&b)))
            })
            .collect()
    }

    /// Moves a dataset to standardized coordinates.
    pub fn prepare(&self, data: &SimulatedDataset) -> Result<Vec<PreparedRecord>> {
        data.records
            .iter()
            .map(|r| {
                self.check_bundle(&ObservationBundle {
                    x0: r.x0.clone(),
                    extra: r.extra.clone(),
                })?;
                Ok(PreparedRecord {
                    alpha: self.alpha_std.apply(&r.theta0.alpha),
                    beta: self.beta_std.apply(&r.theta0.beta),
                    x0: self.obs_std.apply(&r.x0),
                    members: r.extra.iter().map(|x| self.obs_std.apply(x)).collect(),
                    log_prior: prior_log_density(&self.prior, &r.theta0)?,
                })
            })
            .collect()
    }

    /// Freezes the model on an observed bundle.
    pub fn condition(&self, observed: &ObservationBundle) -> Result<HierarchicalPosterior> {
        HierarchicalPosterior::new(self.clone(), observed.clone())
    }
}

/// Batch of `beta` contexts; member embeddings are computed in one pass
/// over all members of the batch.
fn batch_contexts(model: &HnpeModel, batch: &[&PreparedRecord]) -> Result<Vec<Vec<f64>>> {
    if model.n_extra == 0 {
        return Ok(batch.iter().map(|r| r.x0.clone()).collect());
    }
    let sets: Vec<&[Vec<f64>]> = batch.iter().map(|r| r.members.as_slice()).collect();
    let emb = model.aggregator.embed_batch(&sets)?;
    Ok(batch
        .iter()
        .zip(emb)
        .map(|(r, e)| {
            let mut c = r.x0.clone();
            c.extend(e.value);
            c
        })
        .collect())
}

/// `L_alpha = -mean log q(alpha_j | beta_j, x0_j)`.
pub fn loss_alpha(model: &HnpeModel, batch: &[PreparedRecord]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut cache = FlowCache::default();
    let total: f64 = batch
        .iter()
        .map(|r| {
            let ctx = HnpeModel::alpha_context_std(&r.beta, &r.x0);
            model.q_alpha.log_prob_cached(&r.alpha, &ctx, &mut cache)
        })
        .sum();
    Ok(-total / batch.len() as f64 + model.alpha_std.log_scale_sum())
}

/// `L_beta = -mean log q(beta_j | x0_j, f(X_j))`.
pub fn loss_beta(model: &HnpeModel, batch: &[PreparedRecord]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let refs: Vec<&PreparedRecord> = batch.iter().collect();
    let ctxs = batch_contexts(model, &refs)?;
    let mut cache = FlowCache::default();
    let total: f64 = batch
        .iter()
        .zip(&ctxs)
        .map(|(r, c)| model.q_beta.log_prob_cached(&r.beta, c, &mut cache))
        .sum();
    Ok(-total / batch.len() as f64 + model.beta_std.log_scale_sum())
}

/// Loss of a batch and, when `grad` is given, its gradient accumulated in
/// the flat layout of [`HnpeModel::params`].
pub fn batch_loss(
    model: &HnpeModel,
    batch: &[&PreparedRecord],
    mode: LossMode,
    rng: &mut Rng,
    mut grad: Option<&mut [f64]>,
) -> Result<LossParts> {
    let m = batch.len();
    if m == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let [rb, ra, rg] = model.param_ranges();
    let learned = model.aggregator.n_params() > 0 && model.n_extra > 0;
    let ctxs = batch_contexts(model, batch)?;
    let obs_dim = model.obs_dim;
    let mut cb = FlowCache::default();
    let mut ca = FlowCache::default();
    let mut parts = LossParts::default();
    let inv_m = 1.0 / m as f64;

    match mode {
        LossMode::MaximumLikelihood => {
            for (r, ctx) in batch.iter().zip(&ctxs) {
                let actx = HnpeModel::alpha_context_std(&r.beta, &r.x0);
                let lb = model.q_beta.log_prob_cached(&r.beta, ctx, &mut cb);
                let la = model.q_alpha.log_prob_cached(&r.alpha, &actx, &mut ca);
                parts.beta -= lb * inv_m;
                parts.alpha -= la * inv_m;
                if let Some(g) = grad.as_deref_mut() {
                    let mut gctx = vec![0.0; ctx.len()];
                    model
                        .q_beta
                        .backward_cached(&cb, -inv_m, &mut g[rb.clone()], learned.then_some(&mut gctx[..]));
                    model.q_alpha.backward_cached(&ca, -inv_m, &mut g[ra.clone()], None);
                    if learned {
                        model
                            .aggregator
                            .backward(&r.members, &gctx[obs_dim..], &mut g[rg.clone()])?;
                    }
                }
            }
            parts.alpha += model.alpha_std.log_scale_sum();
            parts.beta += model.beta_std.log_scale_sum();
        }
        LossMode::Atomic { n_atoms } => {
            let k = n_atoms.clamp(1, m);
            let mut cbs = vec![FlowCache::default(); k];
            let mut cas = vec![FlowCache::default(); k];
            for (j, ctx) in ctxs.iter().enumerate() {
                let mut atoms = vec![j];
                if k > 1 {
                    atoms.extend(
                        sample_indices(rng, m - 1, k - 1)
                            .into_iter()
                            .map(|i| if i >= j { i + 1 } else { i }),
                    );
                }
                let mut logits = Vec::with_capacity(k);
                let mut split = (0.0, 0.0);
                for (slot, &a) in atoms.iter().enumerate() {
                    let atom = batch[a];
                    let actx = HnpeModel::alpha_context_std(&atom.beta, &batch[j].x0);
                    let lb = model.q_beta.log_prob_cached(&atom.beta, ctx, &mut cbs[slot]);
                    let la = model.q_alpha.log_prob_cached(&atom.alpha, &actx, &mut cas[slot]);
                    if slot == 0 {
                        split = (la, lb);
                    }
                    logits.push(lb + la - atom.log_prior);
                }
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = weights.iter().sum();
                let loss_j = -logits[0] + mx + z.ln();
                parts.total += loss_j * inv_m;
                parts.alpha -= split.0 * inv_m;
                parts.beta -= split.1 * inv_m;
                if let Some(g) = grad.as_deref_mut() {
                    let mut gctx = vec![0.0; ctx.len()];
                    for slot in 0..k {
                        let coef = (weights[slot] / z - if slot == 0 { 1.0 } else { 0.0 }) * inv_m;
                        model.q_beta.backward_cached(
                            &cbs[slot],
                            coef,
                            &mut g[rb.clone()],
                            learned.then_some(&mut gctx[..]),
                        );
                        model
                            .q_alpha
                            .backward_cached(&cas[slot], coef, &mut g[ra.clone()], None);
                    }
                    if learned {
                        model
                            .aggregator
                            .backward(&batch[j].members, &gctx[obs_dim..], &mut g[rg.clone()])?;
                    }
                }
            }
            parts.alpha += model.alpha_std.log_scale_sum();
            parts.beta += model.beta_std.log_scale_sum();
            return Ok(parts);
        }
    }
    parts.total = parts.alpha + parts.beta;
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rounds: usize,
    pub sims_per_round: usize,
    pub n_atoms: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Gradient norm ceiling; zero disables clipping.
    pub clip_norm: f64,
    /// Train later rounds on every simulation so far rather than only the
    /// current round's.
    pub accumulate_rounds: bool,
    /// Apply the atomic proposal correction in rounds after the first.
    pub proposal_correction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 100,
            rounds: 1,
            sims_per_round: 10_000,
            n_atoms: 10,
            validation_fraction: 0.1,
            patience: 20,
            max_epochs: 500,
            clip_norm: 5.0,
            accumulate_rounds: true,
            proposal_correction: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.rounds == 0 || self.sims_per_round == 0 {
            return bad("batch_size, rounds and sims_per_round must be positive");
        }
        if self.n_atoms == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("n_atoms, patience and max_epochs must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundHistory {
    pub round: usize,
    pub mode: LossMode,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
}

fn mean_loss(
    model: &HnpeModel,
    data: &[PreparedRecord],
    idx: &[usize],
    batch_size: usize,
    mode: LossMode,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size) {
        let batch: Vec<&PreparedRecord> = chunk.iter().map(|&i| &data[i]).collect();
        total += batch_loss(model, &batch, mode, &mut rng, None)?.total * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Adam on the summed loss with early stopping on a held-out split. The
/// model ends with the best-validation parameters, also when an error is
/// returned.
pub fn train_round(
    model: &mut HnpeModel,
    data: &[PreparedRecord],
    config: &TrainConfig,
    mode: LossMode,
    round: usize,
    seed: u64,
) -> Result<RoundHistory> {
    config.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid("training needs at least two records"));
    }
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((data.len() as f64 * config.validation_fraction).round() as usize).clamp(1, data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_seed = derive_seed(seed, &[0]);

    let mut params = model.params();
    let mut best = params.clone();
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut grad = vec![0.0; params.len()];
    let initial = mean_loss(model, data, val_idx, config.batch_size, mode, val_seed)?;
    let mut history = RoundHistory {
        round,
        mode,
        n_train: train_idx.len(),
        n_val,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: initial,
        initial_val_loss: initial,
    };
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "initial validation loss {initial} in round {round}"
        )));
    }
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut train_total = 0.0;
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<&PreparedRecord> = chunk.iter().map(|&i| &data[i]).collect();
            grad.fill(0.0);
            let parts = batch_loss(model, &batch, mode, &mut rng, Some(&mut grad))?;
            if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                model.set_params(&best);
                return Err(Error::NonFiniteLoss(format!(
                    "training loss {} at epoch {epoch} of round {round}",
                    parts.total
                )));
            }
            train_total += parts.total * chunk.len() as f64;
            if config.clip_norm > 0.0 {
                clip_norm(&mut grad, config.clip_norm);
            }
            opt.step(&mut params, &grad);
            model.set_params(&params);
        }
        let val = mean_loss(model, data, val_idx, config.batch_size, mode, val_seed)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: train_total / train_idx.len() as f64,
            val_loss: val,
        });
        if !val.is_finite() {
            model.set_params(&best);
            return Err(Error::NonFiniteLoss(format!(
                "validation loss {val} at epoch {epoch} of round {round}"
            )));
        }
        if val < history.best_val_loss {
            history.best_val_loss = val;
            history.best_epoch = epoch;
            best.copy_from_slice(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.set_params(&best);
    Ok(history)
}

/// A trained model frozen on an observed bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalPosterior {
    pub model: HnpeModel,
    pub observed: ObservationBundle,
    beta_context: Vec<f64>,
    x0_std: Vec<f64>,
}

impl HierarchicalPosterior {
    pub fn new(model: HnpeModel, observed: ObservationBundle) -> Result<Self> {
        let beta_context = model.beta_context(&observed)?;
        let x0_std = model.obs_std.apply(&observed.x0);
        Ok(Self {
            model,
            observed,
            beta_context,
            x0_std,
        })
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<Theta>> {
        self.model.sample_with_context(&self.beta_context, &self.x0_std, n, rng)
    }

    pub fn log_prob(&self, theta: &Theta) -> Result<f64> {
        self.model.log_prob(theta, &self.observed)
    }
}

/// Samples `n` parameter pairs from the posterior given a bundle.
pub fn posterior_sample(model: &HnpeModel, bundle: &ObservationBundle, n: usize, rng: &mut Rng) -> Result<Vec<Theta>> {
    model.sample(bundle, n, rng)
}

/// Distribution of `(alpha0, beta)` for one round's simulations.
#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Prior,
    Posterior(Box<HierarchicalPosterior>),
}

impl Proposal {
    /// Draw inside the prior box, redrawing up to [`MAX_PROPOSAL_TRIES`] times.
    pub fn sample(&self, prior: &PriorSpec, rng: &mut Rng) -> Result<Theta> {
        match self {
            Proposal::Prior => Ok(sample_prior(prior, rng)),
            Proposal::Posterior(post) => {
                for _ in 0..MAX_PROPOSAL_TRIES {
                    let t = post.sample(1, rng)?.remove(0);
                    if in_support(prior, &t) {
                        return Ok(t);
                    }
                }
                Err(Error::ProposalRejection(MAX_PROPOSAL_TRIES))
            }
        }
    }

    pub fn log_prob(&self, prior: &PriorSpec, theta: &Theta) -> Result<f64> {
        match self {
            Proposal::Prior => prior_log_density(prior, theta),
            Proposal::Posterior(post) => post.log_prob(theta),
        }
    }
}

fn is_simulation_failure(e: &Error) -> bool {
    matches!(e, Error::IntegrationFailure { .. })
}

/// Simulates `x0 = S(alpha0, beta)` and then `x_i = S(alpha_i, beta)` in
/// order from one stream seeded with `seed`. Non-finite outputs count as
/// integration failures.
pub fn simulate_record<S: Simulator + ?Sized>(
    sim: &S,
    theta: &Theta,
    extra_alphas: &[Vec<f64>],
    seed: u64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut rng = seeded_rng(seed);
    let mut run = |alpha: &[f64]| -> Result<Vec<f64>> {
        let x = sim.simulate(alpha, &theta.beta, &mut rng)?;
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::IntegrationFailure { step: 0 })
        }
    };
    let x0 = run(&theta.alpha)?;
    let extra = extra_alphas.iter().map(|a| run(a)).collect::<Result<Vec<_>>>()?;
    Ok((x0, extra))
}

/// One round of training data: `(alpha0, beta)` from the proposal, extra
/// local parameters from the prior, all observations of a record sharing
/// `beta`. Records are independent streams derived from `(seed, round, j)`.
pub fn generate_round_dataset<S: Simulator + ?Sized>(
    sim: &S,
    prior: &PriorSpec,
    proposal: &Proposal,
    n_extra: usize,
    n: usize,
    seed: u64,
    round: usize,
) -> Result<SimulatedDataset> {
    let results: Vec<Result<(SimRecord, usize)>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut failures = 0;
            for attempt in 0..MAX_SIM_ATTEMPTS {
                let tags = [TAG_ROUND, round as u64, j as u64, attempt as u64];
                let mut prng = seeded_rng(derive_seed(seed, &tags));
                let sim_seed = derive_seed(seed, &[TAG_ROUND, round as u64, j as u64, attempt as u64, 1]);
                let theta = proposal.sample(prior, &mut prng)?;
                let extra_alphas: Vec<Vec<f64>> = (0..n_extra).map(|_| sample_local(prior, &mut prng)).collect();
                match simulate_record(sim, &theta, &extra_alphas, sim_seed) {
                    Ok((x0, extra)) => {
                        let record = SimRecord {
                            theta0: theta,
                            x0,
                            extra,
                            extra_alphas,
                            seed: sim_seed,
                        };
                        return Ok((record, failures));
                    }
                    Err(e) if is_simulation_failure(&e) => failures += 1,
                    Err(e) => return Err(e),
                }
            }
            Err(Error::SimulatorFailureRate {
                rate: 1.0,
                limit: MAX_FAILURE_RATE,
            })
        })
        .collect();
    let mut records = Vec::with_capacity(n);
    let mut failures = 0;
    for r in results {
        let (rec, f) = r?;
        failures += f;
        records.push(rec);
    }
    let rate = failures as f64 / (n + failures).max(1) as f64;
    if rate > MAX_FAILURE_RATE {
        return Err(Error::SimulatorFailureRate {
            rate,
            limit: MAX_FAILURE_RATE,
        });
    }
    Ok(SimulatedDataset { records })
}

/// Everything a round produced, handed to the caller for persistence.
pub struct RoundArtifacts<'a> {
    pub round: usize,
    pub dataset: &'a SimulatedDataset,
    pub model: &'a HnpeModel,
    pub history: &'a RoundHistory,
}

/// Result of the multi-round procedure.
#[derive(Debug, Clone)]
pub struct TrainedPosterior {
    pub model: HnpeModel,
    pub histories: Vec<RoundHistory>,
}

/// Multi-round hierarchical posterior estimation. Round 0 samples the
/// prior and is amortized; later rounds sample the current posterior at
/// `observed` and train with the atomic correction.
#[allow(clippy::too_many_arguments)]
pub fn train_multi_round<S: Simulator + ?Sized>(
    sim: &S,
    prior: &PriorSpec,
    model_config: &ModelConfig,
    n_extra: usize,
    observed: Option<&ObservationBundle>,
    config: &TrainConfig,
    seed: u64,
    on_round: impl FnMut(&RoundArtifacts) -> Result<()>,
) -> Result<TrainedPosterior> {
    train_multi_round_with_data(
        sim,
        prior,
        model_config,
        n_extra,
        observed,
        config,
        seed,
        None,
        on_round,
    )
}

/// [`train_multi_round`] with an optional round-0 dataset that replaces the
/// prior simulations of the first round.
#[allow(clippy::too_many_arguments)]
pub fn train_multi_round_with_data<S: Simulator + ?Sized>(
    sim: &S,
    prior: &PriorSpec,
    model_config: &ModelConfig,
    n_extra: usize,
    observed: Option<&ObservationBundle>,
    config: &TrainConfig,
    seed: u64,
    mut initial: Option<SimulatedDataset>,
    mut on_round: impl FnMut(&RoundArtifacts) -> Result<()>,
) -> Result<TrainedPosterior> {
    config.validate()?;
    model_config.validate()?;
    prior.validate()?;
    if config.rounds > 1 && observed.is_none() {
        return Err(Error::Config("more than one round requires an observed bundle".into()));
    }
    if let Some(obs) = observed {
        if obs.n_extra() != n_extra {
            return Err(Error::ExtraCountMismatch {
                expected: n_extra,
                got: obs.n_extra(),
            });
        }
        if obs.x0.len() != sim.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: sim.obs_dim(),
                got: obs.x0.len(),
            });
        }
    }
    if let Some(d) = &initial {
        if d.is_empty() {
            return Err(Error::invalid("initial dataset is empty"));
        }
        if d.n_extra() != n_extra {
            return Err(Error::ExtraCountMismatch {
                expected: n_extra,
                got: d.n_extra(),
            });
        }
        if d.obs_dim() != sim.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: sim.obs_dim(),
                got: d.obs_dim(),
            });
        }
    }

    let mut model: Option<HnpeModel> = None;
    let mut pool = SimulatedDataset::default();
    let mut histories = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let proposal = match (&model, observed) {
            (Some(m), Some(obs)) if round > 0 => Proposal::Posterior(Box::new(m.condition(obs)?)),
            _ => Proposal::Prior,
        };
        let data = match initial.take() {
            Some(d) => d,
            None => generate_round_dataset(sim, prior, &proposal, n_extra, config.sims_per_round, seed, round)?,
        };
        if model.is_none() {
            let rows = data
                .records
                .iter()
                .flat_map(|r| std::iter::once(r.x0.as_slice()).chain(r.extra.iter().map(|x| x.as_slice())));
            let obs_std = Standardizer::fit(rows, sim.obs_dim());
            let mut rng = seeded_rng(derive_seed(seed, &[TAG_INIT]));
            model = Some(HnpeModel::new(
                prior.clone(),
                n_extra,
                sim.obs_dim(),
                model_config.clone(),
                obs_std,
                &mut rng,
            )?);
        }
        let m = model.as_mut().expect("model initialized in round 0");
        if config.accumulate_rounds {
            pool.extend(data.clone());
        } else {
            pool = data.clone();
        }
        let prepared = m.prepare(&pool)?;
        let mode = if round > 0 && config.proposal_correction {
            LossMode::Atomic {
                n_atoms: config.n_atoms,
            }
        } else {
            LossMode::MaximumLikelihood
        };
        let history = train_round(
            m,
            &prepared,
            config,
            mode,
            round,
            derive_seed(seed, &[TAG_TRAIN, round as u64]),
        )?;
        on_round(&RoundArtifacts {
            round,
            dataset: &data,
            model: m,
            history: &history,
        })?;
        histories.push(history);
    }
    Ok(TrainedPosterior {
        model: model.expect("at least one round"),
        histories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::ToySimulator;

    fn toy_model(n_extra: usize, seed: u64) -> HnpeModel {
        let mut cfg = ModelConfig::toy();
        cfg.beta_flow.n_layers = 2;
        cfg.alpha_flow.n_layers = 2;
        HnpeModel::new(
            PriorSpec::toy(),
            n_extra,
            1,
            cfg,
            Standardizer::from_box(&[(0.0, 1.0)]),
            &mut seeded_rng(seed),
        )
        .unwrap()
    }

    fn toy_data(n_extra: usize, n: usize) -> SimulatedDataset {
        generate_round_dataset(
            &ToySimulator::default(),
            &PriorSpec::toy(),
            &Proposal::Prior,
            n_extra,
            n,
            5,
            0,
        )
        .unwrap()
    }

    #[test]
    fn standardizer_round_trip() {
        let s = Standardizer::from_box(&[(0.0, 1.0), (-2.0, 4.0)]);
        let x = [0.3, 1.0];
        let back = s.invert(&s.apply(&x));
        assert!((back[0] - 0.3).abs() < 1e-15 && (back[1] - 1.0).abs() < 1e-15);
        assert!((s.scale[1] - 6.0 / 12f64.sqrt()).abs() < 1e-15);
        let f = Standardizer::fit([[1.0, 5.0].as_slice(), [3.0, 5.0].as_slice()], 2);
        assert_eq!(f.mean, vec![2.0, 5.0]);
        assert_eq!(f.scale, vec![1.0, 1.0]);
    }

    #[test]
    fn dataset_counts_and_shared_beta() {
        let d = toy_data(10, 100);
        assert_eq!(d.len(), 100);
        for r in &d.records {
            assert_eq!(r.extra.len(), 10);
            assert_eq!(r.extra_alphas.len(), 10);
            assert!((r.x0[0] - r.theta0.alpha[0] * r.theta0.beta[0]).abs() < 1e-15);
            for (x, a) in r.extra.iter().zip(&r.extra_alphas) {
                assert!((x[0] - a[0] * r.theta0.beta[0]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(toy_data(3, 50), toy_data(3, 50));
    }

    #[test]
    fn loss_split_and_duplication() {
        let model = toy_model(4, 1);
        let data = model.prepare(&toy_data(4, 20)).unwrap();
        let refs: Vec<&PreparedRecord> = data.iter().collect();
        let parts = batch_loss(&model, &refs, LossMode::MaximumLikelihood, &mut seeded_rng(0), None).unwrap();
        let la = loss_alpha(&model, &data).unwrap();
        let lb = loss_beta(&model, &data).unwrap();
        assert!((parts.alpha - la).abs() < 1e-12 && (parts.beta - lb).abs() < 1e-12);
        assert!((parts.total - la - lb).abs() < 1e-12);
        let doubled: Vec<PreparedRecord> = data.iter().chain(&data).cloned().collect();
        assert!((loss_alpha(&model, &doubled).unwrap() - la).abs() < 1e-12);
    }

    fn fd_check(model: &mut HnpeModel, data: &[PreparedRecord], mode: LossMode) {
        let refs: Vec<&PreparedRecord> = data.iter().collect();
        let mut grad = vec![0.0; model.n_params()];
        batch_loss(model, &refs, mode, &mut seeded_rng(9), Some(&mut grad)).unwrap();
        let base = model.params();
        let h = 1e-6;
        let mut rng = seeded_rng(2);
        for _ in 0..25 {
            let i = rand::Rng::random_range(&mut rng, 0..base.len());
            let mut p = base.clone();
            p[i] += h;
            model.set_params(&p);
            let up = batch_loss(model, &refs, mode, &mut seeded_rng(9), None).unwrap().total;
            p[i] -= 2.0 * h;
            model.set_params(&p);
            let dn = batch_loss(model, &refs, mode, &mut seeded_rng(9), None).unwrap().total;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-3 * fd.abs().max(1e-4),
                "{mode:?} param {i}: {fd} vs {}",
                grad[i]
            );
        }
        model.set_params(&base);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = toy_model(3, 4);
        let mut rng = seeded_rng(1);
        let p: Vec<f64> = model
            .params()
            .iter()
            .map(|v| v + 0.3 * (rand::Rng::random::<f64>(&mut rng) - 0.5))
            .collect();
        model.set_params(&p);
        let data = model.prepare(&toy_data(3, 12)).unwrap();
        fd_check(&mut model, &data, LossMode::MaximumLikelihood);
        fd_check(&mut model, &data, LossMode::Atomic { n_atoms: 4 });
    }

    #[test]
    fn n_mismatch_rejected() {
        let model = toy_model(2, 0);
        let bundle = ObservationBundle::new(vec![0.3], vec![vec![0.2]]).unwrap();
        assert!(matches!(
            model.sample(&bundle, 1, &mut seeded_rng(0)),
            Err(Error::ExtraCountMismatch { .. })
        ));
    }

    #[test]
    fn several_rounds_need_an_observation() {
        let cfg = TrainConfig {
            rounds: 2,
            sims_per_round: 10,
            ..TrainConfig::default()
        };
        let r = train_multi_round(
            &ToySimulator::default(),
            &PriorSpec::toy(),
            &ModelConfig::toy(),
            0,
            None,
            &cfg,
            0,
            |_| Ok(()),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            validation_fraction: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
