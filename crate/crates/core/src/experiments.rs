//! Experiment drivers for the toy model and the neural mass model.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{dirac_concentration, sinkhorn_divergence, to_unit_box, SinkhornConfig};
use crate::model::{derive_seed, sample_local, sample_prior, seeded_rng, ObservationBundle, PriorSpec, Rng, Theta};
use crate::nmm::NmmSimulator;
use crate::toy::{sample_posterior, Support, ToyPosteriorOracle, ToySimulator};
use crate::trainer::{train_multi_round, HnpeModel, ModelConfig, TrainConfig, TrainedPosterior};

/// Ground truth of the toy joint-posterior figure.
pub const TOY_REFERENCE: (f64, f64) = (0.5, 0.5);

/// Ground truth `(C, mu, sigma)` and gain of the simulated recording.
pub const NMM_REFERENCE: ([f64; 3], f64) = ([135.0, 220.0, 2000.0], 0.0);

const TAG_THETA: u64 = 11;
const TAG_OBS: u64 = 12;

/// Toy bundle with `x0 = alpha0 beta0` and `x_i = alpha_i beta0`,
/// `alpha_i ~ U[0, 1]`.
pub fn toy_bundle(alpha0: f64, beta0: f64, n_extra: usize, rng: &mut Rng) -> Result<ObservationBundle> {
    let extra = (0..n_extra).map(|_| vec![rng.random::<f64>() * beta0]).collect();
    ObservationBundle::new(vec![alpha0 * beta0], extra)
}

/// Ground truth of repetition `rep`, drawn from the prior.
pub fn toy_theta_star(rep: usize, seed: u64) -> (f64, f64) {
    let t = sample_prior(
        &PriorSpec::toy(),
        &mut seeded_rng(derive_seed(seed, &[TAG_THETA, rep as u64])),
    );
    (t.alpha[0], t.beta[0])
}

/// Bundle for repetition `rep`; the extras of a larger `N` extend those of
/// a smaller one.
pub fn toy_repetition_bundle(rep: usize, n_extra: usize, seed: u64) -> Result<ObservationBundle> {
    let (a, b) = toy_theta_star(rep, seed);
    toy_bundle(
        a,
        b,
        n_extra,
        &mut seeded_rng(derive_seed(seed, &[TAG_OBS, rep as u64])),
    )
}

pub fn toy_oracle(bundle: &ObservationBundle) -> Result<ToyPosteriorOracle> {
    let extras: Vec<f64> = bundle.extra.iter().map(|x| x[0]).collect();
    ToyPosteriorOracle::new(bundle.x0[0], &extras)
}

/// Exact posterior draws as `[alpha, beta]` rows.
pub fn analytic_toy_samples(bundle: &ObservationBundle, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let oracle = toy_oracle(bundle)?;
    Ok(sample_posterior(&oracle, n, rng)?
        .into_iter()
        .map(|(a, b)| vec![a, b])
        .collect())
}

pub fn theta_rows(thetas: &[Theta]) -> Vec<Vec<f64>> {
    thetas.iter().map(Theta::to_vec).collect()
}

/// Settings of one toy training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub n_extra: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ToyRun {
    pub fn new(n_extra: usize, sims: usize, rounds: usize, seed: u64) -> Self {
        Self {
            n_extra,
            model: ModelConfig::toy(),
            train: TrainConfig {
                sims_per_round: sims,
                rounds,
                ..TrainConfig::default()
            },
            seed,
        }
    }
}

pub fn train_toy(run: &ToyRun, observed: Option<&ObservationBundle>) -> Result<TrainedPosterior> {
    train_multi_round(
        &ToySimulator::default(),
        &PriorSpec::toy(),
        &run.model,
        run.n_extra,
        observed,
        &run.train,
        run.seed,
        |_| Ok(()),
    )
}

/// Divergence between learned and exact posteriors at a bundle, both
/// clouds of `n` points. The exact sampler shares the generator seed so
/// repeated evaluations differ only through the model.
pub fn toy_divergence(
    model: &HnpeModel,
    bundle: &ObservationBundle,
    n: usize,
    cfg: &SinkhornConfig,
    seed: u64,
) -> Result<f64> {
    let learned = theta_rows(&model.sample(bundle, n, &mut seeded_rng(derive_seed(seed, &[1])))?);
    let exact = analytic_toy_samples(bundle, n, &mut seeded_rng(derive_seed(seed, &[2])))?;
    let r = sinkhorn_divergence(&learned, &exact, cfg)?;
    Ok(r.value)
}

/// Fractions of `[alpha, beta]` rows whose alpha, respectively beta,
/// falls in the exact posterior's marginal support.
pub fn support_mass(rows: &[Vec<f64>], oracle: &ToyPosteriorOracle) -> (f64, f64) {
    let inside = |s: Support, v: f64| match s {
        Support::Interval(lo, hi) => (lo..=hi).contains(&v),
        Support::Point(p) => v == p,
    };
    let n = rows.len().max(1) as f64;
    let a = rows.iter().filter(|r| inside(oracle.alpha_support(), r[0])).count() as f64 / n;
    let b = rows.iter().filter(|r| inside(oracle.beta_support(), r[1])).count() as f64 / n;
    (a, b)
}

/// Divergence of exact posterior draws to the point mass at the truth.
pub fn analytic_concentration(rep: usize, n_extra: usize, n: usize, cfg: &SinkhornConfig, seed: u64) -> Result<f64> {
    let bundle = toy_repetition_bundle(rep, n_extra, seed)?;
    let (a, b) = toy_theta_star(rep, seed);
    let rows = analytic_toy_samples(&bundle, n, &mut seeded_rng(derive_seed(seed, &[3, rep as u64])))?;
    Ok(dirac_concentration(&rows, &[a, b], cfg)?.value)
}

/// Divergence of learned posterior draws to the point mass at the truth.
pub fn learned_concentration(model: &HnpeModel, rep: usize, n: usize, cfg: &SinkhornConfig, seed: u64) -> Result<f64> {
    let bundle = toy_repetition_bundle(rep, model.n_extra, seed)?;
    let (a, b) = toy_theta_star(rep, seed);
    let rows = theta_rows(&model.sample(&bundle, n, &mut seeded_rng(derive_seed(seed, &[4, rep as u64])))?);
    Ok(dirac_concentration(&rows, &[a, b], cfg)?.value)
}

/// Featurized neural mass bundle: `x0` at `(local, gain)`, extras with
/// local parameters from the prior and the same gain.
pub fn nmm_bundle(
    sim: &NmmSimulator,
    local: &[f64],
    gain: f64,
    n_extra: usize,
    seed: u64,
) -> Result<ObservationBundle> {
    let prior = PriorSpec::neural_mass();
    let mut prng = seeded_rng(derive_seed(seed, &[TAG_THETA]));
    let mut srng = seeded_rng(derive_seed(seed, &[TAG_OBS]));
    let beta = [gain];
    let x0 = sim.featurize(&sim.series(local, &beta, &mut srng)?)?;
    let extra = (0..n_extra)
        .map(|_| {
            let a = sample_local(&prior, &mut prng);
            sim.featurize(&sim.series(&a, &beta, &mut srng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    ObservationBundle::new(x0, extra)
}

/// Posterior draws of a neural mass model mapped to the unit box.
pub fn nmm_unit_samples(model: &HnpeModel, bundle: &ObservationBundle, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let rows = theta_rows(&model.sample(bundle, n, &mut seeded_rng(seed))?);
    let prior = &model.prior;
    let bounds: Vec<(f64, f64)> = prior.local_bounds().into_iter().chain(prior.global_bounds()).collect();
    to_unit_box(&rows, &bounds)
}

/// Sample standard deviation of one coordinate.
pub fn std_dev(rows: &[Vec<f64>], k: usize) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    let n = rows.len() as f64;
    let m = rows.iter().map(|r| r[k]).sum::<f64>() / n;
    Ok((rows.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}
