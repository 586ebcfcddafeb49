//! Shared domain types: parameter vectors split into local and global parts,
//! uniform box priors, observation bundles, simulated datasets and the
//! simulator interface.
//!
//! All randomness is drawn from an explicitly seeded [`Rng`]. Parallel
//! workers derive independent streams with [`derive_seed`], so results never
//! depend on the number of threads.

use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The generator threaded through every stochastic call.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a master seed with a path of stream tags (round, record, ...) into
/// a new seed. splitmix64 finalizer applied per tag.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x9E37_79B9_7F4A_7C15;
    for &tag in tags {
        state = splitmix(state.wrapping_add(splitmix(tag.wrapping_add(0xD1B5_4A32_D192_ED03))));
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Local,
    Global,
}

/// One named parameter with a uniform prior on `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub role: Role,
}

/// Independent uniform box prior over local and global parameters.
///
/// The local prior does not depend on the global value, so
/// `p(alpha_i | beta) = p(alpha_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(rename = "param")]
    pub params: Vec<ParamSpec>,
}

impl PriorSpec {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self> {
        let prior = Self { params };
        prior.validate()?;
        Ok(prior)
    }

    /// Builds a prior from `(name, lower, upper)` triples.
    pub fn from_bounds(local: &[(&str, f64, f64)], global: &[(&str, f64, f64)]) -> Result<Self> {
        let mk = |role| {
            move |&(name, lower, upper): &(&str, f64, f64)| ParamSpec {
                name: name.to_string(),
                lower,
                upper,
                role,
            }
        };
        let params = local
            .iter()
            .map(mk(Role::Local))
            .chain(global.iter().map(mk(Role::Global)))
            .collect();
        Self::new(params)
    }

    /// `alpha, beta ~ U[0, 1]`.
    pub fn toy() -> Self {
        Self::from_bounds(&[("alpha", 0.0, 1.0)], &[("beta", 0.0, 1.0)]).expect("valid bounds")
    }

    /// Local `(C, mu, sigma)` and global gain `g` of the neural mass model.
    pub fn neural_mass() -> Self {
        Self::from_bounds(
            &[("C", 10.0, 250.0), ("mu", 50.0, 500.0), ("sigma", 0.0, 5000.0)],
            &[("gain", -30.0, 30.0)],
        )
        .expect("valid bounds")
    }

    pub fn validate(&self) -> Result<()> {
        if self.local().next().is_none() || self.global().next().is_none() {
            return Err(Error::Config(
                "prior needs at least one local and one global parameter".into(),
            ));
        }
        for p in &self.params {
            if !(p.lower.is_finite() && p.upper.is_finite() && p.lower < p.upper) {
                return Err(Error::Config(format!(
                    "parameter {} has invalid bounds [{}, {}]",
                    p.name, p.lower, p.upper
                )));
            }
        }
        Ok(())
    }

    pub fn local(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.role == Role::Local)
    }

    pub fn global(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.role == Role::Global)
    }

    pub fn local_bounds(&self) -> Vec<(f64, f64)> {
        self.local().map(|p| (p.lower, p.upper)).collect()
    }

    pub fn global_bounds(&self) -> Vec<(f64, f64)> {
        self.global().map(|p| (p.lower, p.upper)).collect()
    }

    pub fn local_dim(&self) -> usize {
        self.local().count()
    }

    pub fn global_dim(&self) -> usize {
        self.global().count()
    }

    /// Parameter names ordered as `(alpha..., beta...)`.
    pub fn names(&self) -> Vec<String> {
        self.local().chain(self.global()).map(|p| p.name.clone()).collect()
    }

    pub fn log_volume(&self) -> f64 {
        self.params.iter().map(|p| (p.upper - p.lower).ln()).sum()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let prior: PriorSpec = toml::from_str(text).map_err(|e| Error::Config(format!("prior config: {e}")))?;
        prior.validate()?;
        Ok(prior)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("prior config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// A parameter vector split into local (`alpha`) and global (`beta`) parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Theta {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        Self { alpha, beta }
    }

    /// Concatenation `(alpha, beta)`.
    pub fn to_vec(&self) -> Vec<f64> {
        self.alpha.iter().chain(&self.beta).copied().collect()
    }
}

fn draw_box(bounds: impl Iterator<Item = (f64, f64)>, rng: &mut Rng) -> Vec<f64> {
    bounds.map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect()
}

pub fn sample_prior(prior: &PriorSpec, rng: &mut Rng) -> Theta {
    let alpha = sample_local(prior, rng);
    let beta = draw_box(prior.global().map(|p| (p.lower, p.upper)), rng);
    Theta { alpha, beta }
}

/// Draws local parameters from the prior conditional, which ignores `beta`.
pub fn sample_local(prior: &PriorSpec, rng: &mut Rng) -> Vec<f64> {
    draw_box(prior.local().map(|p| (p.lower, p.upper)), rng)
}

pub fn in_support(prior: &PriorSpec, theta: &Theta) -> bool {
    theta
        .alpha
        .iter()
        .zip(prior.local())
        .chain(theta.beta.iter().zip(prior.global()))
        .all(|(&v, p)| v >= p.lower && v <= p.upper)
}

/// `-log(volume)` inside the box, `-inf` outside.
pub fn prior_log_density(prior: &PriorSpec, theta: &Theta) -> Result<f64> {
    check_dims(prior, theta)?;
    if in_support(prior, theta) {
        Ok(-prior.log_volume())
    } else {
        Ok(f64::NEG_INFINITY)
    }
}

pub(crate) fn check_dims(prior: &PriorSpec, theta: &Theta) -> Result<()> {
    if theta.alpha.len() != prior.local_dim() {
        return Err(Error::DimensionMismatch {
            expected: prior.local_dim(),
            got: theta.alpha.len(),
        });
    }
    if theta.beta.len() != prior.global_dim() {
        return Err(Error::DimensionMismatch {
            expected: prior.global_dim(),
            got: theta.beta.len(),
        });
    }
    Ok(())
}

/// A focal observation plus an unordered set of extra observations that
/// share the global parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationBundle {
    pub x0: Vec<f64>,
    pub extra: Vec<Vec<f64>>,
}

impl ObservationBundle {
    pub fn new(x0: Vec<f64>, extra: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = extra.iter().find(|x| x.len() != x0.len()) {
            return Err(Error::DimensionMismatch {
                expected: x0.len(),
                got: bad.len(),
            });
        }
        Ok(Self { x0, extra })
    }

    pub fn n_extra(&self) -> usize {
        self.extra.len()
    }
}

/// One simulated training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub theta0: Theta,
    pub x0: Vec<f64>,
    pub extra: Vec<Vec<f64>>,
    pub extra_alphas: Vec<Vec<f64>>,
    /// Seed of the stream that produced `x0` and then `extra` in order.
    #[serde(default)]
    pub seed: u64,
}

impl SimRecord {
    pub fn bundle(&self) -> ObservationBundle {
        ObservationBundle {
            x0: self.x0.clone(),
            extra: self.extra.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub records: Vec<SimRecord>,
}

impl SimulatedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_extra(&self) -> usize {
        self.records.first().map_or(0, |r| r.extra.len())
    }

    pub fn obs_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.x0.len())
    }

    pub fn extend(&mut self, other: SimulatedDataset) {
        self.records.extend(other.records);
    }
}

/// A stochastic forward model `x ~ S(alpha, beta)`.
///
/// Implementations must be pure given the generator state so that batches
/// can be simulated in parallel with per-record streams.
pub trait Simulator: Sync {
    fn obs_dim(&self) -> usize;

    fn simulate(&self, alpha: &[f64], beta: &[f64], rng: &mut Rng) -> Result<Vec<f64>>;
}

impl<S: Simulator + ?Sized> Simulator for &S {
    fn obs_dim(&self) -> usize {
        (**self).obs_dim()
    }

    fn simulate(&self, alpha: &[f64], beta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        (**self).simulate(alpha, beta, rng)
    }
}
