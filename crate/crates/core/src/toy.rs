//! The multiplicative model `x = alpha * beta + eps` and its closed-form
//! posteriors in the noiseless limit.
//!
//! With a single observation the posterior lives on the ridge
//! `alpha * beta = x0`. Extra observations sharing `beta` cut the ridge down
//! to `beta in [mu, 1]` with `mu = max({x0} U X)`, and tilt it by
//! `beta^-(N+1)`. These densities serve as the exact reference for the
//! learned posteriors.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Rng, Simulator};

/// Draws `alpha * beta + sigma * xi` with `xi ~ N(0, 1)`.
pub fn simulate_toy(alpha: f64, beta: f64, sigma: f64, rng: &mut Rng) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "toy parameters ({alpha}, {beta}) outside the unit box"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise scale {sigma} must be nonnegative")));
    }
    let noise = if sigma > 0.0 {
        let xi: f64 = StandardNormal.sample(rng);
        sigma * xi
    } else {
        0.0
    };
    Ok(alpha * beta + noise)
}

/// The toy model as a [`Simulator`] with scalar observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySimulator {
    pub sigma: f64,
}

impl Default for ToySimulator {
    fn default() -> Self {
        Self { sigma: 0.0 }
    }
}

impl Simulator for ToySimulator {
    fn obs_dim(&self) -> usize {
        1
    }

    fn simulate(&self, alpha: &[f64], beta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(vec![simulate_toy(alpha[0], beta[0], self.sigma, rng)?])
    }
}

/// Support of a posterior marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Interval(f64, f64),
    /// All mass sits at one point (observation equal to 1).
    Point(f64),
}

fn check_observation(x: f64) -> Result<()> {
    if x > 0.0 && x <= 1.0 {
        Ok(())
    } else {
        Err(Error::ObservationOutOfRange(x))
    }
}

fn indicator(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

/// Joint posterior of a single observation for small `sigma > 0`:
/// a Gaussian ridge around `alpha * beta = x0` normalized by `log(1/x0)`.
pub fn joint_density_single(alpha: f64, beta: f64, x0: f64, sigma: f64) -> Result<f64> {
    if !(x0 > 0.0 && x0 < 1.0) {
        return Err(Error::ObservationOutOfRange(x0));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("joint density needs sigma > 0"));
    }
    if !indicator(alpha, 0.0, 1.0) || !indicator(beta, 0.0, 1.0) {
        return Ok(0.0);
    }
    let r = x0 - alpha * beta;
    let gauss = (-r * r / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
    Ok(gauss / (1.0 / x0).ln())
}

fn single_marginal(v: f64, x0: f64) -> Result<f64> {
    check_observation(x0)?;
    if x0 == 1.0 {
        return Err(Error::PointMass { location: 1.0 });
    }
    if !indicator(v, x0, 1.0) {
        return Ok(0.0);
    }
    Ok(1.0 / ((1.0 / x0).ln() * v))
}

/// `p(beta | x0) = 1_[x0,1](beta) / (beta log(1/x0))`.
pub fn marginal_beta_single(beta: f64, x0: f64) -> Result<f64> {
    single_marginal(beta, x0)
}

/// `p(alpha | x0)`, the mirror image of [`marginal_beta_single`].
pub fn marginal_alpha_single(alpha: f64, x0: f64) -> Result<f64> {
    single_marginal(alpha, x0)
}

/// Sufficient summary of a bundle for the closed-form posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPosteriorOracle {
    x0: f64,
    extras: Vec<f64>,
    mu: f64,
}

impl ToyPosteriorOracle {
    /// Rejects observations outside `(0, 1]`; zero makes `log(1/x)` undefined.
    pub fn new(x0: f64, extras: &[f64]) -> Result<Self> {
        check_observation(x0)?;
        for &x in extras {
            check_observation(x)?;
        }
        let mut extras = extras.to_vec();
        extras.sort_by(f64::total_cmp);
        let mu = extras.last().copied().unwrap_or(x0).max(x0);
        Ok(Self { x0, extras, mu })
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn extras(&self) -> &[f64] {
        &self.extras
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn n_extra(&self) -> usize {
        self.extras.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.mu == 1.0
    }

    pub fn beta_support(&self) -> Support {
        if self.is_degenerate() {
            Support::Point(1.0)
        } else {
            Support::Interval(self.mu, 1.0)
        }
    }

    pub fn alpha_support(&self) -> Support {
        if self.is_degenerate() {
            Support::Point(self.x0)
        } else {
            Support::Interval(self.x0, (self.x0 / self.mu).min(1.0))
        }
    }

    fn require_extras(&self) -> Result<usize> {
        match self.extras.len() {
            0 => Err(Error::invalid(
                "no extra observations; use the single-observation marginals",
            )),
            n => Ok(n),
        }
    }

    /// `log(mu^-N - 1)`, computed without overflow for large `N`.
    fn log_normalizer(&self, n: usize) -> f64 {
        let n = n as f64;
        -n * self.mu.ln() + (-(self.mu.powf(n))).ln_1p()
    }

    /// CDF of the global marginal, `(1 - (mu/beta)^N) / (1 - mu^N)` on `[mu, 1]`.
    pub fn beta_cdf(&self, beta: f64) -> Result<f64> {
        let n = self.require_extras()? as f64;
        if beta <= self.mu {
            return Ok(0.0);
        }
        if beta >= 1.0 {
            return Ok(1.0);
        }
        Ok(-(n * (self.mu / beta).ln()).exp_m1() / -(n * self.mu.ln()).exp_m1())
    }

    /// Inverse CDF of the global marginal at `u in [0, 1]`.
    pub fn beta_quantile(&self, u: f64) -> Result<f64> {
        let n = self.require_extras()? as f64;
        let tail = 1.0 - self.mu.powf(n);
        Ok((self.mu * (1.0 - u * tail).powf(-1.0 / n)).min(1.0))
    }
}

/// `p(beta | x0, X) = N / ((mu^-N - 1) beta^(N+1))` on `[mu, 1]`.
pub fn marginal_beta_multi(beta: f64, oracle: &ToyPosteriorOracle) -> Result<f64> {
    let n = oracle.require_extras()?;
    if oracle.is_degenerate() {
        return Err(Error::PointMass { location: 1.0 });
    }
    if !indicator(beta, oracle.mu, 1.0) {
        return Ok(0.0);
    }
    let log_p = (n as f64).ln() - (n as f64 + 1.0) * beta.ln() - oracle.log_normalizer(n);
    Ok(log_p.exp())
}

/// `p(alpha | x0, X) = N alpha^(N-1) / ((mu^-N - 1) x0^N)` on `[x0, min(1, x0/mu)]`.
pub fn marginal_alpha_multi(alpha: f64, oracle: &ToyPosteriorOracle) -> Result<f64> {
    let n = oracle.require_extras()?;
    if oracle.is_degenerate() {
        return Err(Error::PointMass { location: oracle.x0 });
    }
    let hi = (oracle.x0 / oracle.mu).min(1.0);
    if !indicator(alpha, oracle.x0, hi) {
        return Ok(0.0);
    }
    let nf = n as f64;
    let log_p = nf.ln() + (nf - 1.0) * alpha.ln() - nf * oracle.x0.ln() - oracle.log_normalizer(n);
    Ok(log_p.exp())
}

/// Exact posterior draws `(alpha, beta)` given the bundle.
///
/// `beta` comes from the inverse CDF of [`marginal_beta_multi`] and
/// `alpha = x0 / beta` places the pair on the ridge.
pub fn sample_posterior_multi(oracle: &ToyPosteriorOracle, n: usize, rng: &mut Rng) -> Result<Vec<(f64, f64)>> {
    oracle.require_extras()?;
    (0..n)
        .map(|_| {
            let beta = oracle.beta_quantile(rng.random::<f64>())?;
            Ok((oracle.x0 / beta, beta))
        })
        .collect()
}

/// Exact draws for a lone observation: `beta = x0^(1-u)`, `alpha = x0 / beta`.
pub fn sample_posterior_single(x0: f64, n: usize, rng: &mut Rng) -> Result<Vec<(f64, f64)>> {
    check_observation(x0)?;
    Ok((0..n)
        .map(|_| {
            let beta = x0.powf(1.0 - rng.random::<f64>());
            (x0 / beta, beta)
        })
        .collect())
}

/// Dispatches on the number of extra observations.
pub fn sample_posterior(oracle: &ToyPosteriorOracle, n: usize, rng: &mut Rng) -> Result<Vec<(f64, f64)>> {
    if oracle.n_extra() == 0 {
        sample_posterior_single(oracle.x0, n, rng)
    } else {
        sample_posterior_multi(oracle, n, rng)
    }
}

/// `P(mu < beta0 (1 - eps)) = (1 - eps)^N`.
pub fn mu_concentration_probability(epsilon: f64, n_extra: usize) -> f64 {
    (1.0 - epsilon).powi(n_extra as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seeded_rng;

    #[test]
    fn noiseless_product() {
        let mut rng = seeded_rng(0);
        assert_eq!(simulate_toy(0.5, 0.5, 0.0, &mut rng).unwrap(), 0.25);
        for x in [0.0, 0.13, 0.77, 1.0] {
            assert_eq!(simulate_toy(1.0, x, 0.0, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn noisy_moments() {
        let mut rng = seeded_rng(11);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| simulate_toy(0.5, 0.5, 0.01, &mut rng).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.25).abs() < 3e-4, "mean {mean}");
        assert!((var.sqrt() - 0.01).abs() < 2e-4, "std {}", var.sqrt());
    }

    #[test]
    fn simulate_rejects_out_of_box() {
        let mut rng = seeded_rng(0);
        assert!(simulate_toy(1.2, 0.5, 0.0, &mut rng).is_err());
        assert!(simulate_toy(0.5, -0.1, 0.0, &mut rng).is_err());
        assert!(simulate_toy(0.5, 0.5, -1.0, &mut rng).is_err());
    }

    #[test]
    fn joint_density_points() {
        assert_eq!(joint_density_single(1.5, 0.5, 0.25, 0.01).unwrap(), 0.0);
        let expected = (1.0 / (2.0 * std::f64::consts::PI * 1e-4).sqrt()) / 4f64.ln();
        let got = joint_density_single(0.5, 0.5, 0.25, 0.01).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected);
        assert!(joint_density_single(0.5, 0.5, 1.0, 0.01).is_err());
        assert!(joint_density_single(0.5, 0.5, 0.0, 0.01).is_err());
    }

    #[test]
    fn single_marginals() {
        let v = marginal_beta_single(0.5, 0.5).unwrap();
        assert!((v - 2.0 / 2f64.ln()).abs() < 1e-12);
        assert!((v - 2.8854).abs() < 1e-4);
        assert_eq!(marginal_beta_single(0.3, 0.5).unwrap(), 0.0);
        assert!((marginal_alpha_single(0.5, 0.5).unwrap() - 2.0 / 2f64.ln()).abs() < 1e-12);
        assert_eq!(marginal_alpha_single(0.1, 0.5).unwrap(), 0.0);
        assert!(matches!(
            marginal_beta_single(0.5, 0.0),
            Err(Error::ObservationOutOfRange(_))
        ));
        assert!(matches!(marginal_beta_single(1.0, 1.0), Err(Error::PointMass { .. })));
    }

    #[test]
    fn multi_marginal_points() {
        let oracle = ToyPosteriorOracle::new(0.5, &[0.6]).unwrap();
        let b = marginal_beta_multi(0.8, &oracle).unwrap();
        assert!((b - 1.0 / ((1.0 / 0.6 - 1.0) * 0.64)).abs() < 1e-12);
        assert!((b - 2.3438).abs() < 1e-4);
        assert_eq!(marginal_beta_multi(0.5, &oracle).unwrap(), 0.0);

        let a = marginal_alpha_multi(0.7, &oracle).unwrap();
        assert!((a - 3.0).abs() < 1e-12);
        assert_eq!(marginal_alpha_multi(0.4, &oracle).unwrap(), 0.0);
        assert_eq!(marginal_alpha_multi(0.84, &oracle).unwrap(), 0.0);
    }

    #[test]
    fn multi_requires_extras() {
        let oracle = ToyPosteriorOracle::new(0.5, &[]).unwrap();
        assert!(marginal_beta_multi(0.7, &oracle).is_err());
        assert!(marginal_alpha_multi(0.7, &oracle).is_err());
        assert!(sample_posterior_multi(&oracle, 3, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn zero_observation_rejected() {
        assert!(ToyPosteriorOracle::new(0.0, &[0.3]).is_err());
        assert!(ToyPosteriorOracle::new(0.3, &[0.0]).is_err());
        assert!(ToyPosteriorOracle::new(0.3, &[1.2]).is_err());
    }

    #[test]
    fn degenerate_support_is_flagged() {
        let oracle = ToyPosteriorOracle::new(0.4, &[0.2, 1.0]).unwrap();
        assert!(oracle.is_degenerate());
        assert_eq!(oracle.beta_support(), Support::Point(1.0));
        assert_eq!(oracle.alpha_support(), Support::Point(0.4));
        assert!(matches!(marginal_beta_multi(1.0, &oracle), Err(Error::PointMass { location }) if location == 1.0));
        let draws = sample_posterior_multi(&oracle, 5, &mut seeded_rng(1)).unwrap();
        assert!(draws.iter().all(|&(a, b)| a == 0.4 && b == 1.0));
    }

    #[test]
    fn duplicate_extra_matches_single_extra_formula() {
        let x0 = 0.35;
        let dup = ToyPosteriorOracle::new(x0, &[x0]).unwrap();
        for beta in [0.35, 0.5, 0.9, 1.0] {
            let expected = 1.0 / ((1.0 / x0 - 1.0) * beta * beta);
            let got = marginal_beta_multi(beta, &dup).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected);
        }
    }

    #[test]
    fn quantile_endpoints() {
        let oracle = ToyPosteriorOracle::new(0.3, &[0.45, 0.2]).unwrap();
        assert_eq!(oracle.beta_quantile(0.0).unwrap(), 0.45);
        assert!((oracle.beta_quantile(1.0).unwrap() - 1.0).abs() < 1e-15);
        for u in [0.1, 0.5, 0.9] {
            let b = oracle.beta_quantile(u).unwrap();
            assert!((oracle.beta_cdf(b).unwrap() - u).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_lie_on_the_ridge() {
        let oracle = ToyPosteriorOracle::new(0.3, &[0.4, 0.1, 0.35]).unwrap();
        let mut rng = seeded_rng(7);
        for (a, b) in sample_posterior_multi(&oracle, 1000, &mut rng).unwrap() {
            assert!((a * b - 0.3).abs() < 1e-12);
            assert!((0.4..=1.0).contains(&b));
        }
        for (a, b) in sample_posterior_single(0.3, 1000, &mut rng).unwrap() {
            assert!((a * b - 0.3).abs() < 1e-12);
            assert!((0.3..=1.0).contains(&b) && (0.3..=1.0).contains(&a));
        }
    }

    #[test]
    fn concentration_formula() {
        assert!((mu_concentration_probability(0.1, 10) - 0.9f64.powi(10)).abs() < 1e-15);
        assert!((mu_concentration_probability(0.1, 10) - 0.34868).abs() < 1e-5);
        assert_eq!(mu_concentration_probability(0.3, 0), 1.0);
    }
}
