//! Stochastic Jansen–Rit neural mass model.
//!
//! Six state variables: three membrane potentials `X0..X2` (mV) and their
//! derivatives `X3..X5` (mV/s). Noise enters only the derivative rows. The
//! observed signal is `10^(g/10) * (X1 - X2)` sampled at `fs`.
//!
//! Two integrators are provided. [`Scheme::StrangSplitting`] solves the
//! linear damped-oscillator part (including its Gaussian noise) exactly and
//! the sigmoid coupling as a half-step kick on either side.
//! [`Scheme::EulerMaruyama`] is the plain explicit scheme, kept as an
//! independent cross-check. Both consume the same per-step normal draws, so
//! one seed drives coupled paths under either scheme.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{log_psd, WelchConfig};
use crate::model::{Rng, Simulator};

/// Physiological constants held fixed during inference.
///
/// Defaults are the classical Jansen–Rit values; the auxiliary input means
/// `mu3`, `mu5` and diffusions `sigma3`, `sigma5` are configurable choices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmmConstants {
    /// Excitatory synaptic gain (mV).
    pub a_gain: f64,
    /// Excitatory rate constant (1/s).
    pub a_rate: f64,
    /// Inhibitory synaptic gain (mV).
    pub b_gain: f64,
    /// Inhibitory rate constant (1/s).
    pub b_rate: f64,
    pub e0: f64,
    pub v0: f64,
    pub r: f64,
    pub mu3: f64,
    pub mu5: f64,
    pub sigma3: f64,
    pub sigma5: f64,
}

impl Default for NmmConstants {
    fn default() -> Self {
        Self {
            a_gain: 3.25,
            a_rate: 100.0,
            b_gain: 22.0,
            b_rate: 50.0,
            e0: 2.5,
            v0: 6.0,
            r: 0.56,
            mu3: 0.0,
            mu5: 0.0,
            sigma3: 10.0,
            sigma5: 10.0,
        }
    }
}

/// Inferred parameters: connectivity `c`, input mean `mu`, input diffusion
/// `sigma` and observation gain in decibels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmmParams {
    pub c: f64,
    pub mu: f64,
    pub sigma: f64,
    pub gain_db: f64,
    pub constants: NmmConstants,
}

impl NmmParams {
    pub fn new(c: f64, mu: f64, sigma: f64, gain_db: f64) -> Self {
        Self {
            c,
            mu,
            sigma,
            gain_db,
            constants: NmmConstants::default(),
        }
    }

    /// Local parameters `(C, mu, sigma)` and the global gain.
    pub fn from_theta(alpha: &[f64], beta: &[f64], constants: NmmConstants) -> Result<Self> {
        if alpha.len() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: alpha.len(),
            });
        }
        if beta.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: beta.len(),
            });
        }
        Ok(Self {
            c: alpha[0],
            mu: alpha[1],
            sigma: alpha[2],
            gain_db: beta[0],
            constants,
        })
    }

    pub fn gain_factor(&self) -> f64 {
        10f64.powf(self.gain_db / 10.0)
    }

    fn diffusion(&self) -> [f64; 3] {
        [self.constants.sigma3, self.sigma, self.constants.sigma5]
    }
}

pub type NmmState = [f64; 6];

/// Sampling layout of a simulated recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSpec {
    /// Recorded length (s).
    pub duration: f64,
    /// Output sampling rate (Hz).
    pub fs: f64,
    /// Discarded transient before recording starts (s).
    pub burn_in: f64,
    /// Integrator steps per output sample.
    pub substeps: usize,
}

impl Default for TimeSeriesSpec {
    fn default() -> Self {
        Self {
            duration: 8.0,
            fs: 128.0,
            burn_in: 2.0,
            substeps: 8,
        }
    }
}

impl TimeSeriesSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.duration * self.fs;
        if !(self.duration > 0.0 && self.fs > 0.0 && self.burn_in >= 0.0 && self.substeps > 0) {
            return Err(Error::Config(format!("invalid time-series spec {self:?}")));
        }
        if (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "duration * fs = {n} is not an integer sample count"
            )));
        }
        if ((self.burn_in * self.fs) - (self.burn_in * self.fs).round()).abs() > 1e-9 {
            return Err(Error::Config("burn-in must span a whole number of samples".into()));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.fs).round() as usize
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.fs * self.substeps as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    StrangSplitting,
    EulerMaruyama,
}

/// `(C1, C2, C3, C4) = (C, 0.8 C, 0.25 C, 0.25 C)`.
pub fn connectivity(c: f64) -> [f64; 4] {
    [c, 0.8 * c, 0.25 * c, 0.25 * c]
}

/// Firing-rate sigmoid `2 e0 / (1 + exp(r (v0 - v)))`.
pub fn sigmoid(v: f64, k: &NmmConstants) -> f64 {
    2.0 * k.e0 / (1.0 + (k.r * (k.v0 - v)).exp())
}

/// Input terms of the derivative rows; they depend only on `X0..X2`.
fn coupling(x: &NmmState, p: &NmmParams) -> [f64; 3] {
    let k = &p.constants;
    let [c1, c2, c3, c4] = connectivity(p.c);
    [
        k.a_gain * k.a_rate * (k.mu3 + sigmoid(x[1] - x[2], k)),
        k.a_gain * k.a_rate * (p.mu + c2 * sigmoid(c1 * x[0], k)),
        k.b_gain * k.b_rate * (k.mu5 + c4 * sigmoid(c3 * x[0], k)),
    ]
}

fn rates(k: &NmmConstants) -> [f64; 3] {
    [k.a_rate, k.a_rate, k.b_rate]
}

/// Deterministic right-hand side of all six rows.
pub fn drift(x: &NmmState, p: &NmmParams) -> NmmState {
    let n = coupling(x, p);
    let k = rates(&p.constants);
    let mut d = [0.0; 6];
    for i in 0..3 {
        d[i] = x[i + 3];
        d[i + 3] = n[i] - 2.0 * k[i] * x[i + 3] - k[i] * k[i] * x[i];
    }
    d
}

/// Standard normal draws for one integrator step: per oscillator pair a
/// draw driving the derivative row and a second one used only by the exact
/// linear solve for the potential row.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepNoise {
    pub velocity: [f64; 3],
    pub position: [f64; 3],
}

impl StepNoise {
    pub fn draw(rng: &mut Rng) -> Self {
        let mut n = Self::default();
        for i in 0..3 {
            n.velocity[i] = StandardNormal.sample(rng);
            n.position[i] = StandardNormal.sample(rng);
        }
        n
    }
}

/// `gamma(s, x) = int_0^x t^(s-1) e^-t dt` for integer `s >= 1`.
fn lower_gamma(s: u32, x: f64) -> f64 {
    // Series x^s e^-x sum_n x^n / (s (s+1) ... (s+n)); no cancellation for small x.
    let s = s as f64;
    let mut term = 1.0 / s;
    let mut sum = term;
    let mut n = 1.0;
    while term > sum * 1e-17 {
        term *= x / (s + n);
        sum += term;
        n += 1.0;
        if n > 500.0 {
            break;
        }
    }
    x.powf(s) * (-x).exp() * sum
}

/// Precomputed exact propagator of the linear part for a fixed step.
#[derive(Debug, Clone, Copy)]
struct LinearPropagator {
    /// Row-major 2x2 transition per oscillator pair.
    transition: [[f64; 4]; 3],
    /// Cholesky factors `(l_vv, l_pv, l_pp)` of the step noise covariance.
    chol: [[f64; 3]; 3],
}

impl LinearPropagator {
    fn new(h: f64, p: &NmmParams) -> Self {
        let k = rates(&p.constants);
        let sig = p.diffusion();
        let mut transition = [[0.0; 4]; 3];
        let mut chol = [[0.0; 3]; 3];
        for i in 0..3 {
            let (ki, e) = (k[i], (-k[i] * h).exp());
            transition[i] = [e * (1.0 + ki * h), e * h, -e * ki * ki * h, e * (1.0 - ki * h)];
            let c = 2.0 * ki;
            let i0 = lower_gamma(1, c * h) / c;
            let i1 = lower_gamma(2, c * h) / (c * c);
            let i2 = lower_gamma(3, c * h) / (c * c * c);
            let s2 = sig[i] * sig[i];
            let cpp = s2 * i2;
            let cpv = s2 * (i1 - ki * i2);
            let cvv = s2 * (i0 - 2.0 * ki * i1 + ki * ki * i2);
            if cvv > 0.0 {
                let lvv = cvv.sqrt();
                let lpv = cpv / lvv;
                let lpp = (cpp - lpv * lpv).max(0.0).sqrt();
                chol[i] = [lvv, lpv, lpp];
            }
        }
        Self { transition, chol }
    }

    fn apply(&self, x: &mut NmmState, noise: &StepNoise) {
        for i in 0..3 {
            let t = &self.transition[i];
            let [lvv, lpv, lpp] = self.chol[i];
            let (pos, vel) = (x[i], x[i + 3]);
            x[i] = t[0] * pos + t[1] * vel + lpv * noise.velocity[i] + lpp * noise.position[i];
            x[i + 3] = t[2] * pos + t[3] * vel + lvv * noise.velocity[i];
        }
    }
}

fn kick(x: &mut NmmState, n: &[f64; 3], t: f64) {
    for i in 0..3 {
        x[i + 3] += t * n[i];
    }
}

fn check_finite(x: &NmmState, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationFailure { step })
    }
}

/// One Euler–Maruyama transition.
pub fn step_euler(x: &NmmState, dt: f64, p: &NmmParams, noise: &StepNoise) -> NmmState {
    let d = drift(x, p);
    let sig = p.diffusion();
    let sq = dt.sqrt();
    let mut out = *x;
    for i in 0..6 {
        out[i] += dt * d[i];
    }
    for i in 0..3 {
        out[i + 3] += sig[i] * sq * noise.velocity[i];
    }
    out
}

/// One Strang-splitting transition: half kick, exact linear solve, half kick.
pub fn step_splitting(x: &NmmState, dt: f64, p: &NmmParams, noise: &StepNoise) -> NmmState {
    let prop = LinearPropagator::new(dt, p);
    let mut out = *x;
    let c = coupling(&out, p);
    kick(&mut out, &c, 0.5 * dt);
    prop.apply(&mut out, noise);
    let c = coupling(&out, p);
    kick(&mut out, &c, 0.5 * dt);
    out
}

/// One transition of `scheme`, failing on a non-finite result.
pub fn step(x: &NmmState, dt: f64, p: &NmmParams, scheme: Scheme, noise: &StepNoise) -> Result<NmmState> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("step size {dt} must be positive")));
    }
    let out = match scheme {
        Scheme::EulerMaruyama => step_euler(x, dt, p, noise),
        Scheme::StrangSplitting => step_splitting(x, dt, p, noise),
    };
    check_finite(&out, 0)?;
    Ok(out)
}

/// Integrates the untransformed trajectory, calling `record` with the
/// state after every `substeps` steps once the burn-in has elapsed.
fn integrate(
    p: &NmmParams,
    spec: &TimeSeriesSpec,
    scheme: Scheme,
    rng: &mut Rng,
    mut record: impl FnMut(&NmmState),
) -> Result<()> {
    spec.validate()?;
    let h = spec.dt();
    let burn = (spec.burn_in * spec.fs).round() as usize * spec.substeps;
    let total = burn + spec.n_samples() * spec.substeps;
    let mut x: NmmState = [0.0; 6];
    match scheme {
        Scheme::EulerMaruyama => {
            for s in 1..=total {
                x = step_euler(&x, h, p, &StepNoise::draw(rng));
                if s % spec.substeps == 0 {
                    check_finite(&x, s)?;
                    if s > burn {
                        record(&x);
                    }
                }
            }
        }
        Scheme::StrangSplitting => {
            // The closing half kick of one step and the opening half kick of
            // the next share the same potentials, so the coupling is
            // evaluated once per step.
            let prop = LinearPropagator::new(h, p);
            let mut n = coupling(&x, p);
            for s in 1..=total {
                kick(&mut x, &n, 0.5 * h);
                prop.apply(&mut x, &StepNoise::draw(rng));
                n = coupling(&x, p);
                kick(&mut x, &n, 0.5 * h);
                if s % spec.substeps == 0 {
                    check_finite(&x, s)?;
                    if s > burn {
                        record(&x);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Simulated recording `10^(g/10) (X1 - X2)` of length `duration * fs`.
pub fn simulate(p: &NmmParams, spec: &TimeSeriesSpec, scheme: Scheme, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spec.n_samples());
    integrate(p, spec, scheme, rng, |x| out.push(x[1] - x[2]))?;
    let gain = p.gain_factor();
    for v in &mut out {
        *v *= gain;
    }
    Ok(out)
}

/// The neural mass model followed by the log-PSD summary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NmmSimulator {
    pub spec: TimeSeriesSpec,
    pub constants: NmmConstants,
    pub scheme: Scheme,
    pub welch: WelchConfig,
}

impl NmmSimulator {
    pub fn series(&self, alpha: &[f64], beta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let p = NmmParams::from_theta(alpha, beta, self.constants)?;
        simulate(&p, &self.spec, self.scheme, rng)
    }

    pub fn featurize(&self, series: &[f64]) -> Result<Vec<f64>> {
        Ok(log_psd(series, self.spec.fs, &self.welch)?.values)
    }
}

impl Simulator for NmmSimulator {
    fn obs_dim(&self) -> usize {
        self.welch.n_bins()
    }

    fn simulate(&self, alpha: &[f64], beta: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let series = self.series(alpha, beta, rng)?;
        self.featurize(&series)
    }
}
