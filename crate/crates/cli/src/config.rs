//! Experiment configuration read from TOML and overridden by flags.

use std::path::{Path, PathBuf};

use hnpe::flows::deepset::AggregatorKind;
use hnpe::metrics::{ExperimentProtocol, SinkhornConfig};
use hnpe::nmm::NmmSimulator;
use hnpe::trainer::{ModelConfig, TrainConfig};
use hnpe::PriorSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Toy,
    Nmm,
}

/// Where the observed bundle comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservedSource {
    /// Simulated at a ground truth: `[alpha, beta]` for the toy model,
    /// `[C, mu, sigma, gain]` for the neural mass model.
    Truth(Vec<f64>),
    /// A bundle JSON file with `x0` and `extra` in feature space.
    Bundle(PathBuf),
    /// A CSV of raw time series, one per column, first column `x0`.
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Points per posterior cloud.
    pub samples: usize,
    pub sinkhorn: SinkhornConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Divergence to the point mass at the truth over `N`, exact posterior.
    Concentration,
    /// As `Concentration`, for posteriors trained with each `N`.
    LearnedConcentration,
    /// Divergence between learned and exact posteriors over the number of
    /// simulations per round.
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub values: Vec<usize>,
    #[serde(default)]
    pub protocol: ExperimentProtocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_extra: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_sims")]
    pub sims: usize,
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator: Option<NmmSimulator>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<ObservedSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_rounds() -> usize {
    1
}

fn default_sims() -> usize {
    10_000
}

/// Flag values that replace configuration entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<ModelKind>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub rounds: Option<usize>,
    pub sims: Option<usize>,
    pub n_extra: Option<usize>,
}

impl ExperimentConfig {
    /// A configuration with defaults for `model` writing to `out`.
    pub fn new(model: ModelKind, out: PathBuf) -> Self {
        Self {
            model,
            seed: 0,
            n_extra: 0,
            rounds: default_rounds(),
            sims: default_sims(),
            out,
            prior: None,
            architecture: None,
            simulator: None,
            train: TrainConfig::default(),
            metric: MetricConfig::default(),
            observed: None,
            sweep: None,
        }
    }

    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("configuration: {e}")))
    }

    /// Reads `path` when given, applies the flags and validates. Relative
    /// paths inside the file are resolved against its directory.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", p.display())))?;
                let mut cfg = Self::from_toml_str(&text)?;
                let base = p.parent().unwrap_or(Path::new("."));
                cfg.resolve_paths(base);
                cfg
            }
            None => {
                let model = overrides
                    .model
                    .ok_or_else(|| CliError::Validation("either --config or --model is required".into()))?;
                let out = overrides
                    .out
                    .clone()
                    .ok_or_else(|| CliError::Validation("either --config or --out is required".into()))?;
                Self::new(model, out)
            }
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        match &mut self.observed {
            Some(ObservedSource::Bundle(p)) | Some(ObservedSource::Csv(p)) => fix(p),
            _ => {}
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.model {
            self.model = m;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(r) = o.rounds {
            self.rounds = r;
        }
        if let Some(n) = o.sims {
            self.sims = n;
        }
        if let Some(n) = o.n_extra {
            self.n_extra = n;
        }
        self.train.rounds = self.rounds;
        self.train.sims_per_round = self.sims;
    }

    pub fn prior(&self) -> PriorSpec {
        self.prior.clone().unwrap_or_else(|| match self.model {
            ModelKind::Toy => PriorSpec::toy(),
            ModelKind::Nmm => PriorSpec::neural_mass(),
        })
    }

    pub fn architecture(&self) -> ModelConfig {
        self.architecture.clone().unwrap_or_else(|| match self.model {
            ModelKind::Toy => ModelConfig::toy(),
            ModelKind::Nmm => ModelConfig::neural_mass(),
        })
    }

    pub fn nmm_simulator(&self) -> NmmSimulator {
        self.simulator.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Validation(m));
        self.train.validate().map_err(CliError::validation)?;
        self.architecture().validate().map_err(CliError::validation)?;
        self.metric.sinkhorn.validate().map_err(CliError::validation)?;
        let prior = self.prior();
        prior.validate().map_err(CliError::validation)?;
        let (n_local, n_global) = match self.model {
            ModelKind::Toy => (1, 1),
            ModelKind::Nmm => (3, 1),
        };
        if prior.local_dim() != n_local || prior.global_dim() != n_global {
            return bad(format!(
                "the {:?} model needs {n_local} local and {n_global} global parameters, the prior has {} and {}",
                self.model,
                prior.local_dim(),
                prior.global_dim()
            ));
        }
        if self.sims < 2 {
            return bad("at least two simulations per round are needed".into());
        }
        if self.metric.samples < 2 {
            return bad("metric.samples must be at least 2".into());
        }
        if self.simulator.is_some() && self.model == ModelKind::Toy {
            return bad("the [simulator] table applies to the nmm model only".into());
        }
        if let Some(sim) = &self.simulator {
            sim.spec.validate().map_err(CliError::validation)?;
        }
        if matches!(self.architecture().aggregator, AggregatorKind::Learned { .. }) && self.n_extra == 0 {
            return bad("a learned aggregator needs n_extra > 0".into());
        }
        match (&self.observed, self.model) {
            (Some(ObservedSource::Truth(t)), m) if t.len() != n_local + n_global => {
                return bad(format!(
                    "observed truth for {m:?} needs {} values, got {}",
                    n_local + n_global,
                    t.len()
                ));
            }
            (Some(ObservedSource::Csv(_)), ModelKind::Toy) => {
                return bad("CSV time series apply to the nmm model only".into());
            }
            _ => {}
        }
        if let Some(ObservedSource::Truth(t)) = &self.observed {
            let theta = hnpe::Theta::new(t[..n_local].to_vec(), t[n_local..].to_vec());
            if !hnpe::model::in_support(&prior, &theta) {
                return bad(format!("observed truth {t:?} lies outside the prior box"));
            }
        }
        if let Some(sw) = &self.sweep {
            sw.protocol.validate().map_err(CliError::validation)?;
            if sw.values.is_empty() {
                return bad("sweep.values is empty".into());
            }
            if self.model != ModelKind::Toy {
                return bad("sweeps are defined for the toy model".into());
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("serializing configuration: {e}")))
    }

    /// SHA-256 of the resolved configuration with the output directory
    /// removed, so runs that differ only in location share a hash.
    pub fn hash(&self) -> CliResult<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let text = c.to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}
