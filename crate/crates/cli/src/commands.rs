//! The `simulate`, `train`, `evaluate`, `sweep` and `figures` commands.

use std::fs;
use std::path::{Path, PathBuf};

use hnpe::experiments::{
    analytic_concentration, analytic_toy_samples, learned_concentration, nmm_bundle, theta_rows, toy_bundle,
    toy_repetition_bundle, train_toy, ToyRun,
};
use hnpe::features::featurize_bundle;
use hnpe::metrics::{dirac_concentration, run_sweep, sinkhorn_divergence, to_unit_box, SweepTable};
use hnpe::nmm::NmmSimulator;
use hnpe::persist::{
    read_bundle, read_dataset, read_samples_csv, write_bundle, write_dataset, write_history_csv, write_samples_csv,
    Checkpoint,
};
use hnpe::toy::ToySimulator;
use hnpe::trainer::{generate_round_dataset, train_multi_round_with_data, HnpeModel, Proposal, RoundArtifacts};
use hnpe::{derive_seed, seeded_rng, ObservationBundle, PriorSpec, Rng, SimulatedDataset, Simulator};

use crate::config::{ExperimentConfig, ModelKind, ObservedSource, SweepKind};
use crate::error::{CliError, CliResult};
use crate::figures::{corner_figure, sweep_figure, PosteriorRow};
use crate::ingest::ingest_timeseries;
use crate::manifest::{check_fresh, RunDir, RunManifest, CONFIG_FILE};

const TAG_OBSERVED: u64 = 21;
const TAG_EVAL: u64 = 22;
const TAG_EXACT: u64 = 23;

pub const DATASET_FILE: &str = "dataset.bin";
pub const SERIES_FILE: &str = "series.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const OBSERVED_FILE: &str = "observed.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const EXACT_SAMPLES_FILE: &str = "analytic_samples.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_RAW_FILE: &str = "sweep_raw.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

/// The neural mass model returning raw recordings instead of features.
struct RawSeries<'a>(&'a NmmSimulator);

impl Simulator for RawSeries<'_> {
    fn obs_dim(&self) -> usize {
        self.0.spec.n_samples()
    }

    fn simulate(&self, alpha: &[f64], beta: &[f64], rng: &mut Rng) -> hnpe::Result<Vec<f64>> {
        self.0.series(alpha, beta, rng)
    }
}

fn featurize_dataset(sim: &NmmSimulator, raw: &SimulatedDataset) -> CliResult<SimulatedDataset> {
    let mut out = raw.clone();
    for r in &mut out.records {
        r.x0 = sim.featurize(&r.x0)?;
        for x in &mut r.extra {
            *x = sim.featurize(x)?;
        }
    }
    Ok(out)
}

/// The observed bundle in feature space, if the configuration names one.
pub fn resolve_observed(cfg: &ExperimentConfig) -> CliResult<Option<ObservationBundle>> {
    let seed = derive_seed(cfg.seed, &[TAG_OBSERVED]);
    let bundle = match (&cfg.observed, cfg.model) {
        (None, _) => return Ok(None),
        (Some(ObservedSource::Truth(t)), ModelKind::Toy) => toy_bundle(t[0], t[1], cfg.n_extra, &mut seeded_rng(seed))?,
        (Some(ObservedSource::Truth(t)), ModelKind::Nmm) => {
            nmm_bundle(&cfg.nmm_simulator(), &t[..3], t[3], cfg.n_extra, seed)?
        }
        (Some(ObservedSource::Bundle(p)), _) => {
            read_bundle(p).map_err(|e| CliError::Validation(format!("observed bundle {}: {e}", p.display())))?
        }
        (Some(ObservedSource::Csv(p)), _) => {
            let sim = cfg.nmm_simulator();
            featurize_bundle(&ingest_timeseries(p)?, sim.spec.fs, &sim.welch)?
        }
    };
    check_bundle_shape(cfg, &bundle)?;
    Ok(Some(bundle))
}

fn obs_dim(cfg: &ExperimentConfig) -> usize {
    match cfg.model {
        ModelKind::Toy => 1,
        ModelKind::Nmm => cfg.nmm_simulator().obs_dim(),
    }
}

fn check_bundle_shape(cfg: &ExperimentConfig, bundle: &ObservationBundle) -> CliResult<()> {
    if bundle.n_extra() != cfg.n_extra {
        return Err(CliError::Validation(format!(
            "observed bundle has N = {} extra observations, the configuration has n_extra = {}",
            bundle.n_extra(),
            cfg.n_extra
        )));
    }
    if bundle.x0.len() != obs_dim(cfg) {
        return Err(CliError::Validation(format!(
            "observed bundle has {} features per observation, the {:?} model produces {}",
            bundle.x0.len(),
            cfg.model,
            obs_dim(cfg)
        )));
    }
    Ok(())
}

fn save_bundle(run: &mut RunDir, bundle: &ObservationBundle) -> CliResult<()> {
    let p = run.path(OBSERVED_FILE)?;
    write_bundle(bundle, &p)?;
    run.record(&p);
    Ok(())
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> CliResult<RunManifest> {
    cfg.validate()?;
    let prior = cfg.prior();
    check_fresh(&cfg.out)?;
    let (features, raw) = match cfg.model {
        ModelKind::Toy => (
            generate_round_dataset(
                &ToySimulator::default(),
                &prior,
                &Proposal::Prior,
                cfg.n_extra,
                cfg.sims,
                cfg.seed,
                0,
            )?,
            None,
        ),
        ModelKind::Nmm => {
            let sim = cfg.nmm_simulator();
            let raw = generate_round_dataset(
                &RawSeries(&sim),
                &prior,
                &Proposal::Prior,
                cfg.n_extra,
                cfg.sims,
                cfg.seed,
                0,
            )?;
            (featurize_dataset(&sim, &raw)?, Some(raw))
        }
    };
    let mut run = RunDir::create("simulate", cfg)?;
    let p = run.path(DATASET_FILE)?;
    write_dataset(&features, &p)?;
    run.record(&p);
    if let Some(raw) = raw {
        let p = run.path(SERIES_FILE)?;
        write_dataset(&raw, &p)?;
        run.record(&p);
    }
    run.finish()
}

fn train_with<S: Simulator + ?Sized>(
    sim: &S,
    cfg: &ExperimentConfig,
    prior: &PriorSpec,
    observed: Option<&ObservationBundle>,
    initial: Option<SimulatedDataset>,
    run: &mut RunDir,
) -> CliResult<HnpeModel> {
    let mut written: Vec<PathBuf> = Vec::new();
    let train = cfg.train.clone();
    let save = |a: &RoundArtifacts, written: &mut Vec<PathBuf>| -> hnpe::Result<()> {
        let dir = run.root().join(format!("round_{}", a.round));
        fs::create_dir_all(&dir)?;
        let d = dir.join(DATASET_FILE);
        write_dataset(a.dataset, &d)?;
        let c = dir.join(CHECKPOINT_FILE);
        Checkpoint::new(a.model.clone(), train.clone(), a.round).write(&c)?;
        let h = dir.join(HISTORY_FILE);
        write_history_csv(std::slice::from_ref(a.history), &h)?;
        written.extend([d, c, h]);
        Ok(())
    };
    let trained = train_multi_round_with_data(
        sim,
        prior,
        &cfg.architecture(),
        cfg.n_extra,
        observed,
        &cfg.train,
        cfg.seed,
        initial,
        |a| save(a, &mut written),
    )?;
    for p in &written {
        run.record(p);
    }
    let p = run.path(CHECKPOINT_FILE)?;
    Checkpoint::new(trained.model.clone(), cfg.train.clone(), cfg.rounds - 1).write(&p)?;
    run.record(&p);
    let p = run.path(HISTORY_FILE)?;
    write_history_csv(&trained.histories, &p)?;
    run.record(&p);
    Ok(trained.model)
}

pub fn cmd_train(cfg: &ExperimentConfig, dataset: Option<&Path>) -> CliResult<RunManifest> {
    cfg.validate()?;
    if cfg.rounds > 1 && cfg.observed.is_none() {
        return Err(CliError::Validation(format!(
            "{} rounds need an observed bundle ([observed] in the configuration)",
            cfg.rounds
        )));
    }
    let observed = resolve_observed(cfg)?;
    let initial = match dataset {
        Some(p) => {
            let d = read_dataset(p).map_err(|e| CliError::Validation(format!("dataset {}: {e}", p.display())))?;
            if d.n_extra() != cfg.n_extra || d.obs_dim() != obs_dim(cfg) {
                return Err(CliError::Validation(format!(
                    "dataset {} has N = {} and {} features, the configuration expects N = {} and {}",
                    p.display(),
                    d.n_extra(),
                    d.obs_dim(),
                    cfg.n_extra,
                    obs_dim(cfg)
                )));
            }
            Some(d)
        }
        None => None,
    };
    check_fresh(&cfg.out)?;
    let prior = cfg.prior();
    let mut run = RunDir::create("train", cfg)?;
    if let Some(b) = &observed {
        save_bundle(&mut run, b)?;
    }
    match cfg.model {
        ModelKind::Toy => train_with(
            &ToySimulator::default(),
            cfg,
            &prior,
            observed.as_ref(),
            initial,
            &mut run,
        )?,
        ModelKind::Nmm => train_with(&cfg.nmm_simulator(), cfg, &prior, observed.as_ref(), initial, &mut run)?,
    };
    run.finish()
}

fn write_metrics(path: &Path, rows: &[(String, f64)]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut put = |a: &str, b: &str| w.write_record([a, b]).map_err(|e| CliError::Runtime(e.to_string()));
    put("metric", "value")?;
    for (k, v) in rows {
        put(k, &v.to_string())?;
    }
    w.flush()?;
    Ok(())
}

fn truth_of(cfg: &ExperimentConfig) -> Option<Vec<f64>> {
    match &cfg.observed {
        Some(ObservedSource::Truth(t)) => Some(t.clone()),
        _ => None,
    }
}

fn box_bounds(prior: &PriorSpec) -> Vec<(f64, f64)> {
    prior.local_bounds().into_iter().chain(prior.global_bounds()).collect()
}

/// Where posterior draws come from during evaluation.
pub enum PosteriorSource<'a> {
    Checkpoint(&'a Path),
    /// The exact toy posterior.
    Exact,
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    source: PosteriorSource,
    bundle_path: Option<&Path>,
) -> CliResult<RunManifest> {
    cfg.validate()?;
    let bundle = match bundle_path {
        Some(p) => {
            let b = read_bundle(p).map_err(|e| CliError::Validation(format!("bundle {}: {e}", p.display())))?;
            check_bundle_shape(cfg, &b)?;
            b
        }
        None => resolve_observed(cfg)?.ok_or_else(|| {
            CliError::Validation("evaluation needs --bundle or [observed] in the configuration".into())
        })?,
    };
    let model = match source {
        PosteriorSource::Checkpoint(p) => {
            let ck =
                Checkpoint::read(p).map_err(|e| CliError::Validation(format!("checkpoint {}: {e}", p.display())))?;
            if ck.model.n_extra != bundle.n_extra() {
                return Err(CliError::Validation(format!(
                    "checkpoint was trained with N = {} but the bundle has N = {}",
                    ck.model.n_extra,
                    bundle.n_extra()
                )));
            }
            if ck.model.obs_dim != bundle.x0.len() {
                return Err(CliError::Validation(format!(
                    "checkpoint expects {} features per observation, the bundle has {}",
                    ck.model.obs_dim,
                    bundle.x0.len()
                )));
            }
            Some(ck.model)
        }
        PosteriorSource::Exact => {
            if cfg.model != ModelKind::Toy {
                return Err(CliError::Validation(
                    "the exact posterior is available for the toy model only".into(),
                ));
            }
            None
        }
    };
    check_fresh(&cfg.out)?;
    let prior = model.as_ref().map_or_else(|| cfg.prior(), |m| m.prior.clone());
    let n = cfg.metric.samples;
    let sink = &cfg.metric.sinkhorn;
    let rows = match &model {
        Some(m) => theta_rows(&m.sample(&bundle, n, &mut seeded_rng(derive_seed(cfg.seed, &[TAG_EVAL])))?),
        None => analytic_toy_samples(&bundle, n, &mut seeded_rng(derive_seed(cfg.seed, &[TAG_EVAL])))?,
    };
    let mut run = RunDir::create("evaluate", cfg)?;
    save_bundle(&mut run, &bundle)?;
    let names = prior.names();
    let p = run.path(SAMPLES_FILE)?;
    write_samples_csv(&names, &rows, &p)?;
    run.record(&p);

    let mut metrics: Vec<(String, f64)> = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64;
        let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (rows.len() - 1) as f64;
        metrics.push((format!("mean_{name}"), mean));
        metrics.push((format!("std_{name}"), var.sqrt()));
    }
    let bounds = box_bounds(&prior);
    let unit = to_unit_box(&rows, &bounds)?;
    if cfg.model == ModelKind::Toy {
        let exact = analytic_toy_samples(&bundle, n, &mut seeded_rng(derive_seed(cfg.seed, &[TAG_EXACT])))?;
        let p = run.path(EXACT_SAMPLES_FILE)?;
        write_samples_csv(&names, &exact, &p)?;
        run.record(&p);
        let d = sinkhorn_divergence(&unit, &to_unit_box(&exact, &bounds)?, sink)?;
        metrics.push(("divergence_to_exact".into(), d.value));
        metrics.push(("divergence_converged".into(), f64::from(u8::from(d.converged))));
    }
    if let Some(t) = truth_of(cfg) {
        let star = to_unit_box(&[t], &bounds)?.remove(0);
        metrics.push(("concentration".into(), dirac_concentration(&unit, &star, sink)?.value));
    }
    let p = run.path(METRICS_FILE)?;
    write_metrics(&p, &metrics)?;
    run.record(&p);
    run.finish()
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> CliResult<RunManifest> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Validation("the sweep command needs a [sweep] table".into()))?;
    check_fresh(&cfg.out)?;
    let n = cfg.metric.samples;
    let sink = cfg.metric.sinkhorn;
    let seed = cfg.seed;
    let values: Vec<f64> = sweep.values.iter().map(|&v| v as f64).collect();
    let (table, column) = match sweep.kind {
        SweepKind::Concentration => (
            run_sweep(&sweep.protocol, &values, |s, r| {
                analytic_concentration(r, s as usize, n, &sink, seed)
            })?,
            "N",
        ),
        SweepKind::LearnedConcentration => {
            let models = sweep
                .values
                .iter()
                .map(|&big_n| {
                    let run = ToyRun {
                        n_extra: big_n,
                        model: cfg.architecture(),
                        train: hnpe::trainer::TrainConfig {
                            rounds: 1,
                            ..cfg.train.clone()
                        },
                        seed,
                    };
                    Ok((big_n, train_toy(&run, None)?.model))
                })
                .collect::<hnpe::Result<Vec<_>>>()?;
            let table = run_sweep(&sweep.protocol, &values, |s, r| {
                let m = &models
                    .iter()
                    .find(|(k, _)| *k == s as usize)
                    .expect("model per sweep value")
                    .1;
                learned_concentration(m, r, n, &sink, seed)
            })?;
            (table, "N")
        }
        SweepKind::Divergence => {
            let table = run_sweep(&sweep.protocol, &values, |s, r| {
                let bundle = toy_repetition_bundle(r, cfg.n_extra, seed)?;
                let run = ToyRun {
                    n_extra: cfg.n_extra,
                    model: cfg.architecture(),
                    train: hnpe::trainer::TrainConfig {
                        sims_per_round: s as usize,
                        ..cfg.train.clone()
                    },
                    seed: derive_seed(seed, &[r as u64, s as u64]),
                };
                let observed = (cfg.rounds > 1).then_some(&bundle);
                let model = train_toy(&run, observed)?.model;
                hnpe::experiments::toy_divergence(&model, &bundle, n, &sink, derive_seed(seed, &[r as u64]))
            })?;
            (table, "n")
        }
    };
    let mut run = RunDir::create("sweep", cfg)?;
    let p = run.path(SWEEP_RAW_FILE)?;
    table.write_raw_csv(&p, column)?;
    run.record(&p);
    let p = run.path(SWEEP_SUMMARY_FILE)?;
    table.write_summary_csv(&p, column)?;
    run.record(&p);
    run.finish()
}

/// Directories scanned for figure inputs: `input` and its children.
fn candidate_dirs(input: &Path) -> CliResult<Vec<PathBuf>> {
    if !input.is_dir() {
        return Err(CliError::Validation(format!(
            "results directory {} does not exist",
            input.display()
        )));
    }
    let mut dirs = vec![input.to_path_buf()];
    let mut children: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    dirs.extend(children);
    Ok(dirs)
}

fn run_config(dir: &Path) -> Option<ExperimentConfig> {
    ExperimentConfig::from_toml_str(&fs::read_to_string(dir.join(CONFIG_FILE)).ok()?).ok()
}

pub fn cmd_figures(input: &Path, out: &Path) -> CliResult<RunManifest> {
    let dirs = candidate_dirs(input)?;
    let mut posterior: Vec<(usize, String, PathBuf)> = Vec::new();
    let mut sweeps: Vec<(String, PathBuf)> = Vec::new();
    for d in &dirs {
        let cfg = run_config(d);
        if d.join(SAMPLES_FILE).is_file() {
            let n = cfg.as_ref().map_or(usize::MAX, |c| c.n_extra);
            let title = cfg
                .as_ref()
                .map(|c| format!("{:?}, N = {}", c.model, c.n_extra))
                .unwrap_or_else(|| {
                    d.file_name()
                        .map_or_else(String::new, |s| s.to_string_lossy().into_owned())
                });
            posterior.push((n, title, d.clone()));
        }
        if d.join(SWEEP_SUMMARY_FILE).is_file() {
            let kind = cfg.and_then(|c| c.sweep).map(|s| s.kind);
            let value = match kind {
                Some(SweepKind::Divergence) => "divergence to the exact posterior",
                _ => "divergence to the point mass at the truth",
            };
            sweeps.push((value.to_string(), d.clone()));
        }
    }
    if posterior.is_empty() && sweeps.is_empty() {
        return Err(CliError::Validation(format!(
            "no figure inputs under {}: missing {SAMPLES_FILE} (posterior figure) and {SWEEP_SUMMARY_FILE} (sweep figure)",
            input.display()
        )));
    }
    check_fresh(out)?;
    posterior.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.2.cmp(&b.2)));
    let mut rows = Vec::new();
    for (_, title, d) in &posterior {
        let (names, learned) = read_samples_csv(&d.join(SAMPLES_FILE))?;
        let exact = d.join(EXACT_SAMPLES_FILE);
        let reference = if exact.is_file() {
            Some(read_samples_csv(&exact)?.1)
        } else {
            None
        };
        rows.push(PosteriorRow {
            title: title.clone(),
            names,
            learned,
            reference,
        });
    }
    let mut svgs: Vec<(String, String)> = Vec::new();
    if !rows.is_empty() {
        svgs.push(("posterior.svg".into(), corner_figure(&rows)));
    }
    for (i, (value, d)) in sweeps.iter().enumerate() {
        let (name, table) = SweepTable::read_summary_csv(&d.join(SWEEP_SUMMARY_FILE))?;
        let file = if sweeps.len() == 1 {
            "sweep.svg".to_string()
        } else {
            format!("sweep_{i}.svg")
        };
        svgs.push((file, sweep_figure(&name, value, &table)));
    }
    fs::create_dir_all(out)?;
    let mut run = RunDir::create_plain("figures", out)?;
    for (file, svg) in svgs {
        let p = run.path(&file)?;
        fs::write(&p, svg)?;
        run.record(&p);
    }
    run.finish()
}
