//! Sample-based evaluation: debiased Sinkhorn divergence, concentration
//! around a point, and the repetition protocol with median and quartiles.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    /// Entropic regularization, in units of the squared Euclidean cost.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop once no dual potential moves by more than this.
    pub tolerance: f64,
    /// Geometric decay of the regularization during annealing.
    pub scaling: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iterations: 2000,
            tolerance: 1e-6,
            scaling: 0.5,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(Error::Config(format!("scaling {} must lie in (0, 1)", self.scaling)));
        }
        if self.max_iterations == 0 || !(self.tolerance > 0.0) {
            return Err(Error::Config("max_iterations and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    pub value: f64,
    /// False when any of the three transport problems hit the iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `-eps log( (1/m) sum_j exp((g_j - C(x, y_j)) / eps) )`.
fn soft_min(x: &[f64], ys: &[Vec<f64>], g: &[f64], eps: f64) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for (y, gj) in ys.iter().zip(g) {
        mx = mx.max((gj - sq_dist(x, y)) / eps);
    }
    let s: f64 = ys
        .iter()
        .zip(g)
        .map(|(y, gj)| ((gj - sq_dist(x, y)) / eps - mx).exp())
        .sum();
    -eps * (mx + (s / ys.len() as f64).ln())
}

fn c_transform(xs: &[Vec<f64>], ys: &[Vec<f64>], g: &[f64], eps: f64) -> Vec<f64> {
    xs.par_iter().map(|x| soft_min(x, ys, g, eps)).collect()
}

fn max_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

fn diameter_sq(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let dim = xs[0].len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in xs.iter().chain(ys) {
        for k in 0..dim {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    lo.iter().zip(&hi).map(|(l, h)| (h - l) * (h - l)).sum()
}

fn schedule(diam: f64, cfg: &SinkhornConfig) -> Vec<f64> {
    let mut eps = Vec::new();
    let mut e = diam.max(cfg.epsilon);
    while e > cfg.epsilon {
        eps.push(e);
        e *= cfg.scaling;
    }
    eps.push(cfg.epsilon);
    eps
}

fn average(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Entropic transport cost `OT_eps(P, Q)` between uniform clouds. Both
/// potentials are updated together and averaged with their previous values,
/// so swapping the clouds swaps the iterates exactly.
fn ot_cross(xs: &[Vec<f64>], ys: &[Vec<f64>], cfg: &SinkhornConfig) -> (f64, bool, usize) {
    let mut f = vec![0.0; xs.len()];
    let mut g = vec![0.0; ys.len()];
    let eps_list = schedule(diameter_sq(xs, ys), cfg);
    let mut iters = 0;
    for &eps in &eps_list[..eps_list.len() - 1] {
        let (tf, tg) = (c_transform(xs, ys, &g, eps), c_transform(ys, xs, &f, eps));
        f = average(&f, &tf);
        g = average(&g, &tg);
        iters += 1;
    }
    let mut converged = false;
    while iters < cfg.max_iterations {
        let (tf, tg) = (
            c_transform(xs, ys, &g, cfg.epsilon),
            c_transform(ys, xs, &f, cfg.epsilon),
        );
        let (nf, ng) = (average(&f, &tf), average(&g, &tg));
        iters += 1;
        let delta = max_change(&nf, &f).max(max_change(&ng, &g));
        f = nf;
        g = ng;
        if delta < cfg.tolerance {
            converged = true;
            break;
        }
    }
    let value = f.iter().sum::<f64>() / xs.len() as f64 + g.iter().sum::<f64>() / ys.len() as f64;
    (value, converged, iters)
}

/// `OT_eps(P, P)` through the symmetric averaged fixed point.
fn ot_self(xs: &[Vec<f64>], cfg: &SinkhornConfig) -> (f64, bool, usize) {
    let mut f = vec![0.0; xs.len()];
    let eps_list = schedule(diameter_sq(xs, xs), cfg);
    let mut iters = 0;
    for &eps in &eps_list[..eps_list.len() - 1] {
        f = average(&f, &c_transform(xs, xs, &f, eps));
        iters += 1;
    }
    let mut converged = false;
    while iters < cfg.max_iterations {
        let nf = average(&f, &c_transform(xs, xs, &f, cfg.epsilon));
        iters += 1;
        let delta = max_change(&nf, &f);
        f = nf;
        if delta < cfg.tolerance {
            converged = true;
            break;
        }
    }
    (2.0 * f.iter().sum::<f64>() / xs.len() as f64, converged, iters)
}

fn check_clouds(p: &[Vec<f64>], q: &[Vec<f64>]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::invalid("sample clouds must be nonempty"));
    }
    let d = p[0].len();
    if let Some(bad) = p.iter().chain(q).find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    if p.iter().chain(q).flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("sample clouds contain non-finite values"));
    }
    Ok(())
}

/// Debiased divergence `OT(P,Q) - OT(P,P)/2 - OT(Q,Q)/2` with squared
/// Euclidean cost.
pub fn sinkhorn_divergence(p: &[Vec<f64>], q: &[Vec<f64>], cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    cfg.validate()?;
    check_clouds(p, q)?;
    let (pq, c1, i1) = ot_cross(p, q, cfg);
    let (pp, c2, i2) = ot_self(p, cfg);
    let (qq, c3, i3) = ot_self(q, cfg);
    Ok(SinkhornResult {
        value: pq - 0.5 * pp - 0.5 * qq,
        converged: c1 && c2 && c3,
        iterations: i1.max(i2).max(i3),
    })
}

/// Divergence between a cloud and the point mass at `theta_star`.
pub fn dirac_concentration(samples: &[Vec<f64>], theta_star: &[f64], cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    sinkhorn_divergence(samples, &[theta_star.to_vec()], cfg)
}

/// Maps points of a box onto the unit cube.
pub fn to_unit_box(points: &[Vec<f64>], bounds: &[(f64, f64)]) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .map(|p| {
            if p.len() != bounds.len() {
                return Err(Error::DimensionMismatch {
                    expected: bounds.len(),
                    got: p.len(),
                });
            }
            Ok(p.iter().zip(bounds).map(|(v, (l, u))| (v - l) / (u - l)).collect())
        })
        .collect()
}

/// Repetitions per sweep value and the minimum that must succeed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentProtocol {
    pub n_repetitions: usize,
    pub min_successes: usize,
}

impl Default for ExperimentProtocol {
    fn default() -> Self {
        Self {
            n_repetitions: 9,
            min_successes: 3,
        }
    }
}

impl ExperimentProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_repetitions < 3 || self.min_successes < 3 || self.min_successes > self.n_repetitions {
            return Err(Error::Config(format!(
                "protocol needs 3 <= min_successes <= n_repetitions, got {} of {}",
                self.min_successes, self.n_repetitions
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawValue {
    pub sweep: f64,
    pub repetition: usize,
    pub value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub raw: Vec<RawValue>,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Evaluates `metric(sweep, repetition)` over the grid. Failed repetitions
/// are recorded; a sweep value with fewer than `min_successes` successes
/// fails the sweep.
pub fn run_sweep<F>(protocol: &ExperimentProtocol, sweep: &[f64], metric: F) -> Result<SweepTable>
where
    F: Fn(f64, usize) -> Result<f64> + Sync,
{
    protocol.validate()?;
    let grid: Vec<(f64, usize)> = sweep
        .iter()
        .flat_map(|&s| (0..protocol.n_repetitions).map(move |r| (s, r)))
        .collect();
    let raw: Vec<RawValue> = grid
        .par_iter()
        .map(|&(s, r)| match metric(s, r) {
            Ok(v) if v.is_finite() => RawValue {
                sweep: s,
                repetition: r,
                value: Some(v),
                error: None,
            },
            Ok(v) => RawValue {
                sweep: s,
                repetition: r,
                value: None,
                error: Some(format!("non-finite value {v}")),
            },
            Err(e) => RawValue {
                sweep: s,
                repetition: r,
                value: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut rows = Vec::with_capacity(sweep.len());
    for &s in sweep {
        let mut vals: Vec<f64> = raw.iter().filter(|v| v.sweep == s).filter_map(|v| v.value).collect();
        if vals.len() < protocol.min_successes {
            return Err(Error::TooFewRepetitions {
                ok: vals.len(),
                total: protocol.n_repetitions,
                min: protocol.min_successes,
            });
        }
        vals.sort_by(f64::total_cmp);
        rows.push(SweepRow {
            sweep: s,
            median: quantile(&vals, 0.5),
            q1: quantile(&vals, 0.25),
            q3: quantile(&vals, 0.75),
            n_ok: vals.len(),
        });
    }
    Ok(SweepTable { rows, raw })
}

impl SweepTable {
    /// Raw values as CSV with columns `sweep,repetition,value`; failed
    /// repetitions have an empty value.
    /// Writes `(sweep_name, repetition, value)` rows; failed repetitions
    /// leave the value empty.
    pub fn write_raw_csv(&self, path: &Path, sweep_name: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([sweep_name, "repetition", "value"])?;
        for r in &self.raw {
            let v = r.value.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.sweep.to_string(), r.repetition.to_string(), v])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path, sweep_name: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([sweep_name, "median", "q1", "q3", "n_ok"])?;
        for r in &self.rows {
            w.write_record([
                r.sweep.to_string(),
                r.median.to_string(),
                r.q1.to_string(),
                r.q3.to_string(),
                r.n_ok.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a summary CSV, returning the sweep column name and its rows.
    pub fn read_summary_csv(path: &Path) -> Result<(String, Vec<SweepRow>)> {
        let mut rdr = csv::Reader::from_path(path)?;
        let name = rdr.headers()?.get(0).unwrap_or("sweep").to_string();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad or missing column {i} in {}", path.display())))
            };
            rows.push(SweepRow {
                sweep: num(0)?,
                median: num(1)?,
                q1: num(2)?,
                q3: num(3)?,
                n_ok: num(4)? as usize,
            });
        }
        Ok((name, rows))
    }

    /// Reads a raw CSV and recomputes the summary.
    pub fn read_raw_csv(path: &Path, protocol: &ExperimentProtocol) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut raw = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<&str> {
                rec.get(i)
                    .ok_or_else(|| Error::Format(format!("missing column {i} in {}", path.display())))
            };
            let sweep: f64 = parse(0)?
                .parse()
                .map_err(|_| Error::Format(format!("bad sweep value in {}", path.display())))?;
            let repetition: usize = parse(1)?
                .parse()
                .map_err(|_| Error::Format(format!("bad repetition in {}", path.display())))?;
            let cell = parse(2)?;
            let value = if cell.is_empty() {
                None
            } else {
                Some(
                    cell.parse()
                        .map_err(|_| Error::Format(format!("bad value in {}", path.display())))?,
                )
            };
            raw.push(RawValue {
                sweep,
                repetition,
                value,
                error: None,
            });
        }
        let mut sweeps: Vec<f64> = raw.iter().map(|r| r.sweep).collect();
        sweeps.sort_by(f64::total_cmp);
        sweeps.dedup();
        let lookup = raw.clone();
        let table = run_sweep(
            &ExperimentProtocol {
                n_repetitions: protocol.n_repetitions.max(3),
                min_successes: protocol.min_successes,
            },
            &sweeps,
            |s, r| {
                lookup
                    .iter()
                    .find(|v| v.sweep == s && v.repetition == r)
                    .and_then(|v| v.value)
                    .ok_or_else(|| Error::invalid("missing repetition"))
            },
        )?;
        Ok(Self { rows: table.rows, raw })
    }
}
