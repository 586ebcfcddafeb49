//! Permutation-invariant set embeddings.
//!
//! Members are sorted lexicographically before any reduction so the
//! floating-point summation order does not depend on the input order.

use serde::{Deserialize, Serialize};

use super::made::{Activation, MaskedMlp, MlpCache};
use crate::error::{Error, Result};
use crate::model::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AggregatorKind {
    /// Plain sample mean of the members.
    Mean,
    /// `g(mean(h(x_j)))` with small dense networks `h` and `g`.
    Learned { hidden: usize, embed: usize, output: usize },
}

#[derive(Debug, Clone, PartialEq)]
enum Nets {
    Mean,
    Learned { inner: MaskedMlp, outer: MaskedMlp },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AggregatorState {
    kind: AggregatorKind,
    input_dim: usize,
    params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AggregatorState", into = "AggregatorState")]
pub struct DeepSet {
    kind: AggregatorKind,
    input_dim: usize,
    nets: Nets,
    pub params: Vec<f64>,
}

impl From<DeepSet> for AggregatorState {
    fn from(d: DeepSet) -> Self {
        Self {
            kind: d.kind,
            input_dim: d.input_dim,
            params: d.params,
        }
    }
}

impl TryFrom<AggregatorState> for DeepSet {
    type Error = Error;

    fn try_from(s: AggregatorState) -> Result<Self> {
        let mut d = Self::skeleton(s.kind, s.input_dim);
        if d.params.len() != s.params.len() {
            return Err(Error::DimensionMismatch {
                expected: d.params.len(),
                got: s.params.len(),
            });
        }
        d.params = s.params;
        Ok(d)
    }
}

/// Embedding of one set; `empty` marks the zero vector used for `N = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub value: Vec<f64>,
    pub empty: bool,
}

fn canonical_order(set: &[Vec<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.sort_by(|&a, &b| {
        set[a]
            .iter()
            .zip(&set[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

impl DeepSet {
    fn skeleton(kind: AggregatorKind, input_dim: usize) -> Self {
        let nets = match kind {
            AggregatorKind::Mean => Nets::Mean,
            AggregatorKind::Learned { hidden, embed, output } => Nets::Learned {
                inner: MaskedMlp::dense(input_dim, &[hidden], embed, Activation::Relu),
                outer: MaskedMlp::dense(embed, &[hidden], output, Activation::Relu),
            },
        };
        let n = match &nets {
            Nets::Mean => 0,
            Nets::Learned { inner, outer } => inner.n_params() + outer.n_params(),
        };
        Self {
            kind,
            input_dim,
            nets,
            params: vec![0.0; n],
        }
    }

    pub fn new(kind: AggregatorKind, input_dim: usize, rng: &mut Rng) -> Self {
        let mut d = Self::skeleton(kind, input_dim);
        if let Nets::Learned { inner, outer } = &d.nets {
            let mut p = inner.init_params(rng, 1.0);
            p.extend(outer.init_params(rng, 1.0));
            d.params = p;
        }
        d
    }

    pub fn kind(&self) -> &AggregatorKind {
        &self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        match &self.nets {
            Nets::Mean => self.input_dim,
            Nets::Learned { outer, .. } => outer.n_out(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check(&self, set: &[Vec<f64>]) -> Result<()> {
        match set.iter().find(|m| m.len() != self.input_dim) {
            Some(bad) => Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: bad.len(),
            }),
            None => Ok(()),
        }
    }

    /// Mean of member features (after `h` when learned), in canonical order.
    fn pooled(&self, set: &[Vec<f64>], order: &[usize], cache: &mut MlpCache) -> Vec<f64> {
        let n = set.len() as f64;
        match &self.nets {
            Nets::Mean => {
                let mut acc = vec![0.0; self.input_dim];
                for &j in order {
                    for (a, v) in acc.iter_mut().zip(&set[j]) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a / n).collect()
            }
            Nets::Learned { inner, .. } => {
                let p_in = &self.params[..inner.n_params()];
                let mut acc = vec![0.0; inner.n_out()];
                for &j in order {
                    let h = inner.forward(p_in, &set[j], cache);
                    for (a, v) in acc.iter_mut().zip(h) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a / n).collect()
            }
        }
    }

    pub fn embed(&self, set: &[Vec<f64>]) -> Result<Embedding> {
        self.check(set)?;
        if set.is_empty() {
            return Ok(Embedding {
                value: vec![0.0; self.output_dim()],
                empty: true,
            });
        }
        let order = canonical_order(set);
        let mut cache = MlpCache::default();
        let pooled = self.pooled(set, &order, &mut cache);
        let value = match &self.nets {
            Nets::Mean => pooled,
            Nets::Learned { inner, outer } => outer
                .forward(&self.params[inner.n_params()..], &pooled, &mut cache)
                .to_vec(),
        };
        Ok(Embedding { value, empty: false })
    }

    /// Embeds many sets; member features are computed in one pass over the
    /// concatenated members and then reduced per set.
    pub fn embed_batch(&self, sets: &[&[Vec<f64>]]) -> Result<Vec<Embedding>> {
        for s in sets {
            self.check(s)?;
        }
        let orders: Vec<Vec<usize>> = sets.iter().map(|s| canonical_order(s)).collect();
        let mut cache = MlpCache::default();
        let features: Vec<Vec<f64>> = match &self.nets {
            Nets::Mean => Vec::new(),
            Nets::Learned { inner, .. } => {
                let p_in = &self.params[..inner.n_params()];
                sets.iter()
                    .zip(&orders)
                    .flat_map(|(s, o)| o.iter().map(move |&j| &s[j]))
                    .map(|m| inner.forward(p_in, m, &mut cache).to_vec())
                    .collect()
            }
        };
        let mut cursor = 0;
        let mut out = Vec::with_capacity(sets.len());
        for (s, o) in sets.iter().zip(&orders) {
            if s.is_empty() {
                out.push(Embedding {
                    value: vec![0.0; self.output_dim()],
                    empty: true,
                });
                continue;
            }
            let n = s.len() as f64;
            let value = match &self.nets {
                Nets::Mean => {
                    let mut acc = vec![0.0; self.input_dim];
                    for &j in o {
                        for (a, v) in acc.iter_mut().zip(&s[j]) {
                            *a += v;
                        }
                    }
                    acc.iter().map(|a| a / n).collect()
                }
                Nets::Learned { inner, outer } => {
                    let mut acc = vec![0.0; inner.n_out()];
                    for f in &features[cursor..cursor + s.len()] {
                        for (a, v) in acc.iter_mut().zip(f) {
                            *a += v;
                        }
                    }
                    let pooled: Vec<f64> = acc.iter().map(|a| a / n).collect();
                    outer
                        .forward(&self.params[inner.n_params()..], &pooled, &mut cache)
                        .to_vec()
                }
            };
            cursor += s.len();
            out.push(Embedding { value, empty: false });
        }
        Ok(out)
    }

    /// Accumulates `dL/dparams` into `grad` given `dL/dembedding`.
    pub fn backward(&self, set: &[Vec<f64>], grad_output: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check(set)?;
        let Nets::Learned { inner, outer } = &self.nets else {
            return Ok(());
        };
        if set.is_empty() {
            return Ok(());
        }
        let order = canonical_order(set);
        let n_inner = inner.n_params();
        let mut cache = MlpCache::default();
        let pooled = self.pooled(set, &order, &mut cache);
        let (p_in, p_out) = self.params.split_at(n_inner);
        let (g_in, g_out) = grad.split_at_mut(n_inner);
        outer.forward(p_out, &pooled, &mut cache);
        let mut g_pooled = vec![0.0; pooled.len()];
        outer.backward(p_out, &cache, grad_output, g_out, Some(&mut g_pooled));
        let n = set.len() as f64;
        let g_member: Vec<f64> = g_pooled.iter().map(|g| g / n).collect();
        for &j in &order {
            inner.forward(p_in, &set[j], &mut cache);
            inner.backward(p_in, &cache, &g_member, g_in, None);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seeded_rng;
    use rand::Rng as _;

    fn learned() -> DeepSet {
        DeepSet::new(
            AggregatorKind::Learned {
                hidden: 8,
                embed: 4,
                output: 3,
            },
            2,
            &mut seeded_rng(7),
        )
    }

    fn random_set(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>() * 10.0])
            .collect()
    }

    #[test]
    fn mean_mode_is_the_average() {
        let d = DeepSet::new(AggregatorKind::Mean, 2, &mut seeded_rng(0));
        let e = d.embed(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(e.value, vec![2.0, 4.0]);
        assert!(!e.empty);
    }

    #[test]
    fn empty_set_is_flagged_zero() {
        let d = learned();
        let e = d.embed(&[]).unwrap();
        assert!(e.empty);
        assert_eq!(e.value, vec![0.0; 3]);
    }

    #[test]
    fn permutation_gives_identical_bits() {
        let d = learned();
        let set = random_set(9, 1);
        let mut rev = set.clone();
        rev.reverse();
        rev.swap(0, 4);
        assert_eq!(d.embed(&set).unwrap(), d.embed(&rev).unwrap());
    }

    #[test]
    fn batch_matches_sequential() {
        let d = learned();
        let sets: Vec<Vec<Vec<f64>>> = (0..5).map(|i| random_set(i, 10 + i as u64)).collect();
        let refs: Vec<&[Vec<f64>]> = sets.iter().map(|s| s.as_slice()).collect();
        let batch = d.embed_batch(&refs).unwrap();
        for (s, b) in sets.iter().zip(&batch) {
            assert_eq!(&d.embed(s).unwrap(), b);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut d = learned();
        let set = random_set(4, 2);
        let w = [0.5, -1.0, 2.0];
        let loss = |d: &DeepSet| {
            d.embed(&set)
                .unwrap()
                .value
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut grad = vec![0.0; d.n_params()];
        d.backward(&set, &w, &mut grad).unwrap();
        let h = 1e-6;
        for i in 0..d.n_params() {
            let orig = d.params[i];
            d.params[i] = orig + h;
            let up = loss(&d);
            d.params[i] = orig - h;
            let dn = loss(&d);
            d.params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}");
        }
    }

    #[test]
    fn wrong_member_dimension() {
        assert!(learned().embed(&[vec![1.0]]).is_err());
    }
}
