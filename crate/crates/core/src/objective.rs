//! Contrastive losses, the mini-batch and exact negative-mass estimators,
//! and the brute-force oracle for the global objective and its gradient.
//!
//! Every `g` quantity here is an average over its index set:
//! `g(i, k; S) = (1/|S|) sum_{z in S} exp(E(A_k x_i)^T E(z) / tau)`, and the
//! outer function is `f(g) = tau * ln(eps0 + g)`. Objective values omit the
//! parameter-independent constant `tau * ln |S_i|` relative to the summed
//! form; gradients are unaffected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::{dot, AugmentationFamily, Dataset, MiniBatch, NegativeSet};
use crate::encoder::{Encoder, Forward, Gradient};
use crate::error::{Error, Result};

/// Largest `n * K` the exhaustive oracle will enumerate.
pub const ORACLE_GUARD: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Version {
    /// Expectation over the anchor augmentation outside the log.
    #[default]
    V1,
    /// Expectation over the anchor augmentation inside the log.
    V2,
}

impl FromStr for Version {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Self::V1),
            "v2" => Ok(Self::V2),
            _ => Err(Error::Config(format!("unknown objective version {s:?}"))),
        }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::V1 => "v1",
            Self::V2 => "v2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalObjectiveConfig {
    pub tau: f64,
    pub eps0: f64,
    pub version: Version,
}

impl Default for GlobalObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            eps0: 0.0,
            version: Version::V1,
        }
    }
}

impl GlobalObjectiveConfig {
    pub fn new(tau: f64, eps0: f64, version: Version) -> Result<Self> {
        let cfg = Self { tau, eps0, version };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.eps0 >= 0.0 && self.eps0.is_finite()) {
            return Err(Error::Config(format!(
                "eps0 must be >= 0, got {}",
                self.eps0
            )));
        }
        Ok(())
    }

    /// `f(g) = tau * ln(eps0 + g)`
    pub fn outer(&self, g: f64) -> f64 {
        self.tau * (self.eps0 + g).ln()
    }

    /// `f'(g) = tau / (eps0 + g)`
    pub fn outer_grad(&self, g: f64) -> f64 {
        self.tau / (self.eps0 + g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// Objective value without the additive constant.
    pub value: f64,
    pub grad: Gradient,
    /// Exact averaged `g` per `[i][k]`.
    pub per_sample_g: Vec<Vec<f64>>,
}

impl OracleResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("oracle result serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// `E_A g` per point: the quantity the SogCLR statistic tracks.
    pub fn mean_g(&self) -> Vec<f64> {
        self.per_sample_g
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect()
    }
}

/// Forward passes of every augmented view `A_k(x_i)`.
pub struct ViewTable {
    views: Vec<Vec<Forward>>,
}

impl ViewTable {
    pub fn new<E: Encoder>(enc: &E, ds: &Dataset, fam: &AugmentationFamily) -> Result<Self> {
        let n = ds.len();
        if n * fam.len() > ORACLE_GUARD {
            return Err(Error::GuardExceeded {
                what: "n*K",
                value: n * fam.len(),
                limit: ORACLE_GUARD,
            });
        }
        let views = (0..n)
            .map(|i| {
                (0..fam.len())
                    .map(|k| enc.forward(&fam.apply(k, ds.point(i))?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { views })
    }

    pub fn n(&self) -> usize {
        self.views.len()
    }

    pub fn k(&self) -> usize {
        self.views[0].len()
    }

    pub fn embedding(&self, i: usize, k: usize) -> &[f64] {
        &self.views[i][k].embedding
    }

    pub fn g_exact(&self, tau: f64, i: usize, k: usize) -> f64 {
        let anchor = self.embedding(i, k);
        let neg = NegativeSet::new(i, self.n(), self.k());
        let total: f64 = neg
            .iter()
            .map(|(j, l)| (dot(anchor, self.embedding(j, l)) / tau).exp())
            .sum();
        total / neg.len() as f64
    }

    /// Mean over ordered augmentation pairs and negatives of the squared
    /// similarity gap `|e(A x_i).z - e(A' x_i).z|^2`.
    pub fn aug_consistency_eps(&self, i: usize) -> f64 {
        let k = self.k();
        let neg = NegativeSet::new(i, self.n(), k);
        if neg.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for (j, l) in neg.iter() {
            let z = self.embedding(j, l);
            let sims: Vec<f64> = (0..k).map(|a| dot(self.embedding(i, a), z)).collect();
            for a in &sims {
                for b in &sims {
                    total += (a - b) * (a - b);
                }
            }
        }
        total / (neg.len() * k * k) as f64
    }

    pub fn mean_aug_consistency_eps(&self) -> f64 {
        (0..self.n())
            .map(|i| self.aug_consistency_eps(i))
            .sum::<f64>()
            / self.n() as f64
    }

    pub fn oracle<E: Encoder>(&self, enc: &E, cfg: &GlobalObjectiveConfig) -> OracleResult {
        let (n, k, tau) = (self.n(), self.k(), cfg.tau);
        let m = self.views[0][0].embedding.len();
        let mut cot = vec![vec![vec![0.0; m]; k]; n];

        // alignment over ordered pairs (k, k'), k == k' included
        let align_scale = 1.0 / (n * k * k) as f64;
        let mut align = 0.0;
        for i in 0..n {
            for a in 0..k {
                for b in 0..k {
                    let (ea, eb) = (self.embedding(i, a), self.embedding(i, b));
                    align += dot(ea, eb);
                    for (c, v) in cot[i][a].iter_mut().zip(eb) {
                        *c -= 2.0 * align_scale * v;
                    }
                }
            }
        }
        let mut value = -align_scale * align;

        let per_sample_g: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..k).map(|a| self.g_exact(tau, i, a)).collect())
            .collect();
        let inv_n = 1.0 / n as f64;
        let weights: Vec<Vec<f64>> = match cfg.version {
            Version::V1 => per_sample_g
                .iter()
                .map(|row| {
                    value += inv_n * row.iter().map(|&g| cfg.outer(g)).sum::<f64>() / k as f64;
                    row.iter()
                        .map(|&g| inv_n / k as f64 * cfg.outer_grad(g))
                        .collect()
                })
                .collect(),
            Version::V2 => per_sample_g
                .iter()
                .map(|row| {
                    let mean = row.iter().sum::<f64>() / k as f64;
                    value += inv_n * cfg.outer(mean);
                    vec![inv_n / k as f64 * cfg.outer_grad(mean); k]
                })
                .collect(),
        };

        let c = 1.0 / ((n - 1) * k) as f64;
        for i in 0..n {
            for a in 0..k {
                let w = weights[i][a] * c / tau;
                for j in (0..n).filter(|&j| j != i) {
                    for l in 0..k {
                        let coef =
                            w * (dot(self.embedding(i, a), self.embedding(j, l)) / tau).exp();
                        for t in 0..m {
                            cot[i][a][t] += coef * self.views[j][l].embedding[t];
                            cot[j][l][t] += coef * self.views[i][a].embedding[t];
                        }
                    }
                }
            }
        }

        let mut grad = Gradient::zeros(enc.num_params());
        for i in 0..n {
            for a in 0..k {
                enc.backward(&self.views[i][a], &cot[i][a], &mut grad.0);
            }
        }
        OracleResult {
            value,
            grad,
            per_sample_g,
        }
    }
}

fn check_point(ds: &Dataset, i: usize) -> Result<()> {
    if i >= ds.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: ds.len(),
        });
    }
    Ok(())
}

/// Averaged negative mass of anchor `A_k(x_i)` over the whole negative set.
pub fn g_exact<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    i: usize,
    aug_k: usize,
    ds: &Dataset,
    fam: &AugmentationFamily,
) -> Result<f64> {
    check_point(ds, i)?;
    let anchor = enc.encode(&fam.apply(aug_k, ds.point(i))?)?;
    let neg = NegativeSet::new(i, ds.len(), fam.len());
    let mut total = 0.0;
    for (j, l) in neg.iter() {
        let z = enc.encode(&fam.apply(l, ds.point(j))?)?;
        total += (dot(&anchor, &z) / cfg.tau).exp();
    }
    Ok(total / neg.len() as f64)
}

/// Embeddings of the in-batch negatives of point `i`: both views of every
/// batch member whose dataset index differs from `i`.
fn batch_negatives<E: Encoder>(
    enc: &E,
    i: usize,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<Vec<Vec<f64>>> {
    batch.check(ds.len(), fam.len())?;
    let mut out = Vec::with_capacity(2 * batch.len());
    for q in 0..batch.len() {
        let j = batch.indices[q];
        if j == i {
            continue;
        }
        out.push(enc.encode(&fam.apply(batch.aug_a[q], ds.point(j))?)?);
        out.push(enc.encode(&fam.apply(batch.aug_b[q], ds.point(j))?)?);
    }
    if out.is_empty() {
        return Err(Error::InvalidSize(format!(
            "no in-batch negatives for point {i}"
        )));
    }
    Ok(out)
}

/// Mini-batch estimate of [`g_exact`] over the in-batch negative set.
#[allow(clippy::too_many_arguments)]
pub fn g_minibatch<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    i: usize,
    aug_k: usize,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<f64> {
    check_point(ds, i)?;
    let anchor = enc.encode(&fam.apply(aug_k, ds.point(i))?)?;
    let negs = batch_negatives(enc, i, ds, fam, batch)?;
    let total: f64 = negs.iter().map(|z| (dot(&anchor, z) / cfg.tau).exp()).sum();
    Ok(total / negs.len() as f64)
}

/// The mini-batch InfoNCE loss with the summed (not averaged) normalizer:
/// `-s(a, b)/tau + ln sum_{z in B_i} exp(s(a, z)/tau)`.
#[allow(clippy::too_many_arguments)]
pub fn local_loss<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    i: usize,
    aug_a: usize,
    aug_b: usize,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<f64> {
    check_point(ds, i)?;
    let ea = enc.encode(&fam.apply(aug_a, ds.point(i))?)?;
    let eb = enc.encode(&fam.apply(aug_b, ds.point(i))?)?;
    let logits: Vec<f64> = batch_negatives(enc, i, ds, fam, batch)?
        .iter()
        .map(|z| dot(&ea, z) / cfg.tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(-dot(&ea, &eb) / cfg.tau + lse)
}

fn positive_sim<E: Encoder>(
    enc: &E,
    i: usize,
    aug_a: usize,
    aug_b: usize,
    ds: &Dataset,
    fam: &AugmentationFamily,
) -> Result<f64> {
    let ea = enc.encode(&fam.apply(aug_a, ds.point(i))?)?;
    let eb = enc.encode(&fam.apply(aug_b, ds.point(i))?)?;
    Ok(dot(&ea, &eb))
}

/// `-s(A x_i, A' x_i) + tau ln(eps0 + g(i, A))`.
pub fn global_loss_v1<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    i: usize,
    aug_a: usize,
    aug_b: usize,
    ds: &Dataset,
    fam: &AugmentationFamily,
) -> Result<f64> {
    check_point(ds, i)?;
    let pos = positive_sim(enc, i, aug_a, aug_b, ds, fam)?;
    Ok(-pos + cfg.outer(g_exact(enc, cfg, i, aug_a, ds, fam)?))
}

/// As [`global_loss_v1`] with the anchor augmentation averaged inside the log.
pub fn global_loss_v2<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    i: usize,
    aug_a: usize,
    aug_b: usize,
    ds: &Dataset,
    fam: &AugmentationFamily,
) -> Result<f64> {
    check_point(ds, i)?;
    let pos = positive_sim(enc, i, aug_a, aug_b, ds, fam)?;
    let mut mean = 0.0;
    for k in 0..fam.len() {
        mean += g_exact(enc, cfg, i, k, ds, fam)?;
    }
    mean /= fam.len() as f64;
    Ok(-pos + cfg.outer(mean))
}

/// Exact value, gradient and per-sample `g` of the global objective
/// (version from `cfg`), by full enumeration.
pub fn oracle_f<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
) -> Result<OracleResult> {
    cfg.validate()?;
    Ok(ViewTable::new(enc, ds, fam)?.oracle(enc, cfg))
}

/// Oracle objective value only, for finite differencing.
pub fn oracle_value<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
) -> Result<f64> {
    let table = ViewTable::new(enc, ds, fam)?;
    let (n, k) = (table.n(), table.k());
    let mut value = 0.0;
    for i in 0..n {
        let mut align = 0.0;
        for a in 0..k {
            for b in 0..k {
                align += dot(table.embedding(i, a), table.embedding(i, b));
            }
        }
        let gs: Vec<f64> = (0..k).map(|a| table.g_exact(cfg.tau, i, a)).collect();
        let comp = match cfg.version {
            Version::V1 => gs.iter().map(|&g| cfg.outer(g)).sum::<f64>() / k as f64,
            Version::V2 => cfg.outer(gs.iter().sum::<f64>() / k as f64),
        };
        value += -align / (k * k) as f64 + comp;
    }
    Ok(value / n as f64)
}

/// Squared augmentation-consistency gap of point `i`.
pub fn aug_consistency_eps<E: Encoder>(
    enc: &E,
    ds: &Dataset,
    fam: &AugmentationFamily,
    i: usize,
) -> Result<f64> {
    check_point(ds, i)?;
    Ok(ViewTable::new(enc, ds, fam)?.aug_consistency_eps(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{BatchSampler, SamplingMode};
    use crate::encoder::{finite_diff_grad, Architecture, EncoderParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: f64, eps0: f64, version: Version) -> GlobalObjectiveConfig {
        GlobalObjectiveConfig::new(tau, eps0, version).unwrap()
    }

    /// Linear encoder that projects everything onto the first axis, so every
    /// embedding is `(1, 0)` for inputs with positive first coordinate.
    fn collapsed() -> (EncoderParams, Dataset, AugmentationFamily) {
        let enc = EncoderParams::linear(vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let ds = Dataset::new(
            vec![
                vec![1.0, 0.3, -0.2],
                vec![2.0, -1.0, 0.5],
                vec![0.5, 0.0, 1.0],
            ],
            None,
        )
        .unwrap();
        let fam = AugmentationFamily::from_deltas(vec![vec![0.0, 0.1, 0.2], vec![0.1, -0.2, 0.0]])
            .unwrap();
        (enc, ds, fam)
    }

    fn seeded(seed: u64, n: usize, k: usize) -> (EncoderParams, Dataset, AugmentationFamily) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                (0..3)
                    .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                    .collect()
            })
            .collect();
        let ds = Dataset::new(pts, None).unwrap();
        let fam = AugmentationFamily::gaussian(k, 3, 0.3, seed + 100).unwrap();
        let enc = EncoderParams::random(Architecture::OneHidden, 3, 5, 3, seed + 200).unwrap();
        (enc, ds, fam)
    }

    #[test]
    fn g_identical_embeddings() {
        let (enc, ds, fam) = collapsed();
        let c = cfg(0.1, 0.0, Version::V1);
        let g = g_exact(&enc, &c, 0, 1, &ds, &fam).unwrap();
        assert!((g / 10f64.exp() - 1.0).abs() < 1e-12);
        let batch = MiniBatch::new(vec![0, 1, 2], vec![0, 1, 0], vec![1, 1, 0]).unwrap();
        let gb = g_minibatch(&enc, &c, 0, 0, &ds, &fam, &batch).unwrap();
        assert!((gb / 10f64.exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn g_orthogonal_embeddings() {
        // identity encoder on one-hot inputs with zero perturbations
        let enc = EncoderParams::linear(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let ds = Dataset::new(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            None,
        )
        .unwrap();
        let fam = AugmentationFamily::from_deltas(vec![vec![0.0; 3]]).unwrap();
        for tau in [0.07, 0.5, 2.0] {
            let c = cfg(tau, 0.0, Version::V1);
            assert!((g_exact(&enc, &c, 1, 0, &ds, &fam).unwrap() - 1.0).abs() < 1e-15);
            let batch = MiniBatch::new(vec![0, 1, 2], vec![0; 3], vec![0; 3]).unwrap();
            assert!((g_minibatch(&enc, &c, 2, 0, &ds, &fam, &batch).unwrap() - 1.0).abs() < 1e-15);
        }
        // n = 2, K = 1: the single negative term at similarity 0
        let two = Dataset::new(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]], None).unwrap();
        assert!(
            (g_exact(&enc, &cfg(0.1, 0.0, Version::V1), 0, 0, &two, &fam).unwrap() - 1.0).abs()
                < 1e-15
        );
    }

    #[test]
    fn g_minibatch_without_negatives_errors() {
        let (enc, ds, fam) = collapsed();
        let batch = MiniBatch::new(vec![1, 1], vec![0, 1], vec![1, 0]).unwrap();
        assert!(g_minibatch(&enc, &cfg(0.1, 0.0, Version::V1), 1, 0, &ds, &fam, &batch).is_err());
    }

    #[test]
    fn g_exact_matches_double_loop() {
        let (enc, ds, fam) = seeded(3, 5, 3);
        let c = cfg(0.2, 0.0, Version::V1);
        for i in 0..5 {
            for k in 0..3 {
                let anchor = enc.encode(&fam.apply(k, ds.point(i)).unwrap()).unwrap();
                let mut brute = 0.0;
                let mut count = 0;
                for j in 0..5 {
                    if j == i {
                        continue;
                    }
                    for l in 0..3 {
                        let z = enc.encode(&fam.apply(l, ds.point(j)).unwrap()).unwrap();
                        brute +=
                            (anchor.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / 0.2).exp();
                        count += 1;
                    }
                }
                let g = g_exact(&enc, &c, i, k, &ds, &fam).unwrap();
                assert!((g - brute / count as f64).abs() < 1e-12 * g);
            }
        }
    }

    #[test]
    fn local_loss_identical_embeddings() {
        let (enc, ds, fam) = collapsed();
        for tau in [0.1, 1.0] {
            let c = cfg(tau, 0.0, Version::V1);
            let b2 = MiniBatch::new(vec![0, 1], vec![0, 1], vec![1, 0]).unwrap();
            let l = local_loss(&enc, &c, 0, 0, 1, &ds, &fam, &b2).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-10, "{l}");
            let b3 = MiniBatch::new(vec![0, 1, 2], vec![0, 1, 1], vec![1, 0, 0]).unwrap();
            let l = local_loss(&enc, &c, 0, 0, 1, &ds, &fam, &b3).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-10, "{l}");
        }
    }

    #[test]
    fn local_loss_is_softmax_cross_entropy() {
        let (enc, ds, fam) = seeded(8, 6, 3);
        let c = cfg(0.1, 0.0, Version::V1);
        let batch = MiniBatch::new(vec![4, 0, 2, 5], vec![0, 2, 1, 1], vec![2, 2, 0, 1]).unwrap();
        // independent transcription: -log softmax of the positive against
        // the in-batch negatives only, computed without a max shift
        let emb = |k: usize, i: usize| enc.encode(&fam.apply(k, ds.point(i)).unwrap()).unwrap();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (ea, eb) = (emb(0, 4), emb(2, 4));
        let mut denom = 0.0;
        for q in 1..4 {
            let j = batch.indices[q];
            denom += (d(&ea, &emb(batch.aug_a[q], j)) / 0.1).exp();
            denom += (d(&ea, &emb(batch.aug_b[q], j)) / 0.1).exp();
        }
        let expected = -((d(&ea, &eb) / 0.1).exp() / denom).ln();
        let got = local_loss(&enc, &c, 4, 0, 2, &ds, &fam, &batch).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn global_losses_degenerate_cases() {
        let (enc, ds, fam) = collapsed();
        let c = cfg(0.1, 0.0, Version::V1);
        assert!(global_loss_v1(&enc, &c, 0, 0, 1, &ds, &fam).unwrap().abs() < 1e-12);
        assert!(global_loss_v2(&enc, &c, 0, 0, 1, &ds, &fam).unwrap().abs() < 1e-12);

        // mutually orthogonal points with K = 1: positive similarity 1,
        // every negative at similarity 0
        let id = EncoderParams::linear(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let ds3 = Dataset::new(
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 2.0, 0.0],
            ],
            None,
        )
        .unwrap();
        let fam1 = AugmentationFamily::from_deltas(vec![vec![0.0; 3]]).unwrap();
        for i in 0..3 {
            let l = global_loss_v1(&id, &cfg(0.3, 0.0, Version::V1), i, 0, 0, &ds3, &fam1).unwrap();
            assert!((l + 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn global_loss_v1_direct_formula() {
        let (enc, ds, fam) = seeded(21, 5, 2);
        let c = cfg(0.1, 1e-8, Version::V1);
        let emb = |k: usize, i: usize| enc.encode(&fam.apply(k, ds.point(i)).unwrap()).unwrap();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..5 {
            let (ea, eb) = (emb(1, i), emb(0, i));
            let mut sum = 0.0;
            for j in (0..5).filter(|&j| j != i) {
                for l in 0..2 {
                    sum += (d(&ea, &emb(l, j)) / 0.1).exp();
                }
            }
            // tau * L with L the summed-form loss and eps' = eps0 |S_i|,
            // minus the constant tau ln |S_i|
            let s_len = 8.0;
            let tau_l = -0.1 * (((d(&ea, &eb) / 0.1).exp()) / (1e-8 * s_len + sum)).ln();
            let expected = tau_l - 0.1 * f64::ln(s_len);
            let got = global_loss_v1(&enc, &c, i, 1, 0, &ds, &fam).unwrap();
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn v2_equals_v1_for_single_augmentation() {
        let (enc, ds, fam) = seeded(5, 4, 1);
        let c = cfg(0.1, 0.0, Version::V1);
        for i in 0..4 {
            let a = global_loss_v1(&enc, &c, i, 0, 0, &ds, &fam).unwrap();
            let b = global_loss_v2(&enc, &c, i, 0, 0, &ds, &fam).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn jensen_between_versions() {
        let (enc, ds, fam) = seeded(13, 5, 3);
        let c = cfg(0.1, 0.0, Version::V1);
        for i in 0..5 {
            let v1: f64 = (0..3)
                .map(|k| global_loss_v1(&enc, &c, i, k, 0, &ds, &fam).unwrap())
                .sum::<f64>()
                / 3.0;
            let v2: f64 = (0..3)
                .map(|k| global_loss_v2(&enc, &c, i, k, 0, &ds, &fam).unwrap())
                .sum::<f64>()
                / 3.0;
            assert!(v1 <= v2 + 1e-15, "point {i}: v1 {v1} > v2 {v2}");
        }
    }

    #[test]
    fn oracle_identical_embeddings() {
        let (enc, ds, fam) = collapsed();
        for version in [Version::V1, Version::V2] {
            let r = oracle_f(&enc, &cfg(0.1, 0.0, version), &ds, &fam).unwrap();
            assert!(r.value.abs() < 1e-12);
            assert!(r.per_sample_g.iter().flatten().all(|&g| g > 0.0));
        }
    }

    #[test]
    fn oracle_two_orthogonal_points() {
        let enc = EncoderParams::linear(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let ds = Dataset::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], None).unwrap();
        let fam = AugmentationFamily::from_deltas(vec![vec![0.0, 0.0]]).unwrap();
        let r = oracle_f(&enc, &cfg(0.1, 0.0, Version::V1), &ds, &fam).unwrap();
        assert!((r.value + 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_gradient_matches_finite_differences() {
        for seed in 0..4 {
            let (enc, ds, fam) = seeded(seed, 4, 2);
            for version in [Version::V1, Version::V2] {
                let c = cfg(0.2, 1e-3 * seed as f64, version);
                let r = oracle_f(&enc, &c, &ds, &fam).unwrap();
                assert!((r.value - oracle_value(&enc, &c, &ds, &fam).unwrap()).abs() < 1e-12);
                let fd = finite_diff_grad(
                    |w| oracle_value(&enc.with_params(w), &c, &ds, &fam),
                    enc.params(),
                    1e-5,
                )
                .unwrap();
                assert!(
                    r.grad.rel_err(&fd) < 1e-5,
                    "seed {seed} {version}: {}",
                    r.grad.rel_err(&fd)
                );
            }
        }
    }

    #[test]
    fn oracle_guard() {
        let enc = EncoderParams::random(Architecture::Linear, 1, 0, 2, 0).unwrap();
        let ds = Dataset::new((0..5001).map(|i| vec![i as f64 + 1.0]).collect(), None).unwrap();
        let fam = AugmentationFamily::gaussian(2, 1, 0.1, 0).unwrap();
        assert!(matches!(
            oracle_f(&enc, &GlobalObjectiveConfig::default(), &ds, &fam),
            Err(Error::GuardExceeded { .. })
        ));
    }

    #[test]
    fn oracle_json_round_trip() {
        let (enc, ds, fam) = seeded(1, 3, 2);
        let r = oracle_f(&enc, &cfg(0.1, 0.0, Version::V2), &ds, &fam).unwrap();
        let json = r.to_json();
        assert!(json.starts_with("{\"value\":"));
        assert_eq!(OracleResult::from_json(&json).unwrap(), r);
    }

    #[test]
    fn eps_diagnostic_cases() {
        let (enc, ds, _) = seeded(2, 4, 2);
        let same = AugmentationFamily::from_deltas(vec![vec![0.1, 0.2, 0.3]; 3]).unwrap();
        let single = AugmentationFamily::from_deltas(vec![vec![0.1, 0.2, 0.3]]).unwrap();
        for i in 0..4 {
            assert_eq!(aug_consistency_eps(&enc, &ds, &same, i).unwrap(), 0.0);
            assert_eq!(aug_consistency_eps(&enc, &ds, &single, i).unwrap(), 0.0);
        }
    }

    #[test]
    fn minibatch_g_is_unbiased_small() {
        let (enc, ds, fam) = seeded(4, 5, 2);
        let c = cfg(0.5, 0.0, Version::V1);
        let exact = g_exact(&enc, &c, 1, 0, &ds, &fam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sampler = BatchSampler::new(SamplingMode::EpochShuffle, 5, 2, 3).unwrap();
        let (mut sum, mut sq, mut m) = (0.0, 0.0, 0usize);
        for _ in 0..20_000 {
            let b = sampler.sample(&mut rng);
            if let Ok(g) = g_minibatch(&enc, &c, 1, 0, &ds, &fam, &b) {
                sum += g;
                sq += g * g;
                m += 1;
            }
        }
        let mean = sum / m as f64;
        let se = ((sq / m as f64 - mean * mean) / m as f64).sqrt();
        assert!(
            (mean - exact).abs() < 4.0 * se,
            "{mean} vs {exact} (se {se})"
        );
    }
}
