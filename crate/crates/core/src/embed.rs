//! Vectors, datasets, the finite augmentation family, similarity primitives
//! and mini-batch sampling.
//!
//! Augmentation indices are zero-based throughout (`0..K`).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const ZERO_NORM: f64 = 1e-30;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Inner product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(dot(u, v).clamp(-1.0, 1.0))
}

/// `n` points sharing one input dimension, with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    points: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidSize(format!(
                "dataset needs at least 2 points, got {}",
                points.len()
            )));
        }
        let dim = points[0].len();
        if dim == 0 {
            return Err(Error::InvalidSize(
                "input dimension must be positive".into(),
            ));
        }
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("dataset contains a non-finite entry".into()));
            }
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::DimensionMismatch {
                    expected: points.len(),
                    got: l.len(),
                });
            }
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Writes one comma-separated row per point, labels as a trailing column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
            if let Some(l) = &self.labels {
                row.push(l[i].to_string());
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    /// Reads the table written by [`Dataset::write_csv`]. `labeled` says
    /// whether the last column holds integer class labels.
    pub fn read_csv<R: Read>(input: R, labeled: bool) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let mut fields: Vec<&str> = rec.iter().collect();
            if labeled {
                let last = fields
                    .pop()
                    .ok_or_else(|| Error::Parse(format!("row {row}: empty")))?;
                labels.push(
                    last.parse::<usize>()
                        .map_err(|e| Error::Parse(format!("row {row}: label {last:?}: {e}")))?,
                );
            }
            let p = fields
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {row}: {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            points.push(p);
        }
        Dataset::new(points, labeled.then_some(labels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path, labeled: bool) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), labeled)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// A finite family of additive perturbations `A_k(x) = x + delta_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationFamily {
    deltas: Vec<Vec<f64>>,
    seed: u64,
}

impl AugmentationFamily {
    /// Draws `k` perturbations with i.i.d. `N(0, scale^2)` entries.
    pub fn gaussian(k: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!(
                "augmentation scale must be >= 0, got {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        let deltas = (0..k)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut fam = Self::from_deltas(deltas)?;
        fam.seed = seed;
        Ok(fam)
    }

    pub fn from_deltas(deltas: Vec<Vec<f64>>) -> Result<Self> {
        if deltas.is_empty() {
            return Err(Error::InvalidSize("augmentation family is empty".into()));
        }
        let dim = deltas[0].len();
        if let Some(d) = deltas.iter().find(|d| d.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: d.len(),
            });
        }
        Ok(Self { deltas, seed: 0 })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn deltas(&self) -> &[Vec<f64>] {
        &self.deltas
    }

    pub fn apply(&self, k: usize, x: &[f64]) -> Result<Vec<f64>> {
        let delta = self.deltas.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.deltas.len(),
        })?;
        if delta.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: delta.len(),
                got: x.len(),
            });
        }
        Ok(x.iter().zip(delta).map(|(a, b)| a + b).collect())
    }

    /// All `n * K` augmented views, indexed `[i][k]`.
    pub fn augment_all(&self, ds: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
        (0..ds.len())
            .map(|i| {
                (0..self.len())
                    .map(|k| self.apply(k, ds.point(i)))
                    .collect()
            })
            .collect()
    }
}

/// The negatives of point `owner`: every augmentation of every other point.
/// Never materialized.
#[derive(Clone, Copy, Debug)]
pub struct NegativeSet {
    pub owner: usize,
    pub n: usize,
    pub k: usize,
}

impl NegativeSet {
    pub fn new(owner: usize, n: usize, k: usize) -> Self {
        Self { owner, n, k }
    }

    pub fn len(&self) -> usize {
        (self.n - 1) * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Yields `(j, k)` pairs, `j != owner`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.k;
        (0..self.n)
            .filter(move |&j| j != self.owner)
            .flat_map(move |j| (0..k).map(move |a| (j, a)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiniBatch {
    pub indices: Vec<usize>,
    pub aug_a: Vec<usize>,
    pub aug_b: Vec<usize>,
}

impl MiniBatch {
    pub fn new(indices: Vec<usize>, aug_a: Vec<usize>, aug_b: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::InvalidSize(format!(
                "mini-batch needs at least 2 members, got {}",
                indices.len()
            )));
        }
        if aug_a.len() != indices.len() || aug_b.len() != indices.len() {
            return Err(Error::DimensionMismatch {
                expected: indices.len(),
                got: aug_a.len().min(aug_b.len()),
            });
        }
        Ok(Self {
            indices,
            aug_a,
            aug_b,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub(crate) fn check(&self, n: usize, k: usize) -> Result<()> {
        for (&i, (&a, &b)) in self.indices.iter().zip(self.aug_a.iter().zip(&self.aug_b)) {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if a >= k || b >= k {
                return Err(Error::IndexOutOfRange {
                    index: a.max(b),
                    len: k,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Independent uniform draws of dataset indices.
    WithReplacement,
    /// Shuffled passes over the dataset; a trailing partial batch is dropped.
    #[default]
    EpochShuffle,
}

impl FromStr for SamplingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_replacement" => Ok(Self::WithReplacement),
            "epoch_shuffle" => Ok(Self::EpochShuffle),
            _ => Err(Error::Config(format!("unknown sampling mode {s:?}"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::WithReplacement => "with_replacement",
            Self::EpochShuffle => "epoch_shuffle",
        })
    }
}

/// Draws mini-batches; holds the epoch permutation in `EpochShuffle` mode.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    mode: SamplingMode,
    n: usize,
    k: usize,
    batch_size: usize,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(mode: SamplingMode, n: usize, k: usize, batch_size: usize) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::InvalidSize(format!(
                "batch size must be >= 2 (no in-batch negatives), got {batch_size}"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidSize("augmentation family is empty".into()));
        }
        if mode == SamplingMode::EpochShuffle && batch_size > n {
            return Err(Error::InvalidSize(format!(
                "batch size {batch_size} exceeds dataset size {n} under epoch_shuffle"
            )));
        }
        Ok(Self {
            mode,
            n,
            k,
            batch_size,
            perm: (0..n).collect(),
            cursor: n,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> MiniBatch {
        let b = self.batch_size;
        let indices: Vec<usize> = match self.mode {
            SamplingMode::WithReplacement => (0..b).map(|_| rng.random_range(0..self.n)).collect(),
            SamplingMode::EpochShuffle => {
                if self.cursor + b > self.n {
                    self.perm.shuffle(rng);
                    self.cursor = 0;
                }
                let out = self.perm[self.cursor..self.cursor + b].to_vec();
                self.cursor += b;
                out
            }
        };
        let aug_a = (0..b).map(|_| rng.random_range(0..self.k)).collect();
        let aug_b = (0..b).map(|_| rng.random_range(0..self.k)).collect();
        MiniBatch {
            indices,
            aug_a,
            aug_b,
        }
    }
}

/// One-shot convenience around [`BatchSampler`]. In `EpochShuffle` mode a
/// single call draws `b` distinct indices.
pub fn sample_minibatch<R: Rng + ?Sized>(
    ds: &Dataset,
    fam: &AugmentationFamily,
    b: usize,
    rng: &mut R,
    mode: SamplingMode,
) -> Result<MiniBatch> {
    Ok(BatchSampler::new(mode, ds.len(), fam.len(), b)?.sample(rng))
}
