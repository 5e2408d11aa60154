//! Two-way (image/text) global contrastive objective over paired data, its
//! exact oracle, and the moving-average estimator with one statistic per
//! direction.
//!
//! With `S_ij = E_I(x_i)^T E_T(t_j)` the objective is
//! `F = -(2/n) sum_i S_ii + (1/n) sum_i [f(gI_i) + f(gT_i)]`, where
//! `gI_i = (1/n) sum_j exp(S_ij/tau)` and `gT_j = (1/n) sum_i exp(S_ij/tau)`
//! both include the positive pair, and `f(g) = tau ln(eps0 + g)`.
//!
//! The mini-batch estimate of `gI_i` is stratified so that it stays unbiased
//! while containing the positive:
//! `(1/n) exp(S_ii/tau) + ((n-1)/n) * mean_{q in batch, idx(q) != i} exp(S_iq/tau)`,
//! which equals the exact value when the batch is the whole dataset.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::embed::{dot, Dataset};
use crate::encoder::{Encoder, Forward, Gradient};
use crate::error::{Error, Result};
use crate::objective::{GlobalObjectiveConfig, OracleResult, Version};
use crate::optimizers::{read_header_and_values, ParamUpdate, SogclrConfig, ULag};

/// Largest `n` the two-way oracle will enumerate.
pub const TWOWAY_ORACLE_GUARD: usize = 1_000;

/// Default bimodal temperature.
pub const DEFAULT_TAU: f64 = 0.07;

pub fn default_objective() -> GlobalObjectiveConfig {
    GlobalObjectiveConfig {
        tau: DEFAULT_TAU,
        eps0: 0.0,
        version: Version::V1,
    }
}

/// Row-aligned image and text sides; dimensions may differ per side.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    image: Dataset,
    text: Dataset,
}

impl PairedDataset {
    pub fn new(image: Dataset, text: Dataset) -> Result<Self> {
        if image.len() != text.len() {
            return Err(Error::InvalidSize(format!(
                "{} image rows but {} text rows",
                image.len(),
                text.len()
            )));
        }
        Ok(Self { image, text })
    }

    pub fn from_pairs(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let (xs, ts) = pairs.into_iter().unzip();
        Self::new(Dataset::new(xs, None)?, Dataset::new(ts, None)?)
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    pub fn image(&self) -> &Dataset {
        &self.image
    }

    pub fn text(&self) -> &Dataset {
        &self.text
    }

    /// One CSV row per pair: the image columns followed by the text columns.
    /// The split is given by the number of image columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        for i in 0..self.len() {
            let row: Vec<String> = self
                .image
                .point(i)
                .iter()
                .chain(self.text.point(i))
                .map(|x| x.to_string())
                .collect();
            w.write_record(&row)
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, image_cols: usize) -> Result<Self> {
        let rows = Dataset::read_csv(input, false)?;
        if image_cols == 0 || image_cols >= rows.dim() {
            return Err(Error::Parse(format!(
                "image column count {image_cols} must split {} columns into two non-empty sides",
                rows.dim()
            )));
        }
        Self::from_pairs(
            rows.points()
                .iter()
                .map(|r| (r[..image_cols].to_vec(), r[image_cols..].to_vec()))
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path, image_cols: usize) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), image_cols)
    }
}

fn check_encoders<E: Encoder>(enc_i: &E, enc_t: &E, ds: &PairedDataset) -> Result<()> {
    if enc_i.embed_dim() != enc_t.embed_dim() {
        return Err(Error::DimensionMismatch {
            expected: enc_i.embed_dim(),
            got: enc_t.embed_dim(),
        });
    }
    for (enc, side) in [(enc_i, ds.image()), (enc_t, ds.text())] {
        if enc.input_dim() != side.dim() {
            return Err(Error::DimensionMismatch {
                expected: enc.input_dim(),
                got: side.dim(),
            });
        }
    }
    Ok(())
}

/// Accumulates the gradient of `sum_ij coef[i][j] * S_ij` given forward
/// passes on both sides, as a concatenated `[image params, text params]`
/// vector.
fn backprop_pairwise<E: Encoder>(
    enc_i: &E,
    enc_t: &E,
    fi: &[Forward],
    ft: &[Forward],
    coef: &[Vec<f64>],
) -> Gradient {
    let m = enc_i.embed_dim();
    let mut gi = Gradient::zeros(enc_i.num_params());
    let mut gt = Gradient::zeros(enc_t.num_params());
    for (p, row) in coef.iter().enumerate() {
        let mut c = vec![0.0; m];
        for (q, &w) in row.iter().enumerate() {
            for t in 0..m {
                c[t] += w * ft[q].embedding[t];
            }
        }
        enc_i.backward(&fi[p], &c, &mut gi.0);
    }
    for q in 0..ft.len() {
        let mut c = vec![0.0; m];
        for (p, row) in coef.iter().enumerate() {
            for t in 0..m {
                c[t] += row[q] * fi[p].embedding[t];
            }
        }
        enc_t.backward(&ft[q], &c, &mut gt.0);
    }
    Gradient::concat(&[&gi, &gt])
}

fn forward_all<E: Encoder>(
    enc: &E,
    side: &Dataset,
    idx: impl Iterator<Item = usize>,
) -> Result<Vec<Forward>> {
    idx.map(|i| enc.forward(side.point(i))).collect()
}

fn check_guard(n: usize) -> Result<()> {
    if n > TWOWAY_ORACLE_GUARD {
        return Err(Error::GuardExceeded {
            what: "n",
            value: n,
            limit: TWOWAY_ORACLE_GUARD,
        });
    }
    Ok(())
}

/// Exact value, gradient (over `[image params, text params]`) and
/// per-sample `[gI_i, gT_i]` of the two-way objective.
pub fn twoway_oracle_f<E: Encoder>(
    enc_i: &E,
    enc_t: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &PairedDataset,
) -> Result<OracleResult> {
    cfg.validate()?;
    check_guard(ds.len())?;
    check_encoders(enc_i, enc_t, ds)?;
    let n = ds.len();
    let fi = forward_all(enc_i, ds.image(), 0..n)?;
    let ft = forward_all(enc_t, ds.text(), 0..n)?;
    let expo: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (dot(&fi[i].embedding, &ft[j].embedding) / cfg.tau).exp())
                .collect()
        })
        .collect();
    let inv_n = 1.0 / n as f64;
    let g_img: Vec<f64> = expo.iter().map(|r| r.iter().sum::<f64>() * inv_n).collect();
    let g_txt: Vec<f64> = (0..n)
        .map(|j| expo.iter().map(|r| r[j]).sum::<f64>() * inv_n)
        .collect();

    let mut value = 0.0;
    for i in 0..n {
        value += -2.0 * dot(&fi[i].embedding, &ft[i].embedding)
            + cfg.outer(g_img[i])
            + cfg.outer(g_txt[i]);
    }
    value *= inv_n;

    // dF/dS_ij
    let coef: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let w = cfg.outer_grad(g_img[i]) + cfg.outer_grad(g_txt[j]);
                    let diag = if i == j { -2.0 * inv_n } else { 0.0 };
                    diag + inv_n * inv_n * w * expo[i][j] / cfg.tau
                })
                .collect()
        })
        .collect();
    let grad = backprop_pairwise(enc_i, enc_t, &fi, &ft, &coef);
    let per_sample_g = g_img
        .iter()
        .zip(&g_txt)
        .map(|(&a, &b)| vec![a, b])
        .collect();
    Ok(OracleResult {
        value,
        grad,
        per_sample_g,
    })
}

/// Oracle value only, computed directly from similarities, for finite
/// differencing.
pub fn twoway_oracle_value<E: Encoder>(
    enc_i: &E,
    enc_t: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &PairedDataset,
) -> Result<f64> {
    check_guard(ds.len())?;
    check_encoders(enc_i, enc_t, ds)?;
    let n = ds.len();
    let ei: Vec<Vec<f64>> = (0..n)
        .map(|i| enc_i.encode(ds.image().point(i)))
        .collect::<Result<_>>()?;
    let et: Vec<Vec<f64>> = (0..n)
        .map(|i| enc_t.encode(ds.text().point(i)))
        .collect::<Result<_>>()?;
    let s = |i: usize, j: usize| dot(&ei[i], &et[j]);
    let mut value = 0.0;
    for i in 0..n {
        let row = (0..n).map(|j| (s(i, j) / cfg.tau).exp()).sum::<f64>() / n as f64;
        let col = (0..n).map(|j| (s(j, i) / cfg.tau).exp()).sum::<f64>() / n as f64;
        value += -2.0 * s(i, i) + cfg.outer(row) + cfg.outer(col);
    }
    Ok(value / n as f64)
}

/// Dual statistics and the shared parameter update over the concatenated
/// `[image params, text params]` vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BimodalState {
    pub u_img: Vec<f64>,
    pub u_txt: Vec<f64>,
    pub gamma: f64,
    pub eta: f64,
    pub u_lag: ULag,
    pub update: ParamUpdate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwowayReport {
    pub estimator: Gradient,
    /// Post-update `(u_img, u_txt)` per batch position.
    pub u_batch_values: Vec<(f64, f64)>,
}

impl BimodalState {
    /// `d` is the total parameter count of both encoders.
    pub fn new(n: usize, d: usize, cfg: SogclrConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            u_img: vec![0.0; n],
            u_txt: vec![0.0; n],
            gamma: cfg.gamma,
            eta: cfg.eta,
            u_lag: cfg.u_lag,
            update: ParamUpdate::new(cfg.rule, cfg.beta, d)?,
        })
    }

    fn denominator(&self, prev: f64, g: f64, i: usize) -> Result<f64> {
        let d = match self.u_lag {
            ULag::Fresh => (1.0 - self.gamma) * prev + self.gamma * g,
            ULag::Lagged if prev > 0.0 => prev,
            ULag::Lagged => g,
        };
        if !(d > 0.0) {
            return Err(Error::State(format!(
                "statistic for pair {i} is {d} at use time"
            )));
        }
        Ok(d)
    }

    fn commit_u(&mut self, indices: &[usize], gi: &[f64], gt: &[f64]) -> Vec<(f64, f64)> {
        let gamma = self.gamma;
        for (p, &i) in indices.iter().enumerate() {
            self.u_img[i] = (1.0 - gamma) * self.u_img[i] + gamma * gi[p];
            self.u_txt[i] = (1.0 - gamma) * self.u_txt[i] + gamma * gt[p];
        }
        indices
            .iter()
            .map(|&i| (self.u_img[i], self.u_txt[i]))
            .collect()
    }

    /// Header line, then `u_img`, `u_txt`, `v` and (adam-style only) both
    /// moments, one value per line.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let adam_t = self.update.adam.as_ref().map_or(0, |a| a.t);
        writeln!(
            out,
            "bimodal gamma={:?} beta={:?} eta={:?} rule={} u_lag={} n={} d={} adam_t={}",
            self.gamma,
            self.update.beta,
            self.eta,
            self.update.rule,
            self.u_lag,
            self.u_img.len(),
            self.update.v.len(),
            adam_t
        )?;
        for x in self.u_img.iter().chain(&self.u_txt).chain(&self.update.v.0) {
            writeln!(out, "{x:?}")?;
        }
        if let Some(a) = &self.update.adam {
            for x in a.first.iter().chain(&a.second) {
                writeln!(out, "{x:?}")?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let (header, mut values) = read_header_and_values(input, "bimodal")?;
        let (n, d) = (header.usize("n")?, header.usize("d")?);
        let cfg = SogclrConfig {
            gamma: header.f64("gamma")?,
            beta: header.f64("beta")?,
            eta: header.f64("eta")?,
            rule: header.get("rule")?.parse()?,
            u_lag: header.get("u_lag")?.parse()?,
        };
        let mut state = BimodalState::new(n, d, cfg)?;
        state.u_img = values.take(n)?;
        state.u_txt = values.take(n)?;
        state.update.v = Gradient(values.take(d)?);
        if let Some(adam) = &mut state.update.adam {
            adam.t = header.usize("adam_t")? as u64;
            adam.first = values.take(d)?;
            adam.second = values.take(d)?;
        }
        values.finish()?;
        Ok(state)
    }
}

/// Forward passes and similarity exponentials of one batch of pairs.
struct PairBatch {
    indices: Vec<usize>,
    fi: Vec<Forward>,
    ft: Vec<Forward>,
    /// `exp(S_pq / tau)` between image `p` and text `q` of the batch.
    expo: Vec<Vec<f64>>,
    n: usize,
}

impl PairBatch {
    fn new<E: Encoder>(
        enc_i: &E,
        enc_t: &E,
        cfg: &GlobalObjectiveConfig,
        ds: &PairedDataset,
        indices: &[usize],
    ) -> Result<Self> {
        check_encoders(enc_i, enc_t, ds)?;
        let n = ds.len();
        if indices.len() < 2 {
            return Err(Error::InvalidSize(format!(
                "batch of {} pairs; need at least 2",
                indices.len()
            )));
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index, len: n });
        }
        let fi = forward_all(enc_i, ds.image(), indices.iter().copied())?;
        let ft = forward_all(enc_t, ds.text(), indices.iter().copied())?;
        let expo = fi
            .iter()
            .map(|a| {
                ft.iter()
                    .map(|b| (dot(&a.embedding, &b.embedding) / cfg.tau).exp())
                    .collect()
            })
            .collect();
        Ok(Self {
            indices: indices.to_vec(),
            fi,
            ft,
            expo,
            n,
        })
    }

    /// Weight on `exp(S_pq/tau)` in the stratified estimate anchored at `p`
    /// (same for the image row and the text column).
    fn weights(&self, p: usize) -> Result<Vec<f64>> {
        let i = self.indices[p];
        let others = self.indices.iter().filter(|&&j| j != i).count();
        if others == 0 {
            return Err(Error::InvalidSize(format!(
                "batch position {p} (pair {i}) has no other pairs"
            )));
        }
        let n = self.n as f64;
        let off = (n - 1.0) / (n * others as f64);
        Ok(self
            .indices
            .iter()
            .enumerate()
            .map(|(q, &j)| {
                if q == p {
                    1.0 / n
                } else if j == i {
                    0.0
                } else {
                    off
                }
            })
            .collect())
    }

    /// Mini-batch `(gI, gT)` per batch position.
    fn masses(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let bsz = self.indices.len();
        let mut gi = Vec::with_capacity(bsz);
        let mut gt = Vec::with_capacity(bsz);
        for p in 0..bsz {
            let w = self.weights(p)?;
            gi.push((0..bsz).map(|q| w[q] * self.expo[p][q]).sum());
            gt.push((0..bsz).map(|q| w[q] * self.expo[q][p]).sum());
        }
        Ok((gi, gt))
    }
}

/// Mini-batch estimates `(gI, gT)` per batch position.
pub fn twoway_g_minibatch<E: Encoder>(
    enc_i: &E,
    enc_t: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &PairedDataset,
    indices: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    PairBatch::new(enc_i, enc_t, cfg, ds, indices)?.masses()
}

fn check_state(state: &BimodalState, ds: &PairedDataset) -> Result<()> {
    if state.u_img.len() != ds.len() {
        return Err(Error::DimensionMismatch {
            expected: state.u_img.len(),
            got: ds.len(),
        });
    }
    Ok(())
}

/// Moving-average update of both statistics for the batch; returns the
/// post-update values per position.
pub fn twoway_update_u<E: Encoder>(
    state: &mut BimodalState,
    enc_i: &E,
    enc_t: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &PairedDataset,
    indices: &[usize],
) -> Result<Vec<(f64, f64)>> {
    check_state(state, ds)?;
    let (gi, gt) = twoway_g_minibatch(enc_i, enc_t, cfg, ds, indices)?;
    Ok(state.commit_u(indices, &gi, &gt))
}

/// Updates the batch statistics and returns
/// `m = -(2/B) sum_p grad S_pp + (1/B) sum_p [wI_p grad gI_p + wT_p grad gT_p]`
/// with `w = tau / (eps0 + u)`.
pub fn twoway_estimator<E: Encoder>(
    state: &mut BimodalState,
    enc_i: &E,
    enc_t: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &PairedDataset,
    indices: &[usize],
) -> Result<TwowayReport> {
    cfg.validate()?;
    check_state(state, ds)?;
    let batch = PairBatch::new(enc_i, enc_t, cfg, ds, indices)?;
    let (gi, gt) = batch.masses()?;
    let bsz = indices.len();
    let mut w_img = Vec::with_capacity(bsz);
    let mut w_txt = Vec::with_capacity(bsz);
    for (p, &i) in indices.iter().enumerate() {
        w_img.push(cfg.outer_grad(state.denominator(state.u_img[i], gi[p], i)?));
        w_txt.push(cfg.outer_grad(state.denominator(state.u_txt[i], gt[p], i)?));
    }
    let inv_b = 1.0 / bsz as f64;
    let mut coef = vec![vec![0.0; bsz]; bsz];
    for p in 0..bsz {
        coef[p][p] -= 2.0 * inv_b;
        let w = batch.weights(p)?;
        for q in 0..bsz {
            // image anchor p over texts q, and text anchor p over images q
            coef[p][q] += inv_b * w_img[p] * w[q] * batch.expo[p][q] / cfg.tau;
            coef[q][p] += inv_b * w_txt[p] * w[q] * batch.expo[q][p] / cfg.tau;
        }
    }
    let estimator = backprop_pairwise(enc_i, enc_t, &batch.fi, &batch.ft, &coef);
    let u_batch_values = state.commit_u(indices, &gi, &gt);
    Ok(TwowayReport {
        estimator,
        u_batch_values,
    })
}

/// One iteration over both encoders jointly. On failure the statistics and
/// parameters are left as they were.
pub fn twoway_step<E: Encoder>(
    state: &mut BimodalState,
    enc_i: &mut E,
    enc_t: &mut E,
    cfg: &GlobalObjectiveConfig,
    ds: &PairedDataset,
    indices: &[usize],
) -> Result<TwowayReport> {
    let d_img = enc_i.num_params();
    if d_img + enc_t.num_params() != state.update.v.len() {
        return Err(Error::DimensionMismatch {
            expected: state.update.v.len(),
            got: d_img + enc_t.num_params(),
        });
    }
    let saved = state.clone();
    let report = twoway_estimator(state, enc_i, enc_t, cfg, ds, indices)?;
    if !report.estimator.is_finite() {
        *state = saved;
        return Err(Error::Numeric("two-way estimator is not finite".into()));
    }
    let mut params: Vec<f64> = enc_i
        .params()
        .iter()
        .chain(enc_t.params())
        .copied()
        .collect();
    if let Err(e) = state
        .update
        .apply(state.eta, &report.estimator, &mut params)
    {
        *state = saved;
        return Err(e);
    }
    enc_i.params_mut().copy_from_slice(&params[..d_img]);
    enc_t.params_mut().copy_from_slice(&params[d_img..]);
    Ok(report)
}
