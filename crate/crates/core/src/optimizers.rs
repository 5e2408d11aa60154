//! SimCLR (plain and momentum) and SogCLR updates, plus the dynamic
//! contrastive loss surrogate whose frozen-weight gradient reproduces the
//! SogCLR estimator.
//!
//! All estimators are symmetrized over the two views of each batch member.
//! In-batch negatives of position `p` are both views of every member whose
//! dataset index differs from `indices[p]`.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::embed::{dot, AugmentationFamily, Dataset, MiniBatch};
use crate::encoder::{Encoder, Forward, Gradient};
use crate::error::{Error, Result};
use crate::objective::GlobalObjectiveConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StepRule {
    #[default]
    Momentum,
    AdamStyle,
}

impl FromStr for StepRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "momentum" => Ok(Self::Momentum),
            "adam" | "adam_style" => Ok(Self::AdamStyle),
            _ => Err(Error::Config(format!("unknown step rule {s:?}"))),
        }
    }
}

impl fmt::Display for StepRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Momentum => "momentum",
            Self::AdamStyle => "adam_style",
        })
    }
}

/// Which value of the per-sample statistic weights the current step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ULag {
    /// Per-view statistic after this step's moving-average update.
    #[default]
    Fresh,
    /// Statistic from before this step; an unseen sample (`u_i == 0`) is
    /// seeded with the current batch estimate.
    Lagged,
}

impl FromStr for ULag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(Self::Fresh),
            "lagged" => Ok(Self::Lagged),
            _ => Err(Error::Config(format!("unknown u_lag {s:?}"))),
        }
    }
}

impl fmt::Display for ULag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fresh => "fresh",
            Self::Lagged => "lagged",
        })
    }
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl AdamMoments {
    pub fn new(d: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: vec![0.0; d],
            second: vec![0.0; d],
        }
    }

    fn step(&mut self, eta: f64, g: &Gradient, params: &mut [f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((w, &gi), m1), m2) in params
            .iter_mut()
            .zip(&g.0)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m1 = self.beta1 * *m1 + (1.0 - self.beta1) * gi;
            *m2 = self.beta2 * *m2 + (1.0 - self.beta2) * gi * gi;
            *w -= eta * (*m1 / c1) / ((*m2 / c2).sqrt() + self.eps);
        }
    }
}

/// Momentum buffer plus optional Adam moments: the parameter-update half
/// shared by every optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamUpdate {
    pub rule: StepRule,
    pub beta: f64,
    pub v: Gradient,
    pub adam: Option<AdamMoments>,
}

impl ParamUpdate {
    pub fn new(rule: StepRule, beta: f64, d: usize) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Config(format!(
                "beta must lie in (0, 1], got {beta}"
            )));
        }
        Ok(Self {
            rule,
            beta,
            v: Gradient::zeros(d),
            adam: (rule == StepRule::AdamStyle).then(|| AdamMoments::new(d)),
        })
    }

    /// Momentum: `v <- (1-beta) v + beta m; w <- w - eta v`. Adam-style
    /// applies bias-corrected moments to `m` directly.
    pub fn apply(&mut self, eta: f64, m: &Gradient, params: &mut [f64]) -> Result<()> {
        if m.len() != params.len() || m.len() != self.v.len() {
            return Err(Error::DimensionMismatch {
                expected: self.v.len(),
                got: m.len(),
            });
        }
        match (&mut self.adam, self.rule) {
            (Some(adam), StepRule::AdamStyle) => adam.step(eta, m, params),
            _ => {
                for (v, g) in self.v.0.iter_mut().zip(&m.0) {
                    *v = (1.0 - self.beta) * *v + self.beta * g;
                }
                for (w, v) in params.iter_mut().zip(&self.v.0) {
                    *w -= eta * v;
                }
            }
        }
        if params.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }

    fn write_body<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for x in &self.v.0 {
            writeln!(out, "{x:?}")?;
        }
        if let Some(a) = &self.adam {
            for x in a.first.iter().chain(&a.second) {
                writeln!(out, "{x:?}")?;
            }
        }
        Ok(())
    }
}

/// Forward passes of both views of every batch member.
pub(crate) struct BatchViews {
    indices: Vec<usize>,
    a: Vec<Forward>,
    b: Vec<Forward>,
}

impl BatchViews {
    pub(crate) fn new<E: Encoder>(
        enc: &E,
        ds: &Dataset,
        fam: &AugmentationFamily,
        batch: &MiniBatch,
    ) -> Result<Self> {
        batch.check(ds.len(), fam.len())?;
        let mut a = Vec::with_capacity(batch.len());
        let mut b = Vec::with_capacity(batch.len());
        for q in 0..batch.len() {
            let x = ds.point(batch.indices[q]);
            a.push(enc.forward(&fam.apply(batch.aug_a[q], x)?)?);
            b.push(enc.forward(&fam.apply(batch.aug_b[q], x)?)?);
        }
        Ok(Self {
            indices: batch.indices.clone(),
            a,
            b,
        })
    }

    fn len(&self) -> usize {
        self.indices.len()
    }

    fn view(&self, p: usize, second: bool) -> &Forward {
        if second {
            &self.b[p]
        } else {
            &self.a[p]
        }
    }

    /// `(q, second_view)` of every in-batch negative of position `p`.
    fn members(&self, p: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
        let i = self.indices[p];
        (0..self.len())
            .filter(move |&q| self.indices[q] != i)
            .flat_map(|q| [(q, false), (q, true)])
    }

    fn member_count(&self, p: usize) -> usize {
        let i = self.indices[p];
        2 * self.indices.iter().filter(|&&j| j != i).count()
    }

    fn positive(&self, p: usize) -> f64 {
        dot(&self.a[p].embedding, &self.b[p].embedding)
    }

    /// Averaged negative mass per position, for the first and second view
    /// as anchor.
    pub(crate) fn neg_mass(&self, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut ga = Vec::with_capacity(self.len());
        let mut gb = Vec::with_capacity(self.len());
        for p in 0..self.len() {
            let count = self.member_count(p);
            if count == 0 {
                return Err(Error::InvalidSize(format!(
                    "batch position {p} (point {}) has no in-batch negatives",
                    self.indices[p]
                )));
            }
            let mass = |anchor: &Forward| {
                self.members(p)
                    .map(|(q, s)| (dot(&anchor.embedding, &self.view(q, s).embedding) / tau).exp())
                    .sum::<f64>()
                    / count as f64
            };
            ga.push(mass(&self.a[p]));
            gb.push(mass(&self.b[p]));
        }
        Ok((ga, gb))
    }

    /// `(1/B) sum_p [ -grad s(a_p, b_p) + (w_a[p]/2) grad g_p(a) + (w_b[p]/2) grad g_p(b) ]`
    pub(crate) fn weighted_gradient<E: Encoder>(
        &self,
        enc: &E,
        tau: f64,
        w_a: &[f64],
        w_b: &[f64],
    ) -> Gradient {
        let bsz = self.len();
        let m = self.a[0].embedding.len();
        let inv_b = 1.0 / bsz as f64;
        // cotangents indexed [position][view]
        let mut cot = vec![[vec![0.0; m], vec![0.0; m]]; bsz];
        for p in 0..bsz {
            for t in 0..m {
                cot[p][0][t] -= inv_b * self.b[p].embedding[t];
                cot[p][1][t] -= inv_b * self.a[p].embedding[t];
            }
            let scale = inv_b * 0.5 / (self.member_count(p) as f64 * tau);
            for (second, w) in [(false, w_a[p]), (true, w_b[p])] {
                let anchor = &self.view(p, second).embedding;
                for (q, s) in self.members(p) {
                    let z = &self.view(q, s).embedding;
                    let coef = scale * w * (dot(anchor, z) / tau).exp();
                    for t in 0..m {
                        cot[p][usize::from(second)][t] += coef * z[t];
                        cot[q][usize::from(s)][t] += coef * anchor[t];
                    }
                }
            }
        }
        let mut grad = Gradient::zeros(enc.num_params());
        for (p, [ca, cb]) in cot.iter().enumerate() {
            enc.backward(&self.a[p], ca, &mut grad.0);
            enc.backward(&self.b[p], cb, &mut grad.0);
        }
        grad
    }
}

fn check_same_dataset_size(u_len: usize, ds: &Dataset) -> Result<()> {
    if u_len != ds.len() {
        return Err(Error::DimensionMismatch {
            expected: u_len,
            got: ds.len(),
        });
    }
    Ok(())
}

fn ensure_finite(g: &Gradient, what: &str) -> Result<()> {
    if !g.is_finite() {
        return Err(Error::Numeric(format!("{what} is not finite")));
    }
    Ok(())
}

/// Symmetrized mini-batch surrogate whose gradient is [`simclr_estimator`]:
/// `(1/B) sum_p [ -s(a_p, b_p) + (f(g_p(a)) + f(g_p(b))) / 2 ]`.
pub fn simclr_surrogate_loss<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<f64> {
    let views = BatchViews::new(enc, ds, fam, batch)?;
    let (ga, gb) = views.neg_mass(cfg.tau)?;
    let total: f64 = (0..views.len())
        .map(|p| -views.positive(p) + 0.5 * (cfg.outer(ga[p]) + cfg.outer(gb[p])))
        .sum();
    Ok(total / views.len() as f64)
}

/// The SimCLR gradient estimator: the global-loss gradient with the
/// negative mass and its gradient both replaced by in-batch estimates.
pub fn simclr_estimator<E: Encoder>(
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<Gradient> {
    let views = BatchViews::new(enc, ds, fam, batch)?;
    let (ga, gb) = views.neg_mass(cfg.tau)?;
    let w_a: Vec<f64> = ga.iter().map(|&g| cfg.outer_grad(g)).collect();
    let w_b: Vec<f64> = gb.iter().map(|&g| cfg.outer_grad(g)).collect();
    Ok(views.weighted_gradient(enc, cfg.tau, &w_a, &w_b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimclrState {
    pub eta: f64,
    pub update: ParamUpdate,
}

impl SimclrState {
    /// `beta = 1` gives the plain update `w <- w - eta * estimator`.
    pub fn new(eta: f64, beta: f64, d: usize) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {eta}")));
        }
        Ok(Self {
            eta,
            update: ParamUpdate::new(StepRule::Momentum, beta, d)?,
        })
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "simclr eta={:?} beta={:?} d={}",
            self.eta,
            self.update.beta,
            self.update.v.len()
        )?;
        self.update.write_body(&mut out)
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let (header, mut values) = read_header_and_values(input, "simclr")?;
        let d = header.usize("d")?;
        let mut state = SimclrState::new(header.f64("eta")?, header.f64("beta")?, d)?;
        state.update.v = Gradient(values.take(d)?);
        values.finish()?;
        Ok(state)
    }
}

/// One SimCLR step; returns the estimator that was applied.
pub fn simclr_step<E: Encoder>(
    state: &mut SimclrState,
    enc: &mut E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<Gradient> {
    let est = simclr_estimator(enc, cfg, ds, fam, batch)?;
    ensure_finite(&est, "SimCLR estimator")?;
    state.update.apply(state.eta, &est, enc.params_mut())?;
    Ok(est)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SogclrConfig {
    pub gamma: f64,
    pub beta: f64,
    pub eta: f64,
    pub rule: StepRule,
    pub u_lag: ULag,
}

impl Default for SogclrConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            beta: 0.9,
            eta: 0.1,
            rule: StepRule::Momentum,
            u_lag: ULag::Fresh,
        }
    }
}

impl SogclrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SogclrState {
    /// Per-sample moving average of the negative mass, zero-initialized.
    pub u: Vec<f64>,
    pub gamma: f64,
    pub eta: f64,
    pub u_lag: ULag,
    pub update: ParamUpdate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub estimator: Gradient,
    /// Post-update `u` for each batch position.
    pub u_batch_values: Vec<f64>,
    pub surrogate_loss: f64,
}

impl SogclrState {
    pub fn new(n: usize, d: usize, cfg: SogclrConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            u: vec![0.0; n],
            gamma: cfg.gamma,
            eta: cfg.eta,
            u_lag: cfg.u_lag,
            update: ParamUpdate::new(cfg.rule, cfg.beta, d)?,
        })
    }

    /// Denominators used to weight each view's negative gradient, from the
    /// pre-step statistic and this batch's negative masses.
    fn denominators(
        &self,
        indices: &[usize],
        ga: &[f64],
        gb: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut da = Vec::with_capacity(indices.len());
        let mut db = Vec::with_capacity(indices.len());
        for (p, &i) in indices.iter().enumerate() {
            let prev = self.u[i];
            let (a, b) = match self.u_lag {
                ULag::Fresh => (
                    (1.0 - self.gamma) * prev + self.gamma * ga[p],
                    (1.0 - self.gamma) * prev + self.gamma * gb[p],
                ),
                ULag::Lagged => {
                    let seed = if prev > 0.0 {
                        prev
                    } else {
                        0.5 * (ga[p] + gb[p])
                    };
                    (seed, seed)
                }
            };
            if !(a > 0.0 && b > 0.0) {
                return Err(Error::State(format!(
                    "statistic for point {i} is {} at use time",
                    a.min(b)
                )));
            }
            da.push(a);
            db.push(b);
        }
        Ok((da, db))
    }

    fn commit_u(&mut self, indices: &[usize], ga: &[f64], gb: &[f64]) -> Vec<f64> {
        for (p, &i) in indices.iter().enumerate() {
            self.u[i] = (1.0 - self.gamma) * self.u[i] + self.gamma * 0.5 * (ga[p] + gb[p]);
        }
        indices.iter().map(|&i| self.u[i]).collect()
    }

    /// Header line, then `u`, `v` and (adam-style only) first and second
    /// moments, one value per line in that order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let adam_t = self.update.adam.as_ref().map_or(0, |a| a.t);
        writeln!(
            out,
            "sogclr gamma={:?} beta={:?} eta={:?} rule={} u_lag={} n={} d={} adam_t={}",
            self.gamma,
            self.update.beta,
            self.eta,
            self.update.rule,
            self.u_lag,
            self.u.len(),
            self.update.v.len(),
            adam_t
        )?;
        for x in &self.u {
            writeln!(out, "{x:?}")?;
        }
        self.update.write_body(&mut out)
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let (header, mut values) = read_header_and_values(input, "sogclr")?;
        let (n, d) = (header.usize("n")?, header.usize("d")?);
        let cfg = SogclrConfig {
            gamma: header.f64("gamma")?,
            beta: header.f64("beta")?,
            eta: header.f64("eta")?,
            rule: header.get("rule")?.parse()?,
            u_lag: header.get("u_lag")?.parse()?,
        };
        let mut state = SogclrState::new(n, d, cfg)?;
        state.u = values.take(n)?;
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

/// Moving-average update of the statistic for every batch member; returns
/// the post-update values per batch position.
pub fn sogclr_update_u<E: Encoder>(
    state: &mut SogclrState,
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<Vec<f64>> {
    check_same_dataset_size(state.u.len(), ds)?;
    let views = BatchViews::new(enc, ds, fam, batch)?;
    let (ga, gb) = views.neg_mass(cfg.tau)?;
    Ok(state.commit_u(&batch.indices, &ga, &gb))
}

/// Updates the batch statistics and returns the SogCLR estimator `m_t`.
pub fn sogclr_estimator<E: Encoder>(
    state: &mut SogclrState,
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<StepReport> {
    check_same_dataset_size(state.u.len(), ds)?;
    let views = BatchViews::new(enc, ds, fam, batch)?;
    let (ga, gb) = views.neg_mass(cfg.tau)?;
    let (da, db) = state.denominators(&batch.indices, &ga, &gb)?;
    let w_a: Vec<f64> = da.iter().map(|&u| cfg.outer_grad(u)).collect();
    let w_b: Vec<f64> = db.iter().map(|&u| cfg.outer_grad(u)).collect();
    let estimator = views.weighted_gradient(enc, cfg.tau, &w_a, &w_b);
    let surrogate = dcl_value_on(&views, &dcl_weights_on(&views, cfg, &da, &db));
    let u_batch_values = state.commit_u(&batch.indices, &ga, &gb);
    Ok(StepReport {
        estimator,
        u_batch_values,
        surrogate_loss: surrogate,
    })
}

/// One SogCLR iteration: statistic update, estimator, parameter update.
pub fn sogclr_step<E: Encoder>(
    state: &mut SogclrState,
    enc: &mut E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<StepReport> {
    let saved: Vec<f64> = batch
        .indices
        .iter()
        .map(|&i| state.u.get(i).copied().unwrap_or(0.0))
        .collect();
    let restore = |state: &mut SogclrState| {
        for (&i, &v) in batch.indices.iter().zip(&saved).rev() {
            state.u[i] = v;
        }
    };
    let report = sogclr_estimator(state, enc, cfg, ds, fam, batch)?;
    if !report.estimator.is_finite() || report.u_batch_values.iter().any(|u| !u.is_finite()) {
        restore(state);
        return Err(Error::Numeric("SogCLR estimator is not finite".into()));
    }
    let before = enc.params().to_vec();
    if let Err(e) = state
        .update
        .apply(state.eta, &report.estimator, enc.params_mut())
    {
        enc.params_mut().copy_from_slice(&before);
        restore(state);
        return Err(e);
    }
    Ok(report)
}

/// Frozen weights `p_{p,z} = exp(s(anchor, z)/tau) / (eps0 + u)` of the
/// dynamic contrastive loss, per batch position, anchor view and member.
#[derive(Clone, Debug, PartialEq)]
pub struct DclWeights {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

/// Builds the dynamic contrastive loss at the current parameters from the
/// pre-step state, returning its value and the frozen weights.
pub fn dcl_surrogate<E: Encoder>(
    state: &SogclrState,
    enc: &E,
    cfg: &GlobalObjectiveConfig,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<(f64, DclWeights)> {
    check_same_dataset_size(state.u.len(), ds)?;
    let views = BatchViews::new(enc, ds, fam, batch)?;
    let (ga, gb) = views.neg_mass(cfg.tau)?;
    let (da, db) = state.denominators(&batch.indices, &ga, &gb)?;
    let weights = dcl_weights_on(&views, cfg, &da, &db);
    Ok((dcl_value_on(&views, &weights), weights))
}

fn dcl_weights_on(
    views: &BatchViews,
    cfg: &GlobalObjectiveConfig,
    da: &[f64],
    db: &[f64],
) -> DclWeights {
    let weights_for = |p: usize, second: bool, denom: f64| -> Vec<f64> {
        let anchor = &views.view(p, second).embedding;
        views
            .members(p)
            .map(|(q, s)| {
                (dot(anchor, &views.view(q, s).embedding) / cfg.tau).exp() / (cfg.eps0 + denom)
            })
            .collect()
    };
    DclWeights {
        first: (0..views.len())
            .map(|p| weights_for(p, false, da[p]))
            .collect(),
        second: (0..views.len())
            .map(|p| weights_for(p, true, db[p]))
            .collect(),
    }
}

/// Dynamic contrastive loss with frozen weights:
/// `(1/B) sum_p (1/2) sum_{view} [ -s(a_p, b_p) + (1/|B_p|) sum_z p_z s(anchor, z) ]`.
pub fn dcl_surrogate_value<E: Encoder>(
    weights: &DclWeights,
    enc: &E,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<f64> {
    let views = BatchViews::new(enc, ds, fam, batch)?;
    Ok(dcl_value_on(&views, weights))
}

fn dcl_value_on(views: &BatchViews, weights: &DclWeights) -> f64 {
    let mut total = 0.0;
    for p in 0..views.len() {
        let count = views.member_count(p) as f64;
        for (second, w) in [(false, &weights.first[p]), (true, &weights.second[p])] {
            let anchor = &views.view(p, second).embedding;
            let weighted: f64 = views
                .members(p)
                .zip(w)
                .map(|((q, s), pz)| pz * dot(anchor, &views.view(q, s).embedding))
                .sum();
            total += 0.5 * (-views.positive(p) + weighted / count);
        }
    }
    total / views.len() as f64
}

/// Analytic parameter gradient of [`dcl_surrogate_value`] with the weights
/// held fixed.
pub fn dcl_surrogate_grad<E: Encoder>(
    weights: &DclWeights,
    enc: &E,
    ds: &Dataset,
    fam: &AugmentationFamily,
    batch: &MiniBatch,
) -> Result<Gradient> {
    let views = BatchViews::new(enc, ds, fam, batch)?;
    let bsz = views.len();
    let m = enc.embed_dim();
    // cotangents indexed [position][view]
    let mut cot = vec![[vec![0.0; m], vec![0.0; m]]; bsz];
    let inv_b = 1.0 / bsz as f64;
    for p in 0..bsz {
        let count = views.member_count(p) as f64;
        for (second, w) in [(false, &weights.first[p]), (true, &weights.second[p])] {
            // positive pair, once per anchor view
            let (ea, eb) = (&views.a[p].embedding, &views.b[p].embedding);
            for t in 0..m {
                cot[p][0][t] -= 0.5 * inv_b * eb[t];
                cot[p][1][t] -= 0.5 * inv_b * ea[t];
            }
            let anchor = views.view(p, second).embedding.clone();
            let av = usize::from(second);
            for ((q, s), pz) in views.members(p).zip(w) {
                let c = 0.5 * inv_b * pz / count;
                let z = views.view(q, s).embedding.clone();
                for t in 0..m {
                    cot[p][av][t] += c * z[t];
                    cot[q][usize::from(s)][t] += c * anchor[t];
                }
            }
        }
    }
    let mut grad = Gradient::zeros(enc.num_params());
    for p in 0..bsz {
        enc.backward(&views.a[p], &cot[p][0], &mut grad.0);
        enc.backward(&views.b[p], &cot[p][1], &mut grad.0);
    }
    Ok(grad)
}

pub(crate) struct Header(Vec<(String, String)>);

impl Header {
    pub(crate) fn get(&self, key: &str) -> Result<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Parse(format!("checkpoint header missing {key}")))
    }

    pub(crate) fn f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|e| Error::Parse(format!("{key}={v}: {e}")))
    }

    pub(crate) fn usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|e| Error::Parse(format!("{key}={v}: {e}")))
    }
}

pub(crate) struct Values(std::vec::IntoIter<f64>);

impl Values {
    pub(crate) fn take(&mut self, count: usize) -> Result<Vec<f64>> {
        let out: Vec<f64> = self.0.by_ref().take(count).collect();
        if out.len() != count {
            return Err(Error::Parse(format!(
                "checkpoint truncated: wanted {count} values"
            )));
        }
        Ok(out)
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        if self.0.next().is_some() {
            return Err(Error::Parse("trailing values in checkpoint".into()));
        }
        Ok(())
    }
}

pub(crate) fn read_header_and_values<R: BufRead>(input: R, kind: &str) -> Result<(Header, Values)> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse("empty checkpoint".into()))?
        .map_err(|e| Error::Parse(e.to_string()))?;
    let mut words = first.split_whitespace();
    if words.next() != Some(kind) {
        return Err(Error::Parse(format!(
            "expected {kind} checkpoint, got {first:?}"
        )));
    }
    let fields = words
        .map(|w| {
            w.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse(format!("bad header field {w:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let values = lines
        .map(|l| {
            let l = l.map_err(|e| Error::Parse(e.to_string()))?;
            l.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("{l:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Header(fields), Values(values.into_iter())))
}
