//! Finite-difference and cross-estimator checks of every analytic gradient
//! on a small instance.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::train::{PairedProblem, Problem};
use crate::bimodal::{twoway_oracle_f, twoway_oracle_value, PairedDataset};
use crate::embed::{AugmentationFamily, BatchSampler, Dataset, MiniBatch, SamplingMode};
use crate::encoder::{finite_diff_grad, Encoder, Gradient};
use crate::error::{Error, Result};
use crate::objective::{oracle_f, oracle_value, GlobalObjectiveConfig, Version};
use crate::optimizers::{
    dcl_surrogate, dcl_surrogate_grad, dcl_surrogate_value, simclr_estimator,
    simclr_surrogate_loss, sogclr_estimator, sogclr_update_u, SogclrState,
};

/// Largest parameter count (per encoder) the check accepts.
pub const GRADCHECK_GUARD: usize = 200;
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;
pub const CROSS_TOL: f64 = 1e-8;
/// Norm below which finite differences cannot resolve a gradient: errors
/// are relative to `max(|a|, |b|, GRAD_FLOOR)`, so two vanishing gradients
/// agree.
pub const GRAD_FLOOR: f64 = 1e-5;

fn compare(a: &Gradient, b: &Gradient) -> f64 {
    let diff =
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    diff / a.norm_sq().sqrt().max(b.norm_sq().sqrt()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub rel_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<Check>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name)
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>12} {:>9}  result", "check", "rel_err", "tol")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<28} {:>12.3e} {:>9.0e}  {}",
                c.name,
                c.rel_err,
                c.tol,
                if c.passed() { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Everything a check needs, with encoders of any [`Encoder`] type.
pub struct GradcheckInstance<E> {
    pub objective: GlobalObjectiveConfig,
    pub ds: Dataset,
    pub fam: AugmentationFamily,
    pub enc: E,
    pub batch: MiniBatch,
    pub paired: PairedDataset,
    pub enc_img: E,
    pub enc_txt: E,
    /// Statistic-update rate for the SogCLR checks; a warm-up update runs
    /// first so the statistic is non-trivial.
    pub gamma: f64,
}

/// Runs the checks on the config's data, encoders and one sampled batch.
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let Problem { ds, fam, enc } = Problem::from_config(cfg)?;
    let PairedProblem {
        ds: paired,
        enc_img,
        enc_txt,
    } = PairedProblem::from_config(cfg)?;
    let b = cfg.optimizer.batch_size.min(ds.len());
    let mut sampler = BatchSampler::new(SamplingMode::EpochShuffle, ds.len(), fam.len(), b)?;
    let batch = sampler.sample(&mut ChaCha8Rng::seed_from_u64(cfg.optimizer.seed));
    gradcheck_instance(&GradcheckInstance {
        objective: cfg.objective,
        ds,
        fam,
        enc,
        batch,
        paired,
        enc_img,
        enc_txt,
        gamma: cfg.optimizer.gamma.max(0.5),
    })
}

fn guard<E: Encoder>(enc: &E) -> Result<()> {
    if enc.num_params() > GRADCHECK_GUARD {
        return Err(Error::GuardExceeded {
            what: "parameter count",
            value: enc.num_params(),
            limit: GRADCHECK_GUARD,
        });
    }
    Ok(())
}

fn fd<F: FnMut(&[f64]) -> Result<f64>>(f: F, w: &[f64]) -> Result<Gradient> {
    finite_diff_grad(f, w, FD_STEP)
}

pub fn gradcheck_instance<E: Encoder>(inst: &GradcheckInstance<E>) -> Result<GradcheckReport> {
    let GradcheckInstance {
        objective,
        ds,
        fam,
        enc,
        batch,
        paired,
        enc_img,
        enc_txt,
        gamma,
    } = inst;
    guard(enc)?;
    guard(enc_img)?;
    guard(enc_txt)?;
    let mut checks = Vec::new();
    let w = enc.params();

    for (name, version) in [
        ("oracle_v1_vs_fd", Version::V1),
        ("oracle_v2_vs_fd", Version::V2),
    ] {
        let cfg = GlobalObjectiveConfig {
            version,
            ..*objective
        };
        let analytic = oracle_f(enc, &cfg, ds, fam)?.grad;
        let numeric = fd(|w| oracle_value(&enc.with_params(w), &cfg, ds, fam), w)?;
        checks.push(Check {
            name,
            rel_err: compare(&analytic, &numeric),
            tol: FD_TOL,
        });
    }

    let analytic = twoway_oracle_f(enc_img, enc_txt, objective, paired)?.grad;
    let d_img = enc_img.num_params();
    let w2: Vec<f64> = enc_img
        .params()
        .iter()
        .chain(enc_txt.params())
        .copied()
        .collect();
    let numeric = fd(
        |w| {
            twoway_oracle_value(
                &enc_img.with_params(&w[..d_img]),
                &enc_txt.with_params(&w[d_img..]),
                objective,
                paired,
            )
        },
        &w2,
    )?;
    checks.push(Check {
        name: "twoway_oracle_vs_fd",
        rel_err: compare(&analytic, &numeric),
        tol: FD_TOL,
    });

    let analytic = simclr_estimator(enc, objective, ds, fam, batch)?;
    let numeric = fd(
        |w| simclr_surrogate_loss(&enc.with_params(w), objective, ds, fam, batch),
        w,
    )?;
    checks.push(Check {
        name: "simclr_estimator_vs_fd",
        rel_err: compare(&analytic, &numeric),
        tol: FD_TOL,
    });

    let mut state = SogclrState::new(
        ds.len(),
        enc.num_params(),
        crate::optimizers::SogclrConfig {
            gamma: *gamma,
            ..Default::default()
        },
    )?;
    sogclr_update_u(&mut state, enc, objective, ds, fam, batch)?;
    let (_, weights) = dcl_surrogate(&state, enc, objective, ds, fam, batch)?;
    let dcl = dcl_surrogate_grad(&weights, enc, ds, fam, batch)?;
    let numeric = fd(
        |w| dcl_surrogate_value(&weights, &enc.with_params(w), ds, fam, batch),
        w,
    )?;
    checks.push(Check {
        name: "dcl_surrogate_vs_fd",
        rel_err: compare(&dcl, &numeric),
        tol: FD_TOL,
    });
    let m = sogclr_estimator(&mut state, enc, objective, ds, fam, batch)?.estimator;
    checks.push(Check {
        name: "dcl_surrogate_vs_sogclr",
        rel_err: compare(&dcl, &m),
        tol: CROSS_TOL,
    });
    Ok(GradcheckReport { checks })
}
