//! Run configuration: a flat `key = value` text format with dotted section
//! keys and `#` comments.
//!
//! ```text
//! # standard task
//! data.n = 32
//! optimizer.kind = sogclr
//! optimizer.eta = 0.1
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::embed::SamplingMode;
use crate::encoder::Architecture;
use crate::error::{Error, Result};
use crate::objective::{GlobalObjectiveConfig, Version};
use crate::optimizers::{SogclrConfig, StepRule, ULag};

/// Parses `key = value` lines; later duplicates override earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key = value, got {raw:?}",
                lineno + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

/// Parses a single `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Simclr,
    SimclrMomentum,
    #[default]
    Sogclr,
    SogclrAdam,
    BimodalSogclr,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(Self::Simclr),
            "simclr_momentum" => Ok(Self::SimclrMomentum),
            "sogclr" => Ok(Self::Sogclr),
            "sogclr_adam" => Ok(Self::SogclrAdam),
            "bimodal_sogclr" => Ok(Self::BimodalSogclr),
            _ => Err(Error::Config(format!("unknown optimizer kind {s:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Simclr => "simclr",
            Self::SimclrMomentum => "simclr_momentum",
            Self::Sogclr => "sogclr",
            Self::SogclrAdam => "sogclr_adam",
            Self::BimodalSogclr => "bimodal_sogclr",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Constant,
    /// `eta_t = eta * (1 + cos(pi t / T)) / 2`
    Cosine,
}

impl Schedule {
    /// Learning rate for step `t` in `0..steps`.
    pub fn eta(self, eta: f64, t: usize, steps: usize) -> f64 {
        match self {
            Schedule::Constant => eta,
            Schedule::Cosine => {
                eta * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / steps as f64).cos())
            }
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub n: usize,
    pub d_in: usize,
    pub clusters: usize,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugSpec {
    pub k: usize,
    pub scale: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub arch: Architecture,
    pub hidden: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub eta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub sampling: SamplingMode,
    pub u_lag: ULag,
    pub schedule: Schedule,
    pub seed: u64,
}

impl OptimizerSpec {
    pub fn sogclr_config(&self) -> SogclrConfig {
        SogclrConfig {
            gamma: self.gamma,
            beta: self.beta,
            eta: self.eta,
            rule: if self.kind == OptimizerKind::SogclrAdam {
                StepRule::AdamStyle
            } else {
                StepRule::Momentum
            },
            u_lag: self.u_lag,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSpec {
    pub cadence: usize,
    /// Evaluate the exact oracle at each record.
    pub oracle: bool,
    /// Record elapsed wall-clock time. Off by default: it makes metrics
    /// files non-reproducible.
    pub wall_clock: bool,
}

/// Text side of synthetic paired data: `t_i = M x_i + noise * z_i` with a
/// fixed random map `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct BimodalSpec {
    pub text_dim: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSpec,
    pub aug: AugSpec,
    pub encoder: EncoderSpec,
    pub objective: GlobalObjectiveConfig,
    pub optimizer: OptimizerSpec,
    pub metrics: MetricsSpec,
    pub bimodal: BimodalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSpec {
                n: 32,
                d_in: 8,
                clusters: 4,
                separation: 3.0,
                seed: 0,
            },
            aug: AugSpec {
                k: 4,
                scale: 0.1,
                seed: 1,
            },
            encoder: EncoderSpec {
                arch: Architecture::OneHidden,
                hidden: 16,
                embed_dim: 8,
                seed: 2,
            },
            objective: GlobalObjectiveConfig::default(),
            optimizer: OptimizerSpec {
                kind: OptimizerKind::Sogclr,
                eta: 0.1,
                beta: 0.9,
                gamma: 0.8,
                batch_size: 8,
                steps: 500,
                sampling: SamplingMode::EpochShuffle,
                u_lag: ULag::Fresh,
                schedule: Schedule::Constant,
                seed: 3,
            },
            metrics: MetricsSpec {
                cadence: 10,
                oracle: true,
                wall_clock: false,
            },
            bimodal: BimodalSpec {
                text_dim: 6,
                noise: 0.1,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
}

impl RunConfig {
    /// Sets one dotted key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.n" => self.data.n = parse(key, v)?,
            "data.d_in" => self.data.d_in = parse(key, v)?,
            "data.clusters" => self.data.clusters = parse(key, v)?,
            "data.separation" => self.data.separation = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "aug.k" => self.aug.k = parse(key, v)?,
            "aug.scale" => self.aug.scale = parse(key, v)?,
            "aug.seed" => self.aug.seed = parse(key, v)?,
            "encoder.arch" => self.encoder.arch = parse(key, v)?,
            "encoder.hidden" => self.encoder.hidden = parse(key, v)?,
            "encoder.embed_dim" => self.encoder.embed_dim = parse(key, v)?,
            "encoder.seed" => self.encoder.seed = parse(key, v)?,
            "objective.tau" => self.objective.tau = parse(key, v)?,
            "objective.eps0" => self.objective.eps0 = parse(key, v)?,
            "objective.version" => self.objective.version = parse::<Version>(key, v)?,
            "optimizer.kind" => self.optimizer.kind = parse(key, v)?,
            "optimizer.eta" => self.optimizer.eta = parse(key, v)?,
            "optimizer.beta" => self.optimizer.beta = parse(key, v)?,
            "optimizer.gamma" => self.optimizer.gamma = parse(key, v)?,
            "optimizer.batch_size" => self.optimizer.batch_size = parse(key, v)?,
            "optimizer.steps" => self.optimizer.steps = parse(key, v)?,
            "optimizer.sampling" => self.optimizer.sampling = parse(key, v)?,
            "optimizer.u_lag" => self.optimizer.u_lag = parse(key, v)?,
            "optimizer.schedule" => self.optimizer.schedule = parse(key, v)?,
            "optimizer.seed" => self.optimizer.seed = parse(key, v)?,
            "metrics.cadence" => self.metrics.cadence = parse(key, v)?,
            "metrics.oracle" => self.metrics.oracle = parse(key, v)?,
            "metrics.wall_clock" => self.metrics.wall_clock = parse(key, v)?,
            "bimodal.text_dim" => self.bimodal.text_dim = parse(key, v)?,
            "bimodal.noise" => self.bimodal.noise = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the file's entries, then by `overrides` in
    /// order; the result is validated.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_key_values(text)?
            .iter()
            .chain(overrides.iter().map(|(k, v)| (k, v)))
        {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let (d, o) = (&self.data, &self.optimizer);
        if d.n < 2 || d.d_in == 0 {
            return bad(format!(
                "data needs n >= 2 and d_in >= 1, got n={} d_in={}",
                d.n, d.d_in
            ));
        }
        if d.clusters == 0 || d.clusters > d.n {
            return bad(format!("need 1 <= clusters <= n, got {}", d.clusters));
        }
        if !(d.separation >= 0.0 && d.separation.is_finite()) {
            return bad(format!(
                "separation must be finite and >= 0, got {}",
                d.separation
            ));
        }
        if self.aug.k == 0 || !(self.aug.scale >= 0.0 && self.aug.scale.is_finite()) {
            return bad(format!(
                "need aug.k >= 1 and aug.scale >= 0, got {} {}",
                self.aug.k, self.aug.scale
            ));
        }
        if self.encoder.embed_dim == 0
            || (self.encoder.arch == Architecture::OneHidden && self.encoder.hidden == 0)
        {
            return bad("encoder dimensions must be positive".into());
        }
        self.objective.validate()?;
        if o.steps == 0 {
            return bad("optimizer.steps must be >= 1".into());
        }
        if o.batch_size < 2 {
            return bad(format!(
                "optimizer.batch_size must be >= 2, got {}",
                o.batch_size
            ));
        }
        if o.sampling == SamplingMode::EpochShuffle && o.batch_size > d.n {
            return bad(format!(
                "batch_size {} exceeds n = {} under epoch_shuffle",
                o.batch_size, d.n
            ));
        }
        if !(o.beta > 0.0 && o.beta <= 1.0) {
            return bad(format!("optimizer.beta must lie in (0, 1], got {}", o.beta));
        }
        o.sogclr_config().validate()?;
        if self.metrics.cadence == 0 {
            return bad("metrics.cadence must be >= 1".into());
        }
        if self.bimodal.text_dim == 0
            || !(self.bimodal.noise >= 0.0 && self.bimodal.noise.is_finite())
        {
            return bad("bimodal.text_dim must be >= 1 and bimodal.noise >= 0".into());
        }
        Ok(())
    }

    /// Serializes every key, in a form [`RunConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let (d, a, e, ob, o, m, b) = (
            &self.data,
            &self.aug,
            &self.encoder,
            &self.objective,
            &self.optimizer,
            &self.metrics,
            &self.bimodal,
        );
        let pairs: Vec<(&str, String)> = vec![
            ("data.n", d.n.to_string()),
            ("data.d_in", d.d_in.to_string()),
            ("data.clusters", d.clusters.to_string()),
            ("data.separation", format!("{:?}", d.separation)),
            ("data.seed", d.seed.to_string()),
            ("aug.k", a.k.to_string()),
            ("aug.scale", format!("{:?}", a.scale)),
            ("aug.seed", a.seed.to_string()),
            ("encoder.arch", e.arch.to_string()),
            ("encoder.hidden", e.hidden.to_string()),
            ("encoder.embed_dim", e.embed_dim.to_string()),
            ("encoder.seed", e.seed.to_string()),
            ("objective.tau", format!("{:?}", ob.tau)),
            ("objective.eps0", format!("{:?}", ob.eps0)),
            ("objective.version", ob.version.to_string()),
            ("optimizer.kind", o.kind.to_string()),
            ("optimizer.eta", format!("{:?}", o.eta)),
            ("optimizer.beta", format!("{:?}", o.beta)),
            ("optimizer.gamma", format!("{:?}", o.gamma)),
            ("optimizer.batch_size", o.batch_size.to_string()),
            ("optimizer.steps", o.steps.to_string()),
            ("optimizer.sampling", o.sampling.to_string()),
            ("optimizer.u_lag", o.u_lag.to_string()),
            ("optimizer.schedule", o.schedule.to_string()),
            ("optimizer.seed", o.seed.to_string()),
            ("metrics.cadence", m.cadence.to_string()),
            ("metrics.oracle", m.oracle.to_string()),
            ("metrics.wall_clock", m.wall_clock.to_string()),
            ("bimodal.text_dim", b.text_dim.to_string()),
            ("bimodal.noise", format!("{:?}", b.noise)),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_whitespace_and_overrides() {
        let text =
            "# header\n\ndata.n = 16  # trailing\n  optimizer.kind=simclr\noptimizer.eta = 0.5\n";
        let cfg = RunConfig::from_text(text, &[("optimizer.eta".into(), "0.25".into())]).unwrap();
        assert_eq!(cfg.data.n, 16);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Simclr);
        assert_eq!(cfg.optimizer.eta, 0.25);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "data.n 16",
            "nope.key = 1",
            "data.n = -3",
            "data.n = 1",
            "optimizer.steps = 0",
            "optimizer.batch_size = 64",
            "optimizer.gamma = 1.5",
            "objective.tau = 0",
            "optimizer.kind = moco",
            "metrics.oracle = yes",
        ] {
            let err = RunConfig::from_text(text, &[]).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.optimizer.schedule = Schedule::Cosine;
        cfg.objective.version = Version::V2;
        cfg.optimizer.u_lag = ULag::Lagged;
        cfg.data.separation = 0.1;
        assert_eq!(RunConfig::from_text(&cfg.to_text(), &[]).unwrap(), cfg);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(Schedule::Cosine.eta(0.4, 0, 10), 0.4);
        assert!((Schedule::Cosine.eta(0.4, 5, 10) - 0.2).abs() < 1e-15);
        assert_eq!(Schedule::Constant.eta(0.4, 7, 10), 0.4);
    }

    #[test]
    fn override_syntax() {
        assert_eq!(
            parse_override("a.b = 3").unwrap(),
            ("a.b".into(), "3".into())
        );
        assert!(parse_override("a.b").is_err());
    }
}
