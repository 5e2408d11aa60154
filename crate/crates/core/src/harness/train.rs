//! Training loops with oracle metrics, and batch-size sweeps.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{OptimizerKind, RunConfig};
use super::metrics::MetricsRecord;
use super::synthetic::{generate_paired, generate_synthetic};
use crate::bimodal::{twoway_oracle_f, twoway_step, BimodalState, PairedDataset};
use crate::embed::{AugmentationFamily, BatchSampler, Dataset};
use crate::encoder::{Encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::objective::ViewTable;
use crate::optimizers::{simclr_step, sogclr_step, SimclrState, SogclrState};

/// Data, augmentations and initial encoder described by a config.
#[derive(Clone, Debug)]
pub struct Problem {
    pub ds: Dataset,
    pub fam: AugmentationFamily,
    pub enc: EncoderParams,
}

impl Problem {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let ds = generate_synthetic(d.n, d.d_in, d.clusters, d.separation, d.seed)?;
        let fam = AugmentationFamily::gaussian(cfg.aug.k, d.d_in, cfg.aug.scale, cfg.aug.seed)?;
        let enc = initial_encoder(cfg, d.d_in, cfg.encoder.seed)?;
        Ok(Self { ds, fam, enc })
    }
}

fn initial_encoder(cfg: &RunConfig, d_in: usize, seed: u64) -> Result<EncoderParams> {
    let e = &cfg.encoder;
    EncoderParams::random(e.arch, d_in, e.hidden, e.embed_dim, seed)
}

/// Paired data and both initial encoders. The text encoder shares the
/// architecture and its seed is the image seed plus one.
#[derive(Clone, Debug)]
pub struct PairedProblem {
    pub ds: PairedDataset,
    pub enc_img: EncoderParams,
    pub enc_txt: EncoderParams,
}

impl PairedProblem {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let ds = generate_paired(
            d.n,
            d.d_in,
            cfg.bimodal.text_dim,
            d.clusters,
            d.separation,
            cfg.bimodal.noise,
            d.seed,
        )?;
        Ok(Self {
            ds,
            enc_img: initial_encoder(cfg, d.d_in, cfg.encoder.seed)?,
            enc_txt: initial_encoder(cfg, cfg.bimodal.text_dim, cfg.encoder.seed.wrapping_add(1))?,
        })
    }
}

/// Output of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub records: Vec<MetricsRecord>,
    /// Final encoders: one, or image then text for the bimodal optimizer.
    pub encoders: Vec<EncoderParams>,
    /// Final optimizer state in its checkpoint format.
    pub state_checkpoint: String,
}

impl TrainRun {
    pub fn last(&self) -> &MetricsRecord {
        self.records
            .last()
            .expect("a run records at least its baseline")
    }
}

enum Unimodal {
    Simclr(SimclrState),
    Sogclr(SogclrState),
}

struct Recorder {
    cadence: usize,
    steps: usize,
    start: Option<Instant>,
    records: Vec<MetricsRecord>,
}

impl Recorder {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            cadence: cfg.metrics.cadence,
            steps: cfg.optimizer.steps,
            start: cfg.metrics.wall_clock.then(Instant::now),
            records: Vec::new(),
        }
    }

    fn due(&self, step: usize) -> bool {
        step == 0 || step % self.cadence == 0 || step == self.steps
    }

    fn push(&mut self, mut r: MetricsRecord) {
        r.wall_clock_ms = self.start.map(|s| s.elapsed().as_secs_f64() * 1e3);
        self.records.push(r);
    }
}

fn blank(step: usize) -> MetricsRecord {
    MetricsRecord {
        step,
        objective_value: None,
        oracle_grad_norm_sq: None,
        u_tracking_mse: None,
        eps_sq_mean: None,
        wall_clock_ms: None,
    }
}

fn mse(u: &[f64], target: &[f64]) -> f64 {
    u.iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / u.len() as f64
}

fn aborted(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Aborted {
        step,
        source: Box::new(e),
    }
}

/// Runs the configured optimizer, recording metrics at step 0, every
/// `cadence` steps and at the last step.
pub fn train(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.optimizer.kind == OptimizerKind::BimodalSogclr {
        return train_bimodal(cfg);
    }
    let Problem { ds, fam, mut enc } = Problem::from_config(cfg)?;
    let o = &cfg.optimizer;
    let d = enc.num_params();
    let mut opt = match o.kind {
        OptimizerKind::Simclr => Unimodal::Simclr(SimclrState::new(o.eta, 1.0, d)?),
        OptimizerKind::SimclrMomentum => Unimodal::Simclr(SimclrState::new(o.eta, o.beta, d)?),
        _ => Unimodal::Sogclr(SogclrState::new(ds.len(), d, o.sogclr_config())?),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut sampler = BatchSampler::new(o.sampling, ds.len(), fam.len(), o.batch_size)?;
    let mut rec = Recorder::new(cfg);

    let record = |step: usize, enc: &EncoderParams, opt: &Unimodal| -> Result<MetricsRecord> {
        let mut r = blank(step);
        if cfg.metrics.oracle {
            let table = ViewTable::new(enc, &ds, &fam)?;
            let oracle = table.oracle(enc, &cfg.objective);
            r.objective_value = Some(oracle.value);
            r.oracle_grad_norm_sq = Some(oracle.grad.norm_sq());
            r.eps_sq_mean = Some(table.mean_aug_consistency_eps());
            if let Unimodal::Sogclr(s) = opt {
                r.u_tracking_mse = Some(mse(&s.u, &oracle.mean_g()));
            }
        }
        Ok(r)
    };

    rec.push(record(0, &enc, &opt)?);
    for t in 0..o.steps {
        let step = t + 1;
        let eta = o.schedule.eta(o.eta, t, o.steps);
        let batch = sampler.sample(&mut rng);
        match &mut opt {
            Unimodal::Simclr(s) => {
                s.eta = eta;
                simclr_step(s, &mut enc, &cfg.objective, &ds, &fam, &batch).map(|_| ())
            }
            Unimodal::Sogclr(s) => {
                s.eta = eta;
                sogclr_step(s, &mut enc, &cfg.objective, &ds, &fam, &batch).map(|_| ())
            }
        }
        .map_err(aborted(step))?;
        if rec.due(step) {
            let r = record(step, &enc, &opt).map_err(aborted(step))?;
            rec.push(r);
        }
    }
    let mut ckpt = Vec::new();
    match &opt {
        Unimodal::Simclr(s) => s.write_checkpoint(&mut ckpt),
        Unimodal::Sogclr(s) => s.write_checkpoint(&mut ckpt),
    }
    .expect("writing to memory");
    Ok(TrainRun {
        records: rec.records,
        encoders: vec![enc],
        state_checkpoint: String::from_utf8(ckpt).expect("checkpoints are ASCII"),
    })
}

/// Two-way training on synthetic paired data. `u_tracking_mse` averages
/// both directions; `eps_sq_mean` is not defined here and stays empty.
pub fn train_bimodal(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let PairedProblem {
        ds,
        mut enc_img,
        mut enc_txt,
    } = PairedProblem::from_config(cfg)?;
    let o = &cfg.optimizer;
    let d = enc_img.num_params() + enc_txt.num_params();
    let mut state = BimodalState::new(ds.len(), d, o.sogclr_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let mut sampler = BatchSampler::new(o.sampling, ds.len(), 1, o.batch_size)?;
    let mut rec = Recorder::new(cfg);

    let record = |step: usize,
                  ei: &EncoderParams,
                  et: &EncoderParams,
                  st: &BimodalState|
     -> Result<MetricsRecord> {
        let mut r = blank(step);
        if cfg.metrics.oracle {
            let oracle = twoway_oracle_f(ei, et, &cfg.objective, &ds)?;
            let g_img: Vec<f64> = oracle.per_sample_g.iter().map(|g| g[0]).collect();
            let g_txt: Vec<f64> = oracle.per_sample_g.iter().map(|g| g[1]).collect();
            r.objective_value = Some(oracle.value);
            r.oracle_grad_norm_sq = Some(oracle.grad.norm_sq());
            r.u_tracking_mse = Some(0.5 * (mse(&st.u_img, &g_img) + mse(&st.u_txt, &g_txt)));
        }
        Ok(r)
    };

    rec.push(record(0, &enc_img, &enc_txt, &state)?);
    for t in 0..o.steps {
        let step = t + 1;
        state.eta = o.schedule.eta(o.eta, t, o.steps);
        let batch = sampler.sample(&mut rng);
        twoway_step(
            &mut state,
            &mut enc_img,
            &mut enc_txt,
            &cfg.objective,
            &ds,
            &batch.indices,
        )
        .map_err(aborted(step))?;
        if rec.due(step) {
            let r = record(step, &enc_img, &enc_txt, &state).map_err(aborted(step))?;
            rec.push(r);
        }
    }
    let mut ckpt = Vec::new();
    state
        .write_checkpoint(&mut ckpt)
        .expect("writing to memory");
    Ok(TrainRun {
        records: rec.records,
        encoders: vec![enc_img, enc_txt],
        state_checkpoint: String::from_utf8(ckpt).expect("checkpoints are ASCII"),
    })
}

/// Mean `oracle_grad_norm_sq` over the final 10% of records (at least one).
pub fn plateau(records: &[MetricsRecord]) -> Result<f64> {
    let values: Vec<f64> = records
        .iter()
        .filter_map(|r| r.oracle_grad_norm_sq)
        .collect();
    if values.is_empty() {
        return Err(Error::Config(
            "plateau needs oracle metrics; enable metrics.oracle".into(),
        ));
    }
    let tail = values.len().div_ceil(10);
    Ok(values[values.len() - tail..].iter().sum::<f64>() / tail as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub batch_size: usize,
    pub seed: u64,
    pub plateau: f64,
    pub records: Vec<MetricsRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub batch_size: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub plateaus: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn row(&self, batch_size: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.batch_size == batch_size)
    }

    /// `batch_size,mean,std,seeds` with the per-seed plateaus joined by `;`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(["batch_size", "mean", "std", "plateaus"])
            .map_err(err)?;
        for r in &self.rows {
            let per_seed: Vec<String> = r.plateaus.iter().map(|p| format!("{p:?}")).collect();
            w.write_record([
                r.batch_size.to_string(),
                format!("{:?}", r.mean),
                format!("{:?}", r.std),
                per_seed.join(";"),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(())
    }
}

/// Configuration of one sweep cell: the batch size replaced and both the
/// encoder and sampling seeds offset by `seed`.
pub fn cell_config(cfg: &RunConfig, batch_size: usize, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.optimizer.batch_size = batch_size;
    c.encoder.seed = cfg.encoder.seed.wrapping_add(seed);
    c.optimizer.seed = cfg.optimizer.seed.wrapping_add(seed);
    c
}

/// Trains every `(batch size, seed)` cell in parallel and aggregates the
/// plateau per batch size. Results do not depend on thread scheduling.
pub fn sweep_batch_size(
    cfg: &RunConfig,
    batch_sizes: &[usize],
    seeds: &[u64],
) -> Result<SweepResult> {
    if batch_sizes.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one batch size and one seed".into(),
        ));
    }
    let mut cfg = cfg.clone();
    cfg.metrics.oracle = true;
    let jobs: Vec<(usize, u64)> = batch_sizes
        .iter()
        .flat_map(|&b| seeds.iter().map(move |&s| (b, s)))
        .collect();
    for &(b, _) in &jobs {
        cell_config(&cfg, b, 0).validate()?;
    }
    let cells = jobs
        .par_iter()
        .map(|&(b, s)| {
            let run = train(&cell_config(&cfg, b, s))?;
            Ok(SweepCell {
                batch_size: b,
                seed: s,
                plateau: plateau(&run.records)?,
                records: run.records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = batch_sizes
        .iter()
        .map(|&b| {
            let plateaus: Vec<f64> = cells
                .iter()
                .filter(|c| c.batch_size == b)
                .map(|c| c.plateau)
                .collect();
            let k = plateaus.len() as f64;
            let mean = plateaus.iter().sum::<f64>() / k;
            let std = if plateaus.len() > 1 {
                (plateaus
                    .iter()
                    .map(|p| (p - mean) * (p - mean))
                    .sum::<f64>()
                    / (k - 1.0))
                    .sqrt()
            } else {
                0.0
            };
            SweepRow {
                batch_size: b,
                mean,
                std,
                plateaus,
            }
        })
        .collect();
    Ok(SweepResult { rows, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::Schedule;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.n = 12;
        c.data.d_in = 4;
        c.encoder.hidden = 6;
        c.encoder.embed_dim = 4;
        c.optimizer.batch_size = 4;
        c.optimizer.steps = 30;
        c.metrics.cadence = 10;
        c
    }

    #[test]
    fn one_step_gives_baseline_plus_one_record() {
        let mut c = small();
        c.optimizer.steps = 1;
        c.metrics.cadence = 1;
        let run = train(&c).unwrap();
        assert_eq!(
            run.records.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 1]
        );
    }

    #[test]
    fn cadence_schedule() {
        let mut c = small();
        c.optimizer.steps = 25;
        let steps: Vec<usize> = train(&c).unwrap().records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 25]);
    }

    #[test]
    fn zero_learning_rate_freezes_objective() {
        for kind in [
            OptimizerKind::Simclr,
            OptimizerKind::Sogclr,
            OptimizerKind::BimodalSogclr,
        ] {
            let mut c = small();
            c.optimizer.kind = kind;
            c.optimizer.eta = 0.0;
            let run = train(&c).unwrap();
            let v0 = run.records[0].objective_value.unwrap();
            assert!(
                run.records.iter().all(|r| r.objective_value == Some(v0)),
                "{kind}"
            );
        }
    }

    #[test]
    fn cadence_does_not_perturb_training() {
        for kind in [
            OptimizerKind::SimclrMomentum,
            OptimizerKind::SogclrAdam,
            OptimizerKind::BimodalSogclr,
        ] {
            let mut a = small();
            a.optimizer.kind = kind;
            a.optimizer.schedule = Schedule::Cosine;
            a.metrics.cadence = 1;
            let mut b = a.clone();
            b.metrics.cadence = 15;
            let (ra, rb) = (train(&a).unwrap(), train(&b).unwrap());
            assert_eq!(ra.encoders, rb.encoders);
            for r in &rb.records {
                assert_eq!(Some(r), ra.records.iter().find(|x| x.step == r.step));
            }
        }
    }

    #[test]
    fn disabled_oracle_leaves_fields_empty() {
        let mut c = small();
        c.metrics.oracle = false;
        let run = train(&c).unwrap();
        assert!(run
            .records
            .iter()
            .all(|r| r.objective_value.is_none() && r.oracle_grad_norm_sq.is_none()));
        assert!(plateau(&run.records).is_err());
    }

    #[test]
    fn u_tracking_only_for_statistic_methods() {
        let mut c = small();
        c.optimizer.kind = OptimizerKind::Simclr;
        assert!(train(&c)
            .unwrap()
            .records
            .iter()
            .all(|r| r.u_tracking_mse.is_none()));
        c.optimizer.kind = OptimizerKind::Sogclr;
        assert!(train(&c)
            .unwrap()
            .records
            .iter()
            .all(|r| r.u_tracking_mse.is_some()));
    }

    #[test]
    fn checkpoints_parse_back() {
        let mut c = small();
        let run = train(&c).unwrap();
        SogclrState::read_checkpoint(run.state_checkpoint.as_bytes()).unwrap();
        c.optimizer.kind = OptimizerKind::BimodalSogclr;
        let run = train(&c).unwrap();
        assert_eq!(run.encoders.len(), 2);
        BimodalState::read_checkpoint(run.state_checkpoint.as_bytes()).unwrap();
    }

    #[test]
    fn plateau_uses_trailing_tenth() {
        let recs: Vec<MetricsRecord> = (0..20)
            .map(|i| MetricsRecord {
                oracle_grad_norm_sq: Some(i as f64),
                ..blank(i)
            })
            .collect();
        assert_eq!(plateau(&recs).unwrap(), 18.5);
        assert_eq!(plateau(&recs[..3]).unwrap(), 2.0);
    }

    #[test]
    fn single_cell_sweep_matches_its_run() {
        let c = small();
        let sweep = sweep_batch_size(&c, &[4], &[0]).unwrap();
        let run = train(&cell_config(&c, 4, 0)).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        assert_eq!(sweep.rows[0].mean, plateau(&run.records).unwrap());
        assert_eq!(sweep.rows[0].std, 0.0);
    }

    #[test]
    fn sweep_statistics_and_validation() {
        let c = small();
        let sweep = sweep_batch_size(&c, &[2, 6], &[0, 1, 2]).unwrap();
        for row in &sweep.rows {
            let m = row.plateaus.iter().sum::<f64>() / 3.0;
            let v = row.plateaus.iter().map(|p| (p - m).powi(2)).sum::<f64>() / 2.0;
            assert!((row.mean - m).abs() < 1e-15 && (row.std - v.sqrt()).abs() < 1e-15);
        }
        assert_eq!(sweep.cells.len(), 6);
        assert!(sweep_batch_size(&c, &[13], &[0]).is_err());
        assert!(sweep_batch_size(&c, &[], &[0]).is_err());
    }
}
