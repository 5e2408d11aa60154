//! Small analytically differentiable encoders producing unit-norm embeddings.
//!
//! Parameters are stored flat: row-major `W1` followed by row-major `W2`
//! (one-hidden only). For the linear architecture `W1` is `m x d_in`; for
//! the one-hidden architecture `W1` is `d_h x d_in` and `W2` is `m x d_h`.
//! Gradients use the same layout.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Index, IndexMut};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{dot, norm};
use crate::error::{Error, Result};

const COLLAPSE_NORM: f64 = 1e-12;

/// A flat parameter-space vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(d: usize) -> Self {
        Gradient(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.0, &self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Gradient) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    /// `||self - other|| / max(||self||, ||other||)`, zero when both vanish.
    pub fn rel_err(&self, other: &Gradient) -> f64 {
        rel_err(&self.0, &other.0)
    }

    pub fn concat(blocks: &[&Gradient]) -> Gradient {
        Gradient(blocks.iter().flat_map(|g| g.0.iter().copied()).collect())
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

impl Index<usize> for Gradient {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for Gradient {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Cached forward pass of one input, enough to run the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub input: Vec<f64>,
    /// `tanh(W1 x)` for the one-hidden architecture.
    pub hidden: Option<Vec<f64>>,
    pub raw_norm: f64,
    pub embedding: Vec<f64>,
}

/// An encoder `E(.; w)` with an exact vector-Jacobian product.
pub trait Encoder: Clone {
    fn input_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn forward(&self, x: &[f64]) -> Result<Forward>;

    /// Accumulates `d(cotangent . E(x)) / dw` into `grad`.
    fn backward(&self, fwd: &Forward, cotangent: &[f64], grad: &mut [f64]);

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn with_params(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        out.params_mut().copy_from_slice(flat);
        out
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.embedding)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Architecture {
    #[default]
    Linear,
    /// One tanh hidden layer.
    OneHidden,
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "one_hidden" => Ok(Self::OneHidden),
            _ => Err(Error::Config(format!("unknown encoder architecture {s:?}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::OneHidden => "one_hidden",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    arch: Architecture,
    d_in: usize,
    hidden: usize,
    m: usize,
    flat: Vec<f64>,
}

impl EncoderParams {
    fn check_dims(arch: Architecture, d_in: usize, hidden: usize, m: usize) -> Result<()> {
        if d_in == 0 {
            return Err(Error::InvalidSize(
                "input dimension must be positive".into(),
            ));
        }
        if m < 2 {
            return Err(Error::InvalidSize(format!(
                "embedding dimension must be >= 2, got {m}"
            )));
        }
        if arch == Architecture::OneHidden && hidden == 0 {
            return Err(Error::InvalidSize("hidden width must be positive".into()));
        }
        Ok(())
    }

    fn expected_len(arch: Architecture, d_in: usize, hidden: usize, m: usize) -> usize {
        match arch {
            Architecture::Linear => m * d_in,
            Architecture::OneHidden => hidden * d_in + m * hidden,
        }
    }

    pub fn from_flat(
        arch: Architecture,
        d_in: usize,
        hidden: usize,
        m: usize,
        flat: Vec<f64>,
    ) -> Result<Self> {
        Self::check_dims(arch, d_in, hidden, m)?;
        let hidden = if arch == Architecture::Linear {
            0
        } else {
            hidden
        };
        let want = Self::expected_len(arch, d_in, hidden, m);
        if flat.len() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                got: flat.len(),
            });
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("encoder parameters must be finite".into()));
        }
        Ok(Self {
            arch,
            d_in,
            hidden,
            m,
            flat,
        })
    }

    /// Linear encoder from the rows of `W` (`m x d_in`).
    pub fn linear(w: Vec<Vec<f64>>) -> Result<Self> {
        let m = w.len();
        let d_in = w.first().map_or(0, Vec::len);
        if w.iter().any(|r| r.len() != d_in) {
            return Err(Error::InvalidSize("ragged weight matrix".into()));
        }
        Self::from_flat(Architecture::Linear, d_in, 0, m, w.concat())
    }

    pub fn one_hidden(w1: Vec<Vec<f64>>, w2: Vec<Vec<f64>>) -> Result<Self> {
        let hidden = w1.len();
        let d_in = w1.first().map_or(0, Vec::len);
        let m = w2.len();
        if w1.iter().any(|r| r.len() != d_in) || w2.iter().any(|r| r.len() != hidden) {
            return Err(Error::InvalidSize("ragged weight matrix".into()));
        }
        let mut flat = w1.concat();
        flat.extend(w2.concat());
        Self::from_flat(Architecture::OneHidden, d_in, hidden, m, flat)
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)` per layer.
    pub fn random(
        arch: Architecture,
        d_in: usize,
        hidden: usize,
        m: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::check_dims(arch, d_in, hidden, m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |count: usize, fan_in: usize| -> Vec<f64> {
            let s = 1.0 / (fan_in as f64).sqrt();
            (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s * z
                })
                .collect::<Vec<f64>>()
        };
        let flat = match arch {
            Architecture::Linear => draw(m * d_in, d_in),
            Architecture::OneHidden => {
                let mut f = draw(hidden * d_in, d_in);
                f.extend(draw(m * hidden, hidden));
                f
            }
        };
        Self::from_flat(arch, d_in, hidden, m, flat)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn w1_rows(&self) -> usize {
        match self.arch {
            Architecture::Linear => self.m,
            Architecture::OneHidden => self.hidden,
        }
    }

    /// Checkpoint: one header line then one value per line, in flat order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        match self.arch {
            Architecture::Linear => writeln!(
                out,
                "encoder linear d_in={} embed_dim={}",
                self.d_in, self.m
            )?,
            Architecture::OneHidden => writeln!(
                out,
                "encoder one_hidden d_in={} hidden={} embed_dim={}",
                self.d_in, self.hidden, self.m
            )?,
        }
        for v in &self.flat {
            writeln!(out, "{v:?}")?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty checkpoint".into()))?
            .map_err(|e| Error::Parse(e.to_string()))?;
        let mut words = header.split_whitespace();
        if words.next() != Some("encoder") {
            return Err(Error::Parse(format!("bad checkpoint header {header:?}")));
        }
        let arch: Architecture = words
            .next()
            .ok_or_else(|| Error::Parse("missing architecture".into()))?
            .parse()?;
        let fields = parse_fields(words)?;
        let get = |k: &str| -> Result<usize> {
            fields
                .iter()
                .find(|(name, _)| name == k)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Parse(format!("checkpoint header missing {k}")))
        };
        let d_in = get("d_in")?;
        let m = get("embed_dim")?;
        let hidden = if arch == Architecture::OneHidden {
            get("hidden")?
        } else {
            0
        };
        let flat = lines
            .map(|l| {
                let l = l.map_err(|e| Error::Parse(e.to_string()))?;
                l.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_flat(arch, d_in, hidden, m, flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn parse_fields<'a>(words: impl Iterator<Item = &'a str>) -> Result<Vec<(String, usize)>> {
    words
        .map(|w| {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field {w:?}")))?;
            let v = v.parse().map_err(|e| Error::Parse(format!("{w:?}: {e}")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

/// `out = M x` for a row-major `rows x cols` matrix.
fn matvec(mat: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    mat.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

impl Encoder for EncoderParams {
    fn input_dim(&self) -> usize {
        self.d_in
    }

    fn embed_dim(&self) -> usize {
        self.m
    }

    fn params(&self) -> &[f64] {
        &self.flat
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                got: x.len(),
            });
        }
        let split = self.w1_rows() * self.d_in;
        let (raw, hidden) = match self.arch {
            Architecture::Linear => (matvec(&self.flat, self.d_in, x), None),
            Architecture::OneHidden => {
                let h: Vec<f64> = matvec(&self.flat[..split], self.d_in, x)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                (matvec(&self.flat[split..], self.hidden, &h), Some(h))
            }
        };
        let raw_norm = norm(&raw);
        if !(raw_norm >= COLLAPSE_NORM) {
            return Err(Error::Degenerate(format!(
                "encoder output collapsed (pre-normalization norm {raw_norm:e})"
            )));
        }
        let embedding = raw.iter().map(|r| r / raw_norm).collect();
        Ok(Forward {
            input: x.to_vec(),
            hidden,
            raw_norm,
            embedding,
        })
    }

    fn backward(&self, fwd: &Forward, cotangent: &[f64], grad: &mut [f64]) {
        // through e = r / |r|: dr = (I - e e^T) c / |r|
        let e = &fwd.embedding;
        let ec = dot(e, cotangent);
        let dr: Vec<f64> = cotangent
            .iter()
            .zip(e)
            .map(|(c, ei)| (c - ei * ec) / fwd.raw_norm)
            .collect();
        let x = &fwd.input;
        match self.arch {
            Architecture::Linear => {
                for (row, &d) in grad.chunks_exact_mut(self.d_in).zip(&dr) {
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            Architecture::OneHidden => {
                let h = fwd
                    .hidden
                    .as_ref()
                    .expect("one-hidden forward carries activations");
                let split = self.hidden * self.d_in;
                let w2 = &self.flat[split..];
                let (g1, g2) = grad.split_at_mut(split);
                let mut dh = vec![0.0; self.hidden];
                for ((g_row, w_row), &d) in g2
                    .chunks_exact_mut(self.hidden)
                    .zip(w2.chunks_exact(self.hidden))
                    .zip(&dr)
                {
                    for ((g, hj), (w, dhj)) in
                        g_row.iter_mut().zip(h).zip(w_row.iter().zip(dh.iter_mut()))
                    {
                        *g += d * hj;
                        *dhj += d * w;
                    }
                }
                for ((g_row, dhj), hj) in g1.chunks_exact_mut(self.d_in).zip(&dh).zip(h) {
                    let dpre = dhj * (1.0 - hj * hj);
                    for (g, xi) in g_row.iter_mut().zip(x) {
                        *g += dpre * xi;
                    }
                }
            }
        }
    }
}

/// `cotangent * d/dw [E(x_a)^T E(x_b)]`, through both branches.
pub fn vjp_sim<E: Encoder>(enc: &E, x_a: &[f64], x_b: &[f64], cotangent: f64) -> Result<Gradient> {
    let fa = enc.forward(x_a)?;
    let fb = enc.forward(x_b)?;
    let mut g = Gradient::zeros(enc.num_params());
    let ca: Vec<f64> = fb.embedding.iter().map(|v| cotangent * v).collect();
    let cb: Vec<f64> = fa.embedding.iter().map(|v| cotangent * v).collect();
    enc.backward(&fa, &ca, &mut g.0);
    enc.backward(&fb, &cb, &mut g.0);
    Ok(g)
}

/// Central differences `(f(w + h e_j) - f(w - h e_j)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, w: &[f64], h: f64) -> Result<Gradient>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = w.to_vec();
    let mut out = Gradient::zeros(w.len());
    for j in 0..w.len() {
        probe[j] = w[j] + h;
        let plus = f(&probe)?;
        probe[j] = w[j] - h;
        let minus = f(&probe)?;
        probe[j] = w[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite at coordinate {j}"
            )));
        }
        out[j] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        let id = EncoderParams::linear(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = [0.6, 0.8];
        let e = id.encode(&x).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);

        let twice = EncoderParams::linear(vec![vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let e2 = twice.encode(&x).unwrap();
        assert!(rel_err(&e, &e2) < 1e-15);

        let proj = EncoderParams::linear(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            proj.encode(&[0.0, 1.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn flattening_order_is_row_major_w1_then_w2() {
        let p = EncoderParams::one_hidden(
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            vec![vec![7.0, 8.0, 9.0], vec![10.0, 11.0, 12.0]],
        )
        .unwrap();
        assert_eq!(p.params(), &(1..=12).map(f64::from).collect::<Vec<_>>()[..]);
        assert_eq!(p.num_params(), 12);
    }

    #[test]
    fn vjp_zero_cotangent_and_self_similarity() {
        let p = EncoderParams::random(Architecture::OneHidden, 3, 8, 4, 1).unwrap();
        let g = vjp_sim(&p, &[0.1, 0.2, 0.3], &[-1.0, 0.5, 0.0], 0.0).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
        let g = vjp_sim(&p, &[0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], 1.7).unwrap();
        assert!(g.0.iter().all(|v| v.abs() < 1e-14), "{g:?}");
    }

    #[test]
    fn vjp_matches_finite_differences() {
        for arch in [Architecture::Linear, Architecture::OneHidden] {
            let p = EncoderParams::random(arch, 3, 4, 2, 42).unwrap();
            let xa = [0.3, -0.7, 1.1];
            let xb = [-0.4, 0.2, 0.9];
            let analytic = vjp_sim(&p, &xa, &xb, 1.0).unwrap();
            let fd = finite_diff_grad(
                |w| {
                    let q = p.with_params(w);
                    Ok(dot(&q.encode(&xa)?, &q.encode(&xb)?))
                },
                p.params(),
                1e-5,
            )
            .unwrap();
            assert!(
                analytic.rel_err(&fd) < 1e-5,
                "{arch}: {}",
                analytic.rel_err(&fd)
            );
        }
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|w| Ok(w[0] * w[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
        let g = finite_diff_grad(|_| Ok(2.5), &[1.0, 2.0], 1e-4).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
        let g = finite_diff_grad(|w| Ok(w.iter().sum()), &[0.3, -2.0, 7.0], 1e-4).unwrap();
        assert!(g.0.iter().all(|&v| (v - 1.0).abs() < 1e-9));
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &[1.0], 1e-4).is_err());
        assert!(finite_diff_grad(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = EncoderParams::random(Architecture::OneHidden, 3, 5, 2, 7).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("encoder one_hidden d_in=3 hidden=5 embed_dim=2\n"));
        assert_eq!(EncoderParams::read_checkpoint(&buf[..]).unwrap(), p);
        let bad = b"encoder linear d_in=2 embed_dim=2\n1.0\n";
        assert!(EncoderParams::read_checkpoint(&bad[..]).is_err());
    }

    proptest! {
        #[test]
        fn encode_is_unit_norm(seed in 0u64..500, x in prop::collection::vec(-3.0f64..3.0, 4)) {
            let p = EncoderParams::random(Architecture::OneHidden, 4, 8, 4, seed).unwrap();
            if let Ok(e) = p.encode(&x) {
                prop_assert!((norm(&e) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn vjp_linear_in_cotangent(seed in 0u64..500, c1 in -5.0f64..5.0, c2 in -5.0f64..5.0) {
            let p = EncoderParams::random(Architecture::OneHidden, 3, 8, 4, seed).unwrap();
            let xa = [0.5, -0.2, 0.1];
            let xb = [-0.3, 0.8, 0.4];
            let g12 = vjp_sim(&p, &xa, &xb, c1 + c2).unwrap();
            let mut sum = vjp_sim(&p, &xa, &xb, c1).unwrap();
            sum.axpy(1.0, &vjp_sim(&p, &xa, &xb, c2).unwrap());
            for (a, b) in g12.0.iter().zip(&sum.0) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
