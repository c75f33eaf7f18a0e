//! Scaling study: multi-wave mixing against reference multi-head attention.
//!
//! Each layer is timed on a ladder of token counts. Mixing runs on a square
//! `sqrt(n) x sqrt(n)` grid through the tape in inference mode; attention runs
//! directly on the raw kernels. A least-squares fit of log time on log tokens
//! gives the empirical exponent for each layer.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::MixingLayer;
use crate::error::{Error, Result};
use crate::numerics::kernels::{matmul, softmax_rows};
use crate::numerics::{ParamStore, Tape, Tensor};

pub const WARMUP_RUNS: usize = 3;
pub const MIN_REPETITIONS: usize = 20;
pub const DEFAULT_SIZES: [usize; 4] = [64, 256, 1024, 4096];
pub const DEFAULT_CHANNELS: usize = 8;
pub const DEFAULT_HEADS: usize = 2;
pub const CSV_HEADER: &str = "layer_kind,token_count,median_ns,mad_ns,repetitions";

/// Shortest wall time a single timed sample may take. Calls faster than this
/// are repeated in an inner loop and the sample is divided back down.
const MIN_SAMPLE: Duration = Duration::from_micros(500);

/// Scaled dot-product multi-head attention with query, key, value and output
/// projections, all `(d, d)`.
#[derive(Clone, Debug)]
pub struct ReferenceAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    heads: usize,
}

impl ReferenceAttention {
    pub fn new(d: usize, heads: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        check_heads(d, heads)?;
        let std = (1.0 / d as f64).sqrt();
        let mut draw = || {
            Tensor::from_fn(&[d, d], |_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                std * z
            })
        };
        Ok(ReferenceAttention {
            wq: draw(),
            wk: draw(),
            wv: draw(),
            wo: draw(),
            heads,
        })
    }

    /// All four projections set to the identity.
    pub fn identity(d: usize, heads: usize) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(ReferenceAttention {
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
            wo: Tensor::eye(d),
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        reference_attention_forward(x, self)
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(d_h)) V` per head, heads concatenated, then `W_o`.
/// Costs `O(n^2 d)`.
pub fn reference_attention_forward(x: &Tensor, attn: &ReferenceAttention) -> Result<Tensor> {
    let (n, d) = x.matrix()?;
    if attn.wq.dims() != [d, d] {
        return Err(Error::ShapeMismatch {
            op: "reference attention",
            left: x.dims().to_vec(),
            right: attn.wq.dims().to_vec(),
        });
    }
    check_heads(d, attn.heads)?;
    let dh = d / attn.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matmul(x.data(), attn.wq.data(), n, d, d);
    let k = matmul(x.data(), attn.wk.data(), n, d, d);
    let v = matmul(x.data(), attn.wv.data(), n, d, d);

    let mut mixed = vec![0.0; n * d];
    let mut scores = vec![0.0; n * n];
    for h in 0..attn.heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..n {
                let kj = &k[j * d + off..j * d + off + dh];
                scores[i * n + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let probs = softmax_rows(&scores, n);
        for i in 0..n {
            let out = &mut mixed[i * d + off..i * d + off + dh];
            for j in 0..n {
                let pij = probs[i * n + j];
                for (o, &vj) in out.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                    *o += pij * vj;
                }
            }
        }
    }
    Tensor::new(vec![n, d], matmul(&mixed, attn.wo.data(), n, d, d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    Mixing,
    Attention,
}

impl LayerKind {
    pub const ALL: [LayerKind; 2] = [LayerKind::Mixing, LayerKind::Attention];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Mixing => "mixing",
            LayerKind::Attention => "attention",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub layer_kind: LayerKind,
    pub token_count: usize,
    pub median_ns: f64,
    pub mad_ns: f64,
    pub repetitions: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn series(&self, kind: LayerKind) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.layer_kind == kind)
    }

    /// Least-squares slope of `ln median_ns` against `ln token_count`.
    pub fn slope(&self, kind: LayerKind) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .series(kind)
            .map(|r| ((r.token_count as f64).ln(), r.median_ns.ln()))
            .collect();
        fit_slope(&pts)
    }

    pub fn median_at(&self, kind: LayerKind, tokens: usize) -> Option<f64> {
        self.series(kind)
            .find(|r| r.token_count == tokens)
            .map(|r| r.median_ns)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.1},{:.1},{}\n",
                r.layer_kind, r.token_count, r.median_ns, r.mad_ns, r.repetitions
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// One `slope <kind>=<value>` line per layer.
    pub fn summary(&self) -> String {
        LayerKind::ALL
            .iter()
            .filter_map(|&k| self.slope(k).map(|s| format!("slope {k}={s:.3}\n")))
            .collect()
    }
}

/// Ordinary least-squares slope; `None` with fewer than two distinct x values.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Median and median absolute deviation. Panics on an empty slice.
pub fn median_mad(samples: &[f64]) -> (f64, f64) {
    fn median(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len().is_multiple_of(2) {
            0.5 * (v[m - 1] + v[m])
        } else {
            v[m]
        }
    }
    let mut v = samples.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = samples.iter().map(|s| (s - med).abs()).collect();
    (med, median(&mut dev))
}

#[derive(Clone, Debug)]
pub struct ScalingConfig {
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub heads: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            sizes: DEFAULT_SIZES.to_vec(),
            channels: DEFAULT_CHANNELS,
            heads: DEFAULT_HEADS,
            reps: MIN_REPETITIONS,
            seed: 0,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 3 {
            return Err(Error::InvalidArgument(
                "the size ladder needs at least 3 sizes".into(),
            ));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "sizes must be strictly increasing".into(),
            ));
        }
        if self.sizes[self.sizes.len() - 1] < 16 * self.sizes[0] {
            return Err(Error::InvalidArgument(
                "sizes must span at least a 16x range".into(),
            ));
        }
        for &n in &self.sizes {
            grid_side(n)?;
        }
        if self.reps < MIN_REPETITIONS {
            return Err(Error::InvalidArgument(format!(
                "at least {MIN_REPETITIONS} repetitions are required, got {}",
                self.reps
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidArgument("channels must be positive".into()));
        }
        check_heads(self.channels, self.heads)
    }
}

/// Side of the square token grid; `n` must be a perfect square with an even side.
pub fn grid_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || !side.is_multiple_of(2) || side == 0 {
        return Err(Error::InvalidArgument(format!(
            "token count {n} is not a perfect square with an even side"
        )));
    }
    Ok(side)
}

/// Times `f` with warmups, then `reps` samples of an auto-sized inner loop.
/// Returns `(median_ns, mad_ns)` per call.
fn time_call(reps: usize, mut f: impl FnMut()) -> (f64, f64) {
    for _ in 0..WARMUP_RUNS {
        f();
    }
    let mut inner = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            f();
        }
        if t.elapsed() >= MIN_SAMPLE || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                f();
            }
            t.elapsed().as_nanos() as f64 / inner as f64
        })
        .collect();
    median_mad(&samples)
}

struct MixingCase {
    store: ParamStore,
    layer: MixingLayer,
    input: Tensor,
}

impl MixingCase {
    fn new(side: usize, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let layer = MixingLayer::new(&mut store, "bench", channels, (side, side), rng)?;
        let input = Tensor::from_fn(&[side, side, channels], |_| -> f64 {
            StandardNormal.sample(&mut *rng)
        });
        Ok(MixingCase {
            store,
            layer,
            input,
        })
    }

    fn run(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let y = self.layer.forward(&p, tape.constant(self.input.clone()))?;
        let out = y.value().clone();
        Ok(out)
    }

    /// Zeroed fusion makes the layer an exact identity.
    fn self_check(&self) -> Result<()> {
        let mut store = self.store.clone();
        let w = self.layer.fusion_weight();
        let b = self.layer.fusion_bias();
        store.set(w, Tensor::zeros(store.get(w).dims()))?;
        store.set(b, Tensor::zeros(store.get(b).dims()))?;
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let y = self.layer.forward(&p, tape.constant(self.input.clone()))?;
        let ok = y.value().max_abs_diff(&self.input)? == 0.0 && self.run()?.is_finite();
        check(ok, "mixing layer failed its zero-fusion identity check")
    }
}

fn attention_self_check(attn: &ReferenceAttention, x: &Tensor) -> Result<()> {
    let (n, d) = x.matrix()?;
    let out = attn.forward(x)?;
    check(
        out.dims() == [n, d] && out.is_finite(),
        "attention produced a malformed output",
    )?;
    let same = Tensor::from_fn(&[n, d], |i| x.data()[i % d]);
    let y = attn.forward(&same)?;
    let first = y.row(0);
    let sym = (1..n).all(|i| {
        y.row(i)
            .iter()
            .zip(first)
            .all(|(a, b)| (a - b).abs() <= 1e-12)
    });
    check(sym, "attention broke the identical-token symmetry check")
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg.into()))
    }
}

/// Verifies both layers at every configured size, then times them.
pub fn run_scaling_study(cfg: &ScalingConfig) -> Result<BenchReport> {
    cfg.validate()?;
    log::info!("timing on the calling thread; no core pinning is attempted");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = BenchReport::default();
    let mut attention_rows = Vec::with_capacity(cfg.sizes.len());
    for &n in &cfg.sizes {
        let side = grid_side(n)?;
        let mixing = MixingCase::new(side, cfg.channels, &mut rng)?;
        let attn = ReferenceAttention::new(cfg.channels, cfg.heads, &mut rng)?;
        let tokens = mixing.input.clone().reshape(&[n, cfg.channels])?;
        mixing.self_check()?;
        attention_self_check(&attn, &tokens)?;

        let (median_ns, mad_ns) = time_call(cfg.reps, || {
            black_box(mixing.run().expect("mixing forward was checked above"));
        });
        log::info!("mixing n={n}: {median_ns:.0} ns");
        report.rows.push(BenchRow {
            layer_kind: LayerKind::Mixing,
            token_count: n,
            median_ns,
            mad_ns,
            repetitions: cfg.reps,
        });
        let (median_ns, mad_ns) = time_call(cfg.reps, || {
            black_box(
                attn.forward(black_box(&tokens))
                    .expect("attention forward was checked above"),
            );
        });
        log::info!("attention n={n}: {median_ns:.0} ns");
        attention_rows.push(BenchRow {
            layer_kind: LayerKind::Attention,
            token_count: n,
            median_ns,
            mad_ns,
            repetitions: cfg.reps,
        });
    }
    report.rows.extend(attention_rows);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_token_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = ReferenceAttention::new(4, 2, &mut rng).unwrap();
        let x = tensor(&[1, 4], &[0.3, -1.0, 2.0, 0.5]);
        let y = attn.forward(&x).unwrap();
        let v = matmul(x.data(), attn.wv.data(), 1, 4, 4);
        let expected = matmul(&v, attn.wo.data(), 1, 4, 4);
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_hand_blend() {
        // One head, identity projections, d = 1: scores are x_i x_j.
        let attn = ReferenceAttention::identity(1, 1).unwrap();
        let y = attn.forward(&tensor(&[2, 1], &[1.0, 2.0])).unwrap();
        let blend = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            (ea * 1.0 + eb * 2.0) / (ea + eb)
        };
        assert!((y.data()[0] - blend(1.0, 2.0)).abs() < 1e-12);
        assert!((y.data()[1] - blend(2.0, 4.0)).abs() < 1e-12);
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(ReferenceAttention::identity(6, 4).is_err());
        assert!(ReferenceAttention::identity(6, 0).is_err());
        let attn = ReferenceAttention::identity(4, 2).unwrap();
        assert!(attn.forward(&Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn slope_and_stats() {
        let pts: Vec<(f64, f64)> = [1.0f64, 2.0, 4.0]
            .iter()
            .map(|&x| (x.ln(), 3.0 * x.ln() + 1.0))
            .collect();
        assert!((fit_slope(&pts).unwrap() - 3.0).abs() < 1e-12);
        assert!(fit_slope(&pts[..1]).is_none());
        assert_eq!(median_mad(&[1.0, 9.0, 2.0, 3.0, 100.0]), (3.0, 2.0));
        assert_eq!(median_mad(&[1.0, 2.0]), (1.5, 0.5));
    }

    #[test]
    fn ladder_validation() {
        assert!(ScalingConfig::default().validate().is_ok());
        let bad = |sizes: &[usize], reps| ScalingConfig {
            sizes: sizes.to_vec(),
            reps,
            ..ScalingConfig::default()
        };
        assert!(bad(&[64, 256], 20).validate().is_err());
        assert!(bad(&[64, 256, 512], 20).validate().is_err());
        assert!(bad(&[64, 256, 1024], 5).validate().is_err());
        assert!(bad(&[64, 64, 1024], 20).validate().is_err());
        assert!(bad(&[49, 256, 1024], 20).validate().is_err());
        assert!(grid_side(81).is_err());
        assert_eq!(grid_side(1024).unwrap(), 32);
    }

    #[test]
    fn small_study_produces_sorted_series() {
        let cfg = ScalingConfig {
            sizes: vec![4, 16, 64],
            ..ScalingConfig::default()
        };
        let report = run_scaling_study(&cfg).unwrap();
        assert_eq!(report.rows.len(), 6);
        for kind in LayerKind::ALL {
            let counts: Vec<usize> = report.series(kind).map(|r| r.token_count).collect();
            assert_eq!(counts, vec![4, 16, 64]);
            assert!(report.slope(kind).unwrap().is_finite());
        }
        let csv = report.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 7);
    }
}
