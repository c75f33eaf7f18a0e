//! High-frequency quantization enhancement and top-K token selection.
//!
//! Enhancement quantizes the LL subband of a single-level Haar transform to
//! multiples of `q` and reconstructs, leaving the three detail subbands
//! untouched. `concat_hf` keeps only the detail subbands (LH, HL, HH in that
//! channel order); the [`Downsampler`] maps them back onto a token grid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Real, Tensor, Var};
use crate::wavelet::{self, SubbandSet};

/// Quantization interval used when none is configured.
pub const DEFAULT_Q: f64 = 15.0;
/// Fraction of tokens selected when none is configured.
pub const DEFAULT_K_RATIO: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizationConfig {
    q: f64,
}

impl QuantizationConfig {
    pub fn new(q: f64) -> Result<Self> {
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "quantization interval must be positive, got {q}"
            )));
        }
        Ok(QuantizationConfig { q })
    }

    pub fn q(&self) -> f64 {
        self.q
    }
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        QuantizationConfig { q: DEFAULT_Q }
    }
}

/// `floor((v + 0.5) / q) * q` elementwise.
pub fn quantize_ll<T: Real>(ll: &Tensor<T>, q: f64) -> Result<Tensor<T>> {
    let cfg = QuantizationConfig::new(q)?;
    let q = T::lit(cfg.q);
    let half = T::lit(0.5);
    Ok(ll.map(|v| ((v + half) / q).floor() * q))
}

/// Quantizes LL and reconstructs. Output has the input's shape.
pub fn hfqe_enhance<T: Real>(x: &Tensor<T>, cfg: QuantizationConfig) -> Result<Tensor<T>> {
    let mut s = wavelet::forward(x)?;
    s.ll = quantize_ll(&s.ll, cfg.q)?;
    wavelet::inverse(&s)
}

/// Channel concatenation of the LH, HL, HH subbands: `(h, w, c) -> (h/2, w/2, 3c)`.
pub fn concat_hf<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let packed = wavelet::forward_packed(x)?;
    let (h, w, c4) = packed.hwc()?;
    let c = c4 / 4;
    let mut out = Vec::with_capacity(h * w * 3 * c);
    for px in packed.data().chunks(c4) {
        out.extend_from_slice(&px[c..]);
    }
    Tensor::new(vec![h, w, 3 * c], out)
}

/// Differentiable [`concat_hf`].
pub fn concat_hf_var<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let packed = x.haar_forward()?;
    let c = packed.dims()[2] / 4;
    packed.narrow(2, c, 3 * c)
}

/// Energy of the LL subband and of the three detail subbands.
pub fn band_energies<T: Real>(x: &Tensor<T>) -> Result<(f64, f64)> {
    let s: SubbandSet<T> = wavelet::forward(x)?;
    Ok((s.ll.sum_sq().as_f64(), s.detail_energy().as_f64()))
}

/// The learned map from high-frequency subbands back to a token grid:
/// channel projection `3c -> d` then nearest-neighbour resize.
#[derive(Clone, Debug)]
pub struct Downsampler {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Downsampler {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (1.0 / in_channels as f64).sqrt();
        Downsampler {
            weight: store.add_normal(
                format!("{prefix}.w"),
                &[in_channels, out_channels],
                std,
                rng,
            ),
            bias: store.add_zeros(format!("{prefix}.b"), &[out_channels]),
            in_channels,
            out_channels,
        }
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        hf: Var<'t>,
        target: (usize, usize),
    ) -> Result<Var<'t>> {
        if target.0 == 0 || target.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "downsample target {target:?} must be positive"
            )));
        }
        hf.linear(p.get(self.weight), Some(p.get(self.bias)))?
            .resize_nearest(target.0, target.1)
    }
}

/// Ranked top-K token positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKSelection {
    /// Positions ordered by decreasing L2 norm; index `k` holds the rank-`k` token.
    pub indices: Vec<usize>,
    pub k_ratio: f64,
}

impl TopKSelection {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// `max(1, round(k_ratio * n))`.
pub fn selection_size(k_ratio: f64, n: usize) -> Result<usize> {
    if !(k_ratio > 0.0 && k_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "k ratio must lie in (0, 1], got {k_ratio}"
        )));
    }
    Ok(((k_ratio * n as f64).round() as usize).clamp(1, n.max(1)))
}

/// Positions of the `K` largest norms; ties go to the lower position.
pub fn top_k_from_norms(norms: &[f64], k_ratio: f64) -> Result<TopKSelection> {
    if norms.is_empty() {
        return Err(Error::InvalidArgument("empty token map".into()));
    }
    let k = selection_size(k_ratio, norms.len())?;
    let mut order: Vec<usize> = (0..norms.len()).collect();
    // stable: equal norms keep ascending position order
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    order.truncate(k);
    Ok(TopKSelection {
        indices: order,
        k_ratio,
    })
}

/// Top-K rows of a `(n, d)` token tensor by L2 norm.
pub fn top_k_select(tokens: &Tensor, k_ratio: f64) -> Result<TopKSelection> {
    let (n, _) = tokens.matrix()?;
    let norms: Vec<f64> = (0..n)
        .map(|i| tokens.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    top_k_from_norms(&norms, k_ratio)
}
