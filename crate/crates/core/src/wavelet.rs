//! Orthonormal 2D Haar transform on `(h, w, c)` feature maps.
//!
//! Each non-overlapping 2x2 block `[[a, b], [c, d]]` maps to
//!
//! ```text
//! LL = (a + b + c + d) / 2     approximation
//! LH = (a + b - c - d) / 2     vertical detail
//! HL = (a - b + c - d) / 2     horizontal detail
//! HH = (a - b - c + d) / 2     diagonal detail
//! ```
//!
//! The 4x4 block matrix is symmetric and orthogonal, so the inverse applies
//! the same butterfly and the transform preserves energy exactly.
//!
//! The packed layout stores the four subbands as channel blocks of one
//! `(h/2, w/2, 4c)` tensor in the order LL, LH, HL, HH.

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const SUBBAND_NAMES: [&str; 4] = ["LL", "LH", "HL", "HH"];

/// The four subbands of one decomposition level, each `(h/2, w/2, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet<T = f64> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Real> SubbandSet<T> {
    pub fn new(ll: Tensor<T>, lh: Tensor<T>, hl: Tensor<T>, hh: Tensor<T>) -> Result<Self> {
        for other in [&lh, &hl, &hh] {
            ll.expect_same_dims(other, "subband set")?;
        }
        ll.hwc()?;
        Ok(SubbandSet { ll, lh, hl, hh })
    }

    pub fn bands(&self) -> [&Tensor<T>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    pub fn dims(&self) -> &[usize] {
        self.ll.dims()
    }

    /// Sum of squares over all four subbands.
    pub fn energy(&self) -> T {
        self.bands().iter().map(|b| b.sum_sq()).sum()
    }

    pub fn detail_energy(&self) -> T {
        self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }

    /// Stack into the packed `(h/2, w/2, 4c)` layout.
    pub fn pack(&self) -> Tensor<T> {
        let (h, w, c) = self.ll.hwc().expect("validated on construction");
        let bands = self.bands();
        let mut out = Vec::with_capacity(h * w * 4 * c);
        for p in 0..h * w {
            for band in bands {
                out.extend_from_slice(&band.data()[p * c..(p + 1) * c]);
            }
        }
        Tensor::from_parts(vec![h, w, 4 * c], out)
    }

    pub fn unpack(packed: &Tensor<T>) -> Result<Self> {
        let (h, w, c4) = packed.hwc()?;
        if c4 % 4 != 0 {
            return Err(Error::InvalidShape {
                op: "subband unpack",
                dims: packed.dims().to_vec(),
                reason: "channel count must be a multiple of 4".into(),
            });
        }
        let c = c4 / 4;
        let mut bands: [Vec<T>; 4] = Default::default();
        for p in 0..h * w {
            let px = &packed.data()[p * c4..(p + 1) * c4];
            for (b, band) in bands.iter_mut().enumerate() {
                band.extend_from_slice(&px[b * c..(b + 1) * c]);
            }
        }
        let [ll, lh, hl, hh] = bands.map(|d| Tensor::from_parts(vec![h, w, c], d));
        Ok(SubbandSet { ll, lh, hl, hh })
    }
}

fn check_even(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match dims[..] {
        [h, w, c] if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        [_, _, _] => Err(Error::OddDimension {
            dims: dims.to_vec(),
        }),
        _ => Err(Error::InvalidShape {
            op: "haar forward",
            dims: dims.to_vec(),
            reason: "expected (height, width, channel)".into(),
        }),
    }
}

/// Single-level forward transform into the packed layout.
pub fn forward_packed<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = check_even(x.dims())?;
    let (ho, wo) = (h / 2, w / 2);
    let half = T::lit(0.5);
    let src = x.data();
    let mut out = vec![T::zero(); ho * wo * 4 * c];
    for i in 0..ho {
        let top = 2 * i * w * c;
        let bottom = (2 * i + 1) * w * c;
        for j in 0..wo {
            let dst = &mut out[(i * wo + j) * 4 * c..(i * wo + j + 1) * 4 * c];
            let (tl, tr) = (top + 2 * j * c, top + (2 * j + 1) * c);
            let (bl, br) = (bottom + 2 * j * c, bottom + (2 * j + 1) * c);
            for ch in 0..c {
                let (a, b) = (src[tl + ch], src[tr + ch]);
                let (cc, d) = (src[bl + ch], src[br + ch]);
                dst[ch] = (a + b + cc + d) * half;
                dst[c + ch] = (a + b - cc - d) * half;
                dst[2 * c + ch] = (a - b + cc - d) * half;
                dst[3 * c + ch] = (a - b - cc + d) * half;
            }
        }
    }
    Ok(Tensor::from_parts(vec![ho, wo, 4 * c], out))
}

/// Single-level inverse transform from the packed layout.
pub fn inverse_packed<T: Real>(packed: &Tensor<T>) -> Result<Tensor<T>> {
    let (ho, wo, c4) = packed.hwc()?;
    if c4 % 4 != 0 {
        return Err(Error::InvalidShape {
            op: "haar inverse",
            dims: packed.dims().to_vec(),
            reason: "channel count must be a multiple of 4".into(),
        });
    }
    let c = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let half = T::lit(0.5);
    let src = packed.data();
    let mut out = vec![T::zero(); h * w * c];
    for i in 0..ho {
        for j in 0..wo {
            let s = &src[(i * wo + j) * c4..(i * wo + j + 1) * c4];
            let tl = (2 * i * w + 2 * j) * c;
            let tr = tl + c;
            let bl = ((2 * i + 1) * w + 2 * j) * c;
            let br = bl + c;
            for ch in 0..c {
                let (ll, lh, hl, hh) = (s[ch], s[c + ch], s[2 * c + ch], s[3 * c + ch]);
                out[tl + ch] = (ll + lh + hl + hh) * half;
                out[tr + ch] = (ll + lh - hl - hh) * half;
                out[bl + ch] = (ll - lh + hl - hh) * half;
                out[br + ch] = (ll - lh - hl + hh) * half;
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, c], out))
}

/// Single-level forward transform.
pub fn forward<T: Real>(x: &Tensor<T>) -> Result<SubbandSet<T>> {
    SubbandSet::unpack(&forward_packed(x)?)
}

/// Exact inverse of [`forward`].
pub fn inverse<T: Real>(s: &SubbandSet<T>) -> Result<Tensor<T>> {
    for other in [&s.lh, &s.hl, &s.hh] {
        s.ll.expect_same_dims(other, "haar inverse")?;
    }
    inverse_packed(&s.pack())
}

/// Multi-level decomposition; level `l` is computed from level `l - 1`'s LL.
#[derive(Clone, Debug)]
pub struct WaveletPyramid<T = f64> {
    pub levels: Vec<SubbandSet<T>>,
}

impl<T: Real> WaveletPyramid<T> {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// Number of levels a `(h, w)` map decomposes into: keep halving while both
/// sides are even and at least 2.
pub fn max_depth(h: usize, w: usize) -> usize {
    let (mut h, mut w, mut depth) = (h, w, 0);
    while h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 {
        depth += 1;
        h /= 2;
        w /= 2;
    }
    depth
}

pub fn multilevel<T: Real>(x: &Tensor<T>) -> Result<WaveletPyramid<T>> {
    let (h, w, _) = check_even(x.dims())?;
    let depth = max_depth(h, w);
    let mut levels = Vec::with_capacity(depth);
    let mut current = forward(x)?;
    for _ in 1..depth {
        let next = forward(&current.ll)?;
        levels.push(current);
        current = next;
    }
    levels.push(current);
    Ok(WaveletPyramid { levels })
}
