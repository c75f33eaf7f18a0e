//! Token maps built from channel slices and intra-batch token exchange.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hfqe::{top_k_from_norms, TopKSelection};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Fraction of token positions swapped between paired maps by default.
pub const DEFAULT_EXCHANGE_RATIO: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Original,
    Enhanced,
}

/// A grid of tokens flattened to `(g_h * g_w, d)` rows.
///
/// `X` is [`Tensor`] for plain values or [`Var`] inside a forward pass.
#[derive(Clone, Debug)]
pub struct TokenMap<X = Tensor> {
    pub tokens: X,
    pub grid: (usize, usize),
    pub label: Option<usize>,
    kind: TokenKind,
}

impl<X> TokenMap<X> {
    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    fn with_tokens<Y>(&self, tokens: Y) -> TokenMap<Y> {
        TokenMap {
            tokens,
            grid: self.grid,
            label: self.label,
            kind: self.kind,
        }
    }
}

impl TokenMap<Tensor> {
    pub fn new(
        tokens: Tensor,
        grid: (usize, usize),
        kind: TokenKind,
        label: Option<usize>,
    ) -> Result<Self> {
        let (n, _) = tokens.matrix()?;
        if n != grid.0 * grid.1 {
            return Err(Error::InvalidShape {
                op: "token map",
                dims: tokens.dims().to_vec(),
                reason: format!("grid {grid:?} does not cover {n} tokens"),
            });
        }
        Ok(TokenMap {
            tokens,
            grid,
            label,
            kind,
        })
    }

    pub fn top_k(&self, k_ratio: f64) -> Result<TopKSelection> {
        crate::hfqe::top_k_select(&self.tokens, k_ratio)
    }
}

impl<'t> TokenMap<Var<'t>> {
    pub fn top_k(&self, k_ratio: f64) -> Result<TopKSelection> {
        let norms: Vec<f64> = {
            let v = self.tokens.value();
            let (n, _) = v.matrix()?;
            (0..n)
                .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        };
        top_k_from_norms(&norms, k_ratio)
    }

    /// The token grid as an `(g_h, g_w, d)` feature map.
    pub fn as_feature_map(&self) -> Result<Var<'t>> {
        let d = self.tokens.dims()[1];
        self.tokens.reshape(&[self.grid.0, self.grid.1, d])
    }

    pub fn values(&self) -> TokenMap<Tensor> {
        self.with_tokens(self.tokens.value().clone())
    }
}

#[derive(Clone, Debug)]
struct SliceConv {
    weight: ParamId,
    bias: ParamId,
}

/// `S` same-padded convolutions, one per contiguous channel slice; slice `s`
/// uses a `(2s + 1) x (2s + 1)` kernel.
#[derive(Clone, Debug)]
pub struct SliceConvBank {
    slices: Vec<SliceConv>,
    channels: usize,
}

impl SliceConvBank {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        n_slices: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_slices == 0 || !channels.is_multiple_of(n_slices) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels cannot be split into {n_slices} slices"
            )));
        }
        let width = channels / n_slices;
        let slices = (0..n_slices)
            .map(|s| {
                let k = 2 * s + 1;
                let std = (1.0 / (k * k * width) as f64).sqrt();
                SliceConv {
                    weight: store.add_normal(
                        format!("{prefix}.slice{s}.w"),
                        &[k, k, width, width],
                        std,
                        rng,
                    ),
                    bias: store.add_zeros(format!("{prefix}.slice{s}.b"), &[width]),
                }
            })
            .collect();
        Ok(SliceConvBank { slices, channels })
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        (0..self.slices.len()).map(|s| 2 * s + 1).collect()
    }

    pub fn weight_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slices.iter().flat_map(|s| [s.weight, s.bias])
    }

    /// Slices `x (h, w, c)` along channels, convolves each slice, and
    /// flattens the re-concatenated map into `h * w` tokens of width `c`.
    pub fn build<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        kind: TokenKind,
        label: Option<usize>,
    ) -> Result<TokenMap<Var<'t>>> {
        let dims = x.dims();
        let [h, w, c] = dims[..] else {
            return Err(Error::InvalidShape {
                op: "build_token_map",
                dims,
                reason: "expected (height, width, channel)".into(),
            });
        };
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "build_token_map",
                left: dims,
                right: vec![self.channels],
            });
        }
        let width = c / self.slices.len();
        let parts = self
            .slices
            .iter()
            .enumerate()
            .map(|(s, conv)| {
                x.narrow(2, s * width, width)?
                    .conv2d(p.get(conv.weight), Some(p.get(conv.bias)))
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = p.tape().concat(&parts, 2)?;
        Ok(TokenMap {
            tokens: merged.reshape(&[h * w, c])?,
            grid: (h, w),
            label,
            kind,
        })
    }

    /// Value-level [`build`](Self::build) with frozen parameters.
    pub fn build_values(
        &self,
        store: &ParamStore,
        x: &Tensor,
        kind: TokenKind,
        label: Option<usize>,
    ) -> Result<TokenMap<Tensor>> {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let map = self.build(&p, tape.constant(x.clone()), kind, label)?;
        Ok(map.values())
    }
}

/// Row storage that can exchange rows with a same-shaped partner.
pub trait TokenRows: Sized {
    fn row_count(&self) -> usize;
    fn row_width(&self) -> usize;
    fn exchange(&self, other: &Self, swap: &[bool]) -> Result<(Self, Self)>;
}

impl TokenRows for Tensor {
    fn row_count(&self) -> usize {
        self.dims()[0]
    }

    fn row_width(&self) -> usize {
        self.dims()[1]
    }

    fn exchange(&self, other: &Self, swap: &[bool]) -> Result<(Self, Self)> {
        self.expect_same_dims(other, "exchange_tokens")?;
        let d = self.row_width();
        let (mut a, mut b) = (self.clone(), other.clone());
        for (r, _) in swap.iter().enumerate().filter(|(_, &s)| s) {
            let span = r * d..(r + 1) * d;
            a.data_mut()[span.clone()].copy_from_slice(&other.data()[span.clone()]);
            b.data_mut()[span.clone()].copy_from_slice(&self.data()[span]);
        }
        Ok((a, b))
    }
}

impl<'t> TokenRows for Var<'t> {
    fn row_count(&self) -> usize {
        self.dims()[0]
    }

    fn row_width(&self) -> usize {
        self.dims()[1]
    }

    fn exchange(&self, other: &Self, swap: &[bool]) -> Result<(Self, Self)> {
        Ok((self.mix_rows(*other, swap)?, other.mix_rows(*self, swap)?))
    }
}

/// Swaps a random subset of token positions between paired maps.
///
/// Maps are paired by batch position (0 with 1, 2 with 3, ...); an odd final
/// map passes through unchanged. Each pair swaps the same
/// `round(ratio * n_tokens)` positions on both sides, drawn uniformly from
/// an RNG seeded with `seed`.
pub fn exchange_tokens<X: TokenRows + Clone>(
    batch: &[TokenMap<X>],
    ratio: f64,
    seed: u64,
) -> Result<Vec<TokenMap<X>>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "exchange ratio must lie in [0, 1], got {ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch.len());
    for pair in batch.chunks(2) {
        let [a, b] = pair else {
            out.push(pair[0].clone());
            break;
        };
        if a.kind != b.kind {
            return Err(Error::InvalidArgument(format!(
                "cannot exchange tokens between {:?} and {:?} maps",
                a.kind, b.kind
            )));
        }
        let n = a.tokens.row_count();
        if n != b.tokens.row_count() || a.tokens.row_width() != b.tokens.row_width() {
            return Err(Error::InvalidArgument(format!(
                "token maps differ in size: {n}x{} vs {}x{}",
                a.tokens.row_width(),
                b.tokens.row_count(),
                b.tokens.row_width()
            )));
        }
        let count = (ratio * n as f64).round() as usize;
        let mut swap = vec![false; n];
        for i in index::sample(&mut rng, n, count.min(n)) {
            swap[i] = true;
        }
        let (ta, tb) = a.tokens.exchange(&b.tokens, &swap)?;
        out.push(a.with_tokens(ta));
        out.push(b.with_tokens(tb));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tagged(map: usize, n: usize, kind: TokenKind) -> TokenMap {
        // token value (map, position) doubles as a provenance tag
        let t = Tensor::from_fn(&[n, 2], |i| {
            if i % 2 == 0 {
                map as f64
            } else {
                (i / 2) as f64
            }
        });
        TokenMap::new(t, (n, 1), kind, None).unwrap()
    }

    #[test]
    fn identity_bank_reproduces_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = SliceConvBank::new(&mut store, "b", 3, 1, &mut rng).unwrap();
        let w = store.find("b.slice0.w").unwrap();
        store
            .set(w, Tensor::eye(3).reshape(&[1, 1, 3, 3]).unwrap())
            .unwrap();
        let x = Tensor::from_fn(&[2, 4, 3], |i| i as f64 * 0.5);
        let map = bank
            .build_values(&store, &x, TokenKind::Original, Some(2))
            .unwrap();
        assert_eq!(map.tokens.dims(), &[8, 3]);
        assert_eq!(map.tokens.data(), x.data());
        assert_eq!(map.label, Some(2));
    }

    #[test]
    fn kernel_schedule_and_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = SliceConvBank::new(&mut store, "b", 8, 4, &mut rng).unwrap();
        assert_eq!(bank.kernel_sizes(), vec![1, 3, 5, 7]);
        assert_eq!(
            store.get(store.find("b.slice3.w").unwrap()).dims(),
            &[7, 7, 2, 2]
        );
        let map = bank
            .build_values(&store, &Tensor::ones(&[4, 4, 8]), TokenKind::Enhanced, None)
            .unwrap();
        assert_eq!(map.tokens.dims(), &[16, 8]);
        assert_eq!(map.kind(), TokenKind::Enhanced);
        assert!(SliceConvBank::new(&mut store, "c", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_bank_gives_zero_tokens() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = SliceConvBank::new(&mut store, "b", 4, 2, &mut rng).unwrap();
        for id in bank.weight_ids().collect::<Vec<_>>() {
            let dims = store.get(id).dims().to_vec();
            store.set(id, Tensor::zeros(&dims)).unwrap();
        }
        let map = bank
            .build_values(&store, &Tensor::ones(&[2, 2, 4]), TokenKind::Original, None)
            .unwrap();
        assert!(map.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_ratio_is_identity_full_ratio_swaps() {
        let batch = vec![
            tagged(0, 10, TokenKind::Original),
            tagged(1, 10, TokenKind::Original),
        ];
        let same = exchange_tokens(&batch, 0.0, 5).unwrap();
        assert_eq!(same[0].tokens, batch[0].tokens);
        let swapped = exchange_tokens(&batch, 1.0, 5).unwrap();
        assert_eq!(swapped[0].tokens, batch[1].tokens);
        assert_eq!(swapped[1].tokens, batch[0].tokens);
    }

    #[test]
    fn mixed_kinds_in_pair_rejected() {
        let batch = vec![
            tagged(0, 4, TokenKind::Original),
            tagged(1, 4, TokenKind::Enhanced),
        ];
        assert!(exchange_tokens(&batch, 0.5, 1).is_err());
        let uneven = vec![
            tagged(0, 4, TokenKind::Original),
            tagged(1, 6, TokenKind::Original),
        ];
        assert!(exchange_tokens(&uneven, 0.5, 1).is_err());
    }

    #[test]
    fn swap_count_and_shared_positions() {
        let batch: Vec<_> = (0..5).map(|m| tagged(m, 20, TokenKind::Original)).collect();
        let out = exchange_tokens(&batch, 0.25, 9).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[4].tokens, batch[4].tokens);
        for pair in 0..2 {
            let (a, b) = (&out[2 * pair], &out[2 * pair + 1]);
            let moved: Vec<usize> = (0..20)
                .filter(|&r| a.tokens.row(r)[0] != (2 * pair) as f64)
                .collect();
            assert_eq!(moved.len(), 5);
            for &r in &moved {
                assert_eq!(b.tokens.row(r)[0], (2 * pair) as f64);
                // positions preserved
                assert_eq!(a.tokens.row(r)[1], r as f64);
            }
        }
    }

    #[test]
    fn var_exchange_matches_tensor_exchange() {
        let batch = vec![
            tagged(0, 8, TokenKind::Enhanced),
            tagged(1, 8, TokenKind::Enhanced),
        ];
        let tape = Tape::new();
        let vars: Vec<TokenMap<Var<'_>>> = batch
            .iter()
            .map(|m| m.with_tokens(tape.param(m.tokens.clone())))
            .collect();
        let via_vars = exchange_tokens(&vars, 0.5, 3).unwrap();
        let via_values = exchange_tokens(&batch, 0.5, 3).unwrap();
        for (v, t) in via_vars.iter().zip(&via_values) {
            assert_eq!(*v.tokens.value(), t.tokens);
        }
    }
}
