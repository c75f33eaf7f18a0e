//! Multi-wave mixing layer, the encoder block built around it, and one
//! branch-augmented cascade stage.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hfqe::{self, Downsampler, QuantizationConfig, TopKSelection};
use crate::numerics::{Bound, ParamId, ParamStore, Tensor, Var};
use crate::tokens::{exchange_tokens, SliceConvBank, TokenKind, TokenMap};
use crate::wavelet;

#[derive(Clone, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Affine {
            w: store.add_normal(
                format!("{name}.w"),
                &[cin, cout],
                (1.0 / cin as f64).sqrt(),
                rng,
            ),
            b: store.add_zeros(format!("{name}.b"), &[cout]),
        }
    }

    fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p.get(self.w), Some(p.get(self.b)))
    }
}

#[derive(Clone, Debug)]
struct UpConv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct MixLevel {
    mix: Affine,
    upsample: Vec<UpConv>,
}

/// Per-level `4c -> c` channel mixing with GELU, `l` chained 2x2 stride-2
/// transposed convolutions back to full resolution, and an `n c -> c`
/// fusion across the `n` pyramid levels.
#[derive(Clone, Debug)]
pub struct MixingLayer {
    levels: Vec<MixLevel>,
    fuse: Affine,
    channels: usize,
    grid: (usize, usize),
}

impl MixingLayer {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        grid: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let depth = wavelet::max_depth(grid.0, grid.1);
        if depth == 0 {
            return Err(Error::OddDimension {
                dims: vec![grid.0, grid.1, channels],
            });
        }
        let std = (1.0 / channels as f64).sqrt();
        let levels = (1..=depth)
            .map(|l| MixLevel {
                mix: Affine::new(
                    store,
                    &format!("{prefix}.level{l}.mix"),
                    4 * channels,
                    channels,
                    rng,
                ),
                upsample: (0..l)
                    .map(|u| UpConv {
                        w: store.add_normal(
                            format!("{prefix}.level{l}.up{u}.w"),
                            &[2, 2, channels, channels],
                            std,
                            rng,
                        ),
                        b: store.add_zeros(format!("{prefix}.level{l}.up{u}.b"), &[channels]),
                    })
                    .collect(),
            })
            .collect();
        let fuse = Affine::new(
            store,
            &format!("{prefix}.fuse"),
            depth * channels,
            channels,
            rng,
        );
        Ok(MixingLayer {
            levels,
            fuse,
            channels,
            grid,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn fusion_weight(&self) -> ParamId {
        self.fuse.w
    }

    pub fn fusion_bias(&self) -> ParamId {
        self.fuse.b
    }

    /// The mixing path without its residual connection.
    pub fn branch<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let dims = x.dims();
        if dims != [self.grid.0, self.grid.1, self.channels] {
            return Err(Error::ShapeMismatch {
                op: "mixing layer",
                left: dims,
                right: vec![self.grid.0, self.grid.1, self.channels],
            });
        }
        let c = self.channels;
        let mut current = x;
        let mut per_level = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let packed = current.haar_forward()?;
            let mut up = level.mix.apply(p, packed)?.gelu()?;
            for conv in &level.upsample {
                up = up.conv_transpose2x2(p.get(conv.w), Some(p.get(conv.b)))?;
            }
            per_level.push(up);
            current = packed.narrow(2, 0, c)?;
        }
        let stacked = p.tape().concat(&per_level, 2)?;
        self.fuse.apply(p, stacked)
    }

    /// `x + branch(x)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.add(self.branch(p, x)?)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Norm {
            gamma: store.add_ones(format!("{name}.gamma"), &[c]),
            beta: store.add_zeros(format!("{name}.beta"), &[c]),
        }
    }

    fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta))
    }
}

/// Pre-norm transformer block with the mixing layer in place of attention:
/// `y = x + mix(norm1(x))`, `out = y + ffn(norm2(y))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    norm1: Norm,
    pub mixing: MixingLayer,
    norm2: Norm,
    ffn_in: Affine,
    ffn_out: Affine,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        grid: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: Norm::new(store, &format!("{prefix}.norm1"), channels),
            mixing: MixingLayer::new(store, &format!("{prefix}.mix"), channels, grid, rng)?,
            norm2: Norm::new(store, &format!("{prefix}.norm2"), channels),
            ffn_in: Affine::new(
                store,
                &format!("{prefix}.ffn1"),
                channels,
                4 * channels,
                rng,
            ),
            ffn_out: Affine::new(
                store,
                &format!("{prefix}.ffn2"),
                4 * channels,
                channels,
                rng,
            ),
        })
    }

    pub fn ffn_output_weights(&self) -> (ParamId, ParamId) {
        (self.ffn_out.w, self.ffn_out.b)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.add(self.mixing.branch(p, self.norm1.apply(p, x)?)?)?;
        let h = self.ffn_in.apply(p, self.norm2.apply(p, y)?)?.gelu()?;
        y.add(self.ffn_out.apply(p, h)?)
    }
}

/// Cascade position and whether the re-identification branch is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub index: usize,
    pub reid: bool,
}

impl StageConfig {
    pub fn new(index: usize) -> Result<Self> {
        if !(1..=3).contains(&index) {
            return Err(Error::InvalidArgument(format!(
                "stage {index} out of range 1..=3"
            )));
        }
        Ok(StageConfig {
            index,
            reid: index > 1,
        })
    }
}

/// Knobs of the high-frequency branch for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BranchOptions {
    pub training: bool,
    /// Build the enhanced branch at all (stages after the first, training only).
    pub enabled: bool,
    /// Quantize LL before building enhanced tokens; when false the enhanced
    /// branch sees the unmodified features.
    pub quantize: bool,
    pub quantization: QuantizationConfig,
    pub k_ratio: f64,
    pub exchange_ratio: f64,
    pub exchange_seed: u64,
}

impl Default for BranchOptions {
    fn default() -> Self {
        BranchOptions {
            training: false,
            enabled: true,
            quantize: true,
            quantization: QuantizationConfig::default(),
            k_ratio: hfqe::DEFAULT_K_RATIO,
            exchange_ratio: crate::tokens::DEFAULT_EXCHANGE_RATIO,
            exchange_seed: 0,
        }
    }
}

/// Loss-side outputs of the enhanced branch, one entry per batch item.
pub struct StageAux<'t> {
    pub original: Vec<TokenMap<Var<'t>>>,
    pub original_topk: Vec<TopKSelection>,
    /// `A(F_h(enhanced))` as `(n_tokens, d)` values.
    pub enhanced: Vec<TokenMap<Tensor>>,
    pub enhanced_topk: Vec<TopKSelection>,
}

impl<'t> StageAux<'t> {
    /// Selected original tokens of item `i` in rank order, `(K, d)`.
    pub fn original_selected(&self, i: usize) -> Result<Var<'t>> {
        self.original[i]
            .tokens
            .gather_rows(&self.original_topk[i].indices)
    }

    /// Selected enhanced tokens of item `i` in rank order, `(K, d)`.
    pub fn enhanced_selected(&self, i: usize) -> Tensor {
        let map = &self.enhanced[i].tokens;
        let d = map.dims()[1];
        let idx = &self.enhanced_topk[i].indices;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            data.extend_from_slice(map.row(r));
        }
        Tensor::new(vec![idx.len(), d], data).expect("consistent selection")
    }
}

pub struct StageOutput<'t> {
    /// Unit-norm embeddings `(d)`.
    pub embeddings: Vec<Var<'t>>,
    /// Mean token before normalization `(d)`.
    pub pooled: Vec<Var<'t>>,
    /// Encoder output as `(h, w, d)` maps, the next stage's input.
    pub features: Vec<Var<'t>>,
    pub aux: Option<StageAux<'t>>,
}

/// Encoder blocks, a closing layer norm, and the downsampling map of one
/// cascade stage.
#[derive(Clone, Debug)]
pub struct Stage {
    pub config: StageConfig,
    pub blocks: Vec<EncoderBlock>,
    out_norm: Norm,
    pub downsampler: Downsampler,
}

impl Stage {
    pub fn new(
        store: &mut ParamStore,
        config: StageConfig,
        channels: usize,
        grid: (usize, usize),
        n_blocks: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let prefix = format!("stage{}", config.index);
        let blocks = (0..n_blocks)
            .map(|b| EncoderBlock::new(store, &format!("{prefix}.block{b}"), channels, grid, rng))
            .collect::<Result<_>>()?;
        let out_norm = Norm::new(store, &format!("{prefix}.norm_out"), channels);
        let downsampler = Downsampler::new(
            store,
            &format!("{prefix}.downsample"),
            3 * channels,
            channels,
            rng,
        );
        Ok(Stage {
            config,
            blocks,
            out_norm,
            downsampler,
        })
    }

    /// Runs the stage over a batch of `(h, w, c)` feature maps.
    ///
    /// Original token maps always pass through the encoder. During training
    /// at stages after the first, the enhanced branch is also built, both
    /// kinds exchange tokens among themselves, and top-K selections are
    /// returned for the loss. The enhanced branch never feeds the embeddings.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        bank: &SliceConvBank,
        features: &[Var<'t>],
        labels: &[Option<usize>],
        opts: &BranchOptions,
    ) -> Result<StageOutput<'t>> {
        if features.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature maps but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let mut originals = features
            .iter()
            .zip(labels)
            .map(|(&f, &l)| bank.build(p, f, TokenKind::Original, l))
            .collect::<Result<Vec<_>>>()?;
        let branch = opts.training && opts.enabled && self.config.index > 1;
        if opts.training && originals.len() >= 2 {
            originals = exchange_tokens(&originals, opts.exchange_ratio, opts.exchange_seed)?;
        }

        let aux = if branch {
            Some(self.enhanced_branch(p, bank, features, labels, &originals, opts)?)
        } else {
            None
        };

        let mut embeddings = Vec::with_capacity(originals.len());
        let mut pooled = Vec::with_capacity(originals.len());
        let mut outputs = Vec::with_capacity(originals.len());
        for map in &originals {
            let mut fm = map.as_feature_map()?;
            for block in &self.blocks {
                fm = block.forward(p, fm)?;
            }
            fm = self.out_norm.apply(p, fm)?;
            let d = fm.dims()[2];
            let mean = fm.reshape(&[map.n_tokens(), d])?.mean_rows()?;
            embeddings.push(mean.l2_normalize_rows()?);
            pooled.push(mean);
            outputs.push(fm);
        }
        Ok(StageOutput {
            embeddings,
            pooled,
            features: outputs,
            aux,
        })
    }

    fn enhanced_branch<'t>(
        &self,
        p: &Bound<'t>,
        bank: &SliceConvBank,
        features: &[Var<'t>],
        labels: &[Option<usize>],
        originals: &[TokenMap<Var<'t>>],
        opts: &BranchOptions,
    ) -> Result<StageAux<'t>> {
        let tape = p.tape();
        let mut enhanced = Vec::with_capacity(features.len());
        for (&f, &l) in features.iter().zip(labels) {
            // Quantization has no useful derivative; the enhanced input is a constant.
            let value = f.value().clone();
            let input = if opts.quantize {
                hfqe::hfqe_enhance(&value, opts.quantization)?
            } else {
                value
            };
            enhanced.push(bank.build(p, tape.constant(input), TokenKind::Enhanced, l)?);
        }
        if enhanced.len() >= 2 {
            enhanced = exchange_tokens(
                &enhanced,
                opts.exchange_ratio,
                opts.exchange_seed.wrapping_add(1),
            )?;
        }
        let mut projected = Vec::with_capacity(enhanced.len());
        let mut enhanced_topk = Vec::with_capacity(enhanced.len());
        for map in &enhanced {
            let hf = hfqe::concat_hf_var(map.as_feature_map()?)?;
            let down = self.downsampler.forward(p, hf, map.grid)?;
            let d = down.dims()[2];
            let values = TokenMap::new(
                down.value().clone().reshape(&[map.n_tokens(), d])?,
                map.grid,
                TokenKind::Enhanced,
                map.label,
            )?;
            enhanced_topk.push(values.top_k(opts.k_ratio)?);
            projected.push(values);
        }
        let original_topk = originals
            .iter()
            .map(|m| m.top_k(opts.k_ratio))
            .collect::<Result<_>>()?;
        Ok(StageAux {
            original: originals.to_vec(),
            original_topk,
            enhanced: projected,
            enhanced_topk,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero(store: &mut ParamStore, id: ParamId) {
        let dims = store.get(id).dims().to_vec();
        store.set(id, Tensor::zeros(&dims)).unwrap();
    }

    #[test]
    fn zero_fusion_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = MixingLayer::new(&mut store, "m", 3, (8, 8), &mut rng).unwrap();
        assert_eq!(layer.depth(), 3);
        assert_eq!(store.get(layer.fusion_weight()).dims(), &[9, 3]);
        zero(&mut store, layer.fusion_weight());
        let x = Tensor::from_fn(&[8, 8, 3], |i| (i as f64 * 0.3).sin());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = layer.forward(&p, tape.constant(x.clone())).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = MixingLayer::new(&mut store, "m", 2, (4, 4), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(layer
            .forward(&p, tape.constant(Tensor::zeros(&[8, 8, 2])))
            .is_err());
        assert!(MixingLayer::new(&mut store, "odd", 2, (3, 4), &mut rng).is_err());
    }

    #[test]
    fn encoder_zero_branches_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "e", 8, (16, 16), &mut rng).unwrap();
        zero(&mut store, block.mixing.fusion_weight());
        let (w, b) = block.ffn_output_weights();
        zero(&mut store, w);
        zero(&mut store, b);
        let x = Tensor::from_fn(&[16, 16, 8], |i| (i as f64 * 0.11).cos());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = block.forward(&p, tape.constant(x.clone())).unwrap();
        assert_eq!(y.dims(), vec![16, 16, 8]);
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn encoder_block_gradcheck_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = EncoderBlock::new(&mut store, "e", 2, (4, 4), &mut rng).unwrap();
        let x = Tensor::from_fn(&[4, 4, 2], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
        let err = gradcheck(
            |v| {
                let p = store.bind_frozen(v.tape());
                block.forward(&p, v)?.mean()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn stage_config_range() {
        assert!(StageConfig::new(0).is_err());
        assert!(StageConfig::new(4).is_err());
        assert!(!StageConfig::new(1).unwrap().reid);
        assert!(StageConfig::new(3).unwrap().reid);
    }
}
