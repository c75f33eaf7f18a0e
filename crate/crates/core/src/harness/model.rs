//! Three-stage cascade over a shared wavelet stem and token bank.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{BranchOptions, Stage, StageConfig, StageOutput};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokens::SliceConvBank;

pub const N_STAGES: usize = 3;

/// Per-stage detection and identity heads.
#[derive(Clone, Debug)]
pub struct Heads {
    pub cls: (ParamId, ParamId),
    pub boxes: (ParamId, ParamId),
    pub id: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct CascadeModel {
    pub store: ParamStore,
    stem: (ParamId, ParamId),
    pub bank: SliceConvBank,
    pub stages: Vec<Stage>,
    pub heads: Vec<Heads>,
    pub channels: usize,
    pub grid: (usize, usize),
}

fn linear_pair(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId) {
    (
        store.add_normal(
            format!("{name}.w"),
            &[cin, cout],
            (1.0 / cin as f64).sqrt(),
            rng,
        ),
        store.add_zeros(format!("{name}.b"), &[cout]),
    )
}

impl CascadeModel {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let p = cfg.data.patch_size;
        if !p.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "patch size {p} must be a multiple of 4 for the stem and mixing pyramid"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let grid = (p / 2, p / 2);
        let stem = linear_pair(&mut store, "stem", 4, c, &mut rng);
        let bank = SliceConvBank::new(&mut store, "tokens", c, cfg.slices, &mut rng)?;
        let mut stages = Vec::with_capacity(N_STAGES);
        let mut heads = Vec::with_capacity(N_STAGES);
        for t in 1..=N_STAGES {
            stages.push(Stage::new(
                &mut store,
                StageConfig::new(t)?,
                c,
                grid,
                cfg.blocks,
                &mut rng,
            )?);
            heads.push(Heads {
                cls: linear_pair(&mut store, &format!("stage{t}.cls"), c, 2, &mut rng),
                boxes: linear_pair(&mut store, &format!("stage{t}.box"), c, 4, &mut rng),
                id: linear_pair(
                    &mut store,
                    &format!("stage{t}.id"),
                    c,
                    cfg.data.n_ids,
                    &mut rng,
                ),
            });
        }
        Ok(CascadeModel {
            store,
            stem,
            bank,
            stages,
            heads,
            channels: c,
            grid,
        })
    }

    /// Rebuilds the architecture from `cfg` and loads saved parameters.
    pub fn load(cfg: &TrainConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        m.store.load(dir)?;
        Ok(m)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.store.save(dir)
    }

    /// Haar split of a `(P, P, 1)` patch, then `4 -> c` channels with GELU.
    pub fn stem<'t>(&self, p: &Bound<'t>, patch: Var<'t>) -> Result<Var<'t>> {
        patch
            .haar_forward()?
            .linear(p.get(self.stem.0), Some(p.get(self.stem.1)))?
            .gelu()
    }

    /// Runs stages `1..=n_stages`. Every stage reads the shared stem features,
    /// the way cascade heads re-pool from one backbone.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        patches: &[Tensor],
        labels: &[Option<usize>],
        n_stages: usize,
        opts: impl Fn(usize) -> BranchOptions,
    ) -> Result<Vec<StageOutput<'t>>> {
        let tape = p.tape();
        let features = patches
            .iter()
            .map(|x| self.stem(p, tape.constant(x.clone())))
            .collect::<Result<Vec<_>>>()?;
        let mut outs = Vec::with_capacity(n_stages);
        for stage in self.stages.iter().take(n_stages) {
            outs.push(stage.forward(
                p,
                &self.bank,
                &features,
                labels,
                &opts(stage.config.index),
            )?);
        }
        Ok(outs)
    }

    /// Unit embeddings from the final stage, inference mode.
    pub fn embed(&self, patches: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(16) {
            let tape = Tape::new();
            let p = self.store.bind_frozen(&tape);
            let labels = vec![None; chunk.len()];
            let stages =
                self.forward(&p, chunk, &labels, N_STAGES, |_| BranchOptions::default())?;
            let last = stages.last().expect("at least one stage");
            out.extend(last.embeddings.iter().map(|e| e.value().data().to_vec()));
        }
        Ok(out)
    }
}
