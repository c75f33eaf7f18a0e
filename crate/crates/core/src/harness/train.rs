//! Cascade training loop.
//!
//! The first `stage1_steps` steps train only stage 1 on the detection
//! surrogate. Later steps run all three stages; stages 2 and 3 add OIM,
//! identity and high-frequency augmentation losses. Each stage owns its
//! proxy table, proxy queue and OIM memory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::BranchOptions;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::data::{generate_dataset, noise_patch, Dataset};
use crate::harness::model::{CascadeModel, N_STAGES};
use crate::hfqe::QuantizationConfig;
use crate::losses::{
    detection_loss, hf_augmentation_loss, identity_loss, oim_loss, proxy_update, total_loss,
    LossParts, OimMemory, ProxyQueue, ProxyTable,
};
use crate::numerics::{Sgd, Tape, Tensor, Var};

pub const CSV_HEADER: &str = "step,stage,L_det,L_OIM,L_ID,L_P,total";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CONFIG_FILE: &str = "train.cfg";
pub const LOSSES_FILE: &str = "losses.csv";

/// Loss values of one stage at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub stage: usize,
    pub det: f64,
    pub oim: f64,
    pub id: f64,
    pub p: f64,
    pub total: f64,
}

impl LossRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.stage, self.det, self.oim, self.id, self.p, self.total
        )
    }
}

/// Memory stores of one cascade stage.
#[derive(Clone, Debug)]
pub struct StageMemory {
    pub table: ProxyTable,
    pub queue: ProxyQueue,
    pub oim: OimMemory,
}

impl StageMemory {
    fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(StageMemory {
            table: ProxyTable::new(),
            queue: ProxyQueue::new(cfg.queue_capacity)?,
            oim: OimMemory::new(
                cfg.data.n_ids,
                cfg.channels,
                cfg.queue_capacity,
                cfg.oim_temperature,
                cfg.oim_momentum,
            )?,
        })
    }

    pub fn mutations(&self) -> usize {
        self.table.mutations() + self.queue.mutations() + self.oim.mutations()
    }
}

struct Batch {
    patches: Vec<Tensor>,
    labels: Vec<Option<usize>>,
    person: Vec<bool>,
    box_targets: Tensor,
}

fn mix_seed(seed: u64, step: usize, stage: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed ^ ((step as u64) << 8 | stage as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stack_rows<'t>(tape: &'t Tape, rows: &[Var<'t>]) -> Result<Var<'t>> {
    let flat = rows
        .iter()
        .map(|r| {
            let d = r.dims()[0];
            r.reshape(&[1, d])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&flat, 0)
}

fn mean_of<'t>(tape: &'t Tape, terms: &[Var<'t>]) -> Result<Var<'t>> {
    match terms.split_first() {
        None => Ok(tape.constant(Tensor::scalar(0.0))),
        Some((first, rest)) => {
            let mut acc = *first;
            for t in rest {
                acc = acc.add(*t)?;
            }
            acc.scale(1.0 / terms.len() as f64)
        }
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: CascadeModel,
    pub data: Dataset,
    memories: Vec<StageMemory>,
    opt: Sgd,
    rng: ChaCha8Rng,
    id_order: Vec<usize>,
    id_cursor: usize,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = generate_dataset(&cfg.data)?;
        Self::with_dataset(cfg, data)
    }

    pub fn with_dataset(cfg: &TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let memories = (0..N_STAGES)
            .map(|_| StageMemory::new(cfg))
            .collect::<Result<_>>()?;
        Ok(Trainer {
            model: CascadeModel::new(cfg)?,
            opt: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, usize::MAX, 0)),
            id_order: Vec::new(),
            id_cursor: 0,
            step: 0,
            memories,
            data,
            cfg: cfg.clone(),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn memory(&self, stage: usize) -> &StageMemory {
        &self.memories[stage - 1]
    }

    /// Total number of store writes across all stages.
    pub fn store_mutations(&self) -> usize {
        self.memories.iter().map(StageMemory::mutations).sum()
    }

    fn next_ids(&mut self) -> Vec<usize> {
        let want = self.cfg.ids_per_batch;
        let mut out = Vec::with_capacity(want);
        while out.len() < want {
            if self.id_cursor >= self.id_order.len() {
                self.id_order = (0..self.cfg.data.n_ids).collect();
                self.id_order.shuffle(&mut self.rng);
                self.id_cursor = 0;
            }
            let id = self.id_order[self.id_cursor];
            self.id_cursor += 1;
            if !out.contains(&id) {
                out.push(id);
            }
        }
        out
    }

    /// Identities interleaved (`id0 s0, id1 s0, .., id0 s1, ..`), then
    /// unlabeled persons, then background patches.
    fn sample_batch(&mut self) -> Result<Batch> {
        let ids = self.next_ids();
        let s = self.cfg.samples_per_id_batch;
        let picks: Vec<Vec<usize>> = ids
            .iter()
            .map(|&id| index::sample(&mut self.rng, self.data.train[id].len(), s).into_vec())
            .collect();
        let mut samples = Vec::new();
        for j in 0..s {
            for (slot, &id) in ids.iter().enumerate() {
                samples.push(&self.data.train[id][picks[slot][j]]);
            }
        }
        for _ in 0..self.cfg.unlabeled_per_batch {
            let i = self.rng.random_range(0..self.data.unlabeled.len());
            samples.push(&self.data.unlabeled[i]);
        }
        let mut patches: Vec<Tensor> = samples.iter().map(|s| s.patch.clone()).collect();
        let mut labels: Vec<Option<usize>> = samples.iter().map(|s| s.identity).collect();
        let mut boxes: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.nuisance.box_target())
            .collect();
        let mut person = vec![true; samples.len()];
        for _ in 0..self.cfg.background_per_batch {
            patches.push(noise_patch(
                self.cfg.data.patch_size,
                self.cfg.data.noise_sigma,
                &mut self.rng,
            )?);
            labels.push(None);
            boxes.extend([0.0; 4]);
            person.push(false);
        }
        let n = patches.len();
        Ok(Batch {
            patches,
            labels,
            person,
            box_targets: Tensor::new(vec![n, 4], boxes)?,
        })
    }

    fn branch_options(&self, stage: usize) -> Result<BranchOptions> {
        Ok(BranchOptions {
            training: true,
            enabled: self.cfg.lambda_p > 0.0,
            quantize: self.cfg.hfqe,
            quantization: QuantizationConfig::new(self.cfg.q)?,
            k_ratio: self.cfg.k_ratio,
            exchange_ratio: self.cfg.exchange_ratio,
            exchange_seed: mix_seed(self.cfg.seed, self.step, stage),
        })
    }

    /// One optimizer step. Returns one row per active stage.
    pub fn step(&mut self) -> Result<Vec<LossRow>> {
        let batch = self.sample_batch()?;
        let n_stages = if self.step < self.cfg.stage1_steps {
            1
        } else {
            N_STAGES
        };
        let opts: Vec<BranchOptions> = (1..=N_STAGES)
            .map(|t| self.branch_options(t))
            .collect::<Result<_>>()?;
        let weights = self.cfg.loss_weights()?;
        let cls_targets: Vec<usize> = batch.person.iter().map(|&p| usize::from(p)).collect();
        let step = self.step;

        let tape = Tape::new();
        let grads = {
            let model = &self.model;
            let p = model.store.bind(&tape);
            let outs =
                model.forward(&p, &batch.patches, &batch.labels, n_stages, |t| opts[t - 1])?;
            let mut rows = Vec::with_capacity(n_stages);
            let mut total: Option<Var> = None;
            for (out, (stage, heads)) in outs.iter().zip(model.stages.iter().zip(&model.heads)) {
                let pooled = stack_rows(&tape, &out.pooled)?;
                let cls = pooled.linear(p.get(heads.cls.0), Some(p.get(heads.cls.1)))?;
                let boxes = pooled.linear(p.get(heads.boxes.0), Some(p.get(heads.boxes.1)))?;
                let det = detection_loss(cls, &cls_targets, boxes, &batch.box_targets)?;
                let mut parts = LossParts {
                    det,
                    oim: None,
                    id: None,
                    p: None,
                };
                if stage.config.reid {
                    let mem = &mut self.memories[stage.config.index - 1];
                    let labeled: Vec<(usize, usize)> = batch
                        .labels
                        .iter()
                        .enumerate()
                        .filter_map(|(i, l)| l.map(|y| (i, y)))
                        .collect();
                    let emb: Vec<Var> = labeled.iter().map(|&(i, _)| out.embeddings[i]).collect();
                    let ys: Vec<usize> = labeled.iter().map(|&(_, y)| y).collect();
                    let logits = stack_rows(&tape, &emb)?
                        .scale(self.cfg.id_scale)?
                        .linear(p.get(heads.id.0), Some(p.get(heads.id.1)))?;
                    parts.id = Some(identity_loss(logits, &ys)?);
                    let oim_terms = labeled
                        .iter()
                        .map(|&(i, y)| oim_loss(out.embeddings[i], &mem.oim, y))
                        .collect::<Result<Vec<_>>>()?;
                    parts.oim = Some(mean_of(&tape, &oim_terms)?);
                    for (i, &is_person) in batch.person.iter().enumerate() {
                        if is_person {
                            mem.oim
                                .update(out.embeddings[i].value().data(), batch.labels[i])?;
                        }
                    }
                    let mut p_terms = Vec::new();
                    if let Some(aux) = &out.aux {
                        for (i, &is_person) in batch.person.iter().enumerate() {
                            if !is_person {
                                continue;
                            }
                            let label = batch.labels[i];
                            if let Some(y) = label {
                                if mem.table.contains(y) {
                                    p_terms.push(hf_augmentation_loss(
                                        aux.original_selected(i)?,
                                        &mem.table,
                                        &mem.queue,
                                        y,
                                    )?);
                                }
                            }
                            proxy_update(
                                &mut mem.table,
                                &mut mem.queue,
                                &aux.enhanced_selected(i),
                                label,
                                weights.momentum,
                            )?;
                        }
                    }
                    parts.p = Some(mean_of(&tape, &p_terms)?);
                }
                let stage_total = total_loss(stage.config, &parts, &weights)?;
                let value = |v: Option<Var>| v.map_or(0.0, |v| v.item());
                let row = LossRow {
                    step,
                    stage: stage.config.index,
                    det: parts.det.item(),
                    oim: value(parts.oim),
                    id: value(parts.id),
                    p: value(parts.p),
                    total: stage_total.item(),
                };
                if !row.total.is_finite() {
                    return Err(Error::Diverged { step });
                }
                rows.push(row);
                total = Some(match total {
                    None => stage_total,
                    Some(acc) => acc.add(stage_total)?,
                });
            }
            let total = total.expect("at least one stage");
            let g = tape.backward(total)?;
            let grads = p.grads(&g);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { step });
            }
            (grads, rows)
        };
        let (mut grads, rows) = grads;
        if self.cfg.clip_norm > 0.0 {
            let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
            if norm > self.cfg.clip_norm {
                let s = self.cfg.clip_norm / norm;
                grads
                    .iter_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        self.opt.step(&mut self.model.store, &grads);
        self.step += 1;
        Ok(rows)
    }

    /// Runs the configured number of steps, handing every row to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&LossRow)) -> Result<()> {
        while self.step < self.cfg.steps {
            for row in self.step()? {
                sink(&row);
            }
        }
        Ok(())
    }
}

/// Paths written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub losses: PathBuf,
    pub checkpoint: PathBuf,
    pub rows: Vec<LossRow>,
}

/// Trains from scratch, writing `losses.csv` and `checkpoint/` (parameters
/// plus `train.cfg`) under `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<(Trainer, TrainOutput)> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(cfg)?;
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut rows = Vec::new();
    let result = trainer.run(|r| {
        let _ = writeln!(csv, "{}", r.csv());
        rows.push(*r);
    });
    let losses = out_dir.join(LOSSES_FILE);
    fs::write(&losses, &csv)?;
    result?;
    let checkpoint = out_dir.join(CHECKPOINT_DIR);
    trainer.model.save(&checkpoint)?;
    fs::write(checkpoint.join(CONFIG_FILE), cfg.to_kv())?;
    log::info!(
        "trained {} steps; losses at {}",
        trainer.steps_done(),
        losses.display()
    );
    Ok((
        trainer,
        TrainOutput {
            losses,
            checkpoint,
            rows,
        },
    ))
}
