//! Seeded finite-difference checks for the differentiable building blocks.
//!
//! Every target reduces its output to a scalar through a fixed random
//! projection, so no coordinate of the gradient is trivially uniform.
//! Layer targets check parameters as well as inputs.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::{EncoderBlock, MixingLayer};
use crate::error::{Error, Result};
use crate::losses::{
    detection_loss, hf_augmentation_loss, oim_loss, OimMemory, ProxyQueue, ProxyTable,
};
use crate::numerics::{gradcheck_many, ParamStore, Tape, Tensor, Var};

/// Finite-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    Mixing,
    Encoder,
    ProxyLoss,
    Oim,
    Detection,
}

impl GradTarget {
    pub const ALL: [GradTarget; 5] = [
        GradTarget::Mixing,
        GradTarget::Encoder,
        GradTarget::ProxyLoss,
        GradTarget::Oim,
        GradTarget::Detection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Mixing => "mixing",
            GradTarget::Encoder => "encoder",
            GradTarget::ProxyLoss => "lp",
            GradTarget::Oim => "oim",
            GradTarget::Detection => "detection",
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown gradcheck target {s:?} (expected mixing, encoder, lp, oim or detection)"
                ))
            })
    }
}

fn normal(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| -> f64 { StandardNormal.sample(&mut *rng) })
}

fn unit_rows(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = normal(&[rows, d], rng);
    for row in t.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn project<'t>(y: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    y.mul(y.tape().constant(weights.clone()))?.sum()
}

/// Checks a layer built into `store` with respect to its input `x` and every
/// parameter in the store.
fn check_layer<F>(
    store: &ParamStore,
    x: Tensor,
    out_dims: &[usize],
    rng: &mut ChaCha8Rng,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&crate::numerics::Bound<'t>, Var<'t>) -> Result<Var<'t>>,
{
    let weights = normal(out_dims, rng);
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, v)| v.clone()));
    gradcheck_many(
        |tape: &Tape, vars: &[Var<'_>]| {
            let p = store.bind_vars(tape, &vars[1..])?;
            project(f(&p, vars[0])?, &weights)
        },
        &inputs,
        GRADCHECK_EPS,
    )
}

/// Maximum relative gradient error of `target` for one seed.
pub fn gradcheck_target(target: GradTarget, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match target {
        GradTarget::Mixing => {
            let mut store = ParamStore::new();
            let layer = MixingLayer::new(&mut store, "m", 2, (4, 4), &mut rng)?;
            let x = normal(&[4, 4, 2], &mut rng);
            check_layer(&store, x, &[4, 4, 2], &mut rng, |p, v| layer.forward(p, v))
        }
        GradTarget::Encoder => {
            let mut store = ParamStore::new();
            let block = EncoderBlock::new(&mut store, "e", 2, (4, 4), &mut rng)?;
            let x = normal(&[4, 4, 2], &mut rng);
            check_layer(&store, x, &[4, 4, 2], &mut rng, |p, v| block.forward(p, v))
        }
        GradTarget::ProxyLoss => {
            let (k, d) = (3, 4);
            let mut table = ProxyTable::new();
            for y in 0..3 {
                table.insert(y * 2, normal(&[k, d], &mut rng))?;
            }
            let mut queue = ProxyQueue::new(4)?;
            for _ in 0..2 {
                queue.push(normal(&[k, d], &mut rng))?;
            }
            let x = normal(&[k, d], &mut rng);
            gradcheck_many(
                |_, v: &[Var<'_>]| hf_augmentation_loss(v[0], &table, &queue, 2),
                &[x],
                GRADCHECK_EPS,
            )
        }
        GradTarget::Oim => {
            let d = 4;
            let mut memory = OimMemory::new(5, d, 3, 1.0 / 30.0, 0.5)?;
            let lut = unit_rows(5, d, &mut rng);
            for y in 0..5 {
                memory.set_lut_row(y, lut.row(y))?;
            }
            let queue = unit_rows(2, d, &mut rng);
            for i in 0..2 {
                memory.update(queue.row(i), None)?;
            }
            // Embeddings enter OIM unit-normalized; keep the check near that scale.
            let e = unit_rows(1, d, &mut rng).reshape(&[d])?.map(|v| 0.3 * v);
            gradcheck_many(
                |_, v: &[Var<'_>]| oim_loss(v[0], &memory, 3),
                &[e],
                GRADCHECK_EPS,
            )
        }
        GradTarget::Detection => {
            let n = 6;
            let cls_targets = [1, 0, 1, 1, 0, 1];
            let box_targets = normal(&[n, 4], &mut rng);
            let logits = normal(&[n, 2], &mut rng);
            let boxes = normal(&[n, 4], &mut rng);
            gradcheck_many(
                |_, v: &[Var<'_>]| detection_loss(v[0], &cls_targets, v[1], &box_targets),
                &[logits, boxes],
                GRADCHECK_EPS,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_parse_by_name() {
        for t in GradTarget::ALL {
            assert_eq!(t.name().parse::<GradTarget>().unwrap(), t);
        }
        assert!("attention".parse::<GradTarget>().is_err());
    }

    #[test]
    fn every_target_passes_one_seed() {
        for t in GradTarget::ALL {
            let err = gradcheck_target(t, 11).unwrap();
            assert!(err <= GRADCHECK_TOLERANCE, "{t}: {err}");
        }
    }
}
