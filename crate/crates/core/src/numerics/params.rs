//! Named parameter storage, binding onto a tape, SGD, and checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::io;
use crate::numerics::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian initialization with standard deviation `std`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(dims, |_| normal.sample(rng));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(dims))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, dims: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(dims))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        self.values[id.0].expect_same_dims(&value, "parameter set")?;
        self.values[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
            tape,
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
            tape,
        }
    }

    /// Uses caller-provided variables as the parameters, in store order.
    /// Gradient checks use this to perturb parameters directly.
    pub fn bind_vars<'t>(&self, tape: &'t Tape, vars: &[Var<'t>]) -> Result<Bound<'t>> {
        if vars.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter variables, got {}",
                self.len(),
                vars.len()
            )));
        }
        for (v, value) in vars.iter().zip(&self.values) {
            if v.dims() != value.dims() {
                return Err(Error::ShapeMismatch {
                    op: "bind parameters",
                    left: value.dims().to_vec(),
                    right: v.dims(),
                });
            }
        }
        Ok(Bound {
            vars: vars.to_vec(),
            tape,
        })
    }

    /// Writes one tensor file per parameter plus a `manifest.txt` of
    /// `name dims` lines.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (name, value) in self.iter() {
            io::write_tensor(dir.join(format!("{name}.htns")), &value.cast())?;
            let dims: Vec<String> = value.dims().iter().map(ToString::to_string).collect();
            manifest.push_str(&format!("{name} {}\n", dims.join(",")));
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Loads values saved by [`save`](Self::save) into this store, checking
    /// every name and shape against the existing layout.
    pub fn load(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let bad = |reason: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut seen = 0;
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let (name, dims) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed manifest line {line:?}")))?;
            let dims: Vec<usize> = dims
                .split(',')
                .map(|d| d.parse().map_err(|_| bad(format!("bad dims in {line:?}"))))
                .collect::<Result<_>>()?;
            let id = self
                .find(name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            if self.get(id).dims() != dims.as_slice() {
                return Err(bad(format!(
                    "{name}: manifest dims {dims:?} do not match configured {:?}",
                    self.get(id).dims()
                )));
            }
            let value = io::read_tensor(dir.join(format!("{name}.htns")))?;
            if value.dims() != dims.as_slice() {
                return Err(bad(format!(
                    "{name}: file dims {:?} differ from manifest",
                    value.dims()
                )));
            }
            self.values[id.0] = value.cast();
            seen += 1;
        }
        if seen != self.len() {
            return Err(bad(format!(
                "manifest lists {seen} of {} parameters",
                self.len()
            )));
        }
        Ok(())
    }
}

/// Parameters bound to one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    tape: &'t Tape,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Gradients for every parameter, in store order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Gradient descent with heavy-ball momentum and decoupled weight decay:
/// `v <- mu v + g`, `p <- p (1 - lr wd) - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        if self.velocity.is_empty() {
            self.velocity = params
                .values
                .iter()
                .map(|v| Tensor::zeros(v.dims()))
                .collect();
        }
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, v), g) in params.values.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv = *pv * decay - self.lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_roundtrip_and_shape_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_normal("a.w", &[3, 2], 0.5, &mut rng);
        store.add_zeros("a.b", &[2]);
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();

        let mut fresh = ParamStore::new();
        fresh.add_zeros("a.w", &[3, 2]);
        fresh.add_ones("a.b", &[2]);
        fresh.load(dir.path()).unwrap();
        let w = fresh.find("a.w").unwrap();
        let orig = store.get(store.find("a.w").unwrap());
        assert!(fresh.get(w).max_abs_diff(orig).unwrap() < 1e-6);

        let mut wrong = ParamStore::new();
        wrong.add_zeros("a.w", &[2, 3]);
        wrong.add_zeros("a.b", &[2]);
        assert!(matches!(
            wrong.load(dir.path()),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::full(&[1], 1.0));
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut store, &[Tensor::full(&[1], 1.0)]);
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-12);
        opt.step(&mut store, &[Tensor::full(&[1], 1.0)]);
        // v = 0.9 + 1 = 1.9
        assert!((store.get(id).data()[0] - (0.9 - 0.19)).abs() < 1e-12);

        let mut decay_only = Sgd::new(0.1, 0.0, 0.5);
        decay_only.step(&mut store, &[Tensor::zeros(&[1])]);
        assert!((store.get(id).data()[0] - 0.71 * 0.95).abs() < 1e-12);
    }
}
