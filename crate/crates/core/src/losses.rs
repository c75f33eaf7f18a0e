//! Training objectives and the memory stores behind them.
//!
//! The high-frequency augmentation loss compares a sample's ranked top-K
//! tokens with a proxy table `V` (one entry per known identity) and a FIFO
//! queue `Q` (unlabeled samples), pairing tokens rank by rank. OIM classifies
//! an embedding against a lookup table of identity embeddings plus a circular
//! queue. All stores hold detached values.

use std::collections::{BTreeMap, VecDeque};

use crate::encoder::StageConfig;
use crate::error::{Error, Result};
use crate::numerics::{Reduction, Tensor, Var};

/// Default proxy momentum.
pub const DEFAULT_PROXY_MOMENTUM: f64 = 0.5;
pub const DEFAULT_OIM_TEMPERATURE: f64 = 1.0 / 30.0;
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

/// Cosine of two vectors; zero when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("cosine with a zero-norm token treated as 0");
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `exp(cos(x_k, entry_k))` for rank `k` of two `(K, d)` token matrices.
pub fn similarity_s(x: &Tensor, entry: &Tensor, k: usize) -> Result<f64> {
    x.expect_same_dims(entry, "similarity")?;
    let (kk, _) = x.matrix()?;
    if k >= kk {
        return Err(Error::InvalidArgument(format!(
            "rank {k} out of range for K={kk}"
        )));
    }
    Ok(cosine(x.row(k), entry.row(k)).exp())
}

/// `v <- momentum * v + (1 - momentum) * x`.
pub fn momentum_update(v: &mut Tensor, x: &Tensor, momentum: f64) -> Result<()> {
    check_momentum(momentum)?;
    v.expect_same_dims(x, "momentum update")?;
    for (a, &b) in v.data_mut().iter_mut().zip(x.data()) {
        *a = momentum * *a + (1.0 - momentum) * b;
    }
    Ok(())
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "momentum {m} outside [0, 1]"
        )));
    }
    Ok(())
}

fn check_entry_shape(shape: &mut Option<Vec<usize>>, t: &Tensor) -> Result<()> {
    t.matrix()?;
    match shape {
        Some(s) if s[..] != *t.dims() => Err(Error::ShapeMismatch {
            op: "proxy store",
            left: s.clone(),
            right: t.dims().to_vec(),
        }),
        Some(_) => Ok(()),
        None => {
            *shape = Some(t.dims().to_vec());
            Ok(())
        }
    }
}

/// `V`: at most one `(K, d)` entry per identity.
#[derive(Clone, Debug, Default)]
pub struct ProxyTable {
    entries: BTreeMap<usize, Tensor>,
    shape: Option<Vec<usize>>,
    mutations: usize,
}

impl ProxyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, identity: usize) -> Option<&Tensor> {
        self.entries.get(&identity)
    }

    pub fn contains(&self, identity: usize) -> bool {
        self.entries.contains_key(&identity)
    }

    /// Entries in ascending identity order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn mutations(&self) -> usize {
        self.mutations
    }

    pub fn insert(&mut self, identity: usize, tokens: Tensor) -> Result<()> {
        check_entry_shape(&mut self.shape, &tokens)?;
        self.entries.insert(identity, tokens);
        self.mutations += 1;
        Ok(())
    }

    /// Momentum update of an existing entry, or insertion of a new one.
    pub fn update(&mut self, identity: usize, tokens: &Tensor, momentum: f64) -> Result<()> {
        check_momentum(momentum)?;
        check_entry_shape(&mut self.shape, tokens)?;
        match self.entries.get_mut(&identity) {
            Some(v) => momentum_update(v, tokens, momentum)?,
            None => {
                self.entries.insert(identity, tokens.clone());
            }
        }
        self.mutations += 1;
        Ok(())
    }
}

/// `Q`: fixed-capacity FIFO of `(K, d)` entries.
#[derive(Clone, Debug)]
pub struct ProxyQueue {
    entries: VecDeque<Tensor>,
    capacity: usize,
    shape: Option<Vec<usize>>,
    mutations: usize,
}

impl ProxyQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "queue capacity must be positive".into(),
            ));
        }
        Ok(ProxyQueue {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            shape: None,
            mutations: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter()
    }

    pub fn mutations(&self) -> usize {
        self.mutations
    }

    pub fn push(&mut self, tokens: Tensor) -> Result<()> {
        check_entry_shape(&mut self.shape, &tokens)?;
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(tokens);
        self.mutations += 1;
        Ok(())
    }
}

/// Routes a sample into `V` (labeled) or `Q` (unlabeled).
pub fn proxy_update(
    table: &mut ProxyTable,
    queue: &mut ProxyQueue,
    tokens: &Tensor,
    identity: Option<usize>,
    momentum: f64,
) -> Result<()> {
    check_momentum(momentum)?;
    match identity {
        Some(y) => table.update(y, tokens, momentum),
        None => queue.push(tokens.clone()),
    }
}

fn normalized_rows(t: &Tensor, out: &mut Vec<f64>) {
    let d = *t.dims().last().unwrap_or(&1);
    for row in t.data().chunks(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            log::warn!("zero-norm stored token treated as cosine 0");
            out.extend(std::iter::repeat_n(0.0, d));
        } else {
            out.extend(row.iter().map(|v| v / n));
        }
    }
}

/// `-sum_k log( S(x, V_y, k) / (sum_i S(x, V_i, k) + sum_j S(x, Q_j, k)) )`
/// for the `(K, d)` selected tokens of one sample.
pub fn hf_augmentation_loss<'t>(
    x_sel: Var<'t>,
    table: &ProxyTable,
    queue: &ProxyQueue,
    identity: usize,
) -> Result<Var<'t>> {
    if table.is_empty() {
        return Err(Error::InvalidArgument("proxy table is empty".into()));
    }
    let target = table
        .iter()
        .position(|(y, _)| y == identity)
        .ok_or(Error::MissingIdentity(identity))?;
    let dims = x_sel.dims();
    let (kk, d) = match dims[..] {
        [kk, d] => (kk, d),
        _ => {
            return Err(Error::InvalidShape {
                op: "hf augmentation loss",
                dims,
                reason: "expected (K, d) tokens".into(),
            })
        }
    };
    let m = table.len() + queue.len();
    let mut bank = Vec::with_capacity(m * kk * d);
    for t in table.iter().map(|(_, t)| t).chain(queue.iter()) {
        if t.dims() != [kk, d] {
            return Err(Error::ShapeMismatch {
                op: "hf augmentation loss",
                left: vec![kk, d],
                right: t.dims().to_vec(),
            });
        }
        normalized_rows(t, &mut bank);
    }
    let bank = x_sel.tape().constant(Tensor::new(vec![m, kk, d], bank)?);
    let cos = x_sel.l2_normalize_rows()?.rank_dot(bank)?;
    cos.cross_entropy(&vec![target; kk], Reduction::Sum)
}

/// OIM memory: a lookup table with one row per identity and a circular queue
/// of unlabeled embeddings.
#[derive(Clone, Debug)]
pub struct OimMemory {
    lut: Tensor,
    queue: VecDeque<Vec<f64>>,
    capacity: usize,
    pub temperature: f64,
    pub momentum: f64,
    mutations: usize,
}

impl OimMemory {
    /// Zero-initialized table of `n_ids` rows of width `dim`.
    pub fn new(
        n_ids: usize,
        dim: usize,
        capacity: usize,
        temperature: f64,
        momentum: f64,
    ) -> Result<Self> {
        if n_ids == 0 || dim == 0 || capacity == 0 {
            return Err(Error::InvalidArgument(
                "OIM memory needs positive identity count, width and capacity".into(),
            ));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {temperature} must be positive"
            )));
        }
        check_momentum(momentum)?;
        Ok(OimMemory {
            lut: Tensor::zeros(&[n_ids, dim]),
            queue: VecDeque::with_capacity(capacity),
            capacity,
            temperature,
            momentum,
            mutations: 0,
        })
    }

    pub fn n_ids(&self) -> usize {
        self.lut.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.lut.dims()[1]
    }

    pub fn lut(&self) -> &Tensor {
        &self.lut
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn mutations(&self) -> usize {
        self.mutations
    }

    pub fn set_lut_row(&mut self, label: usize, row: &[f64]) -> Result<()> {
        let d = self.dim();
        if label >= self.n_ids() {
            return Err(Error::MissingIdentity(label));
        }
        if row.len() != d {
            return Err(Error::ShapeMismatch {
                op: "oim lut",
                left: vec![d],
                right: vec![row.len()],
            });
        }
        self.lut.data_mut()[label * d..(label + 1) * d].copy_from_slice(row);
        self.mutations += 1;
        Ok(())
    }

    /// Momentum update then renormalization for a labeled embedding; FIFO
    /// insertion for an unlabeled one.
    pub fn update(&mut self, embedding: &[f64], label: Option<usize>) -> Result<()> {
        let d = self.dim();
        if embedding.len() != d {
            return Err(Error::ShapeMismatch {
                op: "oim update",
                left: vec![d],
                right: vec![embedding.len()],
            });
        }
        match label {
            Some(y) => {
                if y >= self.n_ids() {
                    return Err(Error::MissingIdentity(y));
                }
                let m = self.momentum;
                let row = &mut self.lut.data_mut()[y * d..(y + 1) * d];
                for (r, &e) in row.iter_mut().zip(embedding) {
                    *r = m * *r + (1.0 - m) * e;
                }
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
            None => {
                if self.queue.len() == self.capacity {
                    self.queue.pop_front();
                }
                self.queue.push_back(embedding.to_vec());
            }
        }
        self.mutations += 1;
        Ok(())
    }

    fn bank_transposed(&self) -> Tensor {
        let (n, d) = (self.n_ids(), self.dim());
        let m = n + self.queue.len();
        let mut rows = Vec::with_capacity(m * d);
        rows.extend_from_slice(self.lut.data());
        for q in &self.queue {
            rows.extend_from_slice(q);
        }
        let mut t = vec![0.0; d * m];
        for (i, row) in rows.chunks(d).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t[j * m + i] = v;
            }
        }
        Tensor::from_parts(vec![d, m], t)
    }
}

/// Cross-entropy of the cosine similarities to every LUT and queue entry,
/// scaled by `1 / temperature`, against the label's LUT slot.
pub fn oim_loss<'t>(embedding: Var<'t>, memory: &OimMemory, label: usize) -> Result<Var<'t>> {
    if label >= memory.n_ids() {
        return Err(Error::MissingIdentity(label));
    }
    let d = memory.dim();
    let e = embedding.reshape(&[1, d])?;
    let bank = embedding.tape().constant(memory.bank_transposed());
    e.matmul(bank)?
        .scale(1.0 / memory.temperature)?
        .cross_entropy(&[label], Reduction::Sum)
}

/// Identity classification cross-entropy, averaged over rows.
pub fn identity_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(labels, Reduction::Mean)
}

/// Smooth-L1 summed over box coordinates and averaged over the rows whose
/// class target is positive (1).
pub fn box_loss<'t>(
    box_pred: Var<'t>,
    cls_targets: &[usize],
    box_targets: &Tensor,
) -> Result<Var<'t>> {
    let dims = box_pred.dims();
    if dims[..] != *box_targets.dims() || dims.first() != Some(&cls_targets.len()) {
        return Err(Error::ShapeMismatch {
            op: "box loss",
            left: dims,
            right: box_targets.dims().to_vec(),
        });
    }
    let pos: Vec<usize> = (0..cls_targets.len())
        .filter(|&i| cls_targets[i] == 1)
        .collect();
    let tape = box_pred.tape();
    if pos.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = box_targets.dims()[1];
    let mut target = Vec::with_capacity(pos.len() * d);
    for &i in &pos {
        target.extend_from_slice(box_targets.row(i));
    }
    let target = tape.constant(Tensor::new(vec![pos.len(), d], target)?);
    box_pred
        .gather_rows(&pos)?
        .smooth_l1(target)?
        .scale(1.0 / pos.len() as f64)
}

/// Person-vs-background cross-entropy (mean over rows) plus [`box_loss`].
pub fn detection_loss<'t>(
    cls_logits: Var<'t>,
    cls_targets: &[usize],
    box_pred: Var<'t>,
    box_targets: &Tensor,
) -> Result<Var<'t>> {
    let n = cls_logits.dims()[0];
    if n != cls_targets.len() || box_pred.dims()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "detection loss",
            left: cls_logits.dims(),
            right: box_pred.dims(),
        });
    }
    let cls = cls_logits.cross_entropy(cls_targets, Reduction::Mean)?;
    cls.add(box_loss(box_pred, cls_targets, box_targets)?)
}

/// Loss coefficients and the proxy momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub oim: f64,
    pub id: f64,
    pub p: f64,
    pub momentum: f64,
}

impl LossWeights {
    pub fn new(oim: f64, id: f64, p: f64, momentum: f64) -> Result<Self> {
        let w = LossWeights {
            oim,
            id,
            p,
            momentum,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("oim", self.oim), ("id", self.id), ("p", self.p)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "weight {name}={v} must be finite and non-negative"
                )));
            }
        }
        check_momentum(self.momentum)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            oim: 1.0,
            id: 1.0,
            p: 1.0,
            momentum: DEFAULT_PROXY_MOMENTUM,
        }
    }
}

/// Per-stage loss terms. Re-identification terms are optional because the
/// first stage has none.
#[derive(Clone, Copy)]
pub struct LossParts<'t> {
    pub det: Var<'t>,
    pub oim: Option<Var<'t>>,
    pub id: Option<Var<'t>>,
    pub p: Option<Var<'t>>,
}

/// `L_det` at stage 1; `L_det + w_oim L_OIM + w_id L_ID + w_p L_P` afterwards.
pub fn total_loss<'t>(
    stage: StageConfig,
    parts: &LossParts<'t>,
    weights: &LossWeights,
) -> Result<Var<'t>> {
    weights.validate()?;
    if !stage.reid {
        return Ok(parts.det);
    }
    let missing =
        |name: &str| Error::InvalidArgument(format!("stage {} needs the {name} term", stage.index));
    let oim = parts.oim.ok_or_else(|| missing("OIM"))?;
    let id = parts.id.ok_or_else(|| missing("identity"))?;
    let p = parts.p.ok_or_else(|| missing("augmentation"))?;
    parts
        .det
        .add(oim.scale(weights.oim)?)?
        .add(id.scale(weights.id)?)?
        .add(p.scale(weights.p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use std::f64::consts::E;

    fn t(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn similarity_extremes() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        assert!((similarity_s(&a, &a, 0).unwrap() - E).abs() < 1e-12);
        let b = t(&[1, 2], &[-2.0, 1.0]);
        assert!((similarity_s(&a, &b, 0).unwrap() - 1.0).abs() < 1e-12);
        let c = t(&[1, 2], &[-1.0, -2.0]);
        assert!((similarity_s(&a, &c, 0).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        let z = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(similarity_s(&a, &z, 0).unwrap(), 1.0);
    }

    #[test]
    fn single_proxy_perfect_match_is_zero() {
        let mut v = ProxyTable::new();
        let x = t(&[2, 3], &[1.0, 0.0, 2.0, -1.0, 3.0, 0.5]);
        v.insert(4, x.clone()).unwrap();
        let q = ProxyQueue::new(4).unwrap();
        let tape = Tape::new();
        let loss = hf_augmentation_loss(tape.constant(x), &v, &q, 4).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn two_proxies_hand_value() {
        let mut v = ProxyTable::new();
        v.insert(0, t(&[1, 2], &[1.0, 0.0])).unwrap();
        v.insert(1, t(&[1, 2], &[0.0, 1.0])).unwrap();
        let q = ProxyQueue::new(1).unwrap();
        let tape = Tape::new();
        let loss = hf_augmentation_loss(tape.constant(t(&[1, 2], &[3.0, 0.0])), &v, &q, 0).unwrap();
        assert!((loss.item() + (E / (E + 1.0)).ln()).abs() < 1e-12);
        assert!(matches!(
            hf_augmentation_loss(tape.constant(t(&[1, 2], &[3.0, 0.0])), &v, &q, 9),
            Err(Error::MissingIdentity(9))
        ));
        assert!(hf_augmentation_loss(
            tape.constant(t(&[1, 2], &[1.0, 0.0])),
            &ProxyTable::new(),
            &q,
            0
        )
        .is_err());
    }

    #[test]
    fn proxy_update_examples() {
        let mut v = ProxyTable::new();
        let mut q = ProxyQueue::new(2).unwrap();
        proxy_update(&mut v, &mut q, &t(&[1, 2], &[1.0, 0.0]), Some(0), 0.5).unwrap();
        proxy_update(&mut v, &mut q, &t(&[1, 2], &[0.0, 1.0]), Some(0), 0.5).unwrap();
        assert_eq!(v.get(0).unwrap().data(), &[0.5, 0.5]);
        proxy_update(&mut v, &mut q, &t(&[1, 2], &[9.0, 9.0]), Some(0), 1.0).unwrap();
        assert_eq!(v.get(0).unwrap().data(), &[0.5, 0.5]);
        assert!(proxy_update(&mut v, &mut q, &t(&[1, 3], &[1.0; 3]), Some(0), 0.5).is_err());
        assert!(proxy_update(&mut v, &mut q, &t(&[1, 2], &[1.0; 2]), Some(0), 1.5).is_err());

        for name in [1.0, 2.0, 3.0] {
            proxy_update(&mut v, &mut q, &t(&[1, 2], &[name, 0.0]), None, 0.5).unwrap();
        }
        let held: Vec<f64> = q.iter().map(|e| e.data()[0]).collect();
        assert_eq!(held, vec![2.0, 3.0]);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn oim_examples() {
        let e = [0.6, 0.8];
        let mut mem = OimMemory::new(1, 2, 4, 0.1, 0.5).unwrap();
        mem.set_lut_row(0, &e).unwrap();
        let tape = Tape::new();
        let loss = oim_loss(tape.constant(t(&[2], &e)), &mem, 0).unwrap();
        assert!(loss.item().abs() < 1e-9);

        let mut mem = OimMemory::new(2, 2, 4, 1.0, 0.5).unwrap();
        mem.set_lut_row(0, &[1.0, 0.0]).unwrap();
        mem.set_lut_row(1, &[0.0, 1.0]).unwrap();
        let loss = oim_loss(tape.constant(t(&[2], &[1.0, 0.0])), &mem, 0).unwrap();
        assert!((loss.item() + (E / (E + 1.0)).ln()).abs() < 1e-12);
        assert!(oim_loss(tape.constant(t(&[2], &[1.0, 0.0])), &mem, 2).is_err());
    }

    #[test]
    fn oim_update_renormalizes_and_queues() {
        let mut mem = OimMemory::new(2, 2, 2, 1.0, 0.5).unwrap();
        mem.set_lut_row(0, &[1.0, 0.0]).unwrap();
        mem.update(&[0.0, 1.0], Some(0)).unwrap();
        let r = mem.lut().row(0);
        assert!((r[0] - r[1]).abs() < 1e-12 && (r[0] * r[0] + r[1] * r[1] - 1.0).abs() < 1e-12);
        for _ in 0..3 {
            mem.update(&[1.0, 0.0], None).unwrap();
        }
        assert_eq!(mem.queue_len(), 2);
        assert_eq!(mem.mutations(), 5);
    }

    #[test]
    fn detection_examples() {
        let tape = Tape::new();
        let logits = tape.constant(t(&[2, 2], &[-50.0, 50.0, 50.0, -50.0]));
        let boxes = t(&[2, 4], &[0.1, 0.2, 0.3, 0.4, 9.0, 9.0, 9.0, 9.0]);
        let pred = tape.constant(t(&[2, 4], &[0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0]));
        let loss = detection_loss(logits, &[1, 0], pred, &boxes).unwrap();
        assert!(loss.item().abs() < 1e-12);

        let pred = tape.constant(t(&[2, 4], &[0.6, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0]));
        let b = box_loss(pred, &[1, 0], &boxes).unwrap();
        assert!((b.item() - 0.125).abs() < 1e-12);
        assert!(detection_loss(logits, &[1], pred, &boxes).is_err());
    }

    #[test]
    fn stage_gating_and_linearity() {
        let tape = Tape::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let parts = LossParts {
            det: s(1.0),
            oim: Some(s(2.0)),
            id: Some(s(3.0)),
            p: Some(s(4.0)),
        };
        let ones = LossWeights::new(1.0, 1.0, 1.0, 0.5).unwrap();
        let zeros = LossWeights::new(0.0, 0.0, 0.0, 0.5).unwrap();
        let st = |i| StageConfig::new(i).unwrap();
        assert_eq!(total_loss(st(1), &parts, &ones).unwrap().item(), 1.0);
        assert_eq!(total_loss(st(2), &parts, &zeros).unwrap().item(), 1.0);
        assert_eq!(total_loss(st(3), &parts, &ones).unwrap().item(), 10.0);
        let partial = LossParts { p: None, ..parts };
        assert!(total_loss(st(2), &partial, &ones).is_err());
        assert!(total_loss(st(1), &partial, &ones).is_ok());
        assert!(LossWeights::new(-1.0, 0.0, 0.0, 0.5).is_err());
    }
}
