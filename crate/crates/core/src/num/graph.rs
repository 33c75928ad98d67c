use std::collections::{BTreeMap, HashMap};

use crate::error::{MbcError, Result};
use crate::num::params::ParamStore;
use crate::num::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
pub const NEG_INF_MASK: f64 = -1e30;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    StopGrad,
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
    name: Option<String>,
}

/// Values that must be replayed verbatim when the same forward pass is
/// re-run for finite differencing: stop-gradient snapshots, discrete
/// choices (code assignments), and sampled masks (dropout).
#[derive(Clone, Debug, Default)]
pub struct ReplayLog {
    sg: Vec<Tensor>,
    indices: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
}

enum Mode {
    Record(ReplayLog),
    Replay { log: ReplayLog, sg_pos: usize, idx_pos: usize, val_pos: usize },
}

/// Eager reverse-mode tape over dense matrices.
///
/// Every op computes its value immediately and records enough to replay
/// the chain rule in reverse insertion order, which is a valid reverse
/// topological order because inputs always precede outputs.
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    backward_ran: bool,
    bindings: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            mode: Mode::Record(ReplayLog::default()),
            backward_ran: false,
            bindings: HashMap::new(),
        }
    }

    /// Re-run a forward pass with frozen stop-gradient snapshots and
    /// discrete choices taken from `log`.
    pub fn new_replay(log: ReplayLog) -> Self {
        Graph {
            nodes: Vec::new(),
            mode: Mode::Replay { log, sg_pos: 0, idx_pos: 0, val_pos: 0 },
            backward_ran: false,
            bindings: HashMap::new(),
        }
    }

    pub fn take_log(self) -> ReplayLog {
        match self.mode {
            Mode::Record(log) => log,
            Mode::Replay { log, .. } => log,
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op, name: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Bind a named parameter from the store as a leaf, once per graph.
    pub fn bind(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.get(name) {
            return Ok(*v);
        }
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), p.trainable, Op::Leaf);
        self.nodes[v.0].name = Some(name.to_string());
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradients of all bound parameters that received one.
    pub fn named_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for node in &self.nodes {
            if let (Some(name), Some(grad)) = (&node.name, &node.grad) {
                out.insert(name.clone(), grad.clone());
            }
        }
        out
    }

    // ---- replayed nondeterminism ----

    /// Record (or replay) a discrete index choice, e.g. code assignments.
    pub fn logged_indices(&mut self, f: impl FnOnce() -> Vec<usize>) -> Vec<usize> {
        match &mut self.mode {
            Mode::Record(log) => {
                let v = f();
                log.indices.push(v.clone());
                v
            }
            Mode::Replay { log, idx_pos, .. } => {
                let v = log.indices[*idx_pos].clone();
                *idx_pos += 1;
                v
            }
        }
    }

    /// Record (or replay) sampled real values, e.g. dropout masks.
    pub fn logged_values(&mut self, f: impl FnOnce() -> Vec<f64>) -> Vec<f64> {
        match &mut self.mode {
            Mode::Record(log) => {
                let v = f();
                log.values.push(v.clone());
                v
            }
            Mode::Replay { log, val_pos, .. } => {
                let v = log.values[*val_pos].clone();
                *val_pos += 1;
                v
            }
        }
    }

    // ---- primitives ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(MbcError::Shape(format!("add {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Matrix plus broadcast row vector.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if vb.rows() != 1 || va.cols() != vb.cols() {
            return Err(MbcError::Shape(format!("add_row {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, rg, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(MbcError::Shape(format!("sub {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(MbcError::Shape(format!("mul {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// Matrix times broadcast row vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if vb.rows() != 1 || va.cols() != vb.cols() {
            return Err(MbcError::Shape(format!("mul_row {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(vb.data()) {
                *o *= bv;
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, rg, Op::MulRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.rows(), va.cols(), data).unwrap();
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, rg, Op::Matmul(a, b)))
    }

    /// a @ b^T
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out, rg, Op::MatmulNT(a, b)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = va.clone();
        let n = out.cols() as f64;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, rg, Op::LayerNormRows(a))
    }

    /// Row gather: out[i] = table[ids[i]].
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.nodes[table.0].value;
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= vt.rows() {
                return Err(MbcError::InvalidArgument(format!(
                    "embed id {} out of range (table has {} rows)",
                    id,
                    vt.rows()
                )));
            }
            rows.push(vt.row(id).to_vec());
        }
        let out = Tensor::from_rows(&rows)?;
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(out, rg, Op::Embed { table, ids: ids.to_vec() }))
    }

    /// Mean token NLL over unmasked positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        if targets.len() != vl.rows() || mask.len() != vl.rows() {
            return Err(MbcError::Shape(format!(
                "cross_entropy: {} logit rows, {} targets, {} mask entries",
                vl.rows(),
                targets.len(),
                mask.len()
            )));
        }
        let n_active = mask.iter().filter(|m| **m).count();
        if n_active == 0 {
            return Err(MbcError::InvalidArgument("cross_entropy: all positions masked".into()));
        }
        let mut total = 0.0;
        for i in 0..vl.rows() {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vl.cols() {
                return Err(MbcError::InvalidArgument(format!(
                    "cross_entropy: target {} out of vocab {}",
                    targets[i],
                    vl.cols()
                )));
            }
            let row = vl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let out = Tensor::scalar(total / n_active as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(out, rg, Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MbcError::InvalidArgument("concat_rows: empty".into()));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(MbcError::Shape("concat_rows: column mismatch".into()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
            rg |= self.nodes[p.0].requires_grad;
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MbcError::InvalidArgument("concat_cols: empty".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        let mut rg = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(MbcError::Shape("concat_cols: row mismatch".into()));
            }
            total_cols += v.cols();
            rg |= self.nodes[p.0].requires_grad;
        }
        let mut out = Tensor::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if start >= end || end > va.rows() {
            return Err(MbcError::Shape(format!(
                "slice_rows {}..{} of {} rows",
                start,
                end,
                va.rows()
            )));
        }
        let cols = va.cols();
        let out = Tensor::new(end - start, cols, va.data()[start * cols..end * cols].to_vec())?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, rg, Op::SliceRows(a, start, end)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if start >= end || end > va.cols() {
            return Err(MbcError::Shape(format!(
                "slice_cols {}..{} of {} cols",
                start,
                end,
                va.cols()
            )));
        }
        let mut out = Tensor::zeros(va.rows(), end - start);
        for i in 0..va.rows() {
            out.row_mut(i).copy_from_slice(&va.row(i)[start..end]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out, rg, Op::SliceCols(a, start, end)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let s = va.data().iter().sum::<f64>() / va.numel() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Exact forward identity; exact backward zero. In replay mode the
    /// forward value is taken from the recorded log instead of the input,
    /// which makes finite differences of a replayed forward compute the
    /// same surrogate gradient the tape computes analytically.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let value = match &mut self.mode {
            Mode::Record(log) => {
                let v = self.nodes[a.0].value.clone();
                log.sg.push(v.clone());
                v
            }
            Mode::Replay { log, sg_pos, .. } => {
                let v = log.sg[*sg_pos].clone();
                *sg_pos += 1;
                debug_assert_eq!(v.shape(), self.nodes[a.0].value.shape());
                v
            }
        };
        self.push(value, false, Op::StopGrad)
    }

    /// Straight-through surrogate: the forward value is `surrogate`'s,
    /// bit-exactly, while the backward pass treats the node as the
    /// identity on `a`. Both values are logged; a replayed forward
    /// computes surrogate_base + (a - a_base), which keeps the surrogate
    /// frozen while finite differences in `a` see the identity.
    pub fn straight_through(&mut self, a: Var, surrogate: Var) -> Result<Var> {
        if self.nodes[a.0].value.shape() != self.nodes[surrogate.0].value.shape() {
            return Err(MbcError::Shape(format!(
                "straight-through shapes {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[surrogate.0].value.shape()
            )));
        }
        let value = match &mut self.mode {
            Mode::Record(log) => {
                let v = self.nodes[surrogate.0].value.clone();
                log.sg.push(v.clone());
                log.sg.push(self.nodes[a.0].value.clone());
                v
            }
            Mode::Replay { log, sg_pos, .. } => {
                let mut v = log.sg[*sg_pos].clone();
                let a_base = &log.sg[*sg_pos + 1];
                *sg_pos += 2;
                debug_assert_eq!(v.shape(), self.nodes[a.0].value.shape());
                let a_now = self.nodes[a.0].value.data();
                for (out, (&now, &base)) in
                    v.data_mut().iter_mut().zip(a_now.iter().zip(a_base.data()))
                {
                    *out += now - base;
                }
                v
            }
        };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(value, rg, Op::StraightThrough(a)))
    }

    /// Mean of a list of scalars.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let stacked = self.concat_rows(parts)?;
        Ok(self.mean(stacked))
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(MbcError::Autodiff(
                "backward called twice on the same tape".into(),
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(MbcError::Autodiff(format!(
                "backward requires a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(MbcError::NonFinite("loss".into()));
        }
        self.backward_ran = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = self.nodes[idx].grad.clone().unwrap();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf | Op::StopGrad => {}
                Op::StraightThrough(a) => {
                    self.accumulate(a, &g);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::AddRow(a, b) => {
                    self.accumulate(a, &g);
                    if self.nodes[b.0].requires_grad {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        self.accumulate(b, &gb);
                    }
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    if self.nodes[b.0].requires_grad {
                        let neg = Tensor::new(
                            g.rows(),
                            g.cols(),
                            g.data().iter().map(|v| -v).collect(),
                        )?;
                        self.accumulate(b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let vb = &self.nodes[b.0].value;
                        let ga = Tensor::new(
                            g.rows(),
                            g.cols(),
                            g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                        )?;
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let va = &self.nodes[a.0].value;
                        let gb = Tensor::new(
                            g.rows(),
                            g.cols(),
                            g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                        )?;
                        self.accumulate(b, &gb);
                    }
                }
                Op::MulRow(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let vb = self.nodes[b.0].value.clone();
                        let mut ga = g.clone();
                        for i in 0..ga.rows() {
                            for (o, &bv) in ga.row_mut(i).iter_mut().zip(vb.data()) {
                                *o *= bv;
                            }
                        }
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let va = &self.nodes[a.0].value;
                        let mut gb = Tensor::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                gb.row_mut(0)[j] += g.at(i, j) * va.at(i, j);
                            }
                        }
                        self.accumulate(b, &gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = Tensor::new(
                        g.rows(),
                        g.cols(),
                        g.data().iter().map(|v| v * c).collect(),
                    )?;
                    self.accumulate(a, &ga);
                }
                Op::Matmul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let ga = matmul_nt(&g, &self.nodes[b.0].value)?;
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = matmul_tn(&self.nodes[a.0].value, &g)?;
                        self.accumulate(b, &gb);
                    }
                }
                Op::MatmulNT(a, b) => {
                    // y = a b^T : da = g b ; db = g^T a
                    if self.nodes[a.0].requires_grad {
                        let ga = matmul(&g, &self.nodes[b.0].value)?;
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let gb = matmul_tn(&g, &self.nodes[a.0].value)?;
                        self.accumulate(b, &gb);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.nodes[a.0].requires_grad {
                        let y = self.nodes[idx].value.clone();
                        let mut ga = Tensor::zeros(y.rows(), y.cols());
                        for i in 0..y.rows() {
                            let dot: f64 =
                                g.row(i).iter().zip(y.row(i)).map(|(x, v)| x * v).sum();
                            for j in 0..y.cols() {
                                ga.set(i, j, y.at(i, j) * (g.at(i, j) - dot));
                            }
                        }
                        self.accumulate(a, &ga);
                    }
                }
                Op::LayerNormRows(a) => {
                    if self.nodes[a.0].requires_grad {
                        let x = self.nodes[a.0].value.clone();
                        let y = self.nodes[idx].value.clone();
                        let n = x.cols() as f64;
                        let mut ga = Tensor::zeros(x.rows(), x.cols());
                        for i in 0..x.rows() {
                            let mean = x.row(i).iter().sum::<f64>() / n;
                            let var =
                                x.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                            let inv = 1.0 / (var + LN_EPS).sqrt();
                            let g_mean = g.row(i).iter().sum::<f64>() / n;
                            let gy_mean: f64 = g
                                .row(i)
                                .iter()
                                .zip(y.row(i))
                                .map(|(gv, yv)| gv * yv)
                                .sum::<f64>()
                                / n;
                            for j in 0..x.cols() {
                                ga.set(
                                    i,
                                    j,
                                    inv * (g.at(i, j) - g_mean - y.at(i, j) * gy_mean),
                                );
                            }
                        }
                        self.accumulate(a, &ga);
                    }
                }
                Op::Embed { table, ids } => {
                    if self.nodes[table.0].requires_grad {
                        let vt = &self.nodes[table.0].value;
                        let mut gt = Tensor::zeros(vt.rows(), vt.cols());
                        for (i, &id) in ids.iter().enumerate() {
                            for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        self.accumulate(table, &gt);
                    }
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    if self.nodes[logits.0].requires_grad {
                        let vl = self.nodes[logits.0].value.clone();
                        let n_active = mask.iter().filter(|m| **m).count() as f64;
                        let gs = g.scalar_value()?;
                        let mut gl = Tensor::zeros(vl.rows(), vl.cols());
                        for i in 0..vl.rows() {
                            if !mask[i] {
                                continue;
                            }
                            let row = vl.row(i);
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                            for j in 0..vl.cols() {
                                let p = (row[j] - max).exp() / sum;
                                let t = if targets[i] == j { 1.0 } else { 0.0 };
                                gl.set(i, j, gs * (p - t) / n_active);
                            }
                        }
                        self.accumulate(logits, &gl);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.nodes[p.0].value.rows();
                        if self.nodes[p.0].requires_grad {
                            let cols = g.cols();
                            let gp = Tensor::new(
                                r,
                                cols,
                                g.data()[start * cols..(start + r) * cols].to_vec(),
                            )?;
                            self.accumulate(p, &gp);
                        }
                        start += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.cols();
                        if self.nodes[p.0].requires_grad {
                            let mut gp = Tensor::zeros(g.rows(), c);
                            for i in 0..g.rows() {
                                gp.row_mut(i).copy_from_slice(&g.row(i)[start..start + c]);
                            }
                            self.accumulate(p, &gp);
                        }
                        start += c;
                    }
                }
                Op::SliceRows(a, start, _end) => {
                    if self.nodes[a.0].requires_grad {
                        let va = &self.nodes[a.0].value;
                        let mut ga = Tensor::zeros(va.rows(), va.cols());
                        for i in 0..g.rows() {
                            ga.row_mut(start + i).copy_from_slice(g.row(i));
                        }
                        self.accumulate(a, &ga);
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    if self.nodes[a.0].requires_grad {
                        let va = &self.nodes[a.0].value;
                        let mut ga = Tensor::zeros(va.rows(), va.cols());
                        for i in 0..g.rows() {
                            ga.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                        }
                        self.accumulate(a, &ga);
                    }
                }
                Op::Sum(a) => {
                    if self.nodes[a.0].requires_grad {
                        let va = &self.nodes[a.0].value;
                        let gs = g.scalar_value()?;
                        let ga = Tensor::filled(va.rows(), va.cols(), gs);
                        self.accumulate(a, &ga);
                    }
                }
                Op::Mean(a) => {
                    if self.nodes[a.0].requires_grad {
                        let va = &self.nodes[a.0].value;
                        let gs = g.scalar_value()? / va.numel() as f64;
                        let ga = Tensor::filled(va.rows(), va.cols(), gs);
                        self.accumulate(a, &ga);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: &Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
