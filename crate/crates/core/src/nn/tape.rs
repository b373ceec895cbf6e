//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records every primitive applied during a forward pass; the
//! reverse sweep walks the node list backwards exactly once and accumulates
//! gradients into the [`ParameterStore`](super::store::ParameterStore) leaves.
//! Primitives keep whatever forward values their backward rule needs (the
//! node outputs stay alive on the tape), so no recomputation happens during
//! the sweep.
//!
//! Domain-specific composite nodes (CTC forward, MoL alignment) plug in via
//! [`CustomOp`] without the tape knowing about them.

use super::array::{sigmoid, softplus, Mat, Scalar};
use super::store::ParameterStore;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A fused operation with a hand-written backward rule.
pub trait CustomOp<F: Scalar>: Send {
    fn name(&self) -> &'static str;
    /// Given d(loss)/d(output), return d(loss)/d(input_i) for every input,
    /// in the order the inputs were passed to `push_custom`.
    fn backward(&self, out_grad: &Mat<F>, inputs: &[&Mat<F>], output: &Mat<F>) -> Vec<Mat<F>>;
}

enum Op<F: Scalar> {
    /// Input or parameter leaf. `param` is Some(store index) for parameters.
    Leaf { param: Option<usize> },
    Matmul(Var, Var),
    Add(Var, Var),
    /// Matrix + row vector broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddConst(Var, F),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    /// Softmax along each row.
    SoftmaxRows(Var),
    /// Log-softmax along each row.
    LogSoftmaxRows(Var),
    /// 1-D convolution over time (rows = time, cols = channels).
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize, kernel: usize },
    /// Max pooling over time with non-overlapping windows; keeps argmaxes.
    MaxPool1d { x: Var, width: usize, argmax: Vec<usize> },
    /// Per-channel normalization over time, no affine parameters.
    InstanceNorm { x: Var, eps: F },
    Dropout { x: Var, mask: Vec<bool>, scale: F },
    SliceRows { x: Var, r0: usize, r1: usize },
    SliceCols { x: Var, c0: usize, c1: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Row lookup (embedding); backward scatter-adds into the table.
    GatherRows { table: Var, ids: Vec<usize> },
    /// Repeat a 1xN row M times; backward is a column sum.
    BroadcastRow { x: Var, reps: usize },
    SumAll(Var),
    /// Single element as a 1x1 scalar.
    Pick { x: Var, r: usize, c: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<F>> },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Mat<F>,
    grad: Option<Mat<F>>,
    needs_grad: bool,
}

/// Records one forward pass. Consumed by [`Tape::backward`].
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(1024), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<F>, value: Mat<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad: None, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Mat<F>) -> Var {
        self.push(Op::Leaf { param: None }, value, false)
    }

    /// Parameter leaf: value copied from the store, gradient flows back into
    /// the store slot on `backward`.
    pub fn param(&mut self, store: &ParameterStore<F>, name: &str) -> Var {
        let idx = store.index_of(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        self.push(Op::Leaf { param: Some(idx) }, store.value_at(idx).clone(), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), v, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch: {:?} vs {:?}", va.shape(), vb.shape());
        let mut v = va.clone();
        v.add_assign(vb);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    /// a (MxN) + row (1xN), broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(vr.rows(), 1, "add_row rhs must be 1xN");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(vr.row(0)) {
                *x += *y;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a, row), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let mut v = va.clone();
        for (x, y) in v.as_mut_slice().iter_mut().zip(vb.as_slice()) {
            *x *= *y;
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), v, ng)
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        let ng = self.needs(a);
        self.push(Op::AddConst(a, c), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -F::ONE);
        self.add(a, nb)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(Op::Tanh(a), v, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(sigmoid);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), v, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(F::ZERO));
        let ng = self.needs(a);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(softplus);
        let ng = self.needs(a);
        self.push(Op::Softplus(a), v, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut v = va.clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut v = va.clone();
        for r in 0..v.rows() {
            log_softmax_in_place(v.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(Op::LogSoftmaxRows(a), v, ng)
    }

    /// x: T x Cin, w: (Cin*kernel) x Cout laid out [tap0 ch0..CinK], b: 1 x Cout.
    /// Zero padding of `pad` frames on both ends, then windows at `stride`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let t = vx.rows();
        let cin = vx.cols();
        let cout = vw.cols();
        assert_eq!(vw.rows(), cin * kernel, "conv1d weight rows must be Cin*kernel");
        assert_eq!(vb.cols(), cout, "conv1d bias width mismatch");
        let t_out = conv1d_out_len(t, kernel, stride, pad);
        // im2col: each output frame's receptive field flattened to one row.
        let mut cols = Mat::zeros(t_out, cin * kernel);
        for o in 0..t_out {
            for tap in 0..kernel {
                let ti = (o * stride + tap) as isize - pad as isize;
                if ti >= 0 && (ti as usize) < t {
                    let src = vx.row(ti as usize);
                    cols.row_mut(o)[tap * cin..(tap + 1) * cin].copy_from_slice(src);
                }
            }
        }
        let mut v = cols.matmul(vw);
        for r in 0..t_out {
            for (y, bb) in v.row_mut(r).iter_mut().zip(vb.row(0)) {
                *y += *bb;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Op::Conv1d { x, w, b, stride, pad, kernel }, v, ng)
    }

    /// Non-overlapping max pooling over time; trailing partial window kept.
    pub fn max_pool1d(&mut self, x: Var, width: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let t = vx.rows();
        let c = vx.cols();
        let t_out = t.div_ceil(width);
        let mut v = Mat::zeros(t_out, c);
        let mut argmax = vec![0usize; t_out * c];
        for o in 0..t_out {
            let lo = o * width;
            let hi = ((o + 1) * width).min(t);
            for ch in 0..c {
                let mut best = vx.at(lo, ch);
                let mut best_t = lo;
                for ti in lo + 1..hi {
                    let val = vx.at(ti, ch);
                    if val > best {
                        best = val;
                        best_t = ti;
                    }
                }
                *v.at_mut(o, ch) = best;
                argmax[o * c + ch] = best_t;
            }
        }
        let ng = self.needs(x);
        self.push(Op::MaxPool1d { x, width, argmax }, v, ng)
    }

    /// Normalize each column (channel) over rows (time): zero mean, unit
    /// variance with `eps` inside the square root. No learned scale/shift.
    pub fn instance_norm(&mut self, x: Var, eps: F) -> Var {
        let vx = &self.nodes[x.0].value;
        let t = vx.rows();
        let c = vx.cols();
        assert!(t >= 1, "instance_norm needs at least one frame");
        let tf = F::from_f64(t as f64);
        let mut v = vx.clone();
        for ch in 0..c {
            let mut mean = F::ZERO;
            for r in 0..t {
                mean += vx.at(r, ch);
            }
            mean = mean / tf;
            let mut var = F::ZERO;
            for r in 0..t {
                let d = vx.at(r, ch) - mean;
                var += d * d;
            }
            var = var / tf;
            let inv = F::ONE / (var + eps).sqrt();
            for r in 0..t {
                *v.at_mut(r, ch) = (vx.at(r, ch) - mean) * inv;
            }
        }
        let ng = self.needs(x);
        self.push(Op::InstanceNorm { x, eps }, v, ng)
    }

    /// Inverted dropout: elements kept with probability 1-p and scaled by
    /// 1/(1-p). The mask comes from the caller so seeding stays explicit.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl rand::Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let vx = &self.nodes[x.0].value;
        let mask: Vec<bool> = (0..vx.len()).map(|_| rng.gen::<f64>() >= p).collect();
        let scale = F::from_f64(1.0 / (1.0 - p));
        let mut v = vx.clone();
        for (val, keep) in v.as_mut_slice().iter_mut().zip(&mask) {
            *val = if *keep { *val * scale } else { F::ZERO };
        }
        let ng = self.needs(x);
        self.push(Op::Dropout { x, mask, scale }, v, ng)
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert!(r0 < r1 && r1 <= vx.rows(), "slice_rows out of range");
        let mut v = Mat::zeros(r1 - r0, vx.cols());
        for r in r0..r1 {
            v.row_mut(r - r0).copy_from_slice(vx.row(r));
        }
        let ng = self.needs(x);
        self.push(Op::SliceRows { x, r0, r1 }, v, ng)
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert!(c0 < c1 && c1 <= vx.cols(), "slice_cols out of range");
        let mut v = Mat::zeros(vx.rows(), c1 - c0);
        for r in 0..vx.rows() {
            v.row_mut(r).copy_from_slice(&vx.row(r)[c0..c1]);
        }
        let ng = self.needs(x);
        self.push(Op::SliceCols { x, c0, c1 }, v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut r = 0;
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.cols(), cols, "concat_rows width mismatch");
            for pr in 0..vp.rows() {
                v.row_mut(r).copy_from_slice(vp.row(pr));
                r += 1;
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatRows(parts.to_vec()), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.rows(), rows, "concat_cols height mismatch");
            for r in 0..rows {
                v.row_mut(r)[c0..c0 + vp.cols()].copy_from_slice(vp.row(r));
            }
            c0 += vp.cols();
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = &self.nodes[table.0].value;
        let mut v = Mat::zeros(ids.len(), vt.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vt.rows(), "gather_rows id {} out of {} rows", id, vt.rows());
            v.row_mut(r).copy_from_slice(vt.row(id));
        }
        let ng = self.needs(table);
        self.push(Op::GatherRows { table, ids: ids.to_vec() }, v, ng)
    }

    pub fn broadcast_row(&mut self, x: Var, reps: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.rows(), 1, "broadcast_row input must be 1xN");
        let mut v = Mat::zeros(reps, vx.cols());
        for r in 0..reps {
            v.row_mut(r).copy_from_slice(vx.row(0));
        }
        let ng = self.needs(x);
        self.push(Op::BroadcastRow { x, reps }, v, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let mut s = F::ZERO;
        for &val in vx.as_slice() {
            s += val;
        }
        let ng = self.needs(x);
        self.push(Op::SumAll(x), Mat::scalar(s), ng)
    }

    pub fn pick(&mut self, x: Var, r: usize, c: usize) -> Var {
        let v = Mat::scalar(self.nodes[x.0].value.at(r, c));
        let ng = self.needs(x);
        self.push(Op::Pick { x, r, c }, v, ng)
    }

    /// Fused node: forward value computed by the caller, backward by `op`.
    pub fn push_custom(&mut self, inputs: &[Var], value: Mat<F>, op: Box<dyn CustomOp<F>>) -> Var {
        let ng = inputs.iter().any(|p| self.needs(*p));
        self.push(Op::Custom { inputs: inputs.to_vec(), op }, value, ng)
    }

    /// Mean of all elements.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum_all(x);
        self.scale(s, F::ONE / F::from_f64(n as f64))
    }

    /// Reverse sweep from a scalar loss. Gradients of parameter leaves are
    /// accumulated (`+=`) into the store. The tape may only be swept once.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore<F>) -> Result<()> {
        if self.consumed {
            return Err(Error::InvalidInput(
                "tape already consumed by a previous backward pass; rebuild the forward pass".into(),
            ));
        }
        self.consumed = true;
        {
            let node = &mut self.nodes[loss.0];
            if node.value.len() != 1 {
                return Err(Error::InvalidInput(format!(
                    "backward needs a scalar loss, got {}x{}",
                    node.value.rows(),
                    node.value.cols()
                )));
            }
            node.grad = Some(Mat::scalar(F::ONE));
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let grad = self.nodes[i].grad.take().unwrap();
            // Keep the output value around for rules that need it.
            let out_value = std::mem::replace(&mut self.nodes[i].value, Mat::zeros(0, 0));
            self.propagate(i, &grad, &out_value, store)?;
            self.nodes[i].value = out_value;
            self.nodes[i].grad = Some(grad);
        }
        // Flush parameter leaf gradients into the store.
        for i in 0..self.nodes.len() {
            if let Op::Leaf { param: Some(idx) } = self.nodes[i].op {
                if let Some(g) = &self.nodes[i].grad {
                    store.grad_at_mut(idx).add_assign(g);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: Mat<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, grad: &Mat<F>, out: &Mat<F>, _store: &mut ParameterStore<F>) -> Result<()> {
        // Temporarily steal the op to avoid aliasing self.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf { param: None });
        match &op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let mut ga = Mat::zeros(self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    ga.gemm_acc(grad, false, &self.nodes[b.0].value, true);
                    self.accum(a, ga);
                }
                if self.needs(b) {
                    let mut gb = Mat::zeros(self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
                    gb.gemm_acc(&self.nodes[a.0].value, true, grad, false);
                    self.accum(b, gb);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    self.accum(a, grad.clone());
                }
                if self.needs(b) {
                    self.accum(b, grad.clone());
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                if self.needs(a) {
                    self.accum(a, grad.clone());
                }
                if self.needs(row) {
                    let mut g = Mat::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (acc, x) in g.row_mut(0).iter_mut().zip(grad.row(r)) {
                            *acc += *x;
                        }
                    }
                    self.accum(row, g);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let mut g = grad.clone();
                    for (x, y) in g.as_mut_slice().iter_mut().zip(self.nodes[b.0].value.as_slice()) {
                        *x *= *y;
                    }
                    self.accum(a, g);
                }
                if self.needs(b) {
                    let mut g = grad.clone();
                    for (x, y) in g.as_mut_slice().iter_mut().zip(self.nodes[a.0].value.as_slice()) {
                        *x *= *y;
                    }
                    self.accum(b, g);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if self.needs(a) {
                    self.accum(a, grad.map(|x| x * c));
                }
            }
            Op::AddConst(a, _) => {
                let a = *a;
                if self.needs(a) {
                    self.accum(a, grad.clone());
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                if self.needs(a) {
                    let mut g = grad.clone();
                    for (x, y) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
                        *x *= F::ONE - *y * *y;
                    }
                    self.accum(a, g);
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                if self.needs(a) {
                    let mut g = grad.clone();
                    for (x, y) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
                        *x *= *y * (F::ONE - *y);
                    }
                    self.accum(a, g);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if self.needs(a) {
                    let mut g = grad.clone();
                    for (x, y) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
                        if *y <= F::ZERO {
                            *x = F::ZERO;
                        }
                    }
                    self.accum(a, g);
                }
            }
            Op::Softplus(a) => {
                let a = *a;
                if self.needs(a) {
                    let mut g = grad.clone();
                    for (x, y) in g.as_mut_slice().iter_mut().zip(self.nodes[a.0].value.as_slice()) {
                        *x *= sigmoid(*y);
                    }
                    self.accum(a, g);
                }
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                if self.needs(a) {
                    // dx = y * (g - sum(g*y)) per row
                    let mut g = grad.clone();
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row_mut(r);
                        let mut dot = F::ZERO;
                        for (gi, yi) in gr.iter().zip(y) {
                            dot += *gi * *yi;
                        }
                        for (gi, yi) in gr.iter_mut().zip(y) {
                            *gi = *yi * (*gi - dot);
                        }
                    }
                    self.accum(a, g);
                }
            }
            Op::LogSoftmaxRows(a) => {
                let a = *a;
                if self.needs(a) {
                    // dx = g - softmax(x) * sum(g) per row
                    let mut g = grad.clone();
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let gr = g.row_mut(r);
                        let mut gsum = F::ZERO;
                        for gi in gr.iter() {
                            gsum += *gi;
                        }
                        for (gi, yi) in gr.iter_mut().zip(y) {
                            *gi -= yi.exp() * gsum;
                        }
                    }
                    self.accum(a, g);
                }
            }
            Op::Conv1d { x, w, b, stride, pad, kernel } => {
                let (x, w, b) = (*x, *w, *b);
                let (stride, pad, kernel) = (*stride, *pad, *kernel);
                let vx = &self.nodes[x.0].value;
                let t = vx.rows();
                let cin = vx.cols();
                let t_out = grad.rows();
                // Rebuild im2col of the input (cheaper than storing it).
                let mut cols = Mat::zeros(t_out, cin * kernel);
                for o in 0..t_out {
                    for tap in 0..kernel {
                        let ti = (o * stride + tap) as isize - pad as isize;
                        if ti >= 0 && (ti as usize) < t {
                            cols.row_mut(o)[tap * cin..(tap + 1) * cin].copy_from_slice(vx.row(ti as usize));
                        }
                    }
                }
                if self.needs(w) {
                    let mut gw = Mat::zeros(cin * kernel, grad.cols());
                    gw.gemm_acc(&cols, true, grad, false);
                    self.accum(w, gw);
                }
                if self.needs(b) {
                    let mut gb = Mat::zeros(1, grad.cols());
                    for r in 0..t_out {
                        for (acc, v) in gb.row_mut(0).iter_mut().zip(grad.row(r)) {
                            *acc += *v;
                        }
                    }
                    self.accum(b, gb);
                }
                if self.needs(x) {
                    // d(cols) = grad @ w^T, then col2im scatter-add.
                    let mut dcols = Mat::zeros(t_out, cin * kernel);
                    dcols.gemm_acc(grad, false, &self.nodes[w.0].value, true);
                    let mut gx = Mat::zeros(t, cin);
                    for o in 0..t_out {
                        for tap in 0..kernel {
                            let ti = (o * stride + tap) as isize - pad as isize;
                            if ti >= 0 && (ti as usize) < t {
                                let dst = gx.row_mut(ti as usize);
                                let src = &dcols.row(o)[tap * cin..(tap + 1) * cin];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += *s;
                                }
                            }
                        }
                    }
                    self.accum(x, gx);
                }
            }
            Op::MaxPool1d { x, argmax, .. } => {
                let x = *x;
                if self.needs(x) {
                    let vx = &self.nodes[x.0].value;
                    let c = vx.cols();
                    let mut g = Mat::zeros(vx.rows(), c);
                    for o in 0..grad.rows() {
                        for ch in 0..c {
                            *g.at_mut(argmax[o * c + ch], ch) += grad.at(o, ch);
                        }
                    }
                    self.accum(x, g);
                }
            }
            Op::InstanceNorm { x, eps } => {
                let (x, eps) = (*x, *eps);
                if self.needs(x) {
                    let vx = &self.nodes[x.0].value;
                    let t = vx.rows();
                    let c = vx.cols();
                    let tf = F::from_f64(t as f64);
                    let mut g = Mat::zeros(t, c);
                    for ch in 0..c {
                        let mut mean = F::ZERO;
                        for r in 0..t {
                            mean += vx.at(r, ch);
                        }
                        mean = mean / tf;
                        let mut var = F::ZERO;
                        for r in 0..t {
                            let d = vx.at(r, ch) - mean;
                            var += d * d;
                        }
                        var = var / tf;
                        let inv = F::ONE / (var + eps).sqrt();
                        // Standard normalization backward:
                        // dx = inv * (g - mean(g) - y * mean(g*y))
                        let mut gsum = F::ZERO;
                        let mut gysum = F::ZERO;
                        for r in 0..t {
                            let y = out.at(r, ch);
                            gsum += grad.at(r, ch);
                            gysum += grad.at(r, ch) * y;
                        }
                        let gmean = gsum / tf;
                        let gymean = gysum / tf;
                        for r in 0..t {
                            let y = out.at(r, ch);
                            *g.at_mut(r, ch) = inv * (grad.at(r, ch) - gmean - y * gymean);
                        }
                    }
                    self.accum(x, g);
                }
            }
            Op::Dropout { x, mask, scale } => {
                let (x, scale) = (*x, *scale);
                if self.needs(x) {
                    let mut g = grad.clone();
                    for (v, keep) in g.as_mut_slice().iter_mut().zip(mask) {
                        *v = if *keep { *v * scale } else { F::ZERO };
                    }
                    self.accum(x, g);
                }
            }
            Op::SliceRows { x, r0, r1 } => {
                let (x, r0, r1) = (*x, *r0, *r1);
                if self.needs(x) {
                    let vx = &self.nodes[x.0].value;
                    let mut g = Mat::zeros(vx.rows(), vx.cols());
                    for r in r0..r1 {
                        g.row_mut(r).copy_from_slice(grad.row(r - r0));
                    }
                    self.accum(x, g);
                }
            }
            Op::SliceCols { x, c0, c1 } => {
                let (x, c0, c1) = (*x, *c0, *c1);
                if self.needs(x) {
                    let vx = &self.nodes[x.0].value;
                    let mut g = Mat::zeros(vx.rows(), vx.cols());
                    for r in 0..g.rows() {
                        g.row_mut(r)[c0..c1].copy_from_slice(grad.row(r));
                    }
                    self.accum(x, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.rows();
                    if self.needs(*p) {
                        let mut g = Mat::zeros(rows, grad.cols());
                        for pr in 0..rows {
                            g.row_mut(pr).copy_from_slice(grad.row(r + pr));
                        }
                        self.accum(*p, g);
                    }
                    r += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let cols = self.nodes[p.0].value.cols();
                    if self.needs(*p) {
                        let mut g = Mat::zeros(grad.rows(), cols);
                        for r in 0..grad.rows() {
                            g.row_mut(r).copy_from_slice(&grad.row(r)[c0..c0 + cols]);
                        }
                        self.accum(*p, g);
                    }
                    c0 += cols;
                }
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                if self.needs(table) {
                    let vt = &self.nodes[table.0].value;
                    let mut g = Mat::zeros(vt.rows(), vt.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in g.row_mut(id).iter_mut().zip(grad.row(r)) {
                            *d += *s;
                        }
                    }
                    self.accum(table, g);
                }
            }
            Op::BroadcastRow { x, .. } => {
                let x = *x;
                if self.needs(x) {
                    let mut g = Mat::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (acc, v) in g.row_mut(0).iter_mut().zip(grad.row(r)) {
                            *acc += *v;
                        }
                    }
                    self.accum(x, g);
                }
            }
            Op::SumAll(x) => {
                let x = *x;
                if self.needs(x) {
                    let vx = &self.nodes[x.0].value;
                    let gv = grad.item();
                    let mut g = Mat::zeros(vx.rows(), vx.cols());
                    g.fill(gv);
                    self.accum(x, g);
                }
            }
            Op::Pick { x, r, c } => {
                let (x, r, c) = (*x, *r, *c);
                if self.needs(x) {
                    let vx = &self.nodes[x.0].value;
                    let mut g = Mat::zeros(vx.rows(), vx.cols());
                    *g.at_mut(r, c) = grad.item();
                    self.accum(x, g);
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Mat<F>> = inputs.iter().map(|p| &self.nodes[p.0].value).collect();
                let grads = op.backward(grad, &values, out);
                assert_eq!(grads.len(), inputs.len(), "custom op `{}` returned wrong grad count", op.name());
                let pairs: Vec<(Var, Mat<F>)> = inputs.iter().copied().zip(grads).collect();
                for (p, g) in pairs {
                    if self.needs(p) {
                        assert_eq!(
                            g.shape(),
                            self.nodes[p.0].value.shape(),
                            "custom op grad shape mismatch"
                        );
                        self.accum(p, g);
                    }
                }
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

pub(crate) fn conv1d_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad).saturating_sub(kernel) / stride + 1
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut sum = F::ZERO;
    for v in row.iter() {
        sum += (*v - m).exp();
    }
    let lse = m + sum.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}
