//! Reverse-mode autodiff over a small set of tensor ops.
//!
//! A `Tape` is built eagerly per forward pass: every op computes its value on
//! construction, and `backward` walks the node list in reverse accumulating
//! gradients into the referenced parameter store. The op set is exactly what
//! the transformer stack needs; shape misuse inside model code is a bug and
//! panics rather than returning an error.

use std::collections::HashMap;

use super::model::Parameters;
use super::tensor::{Scalar, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<F> {
    Param(usize),
    Input,
    GatherRows { src: NodeId, ids: Vec<usize> },
    BroadcastRow { src: NodeId, count: usize },
    Add { a: NodeId, b: NodeId },
    AddBroadcastRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, c: F },
    Matmul { a: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    Gelu { a: NodeId },
    SliceRows { a: NodeId, start: usize, len: usize },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
}

struct Node<F> {
    op: Op<F>,
    /// Value owned by the node; `None` only for `Param`, whose value lives in
    /// the parameter store.
    value: Option<Tensor<F>>,
}

/// Per-parameter gradients produced by [`Tape::backward`]. A `None` entry
/// means the parameter was not on the compute path: its gradient is zero.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    by_param: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(param_count: usize) -> Self {
        Gradients {
            by_param: vec![None; param_count],
        }
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn get(&self, pid: usize) -> Option<&Tensor<F>> {
        self.by_param[pid].as_ref()
    }

    /// self += s * other, treating missing entries as zero.
    pub fn add_scaled(&mut self, other: &Gradients<F>, s: F) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (mine, theirs) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_scaled_assign(t, s),
                    None => {
                        let mut copy = t.clone();
                        copy.scale_assign(s);
                        *mine = Some(copy);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    fn accumulate(&mut self, pid: usize, delta: &Tensor<F>) {
        match &mut self.by_param[pid] {
            Some(g) => g.add_assign(delta),
            slot @ None => *slot = Some(delta.clone()),
        }
    }
}

pub struct Tape<'p, F: Scalar> {
    params: &'p Parameters<F>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p Parameters<F>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Param(pid) => self.params.tensor(*pid),
            _ => node.value.as_ref().expect("non-param node stores a value"),
        }
    }

    fn push(&mut self, op: Op<F>, value: Option<Tensor<F>>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, pid: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid) {
            return id;
        }
        let id = self.push(Op::Param(pid), None);
        self.param_nodes.insert(pid, id);
        id
    }

    pub fn input(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Input, Some(value))
    }

    pub fn gather_rows(&mut self, src: NodeId, ids: &[usize]) -> NodeId {
        let table = self.value(src);
        let cols = table.cols();
        let mut out = Tensor::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < table.rows(), "gather row {id} out of {}", table.rows());
            out.row_mut(i).copy_from_slice(table.row(id));
        }
        self.push(
            Op::GatherRows {
                src,
                ids: ids.to_vec(),
            },
            Some(out),
        )
    }

    pub fn broadcast_row(&mut self, src: NodeId, count: usize) -> NodeId {
        let row = self.value(src);
        assert_eq!(row.rows(), 1, "broadcast source must be a single row");
        let mut out = Tensor::zeros(count, row.cols());
        for i in 0..count {
            out.row_mut(i).copy_from_slice(row.row(0));
        }
        self.push(Op::BroadcastRow { src, count }, Some(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(Op::Add { a, b }, Some(out))
    }

    pub fn add_broadcast_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vrow) = (self.value(a), self.value(row));
        assert_eq!(vrow.rows(), 1, "broadcast addend must be a single row");
        assert_eq!(va.cols(), vrow.cols(), "broadcast add width mismatch");
        let mut out = va.clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            for (x, &y) in r.iter_mut().zip(vrow.row(0)) {
                *x += y;
            }
        }
        self.push(Op::AddBroadcastRow { a, row }, Some(out))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let out = self.value(a).map(|x| x * c);
        self.push(Op::Scale { a, c }, Some(out))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul { a, b }, Some(out))
    }

    /// a @ b^T, used for attention scores.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatmulNT { a, b }, Some(out))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let max = max_of(row);
            for x in row.iter_mut() {
                *x = (*x - max).exp_approx();
            }
            let inv = F::ONE / sum_of(row);
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        self.push(Op::SoftmaxRows { a }, Some(out))
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (va, vg, vb) = (self.value(a), self.value(gain), self.value(bias));
        assert_eq!(vg.rows(), 1);
        assert_eq!(vb.rows(), 1);
        assert_eq!(va.cols(), vg.cols());
        assert_eq!(va.cols(), vb.cols());
        let mut out = Tensor::zeros(va.rows(), va.cols());
        let n = va.cols();
        let inv_n = F::from_f64(1.0 / n as f64);
        let eps = F::from_f64(LAYER_NORM_EPS);
        for i in 0..va.rows() {
            let row = va.row(i);
            let mean = sum_of(row) * inv_n;
            let var = sum_sq_dev(row, mean) * inv_n;
            let inv_std = F::ONE / (var + eps).sqrt();
            let orow = out.row_mut(i);
            for (j, &x) in row.iter().enumerate() {
                orow[j] = (x - mean) * inv_std * vg.row(0)[j] + vb.row(0)[j];
            }
        }
        self.push(Op::LayerNorm { a, gain, bias }, Some(out))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let c = F::from_f64(GELU_C);
        let k = F::from_f64(GELU_A);
        let half = F::from_f64(0.5);
        let out = self.value(a).map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (F::ONE + u.tanh_approx())
        });
        self.push(Op::Gelu { a }, Some(out))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "row slice out of bounds");
        let mut out = Tensor::zeros(len, va.cols());
        for i in 0..len {
            out.row_mut(i).copy_from_slice(va.row(start + i));
        }
        self.push(Op::SliceRows { a, start, len }, Some(out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            for i in 0..v.rows() {
                out.row_mut(offset + i).copy_from_slice(v.row(i));
            }
            offset += v.rows();
        }
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            Some(out),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "column slice out of bounds");
        let mut out = Tensor::zeros(va.rows(), len);
        for i in 0..va.rows() {
            out.row_mut(i)
                .copy_from_slice(&va.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols { a, start, len }, Some(out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Some(out),
        )
    }

    /// x @ w + b for w [in,out], b [1,out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let prod = self.matmul(x, w);
        self.add_broadcast_row(prod, b)
    }

    /// Propagate `seed` (d loss / d value at `seed_node`) back to parameters.
    pub fn backward(&self, seed_node: NodeId, seed: Tensor<F>) -> Gradients<F> {
        assert_eq!(
            self.value(seed_node).shape(),
            seed.shape(),
            "seed gradient shape mismatch"
        );
        let mut node_grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        node_grads[seed_node.0] = Some(seed);
        let mut out = Gradients::zeros(self.params.len());

        for idx in (0..=seed_node.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Param(pid) => out.accumulate(*pid, &g),
                Op::Input => {}
                Op::GatherRows { src, ids } => {
                    let table = self.value(*src);
                    let mut dsrc = Tensor::zeros(table.rows(), table.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        let drow = dsrc.row_mut(id);
                        for (x, &y) in drow.iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    accumulate_node(&mut node_grads, *src, dsrc);
                }
                Op::BroadcastRow { src, count } => {
                    let mut dsrc = Tensor::zeros(1, g.cols());
                    for i in 0..*count {
                        for (x, &y) in dsrc.row_mut(0).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    accumulate_node(&mut node_grads, *src, dsrc);
                }
                Op::Add { a, b } => {
                    accumulate_node(&mut node_grads, *a, g.clone());
                    accumulate_node(&mut node_grads, *b, g);
                }
                Op::AddBroadcastRow { a, row } => {
                    let mut drow = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (x, &y) in drow.row_mut(0).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                    accumulate_node(&mut node_grads, *row, drow);
                    accumulate_node(&mut node_grads, *a, g);
                }
                Op::Scale { a, c } => {
                    let mut da = g;
                    da.scale_assign(*c);
                    accumulate_node(&mut node_grads, *a, da);
                }
                Op::Matmul { a, b } => {
                    let da = g.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g);
                    accumulate_node(&mut node_grads, *a, da);
                    accumulate_node(&mut node_grads, *b, db);
                }
                Op::MatmulNT { a, b } => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_tn(self.value(*a));
                    accumulate_node(&mut node_grads, *a, da);
                    accumulate_node(&mut node_grads, *b, db);
                }
                Op::SoftmaxRows { a } => {
                    let s = self.nodes[idx].value.as_ref().unwrap();
                    let mut da = Tensor::zeros(s.rows(), s.cols());
                    for i in 0..s.rows() {
                        let srow = s.row(i);
                        let grow = g.row(i);
                        let mut dot = F::ZERO;
                        for (&gs, &ss) in grow.iter().zip(srow) {
                            dot += gs * ss;
                        }
                        for (j, x) in da.row_mut(i).iter_mut().enumerate() {
                            *x = srow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate_node(&mut node_grads, *a, da);
                }
                Op::LayerNorm { a, gain, bias } => {
                    let va = self.value(*a);
                    let vg = self.value(*gain);
                    let n = va.cols();
                    let inv_n = F::from_f64(1.0 / n as f64);
                    let eps = F::from_f64(LAYER_NORM_EPS);
                    let mut da = Tensor::zeros(va.rows(), n);
                    let mut dgain = Tensor::zeros(1, n);
                    let mut dbias = Tensor::zeros(1, n);
                    for i in 0..va.rows() {
                        let row = va.row(i);
                        let mean = sum_of(row) * inv_n;
                        let var = sum_sq_dev(row, mean) * inv_n;
                        let inv_std = F::ONE / (var + eps).sqrt();
                        let grow = g.row(i);
                        let mut mean_h = F::ZERO;
                        let mut mean_hx = F::ZERO;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            let h = grow[j] * vg.row(0)[j];
                            mean_h += h;
                            mean_hx += h * xhat;
                            dgain.row_mut(0)[j] += grow[j] * xhat;
                            dbias.row_mut(0)[j] += grow[j];
                        }
                        mean_h *= inv_n;
                        mean_hx *= inv_n;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            let h = grow[j] * vg.row(0)[j];
                            da.row_mut(i)[j] = (h - mean_h - xhat * mean_hx) * inv_std;
                        }
                    }
                    accumulate_node(&mut node_grads, *a, da);
                    accumulate_node(&mut node_grads, *gain, dgain);
                    accumulate_node(&mut node_grads, *bias, dbias);
                }
                Op::Gelu { a } => {
                    let va = self.value(*a);
                    let c = F::from_f64(GELU_C);
                    let k = F::from_f64(GELU_A);
                    let half = F::from_f64(0.5);
                    let three = F::from_f64(3.0);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for (out, (&x, &gx)) in da
                        .data_mut()
                        .iter_mut()
                        .zip(va.data().iter().zip(g.data()))
                    {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh_approx();
                        let du = c * (F::ONE + three * k * x * x);
                        let deriv = half * (F::ONE + t) + half * x * (F::ONE - t * t) * du;
                        *out = gx * deriv;
                    }
                    accumulate_node(&mut node_grads, *a, da);
                }
                Op::SliceRows { a, start, len } => {
                    let va = self.value(*a);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for i in 0..*len {
                        da.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    accumulate_node(&mut node_grads, *a, da);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let mut dp = Tensor::zeros(rows, g.cols());
                        for i in 0..rows {
                            dp.row_mut(i).copy_from_slice(g.row(offset + i));
                        }
                        accumulate_node(&mut node_grads, p, dp);
                        offset += rows;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let va = self.value(*a);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for i in 0..va.rows() {
                        da.row_mut(i)[*start..*start + *len].copy_from_slice(g.row(i));
                    }
                    accumulate_node(&mut node_grads, *a, da);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut dp = Tensor::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            dp.row_mut(i)
                                .copy_from_slice(&g.row(i)[offset..offset + cols]);
                        }
                        accumulate_node(&mut node_grads, p, dp);
                        offset += cols;
                    }
                }
            }
        }
        out
    }
}

fn accumulate_node<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: NodeId, delta: Tensor<F>) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Max over a slice; a fixed-order reduction the vectorizer can widen.
fn max_of<F: Scalar>(row: &[F]) -> F {
    let mut max = row[0];
    for &x in row {
        max = max.max(x);
    }
    max
}

/// Sum with four independent accumulators so the reduction is not bound by
/// scalar add latency. The accumulation order is fixed, so results stay
/// deterministic.
fn sum_of<F: Scalar>(row: &[F]) -> F {
    let mut acc = [F::ZERO; 4];
    let mut chunks = row.chunks_exact(4);
    for c in chunks.by_ref() {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for &x in chunks.remainder() {
        total += x;
    }
    total
}

/// Sum of squared deviations from `mean`, same accumulation scheme.
fn sum_sq_dev<F: Scalar>(row: &[F], mean: F) -> F {
    let mut acc = [F::ZERO; 4];
    let mut chunks = row.chunks_exact(4);
    for c in chunks.by_ref() {
        let d0 = c[0] - mean;
        let d1 = c[1] - mean;
        let d2 = c[2] - mean;
        let d3 = c[3] - mean;
        acc[0] += d0 * d0;
        acc[1] += d1 * d1;
        acc[2] += d2 * d2;
        acc[3] += d3 * d3;
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for &x in chunks.remainder() {
        let d = x - mean;
        total += d * d;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Finite-difference check of a scalar-valued graph over one parameter.
    fn check_param_grad(
        build: impl Fn(&mut Tape<f64>) -> NodeId,
        params: &mut Parameters<f64>,
        pid: usize,
        tol: f64,
    ) {
        // Scalar objective: sum of all output entries.
        let loss_of = |params: &Parameters<f64>| -> f64 {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            tape.value(out).data().iter().sum()
        };
        let (analytic, shape) = {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            let shape = tape.value(out).shape();
            let seed = Tensor::from_vec(shape.0, shape.1, vec![1.0; shape.0 * shape.1]);
            let grads = tape.backward(out, seed);
            (
                grads
                    .get(pid)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(
                        params.tensor(pid).rows(),
                        params.tensor(pid).cols()
                    )),
                shape,
            )
        };
        let _ = shape;
        let h = 1e-6;
        let (rows, cols) = params.tensor(pid).shape();
        for r in 0..rows {
            for c in 0..cols {
                let orig = params.tensor(pid).at(r, c);
                *params.tensor_mut(pid).at_mut(r, c) = orig + h;
                let fp = loss_of(params);
                *params.tensor_mut(pid).at_mut(r, c) = orig - h;
                let fm = loss_of(params);
                *params.tensor_mut(pid).at_mut(r, c) = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let got = analytic.at(r, c);
                assert!(
                    (got - numeric).abs() <= tol * (1.0 + numeric.abs()),
                    "param {pid} entry ({r},{c}): analytic {got} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut params = Parameters::<f64>::new();
        let x = random_tensor(4, 6, &mut rng);
        let w = random_tensor(6, 3, &mut rng);
        let gain = random_tensor(1, 6, &mut rng);
        let bias = random_tensor(1, 6, &mut rng);
        let table = random_tensor(5, 6, &mut rng);
        let px = params.push("x", x);
        let pw = params.push("w", w);
        let pgain = params.push("gain", gain);
        let pbias = params.push("bias", bias);
        let ptable = params.push("table", table);

        let build = |tape: &mut Tape<f64>| -> NodeId {
            let x = tape.param(px);
            let w = tape.param(pw);
            let gain = tape.param(pgain);
            let bias = tape.param(pbias);
            let table = tape.param(ptable);
            let gathered = tape.gather_rows(table, &[0, 3, 3, 1]);
            let mixed = tape.add(x, gathered);
            let normed = tape.layer_norm(mixed, gain, bias);
            let act = tape.gelu(normed);
            let scores = tape.matmul_nt(act, act);
            let soft = tape.softmax_rows(scores);
            let ctx = tape.matmul(soft, act);
            let a = tape.slice_cols(ctx, 0, 3);
            let b = tape.slice_cols(ctx, 3, 3);
            let cat = tape.concat_cols(&[b, a]);
            let top = tape.slice_rows(cat, 0, 2);
            let bottom = tape.slice_rows(cat, 2, 2);
            let stacked = tape.concat_rows(&[bottom, top]);
            let out = tape.matmul(stacked, w);
            tape.scale(out, 0.7)
        };

        for pid in [px, pw, pgain, pbias, ptable] {
            check_param_grad(build, &mut params, pid, 1e-6);
        }
    }

    #[test]
    fn broadcast_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = Parameters::<f64>::new();
        let row = random_tensor(1, 4, &mut rng);
        let base = random_tensor(3, 4, &mut rng);
        let prow = params.push("row", row);
        let pbase = params.push("base", base);
        let build = |tape: &mut Tape<f64>| -> NodeId {
            let row = tape.param(prow);
            let base = tape.param(pbase);
            let wide = tape.broadcast_row(row, 3);
            let sum = tape.add(wide, base);
            tape.add_broadcast_row(sum, row)
        };
        for pid in [prow, pbase] {
            check_param_grad(build, &mut params, pid, 1e-7);
        }
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut params = Parameters::<f64>::new();
        let pa = params.push("a", Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let pb = params.push("b", Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let mut tape = Tape::new(&params);
        let a = tape.param(pa);
        let out = tape.scale(a, 2.0);
        let grads = tape.backward(out, Tensor::from_vec(2, 2, vec![1.0; 4]));
        assert!(grads.get(pa).is_some());
        assert!(grads.get(pb).is_none());
    }
}
