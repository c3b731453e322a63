//! Reverse-mode differentiation on a recorded operation tape.
//!
//! A [`Graph`] owns an append-only list of nodes; [`Var`] is a copyable
//! handle into it. Backward walks the tape in reverse construction order
//! with sequential accumulation, so gradients are bitwise deterministic
//! for a fixed construction order.

use std::cell::RefCell;

use super::{matmul_raw, transpose_raw, Tensor, TensorError};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// Elementwise product with a one-element node, broadcast over `a`.
    MulVarScalar { a: usize, s: usize },
    /// Row-broadcast bias add: `a[r, c] + bias[c]`.
    AddRows { a: usize, bias: usize },
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax { x: usize, axis: usize },
    LogSumExp { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu(usize),
    Exp(usize),
    /// x ln x with 0 at x <= 0.
    XLnX(usize),
    Recip(usize),
    SumAll(usize),
    SumAxis { x: usize, axis: usize },
    /// `a[r, c] * s[r]` for a vector `s` of row scales.
    ScaleRows { a: usize, s: usize },
    /// Rows rescaled to unit Euclidean norm.
    NormalizeRows(usize),
    /// Row lookup: `out[j] = table[ids[j]]`.
    Gather { table: usize, ids: Vec<usize> },
    SelectRow { x: usize, row: usize },
    SelectElem { x: usize, row: usize, col: usize },
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    /// Stack rank-1 vectors as matrix rows.
    StackRows(Vec<usize>),
    /// Sum of the main diagonal of a square matrix.
    Trace(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some grad-requiring leaf feeds this node.
    rg: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    g: &'g Graph,
    id: usize,
}

/// Gradients keyed by tape position after a backward pass.
#[derive(Debug)]
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }

    /// Gradient for `v`, or zeros of its shape when no path reached it.
    pub fn take_or_zeros(&mut self, v: Var<'_>) -> Tensor {
        self.take(v)
            .unwrap_or_else(|| Tensor::zeros(v.shape()).expect("leaf shape is valid"))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, rg: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, rg });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf whose `requires_grad` flag is taken from the tensor.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, mut t: Tensor) -> Var<'_> {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].rg
    }

    /// Stack rank-1 vectors of equal length into a matrix, one per row.
    pub fn stack_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>, TensorError> {
        assert!(!parts.is_empty(), "stack_rows needs at least one row");
        let cols = parts[0].value_with(|t| t.numel());
        let mut data = Vec::with_capacity(parts.len() * cols);
        let mut rg = false;
        for p in parts {
            p.value_with(|t| {
                if t.numel() != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "stack_rows",
                        left: vec![cols],
                        right: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.data());
                Ok(())
            })?;
            rg |= self.rg_of(p.id);
        }
        let value = Tensor::new(vec![parts.len(), cols], data)?;
        Ok(self.push(value, Op::StackRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Concatenate matrices with equal column counts along rows.
    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>, TensorError> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = parts[0].value_with(|t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            p.value_with(|t| {
                if t.cols() != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        left: vec![cols],
                        right: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
                Ok(())
            })?;
            rg |= self.rg_of(p.id);
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>, TensorError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = parts[0].value_with(|t| t.rows());
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for p in parts {
            p.value_with(|t| {
                if t.rows() != rows {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_cols",
                        left: vec![rows],
                        right: t.shape().to_vec(),
                    });
                }
                widths.push(t.cols());
                Ok(())
            })?;
            rg |= self.rg_of(p.id);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, w) in parts.iter().zip(&widths) {
            p.value_with(|t| {
                for r in 0..rows {
                    data[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            });
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    /// Reverse pass from a scalar root. Returns gradients for every node a
    /// grad path reached.
    pub fn backward(&self, root: Var<'_>) -> Result<GradStore, TensorError> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !root_node.rg {
            return Ok(GradStore { grads });
        }
        grads[root.id] = Some(Tensor::scalar(1.0));

        for id in (0..=root.id).rev() {
            if grads[id].is_none() || !nodes[id].rg {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            let node = &nodes[id];
            backward_op(node, &g, &nodes, &mut grads)?;
            // Leaves keep their gradient; interior grads were consumed above,
            // so restore leaf storage.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(GradStore { grads })
    }
}

/// Accumulate `delta` into `slot`, adding elementwise when already present.
fn accum(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
    }
}

fn add_into(slot: &mut Option<Tensor>, shape: &[usize], write: impl FnOnce(&mut [f64])) {
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape.to_vec()).expect("valid shape"));
    }
    write(slot.as_mut().expect("just set").data_mut());
}

fn backward_op(
    node: &Node,
    g: &Tensor,
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
) -> Result<(), TensorError> {
    let want = |id: usize| nodes[id].rg;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if want(*a) {
                accum(&mut grads[*a], g.clone());
            }
            if want(*b) {
                accum(&mut grads[*b], g.clone());
            }
        }
        Op::Sub(a, b) => {
            if want(*a) {
                accum(&mut grads[*a], g.clone());
            }
            if want(*b) {
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                accum(&mut grads[*b], neg);
            }
        }
        Op::Mul(a, b) => {
            if want(*a) {
                let bv = &nodes[*b].value;
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(bv.data()) {
                    *x *= y;
                }
                accum(&mut grads[*a], d);
            }
            if want(*b) {
                let av = &nodes[*a].value;
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(av.data()) {
                    *x *= y;
                }
                accum(&mut grads[*b], d);
            }
        }
        Op::AddScalar(a) => {
            if want(*a) {
                accum(&mut grads[*a], g.clone());
            }
        }
        Op::MulScalar(a, c) => {
            if want(*a) {
                let mut d = g.clone();
                for v in d.data_mut() {
                    *v *= c;
                }
                accum(&mut grads[*a], d);
            }
        }
        Op::MulVarScalar { a, s } => {
            let sv = nodes[*s].value.item();
            if want(*a) {
                let mut d = g.clone();
                for v in d.data_mut() {
                    *v *= sv;
                }
                accum(&mut grads[*a], d);
            }
            if want(*s) {
                let av = &nodes[*a].value;
                let dot: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                accum(&mut grads[*s], Tensor::scalar(dot));
            }
        }
        Op::AddRows { a, bias } => {
            if want(*a) {
                accum(&mut grads[*a], g.clone());
            }
            if want(*bias) {
                let bshape = nodes[*bias].value.shape().to_vec();
                let (rows, cols) = (g.rows(), g.cols());
                add_into(&mut grads[*bias], &bshape, |acc| {
                    for r in 0..rows {
                        for c in 0..cols {
                            acc[c] += g.data()[r * cols + c];
                        }
                    }
                });
            }
        }
        Op::Matmul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if want(*a) {
                let bt = transpose_raw(bv.data(), k, n);
                let da = matmul_raw(g.data(), &bt, m, n, k);
                accum(&mut grads[*a], Tensor::new(av.shape().to_vec(), da)?);
            }
            if want(*b) {
                let at = transpose_raw(av.data(), m, k);
                let db = matmul_raw(&at, g.data(), k, m, n);
                accum(&mut grads[*b], Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        Op::Transpose(a) => {
            if want(*a) {
                let (m, n) = (node.value.rows(), node.value.cols());
                let d = transpose_raw(g.data(), m, n);
                accum(&mut grads[*a], Tensor::new(nodes[*a].value.shape().to_vec(), d)?);
            }
        }
        Op::Reshape(a) => {
            if want(*a) {
                accum(
                    &mut grads[*a],
                    Tensor::new(nodes[*a].value.shape().to_vec(), g.data().to_vec())?,
                );
            }
        }
        Op::Softmax { x, axis } => {
            if want(*x) {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut d = vec![0.0; y.numel()];
                // Per lane: dx_i = y_i * (g_i - sum_j g_j y_j).
                let lanes = if *axis == 1 { rows } else { cols };
                let lane_len = if *axis == 1 { cols } else { rows };
                for l in 0..lanes {
                    let idx = |i: usize| {
                        if *axis == 1 {
                            l * cols + i
                        } else {
                            i * cols + l
                        }
                    };
                    let mut dot = 0.0;
                    for i in 0..lane_len {
                        dot += g.data()[idx(i)] * y.data()[idx(i)];
                    }
                    for i in 0..lane_len {
                        let j = idx(i);
                        d[j] = y.data()[j] * (g.data()[j] - dot);
                    }
                }
                accum(&mut grads[*x], Tensor::new(y.shape().to_vec(), d)?);
            }
        }
        Op::LogSumExp { x, axis } => {
            if want(*x) {
                let xv = &nodes[*x].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut d = vec![0.0; xv.numel()];
                let lanes = if *axis == 1 { rows } else { cols };
                let lane_len = if *axis == 1 { cols } else { rows };
                for l in 0..lanes {
                    let idx = |i: usize| {
                        if *axis == 1 {
                            l * cols + i
                        } else {
                            i * cols + l
                        }
                    };
                    let lse = node.value.data()[l];
                    let gl = g.data()[l];
                    for i in 0..lane_len {
                        let j = idx(i);
                        d[j] = gl * (xv.data()[j] - lse).exp();
                    }
                }
                accum(&mut grads[*x], Tensor::new(xv.shape().to_vec(), d)?);
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gain].value;
            let (rows, cols) = (xv.rows(), xv.cols());
            let w = cols as f64;
            let mut dx = vec![0.0; xv.numel()];
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            for r in 0..rows {
                let xr = &xv.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let mean = xr.iter().sum::<f64>() / w;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
                let inv = 1.0 / (var + eps).sqrt();
                // h = gain .* g; dx = inv*(h - mean(h) - xhat*mean(h .* xhat))
                let mut mean_h = 0.0;
                let mut mean_hx = 0.0;
                for c in 0..cols {
                    let xhat = (xr[c] - mean) * inv;
                    let h = gv.data()[c] * gr[c];
                    mean_h += h;
                    mean_hx += h * xhat;
                    dgain[c] += gr[c] * xhat;
                    dbias[c] += gr[c];
                }
                mean_h /= w;
                mean_hx /= w;
                for c in 0..cols {
                    let xhat = (xr[c] - mean) * inv;
                    let h = gv.data()[c] * gr[c];
                    dx[r * cols + c] = inv * (h - mean_h - xhat * mean_hx);
                }
            }
            if want(*x) {
                accum(&mut grads[*x], Tensor::new(xv.shape().to_vec(), dx)?);
            }
            if want(*gain) {
                accum(&mut grads[*gain], Tensor::new(gv.shape().to_vec(), dgain)?);
            }
            if want(*bias) {
                let bshape = nodes[*bias].value.shape().to_vec();
                accum(&mut grads[*bias], Tensor::new(bshape, dbias)?);
            }
        }
        Op::Gelu(a) => {
            if want(*a) {
                let xv = &nodes[*a].value;
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(xv.data()) {
                    let u = GELU_K * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    *dv *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                }
                accum(&mut grads[*a], d);
            }
        }
        Op::Exp(a) => {
            if want(*a) {
                let mut d = g.clone();
                for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= y;
                }
                accum(&mut grads[*a], d);
            }
        }
        Op::XLnX(a) => {
            if want(*a) {
                let xv = &nodes[*a].value;
                let mut d = g.clone();
                for (dv, &x) in d.data_mut().iter_mut().zip(xv.data()) {
                    *dv *= if x > 0.0 { x.ln() + 1.0 } else { 0.0 };
                }
                accum(&mut grads[*a], d);
            }
        }
        Op::Recip(a) => {
            if want(*a) {
                let mut d = g.clone();
                for (dv, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                    *dv *= -y * y;
                }
                accum(&mut grads[*a], d);
            }
        }
        Op::SumAll(a) => {
            if want(*a) {
                let shape = nodes[*a].value.shape().to_vec();
                let gs = g.item();
                accum(&mut grads[*a], Tensor::full(shape, gs)?);
            }
        }
        Op::SumAxis { x, axis } => {
            if want(*x) {
                let xv = &nodes[*x].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut d = vec![0.0; xv.numel()];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r * cols + c] = if *axis == 1 { g.data()[r] } else { g.data()[c] };
                    }
                }
                accum(&mut grads[*x], Tensor::new(xv.shape().to_vec(), d)?);
            }
        }
        Op::ScaleRows { a, s } => {
            let av = &nodes[*a].value;
            let sv = &nodes[*s].value;
            let (rows, cols) = (av.rows(), av.cols());
            if want(*a) {
                let mut d = g.clone();
                for r in 0..rows {
                    let scale = sv.data()[r];
                    for c in 0..cols {
                        d.data_mut()[r * cols + c] *= scale;
                    }
                }
                accum(&mut grads[*a], d);
            }
            if want(*s) {
                let mut d = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        d[r] += g.data()[r * cols + c] * av.data()[r * cols + c];
                    }
                }
                accum(&mut grads[*s], Tensor::new(sv.shape().to_vec(), d)?);
            }
        }
        Op::NormalizeRows(a) => {
            if want(*a) {
                let xv = &nodes[*a].value;
                let yv = &node.value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut d = vec![0.0; xv.numel()];
                for r in 0..rows {
                    let xr = &xv.data()[r * cols..(r + 1) * cols];
                    let yr = &yv.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n < NORM_FLOOR {
                        for c in 0..cols {
                            d[r * cols + c] = gr[c] / NORM_FLOOR;
                        }
                    } else {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                        for c in 0..cols {
                            d[r * cols + c] = (gr[c] - yr[c] * dot) / n;
                        }
                    }
                }
                accum(&mut grads[*a], Tensor::new(xv.shape().to_vec(), d)?);
            }
        }
        Op::Gather { table, ids } => {
            if want(*table) {
                let tv = &nodes[*table].value;
                let cols = tv.cols();
                let tshape = tv.shape().to_vec();
                add_into(&mut grads[*table], &tshape, |acc| {
                    for (j, &row) in ids.iter().enumerate() {
                        for c in 0..cols {
                            acc[row * cols + c] += g.data()[j * cols + c];
                        }
                    }
                });
            }
        }
        Op::SelectRow { x, row } => {
            if want(*x) {
                let xv = &nodes[*x].value;
                let cols = xv.cols();
                let xshape = xv.shape().to_vec();
                let r = *row;
                add_into(&mut grads[*x], &xshape, |acc| {
                    for c in 0..cols {
                        acc[r * cols + c] += g.data()[c];
                    }
                });
            }
        }
        Op::SelectElem { x, row, col } => {
            if want(*x) {
                let xv = &nodes[*x].value;
                let cols = xv.cols();
                let xshape = xv.shape().to_vec();
                let (r, c) = (*row, *col);
                let gs = g.item();
                add_into(&mut grads[*x], &xshape, |acc| {
                    acc[r * cols + c] += gs;
                });
            }
        }
        Op::SliceRows { x, start, len } => {
            if want(*x) {
                let xv = &nodes[*x].value;
                let cols = xv.cols();
                let xshape = xv.shape().to_vec();
                let (s, l) = (*start, *len);
                add_into(&mut grads[*x], &xshape, |acc| {
                    for r in 0..l {
                        for c in 0..cols {
                            acc[(s + r) * cols + c] += g.data()[r * cols + c];
                        }
                    }
                });
            }
        }
        Op::SliceCols { x, start, len } => {
            if want(*x) {
                let xv = &nodes[*x].value;
                let (rows, cols) = (xv.rows(), xv.cols());
                let xshape = xv.shape().to_vec();
                let (s, l) = (*start, *len);
                add_into(&mut grads[*x], &xshape, |acc| {
                    for r in 0..rows {
                        for c in 0..l {
                            acc[r * cols + s + c] += g.data()[r * l + c];
                        }
                    }
                });
            }
        }
        Op::ConcatRows(parts) => {
            let cols = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let rows = nodes[p].value.rows();
                if want(p) {
                    let d = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    accum(&mut grads[p], Tensor::new(nodes[p].value.shape().to_vec(), d)?);
                }
                offset += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if want(p) {
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        d[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accum(&mut grads[p], Tensor::new(nodes[p].value.shape().to_vec(), d)?);
                }
                offset += w;
            }
        }
        Op::StackRows(parts) => {
            let cols = node.value.cols();
            for (j, &p) in parts.iter().enumerate() {
                if want(p) {
                    let d = g.data()[j * cols..(j + 1) * cols].to_vec();
                    accum(&mut grads[p], Tensor::new(nodes[p].value.shape().to_vec(), d)?);
                }
            }
        }
        Op::Trace(a) => {
            if want(*a) {
                let av = &nodes[*a].value;
                let n = av.rows();
                let ashape = av.shape().to_vec();
                let gs = g.item();
                add_into(&mut grads[*a], &ashape, |acc| {
                    for i in 0..n {
                        acc[i * n + i] += gs;
                    }
                });
            }
        }
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.g
    }

    pub fn value(self) -> Tensor {
        self.g.value_of(self.id)
    }

    pub fn value_with<R>(self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.g.nodes.borrow()[self.id].value)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value_with(|t| t.shape().to_vec())
    }

    pub fn requires_grad(self) -> bool {
        self.g.rg_of(self.id)
    }

    /// Same value, no gradient path to upstream nodes.
    pub fn detach(self) -> Var<'g> {
        self.g.constant(self.value())
    }

    fn binary(
        self,
        other: Var<'g>,
        op_name: &'static str,
        make: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.g.push(value, make(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let mut v = self.value();
        for x in v.data_mut() {
            *x += c;
        }
        let rg = self.requires_grad();
        self.g.push(v, Op::AddScalar(self.id), rg)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'g> {
        let mut v = self.value();
        for x in v.data_mut() {
            *x *= c;
        }
        let rg = self.requires_grad();
        self.g.push(v, Op::MulScalar(self.id, c), rg)
    }

    /// Broadcast multiply by a one-element var (e.g. a temperature scale).
    pub fn mul_var_scalar(self, s: Var<'g>) -> Result<Var<'g>, TensorError> {
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: sv.shape().to_vec(),
            });
        }
        let c = sv.item();
        let mut v = self.value();
        for x in v.data_mut() {
            *x *= c;
        }
        let rg = self.requires_grad() || s.requires_grad();
        Ok(self.g.push(v, Op::MulVarScalar { a: self.id, s: s.id }, rg))
    }

    /// Add a length-C bias vector to every row of a matrix.
    pub fn add_rows(self, bias: Var<'g>) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let b = bias.value();
        if b.numel() != a.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.rows(), a.cols());
        let mut v = a.clone();
        for r in 0..rows {
            for c in 0..cols {
                v.data_mut()[r * cols + c] += b.data()[c];
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.g.push(v, Op::AddRows { a: self.id, bias: bias.id }, rg))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        if b.rank() != 2 || a.cols() != b.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.g.push(value, Op::Matmul(self.id, other.id), rg))
    }

    pub fn t(self) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: a.shape().to_vec(),
            });
        }
        let (m, n) = (a.rows(), a.cols());
        let value = Tensor::new(vec![n, m], transpose_raw(a.data(), m, n))?;
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::Transpose(self.id), rg))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let value = Tensor::new(shape, a.data().to_vec())?;
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::Reshape(self.id), rg))
    }

    fn check_axis(self, axis: usize) -> Result<(), TensorError> {
        if axis > 1 {
            return Err(TensorError::AxisOutOfRange { axis, rank: 2 });
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` of the matrix view
    /// (1 = within each row, 0 = within each column).
    pub fn softmax(self, axis: usize) -> Result<Var<'g>, TensorError> {
        self.check_axis(axis)?;
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let mut data = vec![0.0; x.numel()];
        let lanes = if axis == 1 { rows } else { cols };
        let lane_len = if axis == 1 { cols } else { rows };
        for l in 0..lanes {
            let idx = |i: usize| if axis == 1 { l * cols + i } else { i * cols + l };
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(x.data()[idx(i)]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (x.data()[idx(i)] - max).exp();
                data[idx(i)] = e;
                sum += e;
            }
            for i in 0..lane_len {
                data[idx(i)] /= sum;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::Softmax { x: self.id, axis }, rg))
    }

    /// log(sum(exp(x))) along `axis`; output is rank 1.
    pub fn log_sum_exp(self, axis: usize) -> Result<Var<'g>, TensorError> {
        self.check_axis(axis)?;
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let lanes = if axis == 1 { rows } else { cols };
        let lane_len = if axis == 1 { cols } else { rows };
        let mut data = vec![0.0; lanes];
        for l in 0..lanes {
            let idx = |i: usize| if axis == 1 { l * cols + i } else { i * cols + l };
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(x.data()[idx(i)]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                sum += (x.data()[idx(i)] - max).exp();
            }
            data[l] = max + sum.ln();
        }
        let value = Tensor::vector(data)?;
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::LogSumExp { x: self.id, axis }, rg))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>, TensorError> {
        let x = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let (rows, cols) = (x.rows(), x.cols());
        if gv.numel() != cols || bv.numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: gv.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (xr[c] - mean) * inv * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.g.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            rg,
        ))
    }

    pub fn gelu(self) -> Var<'g> {
        let mut v = self.value();
        for x in v.data_mut() {
            let u = GELU_K * (*x + GELU_C * *x * *x * *x);
            *x = 0.5 * *x * (1.0 + u.tanh());
        }
        let rg = self.requires_grad();
        self.g.push(v, Op::Gelu(self.id), rg)
    }

    pub fn exp(self) -> Var<'g> {
        let mut v = self.value();
        for x in v.data_mut() {
            *x = x.exp();
        }
        let rg = self.requires_grad();
        self.g.push(v, Op::Exp(self.id), rg)
    }

    /// x ln x elementwise, defined as 0 at x <= 0.
    pub fn x_ln_x(self) -> Var<'g> {
        let mut v = self.value();
        for x in v.data_mut() {
            *x = if *x > 0.0 { *x * x.ln() } else { 0.0 };
        }
        let rg = self.requires_grad();
        self.g.push(v, Op::XLnX(self.id), rg)
    }

    pub fn recip(self) -> Var<'g> {
        let mut v = self.value();
        for x in v.data_mut() {
            *x = 1.0 / *x;
        }
        let rg = self.requires_grad();
        self.g.push(v, Op::Recip(self.id), rg)
    }

    pub fn sum_all(self) -> Var<'g> {
        let v = self.value();
        let s: f64 = v.data().iter().sum();
        let rg = self.requires_grad();
        self.g.push(Tensor::scalar(s), Op::SumAll(self.id), rg)
    }

    /// Sum along `axis`; output is rank 1 (0 = column sums, 1 = row sums).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>, TensorError> {
        self.check_axis(axis)?;
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let out = if axis == 1 {
            (0..rows)
                .map(|r| x.data()[r * cols..(r + 1) * cols].iter().sum())
                .collect::<Vec<f64>>()
        } else {
            let mut acc = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    acc[c] += x.data()[r * cols + c];
                }
            }
            acc
        };
        let value = Tensor::vector(out)?;
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::SumAxis { x: self.id, axis }, rg))
    }

    /// Multiply row r by s[r].
    pub fn scale_rows(self, s: Var<'g>) -> Result<Var<'g>, TensorError> {
        let a = self.value();
        let sv = s.value();
        if sv.numel() != a.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: a.shape().to_vec(),
                right: sv.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.rows(), a.cols());
        let mut v = a.clone();
        for r in 0..rows {
            for c in 0..cols {
                v.data_mut()[r * cols + c] *= sv.data()[r];
            }
        }
        let rg = self.requires_grad() || s.requires_grad();
        Ok(self.g.push(v, Op::ScaleRows { a: self.id, s: s.id }, rg))
    }

    /// Rescale each row to unit Euclidean norm.
    pub fn l2_normalize_rows(self) -> Var<'g> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let mut v = x.clone();
        for r in 0..rows {
            let xr = &x.data()[r * cols..(r + 1) * cols];
            let n = xr.iter().map(|a| a * a).sum::<f64>().sqrt().max(NORM_FLOOR);
            for c in 0..cols {
                v.data_mut()[r * cols + c] = xr[c] / n;
            }
        }
        let rg = self.requires_grad();
        self.g.push(v, Op::NormalizeRows(self.id), rg)
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'g>, TensorError> {
        let t = self.value();
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    what: "gather_rows",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.requires_grad();
        Ok(self.g.push(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_row(self, row: usize) -> Result<Var<'g>, TensorError> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if row >= rows {
            return Err(TensorError::IndexOutOfRange {
                what: "select_row",
                index: row,
                size: rows,
            });
        }
        let value = Tensor::vector(x.data()[row * cols..(row + 1) * cols].to_vec())?;
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::SelectRow { x: self.id, row }, rg))
    }

    pub fn select_elem(self, row: usize, col: usize) -> Result<Var<'g>, TensorError> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if row >= rows || col >= cols {
            return Err(TensorError::IndexOutOfRange {
                what: "select_elem",
                index: row * cols + col,
                size: rows * cols,
            });
        }
        let value = Tensor::scalar(x.get2(row, col));
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::SelectElem { x: self.id, row, col }, rg))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g>, TensorError> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if start + len > rows || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                what: "slice_rows",
                index: start + len,
                size: rows,
            });
        }
        let value = Tensor::new(
            vec![len, cols],
            x.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::SliceRows { x: self.id, start, len }, rg))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>, TensorError> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if start + len > cols || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                what: "slice_cols",
                index: start + len,
                size: cols,
            });
        }
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let rg = self.requires_grad();
        Ok(self.g.push(value, Op::SliceCols { x: self.id, start, len }, rg))
    }

    /// Sum of the main diagonal of a square matrix.
    pub fn trace(self) -> Result<Var<'g>, TensorError> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if rows != cols {
            return Err(TensorError::ShapeMismatch {
                op: "trace",
                left: vec![rows],
                right: vec![cols],
            });
        }
        let s: f64 = (0..rows).map(|i| x.get2(i, i)).sum();
        let rg = self.requires_grad();
        Ok(self.g.push(Tensor::scalar(s), Op::Trace(self.id), rg))
    }
}

/// Evaluate `f` over leaves bound from `inputs` and return the scalar value
/// plus per-input gradients (zeros for inputs with `requires_grad == false`
/// or no gradient path).
pub fn value_and_grad<F>(inputs: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>), TensorError>
where
    F: for<'g> FnOnce(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    let root_value = root.value();
    if root_value.numel() != 1 {
        return Err(TensorError::NotScalar {
            shape: root_value.shape().to_vec(),
        });
    }
    let mut store = g.backward(root)?;
    let grads = vars.iter().map(|v| store.take_or_zeros(*v)).collect();
    Ok((root_value.item(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_root() {
        let g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let err = g.backward(a).unwrap_err();
        assert!(matches!(err, TensorError::NotScalar { .. }));
    }

    #[test]
    fn constant_subtree_gets_no_gradient() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(3.0).with_grad());
        let b = g.constant(Tensor::scalar(5.0));
        let y = a.mul(b).unwrap();
        let store = g.backward(y).unwrap();
        assert_eq!(store.get(a).unwrap().item(), 5.0);
        assert!(store.get(b).is_none());
    }

    #[test]
    fn detach_cuts_gradient_flow_but_keeps_value() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0).with_grad());
        let b = a.mul_scalar(3.0);
        let d = b.detach();
        assert_eq!(d.value().item(), 6.0);
        let y = d.mul(a).unwrap();
        let store = g.backward(y).unwrap();
        // y = detach(3a) * a, so dy/da = 6, not 12.
        assert_eq!(store.get(a).unwrap().item(), 6.0);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let g = Graph::new();
        let a = g.leaf(Tensor::scalar(4.0).with_grad());
        let y = a.mul(a).unwrap(); // a^2, dy/da = 2a = 8
        let store = g.backward(y).unwrap();
        assert_eq!(store.get(a).unwrap().item(), 8.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.0, 4.0]).unwrap());
        let y = x.softmax(1).unwrap().value();
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Stability: huge logits must not overflow.
        let big = g.constant(Tensor::matrix(1, 2, vec![1000.0, 1001.0]).unwrap());
        let yb = big.softmax(1).unwrap().value();
        assert!(yb.is_finite());
    }

    #[test]
    fn log_sum_exp_matches_direct_formula() {
        let g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap());
        let got = x.log_sum_exp(1).unwrap().value().item();
        let want = (0.1f64.exp() + 0.2f64.exp() + 0.3f64.exp()).ln();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn x_ln_x_is_zero_at_zero() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 1.0, 0.5]).unwrap().with_grad());
        let y = x.x_ln_x().sum_all();
        assert!((y.value().item() - (0.5f64 * 0.5f64.ln())).abs() < 1e-15);
        let store = g.backward(y).unwrap();
        let gx = store.get(x).unwrap();
        assert_eq!(gx.data()[0], 0.0);
        assert!((gx.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn value_and_grad_zeroes_frozen_inputs() {
        let a = Tensor::scalar(2.0).with_grad();
        let b = Tensor::scalar(3.0); // frozen
        let (v, grads) = value_and_grad(&[a, b], |_g, vars| vars[0].mul(vars[1])).unwrap();
        assert_eq!(v, 6.0);
        assert_eq!(grads[0].item(), 3.0);
        assert_eq!(grads[1].item(), 0.0);
    }

    #[test]
    fn backward_is_bitwise_reproducible() {
        use rand::{Rng, SeedableRng};
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let a = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
                .with_grad();
            let b = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
                .with_grad();
            let (v, grads) = value_and_grad(&[a, b], |_g, vars| {
                Ok(vars[0].matmul(vars[1])?.softmax(1)?.x_ln_x().sum_all().mul_scalar(-1.0))
            })
            .unwrap();
            (v, grads[0].data().to_vec(), grads[1].data().to_vec())
        };
        let (v1, ga1, gb1) = run();
        let (v2, ga2, gb2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(
            ga1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            ga2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            gb1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            gb2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
