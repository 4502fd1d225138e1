//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an append-only tape of nodes; builders return [`NodeId`]
//! handles and construction order is already topological, so backward is a
//! single reverse sweep. Parameter leaves are tagged with a name and their
//! gradients are collected by name after backward.
//!
//! The row-level arithmetic lives in [`kernels`] and is shared with the
//! gradient-free decoding path, so a value computed on the tape is bit
//! identical to the same value computed without it.

use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor shape mismatch");
        Tensor { data, rows, cols }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-decomposable arithmetic shared by the tape and the no-grad decoder.
pub mod kernels {
    pub const LN_EPS: f64 = 1e-5;

    /// `out += a_row * B` for one row; accumulation over k is ascending so the
    /// result is independent of how rows are batched.
    #[inline]
    pub fn row_times_matrix(a_row: &[f64], b: &[f64], b_cols: usize, out: &mut [f64]) {
        debug_assert_eq!(a_row.len() * b_cols, b.len());
        debug_assert_eq!(out.len(), b_cols);
        for (k, &a) in a_row.iter().enumerate() {
            let b_row = &b[k * b_cols..(k + 1) * b_cols];
            for (o, &bv) in out.iter_mut().zip(b_row) {
                *o += a * bv;
            }
        }
    }

    /// Plain dot product, ascending index order.
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    /// Layer norm over one row: `out = gain * (x - mu) / sigma + bias`.
    #[inline]
    pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        let mut mu = 0.0;
        for &v in x {
            mu += v;
        }
        mu /= d;
        let mut var = 0.0;
        for &v in x {
            let c = v - mu;
            var += c * c;
        }
        var /= d;
        let sigma = (var + LN_EPS).sqrt();
        for ((o, &v), (&g, &b)) in out.iter_mut().zip(x).zip(gain.iter().zip(bias)) {
            *o = g * ((v - mu) / sigma) + b;
        }
    }

    /// Softmax with max-subtraction over `row[..allowed]`; entries at and
    /// beyond `allowed` are set to zero.
    #[inline]
    pub fn softmax_row(row: &[f64], allowed: usize, out: &mut [f64]) {
        debug_assert!(allowed >= 1 && allowed <= row.len());
        let mut max = f64::NEG_INFINITY;
        for &v in &row[..allowed] {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (o, &v) in out[..allowed].iter_mut().zip(&row[..allowed]) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in &mut out[..allowed] {
            *o /= sum;
        }
        for o in &mut out[allowed..] {
            *o = 0.0;
        }
    }

    /// Log-softmax with max-subtraction over the full row.
    #[inline]
    pub fn log_softmax_row(row: &[f64], out: &mut [f64]) {
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    GatherRows { src: NodeId, ids: Vec<usize> },
    Add(NodeId, NodeId),
    AddRowBroadcast { x: NodeId, row: NodeId },
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Affine { x: NodeId, mul: f64 },
    Relu(NodeId),
    SoftmaxRows { x: NodeId, allowed: Option<Vec<usize>> },
    LogSoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    PickPerRow { x: NodeId, ids: Vec<usize> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    ConcatScalars(Vec<NodeId>),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumRange { x: NodeId, start: usize, len: usize },
    DotConst { x: NodeId, w: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_names: Vec<String>,
    retained_scalars: u64,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Number of value scalars retained by non-parameter nodes.
    pub fn retained_scalars(&self) -> u64 {
        self.retained_scalars
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        if !matches!(op, Op::Param(_)) {
            self.retained_scalars += value.len() as u64;
        }
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, name: &str, t: Tensor) -> NodeId {
        self.param_names.push(name.to_string());
        let idx = self.param_names.len() - 1;
        self.push(t, Op::Param(idx))
    }

    pub fn gather_rows(&mut self, src: NodeId, ids: Vec<usize>) -> NodeId {
        let s = self.value(src);
        let cols = s.cols;
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.value(src).row(id));
        }
        self.push(out, Op::GatherRows { src, ids })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape mismatch");
        let mut out = ta.clone();
        for (o, &v) in out.data.iter_mut().zip(&tb.data) {
            *o += v;
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let (tx, tr) = (self.value(x), self.value(row));
        assert_eq!(tr.rows, 1, "broadcast row must be 1 x d");
        assert_eq!(tx.cols, tr.cols, "broadcast width mismatch");
        let mut out = tx.clone();
        for r in 0..out.rows {
            for (o, &v) in out.row_mut(r).iter_mut().zip(&self.nodes[row].value.data) {
                *o += v;
            }
        }
        self.push(out, Op::AddRowBroadcast { x, row })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.rows, "matmul inner dim mismatch");
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        for r in 0..ta.rows {
            kernels::row_times_matrix(
                self.nodes[a].value.row(r),
                &self.nodes[b].value.data,
                self.nodes[b].value.cols,
                out.row_mut(r),
            );
        }
        self.push(out, Op::MatMul(a, b))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols, "matmul_nt inner dim mismatch");
        let mut out = Tensor::zeros(ta.rows, tb.rows);
        for r in 0..ta.rows {
            for c in 0..tb.rows {
                out.data[r * tb.rows + c] =
                    kernels::dot(self.nodes[a].value.row(r), self.nodes[b].value.row(c));
            }
        }
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for o in &mut out.data {
            *o = mul * *o + add;
        }
        self.push(out, Op::Affine { x, mul })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in &mut out.data {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    /// Row softmax; `allowed[r]` restricts row `r` to its first entries
    /// (causal masking), `None` means every entry participates.
    pub fn softmax_rows(&mut self, x: NodeId, allowed: Option<Vec<usize>>) -> NodeId {
        let t = self.value(x);
        if let Some(a) = &allowed {
            assert_eq!(a.len(), t.rows, "mask length mismatch");
        }
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let n = allowed.as_ref().map_or(t.cols, |a| a[r]);
            kernels::softmax_row(self.nodes[x].value.row(r), n, out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows { x, allowed })
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            kernels::log_softmax_row(self.nodes[x].value.row(r), out.row_mut(r));
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let t = self.value(x);
        assert_eq!(self.value(gain).cols, t.cols);
        assert_eq!(self.value(bias).cols, t.cols);
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            kernels::layer_norm_row(
                self.nodes[x].value.row(r),
                self.nodes[gain].value.row(0),
                self.nodes[bias].value.row(0),
                out.row_mut(r),
            );
        }
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    /// `out[r, 0] = x[r, ids[r]]`.
    pub fn pick_per_row(&mut self, x: NodeId, ids: Vec<usize>) -> NodeId {
        let t = self.value(x);
        assert_eq!(ids.len(), t.rows, "pick ids length mismatch");
        let mut out = Tensor::zeros(t.rows, 1);
        for (r, &c) in ids.iter().enumerate() {
            out.data[r] = t.at(r, c);
        }
        self.push(out, Op::PickPerRow { x, ids })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(x);
        assert!(start + len <= t.rows, "row slice out of range");
        let cols = t.cols;
        let data = t.data[start * cols..(start + len) * cols].to_vec();
        self.push(Tensor::from_vec(len, cols, data), Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(x);
        assert!(start + len <= t.cols, "col slice out of range");
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start, len })
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut r = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows width mismatch");
            out.data[r * cols..(r + t.rows) * cols].copy_from_slice(&t.data);
            r += t.rows;
        }
        self.push(out, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.data[r * cols + c0..r * cols + c0 + t.cols].copy_from_slice(t.row(r));
            }
            c0 += t.cols;
        }
        self.push(out, Op::ConcatCols(parts))
    }

    /// Stacks scalar nodes into a `[1, m]` vector.
    pub fn concat_scalars(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let data: Vec<f64> = parts.iter().map(|&p| self.value(p).item()).collect();
        let m = data.len();
        self.push(Tensor::from_vec(1, m, data), Op::ConcatScalars(parts))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0;
        for &v in &self.value(x).data {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let mut acc = 0.0;
        for &v in &self.value(x).data {
            acc += v;
        }
        self.push(Tensor::scalar(acc / n), Op::MeanAll(x))
    }

    /// Sum of rows `start..start+len` of a `[n, 1]` column vector.
    pub fn sum_range(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.cols, 1, "sum_range expects a column vector");
        assert!(start + len <= t.rows);
        let mut acc = 0.0;
        for &v in &t.data[start..start + len] {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumRange { x, start, len })
    }

    /// Dot product with a constant weight vector.
    pub fn dot_const(&mut self, x: NodeId, w: Vec<f64>) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.len(), w.len(), "dot_const length mismatch");
        let acc = kernels::dot(&t.data, &w);
        self.push(Tensor::scalar(acc), Op::DotConst { x, w })
    }

    /// Reverse sweep from a scalar loss; returns parameter gradients by name.
    /// Gradients of shared parameter nodes accumulate across uses.
    pub fn backward(&self, loss: NodeId) -> BTreeMap<String, Tensor> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Param(_)) {
                grads[id] = Some(g); // keep for collection
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name_idx) = node.op {
                if let Some(g) = grads[id].take() {
                    let name = self.param_names[name_idx].clone();
                    match out.entry(name) {
                        std::collections::btree_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                        std::collections::btree_map::Entry::Occupied(mut e) => {
                            let t: &mut Tensor = e.get_mut();
                            for (o, &v) in t.data.iter_mut().zip(&g.data) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn add_into(grads: &mut [Option<Tensor>], id: NodeId, rows: usize, cols: usize) -> &mut Tensor {
        grads[id].get_or_insert_with(|| Tensor::zeros(rows, cols))
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape = |n: NodeId| (self.nodes[n].value.rows, self.nodes[n].value.cols);
        match &self.nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::GatherRows { src, ids } => {
                let (r, c) = shape(*src);
                let gs = Self::add_into(grads, *src, r, c);
                for (row, &src_row) in ids.iter().enumerate() {
                    for (o, &v) in gs.row_mut(src_row).iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
            }
            Op::Add(a, b) => {
                for &n in [a, b].into_iter() {
                    let (r, c) = shape(n);
                    let gn = Self::add_into(grads, n, r, c);
                    for (o, &v) in gn.data.iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
            }
            Op::AddRowBroadcast { x, row } => {
                let (r, c) = shape(*x);
                {
                    let gx = Self::add_into(grads, *x, r, c);
                    for (o, &v) in gx.data.iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
                let (rr, rc) = shape(*row);
                let gr = Self::add_into(grads, *row, rr, rc);
                for row_i in 0..g.rows {
                    for (o, &v) in gr.data.iter_mut().zip(g.row(row_i)) {
                        *o += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                // dA += g @ B^T ; dB += A^T @ g
                let vb = &self.nodes[*b].value;
                let va = &self.nodes[*a].value;
                {
                    let (r, c) = shape(*a);
                    let ga = Self::add_into(grads, *a, r, c);
                    for i in 0..g.rows {
                        for j in 0..vb.rows {
                            ga.data[i * c + j] += kernels::dot(g.row(i), vb.row(j));
                        }
                    }
                }
                {
                    let (r, c) = shape(*b);
                    let gb = Self::add_into(grads, *b, r, c);
                    for k in 0..va.rows {
                        let a_row = va.row(k);
                        let g_row = g.row(k);
                        for (i, &av) in a_row.iter().enumerate() {
                            for (o, &gv) in gb.row_mut(i).iter_mut().zip(g_row) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::MatMulNT(a, b) => {
                // y = A @ B^T : dA += g @ B ; dB += g^T @ A
                let vb = &self.nodes[*b].value;
                let va = &self.nodes[*a].value;
                {
                    let (r, c) = shape(*a);
                    let ga = Self::add_into(grads, *a, r, c);
                    for i in 0..g.rows {
                        kernels::row_times_matrix(g.row(i), &vb.data, vb.cols, {
                            let row = ga.row_mut(i);
                            row
                        });
                    }
                }
                {
                    let (r, c) = shape(*b);
                    let gb = Self::add_into(grads, *b, r, c);
                    for i in 0..g.rows {
                        let g_row = g.row(i);
                        let a_row = va.row(i);
                        for (j, &gv) in g_row.iter().enumerate() {
                            for (o, &av) in gb.row_mut(j).iter_mut().zip(a_row) {
                                *o += gv * av;
                            }
                        }
                    }
                }
            }
            Op::Affine { x, mul } => {
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for (o, &v) in gx.data.iter_mut().zip(&g.data) {
                    *o += mul * v;
                }
            }
            Op::Relu(x) => {
                let vx = &self.nodes[*x].value;
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for ((o, &v), &xin) in gx.data.iter_mut().zip(&g.data).zip(&vx.data) {
                    if xin > 0.0 {
                        *o += v;
                    }
                }
            }
            Op::SoftmaxRows { x, allowed } => {
                let s = &self.nodes[id].value;
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for row in 0..s.rows {
                    let n = allowed.as_ref().map_or(s.cols, |a| a[row]);
                    let s_row = &s.row(row)[..n];
                    let g_row = &g.row(row)[..n];
                    let inner = kernels::dot(g_row, s_row);
                    for ((o, &sv), &gv) in
                        gx.row_mut(row)[..n].iter_mut().zip(s_row).zip(g_row)
                    {
                        *o += sv * (gv - inner);
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let out = &self.nodes[id].value;
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for row in 0..out.rows {
                    let mut gsum = 0.0;
                    for &v in g.row(row) {
                        gsum += v;
                    }
                    for ((o, &gv), &lv) in
                        gx.row_mut(row).iter_mut().zip(g.row(row)).zip(out.row(row))
                    {
                        *o += gv - lv.exp() * gsum;
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gain].value;
                let d = vx.cols;
                let df = d as f64;
                // recompute per-row statistics
                let mut gx_buf = Tensor::zeros(vx.rows, d);
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for row in 0..vx.rows {
                    let xr = vx.row(row);
                    let gr = g.row(row);
                    let mut mu = 0.0;
                    for &v in xr {
                        mu += v;
                    }
                    mu /= df;
                    let mut var = 0.0;
                    for &v in xr {
                        let c = v - mu;
                        var += c * c;
                    }
                    var /= df;
                    let sigma = (var + kernels::LN_EPS).sqrt();
                    // dh = g * gain; gx = (dh - mean(dh) - xhat*mean(dh*xhat)) / sigma
                    let mut mean_dh = 0.0;
                    let mut mean_dh_xhat = 0.0;
                    for i in 0..d {
                        let xhat = (xr[i] - mu) / sigma;
                        let dh = gr[i] * vg.data[i];
                        mean_dh += dh;
                        mean_dh_xhat += dh * xhat;
                        ggain[i] += gr[i] * xhat;
                        gbias[i] += gr[i];
                    }
                    mean_dh /= df;
                    mean_dh_xhat /= df;
                    for i in 0..d {
                        let xhat = (xr[i] - mu) / sigma;
                        let dh = gr[i] * vg.data[i];
                        gx_buf.row_mut(row)[i] = (dh - mean_dh - xhat * mean_dh_xhat) / sigma;
                    }
                }
                {
                    let (r, c) = shape(*x);
                    let gx = Self::add_into(grads, *x, r, c);
                    for (o, &v) in gx.data.iter_mut().zip(&gx_buf.data) {
                        *o += v;
                    }
                }
                {
                    let gg = Self::add_into(grads, *gain, 1, d);
                    for (o, &v) in gg.data.iter_mut().zip(&ggain) {
                        *o += v;
                    }
                }
                {
                    let gb = Self::add_into(grads, *bias, 1, d);
                    for (o, &v) in gb.data.iter_mut().zip(&gbias) {
                        *o += v;
                    }
                }
            }
            Op::PickPerRow { x, ids } => {
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for (row, &col) in ids.iter().enumerate() {
                    gx.data[row * c + col] += g.data[row];
                }
            }
            Op::SliceRows { x, start, len } => {
                debug_assert_eq!(g.rows, *len);
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for row in 0..g.rows {
                    for (o, &v) in gx.row_mut(start + row).iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for row in 0..g.rows {
                    for i in 0..*len {
                        gx.data[row * c + start + i] += g.at(row, i);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let (r, c) = shape(p);
                    {
                        let gp = Self::add_into(grads, p, r, c);
                        for row in 0..r {
                            for (o, &v) in gp.row_mut(row).iter_mut().zip(g.row(r0 + row)) {
                                *o += v;
                            }
                        }
                    }
                    r0 += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let (r, c) = shape(p);
                    {
                        let gp = Self::add_into(grads, p, r, c);
                        for row in 0..r {
                            for i in 0..c {
                                gp.data[row * c + i] += g.at(row, c0 + i);
                            }
                        }
                    }
                    c0 += c;
                }
            }
            Op::ConcatScalars(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    let gp = Self::add_into(grads, p, 1, 1);
                    gp.data[0] += g.data[i];
                }
            }
            Op::SumAll(x) => {
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for o in &mut gx.data {
                    *o += g.data[0];
                }
            }
            Op::MeanAll(x) => {
                let (r, c) = shape(*x);
                let scale = 1.0 / (r * c) as f64;
                let gx = Self::add_into(grads, *x, r, c);
                for o in &mut gx.data {
                    *o += g.data[0] * scale;
                }
            }
            Op::SumRange { x, start, len } => {
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for o in &mut gx.data[*start..start + len] {
                    *o += g.data[0];
                }
            }
            Op::DotConst { x, w } => {
                let (r, c) = shape(*x);
                let gx = Self::add_into(grads, *x, r, c);
                for (o, &wv) in gx.data.iter_mut().zip(w) {
                    *o += g.data[0] * wv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Finite-difference check of parameter gradients for an arbitrary
    /// scalar-valued graph builder.
    fn fd_check<F>(build: F, params: &[(&str, Tensor)], tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let eval = |overrides: &[(usize, usize, f64)]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params
                .iter()
                .enumerate()
                .map(|(pi, (name, t))| {
                    let mut t = t.clone();
                    for &(opi, oidx, ov) in overrides {
                        if opi == pi {
                            t.data[oidx] = ov;
                        }
                    }
                    g.param(name, t)
                })
                .collect();
            let loss = build(&mut g, &ids);
            g.value(loss).item()
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = params
            .iter()
            .map(|(name, t)| g.param(name, t.clone()))
            .collect();
        let loss = build(&mut g, &ids);
        let grads = g.backward(loss);
        drop(ids);

        let h = 1e-5;
        for (pi, (name, t)) in params.iter().enumerate() {
            let grad = grads
                .get(*name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
            for idx in 0..t.len() {
                let x0 = t.data[idx];
                let up = eval(&[(pi, idx, x0 + h)]);
                let dn = eval(&[(pi, idx, x0 - h)]);
                let fd = (up - dn) / (2.0 * h);
                let an = grad.data[idx];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "param {name}[{idx}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn matmul_chain_gradients_match_fd() {
        let mut rng = crate::config::RunSeed::new(3).rng();
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        fd_check(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1]);
                let r = g.relu(y);
                g.sum_all(r)
            },
            &[("a", a), ("b", b)],
            1e-6,
        );
    }

    #[test]
    fn matmul_nt_and_slices_match_fd() {
        let mut rng = crate::config::RunSeed::new(4).rng();
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 5, 4);
        fd_check(
            |g, ids| {
                let y = g.matmul_nt(ids[0], ids[1]); // [3,5]
                let s = g.slice_cols(y, 1, 3);
                let s = g.slice_rows(s, 0, 2);
                g.mean_all(s)
            },
            &[("a", a), ("b", b)],
            1e-6,
        );
    }

    #[test]
    fn softmax_masked_gradients_match_fd() {
        let mut rng = crate::config::RunSeed::new(5).rng();
        let x = rand_tensor(&mut rng, 3, 3);
        fd_check(
            |g, ids| {
                let s = g.softmax_rows(ids[0], Some(vec![1, 2, 3]));
                let p = g.pick_per_row(s, vec![0, 1, 2]);
                g.sum_all(p)
            },
            &[("x", x)],
            1e-6,
        );
    }

    #[test]
    fn log_softmax_layernorm_gather_match_fd() {
        let mut rng = crate::config::RunSeed::new(6).rng();
        let emb = rand_tensor(&mut rng, 5, 4);
        let gain = rand_tensor(&mut rng, 1, 4);
        let bias = rand_tensor(&mut rng, 1, 4);
        fd_check(
            |g, ids| {
                let rows = g.gather_rows(ids[0], vec![1, 3, 1]);
                let ln = g.layer_norm(rows, ids[1], ids[2]);
                let logits = g.matmul_nt(ln, ids[0]); // tied projection
                let lp = g.log_softmax_rows(logits);
                let picked = g.pick_per_row(lp, vec![0, 2, 4]);
                g.sum_range(picked, 0, 3)
            },
            &[("emb", emb), ("gain", gain), ("bias", bias)],
            1e-5,
        );
    }

    #[test]
    fn concat_and_broadcast_match_fd() {
        let mut rng = crate::config::RunSeed::new(7).rng();
        let a = rand_tensor(&mut rng, 2, 3);
        let b = rand_tensor(&mut rng, 1, 3);
        let c = rand_tensor(&mut rng, 2, 2);
        fd_check(
            |g, ids| {
                let x = g.add_row_broadcast(ids[0], ids[1]);
                let y = g.concat_cols(vec![x, ids[2]]); // [2,5]
                let z = g.concat_rows(vec![y, y]);
                let s0 = g.sum_all(z);
                let s1 = g.mean_all(ids[2]);
                let v = g.concat_scalars(vec![s0, s1]);
                g.dot_const(v, vec![0.3, -1.7])
            },
            &[("a", a), ("b", b), ("c", c)],
            1e-6,
        );
    }

    #[test]
    fn shared_param_gradients_accumulate() {
        // f(w) = sum(w@w^T): uses the same param twice.
        let w = Tensor::from_vec(2, 2, vec![0.5, -0.3, 0.2, 0.9]);
        fd_check(
            |g, ids| {
                let y = g.matmul_nt(ids[0], ids[0]);
                g.sum_all(y)
            },
            &[("w", w)],
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_mask_zeroes_tail() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(2, 4, vec![0.1, 2.0, -1.0, 0.5, 3.0, 3.0, 3.0, 3.0]));
        let s = g.softmax_rows(x, Some(vec![2, 4]));
        let v = g.value(s);
        assert!((v.row(0)[..2].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(&v.row(0)[2..], &[0.0, 0.0]);
        assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_unit_mass() {
        let mut rng = crate::config::RunSeed::new(12).rng();
        let mut g = Graph::new();
        let x = g.leaf(rand_tensor(&mut rng, 6, 9));
        let lp = g.log_softmax_rows(x);
        let v = g.value(lp);
        for r in 0..v.rows {
            let sum: f64 = v.row(r).iter().map(|&l| l.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r}: {sum}");
        }
    }

    #[test]
    fn retained_scalars_counts_non_param_nodes() {
        let mut g = Graph::new();
        let p = g.param("w", Tensor::zeros(2, 2));
        assert_eq!(g.retained_scalars(), 0);
        let l = g.leaf(Tensor::zeros(3, 1));
        let _ = g.matmul_nt(l, l);
        let _ = p;
        assert_eq!(g.retained_scalars(), 3 + 9);
    }
}
