//! Minimal reverse-mode autodiff over `Array2<f64>` values.
//!
//! A [`Tape`] records every operation of a forward pass as a node; calling
//! [`Tape::backward`] on a scalar (1x1) node walks the recording in reverse
//! and accumulates gradients for every node, including the parameter leaves.
//! Sequences are represented as one node per time step (batch x features),
//! which keeps every op a plain 2-D kernel; 1-D convolutions carry their own
//! channel-major layout inside a single node.
//!
//! The op set is exactly what the backbone and the stage losses need; there
//! is no broadcasting machinery beyond row-bias addition.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (n,m) plus a (1,m) bias row broadcast over rows.
    AddRow(NodeId, NodeId),
    /// a*ca + b*cb with constant coefficients (mixup).
    Lincomb(NodeId, NodeId, f64, f64),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Columns [start, end).
    SliceCols(NodeId, usize, usize),
    ConcatCols(NodeId, NodeId),
    /// out[i, :] = in[idx[i], :]
    GatherRows(NodeId, Vec<usize>),
    /// out[:, j] = in[:, map[j]] (column duplication / upsampling)
    GatherCols(NodeId, Vec<usize>),
    /// Elementwise product with a constant (dropout masks, loss masks).
    MulConst(NodeId, Array2<f64>),
    SubConst(NodeId),
    Sqr(NodeId),
    /// Sum of all entries -> 1x1.
    SumAll(NodeId),
    /// Row-wise log-softmax.
    LogSoftmax(NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        c_in: usize,
        l_in: usize,
        kernel: usize,
        stride: usize,
    },
    /// (batch, c*l) channel-major -> (batch*l, c); position-major rows.
    SeqToRows(NodeId, usize, usize),
    /// Inverse of `SeqToRows`: (batch*l, c) -> (batch, c*l).
    RowsToSeq(NodeId, usize, usize),
    /// Pure reshape (batch*l, m) -> (batch, l*m); row-major flatten.
    MergeRows(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node; zeros if the node does not
    /// influence the loss.
    pub fn get(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Add a (1, m) bias row to every row of a (n, m) node.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = self.value(a) + &self.value(bias).row(0);
        self.push(v, Op::AddRow(a, bias))
    }

    /// `ca * a + cb * b`; the convex-combination primitive behind mixup.
    pub fn lincomb(&mut self, a: NodeId, b: NodeId, ca: f64, cb: f64) -> NodeId {
        let v = self.value(a) * ca + self.value(b) * cb;
        self.push(v, Op::Lincomb(a, b, ca, cb))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.value(a);
        let vb = self.value(b);
        let v = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Array2::zeros((idx.len(), va.ncols()));
        for (i, &j) in idx.iter().enumerate() {
            v.row_mut(i).assign(&va.row(j));
        }
        self.push(v, Op::GatherRows(a, idx))
    }

    pub fn gather_cols(&mut self, a: NodeId, map: Vec<usize>) -> NodeId {
        let va = self.value(a);
        let mut v = Array2::zeros((va.nrows(), map.len()));
        for (j, &m) in map.iter().enumerate() {
            v.column_mut(j).assign(&va.column(m));
        }
        self.push(v, Op::GatherCols(a, map))
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn sub_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = self.value(a) - &c;
        self.push(v, Op::SubConst(a))
    }

    pub fn sqr(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Sqr(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    /// Mean over all entries -> 1x1 scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for mut row in v.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| x - mx);
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmax(a))
    }

    /// Valid (no-padding) strided 1-D convolution over a channel-major
    /// sequence node.
    ///
    /// `x`: (batch, c_in * l_in) with per-sample layout `[channel][time]`;
    /// `w`: (c_in * kernel, c_out); `b`: (1, c_out).
    /// Output: (batch, c_out * l_out) with l_out = (l_in - kernel)/stride + 1.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        c_in: usize,
        l_in: usize,
        kernel: usize,
        stride: usize,
    ) -> NodeId {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let batch = vx.nrows();
        assert_eq!(vx.ncols(), c_in * l_in, "conv1d: input layout mismatch");
        assert_eq!(vw.nrows(), c_in * kernel, "conv1d: weight layout mismatch");
        let c_out = vw.ncols();
        let l_out = conv_out_len(l_in, kernel, stride);
        let col = im2col(vx, c_in, l_in, kernel, stride, l_out);
        let y2 = col.dot(vw); // (batch*l_out, c_out)
        let mut out = Array2::zeros((batch, c_out * l_out));
        for bi in 0..batch {
            for p in 0..l_out {
                for co in 0..c_out {
                    out[(bi, co * l_out + p)] = y2[(bi * l_out + p, co)] + vb[(0, co)];
                }
            }
        }
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                c_in,
                l_in,
                kernel,
                stride,
            },
        )
    }

    /// Unpack a channel-major sequence node (batch, c*l) into position-major
    /// rows (batch*l, c), so one matmul applies a shared per-position linear
    /// map.
    pub fn seq_to_rows(&mut self, a: NodeId, c: usize, l: usize) -> NodeId {
        let va = self.value(a);
        let batch = va.nrows();
        assert_eq!(va.ncols(), c * l, "seq_to_rows: layout mismatch");
        let mut v = Array2::zeros((batch * l, c));
        for bi in 0..batch {
            for p in 0..l {
                for ch in 0..c {
                    v[(bi * l + p, ch)] = va[(bi, ch * l + p)];
                }
            }
        }
        self.push(v, Op::SeqToRows(a, c, l))
    }

    /// Pack position-major rows (batch*l, c) back into a channel-major
    /// sequence node (batch, c*l).
    pub fn rows_to_seq(&mut self, a: NodeId, c: usize, l: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.ncols(), c, "rows_to_seq: column mismatch");
        assert_eq!(va.nrows() % l, 0, "rows_to_seq: row count not divisible");
        let batch = va.nrows() / l;
        let mut v = Array2::zeros((batch, c * l));
        for bi in 0..batch {
            for p in 0..l {
                for ch in 0..c {
                    v[(bi, ch * l + p)] = va[(bi * l + p, ch)];
                }
            }
        }
        self.push(v, Op::RowsToSeq(a, c, l))
    }

    /// Row-major reshape (batch*l, m) -> (batch, l*m); groups of `l`
    /// consecutive rows become one row.
    pub fn merge_rows(&mut self, a: NodeId, l: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.nrows() % l, 0, "merge_rows: row count not divisible");
        let batch = va.nrows() / l;
        let m = va.ncols();
        let flat: Vec<f64> = va.iter().cloned().collect();
        let v = Array2::from_shape_vec((batch, l * m), flat).expect("merge_rows reshape");
        self.push(v, Op::MergeRows(a))
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be 1x1, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            // Restore unless this is a leaf consumer; grads of interior nodes
            // are still useful to callers (e.g. inputs).
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>| {
            match &mut grads[id.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(g);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * self.value(*b));
                add_to(grads, *b, g * self.value(*a));
            }
            Op::AddRow(a, bias) => {
                add_to(grads, *a, g.clone());
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *bias, db);
            }
            Op::Lincomb(a, b, ca, cb) => {
                add_to(grads, *a, g * *ca);
                add_to(grads, *b, g * *cb);
            }
            Op::Scale(a, c) => add_to(grads, *a, g * *c),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g * &(y * &(1.0 - y)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                add_to(grads, *a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::SliceCols(a, start, end) => {
                let va = self.value(*a);
                let mut da = Array2::zeros(va.dim());
                da.slice_mut(s![.., *start..*end]).assign(g);
                add_to(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(*a).ncols();
                let da = g.slice(s![.., ..na]).to_owned();
                let db = g.slice(s![.., na..]).to_owned();
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::GatherRows(a, idx) => {
                let va = self.value(*a);
                let mut da = Array2::zeros(va.dim());
                for (r, &j) in idx.iter().enumerate() {
                    let mut row = da.row_mut(j);
                    row += &g.row(r);
                }
                add_to(grads, *a, da);
            }
            Op::GatherCols(a, map) => {
                let va = self.value(*a);
                let mut da = Array2::zeros(va.dim());
                for (j, &m) in map.iter().enumerate() {
                    let mut col = da.column_mut(m);
                    col += &g.column(j);
                }
                add_to(grads, *a, da);
            }
            Op::MulConst(a, c) => add_to(grads, *a, g * c),
            Op::SubConst(a) => add_to(grads, *a, g.clone()),
            Op::Sqr(a) => {
                let x = self.value(*a);
                add_to(grads, *a, g * &(x * 2.0));
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(self.value(*a).dim(), g[(0, 0)]);
                add_to(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value; // log-probs
                let sm = y.mapv(f64::exp);
                let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let da = g - &(&sm * &row_sums);
                add_to(grads, *a, da);
            }
            Op::Conv1d {
                x,
                w,
                b,
                c_in,
                l_in,
                kernel,
                stride,
            } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let batch = vx.nrows();
                let c_out = vw.ncols();
                let l_out = conv_out_len(*l_in, *kernel, *stride);
                // Rearrange incoming grad to (batch*l_out, c_out).
                let mut g2 = Array2::zeros((batch * l_out, c_out));
                for bi in 0..batch {
                    for p in 0..l_out {
                        for co in 0..c_out {
                            g2[(bi * l_out + p, co)] = g[(bi, co * l_out + p)];
                        }
                    }
                }
                let col = im2col(vx, *c_in, *l_in, *kernel, *stride, l_out);
                let dw = col.t().dot(&g2);
                let db = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dcol = g2.dot(&vw.t()); // (batch*l_out, c_in*kernel)
                let mut dx = Array2::zeros(vx.dim());
                for bi in 0..batch {
                    for p in 0..l_out {
                        for c in 0..*c_in {
                            for k in 0..*kernel {
                                dx[(bi, c * l_in + p * stride + k)] +=
                                    dcol[(bi * l_out + p, c * kernel + k)];
                            }
                        }
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *w, dw);
                add_to(grads, *b, db);
            }
            Op::SeqToRows(a, c, l) => {
                let batch = self.value(*a).nrows();
                let mut da = Array2::zeros((batch, c * l));
                for bi in 0..batch {
                    for p in 0..*l {
                        for ch in 0..*c {
                            da[(bi, ch * l + p)] = g[(bi * l + p, ch)];
                        }
                    }
                }
                add_to(grads, *a, da);
            }
            Op::MergeRows(a) => {
                let dim = self.value(*a).dim();
                let flat: Vec<f64> = g.iter().cloned().collect();
                let da = Array2::from_shape_vec(dim, flat).expect("merge_rows grad reshape");
                add_to(grads, *a, da);
            }
            Op::RowsToSeq(a, c, l) => {
                let rows = self.value(*a).nrows();
                let batch = rows / l;
                let mut da = Array2::zeros((rows, *c));
                for bi in 0..batch {
                    for p in 0..*l {
                        for ch in 0..*c {
                            da[(bi * l + p, ch)] = g[(bi, ch * l + p)];
                        }
                    }
                }
                add_to(grads, *a, da);
            }
        }
    }
}

/// Output length of a valid strided 1-D convolution.
pub fn conv_out_len(l_in: usize, kernel: usize, stride: usize) -> usize {
    assert!(l_in >= kernel, "conv1d: input shorter than kernel");
    (l_in - kernel) / stride + 1
}

fn im2col(
    x: &Array2<f64>,
    c_in: usize,
    l_in: usize,
    kernel: usize,
    stride: usize,
    l_out: usize,
) -> Array2<f64> {
    let batch = x.nrows();
    let mut col = Array2::zeros((batch * l_out, c_in * kernel));
    for bi in 0..batch {
        for p in 0..l_out {
            for c in 0..c_in {
                for k in 0..kernel {
                    col[(bi * l_out + p, c * kernel + k)] = x[(bi, c * l_in + p * stride + k)];
                }
            }
        }
    }
    col
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Finite-difference check of d(loss)/d(leaf) for a scalar-valued graph.
    fn fd_check<F>(leaves: Vec<Array2<f64>>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(ids[li], leaf.dim());
            for r in 0..leaf.nrows() {
                for c in 0..leaf.ncols() {
                    let mut plus = leaves.clone();
                    plus[li][(r, c)] += eps;
                    let mut minus = leaves.clone();
                    minus[li][(r, c)] -= eps;
                    let f = |ls: &[Array2<f64>]| {
                        let mut t = Tape::new();
                        let ids: Vec<NodeId> = ls.iter().map(|l| t.leaf(l.clone())).collect();
                        let out = build(&mut t, &ids);
                        t.scalar(out)
                    };
                    let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
                    let a = analytic[(r, c)];
                    let denom = a.abs().max(numeric.abs()).max(1.0);
                    assert!(
                        (a - numeric).abs() / denom < tol,
                        "leaf {li} ({r},{c}): analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        fd_check(
            vec![a, b],
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]);
                let s = t.sigmoid(m);
                let q = t.sqr(s);
                t.mean_all(q)
            },
            1e-6,
        );
    }

    #[test]
    fn lstm_style_cell_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 2, 3);
        let wx = randn(&mut rng, 3, 8);
        let wh = randn(&mut rng, 2, 8);
        let h0 = randn(&mut rng, 2, 2);
        let bias = randn(&mut rng, 1, 8);
        fd_check(
            vec![x, wx, wh, h0, bias],
            |t, ids| {
                let gx = t.matmul(ids[0], ids[1]);
                let gh = t.matmul(ids[3], ids[2]);
                let pre0 = t.add(gx, gh);
                let pre = t.add_row(pre0, ids[4]);
                let i = t.slice_cols(pre, 0, 2);
                let f = t.slice_cols(pre, 2, 4);
                let g = t.slice_cols(pre, 4, 6);
                let o = t.slice_cols(pre, 6, 8);
                let i = t.sigmoid(i);
                let f = t.sigmoid(f);
                let g = t.tanh(g);
                let o = t.sigmoid(o);
                let c = t.mul(i, g);
                let fc = t.mul(f, c);
                let ct = t.tanh(fc);
                let h = t.mul(o, ct);
                let q = t.sqr(h);
                t.mean_all(q)
            },
            1e-5,
        );
    }

    #[test]
    fn gather_concat_logsoftmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 4, 3);
        let b = randn(&mut rng, 4, 2);
        let target = randn(&mut rng, 3, 5).mapv(f64::abs);
        fd_check(
            vec![a, b],
            |t, ids| {
                let cat = t.concat_cols(ids[0], ids[1]);
                let g = t.gather_rows(cat, vec![2, 0, 3]);
                let ls = t.log_softmax(g);
                let w = t.mul_const(ls, target.clone());
                let s = t.sum_all(w);
                t.scale(s, -1.0 / 3.0)
            },
            1e-6,
        );
    }

    #[test]
    fn lincomb_relu_gather_cols_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 3, 4);
        fd_check(
            vec![a, b],
            |t, ids| {
                let mix = t.lincomb(ids[0], ids[1], 0.3, 0.7);
                let r = t.relu(mix);
                let up = t.gather_cols(r, vec![0, 0, 1, 1, 2, 2, 3, 3]);
                let q = t.sqr(up);
                t.mean_all(q)
            },
            1e-6,
        );
    }

    #[test]
    fn conv1d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c_in = 2;
        let l_in = 9;
        let kernel = 3;
        let stride = 2;
        let c_out = 3;
        let x = randn(&mut rng, 2, c_in * l_in);
        let w = randn(&mut rng, c_in * kernel, c_out);
        let b = randn(&mut rng, 1, c_out);
        fd_check(
            vec![x, w, b],
            |t, ids| {
                let y = t.conv1d(ids[0], ids[1], ids[2], c_in, l_in, kernel, stride);
                let r = t.relu(y);
                let q = t.sqr(r);
                t.mean_all(q)
            },
            1e-5,
        );
    }

    #[test]
    fn seq_rows_roundtrip_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 2, 6); // 3 channels, length 2
        let w = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 1, 4);
        fd_check(
            vec![x, w, b],
            |t, ids| {
                let rows = t.seq_to_rows(ids[0], 3, 2);
                let y = t.matmul(rows, ids[1]);
                let y = t.add_row(y, ids[2]);
                let back = t.rows_to_seq(y, 4, 2);
                let q = t.sqr(back);
                t.mean_all(q)
            },
            1e-6,
        );
        // pure roundtrip is identity
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);
        let r = t.seq_to_rows(x, 2, 3);
        let back = t.rows_to_seq(r, 2, 3);
        assert_eq!(t.value(back), t.value(x));
    }

    #[test]
    fn conv1d_matches_direct_computation() {
        // 1 channel, length 4, kernel 2, stride 1: out[p] = x[p]*w0 + x[p+1]*w1 + b.
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0, 3.0, 4.0]]);
        let w = t.leaf(array![[10.0], [100.0]]);
        let b = t.leaf(array![[0.5]]);
        let y = t.conv1d(x, w, b, 1, 4, 2, 1);
        assert_eq!(t.value(y), &array![[210.5, 320.5, 430.5]]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn empty_batch_flows_through() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros((0, 3)));
        let w = t.leaf(Array2::ones((3, 2)));
        let y = t.matmul(x, w);
        assert_eq!(t.value(y).dim(), (0, 2));
    }
}
