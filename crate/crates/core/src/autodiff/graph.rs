use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `[n, k] x [k, m] -> [n, m]`
    MatMul,
    /// Inputs: sequence `[len, c_in]`, kernel `[width, c_in, c_out]`, bias with `c_out` entries.
    Conv1d { stride: usize, padding: usize },
    Relu,
    Tanh,
    Softplus,
    Exp,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    /// Column-wise mean over rows: `[r, c] -> [1, c]`.
    MeanRows,
    /// `x[r, c] * w[r, 1]`, each row scaled by its own weight.
    RowScale,
    /// Sums consecutive blocks of `group` rows: `[r * group, c] -> [r, c]`.
    GroupSum { group: usize },
    SquaredNorm,
    /// Column concatenation of matrices with equal row counts.
    Concat,
    SliceCols { start: usize, end: usize },
    /// `x[r, c] + b` where `b` has `c` entries, added to every row.
    BiasAdd,
    /// Inputs: mean `[r, k]`, log-std with `k` entries, target `[r, k]`. Output: summed
    /// diagonal-Gaussian negative log-likelihood.
    GaussianNll,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "subtract",
            OpKind::Mul => "multiply",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Conv1d { .. } => "conv1d",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::GroupSum { .. } => "group_sum",
            OpKind::RowScale => "row_scale",
            OpKind::SquaredNorm => "squared_norm",
            OpKind::Concat => "concat",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::BiasAdd => "bias_add",
            OpKind::GaussianNll => "gaussian_nll",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul | OpKind::BiasAdd | OpKind::RowScale => Some(2),
            OpKind::Conv1d { .. } | OpKind::GaussianNll => Some(3),
            OpKind::Concat => None,
            _ => Some(1),
        }
    }
}

struct Node {
    op: Option<(OpKind, Vec<NodeId>)>,
    value: Tensor,
    requires_grad: bool,
    is_param: bool,
}

/// Append-only tape for reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter leaf, in registration order. Parameters that do not
    /// influence the output get zeros.
    pub fn params(&self, graph: &Graph) -> Vec<(NodeId, Tensor)> {
        self.params
            .iter()
            .map(|&id| {
                let g = self
                    .wrt(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()));
                (id, g)
            })
            .collect()
    }

    /// Takes the gradient of `id`, or zeros shaped like `like`.
    pub fn take_or_zeros(&mut self, id: NodeId, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(id.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Registers a constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: None,
            value,
            requires_grad: trainable,
            is_param: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Appends `op` applied to `inputs` and returns the new node.
    pub fn forward(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::InvalidTensor(format!(
                    "{} expects {n} inputs, got {}",
                    op.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::InvalidTensor(format!("{} needs inputs", op.name())));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::InvalidTensor(format!("unknown node {}", id.0)));
            }
        }
        let value = self.compute(&op, inputs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op: Some((op, inputs.to_vec())),
            value,
            requires_grad,
            is_param: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn compute(&self, op: &OpKind, inputs: &[NodeId]) -> Result<Tensor> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let name = op.name();
        let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Ok(())
        };
        Ok(match op {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (v(0), v(1));
                same_shape(a, b)?;
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| match op {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    })
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            OpKind::Scale(c) => v(0).map(|x| x * c),
            OpKind::AddScalar(c) => v(0).map(|x| x + c),
            OpKind::MatMul => {
                let (a, b) = (v(0), v(1));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::Shape {
                        op: name,
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; n * m];
                matmul_acc(a.data(), b.data(), &mut out, n, k, m);
                Tensor::from_parts(vec![n, m], out)
            }
            OpKind::Conv1d { stride, padding } => {
                let (x, w, b) = (v(0), v(1), v(2));
                let geom = ConvGeom::new(x, w, b, *stride, *padding)?;
                let patches = geom.im2col(x.data());
                let mut out = vec![0.0; geom.out_len * geom.c_out];
                matmul_acc(&patches, w.data(), &mut out, geom.out_len, geom.width * geom.c_in, geom.c_out);
                for row in out.chunks_mut(geom.c_out) {
                    for (o, &bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Tensor::from_parts(vec![geom.out_len, geom.c_out], out)
            }
            OpKind::Relu => v(0).map(|x| if x > 0.0 { x } else { 0.0 }),
            OpKind::Tanh => v(0).map(f64::tanh),
            OpKind::Softplus => v(0).map(softplus),
            OpKind::Exp => v(0).map(f64::exp),
            OpKind::Clamp { lo, hi } => v(0).map(|x| x.clamp(*lo, *hi)),
            OpKind::Sum => Tensor::scalar(v(0).data().iter().sum()),
            OpKind::Mean => {
                let x = v(0);
                Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            OpKind::MeanRows => {
                let x = v(0);
                let (r, c) = (x.rows(), x.cols());
                let mut out = vec![0.0; c];
                for row in x.data().chunks(c) {
                    for (o, &xv) in out.iter_mut().zip(row) {
                        *o += xv;
                    }
                }
                let inv = 1.0 / r as f64;
                out.iter_mut().for_each(|o| *o *= inv);
                Tensor::from_parts(vec![1, c], out)
            }
            OpKind::RowScale => {
                let (x, w) = (v(0), v(1));
                if x.shape().len() != 2 || w.shape() != [x.rows(), 1] {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: w.shape().to_vec(),
                    });
                }
                let c = x.cols();
                let data = x
                    .data()
                    .chunks(c)
                    .zip(w.data())
                    .flat_map(|(row, &wv)| row.iter().map(move |&xv| xv * wv))
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            OpKind::GroupSum { group } => {
                let x = v(0);
                if x.shape().len() != 2 || *group == 0 || x.rows() % group != 0 {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: vec![*group],
                    });
                }
                let c = x.cols();
                let r = x.rows() / group;
                let mut out = vec![0.0; r * c];
                for (i, row) in x.data().chunks(c).enumerate() {
                    let o = &mut out[(i / group) * c..(i / group + 1) * c];
                    for (ov, &xv) in o.iter_mut().zip(row) {
                        *ov += xv;
                    }
                }
                Tensor::from_parts(vec![r, c], out)
            }
            OpKind::SquaredNorm => Tensor::scalar(v(0).data().iter().map(|x| x * x).sum()),
            OpKind::Concat => {
                let rows = v(0).rows();
                let mut total = 0;
                for i in 0..inputs.len() {
                    let t = v(i);
                    if t.shape().len() != 2 || t.rows() != rows {
                        return Err(Error::Shape {
                            op: name,
                            lhs: v(0).shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    total += t.cols();
                }
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for i in 0..inputs.len() {
                        let t = v(i);
                        let c = t.cols();
                        out.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                    }
                }
                Tensor::from_parts(vec![rows, total], out)
            }
            OpKind::SliceCols { start, end } => {
                let x = v(0);
                let c = x.cols();
                if x.shape().len() != 2 || start >= end || *end > c {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: vec![*start, *end],
                    });
                }
                let mut out = Vec::with_capacity(x.rows() * (end - start));
                for row in x.data().chunks(c) {
                    out.extend_from_slice(&row[*start..*end]);
                }
                Tensor::from_parts(vec![x.rows(), end - start], out)
            }
            OpKind::BiasAdd => {
                let (x, b) = (v(0), v(1));
                if x.shape().len() != 2 || b.len() != x.cols() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: x.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    });
                }
                let c = x.cols();
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(c) {
                    for (o, &bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            OpKind::GaussianNll => {
                let (mean, log_std, target) = (v(0), v(1), v(2));
                same_shape(mean, target)?;
                if log_std.len() != mean.cols() {
                    return Err(Error::Shape {
                        op: name,
                        lhs: mean.shape().to_vec(),
                        rhs: log_std.shape().to_vec(),
                    });
                }
                let k = mean.cols();
                let inv_var: Vec<f64> = log_std.data().iter().map(|&s| (-2.0 * s).exp()).collect();
                let per_row_const: f64 = log_std.data().iter().sum::<f64>() + 0.5 * k as f64 * LN_2PI;
                let mut total = per_row_const * mean.rows() as f64;
                for (mr, tr) in mean.data().chunks(k).zip(target.data().chunks(k)) {
                    for j in 0..k {
                        let d = tr[j] - mr[j];
                        total += 0.5 * d * d * inv_var[j];
                    }
                }
                Tensor::scalar(total)
            }
        })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if !out.is_scalar() {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some((op, inputs)) = &node.op else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(op, inputs, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d)))
            .chain(std::iter::repeat_with(|| None).take(self.nodes.len() - output.0 - 1))
            .collect();
        let params = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_param)
            .map(NodeId)
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, op: &OpKind, inputs: &[NodeId], out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let wants = |i: usize| self.nodes[inputs[i].0].requires_grad;
        // Accumulates into the gradient buffer of input `i`.
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        match op {
            OpKind::Add | OpKind::Sub => {
                let sign = if matches!(op, OpKind::Sub) { -1.0 } else { 1.0 };
                if wants(0) {
                    let buf = acc(grads, inputs[0], g.len());
                    buf.iter_mut().zip(g).for_each(|(b, &gv)| *b += gv);
                }
                if wants(1) {
                    let buf = acc(grads, inputs[1], g.len());
                    buf.iter_mut().zip(g).for_each(|(b, &gv)| *b += sign * gv);
                }
            }
            OpKind::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                if wants(0) {
                    let buf = acc(grads, inputs[0], g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * b[i];
                    }
                }
                if wants(1) {
                    let buf = acc(grads, inputs[1], g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * a[i];
                    }
                }
            }
            OpKind::Scale(c) => {
                let buf = acc(grads, inputs[0], g.len());
                buf.iter_mut().zip(g).for_each(|(b, &gv)| *b += c * gv);
            }
            OpKind::AddScalar(_) => {
                let buf = acc(grads, inputs[0], g.len());
                buf.iter_mut().zip(g).for_each(|(b, &gv)| *b += gv);
            }
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(0) {
                    let buf = acc(grads, inputs[0], n * k);
                    matmul_bt_acc(g, b.data(), buf, n, k, m);
                }
                if wants(1) {
                    let buf = acc(grads, inputs[1], k * m);
                    matmul_at_acc(a.data(), g, buf, n, k, m);
                }
            }
            OpKind::Conv1d { stride, padding } => {
                let (x, w, b) = (val(0), val(1), val(2));
                let geom = ConvGeom::new(x, w, b, *stride, *padding).expect("validated in forward");
                let kc = geom.width * geom.c_in;
                if wants(1) {
                    let patches = geom.im2col(x.data());
                    let buf = acc(grads, inputs[1], kc * geom.c_out);
                    matmul_at_acc(&patches, g, buf, geom.out_len, kc, geom.c_out);
                }
                if wants(2) {
                    let buf = acc(grads, inputs[2], geom.c_out);
                    for row in g.chunks(geom.c_out) {
                        buf.iter_mut().zip(row).for_each(|(o, &gv)| *o += gv);
                    }
                }
                if wants(0) {
                    let mut dpatches = vec![0.0; geom.out_len * kc];
                    matmul_bt_acc(g, w.data(), &mut dpatches, geom.out_len, kc, geom.c_out);
                    let buf = acc(grads, inputs[0], x.len());
                    geom.col2im_acc(&dpatches, buf);
                }
            }
            OpKind::Relu => {
                let buf = acc(grads, inputs[0], g.len());
                for ((b, &gv), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                    if y > 0.0 {
                        *b += gv;
                    }
                }
            }
            OpKind::Tanh => {
                let buf = acc(grads, inputs[0], g.len());
                for ((b, &gv), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *b += gv * (1.0 - y * y);
                }
            }
            OpKind::Softplus => {
                let x = val(0).data();
                let buf = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * sigmoid(x[i]);
                }
            }
            OpKind::Exp => {
                let buf = acc(grads, inputs[0], g.len());
                for ((b, &gv), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                    *b += gv * y;
                }
            }
            OpKind::Clamp { lo, hi } => {
                let x = val(0).data();
                let buf = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    if x[i] > *lo && x[i] < *hi {
                        buf[i] += g[i];
                    }
                }
            }
            OpKind::Sum | OpKind::Mean => {
                let n = val(0).len();
                let scale = if matches!(op, OpKind::Mean) { 1.0 / n as f64 } else { 1.0 };
                let buf = acc(grads, inputs[0], n);
                buf.iter_mut().for_each(|b| *b += g[0] * scale);
            }
            OpKind::MeanRows => {
                let x = val(0);
                let (r, c) = (x.rows(), x.cols());
                let inv = 1.0 / r as f64;
                let buf = acc(grads, inputs[0], r * c);
                for row in buf.chunks_mut(c) {
                    for (b, &gv) in row.iter_mut().zip(g) {
                        *b += gv * inv;
                    }
                }
            }
            OpKind::RowScale => {
                let (x, w) = (val(0), val(1));
                let c = x.cols();
                if wants(0) {
                    let buf = acc(grads, inputs[0], x.len());
                    for ((row, gr), &wv) in buf.chunks_mut(c).zip(g.chunks(c)).zip(w.data()) {
                        for (b, &gv) in row.iter_mut().zip(gr) {
                            *b += gv * wv;
                        }
                    }
                }
                if wants(1) {
                    let buf = acc(grads, inputs[1], w.len());
                    for ((b, xr), gr) in buf.iter_mut().zip(x.data().chunks(c)).zip(g.chunks(c)) {
                        *b += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            OpKind::GroupSum { group } => {
                let x = val(0);
                let c = x.cols();
                let buf = acc(grads, inputs[0], x.len());
                for (i, row) in buf.chunks_mut(c).enumerate() {
                    for (b, &gv) in row.iter_mut().zip(&g[(i / group) * c..(i / group + 1) * c]) {
                        *b += gv;
                    }
                }
            }
            OpKind::SquaredNorm => {
                let x = val(0).data();
                let buf = acc(grads, inputs[0], x.len());
                for (b, &xv) in buf.iter_mut().zip(x) {
                    *b += 2.0 * xv * g[0];
                }
            }
            OpKind::Concat => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for (i, &id) in inputs.iter().enumerate() {
                    let c = val(i).cols();
                    if self.nodes[id.0].requires_grad {
                        let buf = acc(grads, id, rows * c);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            buf[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(b, &gv)| *b += gv);
                        }
                    }
                    offset += c;
                }
            }
            OpKind::SliceCols { start, end } => {
                let x = val(0);
                let c = x.cols();
                let w = end - start;
                let buf = acc(grads, inputs[0], x.len());
                for (r, grow) in g.chunks(w).enumerate() {
                    buf[r * c + start..r * c + end]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(b, &gv)| *b += gv);
                }
            }
            OpKind::BiasAdd => {
                let c = val(0).cols();
                if wants(0) {
                    let buf = acc(grads, inputs[0], g.len());
                    buf.iter_mut().zip(g).for_each(|(b, &gv)| *b += gv);
                }
                if wants(1) {
                    let buf = acc(grads, inputs[1], c);
                    for row in g.chunks(c) {
                        buf.iter_mut().zip(row).for_each(|(b, &gv)| *b += gv);
                    }
                }
            }
            OpKind::GaussianNll => {
                let (mean, log_std, target) = (val(0), val(1), val(2));
                let k = mean.cols();
                let rows = mean.rows();
                let inv_var: Vec<f64> = log_std.data().iter().map(|&s| (-2.0 * s).exp()).collect();
                let gs = g[0];
                if wants(0) {
                    let buf = acc(grads, inputs[0], mean.len());
                    for i in 0..mean.len() {
                        let j = i % k;
                        buf[i] += gs * (mean.data()[i] - target.data()[i]) * inv_var[j];
                    }
                }
                if wants(2) {
                    let buf = acc(grads, inputs[2], mean.len());
                    for i in 0..mean.len() {
                        let j = i % k;
                        buf[i] += gs * (target.data()[i] - mean.data()[i]) * inv_var[j];
                    }
                }
                if wants(1) {
                    let mut sq = vec![0.0; k];
                    for (mr, tr) in mean.data().chunks(k).zip(target.data().chunks(k)) {
                        for j in 0..k {
                            let d = tr[j] - mr[j];
                            sq[j] += d * d;
                        }
                    }
                    let buf = acc(grads, inputs[1], k);
                    for j in 0..k {
                        buf[j] += gs * (rows as f64 - sq[j] * inv_var[j]);
                    }
                }
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvGeom {
    len: usize,
    c_in: usize,
    width: usize,
    c_out: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let bad = || Error::Shape {
            op: "conv1d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if x.shape().len() != 2 || w.shape().len() != 3 || stride == 0 {
            return Err(bad());
        }
        let (len, c_in) = (x.shape()[0], x.shape()[1]);
        let (width, wc_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wc_in != c_in || len + 2 * padding < width {
            return Err(bad());
        }
        if b.len() != c_out {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out_len = (len + 2 * padding - width) / stride + 1;
        Ok(ConvGeom {
            len,
            c_in,
            width,
            c_out,
            stride,
            padding,
            out_len,
        })
    }

    /// Input row feeding output position `o`, tap `k`; `None` in the zero padding.
    fn source_row(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let kc = self.width * self.c_in;
        let mut patches = vec![0.0; self.out_len * kc];
        for o in 0..self.out_len {
            for k in 0..self.width {
                if let Some(r) = self.source_row(o, k) {
                    let dst = &mut patches[o * kc + k * self.c_in..o * kc + (k + 1) * self.c_in];
                    dst.copy_from_slice(&x[r * self.c_in..(r + 1) * self.c_in]);
                }
            }
        }
        patches
    }

    fn col2im_acc(&self, dpatches: &[f64], dx: &mut [f64]) {
        let kc = self.width * self.c_in;
        for o in 0..self.out_len {
            for k in 0..self.width {
                if let Some(r) = self.source_row(o, k) {
                    let src = &dpatches[o * kc + k * self.c_in..o * kc + (k + 1) * self.c_in];
                    dx[r * self.c_in..(r + 1) * self.c_in]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
    }
}

// Convenience builders used by the networks.
impl Graph {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.forward(OpKind::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.forward(OpKind::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::MatMul, &[a, b])
    }
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.forward(OpKind::Conv1d { stride, padding }, &[x, w, b])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Relu, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Tanh, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Softplus, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Exp, &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.forward(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Mean, &[a])
    }
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::MeanRows, &[a])
    }
    pub fn row_scale(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.forward(OpKind::RowScale, &[x, w])
    }
    pub fn group_sum(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        self.forward(OpKind::GroupSum { group }, &[a])
    }
    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.forward(OpKind::SquaredNorm, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.forward(OpKind::Concat, parts)
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.forward(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::BiasAdd, &[x, b])
    }
    pub fn gaussian_nll(&mut self, mean: NodeId, log_std: NodeId, target: NodeId) -> Result<NodeId> {
        self.forward(OpKind::GaussianNll, &[mean, log_std, target])
    }

    /// Sums a list of scalar nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms.split_first().ok_or(Error::EmptyInput("add_all"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }
}
