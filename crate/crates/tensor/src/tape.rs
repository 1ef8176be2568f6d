//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]; inputs always precede
//! their outputs, so a single reverse sweep over the node list is a valid
//! topological order for backpropagation.
//!
//! There is no implicit broadcasting. Operands of element-wise operations
//! must have identical shapes; use [`OpKind::BroadcastExpand`] to repeat a
//! tensor along a new axis.

use crate::error::{invalid, Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Row index understood by [`OpKind::GatherRows`] as "emit a zero row".
pub const PAD_ROW: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

/// Differentiable operation kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `(..., n) x (n, m) -> (..., m)`; leading axes of the left operand
    /// are flattened into rows.
    MatMul,
    Add,
    Sub,
    Mul,
    /// Multiply by a constant.
    Scale(f64),
    /// Concatenate along `axis`; every other axis must agree.
    Concat { axis: usize },
    /// `x` for `x > 0`, `slope * x` otherwise.
    LeakyRelu(f64),
    Sigmoid,
    /// `(..., K, C) -> (..., C)`: maximum over the point axis. Ties go to
    /// the lowest point index, which is also the only one receiving
    /// gradient.
    ReduceMaxOverPoints,
    ReduceMean,
    ReduceSum,
    /// Mean of squared differences; a scalar.
    Mse,
    /// Select rows (last axis kept) by index. [`PAD_ROW`] yields zeros.
    GatherRows(Vec<usize>),
    /// Insert a new axis of size `count` at `axis`, repeating the input.
    BroadcastExpand { axis: usize, count: usize },
    Reshape(Vec<usize>),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Concat { .. } => "concat",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::ReduceMaxOverPoints => "reduce_max_over_points",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::Mse => "mse",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::BroadcastExpand { .. } => "broadcast_expand",
            OpKind::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Mse => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// A node on the tape: value, optional gradient and bookkeeping.
#[derive(Clone, Debug)]
pub struct DiffTensor {
    node_id: NodeId,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl DiffTensor {
    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Debug)]
struct Record {
    kind: OpKind,
    inputs: Vec<NodeId>,
    /// Argmax positions for max-pooling; empty otherwise.
    aux: Vec<usize>,
}

/// Ordered record of operations. Single-threaded; build one per forward
/// pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<DiffTensor>,
    records: Vec<Option<Record>>,
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

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), requires_grad, None)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    /// Trainable leaf initialised from `tensor`.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone(), true)
    }

    pub fn node(&self, v: Var) -> &DiffTensor {
        &self.nodes[v.0 .0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0 .0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0 .0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0 .0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0 .0];
        Tensor::from_parts(n.shape.clone(), n.data.clone())
    }

    /// First element of a node; meant for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0 .0].data[0]
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        record: Option<Record>,
    ) -> Var {
        let id = NodeId(self.nodes.len());
        self.nodes.push(DiffTensor {
            node_id: id,
            shape,
            data,
            grad: None,
            requires_grad,
        });
        self.records.push(record);
        Var(id)
    }

    /// Evaluate `kind` on `inputs` and record it.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(invalid(
                    kind.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(invalid(kind.name(), "needs at least one input"));
        }
        let operands: Vec<&DiffTensor> = inputs.iter().map(|v| &self.nodes[v.0 .0]).collect();
        let (shape, data, aux) = forward(&kind, &operands)?;
        let requires_grad = operands.iter().any(|t| t.requires_grad);
        let record = Record {
            kind,
            inputs: inputs.iter().map(|v| v.0).collect(),
            aux,
        };
        Ok(self.push(shape, data, requires_grad, Some(record)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::Scale(factor), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, inputs)
    }

    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let rank = inputs
            .first()
            .map(|v| self.shape(*v).len())
            .ok_or_else(|| invalid("concat", "needs at least one input"))?;
        if rank == 0 {
            return Err(invalid("concat", "cannot concatenate scalars"));
        }
        self.concat(inputs, rank - 1)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.apply(OpKind::LeakyRelu(slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn max_over_points(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::ReduceMaxOverPoints, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::ReduceMean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::ReduceSum, &[a])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mse, &[a, b])
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::GatherRows(rows), &[a])
    }

    pub fn expand(&mut self, a: Var, axis: usize, count: usize) -> Result<Var> {
        self.apply(OpKind::BroadcastExpand { axis, count }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    /// Backpropagate from a scalar `loss`.
    ///
    /// Gradients are recomputed from scratch on every call. Afterwards every
    /// node that requires grad holds `d loss / d node` (zeros if the node
    /// does not influence the loss); other nodes are left without a grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = loss.0 .0;
        let root_node = &self.nodes[root];
        if numel(&root_node.shape) != 1 {
            return Err(TensorError::NonScalarLoss(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if root_node.requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for i in (0..=root).rev() {
            let Some(record) = &self.records[i] else {
                continue;
            };
            if grads[i].is_none() {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = upper[0].as_deref().expect("checked above");
            backward_op(record, &self.nodes, i, g, lower);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad {
                Some(g.unwrap_or_else(|| vec![0.0; node.data.len()]))
            } else {
                None
            };
        }
        Ok(())
    }
}

type Forward = (Vec<usize>, Vec<f64>, Vec<usize>);

fn same_shape(op: &'static str, a: &DiffTensor, b: &DiffTensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn forward(kind: &OpKind, xs: &[&DiffTensor]) -> Result<Forward> {
    let op = kind.name();
    let out = match kind {
        OpKind::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let mismatch = || TensorError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            if a.shape.is_empty() || b.shape.len() != 2 {
                return Err(mismatch());
            }
            let inner = *a.shape.last().unwrap();
            if inner != b.shape[0] {
                return Err(mismatch());
            }
            let cols = b.shape[1];
            let rows = a.data.len() / inner;
            let mut c = vec![0.0; rows * cols];
            gemm(
                rows,
                inner,
                cols,
                (&a.data, inner as isize, 1),
                (&b.data, cols as isize, 1),
                &mut c,
            );
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = cols;
            (shape, c, Vec::new())
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (xs[0], xs[1]);
            same_shape(op, a, b)?;
            let f: fn(f64, f64) -> f64 = match kind {
                OpKind::Add => |x, y| x + y,
                OpKind::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data, Vec::new())
        }
        OpKind::Scale(c) => {
            let a = xs[0];
            (a.shape.clone(), a.data.iter().map(|x| c * x).collect(), Vec::new())
        }
        OpKind::Concat { axis } => {
            let axis = *axis;
            let first = xs[0];
            let rank = first.shape.len();
            if axis >= rank {
                return Err(invalid(op, format!("axis {axis} out of range for rank {rank}")));
            }
            for x in &xs[1..] {
                let compatible = x.shape.len() == rank
                    && x
                        .shape
                        .iter()
                        .zip(&first.shape)
                        .enumerate()
                        .all(|(i, (p, q))| i == axis || p == q);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op,
                        lhs: first.shape.clone(),
                        rhs: x.shape.clone(),
                    });
                }
            }
            let outer: usize = first.shape[..axis].iter().product();
            let chunks: Vec<usize> = xs.iter().map(|x| numel(&x.shape[axis..])).collect();
            let total: usize = chunks.iter().sum();
            let mut data = Vec::with_capacity(outer * total);
            for o in 0..outer {
                for (x, &chunk) in xs.iter().zip(&chunks) {
                    data.extend_from_slice(&x.data[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = first.shape.clone();
            shape[axis] = xs.iter().map(|x| x.shape[axis]).sum();
            (shape, data, Vec::new())
        }
        OpKind::LeakyRelu(slope) => {
            if !(*slope > 0.0 && *slope < 1.0) {
                return Err(invalid(op, format!("slope {slope} outside (0, 1)")));
            }
            let a = xs[0];
            let data = a
                .data
                .iter()
                .map(|&x| if x > 0.0 { x } else { slope * x })
                .collect();
            (a.shape.clone(), data, Vec::new())
        }
        OpKind::Sigmoid => {
            let a = xs[0];
            let data = a.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
            (a.shape.clone(), data, Vec::new())
        }
        OpKind::ReduceMaxOverPoints => {
            let a = xs[0];
            let rank = a.shape.len();
            if rank < 2 {
                return Err(invalid(op, format!("needs rank >= 2, got {:?}", a.shape)));
            }
            let points = a.shape[rank - 2];
            let channels = a.shape[rank - 1];
            let outer = a.data.len() / (points * channels);
            let mut data = Vec::with_capacity(outer * channels);
            let mut argmax = Vec::with_capacity(outer * channels);
            for o in 0..outer {
                let block = &a.data[o * points * channels..(o + 1) * points * channels];
                for c in 0..channels {
                    let mut best = 0;
                    let mut best_val = block[c];
                    for k in 1..points {
                        let v = block[k * channels + c];
                        if v > best_val {
                            best = k;
                            best_val = v;
                        }
                    }
                    data.push(best_val);
                    argmax.push(best);
                }
            }
            let mut shape = a.shape[..rank - 2].to_vec();
            shape.push(channels);
            (shape, data, argmax)
        }
        OpKind::ReduceMean => {
            let a = xs[0];
            let mean = a.data.iter().sum::<f64>() / a.data.len() as f64;
            (Vec::new(), vec![mean], Vec::new())
        }
        OpKind::ReduceSum => (Vec::new(), vec![xs[0].data.iter().sum()], Vec::new()),
        OpKind::Mse => {
            let (a, b) = (xs[0], xs[1]);
            same_shape(op, a, b)?;
            let s: f64 = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (Vec::new(), vec![s / a.data.len() as f64], Vec::new())
        }
        OpKind::GatherRows(rows) => {
            let a = xs[0];
            if rows.is_empty() {
                return Err(invalid(op, "empty row selection"));
            }
            let width = a.shape.last().copied().unwrap_or(1);
            let available = a.data.len() / width;
            let mut data = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                if r == PAD_ROW {
                    data.extend(std::iter::repeat_n(0.0, width));
                } else if r < available {
                    data.extend_from_slice(&a.data[r * width..(r + 1) * width]);
                } else {
                    return Err(invalid(op, format!("row {r} out of range ({available} rows)")));
                }
            }
            let shape = if a.shape.len() <= 1 {
                vec![rows.len()]
            } else {
                vec![rows.len(), width]
            };
            (shape, data, Vec::new())
        }
        OpKind::BroadcastExpand { axis, count } => {
            let a = xs[0];
            let (axis, count) = (*axis, *count);
            if axis > a.shape.len() || count == 0 {
                return Err(invalid(
                    op,
                    format!("cannot insert axis {axis} of size {count} into {:?}", a.shape),
                ));
            }
            let outer: usize = a.shape[..axis].iter().product();
            let inner: usize = a.shape[axis..].iter().product();
            let mut data = Vec::with_capacity(outer * count * inner);
            for o in 0..outer {
                let src = &a.data[o * inner..(o + 1) * inner];
                for _ in 0..count {
                    data.extend_from_slice(src);
                }
            }
            let mut shape = a.shape.clone();
            shape.insert(axis, count);
            (shape, data, Vec::new())
        }
        OpKind::Reshape(shape) => {
            let a = xs[0];
            if numel(shape) != a.data.len() || shape.iter().any(|&d| d == 0) {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.shape.clone(),
                    rhs: shape.clone(),
                });
            }
            (shape.clone(), a.data.clone(), Vec::new())
        }
    };
    Ok(out)
}

fn ensure(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn backward_op(
    record: &Record,
    nodes: &[DiffTensor],
    out_index: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let input = |j: usize| &nodes[record.inputs[j].0];
    let wants = |j: usize| nodes[record.inputs[j].0].requires_grad;
    // Accumulate through a closure so aliased inputs (e.g. mul(x, x)) add up.
    let acc = |grads: &mut [Option<Vec<f64>>], j: usize, f: &mut dyn FnMut(&mut [f64])| {
        if wants(j) {
            let idx = record.inputs[j].0;
            let buf = ensure(&mut grads[idx], nodes[idx].data.len());
            f(buf);
        }
    };
    match &record.kind {
        OpKind::MatMul => {
            let (a, b) = (input(0), input(1));
            let inner = b.shape[0];
            let cols = b.shape[1];
            let rows = a.data.len() / inner;
            // dA = G * B^T
            acc(grads, 0, &mut |ga| {
                gemm_acc(
                    rows,
                    cols,
                    inner,
                    (g, cols as isize, 1),
                    (&b.data, 1, cols as isize),
                    ga,
                )
            });
            // dB = A^T * G
            acc(grads, 1, &mut |gb| {
                gemm_acc(
                    inner,
                    rows,
                    cols,
                    (&a.data, 1, inner as isize),
                    (g, cols as isize, 1),
                    gb,
                )
            });
        }
        OpKind::Add => {
            acc(grads, 0, &mut |ga| add_into(ga, g));
            acc(grads, 1, &mut |gb| add_into(gb, g));
        }
        OpKind::Sub => {
            acc(grads, 0, &mut |ga| add_into(ga, g));
            acc(grads, 1, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        OpKind::Mul => {
            let (a, b) = (input(0), input(1));
            acc(grads, 0, &mut |ga| {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(&b.data) {
                    *d += s * y;
                }
            });
            acc(grads, 1, &mut |gb| {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(&a.data) {
                    *d += s * x;
                }
            });
        }
        OpKind::Scale(c) => {
            acc(grads, 0, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s));
        }
        OpKind::Concat { axis } => {
            let out_shape = &nodes[out_index].shape;
            let outer: usize = out_shape[..*axis].iter().product();
            let total: usize = numel(&out_shape[*axis..]);
            let mut offset = 0;
            for j in 0..record.inputs.len() {
                let chunk = numel(&input(j).shape[*axis..]);
                acc(grads, j, &mut |gj| {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        add_into(&mut gj[o * chunk..(o + 1) * chunk], src);
                    }
                });
                offset += chunk;
            }
        }
        OpKind::LeakyRelu(slope) => {
            let x = input(0);
            acc(grads, 0, &mut |ga| {
                for ((d, s), &v) in ga.iter_mut().zip(g).zip(&x.data) {
                    *d += if v > 0.0 { *s } else { slope * s };
                }
            });
        }
        OpKind::Sigmoid => {
            let y = &nodes[out_index].data;
            acc(grads, 0, &mut |ga| {
                for ((d, s), &v) in ga.iter_mut().zip(g).zip(y) {
                    *d += s * v * (1.0 - v);
                }
            });
        }
        OpKind::ReduceMaxOverPoints => {
            let x = input(0);
            let rank = x.shape.len();
            let points = x.shape[rank - 2];
            let channels = x.shape[rank - 1];
            acc(grads, 0, &mut |ga| {
                for (flat, (&k, s)) in record.aux.iter().zip(g).enumerate() {
                    let (o, c) = (flat / channels, flat % channels);
                    ga[o * points * channels + k * channels + c] += s;
                }
            });
        }
        OpKind::ReduceMean => {
            let n = input(0).data.len() as f64;
            acc(grads, 0, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
        }
        OpKind::ReduceSum => {
            acc(grads, 0, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0]));
        }
        OpKind::Mse => {
            let (a, b) = (input(0), input(1));
            let k = 2.0 * g[0] / a.data.len() as f64;
            acc(grads, 0, &mut |ga| {
                for ((d, x), y) in ga.iter_mut().zip(&a.data).zip(&b.data) {
                    *d += k * (x - y);
                }
            });
            acc(grads, 1, &mut |gb| {
                for ((d, x), y) in gb.iter_mut().zip(&a.data).zip(&b.data) {
                    *d -= k * (x - y);
                }
            });
        }
        OpKind::GatherRows(rows) => {
            let x = input(0);
            let width = x.shape.last().copied().unwrap_or(1);
            acc(grads, 0, &mut |ga| {
                for (i, &r) in rows.iter().enumerate() {
                    if r != PAD_ROW {
                        add_into(
                            &mut ga[r * width..(r + 1) * width],
                            &g[i * width..(i + 1) * width],
                        );
                    }
                }
            });
        }
        OpKind::BroadcastExpand { axis, count } => {
            let x = input(0);
            let outer: usize = x.shape[..*axis].iter().product();
            let inner: usize = x.shape[*axis..].iter().product();
            acc(grads, 0, &mut |ga| {
                for o in 0..outer {
                    let dst = &mut ga[o * inner..(o + 1) * inner];
                    for r in 0..*count {
                        let base = (o * count + r) * inner;
                        add_into(dst, &g[base..base + inner]);
                    }
                }
            });
        }
        OpKind::Reshape(_) => {
            acc(grads, 0, &mut |ga| add_into(ga, g));
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Strided matrix operand: (data, row stride, column stride).
type Operand<'a> = (&'a [f64], isize, isize);

/// `c = a * b` with `a: m x k`, `b: k x n` and row-major `c: m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand, b: Operand, c: &mut [f64]) {
    gemm_beta(m, k, n, a, b, c, 0.0);
}

/// `c += a * b`.
fn gemm_acc(m: usize, k: usize, n: usize, a: Operand, b: Operand, c: &mut [f64]) {
    gemm_beta(m, k, n, a, b, c, 1.0);
}

fn gemm_beta(m: usize, k: usize, n: usize, a: Operand, b: Operand, c: &mut [f64], beta: f64) {
    assert!(a.0.len() >= m * k, "gemm: lhs too short");
    assert!(b.0.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the asserts above bound every access the strided kernel can
    // make: all strides describe dense m x k, k x n and m x n layouts
    // within the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
