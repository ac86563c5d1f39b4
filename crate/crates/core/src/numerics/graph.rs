//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse, accumulating gradients
//! into intermediate nodes and, for parameter nodes, into the
//! [`ParamStore`] the parameters came from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{ParamId, ParamStore, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation kinds, used for error messages and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    GatherParam,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Narrow,
    Gather,
    Relu,
    Sigmoid,
    Softplus,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Dropout,
    Sum,
    Mean,
}

enum Op {
    Leaf,
    Param(ParamId),
    GatherParam {
        param: ParamId,
        indices: Vec<usize>,
        width: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        src: Var,
        indices: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    LogSoftmax {
        src: Var,
        axis: usize,
    },
    LayerNorm {
        src: Var,
        axis: usize,
        inv_std: Vec<f64>,
    },
    Dropout {
        src: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::GatherParam,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Gather,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::Mean,
    ];

    /// Case-insensitive lookup by variant name, e.g. `"layernorm"`.
    pub fn from_name(name: &str) -> Option<OpKind> {
        let wanted: String = name.chars().filter(|c| c.is_alphanumeric()).collect();
        Self::ALL
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(&wanted))
    }
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::GatherParam { .. } => OpKind::GatherParam,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Gather { .. } => OpKind::Gather,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softplus(_) => OpKind::Softplus,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
    fault: Option<(OpKind, f64)>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

type Res = Result<Var, NumericsError>;

impl Graph {
    /// Inference-mode graph (dropout disabled).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            fault: None,
        }
    }

    /// Training-mode graph; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Graph::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Scales the backward rule of `op` by `scale`. Used to check that the
    /// gradient checker notices a wrong derivative.
    pub fn inject_backward_fault(&mut self, op: OpKind, scale: f64) {
        self.fault = Some((op, scale));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; differentiable iff the tensor requires grad.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Res {
        let t = Tensor::new(shape, values)?;
        Ok(self.input(&t))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = &store.get(id).tensor;
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Param(id), true)
    }

    /// Rows of a 2-d parameter table, without copying the whole table.
    pub fn embedding_lookup(&mut self, store: &ParamStore, table: ParamId, indices: &[usize]) -> Res {
        let t = &store.get(table).tensor;
        if t.shape().len() != 2 || indices.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "embedding_lookup",
                message: format!("table shape {:?}, {} indices", t.shape(), indices.len()),
            });
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut value = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: i,
                    len: rows,
                });
            }
            value.extend_from_slice(&t.values()[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            vec![indices.len(), width],
            value,
            Op::GatherParam {
                param: table,
                indices: indices.to_vec(),
                width,
            },
            true,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: fn(Var, Var) -> Op, f: fn(f64, f64) -> f64) -> Res {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| NumericsError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, value, op(a, b), rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Res {
        self.binary(a, b, "multiply", Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, Op::Scale(a, s), rg)
    }

    /// `[.., m, k] x [k, n]`, or batched `[b.., m, k] x [b.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let dims = matmul_dims(&sa, &sb).ok_or_else(|| NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let mut value = vec![0.0; dims.batch * dims.m * dims.n];
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for bi in 0..dims.batch {
            let a_off = bi * dims.m * dims.k;
            let b_off = if dims.shared_rhs { 0 } else { bi * dims.k * dims.n };
            let c_off = bi * dims.m * dims.n;
            gemm(
                &va[a_off..a_off + dims.m * dims.k],
                &vb[b_off..b_off + dims.k * dims.n],
                &mut value[c_off..c_off + dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(dims.n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Res {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(NumericsError::InvalidArgument {
                op: "transpose",
                message: format!("needs rank >= 2, got shape {s:?}"),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s.len().checked_sub(2).map_or(1, |n| s[..n].iter().product());
        let v = self.value(a);
        let mut value = vec![0.0; v.len()];
        for b in 0..batch {
            let off = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    value[off + j * r + i] = v[off + i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 1, n - 2);
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Res {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Res {
        let first = parts.first().ok_or(NumericsError::InvalidArgument {
            op: "concat",
            message: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(NumericsError::InvalidArgument {
                op: "concat",
                message: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                value.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Res {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(NumericsError::InvalidArgument {
                op: "narrow",
                message: format!("range {start}..{} on axis {axis} of shape {s:?}", start + len),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value(a);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            value.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Narrow { src: a, axis, start }, rg))
    }

    /// Rows of `a` along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Res {
        let s = self.shape(a).to_vec();
        if indices.is_empty() {
            return Err(NumericsError::InvalidArgument {
                op: "gather_rows",
                message: "no indices".into(),
            });
        }
        let width: usize = s[1..].iter().product();
        let v = self.value(a);
        let mut value = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= s[0] {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: s[0],
                });
            }
            value.extend_from_slice(&v[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(
            shape,
            value,
            Op::Gather {
                src: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    /// Which side of zero every ReLU input lies on. Two evaluations with
    /// different patterns straddle a point where the graph is not
    /// differentiable.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(src) => Some(src),
                _ => None,
            })
            .flat_map(|src| self.value(src).iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize), NumericsError> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(NumericsError::InvalidArgument {
                op,
                message: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        Ok((s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product()))
    }

    /// Softmax along `axis`, with the maximum subtracted before `exp`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Res {
        let (outer, len, inner) = self.check_axis(a, axis, "softmax")?;
        let mut value = self.value(a).to_vec();
        for_each_lane(outer, len, inner, |idx| {
            let max = idx.clone().map(|i| value[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for i in idx.clone() {
                value[i] = (value[i] - max).exp();
                sum += value[i];
            }
            for i in idx {
                value[i] /= sum;
            }
        });
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Softmax { src: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Res {
        let (outer, len, inner) = self.check_axis(a, axis, "log_softmax")?;
        let mut value = self.value(a).to_vec();
        for_each_lane(outer, len, inner, |idx| {
            let max = idx.clone().map(|i| value[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.clone().map(|i| (value[i] - max).exp()).sum::<f64>().ln();
            for i in idx {
                value[i] -= lse;
            }
        });
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::LogSoftmax { src: a, axis }, rg))
    }

    /// Zero-mean, unit-variance normalization along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Res {
        let (outer, len, inner) = self.check_axis(a, axis, "layer_norm")?;
        let mut value = self.value(a).to_vec();
        let mut inv_std = Vec::with_capacity(outer * inner);
        for_each_lane(outer, len, inner, |idx| {
            let n = len as f64;
            let mean = idx.clone().map(|i| value[i]).sum::<f64>() / n;
            let var = idx.clone().map(|i| (value[i] - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for i in idx {
                value[i] = (value[i] - mean) * is;
            }
            inv_std.push(is);
        });
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::LayerNorm { src: a, axis, inv_std }, rg))
    }

    /// Inverted dropout; identity outside training mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Res {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidArgument {
                op: "dropout",
                message: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Dropout { src: a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![m], Op::Mean(a), rg)
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// the matching tensors in `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients, NumericsError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(NumericsError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let fault = match self.fault {
                Some((op, s)) if op == node.op.kind() => s,
                _ => 1.0,
            };
            self.backward_node(node, &g, fault, &mut grads, store);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        fault: f64,
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, |pg| pg.iter_mut().zip(g).for_each(|(p, x)| *p += x * fault)),
            Op::GatherParam { param, indices, width } => store.accumulate_grad(*param, |pg| {
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..*width {
                        pg[i * width + c] += g[r * width + c] * fault;
                    }
                }
            }),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (a, b) = (*a, *b);
                acc(a, &mut |ga| {
                    reduce_broadcast(&node.shape, &self.nodes[a.0].shape, g, ga, |x, _| x * fault)
                });
                acc(b, &mut |gb| {
                    reduce_broadcast(&node.shape, &self.nodes[b.0].shape, g, gb, |x, _| sign * x * fault)
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ia = broadcast_index(&node.shape, sa);
                let ib = broadcast_index(&node.shape, sb);
                acc(a, &mut |ga| {
                    for (o, x) in g.iter().enumerate() {
                        ga[ia[o]] += x * vb[ib[o]] * fault;
                    }
                });
                acc(b, &mut |gb| {
                    for (o, x) in g.iter().enumerate() {
                        gb[ib[o]] += x * va[ia[o]] * fault;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(p, x)| *p += x * s * fault)
            }),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let dims = matmul_dims(&self.nodes[a.0].shape, &self.nodes[b.0].shape).expect("checked in forward");
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(a, &mut |ga| {
                    for bi in 0..dims.batch {
                        let a_off = bi * dims.m * dims.k;
                        let b_off = if dims.shared_rhs { 0 } else { bi * dims.k * dims.n };
                        let c_off = bi * dims.m * dims.n;
                        // dA = dC B^T
                        for i in 0..dims.m {
                            for p in 0..dims.k {
                                let mut s = 0.0;
                                for j in 0..dims.n {
                                    s += g[c_off + i * dims.n + j] * vb[b_off + p * dims.n + j];
                                }
                                ga[a_off + i * dims.k + p] += s * fault;
                            }
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for bi in 0..dims.batch {
                        let a_off = bi * dims.m * dims.k;
                        let b_off = if dims.shared_rhs { 0 } else { bi * dims.k * dims.n };
                        let c_off = bi * dims.m * dims.n;
                        // dB = A^T dC
                        for i in 0..dims.m {
                            for p in 0..dims.k {
                                let av = va[a_off + i * dims.k + p] * fault;
                                if av == 0.0 {
                                    continue;
                                }
                                let row = &g[c_off + i * dims.n..c_off + (i + 1) * dims.n];
                                let dst = &mut gb[b_off + p * dims.n..b_off + (p + 1) * dims.n];
                                for (d, x) in dst.iter_mut().zip(row) {
                                    *d += av * x;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 1], s[s.len() - 2]);
                let batch = g.len() / (r * c);
                acc(*a, &mut |ga| {
                    for b in 0..batch {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                ga[off + i * c + j] += g[off + j * r + i] * fault;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(p, x)| *p += x * fault)),
            Op::Concat { parts, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            for t in 0..len {
                                gp[o * len + t] += g[o * total + offset + t] * fault;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { src, axis, start } => {
                let s = &self.nodes[src.0].shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.shape[*axis];
                acc(*src, &mut |gs| {
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        for t in 0..len * inner {
                            gs[base + t] += g[o * len * inner + t] * fault;
                        }
                    }
                });
            }
            Op::Gather { src, indices } => {
                let width: usize = node.shape[1..].iter().product();
                acc(*src, &mut |gs| {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..width {
                            gs[i * width + c] += g[r * width + c] * fault;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i] * fault;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]) * fault;
                    }
                });
            }
            Op::Softplus(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(x[i]) * fault;
                    }
                });
            }
            Op::Softmax { src, axis } => {
                let s = &node.shape;
                let (outer, len, inner) = (s[..*axis].iter().product(), s[*axis], s[axis + 1..].iter().product());
                let y = &node.value;
                acc(*src, &mut |ga| {
                    for_each_lane(outer, len, inner, |idx| {
                        let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
                        for i in idx {
                            ga[i] += y[i] * (g[i] - dot) * fault;
                        }
                    });
                });
            }
            Op::LogSoftmax { src, axis } => {
                let s = &node.shape;
                let (outer, len, inner) = (s[..*axis].iter().product(), s[*axis], s[axis + 1..].iter().product());
                let y = &node.value;
                acc(*src, &mut |ga| {
                    for_each_lane(outer, len, inner, |idx| {
                        let gs: f64 = idx.clone().map(|i| g[i]).sum();
                        for i in idx {
                            ga[i] += (g[i] - y[i].exp() * gs) * fault;
                        }
                    });
                });
            }
            Op::LayerNorm { src, axis, inv_std } => {
                let s = &node.shape;
                let (outer, len, inner) = (s[..*axis].iter().product(), s[*axis], s[axis + 1..].iter().product());
                let xhat = &node.value;
                acc(*src, &mut |ga| {
                    let mut lane = 0;
                    for_each_lane(outer, len, inner, |idx| {
                        let n = len as f64;
                        let mg = idx.clone().map(|i| g[i]).sum::<f64>() / n;
                        let mgx = idx.clone().map(|i| g[i] * xhat[i]).sum::<f64>() / n;
                        let is = inv_std[lane];
                        for i in idx {
                            ga[i] += is * (g[i] - mg - xhat[i] * mgx) * fault;
                        }
                        lane += 1;
                    });
                });
            }
            Op::Dropout { src, mask } => {
                acc(*src, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i] * fault;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|p| *p += g[0] * fault)),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|p| *p += g[0] / n * fault))
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Calls `f` with the flat indices of every lane along the middle axis of
/// an `outer x len x inner` layout.
fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * len * inner + i;
            f((start..start + len * inner).step_by(inner));
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast to it.
fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    if out_shape == in_shape {
        return (0..numel).collect();
    }
    let n = out_shape.len();
    let pad = n - in_shape.len();
    let mut in_strides = vec![0; n];
    let mut stride = 1;
    for d in (0..in_shape.len()).rev() {
        in_strides[d + pad] = if in_shape[d] == 1 { 0 } else { stride };
        stride *= in_shape[d];
    }
    let mut out = Vec::with_capacity(numel);
    let mut counter = vec![0; n];
    let mut cur = 0;
    for _ in 0..numel {
        out.push(cur);
        for d in (0..n).rev() {
            counter[d] += 1;
            cur += in_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            cur -= in_strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    out
}

fn reduce_broadcast(
    out_shape: &[usize],
    in_shape: &[usize],
    g: &[f64],
    dst: &mut [f64],
    f: impl Fn(f64, usize) -> f64,
) {
    if out_shape == in_shape {
        for (i, (d, x)) in dst.iter_mut().zip(g).enumerate() {
            *d += f(*x, i);
        }
        return;
    }
    let idx = broadcast_index(out_shape, in_shape);
    for (o, &i) in idx.iter().enumerate() {
        dst[i] += f(g[o], i);
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Option<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return None;
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    if b.len() == 2 {
        return Some(MatMulDims {
            batch,
            m,
            k,
            n,
            shared_rhs: true,
        });
    }
    (a[..a.len() - 2] == b[..b.len() - 2]).then_some(MatMulDims {
        batch,
        m,
        k,
        n,
        shared_rhs: false,
    })
}

fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[1, 5, 4]), Some(vec![2, 5, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_index(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(&[2], vec![0.0, 0.0]).unwrap();
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
        let b = g.constant(&[2], vec![2f64.ln(), 0.0]).unwrap();
        let s = g.softmax(b, 0).unwrap();
        assert!((g.value(s)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s)[1] - 1.0 / 3.0).abs() < 1e-15);
        let z = g.constant(&[1], vec![0.0]).unwrap();
        let y = g.sigmoid(z);
        assert_eq!(g.value(y), &[0.5]);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(&[2], vec![0.0; 2]).unwrap();
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn backward_identity_and_square() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(&[1.0, 2.0, 3.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);

        let mut g = Graph::new();
        let x = g.input(&Tensor::scalar(4.0).with_grad());
        let grads = g.backward(x, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(&[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x, &mut store), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn unused_parameter_has_zero_grad() {
        let mut store = ParamStore::new();
        let used = store
            .add("used", Tensor::vector(&[1.0, 2.0]), super::super::ParamGroup::Head)
            .unwrap();
        let unused = store
            .add("unused", Tensor::vector(&[5.0]), super::super::ParamGroup::Head)
            .unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, used);
        let loss = g.sum(u);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(used).tensor.grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(store.get(unused).tensor.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn reused_tensor_accumulates() {
        let mut store = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input(&Tensor::vector(&[3.0]).with_grad());
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let grads = g.backward(z, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[12.0]);
    }

    #[test]
    fn dropout_is_seeded_and_inert_in_eval() {
        let mut g = Graph::new();
        let a = g.constant(&[8], vec![1.0; 8]).unwrap();
        assert_eq!(g.dropout(a, 0.5).unwrap(), a);
        let run = |seed| {
            let mut g = Graph::training(seed);
            let a = g.constant(&[64], vec![1.0; 64]).unwrap();
            let d = g.dropout(a, 0.5).unwrap();
            g.value(d).to_vec()
        };
        assert_eq!(run(3), run(3));
        assert!(run(3).iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
