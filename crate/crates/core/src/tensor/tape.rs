use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry, PoolGeometry};
use super::{Tensor, TensorError};
use crate::real::Real;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn node_id(self) -> usize {
        self.index
    }
}

/// Operation families, used to target fault injection and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Narrow,
    Relu,
    Softmax,
    Conv2d,
    ChannelBias,
    MaxPool2d,
    AvgPool2d,
    Sum,
    Mean,
    CrossEntropy,
}

/// Multiplies the upstream gradient of every op of `op` kind by `scale`
/// during backward. Test hook for negative controls of the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: OpKind,
    pub scale: f64,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Narrow {
        x: usize,
        outer: usize,
        in_chunk: usize,
        offset: usize,
        out_chunk: usize,
    },
    Relu(usize),
    Softmax(usize),
    Conv2d {
        input: usize,
        kernels: usize,
        geom: ConvGeometry,
    },
    ChannelBias {
        x: usize,
        bias: usize,
        spatial: usize,
    },
    MaxPool2d {
        x: usize,
        geom: PoolGeometry,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: usize,
        geom: PoolGeometry,
    },
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        probs: usize,
        label: usize,
        eps: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ChannelBias { .. } => OpKind::ChannelBias,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Transpose { x, .. }
            | Op::Narrow { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::AvgPool2d { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { input, kernels, .. } => vec![*input, *kernels],
            Op::ChannelBias { x, bias, .. } => vec![*x, *bias],
            Op::CrossEntropy { probs, .. } => vec![*probs],
        }
    }
}

struct Node<'a, T: Real> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run record of a forward computation.
///
/// Leaves may borrow parameter buffers for the tape's lifetime, so building
/// a tape over a model does not copy its weights. A tape is single-threaded;
/// run independent samples on independent tapes.
pub struct Tape<'a, T: Real> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
    fault: Option<BackwardFault>,
    first_non_finite: Option<(usize, OpKind)>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    /// First op that produced a non-finite value from finite inputs.
    /// Only tracked in debug builds.
    pub fn first_non_finite(&self) -> Option<(usize, OpKind)> {
        self.first_non_finite
    }

    fn check(&self, op: &'static str, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::contract(
                op,
                format!("variable {} does not belong to this tape", v.index),
            ));
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        #[cfg(debug_assertions)]
        if self.first_non_finite.is_none()
            && !value.iter().all(|v| v.is_finite())
            && inputs
                .iter()
                .all(|&i| self.nodes[i].value.iter().all(|v| v.is_finite()))
        {
            self.first_non_finite = Some((self.nodes.len(), op.kind()));
        }
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a leaf that borrows `tensor`; differentiable iff the tensor
    /// is marked `requires_grad`.
    pub fn input(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: Cow::Borrowed(tensor.data()),
            requires_grad: tensor.requires_grad(),
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records an owned leaf; differentiable iff the tensor is marked so.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(tensor.into_data()),
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn value(&self, v: Var) -> Result<&[T], TensorError> {
        let i = self.check("value", v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize], TensorError> {
        let i = self.check("shape", v)?;
        Ok(&self.nodes[i].shape)
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<T>, TensorError> {
        let i = self.check("to_tensor", v)?;
        Tensor::new(self.nodes[i].shape.clone(), self.nodes[i].value.to_vec())
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize), TensorError> {
        let ia = self.check(op, a)?;
        let ib = self.check(op, b)?;
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(TensorError::shape(
                op,
                &self.nodes[ia].shape,
                &self.nodes[ib].shape,
            ));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = self.binary_same_shape("add", a, b)?;
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(self.nodes[ib].value.iter())
            .map(|(x, y)| *x + *y)
            .collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = self.binary_same_shape("sub", a, b)?;
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(self.nodes[ib].value.iter())
            .map(|(x, y)| *x - *y)
            .collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Sub(ia, ib)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = self.binary_same_shape("mul", a, b)?;
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(self.nodes[ib].value.iter())
            .map(|(x, y)| *x * *y)
            .collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        let ix = self.check("scale", x)?;
        let value = self.nodes[ix].value.iter().map(|v| *v * s).collect();
        Ok(self.push(self.nodes[ix].shape.clone(), value, Op::Scale(ix, s)))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        let ix = self.check("add_scalar", x)?;
        let value = self.nodes[ix].value.iter().map(|v| *v + s).collect();
        Ok(self.push(self.nodes[ix].shape.clone(), value, Op::AddScalar(ix)))
    }

    /// `a[m×k] · b[k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ia = self.check("matmul", a)?;
        let ib = self.check("matmul", b)?;
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value, m, k, n);
        Ok(self.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: ia,
                b: ib,
                m,
                k,
                n,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check("transpose", x)?;
        let s = &self.nodes[ix].shape;
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", s, &[0, 0]));
        }
        let (rows, cols) = (s[0], s[1]);
        let value = kernels::transpose(&self.nodes[ix].value, rows, cols);
        Ok(self.push(vec![cols, rows], value, Op::Transpose { x: ix, rows, cols }))
    }

    /// Copying reshape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ix = self.check("reshape", x)?;
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.nodes[ix].value.len() {
            return Err(TensorError::shape("reshape", &self.nodes[ix].shape, shape));
        }
        let value = self.nodes[ix].value.to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(ix)))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x)?.len();
        self.reshape(x, &[n])
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::contract("concat", "no inputs"))?;
        let i0 = self.check("concat", first)?;
        let base = self.nodes[i0].shape.clone();
        if axis >= base.len() {
            return Err(TensorError::contract(
                "concat",
                format!("axis {axis} out of range for rank {}", base.len()),
            ));
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut idx = Vec::with_capacity(parts.len());
        let mut chunks = Vec::with_capacity(parts.len());
        let mut axis_total = 0;
        for &p in parts {
            let ip = self.check("concat", p)?;
            let s = &self.nodes[ip].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::shape("concat", &base, s));
            }
            axis_total += s[axis];
            chunks.push(s[axis] * inner);
            idx.push(ip);
        }
        let mut value = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for (&ip, &chunk) in idx.iter().zip(&chunks) {
                value.extend_from_slice(&self.nodes[ip].value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_total;
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: idx,
                outer,
                chunks,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(
        &mut self,
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let ix = self.check("narrow", x)?;
        let s = self.nodes[ix].shape.clone();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::contract(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let in_chunk = s[axis] * inner;
        let out_chunk = len * inner;
        let offset = start * inner;
        let src = &self.nodes[ix].value;
        let mut value = Vec::with_capacity(outer * out_chunk);
        for o in 0..outer {
            let from = o * in_chunk + offset;
            value.extend_from_slice(&src[from..from + out_chunk]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            shape,
            value,
            Op::Narrow {
                x: ix,
                outer,
                in_chunk,
                offset,
                out_chunk,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check("relu", x)?;
        let value = self.nodes[ix]
            .value
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        Ok(self.push(self.nodes[ix].shape.clone(), value, Op::Relu(ix)))
    }

    /// Max-shifted softmax over a 1-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check("softmax", x)?;
        let s = &self.nodes[ix].shape;
        if s.len() != 1 {
            return Err(TensorError::shape("softmax", s, &[s.iter().product()]));
        }
        let value = softmax_values(&self.nodes[ix].value);
        Ok(self.push(self.nodes[ix].shape.clone(), value, Op::Softmax(ix)))
    }

    /// Cross-correlation of `input[C_in×H×W]` with `kernels[C_out×C_in×k×k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let ii = self.check("conv2d", input)?;
        let ik = self.check("conv2d", kernels)?;
        let (si, sk) = (&self.nodes[ii].shape, &self.nodes[ik].shape);
        if si.len() != 3 || sk.len() != 4 || sk[1] != si[0] || sk[2] != sk[3] {
            return Err(TensorError::shape("conv2d", si, sk));
        }
        if stride == 0 {
            return Err(TensorError::contract("conv2d", "stride must be positive"));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, k) = (sk[0], sk[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::shape("conv2d", si, sk));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let value = kernels::conv2d(&self.nodes[ii].value, &self.nodes[ik].value, &geom);
        Ok(self.push(
            vec![c_out, geom.oh, geom.ow],
            value,
            Op::Conv2d {
                input: ii,
                kernels: ik,
                geom,
            },
        ))
    }

    /// Adds `bias[C]` to every position of channel `c` of `x[C×...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let ix = self.check("add_channel_bias", x)?;
        let ib = self.check("add_channel_bias", bias)?;
        let (sx, sb) = (&self.nodes[ix].shape, &self.nodes[ib].shape);
        if sb.len() != 1 || sx.is_empty() || sx[0] != sb[0] {
            return Err(TensorError::shape("add_channel_bias", sx, sb));
        }
        let spatial = numel(&sx[1..]);
        let b = &self.nodes[ib].value;
        let value = self.nodes[ix]
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[i / spatial])
            .collect();
        Ok(self.push(
            sx.clone(),
            value,
            Op::ChannelBias {
                x: ix,
                bias: ib,
                spatial,
            },
        ))
    }

    fn pool_geometry(
        &self,
        op: &'static str,
        ix: usize,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<PoolGeometry, TensorError> {
        let s = &self.nodes[ix].shape;
        if s.len() != 3 {
            return Err(TensorError::shape(op, s, &[window.0, window.1]));
        }
        PoolGeometry::new(s[0], s[1], s[2], window, stride)
            .ok_or_else(|| TensorError::shape(op, s, &[window.0, window.1]))
    }

    pub fn max_pool2d(
        &mut self,
        x: Var,
        window: usize,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let ix = self.check("max_pool2d", x)?;
        let geom = self.pool_geometry("max_pool2d", ix, (window, window), (stride, stride))?;
        let (value, argmax) = kernels::max_pool(&self.nodes[ix].value, &geom);
        Ok(self.push(
            vec![geom.channels, geom.oh, geom.ow],
            value,
            Op::MaxPool2d {
                x: ix,
                geom,
                argmax,
            },
        ))
    }

    /// Mean over `window = (kh, kw)` cells moved by `stride = (sh, sw)`.
    pub fn avg_pool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let ix = self.check("avg_pool2d", x)?;
        let geom = self.pool_geometry("avg_pool2d", ix, window, stride)?;
        let value = kernels::avg_pool(&self.nodes[ix].value, &geom);
        Ok(self.push(
            vec![geom.channels, geom.oh, geom.ow],
            value,
            Op::AvgPool2d { x: ix, geom },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check("sum", x)?;
        let total: T = self.nodes[ix].value.iter().copied().sum();
        Ok(self.push(vec![1], vec![total], Op::Sum(ix)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.check("mean", x)?;
        let n = T::lit(self.nodes[ix].value.len() as f64);
        let total: T = self.nodes[ix].value.iter().copied().sum();
        Ok(self.push(vec![1], vec![total / n], Op::Mean(ix)))
    }

    /// `-ln(probs[label] + eps)` for a 1-D probability vector.
    pub fn cross_entropy(&mut self, probs: Var, label: usize, eps: T) -> Result<Var, TensorError> {
        let ip = self.check("cross_entropy", probs)?;
        let s = &self.nodes[ip].shape;
        if s.len() != 1 {
            return Err(TensorError::shape("cross_entropy", s, &[s.iter().product()]));
        }
        if label >= s[0] {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("label {label} out of range for {} classes", s[0]),
            ));
        }
        let loss = -(self.nodes[ip].value[label] + eps).ln();
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                probs: ip,
                label,
                eps,
            },
        ))
    }

    /// Smallest distance of any ReLU input from 0 and of any max-pool winner
    /// from its runner-up. Central differences with a step well below this
    /// margin never cross a kink.
    pub fn kink_margin(&self) -> Option<T> {
        let mut margin: Option<T> = None;
        let mut fold = |m: T| margin = Some(margin.map_or(m, |cur: T| cur.min(m)));
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    if let Some(m) = self.nodes[*x]
                        .value
                        .iter()
                        .map(|v| v.abs())
                        .reduce(|a, b| a.min(b))
                    {
                        fold(m);
                    }
                }
                Op::MaxPool2d { x, geom, .. } => {
                    if let Some(m) = kernels::max_pool_margin(&self.nodes[*x].value, geom) {
                        fold(m);
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every node is visited once, in reverse recording order. Leaves that
    /// the loss does not depend on get zero gradients from [`Gradients::wrt`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let il = self.check("backward", loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[il].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![T::one()]);

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            if let Some(fault) = self.fault.filter(|f| f.op == node.op.kind()) {
                let s = T::lit(fault.scale);
                g.iter_mut().for_each(|v| *v *= s);
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            numels: self.nodes.iter().map(|n| n.value.len()).collect(),
            grads,
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| -> &[T] { &self.nodes[i].value };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &i in &[*a, *b] {
                    if self.wants(i) {
                        add_into(slot(grads, i, g.len()), g.iter().copied());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g.iter().copied());
                }
                if self.wants(*b) {
                    add_into(slot(grads, *b, g.len()), g.iter().map(|v| -*v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let other = val(*b);
                    add_into(
                        slot(grads, *a, g.len()),
                        g.iter().zip(other).map(|(x, y)| *x * *y),
                    );
                }
                if self.wants(*b) {
                    let other = val(*a);
                    add_into(
                        slot(grads, *b, g.len()),
                        g.iter().zip(other).map(|(x, y)| *x * *y),
                    );
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g.iter().map(|v| *v * *s));
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g.iter().copied());
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let mut d_a = self.wants(*a).then(|| vec![T::zero(); m * k]);
                let mut d_b = self.wants(*b).then(|| vec![T::zero(); k * n]);
                kernels::matmul_backward(
                    val(*a),
                    val(*b),
                    g,
                    *m,
                    *k,
                    *n,
                    d_a.as_deref_mut(),
                    d_b.as_deref_mut(),
                );
                if let Some(d) = d_a {
                    add_into(slot(grads, *a, d.len()), d);
                }
                if let Some(d) = d_b {
                    add_into(slot(grads, *b, d.len()), d);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if self.wants(*x) {
                    // g is cols×rows
                    let d = kernels::transpose(g, *cols, *rows);
                    add_into(slot(grads, *x, d.len()), d);
                }
            }
            Op::Concat {
                parts,
                outer,
                chunks,
            } => {
                let row: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&ip, &chunk) in parts.iter().zip(chunks) {
                    if self.wants(ip) {
                        let dst = slot(grads, ip, outer * chunk);
                        for o in 0..*outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (d, s) in dst[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow {
                x,
                outer,
                in_chunk,
                offset,
                out_chunk,
            } => {
                if self.wants(*x) {
                    let dst = slot(grads, *x, outer * in_chunk);
                    for o in 0..*outer {
                        let from = o * in_chunk + offset;
                        for (d, s) in dst[from..from + out_chunk]
                            .iter_mut()
                            .zip(&g[o * out_chunk..(o + 1) * out_chunk])
                        {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let input = val(*x);
                    add_into(
                        slot(grads, *x, g.len()),
                        g.iter()
                            .zip(input)
                            .map(|(gv, xv)| if *xv > T::zero() { *gv } else { T::zero() }),
                    );
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let dot: T = g.iter().zip(y.iter()).map(|(a, b)| *a * *b).sum();
                    add_into(
                        slot(grads, *x, g.len()),
                        g.iter().zip(y.iter()).map(|(gv, yv)| *yv * (*gv - dot)),
                    );
                }
            }
            Op::Conv2d {
                input,
                kernels: ker,
                geom,
            } => {
                let mut d_in = self
                    .wants(*input)
                    .then(|| vec![T::zero(); val(*input).len()]);
                let mut d_k = self.wants(*ker).then(|| vec![T::zero(); val(*ker).len()]);
                kernels::conv2d_backward(
                    val(*input),
                    val(*ker),
                    g,
                    geom,
                    d_in.as_deref_mut(),
                    d_k.as_deref_mut(),
                );
                if let Some(d) = d_in {
                    add_into(slot(grads, *input, d.len()), d);
                }
                if let Some(d) = d_k {
                    add_into(slot(grads, *ker, d.len()), d);
                }
            }
            Op::ChannelBias { x, bias, spatial } => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g.iter().copied());
                }
                if self.wants(*bias) {
                    let d: Vec<T> = g.chunks(*spatial).map(|c| c.iter().copied().sum()).collect();
                    add_into(slot(grads, *bias, d.len()), d);
                }
            }
            Op::MaxPool2d { x, argmax, .. } => {
                if self.wants(*x) {
                    let dst = slot(grads, *x, val(*x).len());
                    for (gv, &src) in g.iter().zip(argmax) {
                        dst[src] += *gv;
                    }
                }
            }
            Op::AvgPool2d { x, geom } => {
                if self.wants(*x) {
                    let dst = slot(grads, *x, val(*x).len());
                    kernels::avg_pool_backward(g, geom, dst);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = val(*x).len();
                    add_into(slot(grads, *x, n), std::iter::repeat_n(g[0], n));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = val(*x).len();
                    let share = g[0] / T::lit(n as f64);
                    add_into(slot(grads, *x, n), std::iter::repeat_n(share, n));
                }
            }
            Op::CrossEntropy { probs, label, eps } => {
                if self.wants(*probs) {
                    let p = val(*probs);
                    let dst = slot(grads, *probs, p.len());
                    dst[*label] -= g[0] / (p[*label] + *eps);
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_values<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|v| (*v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    numels: Vec<usize>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Result<Vec<T>, TensorError> {
        if v.tape != self.tape || v.index >= self.numels.len() {
            return Err(TensorError::contract(
                "gradients",
                format!("variable {} does not belong to this tape", v.index),
            ));
        }
        Ok(self
            .grads
            .get(v.index)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![T::zero(); self.numels[v.index]]))
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Result<Vec<T>, TensorError> {
        if v.tape != self.tape || v.index >= self.numels.len() {
            return Err(TensorError::contract(
                "gradients",
                format!("variable {} does not belong to this tape", v.index),
            ));
        }
        Ok(self
            .grads
            .get_mut(v.index)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![T::zero(); self.numels[v.index]]))
    }
}
