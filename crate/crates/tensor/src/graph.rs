//! Recorded computation graph and reverse-mode backward pass.
//!
//! Every primitive evaluates eagerly, validates its output, and appends one
//! node to the graph. Nodes only reference earlier nodes, so the node list
//! is always in topological order and backward is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Relu(usize),
    MaxPool2 {
        input: usize,
        argmax: Vec<u8>,
    },
    Upsample2(usize),
    Concat(usize, usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Powf(usize, f64),
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SumChannel(usize),
    MaxChannel {
        input: usize,
        argmax: Vec<u32>,
    },
    ExpandChannel(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
    /// Elementwise function whose pointwise derivative was computed at
    /// forward time.
    Pointwise {
        input: usize,
        derivative: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    is_param: bool,
    /// Hash of the branch taken by every element of a non-smooth primitive.
    branch: Option<u64>,
}

/// A recorded sequence of primitive applications.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// FNV-1a over a stream of small integers.
fn branch_hash(bits: impl Iterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bits {
        h ^= b;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// `[outer, channels, inner]` view of a tensor whose axis 1 is the channel
/// axis.
fn channel_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 2,
            found: s.len(),
        });
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[usize], branch: Option<u64>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            is_param: false,
            branch,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_checked(
        &mut self,
        op: Op,
        value: Tensor,
        inputs: &[usize],
        branch: Option<u64>,
        name: &'static str,
    ) -> Result<Var> {
        let value = value.check_finite(name)?;
        Ok(self.push(op, value, inputs, branch))
    }

    /// A leaf that receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        let value = value.check_finite("param")?;
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
            is_param: true,
            branch: None,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let value = value.check_finite("constant")?;
        Ok(self.push(Op::Leaf, value, &[], None))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("var from another graph");
        &self.nodes[i].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Branch hashes of every non-smooth node, in recording order. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<u64> {
        self.nodes.iter().filter_map(|n| n.branch).collect()
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: sa.to_vec(),
                found: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = &self.nodes[a].value;
        let tb = &self.nodes[b].value;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push_checked(Op::Add(a, b), out, &[a, b], None, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push_checked(Op::Sub(a, b), out, &[a, b], None, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push_checked(Op::Mul(a, b), out, &[a, b], None, "mul")
    }

    /// Multiplies every element by a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(|x| c * x);
        self.push_checked(Op::Scale(a, c), out, &[a], None, "scale")
    }

    /// Adds a scalar constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(|x| x + c);
        self.push_checked(Op::Offset(a), out, &[a], None, "offset")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: sa.to_vec(),
                found: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            k as isize,
            1,
            self.nodes[ib].value.data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push_checked(Op::MatMul(ia, ib), out, &[ia, ib], None, "matmul")
    }

    /// Stride-1 convolution of an NCHW input with an `[O, C, k, k]` kernel
    /// (k odd), zero-padded so the spatial extent is preserved.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (ii, iw) = (self.idx(input)?, self.idx(weight)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let [n, c, h, w] = self.nodes[ii].value.nchw()?;
        let ws = self.nodes[iw].value.shape();
        let (o, k) = match ws[..] {
            [o, wc, kh, kw] if wc == c && kh == kw && kh % 2 == 1 => (o, kh),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    expected: vec![ws.first().copied().unwrap_or(0), c, 3, 3],
                    found: ws.to_vec(),
                })
            }
        };
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    expected: vec![o],
                    found: self.nodes[ib].value.shape().to_vec(),
                });
            }
        }
        let dims = ConvDims { n, c, h, w, o, k };
        let out = kernels::conv2d_forward(
            self.nodes[ii].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
            &dims,
        );
        let out = Tensor::new(vec![n, o, h, w], out)?;
        let mut inputs = vec![ii, iw];
        inputs.extend(ib);
        self.push_checked(
            Op::Conv2d {
                input: ii,
                weight: iw,
                bias: ib,
            },
            out,
            &inputs,
            None,
            "conv2d",
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let x = &self.nodes[a].value;
        let branch = branch_hash(x.data().iter().map(|&v| (v > 0.0) as u64));
        let out = x.map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_checked(Op::Relu(a), out, &[a], Some(branch), "relu")
    }

    /// 2×2 max pooling with stride 2 over an NCHW tensor with even extents.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let [n, c, h, w] = self.nodes[ia].value.nchw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2",
                msg: format!("spatial extents {h}x{w} must be even"),
            });
        }
        let (out, argmax) = kernels::maxpool2_forward(self.nodes[ia].value.data(), n * c, h, w);
        let branch = branch_hash(argmax.iter().map(|&v| v as u64));
        let out = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push_checked(
            Op::MaxPool2 { input: ia, argmax },
            out,
            &[ia],
            Some(branch),
            "max_pool2",
        )
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let [n, c, h, w] = self.nodes[ia].value.nchw()?;
        let out = kernels::upsample2_forward(self.nodes[ia].value.data(), n * c, h, w);
        let out = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push_checked(Op::Upsample2(ia), out, &[ia], None, "upsample2")
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let [n, ca, h, w] = self.nodes[ia].value.nchw()?;
        let [nb, cb, hb, wb] = self.nodes[ib].value.nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: self.nodes[ia].value.shape().to_vec(),
                found: self.nodes[ib].value.shape().to_vec(),
            });
        }
        let hw = h * w;
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for img in 0..n {
            out.extend_from_slice(&da[img * ca * hw..(img + 1) * ca * hw]);
            out.extend_from_slice(&db[img * cb * hw..(img + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        self.push_checked(Op::Concat(ia, ib), out, &[ia, ib], None, "concat_channels")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(f64::exp);
        self.push_checked(Op::Exp(a), out, &[a], None, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(f64::ln);
        self.push_checked(Op::Log(a), out, &[a], None, "log")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let x = &self.nodes[a].value;
        let branch = branch_hash(x.data().iter().map(|&v| (v >= 0.0) as u64));
        let out = x.map(f64::abs);
        self.push_checked(Op::Abs(a), out, &[a], Some(branch), "abs")
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let x = &self.nodes[a].value;
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "powf",
                msg: "base must be non-negative".into(),
            });
        }
        let out = x.map(|v| v.powf(p));
        self.push_checked(Op::Powf(a, p), out, &[a], None, "powf")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push_checked(Op::Sum(a), Tensor::scalar(s), &[a], None, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let t = &self.nodes[a].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_checked(Op::Mean(a), Tensor::scalar(s), &[a], None, "mean")
    }

    /// Softmax over axis 1.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let dims = channel_dims(x, "softmax")?;
        let out = softmax_channels(x.data(), dims);
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push_checked(Op::Softmax(ia), out, &[ia], None, "softmax")
    }

    /// Log-softmax over axis 1, stabilized with the channel maximum.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let dims = channel_dims(x, "log_softmax")?;
        let out = log_softmax_channels(x.data(), dims);
        let out = Tensor::new(x.shape().to_vec(), out)?;
        self.push_checked(Op::LogSoftmax(ia), out, &[ia], None, "log_softmax")
    }

    /// Sums over axis 1, keeping it with extent 1.
    pub fn sum_channels(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let (outer, c, inner) = channel_dims(x, "sum_channels")?;
        let d = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for ch in 0..c {
                let src = &d[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[1] = 1;
        let out = Tensor::new(shape, out)?;
        self.push_checked(Op::SumChannel(ia), out, &[ia], None, "sum_channels")
    }

    /// Maximum over axis 1 (first index wins ties), keeping it with extent 1.
    pub fn max_channels(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let (outer, c, inner) = channel_dims(x, "max_channels")?;
        let d = x.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for ch in 0..c {
                for p in 0..inner {
                    let v = d[(o * c + ch) * inner + p];
                    if v > out[o * inner + p] {
                        out[o * inner + p] = v;
                        argmax[o * inner + p] = ch as u32;
                    }
                }
            }
        }
        let branch = branch_hash(argmax.iter().map(|&v| v as u64));
        let mut shape = x.shape().to_vec();
        shape[1] = 1;
        let out = Tensor::new(shape, out)?;
        self.push_checked(
            Op::MaxChannel { input: ia, argmax },
            out,
            &[ia],
            Some(branch),
            "max_channels",
        )
    }

    /// Repeats a tensor with axis-1 extent 1 to `channels` copies.
    pub fn expand_channels(&mut self, a: Var, channels: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let (outer, c, inner) = channel_dims(x, "expand_channels")?;
        if c != 1 || channels == 0 {
            return Err(TensorError::InvalidArgument {
                op: "expand_channels",
                msg: format!("expected channel extent 1, found {c}"),
            });
        }
        let d = x.data();
        let mut out = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for _ in 0..channels {
                out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[1] = channels;
        let out = Tensor::new(shape, out)?;
        self.push_checked(Op::ExpandChannel(ia), out, &[ia], None, "expand_channels")
    }

    /// Mean over all pixels of `-log softmax(logits)[label]`, with the
    /// softmax over axis 1. `labels` has one entry per pixel in
    /// `[outer, inner]` order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let x = &self.nodes[il].value;
        let (outer, c, inner) = channel_dims(x, "softmax_cross_entropy")?;
        if labels.len() != outer * inner {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                expected: vec![outer * inner],
                found: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let ls = log_softmax_channels(x.data(), (outer, c, inner));
        let mut total = 0.0;
        for o in 0..outer {
            for p in 0..inner {
                let y = labels[o * inner + p];
                total -= ls[(o * c + y) * inner + p];
            }
        }
        let out = Tensor::scalar(total / (outer * inner) as f64);
        self.push_checked(
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
            },
            out,
            &[il],
            None,
            "softmax_cross_entropy",
        )
    }

    /// Applies an elementwise function given as `f(x, flat_index) ->
    /// (value, derivative, branch)`. `branch` identifies the smooth piece
    /// the element falls on, for functions with kinks.
    pub fn pointwise(
        &mut self,
        a: Var,
        name: &'static str,
        f: impl Fn(f64, usize) -> (f64, f64, bool),
    ) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let mut values = Vec::with_capacity(x.len());
        let mut derivative = Vec::with_capacity(x.len());
        let mut bits = Vec::with_capacity(x.len());
        for (i, &v) in x.data().iter().enumerate() {
            let (y, dy, b) = f(v, i);
            values.push(y);
            derivative.push(dy);
            bits.push(b as u64);
        }
        if derivative.iter().any(|d| !d.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let out = Tensor::new(x.shape().to_vec(), values)?;
        let branch = branch_hash(bits.into_iter());
        self.push_checked(
            Op::Pointwise {
                input: ia,
                derivative,
            },
            out,
            &[ia],
            Some(branch),
            name,
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        let lv = &self.nodes[root].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[root].requires_grad {
            grads[root] = Some(Tensor::ones(lv.shape()));
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.is_param {
                out[i] = Some(g);
                continue;
            }
            for (input, gi) in self.node_backward(node, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&gi),
                    None => grads[input] = Some(gi),
                }
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |i: usize| &self.nodes[i].value;
        let like = |i: usize, data: Vec<f64>| {
            Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("gradient shape")
        };
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let mut r = Vec::new();
                if self.wants(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    r.push((*a, like(*a, d)));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    r.push((*b, like(*b, d)));
                }
                r
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| c * v))],
            Op::Offset(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut r = Vec::new();
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, n as isize, 1, val(*b).data(), 1, n as isize, &mut d, false);
                    r.push((*a, like(*a, d)));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a).data(), 1, k as isize, gd, n as isize, 1, &mut d, false);
                    r.push((*b, like(*b, d)));
                }
                r
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let [n, c, h, w] = val(*input).nchw()?;
                let ws = val(*weight).shape();
                let dims = ConvDims {
                    n,
                    c,
                    h,
                    w,
                    o: ws[0],
                    k: ws[2],
                };
                let want_b = bias.map(|b| self.wants(b)).unwrap_or(false);
                let (gi, gw, gb) = kernels::conv2d_backward(
                    val(*input).data(),
                    val(*weight).data(),
                    gd,
                    &dims,
                    self.wants(*input),
                    self.wants(*weight),
                    want_b,
                );
                let mut r = Vec::new();
                if let Some(gi) = gi {
                    r.push((*input, like(*input, gi)));
                }
                if let Some(gw) = gw {
                    r.push((*weight, like(*weight, gw)));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    r.push((*b, like(*b, gb)));
                }
                r
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::MaxPool2 { input, argmax } => {
                let [n, c, h, w] = val(*input).nchw()?;
                let d = kernels::maxpool2_backward(gd, argmax, n * c, h, w);
                vec![(*input, like(*input, d))]
            }
            Op::Upsample2(a) => {
                let [n, c, h, w] = val(*a).nchw()?;
                let d = kernels::upsample2_backward(gd, n * c, h, w);
                vec![(*a, like(*a, d))]
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = val(*a).nchw()?;
                let cb = val(*b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for img in 0..n {
                    let base = img * (ca + cb) * hw;
                    da.extend_from_slice(&gd[base..base + ca * hw]);
                    db.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                vec![(*a, like(*a, d))]
            }
            Op::Log(a) => {
                let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                vec![(*a, like(*a, d))]
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(*a, like(*a, d))]
            }
            Op::Powf(a, p) => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if *p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) })
                    .collect();
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "powf backward" });
                }
                vec![(*a, like(*a, d))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), gd[0]))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), gd[0] / n))]
            }
            Op::Softmax(a) => {
                let (outer, c, inner) = channel_dims(val(*a), "softmax")?;
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for p in 0..inner {
                        let at = |ch: usize| (o * c + ch) * inner + p;
                        let dot: f64 = (0..c).map(|ch| gd[at(ch)] * y[at(ch)]).sum();
                        for ch in 0..c {
                            d[at(ch)] = y[at(ch)] * (gd[at(ch)] - dot);
                        }
                    }
                }
                vec![(*a, like(*a, d))]
            }
            Op::LogSoftmax(a) => {
                let (outer, c, inner) = channel_dims(val(*a), "log_softmax")?;
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for p in 0..inner {
                        let at = |ch: usize| (o * c + ch) * inner + p;
                        let gsum: f64 = (0..c).map(|ch| gd[at(ch)]).sum();
                        for ch in 0..c {
                            d[at(ch)] = gd[at(ch)] - y[at(ch)].exp() * gsum;
                        }
                    }
                }
                vec![(*a, like(*a, d))]
            }
            Op::SumChannel(a) => {
                let (outer, c, inner) = channel_dims(val(*a), "sum_channels")?;
                let mut d = Vec::with_capacity(outer * c * inner);
                for o in 0..outer {
                    for _ in 0..c {
                        d.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*a, like(*a, d))]
            }
            Op::MaxChannel { input, argmax } => {
                let (outer, c, inner) = channel_dims(val(*input), "max_channels")?;
                let mut d = vec![0.0; outer * c * inner];
                for o in 0..outer {
                    for p in 0..inner {
                        let ch = argmax[o * inner + p] as usize;
                        d[(o * c + ch) * inner + p] = gd[o * inner + p];
                    }
                }
                vec![(*input, like(*input, d))]
            }
            Op::ExpandChannel(a) => {
                let (outer, _, inner) = channel_dims(val(*a), "expand_channels")?;
                let c = node.value.shape()[1];
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    for ch in 0..c {
                        let src = &gd[(o * c + ch) * inner..(o * c + ch + 1) * inner];
                        for (acc, v) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                vec![(*a, like(*a, d))]
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let x = val(*logits);
                let (outer, c, inner) = channel_dims(x, "softmax_cross_entropy")?;
                let mut d = softmax_channels(x.data(), (outer, c, inner));
                let scale = gd[0] / (outer * inner) as f64;
                for o in 0..outer {
                    for p in 0..inner {
                        d[(o * c + labels[o * inner + p]) * inner + p] -= 1.0;
                    }
                }
                for v in &mut d {
                    *v *= scale;
                }
                vec![(*logits, like(*logits, d))]
            }
            Op::Pointwise { input, derivative } => {
                let d = gd.iter().zip(derivative).map(|(g, dv)| g * dv).collect();
                vec![(*input, like(*input, d))]
            }
        })
    }
}

pub(crate) fn softmax_channels(x: &[f64], (outer, c, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for p in 0..inner {
            let at = |ch: usize| (o * c + ch) * inner + p;
            let m = (0..c).map(|ch| x[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (x[at(ch)] - m).exp();
                out[at(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[at(ch)] /= z;
            }
        }
    }
    out
}

pub(crate) fn log_softmax_channels(x: &[f64], (outer, c, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for p in 0..inner {
            let at = |ch: usize| (o * c + ch) * inner + p;
            let m = (0..c).map(|ch| x[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ch| (x[at(ch)] - m).exp()).sum::<f64>().ln();
            for ch in 0..c {
                out[at(ch)] = x[at(ch)] - lse;
            }
        }
    }
    out
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf. Parameters that do not influence the
    /// loss get `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros for unreached parameters.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}
