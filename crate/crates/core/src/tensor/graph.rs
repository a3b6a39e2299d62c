use std::collections::BTreeMap;

use super::kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place};
use super::{strides, ParamStore, Tensor};
use crate::error::{IvtError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Sqrt,
    Relu,
    /// x·Φ(x) with the tanh approximation of Φ.
    Gelu,
    Sigmoid,
    Tanh,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Layout of a batched attention call: `groups` independent problems, each
/// with `queries` query rows and `keys` key/value rows, split into `heads`
/// along the feature axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGroups {
    pub groups: usize,
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
    /// Query row r only sees key rows 0..=r (requires queries == keys).
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Unary(Var, UnaryOp),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    Take(Var, Vec<usize>),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    SumAll(Var),
    SumAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionGroups,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
    macs: u64,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> IvtError {
    IvtError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    /// Multiply-accumulates performed by forward ops recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) {
            if let Some(index) = value.first_non_finite() {
                return Err(IvtError::Numeric {
                    context: format!("output of {}", op_name(&op)),
                    index,
                });
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.set_requires_grad(false),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.set_requires_grad(true),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter as a trainable leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| IvtError::config(format!("unknown parameter '{name}'")))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// a · bᵀ for a: [m×k], b: [n×k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.macs += (m * k * n) as u64;
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg)
    }

    // ---- elementwise ---------------------------------------------------

    /// Equal shapes, or one side a single-element tensor that is broadcast.
    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Var, Var, Vec<usize>, bool)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (a, b) = if sa == sb {
            (a, b)
        } else if self.value(b).numel() == 1 {
            let n = self.value(a).numel();
            (a, self.take(b, vec![0; n], &sa)?)
        } else if self.value(a).numel() == 1 {
            let n = self.value(b).numel();
            (self.take(a, vec![0; n], &sb)?, b)
        } else {
            return Err(shape_err(name, &sa, &sb));
        };
        let shape = self.shape(a).to_vec();
        Ok((a, b, shape, self.any_grad(&[a, b])))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape, rg) = self.binary(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape, rg) = self.binary(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(Tensor::new(&shape, out)?, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, shape, rg) = self.binary(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x + c).collect())?;
        let rg = self.requires_grad(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * c).collect())?;
        let rg = self.requires_grad(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Adds a length-d row vector to every row of an n×d matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(shape_err("add_row", sa, sr));
        }
        let d = sa[1];
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % d])
            .collect();
        let shape = sa.to_vec();
        let rg = self.any_grad(&[a, row]);
        self.push(Tensor::new(&shape, out)?, Op::AddRow(a, row), rg)
    }

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Result<Var> {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Exp => f64::exp,
            UnaryOp::Sqrt => {
                if let Some(i) = self.value(a).data().iter().position(|&x| x < 0.0) {
                    return Err(IvtError::Numeric {
                        context: "sqrt of negative input".into(),
                        index: i,
                    });
                }
                f64::sqrt
            }
            UnaryOp::Relu => |x| x.max(0.0),
            UnaryOp::Gelu => gelu,
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Abs => f64::abs,
            UnaryOp::Square => |x| x * x,
        };
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.requires_grad(a);
        self.push(out, Op::Unary(a, op), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Square)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().ok_or_else(|| {
            IvtError::contract("softmax needs at least one axis".to_string())
        })?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
            debug_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let shape = t.shape().to_vec();
        let rg = self.requires_grad(a);
        self.push(Tensor::new(&shape, out)?, Op::SoftmaxRows(a), rg)
    }

    /// Normalizes every row of an n×d matrix to zero mean and unit variance,
    /// then applies a per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(IvtError::config(format!("layer norm eps must be > 0, got {eps}")));
        }
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(shape_err("layer_norm", sx, &[]));
        }
        let (n, d) = (sx[0], sx[1]);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", sx, self.shape(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            Tensor::new(&[n, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    // ---- layout --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.requires_grad(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Copies `a.data[index[k]]` into position k of a tensor of `shape`.
    /// The backward rule scatters additively, so repeated indices are fine.
    pub fn take(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(IvtError::Bounds {
                op: "take",
                index: bad,
                len: src.len(),
            });
        }
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err("take", shape, &[index.len()]));
        }
        let out: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let rg = self.requires_grad(a);
        self.push(Tensor::new(shape, out)?, Op::Take(a, index), rg)
    }

    /// Selects entries along `axis` (copies; indices may repeat).
    pub fn gather(&mut self, a: Var, indices: &[usize], axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("gather", &shape, &[axis]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(IvtError::Bounds {
                op: "gather",
                index: bad,
                len: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut index = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.take(a, index, &out_shape)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dim = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err("slice", self.shape(a), &[axis]))?;
        if len == 0 || start + len > dim {
            return Err(IvtError::Bounds {
                op: "slice",
                index: start + len,
                len: dim,
            });
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, &idx, axis)
    }

    /// Permutes axes: output axis i is input axis `perm[i]`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("transpose", &shape, perm));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..n {
            index.push(
                counter
                    .iter()
                    .zip(perm)
                    .map(|(&c, &p)| c * in_strides[p])
                    .sum(),
            );
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.take(a, index, &out_shape)
    }

    /// 2-D transpose.
    pub fn t(&mut self, a: Var) -> Result<Var> {
        self.transpose(a, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| IvtError::contract("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut chunks = Vec::with_capacity(inputs.len());
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", &first, s));
            }
            chunks.push(s[axis] * inner);
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            rg,
        )
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Reduces one axis away.
    pub fn reduce(&mut self, a: Var, axis: usize, how: Reduce) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("reduce", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.requires_grad(a);
        let s = self.push(
            Tensor::new(&out_shape, out)?,
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            },
            rg,
        )?;
        match how {
            Reduce::Sum => Ok(s),
            Reduce::Mean => self.scale(s, 1.0 / len as f64),
        }
    }

    // ---- fused layers --------------------------------------------------

    /// Stride-1 "same" convolution of x: [C,H,W] with w: [O,C,k,k], b: [O].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || sw[2] % 2 == 0
        {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if self.shape(b) != [sw[0]] {
            return Err(shape_err("conv2d", &sw, self.shape(b)));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        let pad = k / 2;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let mut out = vec![0.0; o * h * wd];
        for oc in 0..o {
            let plane = &mut out[oc * h * wd..(oc + 1) * h * wd];
            plane.iter_mut().for_each(|v| *v = bs[oc]);
            for ic in 0..c {
                let xin = &xs[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ws[((oc * c + ic) * k + ky) * k + kx];
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            let sy = sy - pad;
                            for xx in 0..wd {
                                let sxx = xx + kx;
                                if sxx < pad || sxx - pad >= wd {
                                    continue;
                                }
                                plane[y * wd + xx] += wv * xin[sy * wd + sxx - pad];
                            }
                        }
                    }
                }
            }
        }
        self.macs += (o * c * k * k * h * wd) as u64;
        let rg = self.any_grad(&[x, w, b]);
        self.push(Tensor::new(&[o, h, wd], out)?, Op::Conv2d { x, w, b }, rg)
    }

    /// Batched scaled dot-product attention, split into heads along the
    /// feature axis. Q: [G·nq × d], K, V: [G·nk × d]. Each head uses
    /// 1/√(d/heads) scaling. Output heads are concatenated back along the
    /// feature axis in head order.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionGroups,
    ) -> Result<Var> {
        let AttentionGroups {
            groups,
            queries,
            keys,
            heads,
            causal,
        } = layout;
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk != sv || sk.len() != 2 || sq[1] != sk[1] {
            return Err(shape_err("attention", sq, sk));
        }
        let d = sq[1];
        if d == 0 || heads == 0 || d % heads != 0 {
            return Err(IvtError::config(format!(
                "feature dim {d} not divisible into {heads} heads"
            )));
        }
        if keys == 0 || sq[0] != groups * queries || sk[0] != groups * keys {
            return Err(shape_err("attention", sq, &[groups, queries, keys]));
        }
        if causal && queries != keys {
            return Err(IvtError::config("causal attention needs queries == keys"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; groups * heads * queries * keys];
        let mut out = vec![0.0; groups * queries * d];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for r in 0..queries {
                    let qrow = &qs[(g * queries + r) * d + off..(g * queries + r) * d + off + dh];
                    let p = &mut probs[((g * heads + h) * queries + r) * keys
                        ..((g * heads + h) * queries + r + 1) * keys];
                    for (c, pc) in p.iter_mut().enumerate() {
                        *pc = if causal && c > r {
                            f64::NEG_INFINITY
                        } else {
                            let krow = &ks[(g * keys + c) * d + off..(g * keys + c) * d + off + dh];
                            dot(qrow, krow) * scale
                        };
                    }
                    softmax_in_place(p);
                    debug_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    let orow = &mut out[(g * queries + r) * d + off..(g * queries + r) * d + off + dh];
                    for (c, &pc) in p.iter().enumerate() {
                        let vrow = &vs[(g * keys + c) * d + off..(g * keys + c) * d + off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += pc * vv;
                        }
                    }
                }
            }
        }
        self.macs += (2 * groups * queries * keys * d) as u64;
        let rg = self.any_grad(&[q, k, v]);
        self.push(
            Tensor::new(&[groups * queries, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradients of every node that depends
    /// on a trainable leaf are available afterwards through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(IvtError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the node value with its gradient attached (zeros when the
    /// node did not receive any).
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        let g = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g).expect("gradient length matches value");
        t
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:expr) => {
                if let Some($g) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with_grad!(*a, |g| matmul_nt_acc(gout, val(*b), m, n, k, g));
                with_grad!(*b, |g| matmul_tn_acc(val(*a), gout, m, k, n, g));
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                with_grad!(*a, |g| matmul_acc(gout, val(*b), m, n, k, g));
                with_grad!(*b, |g| matmul_tn_acc(gout, val(*a), m, n, k, g));
            }
            Op::Add(a, b) => {
                with_grad!(*a, |g| axpy(g, gout, 1.0));
                with_grad!(*b, |g| axpy(g, gout, 1.0));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |g| axpy(g, gout, 1.0));
                with_grad!(*b, |g| axpy(g, gout, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                with_grad!(*a, |g| for ((gi, go), y) in g.iter_mut().zip(gout).zip(bv) {
                    *gi += go * y;
                });
                with_grad!(*b, |g| for ((gi, go), x) in g.iter_mut().zip(gout).zip(av) {
                    *gi += go * x;
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                with_grad!(*a, |g| axpy(g, gout, 1.0));
            }
            Op::Scale(a, c) => {
                with_grad!(*a, |g| axpy(g, gout, *c));
            }
            Op::AddRow(a, row) => {
                with_grad!(*a, |g| axpy(g, gout, 1.0));
                let d = nodes[row.0].value.numel();
                with_grad!(*row, |g| for (j, go) in gout.iter().enumerate() {
                    g[j % d] += go;
                });
            }
            Op::Unary(a, op) => {
                let x = val(*a);
                let y = node.value.data();
                with_grad!(*a, |g| {
                    for j in 0..g.len() {
                        let d = match op {
                            UnaryOp::Exp => y[j],
                            UnaryOp::Sqrt => 0.5 / y[j],
                            UnaryOp::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Gelu => gelu_grad(x[j]),
                            UnaryOp::Sigmoid => y[j] * (1.0 - y[j]),
                            UnaryOp::Tanh => 1.0 - y[j] * y[j],
                            UnaryOp::Abs => {
                                if x[j] > 0.0 {
                                    1.0
                                } else if x[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Square => 2.0 * x[j],
                        };
                        g[j] += gout[j] * d;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                with_grad!(*a, |g| {
                    for r in 0..y.len() / d {
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &gout[r * d..(r + 1) * d];
                        let s = dot(ys, gs);
                        for c in 0..d {
                            g[r * d + c] += ys[c] * (gs[c] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.numel();
                let n = inv_std.len();
                let gv = val(*gain);
                with_grad!(*gain, |g| for (j, go) in gout.iter().enumerate() {
                    g[j % d] += go * xhat[j];
                });
                with_grad!(*bias, |g| for (j, go) in gout.iter().enumerate() {
                    g[j % d] += go;
                });
                with_grad!(*x, |g| {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            let v = gout[r * d + c] * gv[c];
                            dxhat[c] = v;
                            s1 += v;
                            s2 += v * xhat[r * d + c];
                        }
                        let k = inv_std[r] / d as f64;
                        for c in 0..d {
                            g[r * d + c] +=
                                k * (d as f64 * dxhat[c] - s1 - xhat[r * d + c] * s2);
                        }
                    }
                });
            }
            Op::Take(a, index) => {
                with_grad!(*a, |g| for (go, &src) in gout.iter().zip(index) {
                    g[src] += go;
                });
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    with_grad!(v, |g| for o in 0..*outer {
                        let src = &gout[o * total + start..o * total + start + c];
                        axpy(&mut g[o * c..(o + 1) * c], src, 1.0);
                    });
                    start += c;
                }
            }
            Op::SumAll(a) => {
                let go = gout[0];
                with_grad!(*a, |g| g.iter_mut().for_each(|x| *x += go));
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            } => {
                with_grad!(*a, |g| for o in 0..*outer {
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        axpy(
                            &mut g[base..base + inner],
                            &gout[o * inner..(o + 1) * inner],
                            1.0,
                        );
                    }
                });
            }
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, gout, grads),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *layout, probs, gout, grads),
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        let pad = k / 2;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut gx = self.requires_grad(x).then(|| vec![0.0; xs.len()]);
        let mut gw = self.requires_grad(w).then(|| vec![0.0; ws.len()]);
        for oc in 0..o {
            let plane = &gout[oc * h * wd..(oc + 1) * h * wd];
            for ic in 0..c {
                let xin = &xs[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * c + ic) * k + ky) * k + kx;
                        let wv = ws[widx];
                        let mut wacc = 0.0;
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            let sy = sy - pad;
                            for xx in 0..wd {
                                let sxx = xx + kx;
                                if sxx < pad || sxx - pad >= wd {
                                    continue;
                                }
                                let src = sy * wd + sxx - pad;
                                let go = plane[y * wd + xx];
                                wacc += go * xin[src];
                                if let Some(gx) = gx.as_mut() {
                                    gx[ic * h * wd + src] += go * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
        accumulate(grads, x, gx);
        accumulate(grads, w, gw);
        if self.requires_grad(b) {
            let gb: Vec<f64> = (0..o)
                .map(|oc| gout[oc * h * wd..(oc + 1) * h * wd].iter().sum())
                .collect();
            accumulate(grads, b, Some(gb));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionGroups,
        probs: &[f64],
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionGroups {
            groups,
            queries,
            keys,
            heads,
            ..
        } = layout;
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut gq = vec![0.0; qs.len()];
        let mut gk = vec![0.0; ks.len()];
        let mut gv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; keys];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for r in 0..queries {
                    let qi = (g * queries + r) * d + off;
                    let go = &gout[qi..qi + dh];
                    let p = &probs[((g * heads + h) * queries + r) * keys
                        ..((g * heads + h) * queries + r + 1) * keys];
                    for c in 0..keys {
                        let ki = (g * keys + c) * d + off;
                        dp[c] = dot(go, &vs[ki..ki + dh]);
                        if p[c] != 0.0 {
                            for e in 0..dh {
                                gv[ki + e] += p[c] * go[e];
                            }
                        }
                    }
                    let s = dot(p, &dp);
                    for c in 0..keys {
                        let ds = p[c] * (dp[c] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ki = (g * keys + c) * d + off;
                        for e in 0..dh {
                            gq[qi + e] += ds * ks[ki + e];
                            gk[ki + e] += ds * qs[qi + e];
                        }
                    }
                }
            }
        }
        if self.requires_grad(q) {
            accumulate(grads, q, Some(gq));
        }
        if self.requires_grad(k) {
            accumulate(grads, k, Some(gk));
        }
        if self.requires_grad(v) {
            accumulate(grads, v, Some(gv));
        }
    }
}

fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => axpy(existing, &g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddScalar(..) => "add_scalar",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::Unary(..) => "unary",
        Op::SoftmaxRows(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Reshape(..) => "reshape",
        Op::Take(..) => "take",
        Op::Concat { .. } => "concat",
        Op::SumAll(..) => "sum",
        Op::SumAxis { .. } => "reduce",
        Op::Conv2d { .. } => "conv2d",
        Op::Attention { .. } => "attention",
    }
}
