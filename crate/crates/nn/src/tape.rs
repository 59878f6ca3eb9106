//! Reverse-mode tape over a fixed set of tensor primitives.
//!
//! Every forward call appends a node holding its output value and the
//! operation that produced it. [`Tape::backward`] walks the nodes in
//! reverse, which is a valid topological order because inputs always
//! precede their consumers.

use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, ConvDims, ConvGeomRef, Conv2dGeom};
use crate::param::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// The forward result is computed by the caller and handed to
/// [`Tape::custom`]; anything the backward pass needs is kept in `self`.
pub trait CustomOp<S: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input, in the order the inputs were given.
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Option<Tensor<S>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Silu,
    Sigmoid,
    Tanh,
    Exp,
    Softplus,
}

enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddBcast { x: Var, b: Var, mid: usize, inner: usize },
    MulBcast { x: Var, b: Var, mid: usize, inner: usize },
    Unary(Var, Unary),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { xs: Vec<Var>, sizes: Vec<usize>, outer: usize, inner: usize },
    Narrow { x: Var, outer: usize, full: usize, start: usize, len: usize, inner: usize },
    Pad2d { x: Var, pads: [usize; 4] },
    Upsample2x(Var),
    Conv2d { x: Var, w: Var, dims: ConvDims },
    ConvTranspose2d { x: Var, w: Var, dims: ConvDims },
    NormChunks { x: Var, chunk: usize, rstd: Vec<S> },
    Softmax(Var),
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<S>> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape<'p, S: Scalar> {
    store: Option<&'p ParamStore<S>>,
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    /// A tape without parameters, for pure tensor functions.
    pub fn new() -> Self {
        Tape { store: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn with_params(store: &'p ParamStore<S>) -> Self {
        Tape { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients (used for inputs under test).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for a stored parameter; created once per tape.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.store.ok_or(NnError::NoParamStore)?;
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = S::lit(s);
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = S::lit(s);
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    fn bcast_dims(&self, op: &'static str, x: Var, b: Var, axis: usize) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if axis + bs.len() > xs.len() || xs[axis..axis + bs.len()] != *bs {
            return shape_err(op, format!("{bs:?} does not match {xs:?} at axis {axis}"));
        }
        let mid = bs.iter().product();
        let inner = xs[axis + bs.len()..].iter().product();
        Ok((mid, inner))
    }

    /// `x + b` where `b`'s shape equals `x.shape[axis..axis + b.rank]`.
    pub fn add_bcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (mid, inner) = self.bcast_dims("add_bcast", x, b, axis)?;
        let mut out = self.value(x).clone();
        let bv = self.value(b).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bv[(i / inner) % mid];
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddBcast { x, b, mid, inner }, ng))
    }

    /// `x * b` with the broadcasting rule of [`Tape::add_bcast`].
    pub fn mul_bcast(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (mid, inner) = self.bcast_dims("mul_bcast", x, b, axis)?;
        let mut out = self.value(x).clone();
        let bv = self.value(b).data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * bv[(i / inner) % mid];
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::MulBcast { x, b, mid, inner }, ng))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(S) -> S = match kind {
            Unary::Silu => |v| v / (S::one() + (-v).exp()),
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |v| v.tanh(),
            Unary::Exp => |v| v.exp(),
            Unary::Softplus => softplus,
        };
        let out = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(out, Op::Unary(x, kind), ng)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    /// Batched product of rank-3 tensors: `(B,M,K) x (B,K,N) -> (B,M,N)`.
    /// `ta`/`tb` read the stored operand transposed in its last two axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return shape_err("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})"));
        }
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    S::one(),
                    MatRef::new(&av[i * m * k..(i + 1) * m * k], m, k, ta),
                    MatRef::new(&bv[i * k * n..(i + 1) * k * n], k, n, tb),
                    S::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let ng = self.ng(&[a, b]);
        let t = Tensor::from_vec(&[batch, m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb, batch, m, k, n }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("perm {perm:?} for shape {shape:?}"));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_vec(&out_shape, data)?, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for shape {base:?}"));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}"));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &sz) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.ng(xs);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat { xs: xs.to_vec(), sizes, outer, inner }, ng))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut os = shape;
        os[axis] = len;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_vec(&os, out)?, Op::Narrow { x, outer, full, start, len, inner }, ng))
    }

    /// Zero padding of the last two axes: `[top, bottom, left, right]`.
    pub fn pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("pad2d", format!("{shape:?}"));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (ho, wo) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
        let planes: usize = shape[..r - 2].iter().product();
        let d = self.value(x).data();
        let mut out = vec![S::zero(); planes * ho * wo];
        for p in 0..planes {
            for y in 0..h {
                let src = &d[(p * h + y) * w..(p * h + y + 1) * w];
                let o = (p * ho + y + pads[0]) * wo + pads[2];
                out[o..o + w].copy_from_slice(src);
            }
        }
        let mut os = shape;
        os[r - 2] = ho;
        os[r - 1] = wo;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_vec(&os, out)?, Op::Pad2d { x, pads }, ng))
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("upsample2x", format!("{shape:?}"));
        }
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[..r - 2].iter().product();
        let d = self.value(x).data();
        let mut out = vec![S::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = d[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let mut os = shape;
        os[r - 2] = 2 * h;
        os[r - 1] = 2 * w;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_vec(&os, out)?, Op::Upsample2x(x), ng))
    }

    fn conv_dims(&self, op: &'static str, xs: &[usize], ws: &[usize], geom: Conv2dGeom) -> Result<ConvDims> {
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(op, format!("x {xs:?}, w {ws:?}"));
        }
        let g = geom.groups;
        if g == 0 || xs[1] % g != 0 || ws[0] % g != 0 {
            return Err(NnError::GroupsDontDivideChannels { groups: g, channels: xs[1] });
        }
        if ws[1] != xs[1] / g {
            return shape_err(op, format!("weight {ws:?} expects {} input channels per group, got {}", ws[1], xs[1] / g));
        }
        let (Some(ho), Some(wo)) = (geom.out_len(xs[2], ws[2]), geom.out_len(xs[3], ws[3])) else {
            return shape_err(op, format!("kernel {ws:?} larger than padded input {xs:?}"));
        };
        Ok(ConvDims {
            b: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho,
            wo,
            g: ConvGeomRef { stride: geom.stride, padding: geom.padding, groups: g },
        })
    }

    /// Cross-correlation: x (B,Cin,H,W), w (Cout,Cin/g,kh,kw) -> (B,Cout,H',W').
    pub fn conv2d(&mut self, x: Var, w: Var, geom: Conv2dGeom) -> Result<Var> {
        let dims = self.conv_dims("conv2d", self.shape(x), self.shape(w), geom)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &dims);
        let t = Tensor::from_vec(&[dims.b, dims.cout, dims.ho, dims.wo], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(t, Op::Conv2d { x, w, dims }, ng))
    }

    /// Adjoint of [`Tape::conv2d`] with respect to its input.
    ///
    /// x (B,Cin,H,W), w (Cin,Cout/g,kh,kw) -> (B,Cout,H',W') with
    /// `H' = (H-1)*stride - 2*padding + kh + output_padding`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: Conv2dGeom, output_padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || geom.stride == 0 {
            return shape_err("conv_transpose2d", format!("x {xs:?}, w {ws:?}"));
        }
        let g = geom.groups;
        if g == 0 || xs[1] % g != 0 {
            return Err(NnError::GroupsDontDivideChannels { groups: g, channels: xs[1] });
        }
        let full = |len: usize, k: usize| ((len - 1) * geom.stride + k + output_padding).checked_sub(2 * geom.padding);
        let (Some(ho), Some(wo)) = (full(xs[2], ws[2]), full(xs[3], ws[3])) else {
            return shape_err("conv_transpose2d", "padding exceeds output");
        };
        let cout = ws[1] * g;
        // The equivalent forward convolution maps (B,cout,ho,wo) -> x's shape.
        let dims = self.conv_dims("conv_transpose2d", &[xs[0], cout, ho, wo], &ws, geom)?;
        if dims.ho != xs[2] || dims.wo != xs[3] {
            return shape_err("conv_transpose2d", "output_padding inconsistent with stride");
        }
        let out = kernels::conv2d_backward_input(self.value(x).data(), self.value(w).data(), &dims);
        let t = Tensor::from_vec(&[xs[0], cout, ho, wo], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(t, Op::ConvTranspose2d { x, w, dims }, ng))
    }

    /// Normalizes each contiguous run of `chunk` entries to zero mean and
    /// unit variance (the shared core of group and layer norm).
    pub fn norm_chunks(&mut self, x: Var, chunk: usize, eps: f64) -> Result<Var> {
        let n = self.value(x).numel();
        if chunk == 0 || n % chunk != 0 {
            return shape_err("norm_chunks", format!("chunk {chunk} for {n} entries"));
        }
        let (out, rstd) = kernels::norm_chunks(self.value(x).data(), chunk, S::lit(eps));
        let t = Tensor::from_vec(self.shape(x), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::NormChunks { x, chunk, rstd }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let row = *self.shape(x).last().unwrap_or(&1);
        let out = kernels::softmax_rows(self.value(x).data(), row.max(1));
        let t = Tensor::from_vec(self.shape(x), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Records an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Var {
        let ng = self.ng(inputs);
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    /// Gradients of a single-element output with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients<S>> {
        if self.value(out).numel() != 1 {
            return shape_err("backward", format!("output must be scalar, got {:?}", self.shape(out)));
        }
        self.backward_with(out, Tensor::ones(self.shape(out)))
    }

    /// Backpropagates an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if seed.shape() != self.shape(out) {
            return shape_err("backward_with", format!("seed {:?} vs output {:?}", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `out` with respect to every parameter used on this tape.
    pub fn param_grads(&self, out: Var) -> Result<Vec<(ParamId, Tensor<S>)>> {
        let mut g = self.backward(out)?;
        let mut res: Vec<(ParamId, Tensor<S>)> = self
            .param_vars
            .iter()
            .map(|(&id, &v)| {
                let t = g.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (id, t)
            })
            .collect();
        res.sort_by_key(|(id, _)| *id);
        Ok(res)
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accum(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accum(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::AddBcast { x, b, mid, inner } => {
                self.accum(grads, *x, g.clone());
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![S::zero(); *mid];
                    for (j, &v) in g.data().iter().enumerate() {
                        let k = (j / inner) % mid;
                        gb[k] = gb[k] + v;
                    }
                    self.accum(grads, *b, Tensor::from_vec(self.shape(*b), gb)?);
                }
            }
            Op::MulBcast { x, b, mid, inner } => {
                let bv = self.value(*b).data();
                if self.nodes[x.0].needs_grad {
                    let mut gx = g.clone();
                    for (j, v) in gx.data_mut().iter_mut().enumerate() {
                        *v = *v * bv[(j / inner) % mid];
                    }
                    self.accum(grads, *x, gx);
                }
                if self.nodes[b.0].needs_grad {
                    let xv = self.value(*x).data();
                    let mut gb = vec![S::zero(); *mid];
                    for (j, (&gv, &xvv)) in g.data().iter().zip(xv).enumerate() {
                        let k = (j / inner) % mid;
                        gb[k] = gb[k] + gv * xvv;
                    }
                    self.accum(grads, *b, Tensor::from_vec(self.shape(*b), gb)?);
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let y = &node.value;
                let d = match kind {
                    Unary::Silu => {
                        let mut d = g.clone();
                        for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                            let s = sigmoid(v);
                            *dv = *dv * (s + v * s * (S::one() - s));
                        }
                        d
                    }
                    Unary::Sigmoid => g.zip_map(y, |gv, yv| gv * yv * (S::one() - yv)),
                    Unary::Tanh => g.zip_map(y, |gv, yv| gv * (S::one() - yv * yv)),
                    Unary::Exp => g.zip_map(y, |gv, yv| gv * yv),
                    Unary::Softplus => g.zip_map(xv, |gv, v| gv * sigmoid(v)),
                };
                self.accum(grads, *x, d);
            }
            Op::MatMul { a, b, ta, tb, batch, m, k, n } => {
                let (m, k, n, ta, tb) = (*m, *k, *n, *ta, *tb);
                let (av, bv, gv) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![S::zero(); batch * m * k];
                    for i in 0..*batch {
                        let bb = &bv[i * k * n..(i + 1) * k * n];
                        let gg = &gv[i * m * n..(i + 1) * m * n];
                        let out = &mut ga[i * m * k..(i + 1) * m * k];
                        if !ta {
                            gemm(S::one(), MatRef::new(gg, m, n, false), MatRef::new(bb, n, k, !tb), S::zero(), out);
                        } else {
                            gemm(S::one(), MatRef::new(bb, k, n, tb), MatRef::new(gg, n, m, true), S::zero(), out);
                        }
                    }
                    self.accum(grads, *a, Tensor::from_vec(self.shape(*a), ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![S::zero(); batch * k * n];
                    for i in 0..*batch {
                        let aa = &av[i * m * k..(i + 1) * m * k];
                        let gg = &gv[i * m * n..(i + 1) * m * n];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if !tb {
                            gemm(S::one(), MatRef::new(aa, k, m, !ta), MatRef::new(gg, m, n, false), S::zero(), out);
                        } else {
                            gemm(S::one(), MatRef::new(gg, n, m, true), MatRef::new(aa, m, k, ta), S::zero(), out);
                        }
                    }
                    self.accum(grads, *b, Tensor::from_vec(self.shape(*b), gb)?);
                }
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, g.clone().reshape(self.shape(*x))?);
            }
            Op::Permute(x, perm) => {
                let inv = kernels::inverse_perm(perm);
                let (d, s) = kernels::permute(g.data(), g.shape(), &inv);
                self.accum(grads, *x, Tensor::from_vec(&s, d)?);
            }
            Op::Concat { xs, sizes, outer, inner } => {
                let total: usize = sizes.iter().sum();
                let mut off = 0;
                for (&x, &sz) in xs.iter().zip(sizes) {
                    if self.nodes[x.0].needs_grad {
                        let mut part = Vec::with_capacity(outer * sz * inner);
                        for o in 0..*outer {
                            let base = (o * total + off) * inner;
                            part.extend_from_slice(&g.data()[base..base + sz * inner]);
                        }
                        self.accum(grads, x, Tensor::from_vec(self.shape(x), part)?);
                    }
                    off += sz;
                }
            }
            Op::Narrow { x, outer, full, start, len, inner } => {
                let mut gx = vec![S::zero(); outer * full * inner];
                for o in 0..*outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), gx)?);
            }
            Op::Pad2d { x, pads } => {
                let xs = self.shape(*x);
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (ho, wo) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
                let planes: usize = xs[..r - 2].iter().product();
                let mut gx = Vec::with_capacity(planes * h * w);
                for p in 0..planes {
                    for y in 0..h {
                        let o = (p * ho + y + pads[0]) * wo + pads[2];
                        gx.extend_from_slice(&g.data()[o..o + w]);
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xs, gx)?);
            }
            Op::Upsample2x(x) => {
                let xs = self.shape(*x);
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let planes: usize = xs[..r - 2].iter().product();
                let mut gx = vec![S::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let t = &mut gx[(p * h + y / 2) * w + xx / 2];
                            *t = *t + g.data()[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xs, gx)?);
            }
            Op::Conv2d { x, w, dims } => {
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::conv2d_backward_input(g.data(), self.value(*w).data(), dims);
                    self.accum(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::conv2d_backward_weight(self.value(*x).data(), g.data(), dims);
                    self.accum(grads, *w, Tensor::from_vec(self.shape(*w), dw)?);
                }
            }
            Op::ConvTranspose2d { x, w, dims } => {
                // Forward was conv2d's input adjoint with g playing the input role.
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::conv2d_forward(g.data(), self.value(*w).data(), dims);
                    self.accum(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::conv2d_backward_weight(g.data(), self.value(*x).data(), dims);
                    self.accum(grads, *w, Tensor::from_vec(self.shape(*w), dw)?);
                }
            }
            Op::NormChunks { x, chunk, rstd } => {
                let dx = kernels::norm_chunks_backward(node.value.data(), g.data(), rstd, *chunk);
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
            }
            Op::Softmax(x) => {
                let row = *node.value.shape().last().unwrap_or(&1);
                let dx = kernels::softmax_rows_backward(node.value.data(), g.data(), row.max(1));
                self.accum(grads, *x, Tensor::from_vec(self.shape(*x), dx)?);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accum(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<S>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&ins, &node.value, g);
                if gs.len() != inputs.len() {
                    return shape_err("custom", format!("{} returned {} grads for {} inputs", op.name(), gs.len(), inputs.len()));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if gi.shape() != self.shape(v) {
                            return shape_err("custom", format!("{} grad shape {:?} vs {:?}", op.name(), gi.shape(), self.shape(v)));
                        }
                        self.accum(grads, v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

pub fn softplus<S: Scalar>(v: S) -> S {
    // max(v, 0) + ln(1 + e^{-|v|})
    v.max(S::zero()) + (-v.abs()).exp().ln_1p()
}
