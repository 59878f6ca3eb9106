//! Parameterized building blocks composed from tape primitives.

use rand::Rng;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::Conv2dGeom;
use crate::param::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// `y = x W^T + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), &[d_out, d_in], init, rng);
        let bias = bias.then(|| store.init(format!("{name}.bias"), &[d_out], Init::Zeros, rng));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = self.bias.map(|b| tape.param(b)).transpose()?;
        linear(tape, x, w, b)
    }
}

/// `x (..., Din) -> (..., Dout)` with `w (Dout, Din)` and optional `b (Dout)`.
pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    let Some(&d_in) = xs.last() else {
        return shape_err("linear", "rank-0 input");
    };
    if ws.len() != 2 || ws[1] != d_in {
        return shape_err("linear", format!("x {xs:?}, w {ws:?}"));
    }
    let rows = xs.iter().product::<usize>() / d_in.max(1);
    let x2 = tape.reshape(x, &[1, rows, d_in])?;
    let w3 = tape.reshape(w, &[1, ws[0], d_in])?;
    let y = tape.matmul(x2, w3, false, true)?;
    let mut out_shape = xs;
    *out_shape.last_mut().unwrap() = ws[0];
    let y = tape.reshape(y, &out_shape)?;
    match b {
        Some(b) => tape.add_bcast(y, b, out_shape.len() - 1),
        None => Ok(y),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: Conv2dGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: Conv2dGeom,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), &[c_out, c_in / geom.groups, kernel, kernel], init, rng);
        let bias = Some(store.init(format!("{name}.bias"), &[c_out], Init::Zeros, rng));
        Conv2d { weight, bias, geom }
    }

    /// He-normal initialized convolution with bias.
    pub fn he<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        geom: Conv2dGeom,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in / geom.groups * kernel * kernel;
        Self::new(store, name, c_in, c_out, kernel, geom, Init::HeNormal { fan_in }, rng)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let y = tape.conv2d(x, w, self.geom)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b)?;
                tape.add_bcast(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

/// Group normalization over (B, C, ...) with per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, groups: usize, channels: usize, rng: &mut R) -> Self {
        let gamma = store.init(format!("{name}.gamma"), &[channels], Init::Ones, rng);
        let beta = store.init(format!("{name}.beta"), &[channels], Init::Zeros, rng);
        GroupNorm { groups, gamma, beta, eps: 1e-5 }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma)?;
        let b = tape.param(self.beta)?;
        group_norm(tape, x, self.groups, Some((g, b)), self.eps)
    }
}

pub fn group_norm<S: Scalar>(tape: &mut Tape<S>, x: Var, groups: usize, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() < 2 {
        return shape_err("group_norm", format!("{xs:?}"));
    }
    let c = xs[1];
    if groups == 0 || c % groups != 0 {
        return Err(NnError::GroupsDontDivideChannels { groups, channels: c });
    }
    let spatial: usize = xs[2..].iter().product();
    let y = tape.norm_chunks(x, c / groups * spatial, eps)?;
    match affine {
        Some((g, b)) => {
            let y = tape.mul_bcast(y, g, 1)?;
            tape.add_bcast(y, b, 1)
        }
        None => Ok(y),
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, dim: usize, rng: &mut R) -> Self {
        let gamma = store.init(format!("{name}.gamma"), &[dim], Init::Ones, rng);
        let beta = store.init(format!("{name}.beta"), &[dim], Init::Zeros, rng);
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let d = *tape.shape(x).last().unwrap_or(&1);
        let rank = tape.shape(x).len();
        let y = tape.norm_chunks(x, d, self.eps)?;
        let g = tape.param(self.gamma)?;
        let b = tape.param(self.beta)?;
        let y = tape.mul_bcast(y, g, rank - 1)?;
        tape.add_bcast(y, b, rank - 1)
    }
}

/// `softmax(q k^T / sqrt(d)) v` for q (B,h,Lq,d), k and v (B,h,Lk,d).
pub fn attention<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if qs.len() != 4 || ks.len() != 4 || ks != vs || qs[0] != ks[0] || qs[1] != ks[1] || qs[3] != ks[3] {
        return shape_err("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}"));
    }
    let (b, h, lq, d) = (qs[0], qs[1], qs[2], qs[3]);
    let lk = ks[2];
    let q3 = tape.reshape(q, &[b * h, lq, d])?;
    let k3 = tape.reshape(k, &[b * h, lk, d])?;
    let v3 = tape.reshape(v, &[b * h, lk, d])?;
    let scores = tape.matmul(q3, k3, false, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let p = tape.softmax(scores)?;
    let o = tape.matmul(p, v3, false, false)?;
    tape.reshape(o, &[b, h, lq, d])
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// `out_init` is applied to the output projection, letting residual
    /// branches start at zero.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        let g = |i, o| Init::Glorot { fan_in: i, fan_out: o };
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, g(dim, dim), rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, false, g(kv_dim, dim), rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, false, g(kv_dim, dim), rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, out_init, rng),
            heads,
        }
    }

    fn split_heads<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, l, c) = (s[0], s[1], s[2]);
        let x = tape.reshape(x, &[b, l, self.heads, c / self.heads])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// x (B,Lq,C), ctx (B,Lk,Ckv) -> (B,Lq,C).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, ctx: Var) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[2] % self.heads != 0 {
            return shape_err("multi_head_attention", format!("{xs:?} with {} heads", self.heads));
        }
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, ctx)?;
        let v = self.v.forward(tape, ctx)?;
        let (q, k, v) = (self.split_heads(tape, q)?, self.split_heads(tape, k)?, self.split_heads(tape, v)?);
        let o = attention(tape, q, k, v)?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &xs)?;
        self.o.forward(tape, o)
    }
}
