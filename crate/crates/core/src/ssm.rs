//! Diagonal state-space layers: zero-order-hold discretization, the
//! selective scan, the convolution-kernel form of a time-invariant SSM, and
//! the two-branch Mamba block.

use rand::Rng;
use rolldiff_nn::layers::{linear, LayerNorm, Linear};
use rolldiff_nn::{Conv2dGeom, CustomOp, Init, NnError, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SsmError {
    #[error("step size must be positive, got {0}")]
    NonpositiveDelta(f64),
}

/// How the input matrix is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputDiscretization {
    /// `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`.
    #[default]
    ZeroOrderHold,
    /// `B̄ = ΔB`.
    Euler,
}

const SERIES_CUTOFF: f64 = 1e-3;

/// `(e^z − 1)/z`, continuous at 0.
pub fn phi(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        z.exp_m1() / z
    }
}

/// Derivative of [`phi`].
pub fn phi_prime(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z.exp() * (z - 1.0) + 1.0) / (z * z)
    }
}

/// Scalar discretization of `h' = a h + b x` with step `delta`.
pub fn discretize(a: f64, b: f64, delta: f64, mode: InputDiscretization) -> std::result::Result<(f64, f64), SsmError> {
    if !(delta > 0.0) {
        return Err(SsmError::NonpositiveDelta(delta));
    }
    let z = delta * a;
    let bbar = match mode {
        InputDiscretization::ZeroOrderHold => phi(z) * delta * b,
        InputDiscretization::Euler => delta * b,
    };
    Ok((z.exp(), bbar))
}

/// Extents of a scan: batch, length, channels, states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub b: usize,
    pub l: usize,
    pub d: usize,
    pub n: usize,
}

/// Input-dependent scan with diagonal `A`:
/// `h_t = exp(Δ_t A) h_{t−1} + B̄_t u_t`, `y_t = C_t·h_t + D u_t`, per channel.
///
/// Shapes: `u, delta (B,L,D)`, `a (D,N)`, `bm, cm (B,L,N)`, `dskip (D)`.
/// Returns `y` and every hidden state `(B,L,D,N)`.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<S: Scalar>(
    u: &[S],
    delta: &[S],
    a: &[S],
    bm: &[S],
    cm: &[S],
    dskip: &[S],
    dims: ScanDims,
    mode: InputDiscretization,
) -> (Vec<S>, Vec<S>) {
    let ScanDims { b, l, d, n } = dims;
    let mut y = vec![S::zero(); b * l * d];
    let mut hs = vec![S::zero(); b * l * d * n];
    for bi in 0..b {
        for t in 0..l {
            let row = bi * l + t;
            let bt = &bm[row * n..(row + 1) * n];
            let ct = &cm[row * n..(row + 1) * n];
            for di in 0..d {
                let i = row * d + di;
                let (ut, dt) = (u[i], delta[i]);
                let base = i * n;
                let mut acc = dskip[di] * ut;
                for ni in 0..n {
                    let z = dt * a[di * n + ni];
                    let coef = match mode {
                        InputDiscretization::ZeroOrderHold => S::lit(phi(z.as_f64())) * dt,
                        InputDiscretization::Euler => dt,
                    };
                    let prev = if t > 0 { hs[base - d * n + ni] } else { S::zero() };
                    let h = z.exp() * prev + coef * bt[ni] * ut;
                    hs[base + ni] = h;
                    acc = acc + ct[ni] * h;
                }
                y[i] = acc;
            }
        }
    }
    (y, hs)
}

struct SelectiveScanOp<S> {
    dims: ScanDims,
    mode: InputDiscretization,
    states: Vec<S>,
}

impl<S: Scalar> CustomOp<S> for SelectiveScanOp<S> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        let ScanDims { b, l, d, n } = self.dims;
        let (u, delta, a, bm, cm, dskip) =
            (inputs[0].data(), inputs[1].data(), inputs[2].data(), inputs[3].data(), inputs[4].data(), inputs[5].data());
        let gy = grad.data();
        let hs = &self.states;
        let mut gu = vec![S::zero(); b * l * d];
        let mut gdelta = vec![S::zero(); b * l * d];
        let mut ga = vec![S::zero(); d * n];
        let mut gb = vec![S::zero(); b * l * n];
        let mut gc = vec![S::zero(); b * l * n];
        let mut gd = vec![S::zero(); d];
        let mut gh = vec![S::zero(); n];
        for bi in 0..b {
            for di in 0..d {
                gh.fill(S::zero());
                for t in (0..l).rev() {
                    let row = bi * l + t;
                    let i = row * d + di;
                    let (g, ut, dt) = (gy[i], u[i], delta[i]);
                    let base = i * n;
                    gd[di] = gd[di] + g * ut;
                    let mut gui = g * dskip[di];
                    let mut gdt = S::zero();
                    for ni in 0..n {
                        let (bn, cn) = (bm[row * n + ni], cm[row * n + ni]);
                        let h = hs[base + ni];
                        gc[row * n + ni] = gc[row * n + ni] + g * h;
                        let ghn = gh[ni] + g * cn;
                        let an = a[di * n + ni];
                        let z = dt * an;
                        let abar = z.exp();
                        let prev = if t > 0 { hs[base - d * n + ni] } else { S::zero() };
                        let g_abar = ghn * prev;
                        let g_bbar = ghn * ut;
                        let (coef, dcoef_ddt, dcoef_da) = match self.mode {
                            InputDiscretization::ZeroOrderHold => {
                                let zf = z.as_f64();
                                let (p, pp) = (S::lit(phi(zf)), S::lit(phi_prime(zf)));
                                (p * dt, p + z * pp, dt * dt * pp)
                            }
                            InputDiscretization::Euler => (dt, S::one(), S::zero()),
                        };
                        gui = gui + ghn * coef * bn;
                        gb[row * n + ni] = gb[row * n + ni] + g_bbar * coef;
                        gdt = gdt + g_abar * an * abar + g_bbar * bn * dcoef_ddt;
                        ga[di * n + ni] = ga[di * n + ni] + g_abar * dt * abar + g_bbar * bn * dcoef_da;
                        gh[ni] = ghn * abar;
                    }
                    gu[i] = gu[i] + gui;
                    gdelta[i] = gdelta[i] + gdt;
                }
            }
        }
        let t = |shape: &[usize], v: Vec<S>| Some(Tensor::from_vec(shape, v).expect("gradient shape"));
        vec![
            t(inputs[0].shape(), gu),
            t(inputs[1].shape(), gdelta),
            t(inputs[2].shape(), ga),
            t(inputs[3].shape(), gb),
            t(inputs[4].shape(), gc),
            t(inputs[5].shape(), gd),
        ]
    }
}

/// Differentiable selective scan; see [`scan_forward`] for shapes.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan<S: Scalar>(
    tape: &mut Tape<S>,
    u: Var,
    delta: Var,
    a: Var,
    bm: Var,
    cm: Var,
    dskip: Var,
    mode: InputDiscretization,
) -> Result<Var> {
    let us = tape.shape(u).to_vec();
    let as_ = tape.shape(a).to_vec();
    let bad = |detail: String| Err(NnError::ShapeMismatch { op: "selective_scan", detail });
    if us.len() != 3 || as_.len() != 2 || as_[0] != us[2] {
        return bad(format!("u {us:?}, a {as_:?}"));
    }
    let dims = ScanDims { b: us[0], l: us[1], d: us[2], n: as_[1] };
    let bn = [dims.b, dims.l, dims.n];
    if tape.shape(delta) != us.as_slice()
        || tape.shape(bm) != bn
        || tape.shape(cm) != bn
        || tape.shape(dskip) != [dims.d]
    {
        return bad(format!(
            "delta {:?}, B {:?}, C {:?}, D {:?} for u {us:?}",
            tape.shape(delta),
            tape.shape(bm),
            tape.shape(cm),
            tape.shape(dskip)
        ));
    }
    let (y, states) = scan_forward(
        tape.value(u).data(),
        tape.value(delta).data(),
        tape.value(a).data(),
        tape.value(bm).data(),
        tape.value(cm).data(),
        tape.value(dskip).data(),
        dims,
        mode,
    );
    let out = Tensor::from_vec(&us, y)?;
    Ok(tape.custom(&[u, delta, a, bm, cm, dskip], out, Box::new(SelectiveScanOp { dims, mode, states })))
}

/// Impulse response `K[k] = Σ_n c_n ā_n^k b̄_n` of a time-invariant
/// diagonal SSM.
pub fn ssm_kernel(abar: &[f64], bbar: &[f64], c: &[f64], len: usize) -> Vec<f64> {
    let mut pow: Vec<f64> = vec![1.0; abar.len()];
    (0..len)
        .map(|_| {
            let k = (0..abar.len()).map(|i| c[i] * pow[i] * bbar[i]).sum();
            for (p, a) in pow.iter_mut().zip(abar) {
                *p *= a;
            }
            k
        })
        .collect()
}

/// `y[t] = Σ_{j ≤ t} k[j]·x[t − j]`.
pub fn causal_conv(x: &[f64], k: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|t| (0..=t.min(k.len().saturating_sub(1))).map(|j| k[j] * x[t - j]).sum()).collect()
}

/// Convolution form of a time-invariant SSM over each row of `x (B, L)`.
pub fn ssm_kernel_conv(x: &[f64], batch: usize, abar: &[f64], bbar: &[f64], c: &[f64]) -> Vec<f64> {
    let l = x.len() / batch.max(1);
    let k = ssm_kernel(abar, bbar, c, l);
    x.chunks(l.max(1)).flat_map(|row| causal_conv(row, &k)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaConfig {
    pub state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub discretization: InputDiscretization,
    pub use_skip: bool,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig { state: 8, expand: 2, conv_width: 4, discretization: InputDiscretization::ZeroOrderHold, use_skip: true }
    }
}

/// Pre-norm two-branch block on `(B, L, C)`: a conv → SiLU → selective scan
/// branch gated by a SiLU branch, merged by a Hadamard product and
/// projected back to C channels. The residual is left to the caller.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: MambaConfig,
    pub channels: usize,
    norm: LayerNorm,
    in_x: Linear,
    in_z: Linear,
    conv_w: ParamId,
    conv_b: ParamId,
    proj_b: Linear,
    proj_c: Linear,
    proj_dt: Linear,
    dt_bias: ParamId,
    pub a_log: ParamId,
    pub skip: Option<ParamId>,
    pub out: Linear,
}

impl MambaBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        cfg: MambaConfig,
        rng: &mut R,
    ) -> Self {
        let e = channels * cfg.expand;
        let n = cfg.state;
        let he = |fan_in| Init::HeNormal { fan_in };
        let glorot = |i, o| Init::Glorot { fan_in: i, fan_out: o };
        let norm = LayerNorm::new(store, &format!("{name}.norm"), channels, rng);
        let in_x = Linear::new(store, &format!("{name}.in_x"), channels, e, false, he(channels), rng);
        let in_z = Linear::new(store, &format!("{name}.in_z"), channels, e, false, he(channels), rng);
        let conv_w = store.init(format!("{name}.conv.weight"), &[e, 1, 1, cfg.conv_width], he(cfg.conv_width), rng);
        let conv_b = store.init(format!("{name}.conv.bias"), &[e], Init::Zeros, rng);
        let proj_b = Linear::new(store, &format!("{name}.proj_b"), e, n, false, glorot(e, n), rng);
        let proj_c = Linear::new(store, &format!("{name}.proj_c"), e, n, false, glorot(e, n), rng);
        let proj_dt = Linear::new(store, &format!("{name}.proj_dt"), e, 1, false, Init::Normal(0.1 / (e as f64).sqrt()), rng);
        // softplus(bias) log-uniform in [1e-3, 1e-1].
        let bias: Vec<S> = (0..e)
            .map(|_| {
                let dt = (rng.random::<f64>() * (0.1f64.ln() - 1e-3f64.ln()) + 1e-3f64.ln()).exp();
                S::lit(dt.exp_m1().ln())
            })
            .collect();
        let dt_bias = store.add(format!("{name}.dt_bias"), Tensor::from_vec(&[e], bias).expect("bias shape"));
        let a_log: Vec<S> = (0..e).flat_map(|_| (0..n).map(|i| S::lit(((i + 1) as f64).ln()))).collect();
        let a_log = store.add(format!("{name}.a_log"), Tensor::from_vec(&[e, n], a_log).expect("a_log shape"));
        let skip = cfg.use_skip.then(|| store.init(format!("{name}.skip"), &[e], Init::Ones, rng));
        let out = Linear::new(store, &format!("{name}.out"), e, channels, false, Init::Zeros, rng);
        MambaBlock { cfg, channels, norm, in_x, in_z, conv_w, conv_b, proj_b, proj_c, proj_dt, dt_bias, a_log, skip, out }
    }

    /// Depthwise causal convolution along L of `x (B, L, E)`.
    fn causal_conv<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, l, e) = (s[0], s[1], s[2]);
        let xt = tape.permute(x, &[0, 2, 1])?;
        let xt = tape.reshape(xt, &[b, e, 1, l])?;
        let xt = tape.pad2d(xt, [0, 0, self.cfg.conv_width - 1, 0])?;
        let w = tape.param(self.conv_w)?;
        let y = tape.conv2d(xt, w, Conv2dGeom::new(1, 0, e))?;
        let bias = tape.param(self.conv_b)?;
        let y = tape.add_bcast(y, bias, 1)?;
        let y = tape.reshape(y, &[b, e, l])?;
        tape.permute(y, &[0, 2, 1])
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.channels {
            return Err(NnError::ShapeMismatch { op: "mamba_block", detail: format!("{s:?} for {} channels", self.channels) });
        }
        let e = self.channels * self.cfg.expand;
        let xn = self.norm.forward(tape, x)?;
        let xi = self.in_x.forward(tape, xn)?;
        let xc = self.causal_conv(tape, xi)?;
        let u = tape.silu(xc);

        let bm = self.proj_b.forward(tape, u)?;
        let cm = self.proj_c.forward(tape, u)?;
        let dt = self.proj_dt.forward(tape, u)?;
        let spread = tape.constant(Tensor::ones(&[e, 1]));
        let dt = linear(tape, dt, spread, None)?;
        let dt_bias = tape.param(self.dt_bias)?;
        let dt = tape.add_bcast(dt, dt_bias, 2)?;
        let delta = tape.softplus(dt);
        let a_log = tape.param(self.a_log)?;
        let a = tape.exp(a_log);
        let a = tape.scale(a, -1.0);
        let dskip = match self.skip {
            Some(id) => tape.param(id)?,
            None => tape.constant(Tensor::zeros(&[e])),
        };
        let y = selective_scan(tape, u, delta, a, bm, cm, dskip, self.cfg.discretization)?;

        let z = self.in_z.forward(tape, xn)?;
        let z = tape.silu(z);
        let merged = tape.mul(y, z)?;
        self.out.forward(tape, merged)
    }
}
