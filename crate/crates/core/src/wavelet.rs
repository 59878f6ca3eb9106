//! Learnable single-level 2-D wavelet transform, the wavelet node used on
//! skip paths, and the filter-pair reconstruction loss.

use rand::Rng;
use rolldiff_nn::layers::{Conv2d, GroupNorm};
use rolldiff_nn::{Conv2dGeom, Init, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::error::{ModelError, ModelResult};

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Haar pair of length `len` (even, ≥ 2): the two Haar taps sit in the
/// middle, the rest are zero.
pub fn haar_taps(len: usize) -> ([f64; 2], [f64; 2], usize) {
    assert!(len >= 2 && len % 2 == 0, "wavelet filter length must be even and at least 2");
    ([SQRT_HALF, SQRT_HALF], [SQRT_HALF, -SQRT_HALF], (len - 2) / 2)
}

fn haar_filter<S: Scalar>(len: usize, high: bool) -> Tensor<S> {
    let (lo, hi, off) = haar_taps(len);
    let taps = if high { hi } else { lo };
    let mut t = Tensor::zeros(&[len]);
    t.data_mut()[off] = S::lit(taps[0]);
    t.data_mut()[off + 1] = S::lit(taps[1]);
    t
}

/// How the filter-pair loss compares correlations with the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WaveletLossForm {
    /// Squared error at every lag against a delta of height 2.
    #[default]
    PerLag,
    /// `(Σ_k r[k] − 2)²`.
    Scalar,
}

/// Analysis (`a0`, `a1`) and synthesis (`s0`, `s1`) filter pairs.
#[derive(Clone, Debug)]
pub struct WaveletFilters {
    pub a0: ParamId,
    pub a1: ParamId,
    pub s0: ParamId,
    pub s1: ParamId,
    pub len: usize,
}

impl WaveletFilters {
    /// Haar-initialized filters named `{name}.a0` etc.
    pub fn haar<S: Scalar>(store: &mut ParamStore<S>, name: &str, len: usize) -> Self {
        WaveletFilters {
            a0: store.add(format!("{name}.a0"), haar_filter(len, false)),
            a1: store.add(format!("{name}.a1"), haar_filter(len, true)),
            s0: store.add(format!("{name}.s0"), haar_filter(len, false)),
            s1: store.add(format!("{name}.s1"), haar_filter(len, true)),
            len,
        }
    }

    fn geom(&self, channels: usize) -> Conv2dGeom {
        Conv2dGeom::new(2, (self.len - 2) / 2, channels)
    }

    /// `(4, 1, N, N)` stack of `p q_jᵀ` for (ll, lh, hl, hh), where the
    /// first factor runs down rows and the second across columns.
    pub fn kernel<S: Scalar>(tape: &mut Tape<S>, lo: Var, hi: Var) -> ModelResult<Var> {
        let n = tape.shape(lo)[0];
        let col = |t: &mut Tape<S>, v: Var| t.reshape(v, &[1, n, 1]);
        let row = |t: &mut Tape<S>, v: Var| t.reshape(v, &[1, 1, n]);
        let (lc, hc, lr, hr) = (col(tape, lo)?, col(tape, hi)?, row(tape, lo)?, row(tape, hi)?);
        let ll = tape.matmul(lc, lr, false, false)?;
        let lh = tape.matmul(lc, hr, false, false)?;
        let hl = tape.matmul(hc, lr, false, false)?;
        let hh = tape.matmul(hc, hr, false, false)?;
        let k = tape.concat(&[ll, lh, hl, hh], 0)?;
        Ok(tape.reshape(k, &[4, 1, n, n])?)
    }

    fn tiled<S: Scalar>(tape: &mut Tape<S>, lo: ParamId, hi: ParamId, channels: usize) -> ModelResult<Var> {
        let (lo, hi) = (tape.param(lo)?, tape.param(hi)?);
        let k = Self::kernel(tape, lo, hi)?;
        if channels == 1 {
            return Ok(k);
        }
        Ok(tape.concat(&vec![k; channels], 0)?)
    }

    /// `(B,C,H,W) → (B,4C,H/2,W/2)`, subbands (ll, lh, hl, hh) per channel.
    pub fn dwt2d<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> ModelResult<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(rolldiff_nn::NnError::ShapeMismatch { op: "dwt2d", detail: format!("{s:?}") }.into());
        }
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(ModelError::OddSpatialDims { h: s[2], w: s[3] });
        }
        let k = Self::tiled(tape, self.a0, self.a1, s[1])?;
        Ok(tape.conv2d(x, k, self.geom(s[1]))?)
    }

    /// Inverse of [`WaveletFilters::dwt2d`] with the synthesis filters.
    pub fn idwt2d<S: Scalar>(&self, tape: &mut Tape<S>, y: Var) -> ModelResult<Var> {
        let s = tape.shape(y).to_vec();
        if s.len() != 4 || s[1] % 4 != 0 {
            return Err(rolldiff_nn::NnError::ShapeMismatch { op: "idwt2d", detail: format!("{s:?}") }.into());
        }
        let c = s[1] / 4;
        let k = Self::tiled(tape, self.s0, self.s1, c)?;
        Ok(tape.conv_transpose2d(y, k, self.geom(c), 0)?)
    }

    /// Full cross-correlation `(a ⋆ s)[k] = Σ_i a[i]·s[i + k − (N−1)]`.
    fn xcorr<S: Scalar>(tape: &mut Tape<S>, a: Var, s: Var, n: usize) -> ModelResult<Var> {
        let s4 = tape.reshape(s, &[1, 1, 1, n])?;
        let s4 = tape.pad2d(s4, [0, 0, n - 1, n - 1])?;
        let a4 = tape.reshape(a, &[1, 1, 1, n])?;
        let r = tape.conv2d(s4, a4, Conv2dGeom::default())?;
        Ok(tape.reshape(r, &[2 * n - 1])?)
    }

    /// Distance of `a0⋆s0 + a1⋆s1` from a delta of height 2 at the center
    /// lag; zero exactly for perfect-reconstruction pairs.
    pub fn loss<S: Scalar>(&self, tape: &mut Tape<S>, form: WaveletLossForm) -> ModelResult<Var> {
        let n = self.len;
        let (a0, a1, s0, s1) = (tape.param(self.a0)?, tape.param(self.a1)?, tape.param(self.s0)?, tape.param(self.s1)?);
        let r0 = Self::xcorr(tape, a0, s0, n)?;
        let r1 = Self::xcorr(tape, a1, s1, n)?;
        let r = tape.add(r0, r1)?;
        match form {
            WaveletLossForm::PerLag => {
                let mut target = Tensor::zeros(&[2 * n - 1]);
                target.data_mut()[(2 * n - 1) / 2] = S::lit(2.0);
                let target = tape.constant(target);
                let d = tape.sub(r, target)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.sum(sq))
            }
            WaveletLossForm::Scalar => {
                let total = tape.sum(r);
                let d = tape.add_scalar(total, -2.0);
                Ok(tape.mul(d, d)?)
            }
        }
    }

    /// Loss value without gradients.
    pub fn loss_value<S: Scalar>(&self, store: &ParamStore<S>, form: WaveletLossForm) -> f64 {
        let mut tape = Tape::with_params(store);
        let l = self.loss(&mut tape, form).expect("filters belong to this store");
        tape.value(l).item().as_f64()
    }
}

/// Number of norm groups for `channels`: 8 when it divides, else the
/// largest common divisor.
pub fn norm_groups(channels: usize) -> usize {
    let (mut a, mut b) = (8, channels);
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Wavelet-domain node: `dwt → depthwise 3×3 (×r) → pointwise 1×1 → idwt`.
#[derive(Clone, Debug)]
pub struct LearnableWaveletNode {
    pub filters: WaveletFilters,
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub channels: usize,
}

impl LearnableWaveletNode {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        expansion: usize,
        filter_len: usize,
        rng: &mut R,
    ) -> Self {
        let sub = 4 * channels;
        let filters = WaveletFilters::haar(store, &format!("{name}.wavelet"), filter_len);
        let depthwise = Conv2d::he(store, &format!("{name}.depthwise"), sub, sub * expansion, 3, Conv2dGeom::new(1, 1, sub), rng);
        let pointwise = Conv2d::new(
            store,
            &format!("{name}.pointwise"),
            sub * expansion,
            sub,
            1,
            Conv2dGeom::default(),
            Init::Zeros,
            rng,
        );
        LearnableWaveletNode { filters, depthwise, pointwise, channels }
    }

    /// The transform path without the residual.
    pub fn core<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> ModelResult<Var> {
        let y = self.filters.dwt2d(tape, x)?;
        let y = self.depthwise.forward(tape, y)?;
        let y = self.pointwise.forward(tape, y)?;
        self.filters.idwt2d(tape, y)
    }

    /// `x + core(x)`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> ModelResult<Var> {
        let y = self.core(tape, x)?;
        Ok(tape.add(x, y)?)
    }
}

/// Skip-path block: `h = x + lwn(GN(x))`, `out = h + FF(GN(h))` with a
/// pointwise SiLU feed-forward.
#[derive(Clone, Debug)]
pub struct WaveletTransformBlock {
    norm1: GroupNorm,
    pub lwn: LearnableWaveletNode,
    norm2: GroupNorm,
    ff_in: Conv2d,
    ff_out: Conv2d,
}

impl WaveletTransformBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        expansion: usize,
        filter_len: usize,
        rng: &mut R,
    ) -> Self {
        let g = norm_groups(channels);
        let geom = Conv2dGeom::default();
        WaveletTransformBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), g, channels, rng),
            lwn: LearnableWaveletNode::new(store, &format!("{name}.lwn"), channels, expansion, filter_len, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), g, channels, rng),
            ff_in: Conv2d::he(store, &format!("{name}.ff_in"), channels, 2 * channels, 1, geom, rng),
            ff_out: Conv2d::new(store, &format!("{name}.ff_out"), 2 * channels, channels, 1, geom, Init::Zeros, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> ModelResult<Var> {
        let n = self.norm1.forward(tape, x)?;
        let w = self.lwn.core(tape, n)?;
        let h = tape.add(x, w)?;
        let n = self.norm2.forward(tape, h)?;
        let f = self.ff_in.forward(tape, n)?;
        let f = tape.silu(f);
        let f = self.ff_out.forward(tape, f)?;
        Ok(tape.add(h, f)?)
    }
}
