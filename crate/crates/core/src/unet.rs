//! Denoising U-Net: residual blocks, Transformer-Mamba blocks with chord
//! cross-attention, wavelet-filtered skips, and the conditioning front end.

use rand::Rng;
use rolldiff_nn::layers::{Conv2d, GroupNorm, LayerNorm, Linear, MultiHeadAttention};
use rolldiff_nn::{Conv2dGeom, Init, NnError, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use crate::chords::{ChordEncoder, LATENT_DIM};
use crate::error::{ModelError, ModelResult};
use crate::ssm::{MambaBlock, MambaConfig};
use crate::wavelet::{norm_groups, WaveletFilters, WaveletTransformBlock};

pub const TIME_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Transformer-Mamba blocks run at levels with at most this many pixels.
    pub attn_max_tokens: usize,
    pub res_blocks: usize,
    pub heads: usize,
    /// Diffusion steps; the network accepts `0 ≤ t < max_time`.
    pub max_time: usize,
    pub enable_wavelet_skips: bool,
    pub enable_mamba: bool,
    pub wavelet_filter_len: usize,
    pub wavelet_expansion: usize,
    pub mamba: MambaConfig,
}

impl UNetConfig {
    pub fn paper() -> Self {
        UNetConfig {
            in_channels: 2,
            base_channels: 64,
            channel_mults: vec![1, 2, 4],
            attn_max_tokens: 1024,
            res_blocks: 1,
            heads: 4,
            max_time: 1000,
            enable_wavelet_skips: true,
            enable_mamba: true,
            wavelet_filter_len: 2,
            wavelet_expansion: 2,
            mamba: MambaConfig::default(),
        }
    }

    pub fn desk() -> Self {
        UNetConfig { base_channels: 16, attn_max_tokens: 256, ..Self::paper() }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be non-empty and positive");
        }
        if self.base_channels == 0 || self.res_blocks == 0 || self.heads == 0 || self.max_time == 0 {
            return bad("base_channels, res_blocks, heads and max_time must be positive");
        }
        if self.channel_mults.iter().any(|m| (m * self.base_channels) % self.heads != 0) {
            return bad("every level width must be divisible by heads");
        }
        if self.wavelet_filter_len < 2 || self.wavelet_filter_len % 2 != 0 {
            return bad("wavelet_filter_len must be even and at least 2");
        }
        Ok(())
    }
}

/// Interleaved `sin(t·ω_k), cos(t·ω_k)` with `ω_k` geometric from 1 down
/// to 1/10000.
pub fn time_features(t: usize, max_time: usize) -> ModelResult<[f64; TIME_DIM]> {
    if t >= max_time {
        return Err(ModelError::StepOutOfRange { t, max: max_time.saturating_sub(1) });
    }
    let half = TIME_DIM / 2;
    let mut out = [0.0; TIME_DIM];
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / (half - 1) as f64);
        let a = t as f64 * w;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    fc1: Linear,
    fc2: Linear,
    max_time: usize,
}

impl TimeEmbedding {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, max_time: usize, rng: &mut R) -> Self {
        let he = Init::HeNormal { fan_in: TIME_DIM };
        TimeEmbedding {
            fc1: Linear::new(store, &format!("{name}.fc1"), TIME_DIM, TIME_DIM, true, he, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), TIME_DIM, TIME_DIM, true, he, rng),
            max_time,
        }
    }

    /// `(B) steps → (B,128)`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, t: &[usize]) -> ModelResult<Var> {
        let mut data = Vec::with_capacity(t.len() * TIME_DIM);
        for &ti in t {
            data.extend(time_features(ti, self.max_time)?.iter().map(|&v| S::lit(v)));
        }
        let f = tape.constant(Tensor::from_vec(&[t.len(), TIME_DIM], data)?);
        let h = self.fc1.forward(tape, f)?;
        let h = tape.silu(h);
        Ok(self.fc2.forward(tape, h)?)
    }
}

/// `GN → SiLU → conv3 → +temb → GN → SiLU → conv3` with a residual that is
/// projected by a 1×1 conv when the width changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let same = Conv2dGeom::new(1, 1, 1);
        ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), norm_groups(c_in), c_in, rng),
            conv1: Conv2d::he(store, &format!("{name}.conv1"), c_in, c_out, 3, same, rng),
            temb: Linear::new(store, &format!("{name}.temb"), TIME_DIM, c_out, true, Init::Glorot { fan_in: TIME_DIM, fan_out: c_out }, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), norm_groups(c_out), c_out, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, same, Init::Zeros, rng),
            skip: (c_in != c_out)
                .then(|| Conv2d::he(store, &format!("{name}.skip"), c_in, c_out, 1, Conv2dGeom::default(), rng)),
        }
    }

    /// `temb_act` is `SiLU(temb)`, shape (B,128).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, temb_act: Var) -> ModelResult<Var> {
        let h = self.norm1.forward(tape, x)?;
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, h)?;
        let tb = self.temb.forward(tape, temb_act)?;
        let h = tape.add_bcast(h, tb, 0)?;
        let h = self.norm2.forward(tape, h)?;
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, h)?;
        let r = match &self.skip {
            Some(s) => s.forward(tape, x)?,
            None => x,
        };
        Ok(tape.add(r, h)?)
    }
}

fn to_tokens<S: Scalar>(tape: &mut Tape<S>, x: Var) -> ModelResult<(Var, [usize; 4])> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(NnError::ShapeMismatch { op: "to_tokens", detail: format!("{s:?}") }.into());
    }
    let dims = [s[0], s[1], s[2], s[3]];
    let t = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok((tape.permute(t, &[0, 2, 1])?, dims))
}

fn from_tokens<S: Scalar>(tape: &mut Tape<S>, t: Var, dims: [usize; 4]) -> ModelResult<Var> {
    let x = tape.permute(t, &[0, 2, 1])?;
    Ok(tape.reshape(x, &dims)?)
}

/// Pre-norm self-attention, cross-attention onto the condition token, and
/// a ×4 SiLU feed-forward, each residual.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, dim, heads, Init::Zeros, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, LATENT_DIM, heads, Init::Zeros, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim, rng),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, 4 * dim, true, Init::HeNormal { fan_in: dim }, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 4 * dim, dim, true, Init::Zeros, rng),
        }
    }

    /// `x (B,L,C)`, `cond (B,1,512)`.
    pub fn forward_tokens<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, cond: Var) -> ModelResult<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.self_attn.forward(tape, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let a = self.cross_attn.forward(tape, h, cond)?;
        let x = tape.add(x, a)?;
        let h = self.ln3.forward(tape, x)?;
        let h = self.ff_in.forward(tape, h)?;
        let h = tape.silu(h);
        let h = self.ff_out.forward(tape, h)?;
        Ok(tape.add(x, h)?)
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, cond: Var) -> ModelResult<Var> {
        let (t, dims) = to_tokens(tape, x)?;
        let y = self.forward_tokens(tape, t, cond)?;
        from_tokens(tape, y, dims)
    }
}

/// Transformer followed by a residual Mamba stage over the flattened
/// pixels; without Mamba it is the transformer alone.
#[derive(Clone, Debug)]
pub struct TransformerMamba {
    pub transformer: TransformerBlock,
    pub mamba: Option<MambaBlock>,
}

impl TransformerMamba {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        cfg: &UNetConfig,
        rng: &mut R,
    ) -> Self {
        let transformer = TransformerBlock::new(store, &format!("{name}.transformer"), dim, cfg.heads, rng);
        let mamba = cfg.enable_mamba.then(|| MambaBlock::new(store, &format!("{name}.mamba"), dim, cfg.mamba, rng));
        TransformerMamba { transformer, mamba }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, cond: Var) -> ModelResult<Var> {
        let (t, dims) = to_tokens(tape, x)?;
        let mut y = self.transformer.forward_tokens(tape, t, cond)?;
        if let Some(m) = &self.mamba {
            let z = m.forward(tape, y)?;
            y = tape.add(y, z)?;
        }
        from_tokens(tape, y, dims)
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: Vec<ResBlock>,
    tm: Option<TransformerMamba>,
}

impl Level {
    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, mut h: Var, temb: Var, cond: Var) -> ModelResult<Var> {
        for r in &self.res {
            h = r.forward(tape, h, temb)?;
        }
        if let Some(tm) = &self.tm {
            h = tm.forward(tape, h, cond)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    time: TimeEmbedding,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid_res1: ResBlock,
    mid_tm: TransformerMamba,
    mid_res2: ResBlock,
    skip_wtb: Vec<Option<WaveletTransformBlock>>,
    up: Vec<Level>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    pub conv_out: Conv2d,
    /// Pixel count at level 0 that the attention placement was built for.
    resolution: (usize, usize),
}

impl UNet {
    /// Builds a network for `(H, W)` inputs; attention placement depends
    /// on the pixel count at each level.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &UNetConfig,
        resolution: (usize, usize),
        rng: &mut R,
    ) -> ModelResult<Self> {
        cfg.validate()?;
        let levels = cfg.levels();
        let f = 1usize << levels;
        if resolution.0 % f != 0 || resolution.1 % f != 0 {
            return Err(ModelError::Config(format!(
                "resolution {resolution:?} must be divisible by {f} for {levels} levels"
            )));
        }
        let width: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
        let tokens = |i: usize| (resolution.0 >> i) * (resolution.1 >> i);
        let same = Conv2dGeom::new(1, 1, 1);
        let time = TimeEmbedding::new(store, &format!("{name}.time"), cfg.max_time, rng);
        let conv_in = Conv2d::he(store, &format!("{name}.conv_in"), cfg.in_channels, width[0], 3, same, rng);

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut skip_wtb = Vec::new();
        let mut prev = width[0];
        for (i, &w) in width.iter().enumerate() {
            let res = (0..cfg.res_blocks)
                .map(|j| ResBlock::new(store, &format!("{name}.down{i}.res{j}"), if j == 0 { prev } else { w }, w, rng))
                .collect();
            let tm = (tokens(i) <= cfg.attn_max_tokens)
                .then(|| TransformerMamba::new(store, &format!("{name}.down{i}.tm"), w, cfg, rng));
            down.push(Level { res, tm });
            skip_wtb.push(cfg.enable_wavelet_skips.then(|| {
                WaveletTransformBlock::new(store, &format!("{name}.skip{i}.wtb"), w, cfg.wavelet_expansion, cfg.wavelet_filter_len, rng)
            }));
            if i + 1 < levels {
                downsample.push(Conv2d::he(store, &format!("{name}.down{i}.downsample"), w, w, 3, Conv2dGeom::new(2, 1, 1), rng));
            }
            prev = w;
        }
        let wl = width[levels - 1];
        let mid_res1 = ResBlock::new(store, &format!("{name}.mid.res1"), wl, wl, rng);
        let mid_tm = TransformerMamba::new(store, &format!("{name}.mid.tm"), wl, cfg, rng);
        let mid_res2 = ResBlock::new(store, &format!("{name}.mid.res2"), wl, wl, rng);

        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for i in (0..levels).rev() {
            let w = width[i];
            let res = (0..cfg.res_blocks)
                .map(|j| ResBlock::new(store, &format!("{name}.up{i}.res{j}"), if j == 0 { 2 * w } else { w }, w, rng))
                .collect();
            let tm = (tokens(i) <= cfg.attn_max_tokens)
                .then(|| TransformerMamba::new(store, &format!("{name}.up{i}.tm"), w, cfg, rng));
            up.push(Level { res, tm });
            if i > 0 {
                upsample.push(Conv2d::he(store, &format!("{name}.up{i}.upsample"), w, width[i - 1], 3, same, rng));
            }
        }
        let norm_out = GroupNorm::new(store, &format!("{name}.norm_out"), norm_groups(width[0]), width[0], rng);
        let conv_out = Conv2d::new(store, &format!("{name}.conv_out"), width[0], cfg.in_channels, 3, same, Init::Zeros, rng);
        Ok(UNet {
            config: cfg.clone(),
            time,
            conv_in,
            down,
            downsample,
            mid_res1,
            mid_tm,
            mid_res2,
            skip_wtb,
            up,
            upsample,
            norm_out,
            conv_out,
            resolution,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    /// Filters of every wavelet node in the network.
    pub fn wavelet_filters(&self) -> Vec<&WaveletFilters> {
        self.skip_wtb.iter().flatten().map(|w| &w.lwn.filters).collect()
    }

    /// `x (B,C,H,W)`, steps `t` (B), `cond (B,512)` → ε̂ (B,C,H,W).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, t: &[usize], cond: Var) -> ModelResult<Var> {
        let s = tape.shape(x).to_vec();
        let (h, w) = self.resolution;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != h || s[3] != w || t.len() != s[0] {
            return Err(NnError::ShapeMismatch {
                op: "unet",
                detail: format!("input {s:?} with {} steps, built for (B,{},{h},{w})", t.len(), self.config.in_channels),
            }
            .into());
        }
        if tape.shape(cond) != [s[0], LATENT_DIM] {
            return Err(NnError::ShapeMismatch { op: "unet", detail: format!("cond {:?}", tape.shape(cond)) }.into());
        }
        let cond = tape.reshape(cond, &[s[0], 1, LATENT_DIM])?;
        let temb = self.time.forward(tape, t)?;
        let temb = tape.silu(temb);

        let mut hcur = self.conv_in.forward(tape, x)?;
        let mut skips = Vec::new();
        for (i, level) in self.down.iter().enumerate() {
            hcur = level.forward(tape, hcur, temb, cond)?;
            skips.push(hcur);
            if let Some(d) = self.downsample.get(i) {
                hcur = d.forward(tape, hcur)?;
            }
        }
        hcur = self.mid_res1.forward(tape, hcur, temb)?;
        hcur = self.mid_tm.forward(tape, hcur, cond)?;
        hcur = self.mid_res2.forward(tape, hcur, temb)?;

        for (k, level) in self.up.iter().enumerate() {
            let i = self.down.len() - 1 - k;
            let mut skip = skips[i];
            if let Some(wtb) = &self.skip_wtb[i] {
                skip = wtb.forward(tape, skip)?;
            }
            hcur = tape.concat(&[hcur, skip], 1)?;
            hcur = level.forward(tape, hcur, temb, cond)?;
            if let Some(u) = self.upsample.get(k) {
                hcur = tape.upsample2x(hcur)?;
                hcur = u.forward(tape, hcur)?;
            }
        }
        let hcur = self.norm_out.forward(tape, hcur)?;
        let hcur = tape.silu(hcur);
        Ok(self.conv_out.forward(tape, hcur)?)
    }
}

/// Chord encoder, learned null condition, and the U-Net.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub encoder: ChordEncoder,
    pub null_token: ParamId,
    pub unet: UNet,
}

impl Denoiser {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: &UNetConfig,
        resolution: (usize, usize),
        rng: &mut R,
    ) -> ModelResult<Self> {
        let encoder = ChordEncoder::new(store, "chord", rng);
        let null_token = store.init("null_cond", &[LATENT_DIM], Init::Normal(0.5), rng);
        let unet = UNet::new(store, "unet", cfg, resolution, rng)?;
        Ok(Denoiser { encoder, null_token, unet })
    }

    /// `(B,512)` condition: the encoded chords where `keep[i]`, the null
    /// token elsewhere. `chords` may be `None` only when nothing is kept.
    pub fn condition<S: Scalar>(&self, tape: &mut Tape<S>, chords: Option<Var>, keep: &[bool]) -> ModelResult<Var> {
        let b = keep.len();
        if b == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let null = tape.param(self.null_token)?;
        let zeros = tape.constant(Tensor::zeros(&[b, LATENT_DIM]));
        let nulls = tape.add_bcast(zeros, null, 1)?;
        if keep.iter().all(|k| !k) {
            return Ok(nulls);
        }
        let chords = chords.ok_or_else(|| ModelError::Config("conditioned items need chords".into()))?;
        let enc = self.encoder.forward(tape, chords)?;
        if tape.shape(enc)[0] != b {
            return Err(NnError::ShapeMismatch { op: "condition", detail: format!("{} chord rows for {b} items", tape.shape(enc)[0]) }.into());
        }
        if keep.iter().all(|&k| k) {
            return Ok(enc);
        }
        let m: Vec<S> = keep.iter().map(|&k| S::lit(if k { 1.0 } else { 0.0 })).collect();
        let inv: Vec<S> = keep.iter().map(|&k| S::lit(if k { 0.0 } else { 1.0 })).collect();
        let m = tape.constant(Tensor::from_vec(&[b], m)?);
        let inv = tape.constant(Tensor::from_vec(&[b], inv)?);
        let a = tape.mul_bcast(enc, m, 0)?;
        let n = tape.mul_bcast(nulls, inv, 0)?;
        Ok(tape.add(a, n)?)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        t: &[usize],
        chords: Option<Var>,
        keep: &[bool],
    ) -> ModelResult<Var> {
        let cond = self.condition(tape, chords, keep)?;
        self.unet.forward(tape, x, t, cond)
    }

    pub fn wavelet_filters(&self) -> Vec<&WaveletFilters> {
        self.unet.wavelet_filters()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rolldiff_nn::gradcheck::param_grad_check;

    fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
        for p in store.iter_mut() {
            let n = Tensor::randn(p.value.shape(), std, rng);
            p.value.add_assign(&n);
        }
    }

    fn toy() -> UNetConfig {
        UNetConfig { base_channels: 16, channel_mults: vec![1, 2], attn_max_tokens: 64, ..UNetConfig::desk() }
    }

    fn chords(b: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(&[b, 32, 36], (0..b * 32 * 36).map(|_| if rng.random::<f64>() < 0.2 { 1.0 } else { 0.0 }).collect())
            .unwrap()
    }

    #[test]
    fn time_features_match_definition() {
        let f0 = time_features(0, 1000).unwrap();
        for k in 0..64 {
            assert_eq!((f0[2 * k], f0[2 * k + 1]), (0.0, 1.0));
        }
        let f = time_features(7, 1000).unwrap();
        assert!((f[0] - 7f64.sin()).abs() < 1e-15 && (f[1] - 7f64.cos()).abs() < 1e-15);
        assert!((f[126] - (7e-4f64).sin()).abs() < 1e-15);
        let all: Vec<_> = (0..1000).map(|t| time_features(t, 1000).unwrap()).collect();
        for a in 0..all.len() {
            for b in a + 1..all.len() {
                assert_ne!(all[a], all[b]);
            }
        }
        assert!(matches!(time_features(1000, 1000), Err(ModelError::StepOutOfRange { .. })));
    }

    #[test]
    fn res_block_shapes_and_zero_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let rb = ResBlock::new(&mut store, "rb", 32, 64, &mut rng);
        let same = ResBlock::new(&mut store, "rb2", 16, 16, &mut rng);
        let mut t = Tape::with_params(&store);
        let x = t.constant(Tensor::randn(&[1, 32, 16, 16], 1.0, &mut rng));
        let temb = t.constant(Tensor::randn(&[1, TIME_DIM], 1.0, &mut rng));
        let y = rb.forward(&mut t, x, temb).unwrap();
        assert_eq!(t.shape(y), &[1, 64, 16, 16]);
        let proj = rb.skip.as_ref().unwrap().forward(&mut t, x).unwrap();
        assert_eq!(t.value(y), t.value(proj));
        let xv = Tensor::randn(&[2, 16, 4, 4], 1.0, &mut rng);
        let x = t.constant(xv.clone());
        let temb = t.constant(Tensor::randn(&[2, TIME_DIM], 1.0, &mut rng));
        let y = same.forward(&mut t, x, temb).unwrap();
        assert_eq!(t.value(y), &xv);
    }

    #[test]
    fn transformer_blocks_keep_shape_and_see_the_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cfg = UNetConfig::desk();
        let tm = TransformerMamba::new(&mut store, "tm", 16, &cfg, &mut rng);
        let plain = TransformerMamba::new(&mut store, "plain", 16, &UNetConfig { enable_mamba: false, ..cfg }, &mut rng);
        perturb(&mut store, &mut rng, 0.1);
        let x = Tensor::randn(&[1, 16, 8, 8], 1.0, &mut rng);
        let run = |block: &TransformerMamba, c: &Tensor<f64>| {
            let mut t = Tape::with_params(&store);
            let xv = t.constant(x.clone());
            let cv = t.constant(c.clone());
            let y = block.forward(&mut t, xv, cv).unwrap();
            t.value(y).clone()
        };
        let c1 = Tensor::randn(&[1, 1, LATENT_DIM], 1.0, &mut rng);
        let c2 = Tensor::randn(&[1, 1, LATENT_DIM], 1.0, &mut rng);
        let y = run(&tm, &c1);
        assert_eq!(y.shape(), &[1, 16, 8, 8]);
        assert_eq!(y, run(&tm, &c1));
        assert!(y.zip_map(&run(&tm, &c2), |a, b| a - b).max_abs() > 1e-6);

        // Without Mamba the block is exactly the transformer.
        let mut t = Tape::with_params(&store);
        let xv = t.constant(x.clone());
        let cv = t.constant(c1.clone());
        let direct = plain.transformer.forward(&mut t, xv, cv).unwrap();
        assert_eq!(t.value(direct), &run(&plain, &c1));
        assert!(plain.mamba.is_none());
    }

    #[test]
    fn transformer_mamba_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let tm = TransformerMamba::new(&mut store, "tm", 8, &UNetConfig::desk(), &mut rng);
        perturb(&mut store, &mut rng, 0.1);
        let x = store.add("input", Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng));
        let c = Tensor::randn(&[1, 1, LATENT_DIM], 1.0, &mut rng);
        let proj = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut rng);
        let err = param_grad_check(
            &store,
            |t| {
                let xv = t.param(x)?;
                let cv = t.constant(c.clone());
                let y = tm.forward(t, xv, cv).unwrap();
                let p = t.constant(proj.clone());
                let m = t.mul(y, p)?;
                Ok(t.sum(m))
            },
            1e-5,
            6,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err:e}");
    }

    #[test]
    fn res_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let rb = ResBlock::new(&mut store, "rb", 8, 16, &mut rng);
        perturb(&mut store, &mut rng, 0.1);
        let x = store.add("input", Tensor::randn(&[2, 8, 4, 4], 1.0, &mut rng));
        let temb = Tensor::randn(&[2, TIME_DIM], 1.0, &mut rng);
        let proj = Tensor::randn(&[2, 16, 4, 4], 1.0, &mut rng);
        let err = param_grad_check(
            &store,
            |t| {
                let xv = t.param(x)?;
                let tv = t.constant(temb.clone());
                let y = rb.forward(t, xv, tv).unwrap();
                let p = t.constant(proj.clone());
                let m = t.mul(y, p)?;
                Ok(t.sum(m))
            },
            1e-5,
            8,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err:e}");
    }

    #[test]
    fn unet_preserves_shape_and_uses_the_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let model = Denoiser::new(&mut store, &UNetConfig::desk(), (32, 32), &mut rng).unwrap();
        perturb(&mut store, &mut rng, 0.02);
        let x = Tensor::randn(&[2, 2, 32, 32], 1.0, &mut rng);
        let ch = chords(2, &mut rng);
        let run = |keep: &[bool], c: &Tensor<f64>| {
            let mut t = Tape::with_params(&store);
            let xv = t.constant(x.clone());
            let cv = t.constant(c.clone());
            let y = model.forward(&mut t, xv, &[3, 900], Some(cv), keep).unwrap();
            t.value(y).clone()
        };
        let y = run(&[true, true], &ch);
        assert_eq!(y.shape(), &[2, 2, 32, 32]);
        assert!(y.all_finite());
        assert_eq!(y, run(&[true, true], &ch));
        let other = chords(2, &mut rng);
        assert!(y.zip_map(&run(&[true, true], &other), |a, b| a - b).max_abs() > 0.0);
        let nulls = run(&[false, false], &ch);
        assert!(y.zip_map(&nulls, |a, b| a - b).max_abs() > 0.0);
        // Mixed batch: each item follows its own flag.
        let mixed = run(&[true, false], &ch);
        let half = 2 * 32 * 32;
        assert!(mixed.data()[..half].iter().zip(&y.data()[..half]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(mixed.data()[half..].iter().zip(&nulls.data()[half..]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let model = Denoiser::new(&mut store, &toy(), (16, 16), &mut rng).unwrap();
        let mut t = Tape::with_params(&store);
        let x = t.constant(Tensor::randn(&[1, 2, 16, 16], 1.0, &mut rng));
        let y = model.forward(&mut t, x, &[10], None, &[false]).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        assert!(UNet::new(&mut store, "u", &toy(), (10, 16), &mut rng).is_err());
        let model = Denoiser::new(&mut store, &toy(), (16, 16), &mut rng).unwrap();
        let mut t = Tape::with_params(&store);
        let x = t.constant(Tensor::zeros(&[1, 2, 32, 32]));
        assert!(model.forward(&mut t, x, &[0], None, &[false]).is_err());
        let x = t.constant(Tensor::zeros(&[1, 2, 16, 16]));
        assert!(matches!(model.forward(&mut t, x, &[1000], None, &[false]), Err(ModelError::StepOutOfRange { .. })));
        assert!(model.forward(&mut t, x, &[1, 2], None, &[false]).is_err());
    }

    #[test]
    fn ablation_flags_remove_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let census = |cfg: UNetConfig| {
            let mut store = ParamStore::<f32>::new();
            Denoiser::new(&mut store, &cfg, (32, 32), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            (store.numel_matching("wtb"), store.numel_matching("wavelet"), store.numel_matching("mamba"), store.numel())
        };
        let full = census(UNetConfig::desk());
        assert!(full.0 > 0 && full.1 > 0 && full.2 > 0);
        let no_w = census(UNetConfig { enable_wavelet_skips: false, ..UNetConfig::desk() });
        assert_eq!((no_w.0, no_w.1, no_w.2), (0, 0, full.2));
        assert_eq!(no_w.3, full.3 - full.0);
        let no_m = census(UNetConfig { enable_mamba: false, ..UNetConfig::desk() });
        assert_eq!((no_m.0, no_m.2), (full.0, 0));
        let plain = census(UNetConfig { enable_mamba: false, enable_wavelet_skips: false, ..UNetConfig::desk() });
        assert_eq!((plain.0, plain.1, plain.2), (0, 0, 0));
        assert_eq!(plain.3, full.3 - full.0 - full.2);
        let _ = &mut rng;
    }

    #[test]
    fn full_model_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let model = Denoiser::new(&mut store, &toy(), (16, 16), &mut rng).unwrap();
        perturb(&mut store, &mut rng, 0.05);
        let x = Tensor::randn(&[1, 2, 16, 16], 1.0, &mut rng);
        let ch = chords(1, &mut rng);
        let proj = Tensor::randn(&[1, 2, 16, 16], 1.0, &mut rng);
        let err = param_grad_check(
            &store,
            |t| {
                let xv = t.constant(x.clone());
                let cv = t.constant(ch.clone());
                let y = model.forward(t, xv, &[17], Some(cv), &[true]).unwrap();
                let p = t.constant(proj.clone());
                let m = t.mul(y, p)?;
                Ok(t.sum(m))
            },
            1e-5,
            2,
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err:e}");
    }
}
