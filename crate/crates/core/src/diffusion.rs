//! DDPM noise schedule, training objective with condition dropout and the
//! wavelet regularizer, the trainer, and guided ancestral sampling.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rolldiff_nn::{Adam, Checkpoint, CheckpointError, ParamStore, Scalar, Tape, Tensor, Var};

use crate::chords::{ChordSequence, CHORD_DIM, SEQ_BEATS};
use crate::dataset::Record;
use crate::error::{ModelError, ModelResult};
use crate::pianoroll::{Pianoroll, RollGeometry};
use crate::unet::{Denoiser, UNetConfig};
use crate::wavelet::WaveletLossForm;

/// Named random streams split from one seed, so enabling one stochastic
/// feature does not shift the draws of another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Dropout = 1,
    Noise = 2,
    Batch = 3,
    Sampling = 4,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Linear β schedule. Steps are 1-based: `beta(1)` … `beta(T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> ModelResult<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(ModelError::BadRange);
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + i as f64 * (beta_end - beta_start) / (steps - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bar = beta
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> ModelResult<usize> {
        if t == 0 || t > self.steps() {
            return Err(ModelError::StepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> ModelResult<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> ModelResult<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> ModelResult<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> ModelResult<f64> {
        let ab = self.alpha_bar(t)?;
        Ok((1.0 - self.alpha_bar(t - 1)?) / (1.0 - ab) * self.beta(t)?)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε` with one step per batch item (leading axis).
pub fn q_sample<S: Scalar>(sched: &NoiseSchedule, x0: &Tensor<S>, t: &[usize], eps: &Tensor<S>) -> ModelResult<Tensor<S>> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&t.len()) {
        return Err(rolldiff_nn::NnError::ShapeMismatch {
            op: "q_sample",
            detail: format!("x0 {:?}, eps {:?}, {} steps", x0.shape(), eps.shape(), t.len()),
        }
        .into());
    }
    let per = x0.numel() / t.len();
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        let ab = sched.alpha_bar(sched.check(ti).map(|_| ti)?)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let range = i * per..(i + 1) * per;
        for (o, &e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = S::lit(a * o.as_f64() + b * e.as_f64());
        }
    }
    Ok(out)
}

/// One ancestral step `x_t → x_{t−1}`; no noise is added at `t = 1`.
pub fn ddpm_step<S: Scalar, R: Rng + ?Sized>(
    sched: &NoiseSchedule,
    x_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    rng: &mut R,
) -> ModelResult<Tensor<S>> {
    if x_t.shape() != eps_hat.shape() {
        return Err(rolldiff_nn::NnError::ShapeMismatch {
            op: "ddpm_step",
            detail: format!("{:?} vs {:?}", x_t.shape(), eps_hat.shape()),
        }
        .into());
    }
    let (beta, alpha, ab) = (sched.beta(t)?, sched.alpha(t)?, sched.alpha_bar(t)?);
    let coef = beta / (1.0 - ab).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = sched.posterior_variance(t)?.sqrt();
    let mut out = x_t.zip_map(eps_hat, |x, e| S::lit((x.as_f64() - coef * e.as_f64()) * inv_sqrt_alpha));
    if t > 1 {
        let z = Tensor::<f64>::randn(x_t.shape(), 1.0, rng);
        for (o, &zi) in out.data_mut().iter_mut().zip(z.data()) {
            *o = S::lit(o.as_f64() + sigma * zi);
        }
    }
    Ok(out)
}

/// `(1 + ω)·ε_c − ω·ε_u`.
pub fn combine_guidance<S: Scalar>(eps_cond: &Tensor<S>, eps_uncond: &Tensor<S>, omega: f64) -> Tensor<S> {
    let (a, b) = (S::lit(1.0 + omega), S::lit(omega));
    eps_cond.zip_map(eps_uncond, |c, u| a * c - b * u)
}

fn forward_values<S: Scalar>(
    model: &Denoiser,
    store: &ParamStore<S>,
    x: Tensor<S>,
    steps: &[usize],
    chords: Option<Tensor<S>>,
    keep: &[bool],
) -> ModelResult<Tensor<S>> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(x);
    let cv = chords.map(|c| tape.constant(c));
    let y = model.forward(&mut tape, xv, steps, cv, keep)?;
    Ok(tape.value(y).clone())
}

/// Conditional prediction at diffusion step `t` (1-based).
pub fn conditional_eps<S: Scalar>(
    model: &Denoiser,
    store: &ParamStore<S>,
    x_t: &Tensor<S>,
    t: usize,
    chords: &Tensor<S>,
) -> ModelResult<Tensor<S>> {
    let b = x_t.shape()[0];
    forward_values(model, store, x_t.clone(), &vec![t - 1; b], Some(chords.clone()), &vec![true; b])
}

/// Guided prediction. At `ω = 0` this is exactly the conditional pass;
/// otherwise the conditional and null passes share one doubled batch.
pub fn guided_eps<S: Scalar>(
    model: &Denoiser,
    store: &ParamStore<S>,
    x_t: &Tensor<S>,
    t: usize,
    chords: &Tensor<S>,
    omega: f64,
) -> ModelResult<Tensor<S>> {
    if !(omega >= 0.0) {
        return Err(ModelError::Config(format!("guidance scale {omega} must be non-negative")));
    }
    if t == 0 {
        return Err(ModelError::StepOutOfRange { t, max: model.unet.config.max_time });
    }
    if omega == 0.0 {
        return conditional_eps(model, store, x_t, t, chords);
    }
    let b = x_t.shape()[0];
    let mut xs = x_t.shape().to_vec();
    xs[0] *= 2;
    let mut cs = chords.shape().to_vec();
    cs[0] *= 2;
    let x2 = Tensor::from_vec(&xs, [x_t.data(), x_t.data()].concat())?;
    let c2 = Tensor::from_vec(&cs, [chords.data(), chords.data()].concat())?;
    let keep: Vec<bool> = (0..2 * b).map(|i| i < b).collect();
    let y = forward_values(model, store, x2, &vec![t - 1; 2 * b], Some(c2), &keep)?;
    let half = y.numel() / 2;
    let shape = x_t.shape();
    let ec = Tensor::from_vec(shape, y.data()[..half].to_vec())?;
    let eu = Tensor::from_vec(shape, y.data()[half..].to_vec())?;
    Ok(combine_guidance(&ec, &eu, omega))
}

pub fn chords_tensor<S: Scalar>(chords: &[ChordSequence]) -> ModelResult<Tensor<S>> {
    let data = chords.iter().flat_map(|c| c.to_f32()).map(|v| S::lit(v as f64)).collect();
    Ok(Tensor::from_vec(&[chords.len(), SEQ_BEATS, CHORD_DIM], data)?)
}

/// Runs the full reverse chain from `x_T ~ N(0, I)` for each chord sequence
/// and binarizes the result at 0.
pub fn sample<S: Scalar, R: Rng + ?Sized>(
    model: &Denoiser,
    store: &ParamStore<S>,
    sched: &NoiseSchedule,
    chords: &[ChordSequence],
    omega: f64,
    rng: &mut R,
) -> ModelResult<Vec<Pianoroll>> {
    if chords.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let (h, w) = model.unet.resolution();
    let geom = geometry_for(h, w)?;
    let n = chords.len();
    let c = chords_tensor::<S>(chords)?;
    let mut x = Tensor::<S>::randn(&[n, 2, h, w], 1.0, rng);
    for t in (1..=sched.steps()).rev() {
        let eps = guided_eps(model, store, &x, t, &c, omega)?;
        x = ddpm_step(sched, &x, t, &eps, rng)?;
        if t % 100 == 0 {
            log::debug!("sampling step {t}");
        }
    }
    let per = 2 * h * w;
    x.data()
        .chunks(per)
        .map(|v| {
            let vals: Vec<f32> = v.iter().map(|s| s.as_f64() as f32).collect();
            Pianoroll::from_values(geom, &vals, 0.0)
                .map_err(|e| ModelError::Config(format!("sample does not fit the roll geometry: {e}")))
        })
        .collect()
}

/// The known geometry with `pitches × frames = h × w`.
pub fn geometry_for(h: usize, w: usize) -> ModelResult<RollGeometry> {
    [RollGeometry::DESK, RollGeometry::FULL]
        .into_iter()
        .find(|g| g.pitches == h && g.frames() == w)
        .ok_or_else(|| ModelError::Config(format!("no pianoroll geometry has {h}×{w} planes")))
}

/// Per-step random draws of the training objective.
#[derive(Clone, Debug)]
pub struct NoiseDraw<S> {
    /// 1-based diffusion steps.
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
    /// `false` replaces the item's chords with the null condition.
    pub keep: Vec<bool>,
}

impl<S: Scalar> NoiseDraw<S> {
    pub fn sample<R: Rng + ?Sized>(
        sched: &NoiseSchedule,
        shape: &[usize],
        cond_dropout: f64,
        noise_rng: &mut R,
        dropout_rng: &mut R,
    ) -> Self {
        let b = shape[0];
        let t = (0..b).map(|_| noise_rng.random_range(1..=sched.steps())).collect();
        let eps = Tensor::randn(shape, 1.0, noise_rng);
        let keep = (0..b).map(|_| dropout_rng.random::<f64>() >= cond_dropout).collect();
        NoiseDraw { t, eps, keep }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub diffusion: Var,
    /// Unweighted sum of the filter losses of every wavelet node.
    pub wavelet: Option<Var>,
}

/// `mean‖ε − ε̂‖² + λ·Σ wavelet_loss`. The wavelet term is left out of the
/// graph entirely when `λ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Denoiser,
    sched: &NoiseSchedule,
    x0: &Tensor<S>,
    chords: &Tensor<S>,
    draw: &NoiseDraw<S>,
    wavelet_weight: f64,
    form: WaveletLossForm,
) -> ModelResult<LossTerms> {
    if x0.shape().first().copied().unwrap_or(0) == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let x_t = q_sample(sched, x0, &draw.t, &draw.eps)?;
    let xv = tape.constant(x_t);
    let chords = draw.keep.iter().any(|&k| k).then(|| tape.constant(chords.clone()));
    let steps: Vec<usize> = draw.t.iter().map(|t| t - 1).collect();
    let eps_hat = model.forward(tape, xv, &steps, chords, &draw.keep)?;
    let eps = tape.constant(draw.eps.clone());
    let d = tape.sub(eps_hat, eps)?;
    let sq = tape.mul(d, d)?;
    let diffusion = tape.mean(sq);
    let filters = model.wavelet_filters();
    if wavelet_weight == 0.0 || filters.is_empty() {
        return Ok(LossTerms { total: diffusion, diffusion, wavelet: None });
    }
    let mut wl = filters[0].loss(tape, form)?;
    for f in &filters[1..] {
        let l = f.loss(tape, form)?;
        wl = tape.add(wl, l)?;
    }
    let weighted = tape.scale(wl, wavelet_weight);
    let total = tape.add(diffusion, weighted)?;
    Ok(LossTerms { total, diffusion, wavelet: Some(wl) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub guidance: f64,
    pub wavelet_weight: f64,
    pub wavelet_loss: WaveletLossForm,
    pub seed: u64,
    pub max_steps: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 16,
            cond_dropout: 0.2,
            guidance: 5.0,
            wavelet_weight: 1.0,
            wavelet_loss: WaveletLossForm::PerLag,
            seed: 0,
            max_steps: 100_000,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout must lie in [0, 1]");
        }
        if !(self.guidance >= 0.0) || !(self.wavelet_weight >= 0.0) {
            return bad("guidance and wavelet_weight must be non-negative");
        }
        Ok(())
    }
}

/// Training examples in the network's layout: signed planes (2·H·W) and
/// chord vectors (32·36).
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub geometry: RollGeometry,
    items: Vec<(Vec<f32>, Vec<f32>)>,
}

impl TrainingSet {
    pub fn new(geometry: RollGeometry, pairs: &[(Pianoroll, ChordSequence)]) -> Self {
        let items = pairs
            .iter()
            .map(|(roll, ch)| {
                let roll = if roll.geometry() == geometry { roll.clone() } else { roll.project(geometry) };
                (roll.to_signed(), ch.to_f32())
            })
            .collect();
        TrainingSet { geometry, items }
    }

    /// Records projected to `geometry`, keeping their stored chords.
    pub fn from_records<'a>(geometry: RollGeometry, records: impl IntoIterator<Item = &'a Record>) -> Self {
        let pairs: Vec<_> = records.into_iter().map(|r| (r.roll.clone(), r.chords.clone())).collect();
        Self::new(geometry, &pairs)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stacked `(B,2,H,W)` rolls and `(B,32,36)` chords.
    pub fn batch<S: Scalar>(&self, idx: &[usize]) -> ModelResult<(Tensor<S>, Tensor<S>)> {
        let [c, h, w] = self.geometry.shape();
        let x = idx.iter().flat_map(|&i| self.items[i].0.iter()).map(|&v| S::lit(v as f64)).collect();
        let ch = idx.iter().flat_map(|&i| self.items[i].1.iter()).map(|&v| S::lit(v as f64)).collect();
        Ok((
            Tensor::from_vec(&[idx.len(), c, h, w], x)?,
            Tensor::from_vec(&[idx.len(), SEQ_BEATS, CHORD_DIM], ch)?,
        ))
    }
}

/// Indices of one minibatch: every item in order when the set is no larger
/// than the batch, otherwise a draw without replacement.
pub fn batch_indices<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        index::sample(rng, n, batch).into_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_diffusion: f64,
    pub loss_wavelet: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss_diffusion,loss_wavelet,lr";

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss_diffusion, self.loss_wavelet, self.lr)
    }
}

/// Model, parameters and optimizer state. Every random draw of step `k` is
/// taken from streams indexed by `k`, so a restored trainer continues the
/// exact trajectory.
pub struct Trainer {
    pub model: Denoiser,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub schedule: NoiseSchedule,
    pub cfg: TrainConfig,
    pub step: usize,
}

impl Trainer {
    pub fn new(unet: &UNetConfig, geometry: RollGeometry, schedule: NoiseSchedule, cfg: TrainConfig) -> ModelResult<Self> {
        cfg.validate()?;
        if unet.max_time != schedule.steps() {
            return Err(ModelError::Config(format!(
                "network built for {} steps, schedule has {}",
                unet.max_time,
                schedule.steps()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        let model = Denoiser::new(&mut store, unet, (geometry.pitches, geometry.frames()), &mut rng)?;
        let adam = Adam::new(&store, cfg.lr);
        Ok(Trainer { model, store, adam, schedule, cfg, step: 0 })
    }

    /// Summed unweighted filter loss of all wavelet nodes.
    pub fn wavelet_loss(&self) -> f64 {
        self.model.wavelet_filters().iter().map(|f| f.loss_value(&self.store, self.cfg.wavelet_loss)).sum()
    }

    pub fn train_step(&mut self, data: &TrainingSet) -> ModelResult<StepMetrics> {
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let k = self.step as u64;
        let seed = self.cfg.seed;
        let idx = batch_indices(data.len(), self.cfg.batch_size, &mut stream_rng(seed, Stream::Batch, k));
        let (x0, chords) = data.batch::<f32>(&idx)?;
        let draw = NoiseDraw::sample(
            &self.schedule,
            x0.shape(),
            self.cfg.cond_dropout,
            &mut stream_rng(seed, Stream::Noise, k),
            &mut stream_rng(seed, Stream::Dropout, k),
        );
        let (grads, loss_diffusion, wavelet) = {
            let mut tape = Tape::with_params(&self.store);
            let terms = training_loss(
                &mut tape,
                &self.model,
                &self.schedule,
                &x0,
                &chords,
                &draw,
                self.cfg.wavelet_weight,
                self.cfg.wavelet_loss,
            )?;
            let grads = tape.param_grads(terms.total)?;
            let ld = tape.value(terms.diffusion).item() as f64;
            let lw = terms.wavelet.map(|w| tape.value(w).item() as f64);
            (grads, ld, lw)
        };
        let loss_wavelet = wavelet.unwrap_or_else(|| self.wavelet_loss());
        self.store.accumulate(&grads);
        self.adam.lr = self.cfg.lr;
        self.adam.step(&mut self.store);
        self.step += 1;
        Ok(StepMetrics { step: self.step, loss_diffusion, loss_wavelet, lr: self.cfg.lr })
    }

    /// Parameters, optimizer moments and the step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        for ((p, m), v) in self.store.iter().zip(&self.adam.m).zip(&self.adam.v) {
            ck.push(format!("adam.m.{}", p.name), m.clone());
            ck.push(format!("adam.v.{}", p.name), v.clone());
        }
        ck.push("adam.step", Tensor::scalar(self.adam.step as f32));
        ck.push("train.step", Tensor::scalar(self.step as f32));
        ck
    }

    /// Inverse of [`Trainer::checkpoint`].
    pub fn restore(&mut self, ck: &Checkpoint) -> ModelResult<()> {
        ck.load_into(&mut self.store)?;
        let fetch = |name: String, like: &Tensor<f32>| -> ModelResult<Tensor<f32>> {
            let t = ck.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.shape() != like.shape() {
                return Err(CheckpointError::Shape { name, found: t.shape().to_vec(), expected: like.shape().to_vec() }.into());
            }
            Ok(t.clone())
        };
        for (i, p) in self.store.iter().enumerate() {
            self.adam.m[i] = fetch(format!("adam.m.{}", p.name), &p.value)?;
            self.adam.v[i] = fetch(format!("adam.v.{}", p.name), &p.value)?;
        }
        let scalar = |name: &str| -> ModelResult<f32> {
            Ok(ck.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))?.item())
        };
        self.adam.step = scalar("adam.step")? as u64;
        self.step = scalar("train.step")? as usize;
        Ok(())
    }
}

/// Where [`train_loop`] writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct LoopOutputs<'a> {
    /// CSV log; appended to when resuming past step 0.
    pub metrics: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    /// Extra entries stored in every checkpoint (e.g. the run config).
    pub extra: Vec<(String, Tensor<f32>)>,
}

/// Trains until `trainer.step == cfg.max_steps`, logging every step and
/// checkpointing every `checkpoint_every` steps and at the end.
pub fn train_loop(trainer: &mut Trainer, data: &TrainingSet, out: &LoopOutputs) -> ModelResult<Vec<StepMetrics>> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut log = match out.metrics {
        Some(p) => {
            let resume = trainer.step > 0 && p.exists();
            let mut f = OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(p)?;
            if !resume {
                writeln!(f, "{}", StepMetrics::CSV_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    let save = |trainer: &Trainer| -> ModelResult<()> {
        if let Some(p) = out.checkpoint {
            let mut ck = trainer.checkpoint();
            ck.entries.extend(out.extra.iter().cloned());
            ck.save(p)?;
        }
        Ok(())
    };
    let mut history = Vec::new();
    while trainer.step < trainer.cfg.max_steps {
        let m = trainer.train_step(data)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", m.csv_line())?;
        }
        if m.step % 100 == 0 {
            log::info!("step {} loss {:.5} wavelet {:.2e}", m.step, m.loss_diffusion, m.loss_wavelet);
        }
        history.push(m);
        if trainer.cfg.checkpoint_every > 0 && m.step % trainer.cfg.checkpoint_every == 0 {
            save(trainer)?;
        }
    }
    save(trainer)?;
    Ok(history)
}

/// Trailing mean over the last `window` values (fewer at the start).
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_values() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        // Independent product in log space.
        let log_ab: f64 = (0..1000).map(|i| (1.0 - (1e-4 + i as f64 * (0.02 - 1e-4) / 999.0)).ln()).sum();
        assert!((s.alpha_bar(1000).unwrap() / log_ab.exp() - 1.0).abs() < 1e-9);
        assert!((s.alpha_bar(1000).unwrap() - 4.0e-5).abs() < 4.0e-6);
        for t in 1..1000 {
            assert!(s.beta(t + 1).unwrap() > s.beta(t).unwrap());
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        assert!(matches!(s.beta(0), Err(ModelError::StepOutOfRange { .. })));
        assert!(matches!(s.beta(1001), Err(ModelError::StepOutOfRange { .. })));
        for (a, b) in [(0.0, 0.02), (0.02, 0.01), (1e-4, 1.0)] {
            assert!(matches!(NoiseSchedule::linear(1000, a, b), Err(ModelError::BadRange)));
        }
    }

    #[test]
    fn q_sample_closed_form() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::from_vec(&[2, 3], vec![1.0f64, -1.0, 0.5, 1.0, 1.0, -1.0]).unwrap();
        let zero = Tensor::zeros(&[2, 3]);
        let y = q_sample(&s, &x0, &[1, 500], &zero).unwrap();
        let a1 = 0.9999f64.sqrt();
        assert!((y.data()[0] - a1).abs() < 1e-12);
        assert!((y.data()[3] - s.alpha_bar(500).unwrap().sqrt()).abs() < 1e-12);
        let eps = Tensor::full(&[2, 3], 1.0);
        let y = q_sample(&s, &x0, &[1, 1], &eps).unwrap();
        assert!((y.data()[1] - (-a1 + 0.0001f64.sqrt())).abs() < 1e-12);
        assert!(q_sample(&s, &x0, &[0, 1], &eps).is_err());
    }

    #[test]
    fn q_sample_statistics() {
        let s = NoiseSchedule::default();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in [1usize, 500, 1000] {
            let x0 = Tensor::full(&[n, 1], 0.8f64);
            let eps = Tensor::randn(&[n, 1], 1.0, &mut rng);
            let y = q_sample(&s, &x0, &vec![t; n], &eps).unwrap();
            let mean = y.data().iter().sum::<f64>() / n as f64;
            let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let ab = s.alpha_bar(t).unwrap();
            let (m0, v0) = (ab.sqrt() * 0.8, 1.0 - ab);
            // Mean error relative to the spread, variance relative.
            assert!((mean - m0).abs() <= 0.01 * v0.sqrt().max(m0.abs()), "t={t} mean {mean} vs {m0}");
            assert!((var / v0 - 1.0).abs() <= 0.01, "t={t} var {var} vs {v0}");
        }
    }

    #[test]
    fn ddpm_step_mean_and_variance() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::randn(&[1, 16], 1.0, &mut rng);
        let eps = Tensor::randn(&[1, 16], 1.0, &mut rng);
        for t in [1usize, 2, 300, 1000] {
            let x_t = q_sample(&s, &x0, &[t], &eps).unwrap();
            let mut zero_rng = ChaCha8Rng::seed_from_u64(2);
            let mean = if t == 1 {
                ddpm_step(&s, &x_t, t, &eps, &mut zero_rng).unwrap()
            } else {
                let (b, a, ab) = (s.beta(t).unwrap(), s.alpha(t).unwrap(), s.alpha_bar(t).unwrap());
                x_t.zip_map(&eps, |x, e| (x - b / (1.0 - ab).sqrt() * e) / a.sqrt())
            };
            // Posterior mean from the closed forms.
            let (ab, abp, b, a) =
                (s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap(), s.beta(t).unwrap(), s.alpha(t).unwrap());
            let want = x0.zip_map(&x_t, |x0, xt| (abp.sqrt() * b * x0 + a.sqrt() * (1.0 - abp) * xt) / (1.0 - ab));
            assert!(mean.zip_map(&want, |p, q| p - q).max_abs() <= 1e-5, "t={t}");
        }
        let t1 = q_sample(&s, &x0, &[1], &eps).unwrap();
        let a = ddpm_step(&s, &t1, 1, &eps, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = ddpm_step(&s, &t1, 1, &eps, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);

        let t = 400;
        let x = Tensor::full(&[100_000], 0.3f64);
        let e = Tensor::zeros(&[100_000]);
        let y = ddpm_step(&s, &x, t, &e, &mut rng).unwrap();
        let m = y.data().iter().sum::<f64>() / 1e5;
        let var = y.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 1e5;
        assert!((var / s.posterior_variance(t).unwrap() - 1.0).abs() < 0.02);
    }

    #[test]
    fn guidance_arithmetic() {
        let c = Tensor::full(&[3], 1.0f32);
        let u = Tensor::zeros(&[3]);
        assert!(combine_guidance(&c, &u, 5.0).data().iter().all(|&v| v == 6.0));
        assert_eq!(combine_guidance(&c, &u, 0.0), c);
    }

    #[test]
    fn trailing_mean_matches_direct_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m = trailing_mean(&v, 50);
        for i in [0usize, 10, 49, 50, 199] {
            let lo = (i + 1).saturating_sub(50);
            let want = v[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
            assert!((m[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let draw = |s, i| stream_rng(9, s, i).random::<u64>();
        assert_eq!(draw(Stream::Noise, 3), draw(Stream::Noise, 3));
        assert_ne!(draw(Stream::Noise, 3), draw(Stream::Dropout, 3));
        assert_ne!(draw(Stream::Noise, 3), draw(Stream::Noise, 4));
        assert_ne!(stream_rng(1, Stream::Init, 0).random::<u64>(), stream_rng(2, Stream::Init, 0).random::<u64>());
    }

    #[test]
    fn batch_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(batch_indices(8, 8, &mut rng), (0..8).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, 16, &mut rng), vec![0, 1, 2]);
        let mut b = batch_indices(100, 16, &mut rng);
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 16);
    }
}
