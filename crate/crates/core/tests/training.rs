use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rolldiff_core::diffusion::*;
use rolldiff_core::pianoroll::RollGeometry;
use rolldiff_core::synth::block_chord_segments;
use rolldiff_core::unet::UNetConfig;
use rolldiff_core::wavelet::WaveletLossForm;
use rolldiff_nn::{Checkpoint, Tape, Tensor};

const STEPS: usize = 20;

fn tiny_unet() -> UNetConfig {
    UNetConfig { base_channels: 16, channel_mults: vec![1, 2], attn_max_tokens: 64, max_time: STEPS, ..UNetConfig::desk() }
}

fn tiny_trainer(seed: u64, wavelet_weight: f64) -> Trainer {
    let cfg = TrainConfig { lr: 1e-3, batch_size: 2, seed, wavelet_weight, max_steps: 4, checkpoint_every: 0, ..Default::default() };
    Trainer::new(&tiny_unet(), RollGeometry::DESK, NoiseSchedule::linear(STEPS, 1e-4, 0.02).unwrap(), cfg).unwrap()
}

fn data() -> TrainingSet {
    TrainingSet::new(RollGeometry::DESK, &block_chord_segments(RollGeometry::DESK, 3, 42).unwrap())
}

fn a0_gradient(trainer: &Trainer, weight: f64) -> f64 {
    let data = data();
    let (x0, chords) = data.batch::<f32>(&[0, 1]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rng2 = ChaCha8Rng::seed_from_u64(4);
    let draw = NoiseDraw::sample(&trainer.schedule, x0.shape(), 0.2, &mut rng, &mut rng2);
    let mut tape = Tape::with_params(&trainer.store);
    let terms = training_loss(&mut tape, &trainer.model, &trainer.schedule, &x0, &chords, &draw, weight, WaveletLossForm::PerLag)
        .unwrap();
    let grads = tape.param_grads(terms.total).unwrap();
    let a0: Vec<_> = trainer.store.ids().filter(|&id| trainer.store.get(id).name.ends_with(".wavelet.a0")).collect();
    assert!(!a0.is_empty());
    grads.iter().filter(|(id, _)| a0.contains(id)).map(|(_, g)| g.max_abs() as f64).fold(0.0, f64::max)
}

#[test]
fn zero_wavelet_weight_leaves_filters_without_gradient() {
    let mut trainer = tiny_trainer(0, 1.0);
    // Move the filters off the Haar minimum so the filter loss has a slope.
    for p in trainer.store.iter_mut().filter(|p| p.name.ends_with(".wavelet.a0")) {
        p.value = p.value.map(|v| v * 1.1);
    }
    assert_eq!(a0_gradient(&trainer, 0.0), 0.0);
    assert!(a0_gradient(&trainer, 1.0) > 1e-3);
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let trainer = tiny_trainer(0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let eps = Tensor::<f32>::randn(&[4, 2, 32, 32], 1.0, &mut rng);
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(eps.clone());
    let b = tape.constant(eps);
    let d = tape.sub(a, b).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let m = tape.mean(sq);
    assert_eq!(tape.value(m).item(), 0.0);
    assert!(trainer.wavelet_loss() <= 1e-10);
}

#[test]
fn guidance_at_zero_is_the_conditional_pass() {
    let trainer = tiny_trainer(5, 1.0);
    let data = data();
    let (_, chords) = data.batch::<f32>(&[0, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(&[2, 2, 32, 32], 1.0, &mut rng);
    for t in [1, 7, STEPS] {
        let g = guided_eps(&trainer.model, &trainer.store, &x, t, &chords, 0.0).unwrap();
        let c = conditional_eps(&trainer.model, &trainer.store, &x, t, &chords).unwrap();
        assert!(g.data().iter().zip(c.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn resume_reproduces_the_next_steps() {
    let data = data();
    let mut straight = tiny_trainer(11, 1.0);
    let full: Vec<_> = (0..4).map(|_| straight.train_step(&data).unwrap()).collect();

    let mut first = tiny_trainer(11, 1.0);
    first.train_step(&data).unwrap();
    first.train_step(&data).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = tiny_trainer(99, 1.0);
    resumed.cfg.seed = 11;
    resumed.restore(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.step, 2);
    let rest: Vec<_> = (0..2).map(|_| resumed.train_step(&data).unwrap()).collect();
    assert_eq!(&full[2..], &rest[..]);
    for (a, b) in straight.store.iter().zip(resumed.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn same_seed_gives_identical_curves_and_checkpoints() {
    let data = data();
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str, seed: u64| {
        let mut t = tiny_trainer(seed, 1.0);
        let metrics = dir.path().join(format!("{tag}.csv"));
        let ck = dir.path().join(format!("{tag}.ckpt"));
        let out = LoopOutputs { metrics: Some(&metrics), checkpoint: Some(&ck), extra: vec![] };
        let h = train_loop(&mut t, &data, &out).unwrap();
        (h, std::fs::read(metrics).unwrap(), std::fs::read(ck).unwrap())
    };
    let (h1, csv1, ck1) = run("a", 3);
    let (h2, csv2, ck2) = run("b", 3);
    let (h3, _, _) = run("c", 4);
    assert_eq!(h1, h2);
    assert_eq!(csv1, csv2);
    assert_eq!(ck1, ck2);
    assert_ne!(h1, h3);
    let text = String::from_utf8(csv1).unwrap();
    assert_eq!(text.lines().next(), Some(StepMetrics::CSV_HEADER));
    assert_eq!(text.lines().count(), 5);
    assert!(h1.iter().all(|m| m.loss_wavelet < 1e-2));
}

#[test]
fn sampling_is_seeded_and_follows_the_condition() {
    let data = data();
    let mut trainer = tiny_trainer(0, 1.0);
    for _ in 0..3 {
        trainer.train_step(&data).unwrap();
    }
    let segs = block_chord_segments(RollGeometry::DESK, 2, 5).unwrap();
    let chords = vec![segs[0].1.clone()];
    let go = |c: &[_], s| {
        let mut rng = stream_rng(s, Stream::Sampling, 0);
        sample(&trainer.model, &trainer.store, &trainer.schedule, c, 5.0, &mut rng).unwrap()
    };
    assert_eq!(go(&chords, 1), go(&chords, 1));
    assert_ne!(go(&chords, 1), go(&chords, 2));
    assert_eq!(go(&chords, 1)[0].geometry(), RollGeometry::DESK);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::randn(&[1, 2, 32, 32], 1.0, &mut rng);
    let eps = |i: usize| {
        let c = chords_tensor::<f32>(&[segs[i].1.clone()]).unwrap();
        guided_eps(&trainer.model, &trainer.store, &x, 10, &c, 5.0).unwrap()
    };
    assert_ne!(eps(0), eps(1));
}
