use rand::Rng;
use rolldiff_nn::layers::{linear, Linear};
use rolldiff_nn::{Init, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

use super::{CHORD_DIM, SEQ_BEATS};

pub const EMBED_DIM: usize = 64;
pub const HIDDEN: usize = 128;
pub const LATENT_DIM: usize = 512;

/// Gate weights in (reset, update, candidate) order.
#[derive(Clone, Debug)]
struct GruCell {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruCell {
    fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, input: usize, rng: &mut R) -> Self {
        let std = 1.0 / (HIDDEN as f64).sqrt();
        GruCell {
            w_ih: store.init(format!("{name}.w_ih"), &[3 * HIDDEN, input], Init::Normal(std), rng),
            w_hh: store.init(format!("{name}.w_hh"), &[3 * HIDDEN, HIDDEN], Init::Normal(std), rng),
            b_ih: store.init(format!("{name}.b_ih"), &[3 * HIDDEN], Init::Zeros, rng),
            b_hh: store.init(format!("{name}.b_hh"), &[3 * HIDDEN], Init::Zeros, rng),
        }
    }

    /// Runs over `x (B,L,I)` in the given step order and returns the last
    /// hidden state (B,H).
    fn run<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, order: impl Iterator<Item = usize>) -> Result<Var> {
        let (b, _) = (tape.shape(x)[0], tape.shape(x)[1]);
        let w_ih = tape.param(self.w_ih)?;
        let b_ih = tape.param(self.b_ih)?;
        let w_hh = tape.param(self.w_hh)?;
        let b_hh = tape.param(self.b_hh)?;
        let gi_all = linear(tape, x, w_ih, Some(b_ih))?;
        let mut h = tape.constant(Tensor::zeros(&[b, HIDDEN]));
        for t in order {
            let gi = tape.narrow(gi_all, 1, t, 1)?;
            let gi = tape.reshape(gi, &[b, 3 * HIDDEN])?;
            let gh = linear(tape, h, w_hh, Some(b_hh))?;
            let part = |tape: &mut Tape<S>, v: Var, k: usize| tape.narrow(v, 1, k * HIDDEN, HIDDEN);
            let (ir, iz, inn) = (part(tape, gi, 0)?, part(tape, gi, 1)?, part(tape, gi, 2)?);
            let (hr, hz, hn) = (part(tape, gh, 0)?, part(tape, gh, 1)?, part(tape, gh, 2)?);
            let r = tape.add(ir, hr)?;
            let r = tape.sigmoid(r);
            let z = tape.add(iz, hz)?;
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, hn)?;
            let n = tape.add(inn, rn)?;
            let n = tape.tanh(n);
            // h' = (1 − z)·n + z·h = n + z·(h − n)
            let d = tape.sub(h, n)?;
            let zd = tape.mul(z, d)?;
            h = tape.add(n, zd)?;
        }
        Ok(h)
    }
}

/// Maps a (B,32,36) chord sequence to a (B,512) conditioning latent:
/// linear embedding, a bidirectional GRU, and a linear head on the two
/// final states.
#[derive(Clone, Debug)]
pub struct ChordEncoder {
    pub embed: Linear,
    fwd: GruCell,
    bwd: GruCell,
    pub head: Linear,
}

impl ChordEncoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, rng: &mut R) -> Self {
        let glorot = |i, o| Init::Glorot { fan_in: i, fan_out: o };
        ChordEncoder {
            embed: Linear::new(store, &format!("{name}.embed"), CHORD_DIM, EMBED_DIM, true, glorot(CHORD_DIM, EMBED_DIM), rng),
            fwd: GruCell::new(store, &format!("{name}.gru_fwd"), EMBED_DIM, rng),
            bwd: GruCell::new(store, &format!("{name}.gru_bwd"), EMBED_DIM, rng),
            head: Linear::new(store, &format!("{name}.head"), 2 * HIDDEN, LATENT_DIM, true, glorot(2 * HIDDEN, LATENT_DIM), rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, chords: Var) -> Result<Var> {
        let s = tape.shape(chords).to_vec();
        if s.len() != 3 || s[1] != SEQ_BEATS || s[2] != CHORD_DIM {
            return Err(rolldiff_nn::NnError::ShapeMismatch {
                op: "chord_encoder",
                detail: format!("expected (B,{SEQ_BEATS},{CHORD_DIM}), got {s:?}"),
            });
        }
        let e = self.embed.forward(tape, chords)?;
        let hf = self.fwd.run(tape, e, 0..SEQ_BEATS)?;
        let hb = self.bwd.run(tape, e, (0..SEQ_BEATS).rev())?;
        let h = tape.concat(&[hf, hb], 1)?;
        self.head.forward(tape, h)
    }
}
