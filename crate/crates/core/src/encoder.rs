//! LSTM sequence auto-encoders over context vectors.
//!
//! The `current` encoder embeds the running prefix of an episode into `z_t`;
//! the `demo` encoder embeds whole demonstrations, mean-pooled into `z_demo`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{Context, Dataset, NormStats, Trajectory, CONTEXT_DIM};
use crate::primitive::ACTION_DIM;
use crate::nn::{
    lstm_init, lstm_step, lstm_step_tape, AdamState, LstmState, NnError, ParamSet, Tape, Tensor, Var,
};
use crate::rng::{derive_seed, rng_from_seed, stream};

pub const LATENT_DIM: usize = 8;
pub type LatentZ = [f64; LATENT_DIM];

/// A context sequence and the normalized actions between its entries:
/// `actions[t]` moved the bucket from `contexts[t]` to `contexts[t + 1]`.
/// Missing actions count as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub contexts: Vec<Context>,
    pub actions: Vec<[f64; ACTION_DIM]>,
}

impl Sequence {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Sequence { contexts: t.contexts(), actions: t.transitions.iter().map(|tr| tr.a.0).collect() }
    }

    pub fn contexts_only(contexts: Vec<Context>) -> Self {
        Sequence { contexts, actions: Vec::new() }
    }

    fn normalized(&self, norm: &NormStats) -> Sequence {
        Sequence { contexts: self.contexts.iter().map(|c| norm.normalize(c)).collect(), actions: self.actions.clone() }
    }

    fn prefix(&self, t: usize) -> Sequence {
        Sequence {
            contexts: self.contexts[..t].to_vec(),
            actions: self.actions[..self.actions.len().min(t.saturating_sub(1))].to_vec(),
        }
    }

    fn action_before(&self, t: usize) -> [f64; ACTION_DIM] {
        if t == 0 {
            [0.0; ACTION_DIM]
        } else {
            self.actions.get(t - 1).copied().unwrap_or([0.0; ACTION_DIM])
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("no sequences to train on")]
    Empty,
    #[error("encoder training diverged: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderRole {
    Current,
    Demo,
}

impl EncoderRole {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderRole::Current => "current",
            EncoderRole::Demo => "demo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { hidden: 32, epochs: 20, batch_size: 16, lr: 1e-2 }
    }
}

/// Trained encoder/decoder pair. Only `encoder` and `projection` are needed
/// for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub role: EncoderRole,
    pub hidden: usize,
    pub encoder: ParamSet,
    pub projection: ParamSet,
    pub decoder: ParamSet,
    pub readout: ParamSet,
    pub norm: NormStats,
    pub seed: u64,
    /// Reconstruction loss before training, then the mean of each epoch.
    pub loss_history: Vec<f64>,
}

impl EncoderParams {
    pub fn init(role: EncoderRole, hidden: usize, norm: NormStats, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, stream::INIT));
        let encoder = lstm_init(CONTEXT_DIM, hidden, &mut rng);
        let bound = 1.0 / crate::math::sqrt(hidden as f64);
        let mut projection = ParamSet::new();
        projection.push("w", Tensor::uniform(hidden, LATENT_DIM, bound, &mut rng));
        projection.push("b", Tensor::zeros(1, LATENT_DIM));
        let decoder = lstm_init(LATENT_DIM + CONTEXT_DIM + ACTION_DIM, hidden, &mut rng);
        let mut readout = ParamSet::new();
        readout.push("w", Tensor::uniform(hidden, CONTEXT_DIM, bound, &mut rng));
        readout.push("b", Tensor::zeros(1, CONTEXT_DIM));
        EncoderParams {
            role,
            hidden,
            encoder,
            projection,
            decoder,
            readout,
            norm,
            seed,
            loss_history: Vec::new(),
        }
    }

    /// Latent of a raw context sequence; the empty sequence maps to zero.
    pub fn encode(&self, seq: &[Context]) -> LatentZ {
        let mut inc = IncrementalEncoder::new(self);
        for c in seq {
            inc.push(c);
        }
        inc.latent()
    }

    pub fn incremental(&self) -> IncrementalEncoder<'_> {
        IncrementalEncoder::new(self)
    }

    fn project(&self, h: &Tensor) -> LatentZ {
        let z = h.affine(&self.projection.tensors[0], &self.projection.tensors[1]);
        let mut out = [0.0; LATENT_DIM];
        out.copy_from_slice(&z.data);
        out
    }

    /// Mean squared reconstruction error over `seqs` (raw contexts).
    pub fn reconstruction_loss(&self, seqs: &[Sequence]) -> f64 {
        let normed: Vec<Sequence> = seqs.iter().map(|s| s.normalized(&self.norm)).collect();
        let refs: Vec<&Sequence> = normed.iter().collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for chunk in refs.chunks(32) {
            let (loss, n) = self.batch_loss_value(chunk);
            total += loss * n;
            count += n;
        }
        total / count.max(1.0)
    }

    fn batch_loss_value(&self, batch: &[&Sequence]) -> (f64, f64) {
        let mut tape = Tape::new();
        let vars = ModelVars::on_tape(self, &mut tape);
        let (loss, n) = batch_loss(&mut tape, &vars, batch, self.hidden);
        (tape.value(loss).item(), n)
    }
}

/// Feeds contexts one at a time; equal to re-encoding the whole prefix.
pub struct IncrementalEncoder<'a> {
    params: &'a EncoderParams,
    state: LstmState,
    len: usize,
}

impl<'a> IncrementalEncoder<'a> {
    pub fn new(params: &'a EncoderParams) -> Self {
        IncrementalEncoder { params, state: LstmState::zeros(1, params.hidden), len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, c: &Context) {
        let x = Tensor::row_vector(&self.params.norm.normalize(c));
        self.state = lstm_step(&self.params.encoder.tensors, &x, &self.state);
        self.len += 1;
    }

    pub fn latent(&self) -> LatentZ {
        if self.len == 0 {
            [0.0; LATENT_DIM]
        } else {
            self.params.project(&self.state.h)
        }
    }
}

/// `z_t` for the prefix `c_{1:t}`; zero for the empty prefix.
pub fn encode_current(params: &EncoderParams, prefix: &[Context]) -> LatentZ {
    params.encode(prefix)
}

/// Mean-pooled latent of `trajectories`. Summation runs over sorted values so
/// the result does not depend on list order.
pub fn encode_demo(params: &EncoderParams, trajectories: &[&Trajectory]) -> Result<LatentZ, EncoderError> {
    if trajectories.is_empty() {
        return Err(EncoderError::Empty);
    }
    let zs: Vec<LatentZ> = trajectories.iter().map(|t| params.encode(&t.contexts())).collect();
    let mut out = [0.0; LATENT_DIM];
    let mut col = Vec::with_capacity(zs.len());
    for (d, o) in out.iter_mut().enumerate() {
        col.clear();
        col.extend(zs.iter().map(|z| z[d]));
        col.sort_by(f64::total_cmp);
        *o = col.iter().sum::<f64>() / zs.len() as f64;
    }
    Ok(out)
}

struct ModelVars {
    enc: Vec<Var>,
    proj: Vec<Var>,
    dec: Vec<Var>,
    read: Vec<Var>,
}

impl ModelVars {
    fn on_tape(p: &EncoderParams, tape: &mut Tape) -> Self {
        ModelVars {
            enc: p.encoder.on_tape(tape),
            proj: p.projection.on_tape(tape),
            dec: p.decoder.on_tape(tape),
            read: p.readout.on_tape(tape),
        }
    }
}

/// Masked teacher-forced reconstruction loss of a batch of normalized
/// sequences. The decoder sees `[z, c_{t-1}, a_{t-1}]` and predicts `c_t`.
/// Returns the loss node and the number of valid steps.
fn batch_loss(tape: &mut Tape, v: &ModelVars, batch: &[&Sequence], hidden: usize) -> (Var, f64) {
    let b = batch.len();
    let max_len = batch.iter().map(|s| s.contexts.len()).max().unwrap_or(0);
    let inputs: Vec<Tensor> = (0..max_len)
        .map(|t| {
            let mut x = Tensor::zeros(b, CONTEXT_DIM);
            for (r, s) in batch.iter().enumerate() {
                if t < s.contexts.len() {
                    x.row_mut(r).copy_from_slice(&s.contexts[t]);
                }
            }
            x
        })
        .collect();
    let actions: Vec<Tensor> = (0..max_len)
        .map(|t| {
            let mut a = Tensor::zeros(b, ACTION_DIM);
            for (r, s) in batch.iter().enumerate() {
                if t < s.contexts.len() {
                    a.row_mut(r).copy_from_slice(&s.action_before(t));
                }
            }
            a
        })
        .collect();
    let masks: Vec<Tensor> = (0..max_len)
        .map(|t| {
            Tensor::from_vec(b, 1, batch.iter().map(|s| if t < s.contexts.len() { 1.0 } else { 0.0 }).collect())
        })
        .collect();

    let mut h = tape.constant(Tensor::zeros(b, hidden));
    let mut c = tape.constant(Tensor::zeros(b, hidden));
    let xs: Vec<Var> = inputs.into_iter().map(|x| tape.constant(x)).collect();
    let acts: Vec<Var> = actions.into_iter().map(|a| tape.constant(a)).collect();
    let ms: Vec<Var> = masks.into_iter().map(|m| tape.constant(m)).collect();
    for t in 0..max_len {
        let (h2, c2) = lstm_step_tape(tape, &v.enc, xs[t], h, c);
        h = masked_carry(tape, h, h2, ms[t]);
        c = masked_carry(tape, c, c2, ms[t]);
    }
    let z = tape.affine(h, v.proj[0], v.proj[1]);

    let mut dh = tape.constant(Tensor::zeros(b, hidden));
    let mut dc = tape.constant(Tensor::zeros(b, hidden));
    let mut prev = tape.constant(Tensor::zeros(b, CONTEXT_DIM));
    let mut terms = Vec::with_capacity(max_len);
    for t in 0..max_len {
        let inp = tape.concat_cols(&[z, prev, acts[t]]);
        (dh, dc) = lstm_step_tape(tape, &v.dec, inp, dh, dc);
        let pred = tape.affine(dh, v.read[0], v.read[1]);
        let err = tape.sub(pred, xs[t]);
        let sq = tape.square(err);
        let row = tape.sum_cols(sq);
        let masked = tape.mul(row, ms[t]);
        terms.push(tape.sum(masked));
        prev = xs[t];
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t);
    }
    let n: usize = batch.iter().map(|s| s.contexts.len()).sum();
    let loss = tape.scale(total, 1.0 / (n * CONTEXT_DIM) as f64);
    (loss, n as f64)
}

fn masked_carry(tape: &mut Tape, old: Var, new: Var, mask: Var) -> Var {
    let d = tape.sub(new, old);
    let md = tape.mul_col(d, mask);
    tape.add(old, md)
}

/// Training sequences for `role` drawn from `ds`: every prefix length is
/// equally likely for `current`, whole trajectories for `demo`.
fn sample_sequences(seqs: &[Sequence], role: EncoderRole, rng: &mut crate::rng::SimRng) -> Vec<Sequence> {
    seqs.iter()
        .map(|s| match role {
            EncoderRole::Demo => s.clone(),
            EncoderRole::Current => {
                let t = rng.random_range(1..=s.contexts.len());
                s.prefix(t)
            }
        })
        .collect()
}

/// Trains on the context sequences of `ds`.
pub fn train_autoencoder(
    ds: &Dataset,
    role: EncoderRole,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<EncoderParams, EncoderError> {
    let seqs: Vec<Sequence> = ds.trajectories.iter().map(Sequence::from_trajectory).collect();
    let norm = match &ds.norm_stats {
        Some(n) => n.clone(),
        None => NormStats::compute(&ds.trajectories).map_err(|_| EncoderError::Empty)?,
    };
    train_on_sequences(&seqs, norm, role, cfg, seed)
}

/// Trains on raw context sequences normalized with `norm`.
pub fn train_on_sequences(
    seqs: &[Sequence],
    norm: NormStats,
    role: EncoderRole,
    cfg: &EncoderConfig,
    seed: u64,
) -> Result<EncoderParams, EncoderError> {
    let seqs: Vec<&Sequence> = seqs.iter().filter(|s| !s.contexts.is_empty()).collect();
    if seqs.is_empty() {
        return Err(EncoderError::Empty);
    }
    let mut p = EncoderParams::init(role, cfg.hidden, norm, seed);
    let normed: Vec<Sequence> = seqs.iter().map(|s| s.normalized(&p.norm)).collect();
    let mut rng = rng_from_seed(derive_seed(seed, stream::BATCH));
    let mut adam = [
        AdamState::new(&p.encoder, cfg.lr),
        AdamState::new(&p.projection, cfg.lr),
        AdamState::new(&p.decoder, cfg.lr),
        AdamState::new(&p.readout, cfg.lr),
    ];

    let mut order: Vec<usize> = (0..normed.len()).collect();
    for epoch in 0..cfg.epochs {
        let sample = sample_sequences(&normed, role, &mut rng);
        order.shuffle(&mut rng);
        if epoch == 0 {
            let refs: Vec<&Sequence> = sample.iter().collect();
            let (mut tot, mut cnt) = (0.0, 0.0);
            for chunk in refs.chunks(cfg.batch_size.max(1)) {
                let (l, n) = p.batch_loss_value(chunk);
                tot += l * n;
                cnt += n;
            }
            p.loss_history.push(tot / cnt);
        }
        let (mut tot, mut cnt) = (0.0, 0.0);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&Sequence> = idx.iter().map(|&i| &sample[i]).collect();
            let mut tape = Tape::new();
            let vars = ModelVars::on_tape(&p, &mut tape);
            let (loss, n) = batch_loss(&mut tape, &vars, &batch, p.hidden);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(EncoderError::NonFinite(alloc::format!("loss {lv} at epoch {epoch}")));
            }
            let mut g = tape.backward(loss)?;
            let grads = [
                p.encoder.collect_grads(&mut g, &vars.enc),
                p.projection.collect_grads(&mut g, &vars.proj),
                p.decoder.collect_grads(&mut g, &vars.dec),
                p.readout.collect_grads(&mut g, &vars.read),
            ];
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                return Err(EncoderError::NonFinite(alloc::format!("gradient at epoch {epoch}")));
            }
            adam[0].update(&mut p.encoder, &grads[0]);
            adam[1].update(&mut p.projection, &grads[1]);
            adam[2].update(&mut p.decoder, &grads[2]);
            adam[3].update(&mut p.readout, &grads[3]);
            tot += lv * n;
            cnt += n;
        }
        p.loss_history.push(tot / cnt);
    }
    Ok(p)
}
