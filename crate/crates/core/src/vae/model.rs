use rand::Rng;
use rand_distr::StandardNormal;

use super::{LatentCode, PosteriorParams, VaeConfig};
use crate::autodiff::layers::{CellKind, Linear, RecState, RecurrentCell};
use crate::autodiff::params::{Bindings, ParamStore};
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::corpus::{pad_batch, PaddedBatch, BOS, EOS, PAD, RESERVED};
use crate::error::{Error, Result};

const EMBEDDING: &str = "embedding";
const EMBEDDING_INIT: f64 = 1.0;
/// Rows per tape when encoding or decoding many sentences at inference.
const INFERENCE_CHUNK: usize = 64;

/// Sentence VAE parameters plus the layer layout that names them.
#[derive(Clone, Debug)]
pub struct VaeModel {
    config: VaeConfig,
    vocab_size: usize,
    store: ParamStore,
    enc_fwd: RecurrentCell,
    enc_bwd: RecurrentCell,
    to_mu: Linear,
    to_log_sigma: Linear,
    to_state: Linear,
    dec: RecurrentCell,
    out: Linear,
}

/// Scalar loss node and its per-sentence components.
#[derive(Clone, Copy, Debug)]
pub struct VaeLoss {
    /// `(sum NLL + kl_weight * sum KL) / batch`.
    pub total: NodeId,
    /// Mean reconstruction negative log-likelihood per sentence (nats).
    pub nll: f64,
    /// Mean KL to the prior per sentence (nats).
    pub kl: f64,
}

/// One training batch with every random choice already made, so the loss
/// is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct VaeBatch {
    encoder: PaddedBatch,
    dec_in: PaddedBatch,
    dec_target: PaddedBatch,
    /// Standard normal noise `[batch, latent]`; `None` decodes from the mean.
    noise: Option<Tensor>,
}

impl VaeBatch {
    /// `dec_inputs[i]` is `utterances[i]` after word dropout. Both exclude
    /// BOS and EOS.
    pub fn new<S: AsRef<[usize]>>(
        utterances: &[S],
        dec_inputs: &[S],
        noise: Option<Tensor>,
    ) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::InvalidInput("empty VAE batch".into()));
        }
        if dec_inputs.len() != utterances.len() {
            return Err(Error::InvalidInput(format!(
                "{} utterances but {} decoder inputs",
                utterances.len(),
                dec_inputs.len()
            )));
        }
        let mut ins = Vec::with_capacity(utterances.len());
        let mut targets = Vec::with_capacity(utterances.len());
        for (u, d) in utterances.iter().zip(dec_inputs) {
            let (u, d) = (u.as_ref(), d.as_ref());
            if u.is_empty() {
                return Err(Error::InvalidInput(
                    "cannot encode an empty utterance".into(),
                ));
            }
            if u.len() != d.len() {
                return Err(Error::InvalidInput(
                    "decoder input length differs from utterance".into(),
                ));
            }
            ins.push(
                std::iter::once(BOS)
                    .chain(d.iter().copied())
                    .collect::<Vec<_>>(),
            );
            targets.push(
                u.iter()
                    .copied()
                    .chain(std::iter::once(EOS))
                    .collect::<Vec<_>>(),
            );
        }
        if let Some(n) = &noise {
            if n.shape() != [utterances.len(), n.cols()] {
                return Err(Error::shape(
                    "VaeBatch",
                    format!("noise shape {:?}", n.shape()),
                ));
            }
        }
        Ok(VaeBatch {
            encoder: pad_batch(utterances, PAD),
            dec_in: pad_batch(&ins, PAD),
            dec_target: pad_batch(&targets, PAD),
            noise,
        })
    }

    /// Draws word dropout and reparameterization noise from `rng`.
    pub fn sample<S: AsRef<[usize]>>(
        utterances: &[S],
        word_dropout: f64,
        latent: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dropped: Vec<Vec<usize>> = utterances
            .iter()
            .map(|u| super::word_dropout(u.as_ref(), word_dropout, rng))
            .collect();
        let noise: Vec<f64> = (0..utterances.len() * latent)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let owned: Vec<Vec<usize>> = utterances.iter().map(|u| u.as_ref().to_vec()).collect();
        Self::new(
            &owned,
            &dropped,
            Some(Tensor::new(vec![utterances.len(), latent], noise)?),
        )
    }

    /// No dropout, decoding from the posterior mean.
    pub fn deterministic<S: AsRef<[usize]>>(utterances: &[S]) -> Result<Self> {
        Self::new(utterances, utterances, None)
    }

    /// BOS-prefixed decoder inputs after word dropout.
    pub fn decoder_inputs(&self) -> &PaddedBatch {
        &self.dec_in
    }

    pub fn noise(&self) -> Option<&Tensor> {
        self.noise.as_ref()
    }

    /// EOS-terminated reconstruction targets.
    pub fn decoder_targets(&self) -> &PaddedBatch {
        &self.dec_target
    }

    pub fn len(&self) -> usize {
        self.encoder.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl VaeModel {
    fn declare(config: &VaeConfig, vocab_size: usize) -> Self {
        let (e, h, z) = (config.embed_dim, config.hidden, config.latent);
        let state_width = match config.cell {
            CellKind::Lstm => 2 * h,
            CellKind::Gru => h,
        };
        VaeModel {
            config: config.clone(),
            vocab_size,
            store: ParamStore::new(),
            enc_fwd: RecurrentCell::declare(config.cell, "enc_fwd", e, h),
            enc_bwd: RecurrentCell::declare(config.cell, "enc_bwd", e, h),
            to_mu: Linear::declare("to_mu", 2 * h, z),
            to_log_sigma: Linear::declare("to_log_sigma", 2 * h, z),
            to_state: Linear::declare("to_state", z, state_width),
            dec: RecurrentCell::declare(config.cell, "dec", e, h),
            out: Linear::declare("out", h, vocab_size),
        }
    }

    pub fn new(config: &VaeConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidInput(problems.join("; ")));
        }
        if vocab_size <= RESERVED.len() {
            return Err(Error::InvalidInput(format!(
                "vocabulary of {vocab_size} has no room beyond the reserved tokens"
            )));
        }
        let (e, h, z) = (config.embed_dim, config.hidden, config.latent);
        let mut m = Self::declare(config, vocab_size);
        let s = &mut m.store;
        s.init_uniform(EMBEDDING, &[vocab_size, e], EMBEDDING_INIT, rng);
        RecurrentCell::new(s, config.cell, "enc_fwd", e, h, rng);
        RecurrentCell::new(s, config.cell, "enc_bwd", e, h, rng);
        Linear::new(s, "to_mu", 2 * h, z, rng);
        Linear::new(s, "to_log_sigma", 2 * h, z, rng);
        Linear::new(s, "to_state", z, m.to_state.out_dim, rng);
        RecurrentCell::new(s, config.cell, "dec", e, h, rng);
        Linear::new(s, "out", h, vocab_size, rng);
        Ok(m)
    }

    /// Rebuilds a model around stored parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_store(config: &VaeConfig, vocab_size: usize, store: ParamStore) -> Result<Self> {
        let reference = Self::new(
            config,
            vocab_size,
            &mut rand::rngs::mock::StepRng::new(0, 1),
        )?;
        check_same_layout(reference.store.params(), store.params())?;
        let mut m = Self::declare(config, vocab_size);
        m.store = store;
        Ok(m)
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.vocab_size) {
            Some(&t) => Err(Error::TargetOutOfRange {
                target: t,
                classes: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Posterior mean and log standard deviation nodes, `[batch, latent]`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        batch: &PaddedBatch,
    ) -> Result<(NodeId, NodeId)> {
        if batch.lengths.contains(&0) {
            return Err(Error::InvalidInput(
                "cannot encode an empty utterance".into(),
            ));
        }
        let emb = b.get(EMBEDDING)?;
        let mut inputs = Vec::with_capacity(batch.width());
        let mut keep = Vec::with_capacity(batch.width());
        for t in 0..batch.width() {
            inputs.push(tape.gather_rows(emb, &batch.column(t))?);
            keep.push(batch.keep(t));
        }
        let rows = batch.rows();
        let init = self.enc_fwd.zero_state(tape, rows)?;
        let fwd = self.enc_fwd.run(tape, b, &inputs, &keep, false, init)?;
        let init = self.enc_bwd.zero_state(tape, rows)?;
        let bwd = self.enc_bwd.run(tape, b, &inputs, &keep, true, init)?;
        let both = tape.concat_cols(&[fwd.h, bwd.h])?;
        let mu = self.to_mu.forward(tape, b, both)?;
        let log_sigma = self.to_log_sigma.forward(tape, b, both)?;
        Ok((mu, log_sigma))
    }

    /// Initial decoder state from latent codes `[batch, latent]`.
    pub fn decoder_init(&self, tape: &mut Tape, b: &Bindings, z: NodeId) -> Result<RecState> {
        let s = self.to_state.forward(tape, b, z)?;
        let h = self.config.hidden;
        match self.config.cell {
            CellKind::Lstm => {
                let h0 = tape.slice_cols(s, 0, h)?;
                let c0 = tape.slice_cols(s, h, 2 * h)?;
                Ok(RecState { h: h0, c: Some(c0) })
            }
            CellKind::Gru => Ok(RecState { h: s, c: None }),
        }
    }

    /// One decoder step: embeds `ids`, advances `state` and returns the
    /// next-token logits.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        ids: &[usize],
        state: RecState,
    ) -> Result<(NodeId, RecState)> {
        let x = tape.gather_rows(b.get(EMBEDDING)?, ids)?;
        let next = self.dec.step(tape, b, x, state)?;
        let logits = self.out.forward(tape, b, next.h)?;
        Ok((logits, next))
    }

    /// Teacher-forced logits, one `[batch, vocab]` node per input column.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        z: NodeId,
        inputs: &PaddedBatch,
    ) -> Result<Vec<NodeId>> {
        let mut state = self.decoder_init(tape, b, z)?;
        let mut logits = Vec::with_capacity(inputs.width());
        for t in 0..inputs.width() {
            let (l, next) = self.decoder_step(tape, b, &inputs.column(t), state)?;
            logits.push(l);
            state = next;
        }
        Ok(logits)
    }

    /// Negative ELBO with KL weight `kl_weight`, averaged over the batch.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        batch: &VaeBatch,
        kl_weight: f64,
    ) -> Result<VaeLoss> {
        for ids in batch.encoder.ids.iter().chain(&batch.dec_in.ids) {
            self.check_ids(ids)?;
        }
        let rows = batch.len();
        let (mu, log_sigma) = self.encode_on_tape(tape, b, &batch.encoder)?;
        let z = match &batch.noise {
            Some(noise) => {
                if noise.cols() != self.config.latent {
                    return Err(Error::shape(
                        "loss_on_tape",
                        format!("noise width {}", noise.cols()),
                    ));
                }
                let eps = tape.constant(noise.clone())?;
                let sigma = tape.exp(log_sigma)?;
                let spread = tape.mul(sigma, eps)?;
                tape.add(mu, spread)?
            }
            None => mu,
        };
        let logits = self.decode_on_tape(tape, b, z, &batch.dec_in)?;
        let mut nll_terms = Vec::with_capacity(logits.len());
        for (t, &l) in logits.iter().enumerate() {
            let weights: Vec<f64> = batch
                .dec_target
                .keep(t)
                .iter()
                .map(|&k| if k { 1.0 } else { 0.0 })
                .collect();
            nll_terms.push(tape.softmax_xent(l, &batch.dec_target.column(t), &weights)?);
        }
        let mut nll = nll_terms[0];
        for &term in &nll_terms[1..] {
            nll = tape.add(nll, term)?;
        }
        let kl = kl_on_tape(tape, mu, log_sigma)?;
        let weighted_kl = tape.scale(kl, kl_weight)?;
        let sum = tape.add(nll, weighted_kl)?;
        let total = tape.scale(sum, 1.0 / rows as f64)?;
        Ok(VaeLoss {
            total,
            nll: tape.value(nll).item() / rows as f64,
            kl: tape.value(kl).item() / rows as f64,
        })
    }

    pub fn encode(&self, utterance: &[usize]) -> Result<PosteriorParams> {
        Ok(self.encode_batch(&[utterance])?.remove(0))
    }

    pub fn encode_batch<S: AsRef<[usize]>>(
        &self,
        utterances: &[S],
    ) -> Result<Vec<PosteriorParams>> {
        let mut out = Vec::with_capacity(utterances.len());
        for chunk in utterances.chunks(INFERENCE_CHUNK) {
            for u in chunk {
                self.check_ids(u.as_ref())?;
            }
            let batch = pad_batch(chunk, PAD);
            let mut tape = Tape::new();
            let b = self.store.bind(&mut tape, false)?;
            let (mu, ls) = self.encode_on_tape(&mut tape, &b, &batch)?;
            let (mu, ls) = (tape.value(mu), tape.value(ls));
            for r in 0..chunk.len() {
                out.push(PosteriorParams {
                    mu: mu.row_slice(r).to_vec(),
                    log_sigma: ls.row_slice(r).to_vec(),
                });
            }
        }
        Ok(out)
    }

    fn latent_node(&self, tape: &mut Tape, zs: &[&LatentCode]) -> Result<NodeId> {
        if let Some(z) = zs.iter().find(|z| z.dim() != self.config.latent) {
            return Err(Error::Incompatible {
                what: "latent dimension",
                expected: self.config.latent.to_string(),
                found: z.dim().to_string(),
            });
        }
        let rows: Vec<&[f64]> = zs.iter().map(|z| z.as_slice()).collect();
        tape.constant(Tensor::from_rows(&rows)?)
    }

    /// Logits `[inputs.len(), vocab]` for decoder inputs (BOS first).
    pub fn decode_teacher_forced(&self, z: &LatentCode, inputs: &[usize]) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("no decoder inputs".into()));
        }
        self.check_ids(inputs)?;
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false)?;
        let zn = self.latent_node(&mut tape, &[z])?;
        let logits = self.decode_on_tape(&mut tape, &b, zn, &pad_batch(&[inputs], PAD))?;
        let rows: Vec<&[f64]> = logits.iter().map(|&l| tape.value(l).row_slice(0)).collect();
        Tensor::from_rows(&rows)
    }

    /// Greedy decoding from `z`; stops at EOS (not included) or `max_len`.
    pub fn decode_greedy(&self, z: &LatentCode, max_len: usize) -> Result<Vec<usize>> {
        Ok(self
            .decode_greedy_batch(std::slice::from_ref(z), max_len)?
            .remove(0))
    }

    pub fn decode_greedy_batch(
        &self,
        zs: &[LatentCode],
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        self.decode_batch(zs, max_len, argmax)
    }

    /// Like [`decode_greedy_batch`](Self::decode_greedy_batch) but draws each
    /// token from the softmax distribution instead of taking the argmax.
    pub fn decode_sampled_batch(
        &self,
        zs: &[LatentCode],
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<usize>>> {
        self.decode_batch(zs, max_len, |logits| {
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    return i;
                }
                u -= w;
            }
            weights.len() - 1
        })
    }

    fn decode_batch(
        &self,
        zs: &[LatentCode],
        max_len: usize,
        mut choose: impl FnMut(&[f64]) -> usize,
    ) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(INFERENCE_CHUNK) {
            let mut tape = Tape::new();
            let b = self.store.bind(&mut tape, false)?;
            let refs: Vec<&LatentCode> = chunk.iter().collect();
            let zn = self.latent_node(&mut tape, &refs)?;
            let mut state = self.decoder_init(&mut tape, &b, zn)?;
            let mut prev = vec![BOS; chunk.len()];
            let mut done = vec![false; chunk.len()];
            let mut seqs = vec![Vec::new(); chunk.len()];
            for _ in 0..max_len {
                let (logits, next) = self.decoder_step(&mut tape, &b, &prev, state)?;
                state = next;
                let lv = tape.value(logits);
                for r in 0..chunk.len() {
                    if done[r] {
                        continue;
                    }
                    let tok = choose(lv.row_slice(r));
                    prev[r] = tok;
                    if tok == EOS {
                        done[r] = true;
                    } else {
                        seqs[r].push(tok);
                    }
                }
                if done.iter().all(|&d| d) {
                    break;
                }
            }
            out.extend(seqs);
        }
        Ok(out)
    }

    /// Mean reconstruction NLL and KL per sentence, decoding from the
    /// posterior mean without word dropout.
    pub fn evaluate<S: AsRef<[usize]>>(&self, utterances: &[S]) -> Result<(f64, f64)> {
        let (mut nll, mut kl) = (0.0, 0.0);
        for chunk in utterances.chunks(INFERENCE_CHUNK) {
            let batch = VaeBatch::deterministic(chunk)?;
            let mut tape = Tape::new();
            let b = self.store.bind(&mut tape, false)?;
            let loss = self.loss_on_tape(&mut tape, &b, &batch, 1.0)?;
            nll += loss.nll * chunk.len() as f64;
            kl += loss.kl * chunk.len() as f64;
        }
        let n = utterances.len().max(1) as f64;
        Ok((nll / n, kl / n))
    }
}

/// Summed `KL(N(mu, sigma^2) || N(0, I))` over a batch, on the tape.
pub fn kl_on_tape(tape: &mut Tape, mu: NodeId, log_sigma: NodeId) -> Result<NodeId> {
    let mu2 = tape.mul(mu, mu)?;
    let two_ls = tape.scale(log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let s = tape.add(mu2, var)?;
    let s = tape.sub(s, two_ls)?;
    let s = tape.add_scalar(s, -1.0)?;
    let total = tape.sum(s)?;
    tape.scale(total, 0.5)
}

/// Index of the largest value; the first one on ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_same_layout(
    expected: &std::collections::BTreeMap<String, Tensor>,
    found: &std::collections::BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, t) in expected {
        match found.get(name) {
            None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            Some(f) if f.shape() != t.shape() => {
                return Err(Error::Incompatible {
                    what: "tensor shape",
                    expected: format!("{name} {:?}", t.shape()),
                    found: format!("{:?}", f.shape()),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(name) = found.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(())
}
