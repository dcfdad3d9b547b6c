//! Conditional GAN in the VAE latent space: a generator maps the query code
//! (optionally with a context vector) to a response code, and a
//! discriminator scores (response, condition) pairs.

mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::layers::{Activation, BatchNorm, CellKind, Linear, Mode};
use crate::autodiff::optim::AdamConfig;
use crate::autodiff::params::{Bindings, ParamStore};
use crate::autodiff::{BatchStats, NodeId, Tape, Tensor};
use crate::context::{ContextEncoder, CONTEXT_HIDDEN};
use crate::error::{Error, Result};
use crate::vae::{LatentCode, LATENT_DIM};

pub use train::{
    encode_pairs, train_gan, GanEpochLog, GanTrainLog, GanTrainer, GeneratorStep, LatentPair,
};

pub const GENERATOR_HIDDEN: usize = 256;
pub const DEFAULT_GAMMA: f64 = 1.0;

/// Generator and discriminator layouts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanPreset {
    /// LeakyReLU with batch norm on the generator's hidden layer; LeakyReLU
    /// discriminator.
    #[default]
    LeakyBatchNorm,
    /// ReLU hidden layers, no normalization.
    Relu,
}

impl GanPreset {
    pub fn activation(self) -> Activation {
        match self {
            GanPreset::LeakyBatchNorm => Activation::LeakyRelu,
            GanPreset::Relu => Activation::Relu,
        }
    }

    pub fn generator_batch_norm(self) -> bool {
        self == GanPreset::LeakyBatchNorm
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorHead {
    /// Hidden layer then one logit.
    #[default]
    Mlp,
    /// A single affine map to the logit.
    Logistic,
}

/// Generator adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialLoss {
    /// Minimize `-log D(G(z_q), z_q)`.
    #[default]
    NonSaturating,
    /// Minimize `log(1 - D(G(z_q), z_q))`.
    Minimax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub preset: GanPreset,
    pub discriminator_head: DiscriminatorHead,
    pub adversarial_loss: AdversarialLoss,
    pub latent: usize,
    pub hidden: usize,
    /// Condition on a context vector built from preceding utterances.
    pub multi_turn: bool,
    pub context_hidden: usize,
    pub context_cell: CellKind,
    /// Earlier utterances kept as context in multi-turn mode.
    pub max_context_turns: usize,
    /// Weight of the MSE term; unset means [`DEFAULT_GAMMA`].
    pub gamma: Option<f64>,
    /// Weight of the adversarial term; 0 trains a plain regressor.
    pub adv_weight: f64,
    pub d_steps_per_g: usize,
    pub generator_adam: AdamConfig,
    pub discriminator_adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    /// Train on posterior samples instead of posterior means.
    pub sample_latents: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            preset: GanPreset::LeakyBatchNorm,
            discriminator_head: DiscriminatorHead::Mlp,
            adversarial_loss: AdversarialLoss::NonSaturating,
            latent: LATENT_DIM,
            hidden: GENERATOR_HIDDEN,
            multi_turn: false,
            context_hidden: CONTEXT_HIDDEN,
            context_cell: CellKind::Lstm,
            max_context_turns: 3,
            gamma: None,
            adv_weight: 1.0,
            d_steps_per_g: 1,
            generator_adam: AdamConfig::default(),
            discriminator_adam: AdamConfig::default(),
            batch_size: 64,
            epochs: 50,
            grad_clip: 5.0,
            sample_latents: false,
        }
    }
}

impl GanConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(DEFAULT_GAMMA)
    }

    pub fn context_dim(&self) -> usize {
        if self.multi_turn {
            2 * self.context_hidden
        } else {
            0
        }
    }

    /// Width of `[z_q ; context]`.
    pub fn condition_dim(&self) -> usize {
        self.latent + self.context_dim()
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("latent", self.latent),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("d_steps_per_g", self.d_steps_per_g),
        ] {
            if v == 0 {
                problems.push(format!("gan.{name} must be positive"));
            }
        }
        if self.multi_turn && self.context_hidden == 0 {
            problems.push("gan.context_hidden must be positive in multi-turn mode".into());
        }
        if self.gamma() < 0.0 {
            problems.push(format!(
                "gan.gamma must be non-negative, got {}",
                self.gamma()
            ));
        }
        if self.adv_weight < 0.0 {
            problems.push(format!(
                "gan.adv_weight must be non-negative, got {}",
                self.adv_weight
            ));
        }
        for (name, lr) in [
            ("generator_adam.lr", self.generator_adam.lr),
            ("discriminator_adam.lr", self.discriminator_adam.lr),
        ] {
            if lr <= 0.0 {
                problems.push(format!("gan.{name} must be positive, got {lr}"));
            }
        }
        if self.preset.generator_batch_norm() && self.batch_size < 2 {
            problems.push("gan.batch_size must be at least 2 with batch norm".into());
        }
        if self.grad_clip <= 0.0 {
            problems.push(format!(
                "gan.grad_clip must be positive, got {}",
                self.grad_clip
            ));
        }
        problems
    }
}

/// Prefix of generator parameters (and of the context encoder, which is
/// trained with the generator).
pub const GENERATOR_PREFIX: &str = "gen.";
pub const CONTEXT_PREFIX: &str = "ctx.";
pub const DISCRIMINATOR_PREFIX: &str = "disc.";

/// Generator, discriminator and optional context encoder sharing one store.
#[derive(Clone, Debug)]
pub struct LatentGan {
    config: GanConfig,
    store: ParamStore,
    g1: Linear,
    g_bn: Option<BatchNorm>,
    g2: Linear,
    d1: Linear,
    d2: Option<Linear>,
    context: Option<ContextEncoder>,
}

/// Generator loss node with its parts, each a batch mean.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: NodeId,
    pub adv: f64,
    pub mse: f64,
}

impl LatentGan {
    fn declare(config: &GanConfig) -> Self {
        let (z, h, c) = (config.latent, config.hidden, config.condition_dim());
        let d_in = z + c;
        let (d1, d2) = match config.discriminator_head {
            DiscriminatorHead::Mlp => (
                Linear::declare("disc.l1", d_in, h),
                Some(Linear::declare("disc.l2", h, 1)),
            ),
            DiscriminatorHead::Logistic => (Linear::declare("disc.out", d_in, 1), None),
        };
        LatentGan {
            config: config.clone(),
            store: ParamStore::new(),
            g1: Linear::declare("gen.l1", c, h),
            g_bn: config
                .preset
                .generator_batch_norm()
                .then(|| BatchNorm::declare("gen.bn", h)),
            g2: Linear::declare("gen.l2", h, z),
            d1,
            d2,
            context: config.multi_turn.then(|| {
                ContextEncoder::declare("ctx", config.context_cell, z, config.context_hidden)
            }),
        }
    }

    pub fn new(config: &GanConfig, rng: &mut impl Rng) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::InvalidInput(problems.join("; ")));
        }
        let mut m = Self::declare(config);
        let s = &mut m.store;
        Linear::new(s, &m.g1.name, m.g1.in_dim, m.g1.out_dim, rng);
        if let Some(bn) = &m.g_bn {
            BatchNorm::new(s, &bn.name, bn.features);
        }
        Linear::new(s, &m.g2.name, m.g2.in_dim, m.g2.out_dim, rng);
        Linear::new(s, &m.d1.name, m.d1.in_dim, m.d1.out_dim, rng);
        if let Some(d2) = &m.d2 {
            Linear::new(s, &d2.name, d2.in_dim, d2.out_dim, rng);
        }
        if config.multi_turn {
            ContextEncoder::new(
                s,
                "ctx",
                config.context_cell,
                config.latent,
                config.context_hidden,
                rng,
            );
        }
        Ok(m)
    }

    /// Rebuilds a model around stored parameters and buffers, checking the
    /// layout against a freshly initialised one.
    pub fn from_store(config: &GanConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::new(config, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        crate::vae::check_same_layout(reference.store.params(), store.params())?;
        crate::vae::check_same_layout(reference.store.buffers(), store.buffers())?;
        let mut m = Self::declare(config);
        m.store = store;
        Ok(m)
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn generator_input_dim(&self) -> usize {
        self.g1.in_dim
    }

    pub fn generator_output_dim(&self) -> usize {
        self.g2.out_dim
    }

    pub fn discriminator_input_dim(&self) -> usize {
        self.d1.in_dim
    }

    pub fn context_encoder(&self) -> Option<&ContextEncoder> {
        self.context.as_ref()
    }

    /// Response codes `[batch, latent]` from conditions `[batch, cond]`.
    /// Train mode normalizes with batch statistics and returns them.
    pub fn generator_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        cond: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let width = tape.value(cond).cols();
        if width != self.g1.in_dim {
            return Err(Error::Incompatible {
                what: "generator input width",
                expected: self.g1.in_dim.to_string(),
                found: width.to_string(),
            });
        }
        let mut h = self.g1.forward(tape, b, cond)?;
        let mut stats = None;
        if let Some(bn) = &self.g_bn {
            let (out, st) = bn.forward(tape, b, &self.store, h, mode)?;
            h = out;
            stats = st;
        }
        let h = self.config.preset.activation().apply(tape, h)?;
        Ok((self.g2.forward(tape, b, h)?, stats))
    }

    /// Discriminator logits `[batch, 1]` for `(z_resp, cond)` pairs.
    pub fn discriminator_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        z_resp: NodeId,
        cond: NodeId,
    ) -> Result<NodeId> {
        let x = tape.concat_cols(&[z_resp, cond])?;
        let width = tape.value(x).cols();
        if width != self.d1.in_dim {
            return Err(Error::Incompatible {
                what: "discriminator input width",
                expected: self.d1.in_dim.to_string(),
                found: width.to_string(),
            });
        }
        let h = self.d1.forward(tape, b, x)?;
        match &self.d2 {
            Some(d2) => {
                let h = self.config.preset.activation().apply(tape, h)?;
                d2.forward(tape, b, h)
            }
            None => Ok(h),
        }
    }

    /// `-mean[log D(real) + log(1 - D(fake))]` in logit form.
    pub fn discriminator_loss_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        cond: NodeId,
        real: NodeId,
        fake: NodeId,
    ) -> Result<NodeId> {
        let rows = tape.value(cond).rows() as f64;
        let lr = self.discriminator_on_tape(tape, b, real, cond)?;
        let lf = self.discriminator_on_tape(tape, b, fake, cond)?;
        let log_d_real = tape.log_sigmoid(lr)?;
        let neg_lf = tape.scale(lf, -1.0)?;
        let log_not_d_fake = tape.log_sigmoid(neg_lf)?;
        let sum = tape.add(log_d_real, log_not_d_fake)?;
        let total = tape.sum(sum)?;
        tape.scale(total, -1.0 / rows)
    }

    /// `adv_weight * adv + gamma * mse`, where `mse` is the batch mean of
    /// `||target - fake||^2`.
    pub fn generator_loss_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        cond: NodeId,
        fake: NodeId,
        target: NodeId,
        gamma: f64,
    ) -> Result<GeneratorLoss> {
        let rows = tape.value(cond).rows() as f64;
        let lf = self.discriminator_on_tape(tape, b, fake, cond)?;
        let adv_sum = match self.config.adversarial_loss {
            AdversarialLoss::NonSaturating => {
                let l = tape.log_sigmoid(lf)?;
                let s = tape.sum(l)?;
                tape.scale(s, -1.0)?
            }
            AdversarialLoss::Minimax => {
                let neg = tape.scale(lf, -1.0)?;
                let l = tape.log_sigmoid(neg)?;
                tape.sum(l)?
            }
        };
        let adv = tape.scale(adv_sum, 1.0 / rows)?;
        let se = tape.squared_error(target, fake)?;
        let mse = tape.scale(se, 1.0 / rows)?;
        let weighted_adv = tape.scale(adv, self.config.adv_weight)?;
        let weighted_mse = tape.scale(mse, gamma)?;
        let total = tape.add(weighted_adv, weighted_mse)?;
        Ok(GeneratorLoss {
            total,
            adv: tape.value(adv).item(),
            mse: tape.value(mse).item(),
        })
    }

    /// Context vectors for a batch of contexts; zeros-width when single-turn.
    pub fn context_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        contexts: &[&[LatentCode]],
    ) -> Result<Option<NodeId>> {
        match &self.context {
            Some(enc) => Ok(Some(enc.encode_on_tape(tape, b, contexts)?)),
            None => Ok(None),
        }
    }

    /// `[z_q ; c]` node for a batch.
    pub fn condition_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        queries: &[&LatentCode],
        contexts: &[&[LatentCode]],
    ) -> Result<NodeId> {
        let q = latent_rows(tape, queries, self.config.latent)?;
        match self.context_on_tape(tape, b, contexts)? {
            Some(c) => tape.concat_cols(&[q, c]),
            None => Ok(q),
        }
    }

    /// Context vector of preceding-utterance codes (posterior means); the
    /// zero vector for an empty context. Empty in single-turn mode.
    pub fn context_vector(&self, context: &[LatentCode]) -> Result<Vec<f64>> {
        let Some(enc) = &self.context else {
            return Ok(Vec::new());
        };
        if context.is_empty() {
            return Ok(vec![0.0; enc.output_dim()]);
        }
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false)?;
        let c = enc.encode_on_tape(&mut tape, &b, &[context])?;
        Ok(tape.value(c).row_slice(0).to_vec())
    }

    /// Generator output for conditioning vectors, with batch norm (if any)
    /// using running statistics.
    pub fn generate_batch(&self, conds: &[Vec<f64>]) -> Result<Vec<LatentCode>> {
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false)?;
        let x = tape.constant(Tensor::from_rows(conds).map_err(|_| Error::Incompatible {
            what: "generator input width",
            expected: self.g1.in_dim.to_string(),
            found: "ragged rows".into(),
        })?)?;
        let (out, _) = self.generator_on_tape(&mut tape, &b, x, Mode::Eval)?;
        Ok(tape
            .value(out)
            .to_rows()
            .into_iter()
            .map(LatentCode)
            .collect())
    }

    pub fn generate(&self, cond: &[f64]) -> Result<LatentCode> {
        Ok(self.generate_batch(&[cond.to_vec()])?.remove(0))
    }

    /// `D(z_resp, cond)` for each pair.
    pub fn discriminate_batch(
        &self,
        z_resp: &[LatentCode],
        conds: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        if z_resp.len() != conds.len() {
            return Err(Error::InvalidInput(
                "response and condition counts differ".into(),
            ));
        }
        if z_resp.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, false)?;
        let refs: Vec<&LatentCode> = z_resp.iter().collect();
        let z = latent_rows(&mut tape, &refs, self.config.latent)?;
        let c = tape.constant(Tensor::from_rows(conds)?)?;
        let logits = self.discriminator_on_tape(&mut tape, &b, z, c)?;
        Ok(tape
            .value(logits)
            .data()
            .iter()
            .map(|&l| crate::autodiff::sigmoid(l))
            .collect())
    }

    pub fn discriminate(&self, z_resp: &LatentCode, cond: &[f64]) -> Result<f64> {
        Ok(self.discriminate_batch(std::slice::from_ref(z_resp), &[cond.to_vec()])?[0])
    }

    /// Mean of `log D(real) + log(1 - D(G(cond)))` over a batch, the value
    /// the two players fight over; generator in eval mode.
    pub fn value(&self, conds: &[Vec<f64>], real: &[LatentCode]) -> Result<f64> {
        let fake = self.generate_batch(conds)?;
        let d_real = self.discriminate_batch(real, conds)?;
        let d_fake = self.discriminate_batch(&fake, conds)?;
        let n = conds.len().max(1) as f64;
        Ok(d_real
            .iter()
            .zip(&d_fake)
            .map(|(r, f)| r.ln() + (1.0 - f).ln())
            .sum::<f64>()
            / n)
    }
}

pub(crate) fn latent_rows(tape: &mut Tape, zs: &[&LatentCode], dim: usize) -> Result<NodeId> {
    if let Some(z) = zs.iter().find(|z| z.dim() != dim) {
        return Err(Error::Incompatible {
            what: "latent dimension",
            expected: dim.to_string(),
            found: z.dim().to_string(),
        });
    }
    let rows: Vec<&[f64]> = zs.iter().map(|z| z.as_slice()).collect();
    tape.constant(Tensor::from_rows(&rows)?)
}
