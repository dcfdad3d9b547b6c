use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{GanConfig, LatentGan, CONTEXT_PREFIX, DISCRIMINATOR_PREFIX, GENERATOR_PREFIX};
use crate::autodiff::layers::Mode;
use crate::autodiff::optim::{adam_step, clip_global_norm, AdamState};
use crate::autodiff::{Tape, Tensor};
use crate::corpus::TurnSample;
use crate::error::{Error, Result};
use crate::vae::{reparameterize, LatentCode, VaeModel};

/// One training example in latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPair {
    pub query: LatentCode,
    /// Codes of the preceding utterances, oldest first; empty in
    /// single-turn mode.
    pub context: Vec<LatentCode>,
    pub response: LatentCode,
}

/// Encodes turn samples with a frozen VAE. Query and response codes are
/// posterior means, or one posterior draw each when `sample` is set;
/// context codes are always means.
pub fn encode_pairs(
    vae: &VaeModel,
    samples: &[TurnSample],
    sample: bool,
    rng: &mut impl Rng,
) -> Result<Vec<LatentPair>> {
    let queries = vae.encode_batch(
        &samples
            .iter()
            .map(|s| s.query.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let responses = vae.encode_batch(
        &samples
            .iter()
            .map(|s| s.response.as_slice())
            .collect::<Vec<_>>(),
    )?;
    let mut out = Vec::with_capacity(samples.len());
    for ((s, q), r) in samples.iter().zip(queries).zip(responses) {
        let context = vae
            .encode_batch(&s.context)?
            .iter()
            .map(|p| p.mean())
            .collect();
        let (query, response) = if sample {
            (reparameterize(&q, rng), reparameterize(&r, rng))
        } else {
            (q.mean(), r.mean())
        };
        out.push(LatentPair {
            query,
            context,
            response,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanEpochLog {
    pub epoch: usize,
    /// Training means over the epoch's batches.
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_mse: f64,
    pub g_total: f64,
    /// Held-out mean `||z_r - G(z_q)||^2`.
    pub valid_mse: f64,
    /// Held-out accuracy of the discriminator on real and generated pairs.
    pub valid_d_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanTrainLog {
    pub epochs: Vec<GanEpochLog>,
}

impl GanTrainLog {
    /// First epoch whose held-out MSE is below `threshold`.
    pub fn first_epoch_below(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.valid_mse < threshold)
            .map(|e| e.epoch)
    }
}

const EVAL_CHUNK: usize = 256;

impl LatentGan {
    /// `[z_q ; c]` for every pair, with frozen parameters.
    pub fn conditions(&self, pairs: &[LatentPair]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let b = self.store().bind(&mut tape, false)?;
            let queries: Vec<&LatentCode> = chunk.iter().map(|p| &p.query).collect();
            let contexts: Vec<&[LatentCode]> = chunk.iter().map(|p| p.context.as_slice()).collect();
            let c = self.condition_on_tape(&mut tape, &b, &queries, &contexts)?;
            out.extend(tape.value(c).to_rows());
        }
        Ok(out)
    }

    /// Held-out MSE and discriminator accuracy.
    pub fn evaluate(&self, pairs: &[LatentPair]) -> Result<(f64, f64)> {
        if pairs.is_empty() {
            return Ok((0.0, 0.0));
        }
        let conds = self.conditions(pairs)?;
        let fake = self.generate_batch(&conds)?;
        let real: Vec<LatentCode> = pairs.iter().map(|p| p.response.clone()).collect();
        let mse = real
            .iter()
            .zip(&fake)
            .map(|(r, f)| {
                r.0.iter()
                    .zip(&f.0)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / pairs.len() as f64;
        let d_real = self.discriminate_batch(&real, &conds)?;
        let d_fake = self.discriminate_batch(&fake, &conds)?;
        let correct = d_real.iter().filter(|&&p| p > 0.5).count()
            + d_fake.iter().filter(|&&p| p < 0.5).count();
        Ok((mse, correct as f64 / (2 * pairs.len()) as f64))
    }
}

fn select(grads: BTreeMap<String, Tensor>, prefixes: &[&str]) -> BTreeMap<String, Tensor> {
    grads
        .into_iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .collect()
}

fn diverged(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged {
            iteration,
            diagnostics: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Optimizer state for alternating updates of one [`LatentGan`].
///
/// Discriminator steps change only `disc.*` parameters; generator steps
/// change only `gen.*` and `ctx.*` parameters and the generator's batch-norm
/// running statistics.
#[derive(Clone, Debug)]
pub struct GanTrainer {
    gan: LatentGan,
    adam_g: AdamState,
    adam_d: AdamState,
    iteration: usize,
}

/// Generator step losses, batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorStep {
    pub adv: f64,
    pub mse: f64,
    pub total: f64,
}

impl GanTrainer {
    pub fn new(gan: LatentGan) -> Self {
        let cfg = gan.config().clone();
        GanTrainer {
            gan,
            adam_g: AdamState::new(cfg.generator_adam),
            adam_d: AdamState::new(cfg.discriminator_adam),
            iteration: 0,
        }
    }

    pub fn gan(&self) -> &LatentGan {
        &self.gan
    }

    pub fn into_gan(self) -> LatentGan {
        self.gan
    }

    fn check_batch(&self, batch: &[&LatentPair]) -> Result<()> {
        let min_rows = if self.gan.g_bn.is_some() { 2 } else { 1 };
        if batch.len() < min_rows {
            return Err(Error::InvalidInput(format!(
                "batch of {} pairs; at least {min_rows} needed",
                batch.len()
            )));
        }
        Ok(())
    }

    /// One discriminator update; returns its loss before the update.
    pub fn discriminator_step(&mut self, batch: &[&LatentPair]) -> Result<f64> {
        self.check_batch(batch)?;
        let err = diverged(self.iteration);
        let gan = &self.gan;
        let cfg = gan.config().clone();
        let queries: Vec<&LatentCode> = batch.iter().map(|p| &p.query).collect();
        let contexts: Vec<&[LatentCode]> = batch.iter().map(|p| p.context.as_slice()).collect();
        let responses: Vec<&LatentCode> = batch.iter().map(|p| &p.response).collect();
        let mut tape = Tape::new();
        let b = gan.store().bind(&mut tape, true)?;
        let cond = gan.condition_on_tape(&mut tape, &b, &queries, &contexts)?;
        let (fake, _) = gan
            .generator_on_tape(&mut tape, &b, cond, Mode::Train)
            .map_err(&err)?;
        // The discriminator sees generated codes as fixed inputs.
        let fake = tape.constant(tape.value(fake).clone())?;
        let real = super::latent_rows(&mut tape, &responses, cfg.latent)?;
        let loss = gan
            .discriminator_loss_on_tape(&mut tape, &b, cond, real, fake)
            .map_err(&err)?;
        let grads = tape.backward(loss).map_err(&err)?;
        let mut grads = select(
            gan.store().collect_grads(&b, &grads),
            &[DISCRIMINATOR_PREFIX],
        );
        if !clip_global_norm(&mut grads, cfg.grad_clip).is_finite() {
            return Err(err(Error::NonFinite {
                op: "discriminator gradient",
            }));
        }
        let value = tape.value(loss).item();
        adam_step(self.gan.store_mut().params_mut(), &grads, &mut self.adam_d)?;
        Ok(value)
    }

    /// One generator (and context encoder) update.
    pub fn generator_step(&mut self, batch: &[&LatentPair]) -> Result<GeneratorStep> {
        self.check_batch(batch)?;
        let err = diverged(self.iteration);
        let gan = &self.gan;
        let cfg = gan.config().clone();
        let queries: Vec<&LatentCode> = batch.iter().map(|p| &p.query).collect();
        let contexts: Vec<&[LatentCode]> = batch.iter().map(|p| p.context.as_slice()).collect();
        let responses: Vec<&LatentCode> = batch.iter().map(|p| &p.response).collect();
        let mut tape = Tape::new();
        let b = gan.store().bind(&mut tape, true)?;
        let cond = gan.condition_on_tape(&mut tape, &b, &queries, &contexts)?;
        let (fake, stats) = gan
            .generator_on_tape(&mut tape, &b, cond, Mode::Train)
            .map_err(&err)?;
        let target = super::latent_rows(&mut tape, &responses, cfg.latent)?;
        let loss = gan
            .generator_loss_on_tape(&mut tape, &b, cond, fake, target, cfg.gamma())
            .map_err(&err)?;
        let grads = tape.backward(loss.total).map_err(&err)?;
        let mut grads = select(
            gan.store().collect_grads(&b, &grads),
            &[GENERATOR_PREFIX, CONTEXT_PREFIX],
        );
        if !clip_global_norm(&mut grads, cfg.grad_clip).is_finite() {
            return Err(err(Error::NonFinite {
                op: "generator gradient",
            }));
        }
        let step = GeneratorStep {
            adv: loss.adv,
            mse: loss.mse,
            total: tape.value(loss.total).item(),
        };
        let bn = self.gan.g_bn.clone();
        adam_step(self.gan.store_mut().params_mut(), &grads, &mut self.adam_g)?;
        if let (Some(bn), Some(stats)) = (bn, stats) {
            bn.update_running(self.gan.store_mut(), &stats)?;
        }
        self.iteration += 1;
        Ok(step)
    }
}

/// Alternating training from a fresh model: per batch, `d_steps_per_g`
/// discriminator updates then one generator update. A trailing batch too
/// small for batch norm is skipped. Returns the final parameters;
/// `on_epoch` sees each epoch's log and model.
pub fn train_gan(
    train: &[LatentPair],
    valid: &[LatentPair],
    config: &GanConfig,
    rng: &mut impl Rng,
    on_epoch: &mut dyn FnMut(&GanEpochLog, &LatentGan),
) -> Result<(LatentGan, GanTrainLog)> {
    if train.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    let mut trainer = GanTrainer::new(LatentGan::new(config, rng)?);
    let min_rows = if config.preset.generator_batch_norm() {
        2
    } else {
        1
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = GanTrainLog::default();

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let (mut d_sum, mut adv_sum, mut mse_sum, mut total_sum, mut batches) =
            (0.0, 0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            if idx.len() < min_rows {
                continue;
            }
            let batch: Vec<&LatentPair> = idx.iter().map(|&i| &train[i]).collect();
            for _ in 0..config.d_steps_per_g {
                d_sum += trainer.discriminator_step(&batch)? / config.d_steps_per_g as f64;
            }
            let g = trainer.generator_step(&batch)?;
            adv_sum += g.adv;
            mse_sum += g.mse;
            total_sum += g.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let (valid_mse, valid_d_accuracy) =
            trainer
                .gan()
                .evaluate(if valid.is_empty() { train } else { valid })?;
        let entry = GanEpochLog {
            epoch,
            d_loss: d_sum / n,
            g_adv: adv_sum / n,
            g_mse: mse_sum / n,
            g_total: total_sum / n,
            valid_mse,
            valid_d_accuracy,
        };
        on_epoch(&entry, trainer.gan());
        log.epochs.push(entry);
    }
    Ok((trainer.into_gan(), log))
}
