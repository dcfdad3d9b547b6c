use rand::seq::SliceRandom;
use rand::Rng;

use super::model::{VaeBatch, VaeModel};
use super::{LatentCode, VaeConfig};
use crate::autodiff::optim::{adam_step, clip_global_norm, AdamState};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::bleu_smoothed;

/// Validation summary after one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeEpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iteration: usize,
    pub kl_weight: f64,
    /// Mean weighted training loss per sentence over the epoch.
    pub train_loss: f64,
    pub train_nll: f64,
    pub train_kl: f64,
    /// Validation NLL when decoding from the posterior mean.
    pub valid_nll: f64,
    pub valid_kl: f64,
    /// `-(valid_nll + valid_kl)`; higher is better.
    pub valid_elbo: f64,
    /// Mean BLEU of greedy reconstructions from the posterior mean.
    pub valid_bleu: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VaeTrainLog {
    pub epochs: Vec<VaeEpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Greedy reconstruction BLEU from the posterior mean, averaged over
/// `sentences`.
pub fn reconstruction_bleu(
    model: &VaeModel,
    sentences: &[Vec<usize>],
    max_len: usize,
) -> Result<f64> {
    if sentences.is_empty() {
        return Ok(0.0);
    }
    let zs: Vec<LatentCode> = model
        .encode_batch(sentences)?
        .iter()
        .map(|p| p.mean())
        .collect();
    let hyps = model.decode_greedy_batch(&zs, max_len)?;
    let total: f64 = hyps
        .iter()
        .zip(sentences)
        .map(|(h, r)| bleu_smoothed(h, r))
        .sum();
    Ok(total / sentences.len() as f64)
}

/// Trains a VAE and returns the parameters with the best validation ELBO.
///
/// `on_epoch` sees every epoch's log and the current model, and whether it
/// is the best so far; callers use it to log and to save checkpoints, so a
/// later divergence never loses the best model. A non-finite loss or
/// gradient stops training with [`Error::Diverged`]. An empty validation
/// set validates on the training sentences.
pub fn train_vae(
    train: &[Vec<usize>],
    valid: &[Vec<usize>],
    config: &VaeConfig,
    vocab_size: usize,
    rng: &mut impl Rng,
    on_epoch: &mut dyn FnMut(&VaeEpochLog, &VaeModel, bool),
) -> Result<(VaeModel, VaeTrainLog)> {
    let train: Vec<Vec<usize>> = train.iter().filter(|s| !s.is_empty()).cloned().collect();
    if train.is_empty() {
        return Err(Error::InvalidInput("no training sentences".into()));
    }
    let valid: Vec<Vec<usize>> = valid.iter().filter(|s| !s.is_empty()).cloned().collect();
    let valid = if valid.is_empty() {
        train.clone()
    } else {
        valid
    };

    let mut model = VaeModel::new(config, vocab_size, rng)?;
    let mut adam = AdamState::new(config.adam);
    let mut log = VaeTrainLog::default();
    let mut best: Option<(f64, VaeModel)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut iteration = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let (mut loss_sum, mut nll_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        let mut kl_weight = config.kl_weight(iteration);
        for idx in order.chunks(config.batch_size) {
            let sentences: Vec<&Vec<usize>> = idx.iter().map(|&i| &train[i]).collect();
            let batch = VaeBatch::sample(&sentences, config.word_dropout, config.latent, rng)?;
            kl_weight = config.kl_weight(iteration);
            let mut tape = Tape::new();
            let b = model.store().bind(&mut tape, true)?;
            let diverged = |e: Error| match e {
                Error::NonFinite { op } => Error::Diverged {
                    iteration,
                    diagnostics: format!("non-finite value in {op} at epoch {epoch}"),
                },
                other => other,
            };
            let loss = model
                .loss_on_tape(&mut tape, &b, &batch, kl_weight)
                .map_err(diverged)?;
            let grads = tape.backward(loss.total).map_err(diverged)?;
            let mut grads = model.store().collect_grads(&b, &grads);
            let norm = clip_global_norm(&mut grads, config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    diagnostics: format!("gradient norm {norm} at epoch {epoch}"),
                });
            }
            adam_step(model.store_mut().params_mut(), &grads, &mut adam)?;
            iteration += 1;
            let n = idx.len() as f64;
            loss_sum += tape.value(loss.total).item() * n;
            nll_sum += loss.nll * n;
            kl_sum += loss.kl * n;
        }
        let n = train.len() as f64;
        let (valid_nll, valid_kl) = model.evaluate(&valid)?;
        let entry = VaeEpochLog {
            epoch,
            iteration,
            kl_weight,
            train_loss: loss_sum / n,
            train_nll: nll_sum / n,
            train_kl: kl_sum / n,
            valid_nll,
            valid_kl,
            valid_elbo: -(valid_nll + valid_kl),
            valid_bleu: reconstruction_bleu(&model, &valid, config.max_len)?,
        };
        let is_best = best.as_ref().is_none_or(|(e, _)| entry.valid_elbo > *e);
        if is_best {
            best = Some((entry.valid_elbo, model.clone()));
            log.best_epoch = epoch;
        }
        on_epoch(&entry, &model, is_best);
        let reached = config.target_bleu.is_some_and(|t| entry.valid_bleu >= t);
        log.epochs.push(entry);
        if reached {
            log.stopped_early = true;
            break;
        }
    }
    let model = best.map_or(model, |(_, m)| m);
    Ok((model, log))
}
