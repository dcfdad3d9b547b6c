//! Sentence variational autoencoder: a bidirectional recurrent encoder to a
//! diagonal Gaussian posterior, and a recurrent decoder initialised from the
//! latent code.

mod model;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::layers::CellKind;
use crate::autodiff::optim::AdamConfig;
use crate::corpus::{BOS, EOS, PAD, UNK};

pub(crate) use model::check_same_layout;
pub use model::{kl_on_tape, VaeBatch, VaeLoss, VaeModel};
pub use train::{reconstruction_bleu, train_vae, VaeEpochLog, VaeTrainLog};

/// Default latent dimension.
pub const LATENT_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub embed_dim: usize,
    /// Hidden size of each encoder direction and of the decoder.
    pub hidden: usize,
    pub latent: usize,
    pub cell: CellKind,
    pub word_dropout: f64,
    /// Final KL weight.
    pub kl_target: f64,
    /// Iterations over which the KL weight rises to `kl_target`.
    pub anneal_horizon: usize,
    /// When false the KL weight is `kl_target` from the first iteration.
    pub anneal: bool,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    /// Longest reconstruction produced during validation.
    pub max_len: usize,
    /// Stop once validation reconstruction BLEU reaches this value.
    pub target_bleu: Option<f64>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            embed_dim: 300,
            hidden: 512,
            latent: LATENT_DIM,
            cell: CellKind::Lstm,
            word_dropout: 0.5,
            kl_target: 0.15,
            anneal_horizon: 4500,
            anneal: true,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 30,
            grad_clip: 5.0,
            max_len: crate::corpus::DEFAULT_MAX_UTTERANCE_LEN,
            target_bleu: None,
        }
    }
}

impl VaeConfig {
    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            target: self.kl_target,
            horizon: self.anneal_horizon,
        }
    }

    pub fn kl_weight(&self, iteration: usize) -> f64 {
        if self.anneal {
            anneal_weight(iteration, &self.schedule())
        } else {
            self.kl_target
        }
    }

    /// Every problem with the configuration, empty when valid.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                problems.push(format!("vae.{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.word_dropout) {
            problems.push(format!(
                "vae.word_dropout must be in [0, 1], got {}",
                self.word_dropout
            ));
        }
        if self.kl_target < 0.0 {
            problems.push(format!(
                "vae.kl_target must be non-negative, got {}",
                self.kl_target
            ));
        }
        if self.adam.lr <= 0.0 {
            problems.push(format!(
                "vae.adam.lr must be positive, got {}",
                self.adam.lr
            ));
        }
        if self.grad_clip <= 0.0 {
            problems.push(format!(
                "vae.grad_clip must be positive, got {}",
                self.grad_clip
            ));
        }
        problems
    }
}

/// Diagonal Gaussian posterior `N(mu, diag(exp(log_sigma))^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

impl PosteriorParams {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|s| s.exp()).collect()
    }

    pub fn mean(&self) -> LatentCode {
        LatentCode(self.mu.clone())
    }
}

/// A point in the VAE latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `z = mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn reparameterize(post: &PosteriorParams, rng: &mut impl Rng) -> LatentCode {
    LatentCode(
        post.mu
            .iter()
            .zip(&post.log_sigma)
            .map(|(&m, &ls)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + ls.exp() * eps
            })
            .collect(),
    )
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))`.
pub fn kl_to_standard_normal(post: &PosteriorParams) -> f64 {
    post.mu
        .iter()
        .zip(&post.log_sigma)
        .map(|(&m, &ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
        .sum()
}

/// Sigmoid KL-weight schedule rising to `target` over `horizon` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub target: f64,
    pub horizon: usize,
}

impl AnnealSchedule {
    pub fn midpoint(&self) -> f64 {
        self.horizon as f64 / 2.0
    }

    /// Chosen so the logistic reaches 0.999 of the target at the horizon.
    pub fn steepness(&self) -> f64 {
        6.9068 / self.midpoint()
    }
}

/// `target * logistic(k (t - horizon/2))`, clamped to `target` from the
/// horizon on.
pub fn anneal_weight(t: usize, sched: &AnnealSchedule) -> f64 {
    if t >= sched.horizon {
        return sched.target;
    }
    let x = sched.steepness() * (t as f64 - sched.midpoint());
    sched.target * crate::autodiff::sigmoid(x)
}

/// Replaces each ordinary token with UNK with probability `p`. BOS, EOS and
/// PAD are never touched.
pub fn word_dropout(tokens: &[usize], p: f64, rng: &mut impl Rng) -> Vec<usize> {
    tokens
        .iter()
        .map(|&t| {
            if t == BOS || t == EOS || t == PAD || p <= 0.0 {
                t
            } else if p >= 1.0 || rng.gen::<f64>() < p {
                UNK
            } else {
                t
            }
        })
        .collect()
}
