use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latent_dialog::autodiff::{inject_gradient_fault, OpKind};
use latent_dialog::checkpoint::{GanCheckpoint, VaeCheckpoint};
use latent_dialog::corpus::{
    deduplicate, load_corpus, make_multi_turn, make_single_turn, DialogCorpus, RawCorpus,
    TurnSample, Vocabulary,
};
use latent_dialog::gan::{encode_pairs, train_gan as fit_gan};
use latent_dialog::inference::{
    format_responses, parse_responses, response_records, Responder, SampleSource,
};
use latent_dialog::metrics::{evaluate_responses, NgramLm, KN_DISCOUNT};
use latent_dialog::vae::train_vae as fit_vae;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::Common;

const VOCAB_FILE: &str = "vocab.txt";
const VAE_FILE: &str = "vae.ckpt";
const GAN_FILE: &str = "gan.ckpt";
const RESPONSES_FILE: &str = "responses.tsv";
const METRICS_FILE: &str = "metrics.txt";

/// Environment variable naming an op whose backward rule `verify` should
/// deliberately break, to show that the battery catches it.
pub const FAULT_ENV: &str = "LATENT_DIALOG_INJECT_FAULT";

/// Training stages draw from separate streams of the global seed.
const VAE_STREAM: u64 = 1 << 32;
const GAN_STREAM: u64 = (1 << 32) + 1;

fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn open(common: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(common.config.as_deref())?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(Run {
            cfg,
            out: common.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn create_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))
    }

    /// Writes the effective configuration next to a command's outputs.
    fn echo_config(&self, command: &str) -> Result<()> {
        let path = self.path(&format!("{command}.config.toml"));
        std::fs::write(&path, self.cfg.to_toml())
            .with_context(|| format!("writing {}", path.display()))
    }

    fn vocab(&self) -> Result<Vocabulary> {
        let path = self.path(VOCAB_FILE);
        if !path.exists() {
            bail!("missing vocabulary {}; run `prepare` first", path.display());
        }
        Ok(Vocabulary::load(&path)?)
    }

    fn corpus(&self, path: &Path) -> Result<RawCorpus> {
        let raw = load_corpus(path, self.cfg.data.format)?;
        if raw.skipped > 0 {
            log::warn!(
                "{}: skipped {} conversations with fewer than 2 utterances",
                path.display(),
                raw.skipped
            );
        }
        Ok(raw)
    }

    fn encoded(&self, path: &Path, vocab: &Vocabulary) -> Result<DialogCorpus> {
        Ok(DialogCorpus::encode(
            &self.corpus(path)?,
            vocab,
            self.cfg.data.max_len,
        ))
    }

    fn load_vae(&self, vocab: &Vocabulary) -> Result<VaeCheckpoint> {
        let path = self.path(VAE_FILE);
        if !path.exists() {
            bail!(
                "missing VAE checkpoint {}; run `train-vae` first",
                path.display()
            );
        }
        let vae = VaeCheckpoint::load(&path)?;
        vae.check_vocab(&vocab.hash())?;
        Ok(vae)
    }
}

/// A structured log: `key=value` records on stdout, mirrored to a file.
struct Records {
    file: File,
}

impl Records {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Records { file })
    }

    fn emit(&mut self, line: &str) -> Result<()> {
        println!("{line}");
        writeln!(self.file, "{line}").context("writing log")
    }
}

pub fn prepare(common: &Common) -> Result<()> {
    let run = Run::open(common)?;
    let data = &run.cfg.data;
    let splits = [
        ("train", &data.train),
        ("valid", &data.valid),
        ("test", &data.test),
    ];
    let raws = splits
        .iter()
        .map(|(_, p)| run.corpus(p))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::build(&raws[0], data.max_vocab, data.min_freq);
    run.create_out_dir()?;
    vocab.save(run.path(VOCAB_FILE))?;
    run.echo_config("prepare")?;
    println!("event=vocab size={} hash={}", vocab.len(), vocab.hash());
    for ((name, _), raw) in splits.iter().zip(&raws) {
        let dc = DialogCorpus::encode(raw, &vocab, data.max_len);
        let single = make_single_turn(&dc);
        let multi = make_multi_turn(&dc, run.cfg.gan.max_context_turns);
        let (single_n, multi_n) = (single.len(), multi.len());
        let single_unique = deduplicate(single).len();
        let multi_unique = deduplicate(multi).len();
        println!(
            "event=split name={name} conversations={} skipped={} utterances={} single_turn={single_n} \
             single_turn_duplicates={} multi_turn={multi_n} multi_turn_duplicates={}",
            raw.conversations.len(),
            raw.skipped,
            raw.num_utterances(),
            single_n - single_unique,
            multi_n - multi_unique,
        );
    }
    Ok(())
}

pub fn train_vae(common: &Common) -> Result<()> {
    let run = Run::open(common)?;
    let vocab = run.vocab()?;
    let train = run.encoded(&run.cfg.data.train, &vocab)?;
    let valid = run.encoded(&run.cfg.data.valid, &vocab)?;
    let train_utts: Vec<Vec<usize>> = train
        .utterances()
        .filter(|u| !u.is_empty())
        .cloned()
        .collect();
    let valid_utts: Vec<Vec<usize>> = valid
        .utterances()
        .filter(|u| !u.is_empty())
        .cloned()
        .collect();
    if train_utts.is_empty() {
        bail!(
            "training split {} has no utterances",
            run.cfg.data.train.display()
        );
    }
    run.echo_config("train-vae")?;
    let mut log = Records::create(&run.path("train-vae.log"))?;
    let seed = run.cfg.seed;
    let vocab_hash = vocab.hash();
    let ckpt_path = run.path(VAE_FILE);
    let mut rng = stage_rng(seed, VAE_STREAM);
    let mut failure: Option<anyhow::Error> = None;
    let (model, summary) = fit_vae(
        &train_utts,
        &valid_utts,
        &run.cfg.vae,
        vocab.len(),
        &mut rng,
        &mut |e, model, is_best| {
            let line = format!(
                "event=vae_epoch epoch={} iteration={} kl_weight={:.6} train_loss={:.6} train_nll={:.6} train_kl={:.6} \
                 valid_nll={:.6} valid_kl={:.6} valid_elbo={:.6} valid_bleu={:.6} best={is_best}",
                e.epoch,
                e.iteration,
                e.kl_weight,
                e.train_loss,
                e.train_nll,
                e.train_kl,
                e.valid_nll,
                e.valid_kl,
                e.valid_elbo,
                e.valid_bleu
            );
            if let Err(err) = log.emit(&line) {
                failure.get_or_insert(err);
            }
            if is_best {
                // Saved as soon as it is best, so a later divergence keeps it.
                if let Err(err) =
                    VaeCheckpoint::new(model.clone(), vocab_hash.clone(), seed).save(&ckpt_path)
                {
                    failure.get_or_insert(err.into());
                }
            }
        },
    )?;
    if let Some(err) = failure {
        return Err(err);
    }
    let hash = VaeCheckpoint::new(model, vocab_hash, seed).save(&ckpt_path)?;
    log.emit(&format!(
        "event=vae_done best_epoch={} stopped_early={} checkpoint={} hash={hash}",
        summary.best_epoch,
        summary.stopped_early,
        ckpt_path.display()
    ))
}

fn turn_samples(corpus: &DialogCorpus, context_turns: usize) -> Vec<TurnSample> {
    deduplicate(make_multi_turn(corpus, context_turns))
        .into_iter()
        .filter(|s| !s.query.is_empty() && !s.response.is_empty())
        .collect()
}

pub fn train_gan(common: &Common) -> Result<()> {
    let run = Run::open(common)?;
    let vocab = run.vocab()?;
    let vae = run.load_vae(&vocab)?;
    let cfg = &run.cfg.gan;
    if cfg.gamma.is_none() {
        log::info!("gan.gamma not set; using the default {}", cfg.gamma());
    }
    let turns = if cfg.multi_turn {
        cfg.max_context_turns
    } else {
        0
    };
    let train = turn_samples(&run.encoded(&run.cfg.data.train, &vocab)?, turns);
    let valid = turn_samples(&run.encoded(&run.cfg.data.valid, &vocab)?, turns);
    if train.is_empty() {
        bail!(
            "training split {} has no query-response pairs",
            run.cfg.data.train.display()
        );
    }
    run.echo_config("train-gan")?;
    let mut log = Records::create(&run.path("train-gan.log"))?;
    let mut rng = stage_rng(run.cfg.seed, GAN_STREAM);
    let train_pairs = encode_pairs(&vae.model, &train, cfg.sample_latents, &mut rng)?;
    let valid_pairs = encode_pairs(&vae.model, &valid, cfg.sample_latents, &mut rng)?;
    let mut failure: Option<anyhow::Error> = None;
    let (gan, _) = fit_gan(&train_pairs, &valid_pairs, cfg, &mut rng, &mut |e, _| {
        let line = format!(
            "event=gan_epoch epoch={} d_loss={:.6} g_adv={:.6} g_mse={:.6} g_total={:.6} valid_mse={:.6} \
             valid_d_accuracy={:.6}",
            e.epoch, e.d_loss, e.g_adv, e.g_mse, e.g_total, e.valid_mse, e.valid_d_accuracy
        );
        if let Err(err) = log.emit(&line) {
            failure.get_or_insert(err);
        }
    })?;
    if let Some(err) = failure {
        return Err(err);
    }
    let path = run.path(GAN_FILE);
    let hash = GanCheckpoint::new(gan, vae.hash.clone(), run.cfg.seed).save(&path)?;
    log.emit(&format!(
        "event=gan_done pairs={} checkpoint={} hash={hash} vae_hash={}",
        train_pairs.len(),
        path.display(),
        vae.hash
    ))
}

pub fn generate(
    common: &Common,
    n_samples: Option<usize>,
    source: Option<SampleSource>,
    context_turns: Option<usize>,
) -> Result<()> {
    let mut run = Run::open(common)?;
    if let Some(n) = n_samples {
        run.cfg.generate.n_samples = n;
    }
    if let Some(s) = source {
        run.cfg.generate.source = s;
    }
    run.cfg.validate()?;
    let vocab = run.vocab()?;
    let vae = run.load_vae(&vocab)?;
    let gan_path = run.path(GAN_FILE);
    if !gan_path.exists() {
        bail!(
            "missing GAN checkpoint {}; run `train-gan` first",
            gan_path.display()
        );
    }
    let gan = GanCheckpoint::load(&gan_path)?;
    gan.check_compatible(&vae)?;
    let multi_turn = gan.gan.config().multi_turn;
    let turns = context_turns.unwrap_or(if multi_turn {
        gan.gan.config().max_context_turns
    } else {
        0
    });
    if turns > 0 && !multi_turn {
        bail!("the GAN checkpoint is single-turn, so context turns are unsupported by the model");
    }
    let test = turn_samples(&run.encoded(&run.cfg.data.test, &vocab)?, turns);
    if test.is_empty() {
        bail!(
            "test split {} has no query-response pairs",
            run.cfg.data.test.display()
        );
    }
    let responder = Responder::new(&vae.model, &gan.gan, run.cfg.generate.clone())?;
    let responses = responder.batch_respond(&test, run.cfg.seed)?;
    let text = format_responses(&response_records(&test, &responses, &vocab));
    run.create_out_dir()?;
    run.echo_config("generate")?;
    let path = run.path(RESPONSES_FILE);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "event=generate queries={} samples_per_query={} responses={}",
        test.len(),
        run.cfg.generate.n_samples,
        path.display()
    );
    Ok(())
}

pub fn evaluate(
    common: &Common,
    responses: Option<PathBuf>,
    lm_corpus: Option<PathBuf>,
) -> Result<()> {
    let run = Run::open(common)?;
    let path = responses.unwrap_or_else(|| run.path(RESPONSES_FILE));
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let queries = parse_responses(&text, &path)?;
    let lm_path = lm_corpus.unwrap_or_else(|| run.cfg.data.train.clone());
    let lm_sentences: Vec<Vec<String>> = run
        .corpus(&lm_path)?
        .conversations
        .into_iter()
        .flatten()
        .collect();
    let lm = NgramLm::train(&lm_sentences, KN_DISCOUNT)?;
    let report = evaluate_responses(&queries, &lm)?;
    let text = report.to_text();
    run.create_out_dir()?;
    let out = run.path(METRICS_FILE);
    std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    print!("{text}");
    Ok(())
}

pub fn verify() -> Result<()> {
    let _fault = match std::env::var(FAULT_ENV) {
        Ok(name) => {
            let op = OpKind::from_name(&name)
                .with_context(|| format!("{FAULT_ENV}: unknown op `{name}`"))?;
            log::warn!("injecting a gradient fault into `{name}`");
            Some(inject_gradient_fault(op))
        }
        Err(_) => None,
    };
    let (ok, table) = latent_dialog::verify::run_and_report();
    print!("{table}");
    if !ok {
        bail!("verification failed");
    }
    Ok(())
}
