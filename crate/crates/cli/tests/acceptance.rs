//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the test
//! fails if any criterion does.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use latent_dialog::autodiff::optim::AdamConfig;
use latent_dialog::autodiff::optim::{adam_step, AdamState};
use latent_dialog::autodiff::{Tape, Tensor};
use latent_dialog::checkpoint::{GanCheckpoint, VaeCheckpoint};
use latent_dialog::corpus::{RawCorpus, Vocabulary};
use latent_dialog::gan::{train_gan, GanConfig, GanPreset, GanTrainLog, LatentGan, LatentPair};
use latent_dialog::inference::{parse_responses, GenerateConfig, DEFAULT_SAMPLES};
use latent_dialog::metrics::{
    bleu_aggregate, bleu_smoothed, bleu_stats, evaluate_responses, inter_distinct, intra_distinct,
    perplexity, ttr, LanguageModel, NgramLm, QueryResponses, KN_DISCOUNT,
};
use latent_dialog::synthetic::{toy_grammar_corpus, LinearMapTask};
use latent_dialog::vae::{
    kl_to_standard_normal, train_vae, LatentCode, PosteriorParams, VaeConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1. Gradient battery.

fn gradient_battery() -> Outcome {
    let start = Instant::now();
    let results = latent_dialog::verify::run_battery();
    let elapsed = start.elapsed();
    let grads: Vec<_> = results
        .iter()
        .filter(|r| r.name.starts_with("grad "))
        .collect();
    let failing: Vec<&str> = grads
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    let required = [
        "grad Lstm step",
        "grad VAE loss (Lstm)",
        "grad discriminator loss",
        "grad generator loss",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|n| !grads.iter().any(|r| r.name == *n))
        .collect();
    check(
        failing.is_empty() && missing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} gradient checks, failing {failing:?}, missing {missing:?}, {:.1} s (limit 60 s)",
            grads.len(),
            elapsed.as_secs_f64()
        ),
    )
}

// 2. Closed forms.

fn closed_forms() -> Outcome {
    let zero = kl_to_standard_normal(&PosteriorParams {
        mu: vec![0.0; 128],
        log_sigma: vec![0.0; 128],
    });
    let one = kl_to_standard_normal(&PosteriorParams {
        mu: vec![1.0],
        log_sigma: vec![0.0],
    });

    // A discriminator whose output layer is zero gives D = 1/2 everywhere.
    let cfg = GanConfig {
        latent: 4,
        hidden: 8,
        ..GanConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gan = LatentGan::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let last: Vec<String> = gan
        .store()
        .params()
        .keys()
        .filter(|k| k.starts_with("disc.l2"))
        .cloned()
        .collect();
    for name in &last {
        gan.store_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let conds: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let real: Vec<LatentCode> = (0..5)
        .map(|_| LatentCode((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let value = gan.value(&conds, &real).map_err(|e| e.to_string())?;
    let expected = -2.0 * 2f64.ln();
    check(
        !last.is_empty()
            && zero == 0.0
            && (one - 0.5).abs() < 1e-12
            && (value - expected).abs() < 1e-12,
        format!("KL(0) = {zero}, KL(mu=1) = {one}, V(D=1/2) = {value:.15} vs {expected:.15}"),
    )
}

// 3. VAE on the toy grammar.

fn vae_convergence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sentences = toy_grammar_corpus(500, &mut rng);
    let longest = sentences.iter().map(Vec::len).max().unwrap_or(0);
    let raw = RawCorpus {
        conversations: vec![sentences.clone()],
        skipped: 0,
    };
    let vocab = Vocabulary::build(&raw, 1000, 1);
    let ids: Vec<Vec<usize>> = sentences.iter().map(|s| vocab.encode(s)).collect();
    let (train, valid) = ids.split_at(450);
    let cfg = VaeConfig {
        embed_dim: 64,
        hidden: 128,
        latent: 128,
        word_dropout: 0.25,
        kl_target: 0.15,
        anneal_horizon: 1000,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        batch_size: 32,
        epochs: 300,
        max_len: 10,
        target_bleu: Some(0.8),
        ..VaeConfig::default()
    };
    let (_, log) = train_vae(train, valid, &cfg, vocab.len(), &mut rng, &mut |_, _, _| {})
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let best = &log.epochs[log.best_epoch - 1];
    check(
        best.valid_bleu >= 0.8
            && best.valid_kl > 0.5
            && log.epochs.len() <= 300
            && elapsed < Duration::from_secs(600)
            && longest <= 8,
        format!(
            "vocab {}, longest sentence {longest}, epoch {}: valid BLEU {:.3} (>= 0.8), valid KL {:.3} nats (> 0.5), {:.0} s",
            vocab.len(),
            best.epoch,
            best.valid_bleu,
            best.valid_kl,
            elapsed.as_secs_f64()
        ),
    )
}

// 4 and 5. Linear-map recovery and the MSE ablation.

const SEEDS: u64 = 5;

fn linear_task(seed: u64) -> (Vec<LatentPair>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = LinearMapTask::generate(8, 2000, &mut rng);
    let pairs = task
        .queries
        .iter()
        .zip(&task.responses)
        .map(|(q, r)| LatentPair {
            query: LatentCode(q.clone()),
            context: Vec::new(),
            response: LatentCode(r.clone()),
        })
        .collect();
    (pairs, 0.05 * task.response_energy())
}

/// The synthetic runs use the ReLU generator without batch norm. With
/// batch norm the generator's outputs carry batch-dependent noise that a
/// deterministic target never has, so the discriminator keeps separating
/// them; that preset's accuracy is reported alongside for reference.
fn linear_run(seed: u64, gamma: f64, preset: GanPreset) -> (GanTrainLog, f64) {
    let (pairs, threshold) = linear_task(seed);
    let (train, held) = pairs.split_at(1600);
    let cfg = GanConfig {
        latent: 8,
        epochs: 50,
        gamma: Some(gamma),
        preset,
        ..GanConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (_, log) =
        train_gan(train, held, &cfg, &mut rng, &mut |_, _| {}).expect("training succeeds");
    (log, threshold)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn final_accuracy(runs: &[(GanTrainLog, f64)]) -> Vec<f64> {
    runs.iter()
        .map(|(log, _)| log.epochs.last().unwrap().valid_d_accuracy)
        .collect()
}

fn linear_recovery(runs: &[(GanTrainLog, f64)], batch_norm_runs: &[(GanTrainLog, f64)]) -> Outcome {
    let ratios: Vec<f64> = runs
        .iter()
        .map(|(log, t)| log.epochs.last().unwrap().valid_mse / (t / 0.05))
        .collect();
    let accs = final_accuracy(runs);
    let (r, a) = (median(ratios.clone()), median(accs.clone()));
    let bn_accs = final_accuracy(batch_norm_runs);
    check(
        r < 0.05 && (a - 0.5).abs() <= 0.1,
        format!(
            "median over {SEEDS} seeds after 50 epochs: MSE / E|z_r|^2 = {r:.4} (< 0.05), D accuracy {a:.3} (0.5 +- 0.1); \
             per seed MSE ratio {ratios:.4?}, D accuracy {accs:.3?}; with generator batch norm, median D accuracy {:.3} \
             (per seed {bn_accs:.3?})",
            median(bn_accs.clone())
        ),
    )
}

fn mse_ablation(with: &[(GanTrainLog, f64)], without: &[(GanTrainLog, f64)]) -> Outcome {
    let first = |(log, t): &(GanTrainLog, f64)| log.first_epoch_below(*t);
    let pairs: Vec<(Option<usize>, Option<usize>)> = with
        .iter()
        .zip(without)
        .map(|(a, b)| (first(a), first(b)))
        .collect();
    // Never reaching the threshold counts as slower than any epoch.
    let faster = pairs
        .iter()
        .filter(|(a, b)| {
            matches!((a, b), (Some(x), Some(y)) if x < y) || matches!((a, b), (Some(_), None))
        })
        .count();
    check(
        faster >= 4,
        format!("gamma=1 strictly faster in {faster}/{SEEDS} seeds; first epoch below threshold (gamma=1, gamma=0): {pairs:?}"),
    )
}

// 6. Conditionality.

/// Queries are standard normal; the class of a query is the sign of its
/// first coordinate, and its valid response is `+q` or `-q` accordingly. A
/// mismatched pair takes the valid response of a query from the other
/// class, so matched and mismatched responses have the same marginal and
/// only the pairing tells them apart.
struct ClassPair {
    query: Vec<f64>,
    matched: Vec<f64>,
    mismatched: Vec<f64>,
}

fn class_pairs(n: usize, rng: &mut ChaCha8Rng) -> Vec<ClassPair> {
    let queries: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..8).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let respond = |q: &[f64]| -> Vec<f64> {
        let sign = if q[0] >= 0.0 { 1.0 } else { -1.0 };
        q.iter().map(|v| sign * v).collect()
    };
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| queries[i][0] >= 0.0);
    queries
        .iter()
        .map(|q| {
            let other = if q[0] >= 0.0 { &neg } else { &pos };
            let j = *other.choose(rng).expect("both classes present");
            ClassPair {
                query: q.clone(),
                matched: respond(q),
                mismatched: respond(&queries[j]),
            }
        })
        .collect()
}

/// Trains the discriminator with its usual loss, matched pairs as real and
/// mismatched pairs as fake, and returns held-out pair accuracy. With
/// `blind`, queries are zeroed so only the response marginal is visible.
fn pair_discriminator(
    train: &[ClassPair],
    held: &[ClassPair],
    blind: bool,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let cfg = GanConfig {
        latent: 8,
        ..GanConfig::default()
    };
    let mut gan = LatentGan::new(&cfg, rng).unwrap();
    let mut adam = AdamState::new(cfg.discriminator_adam);
    let query = |p: &ClassPair| if blind { vec![0.0; 8] } else { p.query.clone() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..30 {
        order.shuffle(rng);
        for chunk in order.chunks(64) {
            let rows = |f: &dyn Fn(&ClassPair) -> Vec<f64>| {
                Tensor::from_rows(&chunk.iter().map(|&i| f(&train[i])).collect::<Vec<_>>()).unwrap()
            };
            let mut tape = Tape::new();
            let b = gan.store().bind(&mut tape, true).unwrap();
            let cond = tape.constant(rows(&query)).unwrap();
            let real = tape.constant(rows(&|p| p.matched.clone())).unwrap();
            let fake = tape.constant(rows(&|p| p.mismatched.clone())).unwrap();
            let loss = gan
                .discriminator_loss_on_tape(&mut tape, &b, cond, real, fake)
                .unwrap();
            let grads = tape.backward(loss).unwrap();
            let grads = gan
                .store()
                .collect_grads(&b, &grads)
                .into_iter()
                .filter(|(k, _)| k.starts_with("disc."))
                .collect();
            adam_step(gan.store_mut().params_mut(), &grads, &mut adam).unwrap();
        }
    }
    let conds: Vec<Vec<f64>> = held.iter().map(query).collect();
    let codes = |f: fn(&ClassPair) -> &Vec<f64>| {
        held.iter()
            .map(|p| LatentCode(f(p).clone()))
            .collect::<Vec<_>>()
    };
    let p_real = gan
        .discriminate_batch(&codes(|p| &p.matched), &conds)
        .unwrap();
    let p_fake = gan
        .discriminate_batch(&codes(|p| &p.mismatched), &conds)
        .unwrap();
    let correct =
        p_real.iter().filter(|&&p| p > 0.5).count() + p_fake.iter().filter(|&&p| p < 0.5).count();
    correct as f64 / (2 * held.len()) as f64
}

fn conditionality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs = class_pairs(2000, &mut rng);
    let (train, held) = pairs.split_at(1600);
    let acc = pair_discriminator(train, held, false, &mut rng);
    let blind = pair_discriminator(train, held, true, &mut rng);
    check(
        acc > 0.9,
        format!(
            "held-out matched/mismatched accuracy {acc:.3} (> 0.9); query-blind control {blind:.3}"
        ),
    )
}

// 7. Metric oracles.

fn grams(s: &[u32], n: usize) -> Vec<&[u32]> {
    if s.len() < n {
        Vec::new()
    } else {
        s.windows(n).collect()
    }
}

fn counts<'a>(g: &[&'a [u32]]) -> HashMap<&'a [u32], usize> {
    let mut m = HashMap::new();
    for x in g {
        *m.entry(*x).or_insert(0) += 1;
    }
    m
}

/// Distinct over total n-grams; a nonempty response set with no n-grams
/// scores 1 and an empty one 0.
fn distinct_oracle(rs: &[Vec<u32>], n: usize) -> f64 {
    let all: Vec<&[u32]> = rs.iter().flat_map(|r| grams(r, n)).collect();
    if all.is_empty() {
        return if rs.iter().any(|r| !r.is_empty()) {
            1.0
        } else {
            0.0
        };
    }
    counts(&all).len() as f64 / all.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let sentence = |rng: &mut ChaCha8Rng, max: usize| -> Vec<u32> {
        let len = rng.gen_range(0..=max);
        (0..len).map(|_| rng.gen_range(0..6)).collect()
    };
    let mut bad = Vec::new();
    for case in 0..100 {
        let (h, r) = (sentence(&mut rng, 14), sentence(&mut rng, 14));
        let stats = bleu_stats(&h, &r, 4);
        for n in 1..=4 {
            let (hc, rc) = (counts(&grams(&h, n)), counts(&grams(&r, n)));
            let clipped: usize = hc
                .iter()
                .map(|(g, c)| (*c).min(*rc.get(g).unwrap_or(&0)))
                .sum();
            if stats.matches[n - 1] != clipped || stats.totals[n - 1] != grams(&h, n).len() {
                bad.push(format!("bleu case {case} n={n}"));
            }
        }
    }
    for case in 0..100 {
        let k = rng.gen_range(1..=8);
        let rs: Vec<Vec<u32>> = (0..k).map(|_| sentence(&mut rng, 10)).collect();
        for n in 1..=2 {
            if (intra_distinct(&rs[0], n) - distinct_oracle(&rs[..1], n)).abs() > 1e-9
                || (inter_distinct(&rs, n) - distinct_oracle(&rs, n)).abs() > 1e-9
            {
                bad.push(format!("distinct case {case} n={n}"));
            }
        }
        let tokens: usize = rs.iter().map(Vec::len).sum();
        let types = counts(&rs.iter().flat_map(|r| grams(r, 1)).collect::<Vec<_>>()).len();
        let expected = (tokens > 0).then(|| types as f64 / tokens as f64);
        let ok = match (ttr(&rs), expected) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-9,
            (a, b) => a == b,
        };
        if !ok {
            bad.push(format!("ttr case {case}"));
        }
    }

    // Hand-worked interpolated Kneser-Ney, D = 0.75, training "a b", "a",
    // "b a", scoring "a b" and the unseen "c". Unigram continuation
    // probability of a, b and </s> is 29/96 and of <unk> 9/96.
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let lm = NgramLm::train(&[words("a b"), words("a"), words("b a")], KN_DISCOUNT)
        .map_err(|e| e.to_string())?;
    let d = 0.75;
    let p1 = 29.0 / 96.0;
    let probs: [f64; 5] = [
        (2.0 - d) / 3.0 + (d * 2.0 / 3.0) * ((1.0 - d) / 2.0 + d * p1),
        (1.0 - d) / 2.0 + d * ((1.0 - d) / 3.0 + (d * 2.0 / 3.0) * p1),
        (1.0 - d) + d * ((1.0 - d) / 2.0 + d * p1),
        (d * 2.0 / 3.0) * (d * 9.0 / 96.0),
        p1,
    ];
    let oracle = (-probs.iter().map(|p| p.ln()).sum::<f64>() / 5.0).exp();
    let ppl = perplexity(&lm, &[words("a b"), words("c")]).map_err(|e| e.to_string())?;
    if (ppl - oracle).abs() >= 1e-9 {
        bad.push(format!("KN perplexity {ppl} vs {oracle}"));
    }

    let names: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
    let corpus: Vec<Vec<String>> = (0..50)
        .map(|_| {
            (0..rng.gen_range(1..=7))
                .map(|_| names[rng.gen_range(0..10)].clone())
                .collect()
        })
        .collect();
    let lm10 = NgramLm::train(&corpus, KN_DISCOUNT).map_err(|e| e.to_string())?;
    let vocab = lm10.vocabulary();
    let mut contexts = lm10.context_tokens();
    contexts.push("unseen");
    let mut worst: f64 = 0.0;
    for u in &contexts {
        for v in &contexts {
            worst = worst.max((vocab.iter().map(|w| lm10.prob(u, v, w)).sum::<f64>() - 1.0).abs());
        }
    }
    if worst >= 1e-9 {
        bad.push(format!("LM sums off by {worst}"));
    }
    check(
        bad.is_empty(),
        format!(
            "100 BLEU-count, 100 distinct/TTR cases; KN PPL {ppl:.12} vs hand {oracle:.12}; \
             max |sum p - 1| = {worst:.1e} over {} contexts; mismatches {bad:?}",
            contexts.len() * contexts.len()
        ),
    )
}

// 8. Protocol constants.

fn protocol_constants() -> Outcome {
    let (avg, max, hm) = bleu_aggregate(&[0.2, 0.4]);
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let q = QueryResponses {
        reference: words("the red cat is under the old tree"),
        hypotheses: vec![
            words("the red cat is under the tree"),
            words("a red cat sat under the old tree"),
            words("hello there"),
        ],
    };
    let lm = NgramLm::train(std::slice::from_ref(&q.reference), KN_DISCOUNT)
        .map_err(|e| e.to_string())?;
    let report = evaluate_responses(std::slice::from_ref(&q), &lm).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = q
        .hypotheses
        .iter()
        .map(|h| bleu_smoothed(h, &q.reference))
        .collect();
    let s_avg = scores.iter().sum::<f64>() / 3.0;
    let s_max = scores.iter().copied().fold(f64::MIN, f64::max);
    let s_hm = 2.0 * s_avg * s_max / (s_avg + s_max);
    check(
        DEFAULT_SAMPLES == 10
            && GenerateConfig::default().n_samples == 10
            && (avg - 0.3).abs() < 1e-12
            && (max - 0.4).abs() < 1e-12
            && (hm - 0.342857142857).abs() < 1e-9
            && (report.bleu_avg - s_avg).abs() < 1e-12
            && (report.bleu_max - s_max).abs() < 1e-12
            && (report.bleu_hm - s_hm).abs() < 1e-12,
        format!(
            "default samples {}, hm(0.2, 0.4) = {hm:.12}, report avg/max/hm {:.6}/{:.6}/{:.6}",
            GenerateConfig::default().n_samples,
            report.bleu_avg,
            report.bleu_max,
            report.bleu_hm
        ),
    )
}

// 9. End to end.

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = toy_config_path();
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for out in &runs {
        pipeline(&config, out);
    }
    let same = |name: &str| {
        std::fs::read(runs[0].join(name)).ok() == std::fs::read(runs[1].join(name)).ok()
    };
    let identical: Vec<&str> = [
        "vocab.txt",
        "vae.ckpt",
        "gan.ckpt",
        "responses.tsv",
        "metrics.txt",
    ]
    .into_iter()
    .filter(|n| same(n))
    .collect();

    let path = runs[0].join("responses.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let queries = parse_responses(&text, &path).map_err(|e| e.to_string())?;
    let ten_each = queries.iter().all(|q| q.hypotheses.len() == 10);
    let vae = VaeCheckpoint::load(runs[0].join("vae.ckpt")).map_err(|e| e.to_string())?;
    let gan = GanCheckpoint::load(runs[0].join("gan.ckpt")).map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let single = LatentGan::new(&GanConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    let multi = LatentGan::new(
        &GanConfig {
            multi_turn: true,
            ..GanConfig::default()
        },
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let dims = [
        single.generator_input_dim(),
        multi.generator_input_dim(),
        single.generator_output_dim(),
        multi.generator_output_dim(),
    ];
    check(
        identical.len() == 5
            && ten_each
            && vae.model.config().latent == 128
            && gan.gan.generator_input_dim() == 128
            && gan.gan.generator_output_dim() == 128
            && dims == [128, 1152, 128, 128],
        format!(
            "identical across reruns: {identical:?}; {} queries x 10 samples: {ten_each}; \
             generator dims in/in(multi-turn)/out/out(multi-turn) {dims:?}",
            queries.len()
        ),
    )
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Written straight to stdout rather than through `println!`, so the
    // lines show up even when the harness captures test output.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag} criterion {n} ({name}, {secs:.0} s): {detail}");
    let _ = out.flush();
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let mut passed = Vec::new();
    passed.push(report(1, "gradient battery", gradient_battery));
    passed.push(report(2, "closed forms", closed_forms));
    passed.push(report(3, "VAE toy-grammar convergence", vae_convergence));
    let with: Vec<_> = (0..SEEDS)
        .map(|s| linear_run(s, 1.0, GanPreset::Relu))
        .collect();
    passed.push(report(4, "GAN linear-map recovery", || {
        let batch_norm: Vec<_> = (0..SEEDS)
            .map(|s| linear_run(s, 1.0, GanPreset::LeakyBatchNorm))
            .collect();
        linear_recovery(&with, &batch_norm)
    }));
    passed.push(report(5, "MSE ablation", || {
        let without: Vec<_> = (0..SEEDS)
            .map(|s| linear_run(s, 0.0, GanPreset::Relu))
            .collect();
        mse_ablation(&with, &without)
    }));
    passed.push(report(6, "conditionality", conditionality));
    passed.push(report(7, "metric oracles", metric_oracles));
    passed.push(report(8, "protocol constants", protocol_constants));
    passed.push(report(9, "end-to-end reproducibility", end_to_end));
    let failed: Vec<usize> = passed
        .iter()
        .enumerate()
        .filter(|(_, p)| !**p)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
