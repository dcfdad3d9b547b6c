//! Built-in self-checks: gradients of every op and model loss, closed-form
//! values and metric oracles. Meant to finish in well under a minute.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{
    check_inputs, check_params, GradCheckReport, Stencil, DEFAULT_STEP, DEFAULT_TOLERANCE,
    FIVE_POINT_STEP,
};
use crate::autodiff::layers::{
    Activation, BatchNorm, CellKind, Linear, Mode, RecState, RecurrentCell,
};
use crate::autodiff::params::ParamStore;
use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::Result;
use crate::gan::{GanConfig, GanPreset, LatentGan};
use crate::metrics::{bleu_stats, inter_distinct, perplexity, LanguageModel, NgramLm, KN_DISCOUNT};
use crate::vae::{
    kl_to_standard_normal, LatentCode, PosteriorParams, VaeBatch, VaeConfig, VaeModel,
};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn from_grad(name: impl Into<String>, report: Result<GradCheckReport>) -> Self {
        let name = name.into();
        match report {
            Ok(r) => CheckResult {
                passed: r.passes(DEFAULT_TOLERANCE),
                detail: format!(
                    "max rel err {:.2e} over {} entries (worst {:?})",
                    r.max_rel_error, r.checked, r.worst
                ),
                name,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        }
    }

    fn value(name: &str, got: f64, expected: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            passed: (got - expected).abs() <= tolerance,
            detail: format!("got {got:.15}, expected {expected:.15}"),
        }
    }

    fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

type Op = fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

/// Element-wise and structural ops, each on random 3x4 inputs projected to
/// a scalar.
fn primitive_checks(out: &mut Vec<CheckResult>) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let proj = random(&[3, 4], &mut rng);
    let reduce = |tape: &mut Tape, y: NodeId| -> Result<NodeId> {
        let w = tape.constant(proj.clone())?;
        let p = tape.mul(y, w)?;
        tape.sum(p)
    };
    let same_shape: [(&str, usize, Op); 12] = [
        ("tanh", 1, |t, x| t.tanh(x[0])),
        ("sigmoid", 1, |t, x| t.sigmoid(x[0])),
        ("relu", 1, |t, x| t.relu(x[0])),
        ("leaky_relu", 1, |t, x| t.leaky_relu(x[0], 0.01)),
        ("exp", 1, |t, x| t.exp(x[0])),
        ("log_sigmoid", 1, |t, x| t.log_sigmoid(x[0])),
        ("scale", 1, |t, x| t.scale(x[0], -2.5)),
        ("add_scalar", 1, |t, x| t.add_scalar(x[0], 0.7)),
        ("add", 2, |t, x| t.add(x[0], x[1])),
        ("sub", 2, |t, x| t.sub(x[0], x[1])),
        ("mul", 2, |t, x| t.mul(x[0], x[1])),
        ("mask_rows", 2, |t, x| {
            t.mask_rows(&[true, false, true], x[0], x[1])
        }),
    ];
    for (name, arity, op) in same_shape {
        let inputs: Vec<(&str, Tensor)> = (0..arity)
            .map(|_| ("x", random(&[3, 4], &mut rng)))
            .collect();
        let r = check_inputs(&inputs, DEFAULT_STEP, |t, ids| {
            let y = op(t, ids)?;
            reduce(t, y)
        });
        out.push(CheckResult::from_grad(format!("grad {name}"), r));
    }
    let positive = random(&[3, 4], &mut rng).map(|v| v.abs() + 0.5);
    let r = check_inputs(&[("x", positive)], DEFAULT_STEP, |t, ids| {
        let y = t.log(ids[0])?;
        reduce(t, y)
    });
    out.push(CheckResult::from_grad("grad log", r));

    let shaped: [(&str, Vec<Tensor>, Op); 6] = [
        (
            "matmul",
            vec![random(&[3, 5], &mut rng), random(&[5, 4], &mut rng)],
            |t, x| t.matmul(x[0], x[1]),
        ),
        (
            "add (row broadcast)",
            vec![random(&[3, 4], &mut rng), random(&[1, 4], &mut rng)],
            |t, x| t.add(x[0], x[1]),
        ),
        (
            "mul (row broadcast)",
            vec![random(&[3, 4], &mut rng), random(&[1, 4], &mut rng)],
            |t, x| t.mul(x[0], x[1]),
        ),
        (
            "concat",
            vec![random(&[3, 1], &mut rng), random(&[3, 3], &mut rng)],
            |t, x| t.concat_cols(&[x[0], x[1]]),
        ),
        ("slice", vec![random(&[3, 7], &mut rng)], |t, x| {
            t.slice_cols(x[0], 2, 6)
        }),
        ("gather_rows", vec![random(&[5, 4], &mut rng)], |t, x| {
            t.gather_rows(x[0], &[4, 0, 4])
        }),
    ];
    for (name, values, op) in shaped {
        let inputs: Vec<(&str, Tensor)> = values.into_iter().map(|v| ("x", v)).collect();
        let r = check_inputs(&inputs, DEFAULT_STEP, |t, ids| {
            let y = op(t, ids)?;
            reduce(t, y)
        });
        out.push(CheckResult::from_grad(format!("grad {name}"), r));
    }

    let reductions: [(&str, usize, Op); 4] = [
        ("sum", 1, |t, x| t.sum(x[0])),
        ("mean", 1, |t, x| t.mean(x[0])),
        ("squared_error", 2, |t, x| t.squared_error(x[0], x[1])),
        ("softmax_xent", 1, |t, x| {
            t.softmax_xent(x[0], &[3, 0, 1], &[1.0, 0.5, 0.0])
        }),
    ];
    for (name, arity, op) in reductions {
        let inputs: Vec<(&str, Tensor)> = (0..arity)
            .map(|_| ("x", random(&[3, 4], &mut rng)))
            .collect();
        out.push(CheckResult::from_grad(
            format!("grad {name}"),
            check_inputs(&inputs, DEFAULT_STEP, op),
        ));
    }

    let bn_inputs = [
        ("x", random(&[5, 3], &mut rng)),
        ("gamma", random(&[1, 3], &mut rng)),
        ("beta", random(&[1, 3], &mut rng)),
    ];
    let bn_proj = random(&[5, 3], &mut rng);
    let r = check_inputs(&bn_inputs, DEFAULT_STEP, |t, ids| {
        let (y, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
        let w = t.constant(bn_proj.clone())?;
        let p = t.mul(y, w)?;
        t.sum(p)
    });
    out.push(CheckResult::from_grad("grad batch_norm", r));
}

fn composite_checks(out: &mut Vec<CheckResult>) {
    for kind in [CellKind::Lstm, CellKind::Gru] {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let cell = RecurrentCell::new(&mut store, kind, "cell", 3, 8, &mut rng);
        store.insert("x", random(&[2, 3], &mut rng));
        store.insert("h0", random(&[2, 8], &mut rng));
        store.insert("c0", random(&[2, 8], &mut rng));
        let proj = random(&[2, 8], &mut rng);
        let r = check_params(&store, DEFAULT_STEP, |t, b| {
            let state = RecState {
                h: b.get("h0")?,
                c: (kind == CellKind::Lstm).then(|| b.get("c0")).transpose()?,
            };
            let s = cell.step(t, b, b.get("x")?, state)?;
            let w = t.constant(proj.clone())?;
            let mut terms = vec![t.mul(s.h, w)?];
            if let Some(c) = s.c {
                terms.push(t.mul(c, w)?);
            }
            let all = t.concat_cols(&terms)?;
            t.sum(all)
        });
        out.push(CheckResult::from_grad(format!("grad {kind:?} step"), r));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 4, 6, &mut rng);
    let bn = BatchNorm::new(&mut store, "bn", 6);
    let l2 = Linear::new(&mut store, "l2", 6, 2, &mut rng);
    store.insert("x", random(&[5, 4], &mut rng));
    let target = random(&[5, 2], &mut rng);
    let frozen = store.clone();
    let r = check_params(&store, DEFAULT_STEP, |t, b| {
        let h = l1.forward(t, b, b.get("x")?)?;
        let (h, _) = bn.forward(t, b, &frozen, h, Mode::Train)?;
        let h = Activation::LeakyRelu.apply(t, h)?;
        let y = l2.forward(t, b, h)?;
        let tgt = t.constant(target.clone())?;
        t.squared_error(y, tgt)
    });
    out.push(CheckResult::from_grad(
        "grad linear+batchnorm+leaky_relu",
        r,
    ));

    let sentences = vec![
        vec![4, 5, 6],
        vec![7, 8, 9, 10, 11],
        vec![5],
        vec![11, 4, 4, 9],
    ];
    for cell in [CellKind::Lstm, CellKind::Gru] {
        let cfg = VaeConfig {
            embed_dim: 6,
            hidden: 8,
            latent: 4,
            cell,
            ..VaeConfig::default()
        };
        let r = VaeModel::new(&cfg, 12, &mut ChaCha8Rng::seed_from_u64(14)).and_then(|model| {
            let batch = VaeBatch::sample(&sentences, 0.5, 4, &mut ChaCha8Rng::seed_from_u64(15))?;
            check_params(
                model.store(),
                Stencil::FivePoint(FIVE_POINT_STEP),
                |tape, b| Ok(model.loss_on_tape(tape, b, &batch, 0.3)?.total),
            )
        });
        out.push(CheckResult::from_grad(
            format!("grad VAE loss ({cell:?})"),
            r,
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let code =
        |rng: &mut ChaCha8Rng| LatentCode((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let queries: Vec<LatentCode> = (0..4).map(|_| code(&mut rng)).collect();
    let contexts: Vec<Vec<LatentCode>> = (0..4)
        .map(|i| (0..i % 3).map(|_| code(&mut rng)).collect())
        .collect();
    let responses: Vec<Vec<f64>> = (0..4).map(|_| code(&mut rng).0).collect();
    for (label, preset, multi_turn) in [
        ("", GanPreset::LeakyBatchNorm, false),
        (" (no batch norm)", GanPreset::Relu, false),
        (" (with context)", GanPreset::LeakyBatchNorm, true),
    ] {
        let cfg = GanConfig {
            preset,
            latent: 4,
            hidden: 8,
            multi_turn,
            context_hidden: 3,
            ..GanConfig::default()
        };
        let gan = match LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(17)) {
            Ok(g) => g,
            Err(e) => {
                out.push(CheckResult::flag("GAN construction", false, e.to_string()));
                continue;
            }
        };
        let q: Vec<&LatentCode> = queries.iter().collect();
        let c: Vec<&[LatentCode]> = contexts
            .iter()
            .map(|c| if multi_turn { c.as_slice() } else { &[][..] })
            .collect();
        let d = check_params(gan.store(), DEFAULT_STEP, |t, b| {
            let cond = gan.condition_on_tape(t, b, &q, &c)?;
            let (fake, _) = gan.generator_on_tape(t, b, cond, Mode::Train)?;
            let real = t.constant(Tensor::from_rows(&responses)?)?;
            gan.discriminator_loss_on_tape(t, b, cond, real, fake)
        });
        out.push(CheckResult::from_grad(
            format!("grad discriminator loss{label}"),
            d,
        ));
        let g = check_params(gan.store(), DEFAULT_STEP, |t, b| {
            let cond = gan.condition_on_tape(t, b, &q, &c)?;
            let (fake, _) = gan.generator_on_tape(t, b, cond, Mode::Train)?;
            let target = t.constant(Tensor::from_rows(&responses)?)?;
            Ok(gan
                .generator_loss_on_tape(t, b, cond, fake, target, 1.0)?
                .total)
        });
        out.push(CheckResult::from_grad(
            format!("grad generator loss{label}"),
            g,
        ));
    }
}

fn closed_form_checks(out: &mut Vec<CheckResult>) {
    let zero = PosteriorParams {
        mu: vec![0.0; 128],
        log_sigma: vec![0.0; 128],
    };
    let kl0 = kl_to_standard_normal(&zero);
    out.push(CheckResult::flag(
        "KL(N(0,I) || N(0,I)) = 0",
        kl0 == 0.0,
        format!("got {kl0}"),
    ));
    let one = PosteriorParams {
        mu: vec![1.0],
        log_sigma: vec![0.0],
    };
    out.push(CheckResult::value(
        "KL d=1 mu=1 sigma=1 = 0.5",
        kl_to_standard_normal(&one),
        0.5,
        1e-12,
    ));

    let cfg = GanConfig {
        latent: 4,
        hidden: 8,
        ..GanConfig::default()
    };
    let value = LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(18)).and_then(|mut gan| {
        let names: Vec<String> = gan
            .store()
            .params()
            .keys()
            .filter(|k| k.starts_with("disc.l2") || k.starts_with("disc.out"))
            .cloned()
            .collect();
        for n in names {
            gan.store_mut()
                .get_mut(&n)?
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let conds: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let real: Vec<LatentCode> = (0..6)
            .map(|_| LatentCode((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()))
            .collect();
        gan.value(&conds, &real)
    });
    match value {
        Ok(v) => out.push(CheckResult::value(
            "V(D,G) with D = 1/2 is -2 ln 2",
            v,
            -2.0 * 2f64.ln(),
            1e-12,
        )),
        Err(e) => out.push(CheckResult::flag(
            "V(D,G) with D = 1/2 is -2 ln 2",
            false,
            e.to_string(),
        )),
    }
}

fn windows(s: &[u32], n: usize) -> Vec<&[u32]> {
    if s.len() < n {
        Vec::new()
    } else {
        (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
    }
}

fn metric_checks(out: &mut Vec<CheckResult>) {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        (0..rng.gen_range(0..12))
            .map(|_| rng.gen_range(0..5))
            .collect()
    };
    let mut bleu_ok = true;
    let mut distinct_ok = true;
    for _ in 0..100 {
        let (h, r) = (sentence(&mut rng), sentence(&mut rng));
        let stats = bleu_stats(&h, &r, 4);
        for n in 1..=4 {
            let (hw, rw) = (windows(&h, n), windows(&r, n));
            let mut seen: Vec<&[u32]> = Vec::new();
            let mut matches = 0;
            for g in &hw {
                if !seen.contains(g) {
                    seen.push(g);
                    let ch = hw.iter().filter(|x| x == &g).count();
                    let cr = rw.iter().filter(|x| x == &g).count();
                    matches += ch.min(cr);
                }
            }
            bleu_ok &= stats.matches[n - 1] == matches && stats.totals[n - 1] == hw.len();
        }
        let group = [h.clone(), r.clone()];
        for n in 1..=2 {
            let all: Vec<&[u32]> = group.iter().flat_map(|s| windows(s, n)).collect();
            let mut uniq: Vec<&[u32]> = Vec::new();
            for g in &all {
                if !uniq.contains(g) {
                    uniq.push(g);
                }
            }
            let expected = if all.is_empty() {
                if group.iter().any(|s| !s.is_empty()) {
                    1.0
                } else {
                    0.0
                }
            } else {
                uniq.len() as f64 / all.len() as f64
            };
            distinct_ok &= (inter_distinct(&group, n) - expected).abs() < 1e-9;
        }
    }
    out.push(CheckResult::flag(
        "BLEU clipped counts vs brute force (100 cases)",
        bleu_ok,
        "",
    ));
    out.push(CheckResult::flag(
        "distinct-n vs brute force (100 cases)",
        distinct_ok,
        "",
    ));

    // Worked by hand: corpus `a b`, `a`, `b a`; continuation unigram
    // probabilities are 29/96 for a, b, </s> and 9/96 for <unk>.
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let kn =
        NgramLm::train(&[words("a b"), words("a"), words("b a")], KN_DISCOUNT).and_then(|lm| {
            let d = KN_DISCOUNT;
            let p1 = 29.0 / 96.0;
            let probs = [
                (2.0 - d) / 3.0 + (d * 2.0 / 3.0) * ((1.0 - d) / 2.0 + d * p1),
                (1.0 - d) / 2.0 + d * ((1.0 - d) / 3.0 + (d * 2.0 / 3.0) * p1),
                (1.0 - d) + d * ((1.0 - d) / 2.0 + d * p1),
                (d * 2.0 / 3.0) * (d * 9.0 / 96.0),
                p1,
            ];
            let expected = (-probs.iter().map(|p| p.ln()).sum::<f64>() / 5.0).exp();
            Ok((perplexity(&lm, &[words("a b"), words("c")])?, expected))
        });
    match kn {
        Ok((got, expected)) => out.push(CheckResult::value(
            "Kneser-Ney perplexity vs hand computation",
            got,
            expected,
            1e-9,
        )),
        Err(e) => out.push(CheckResult::flag(
            "Kneser-Ney perplexity vs hand computation",
            false,
            e.to_string(),
        )),
    }

    let names: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
    let corpus: Vec<Vec<String>> = (0..40)
        .map(|_| {
            (0..rng.gen_range(1..=6))
                .map(|_| names[rng.gen_range(0..10)].clone())
                .collect()
        })
        .collect();
    let sums = NgramLm::train(&corpus, KN_DISCOUNT).map(|lm| {
        let vocab = lm.vocabulary();
        let ctx = lm.context_tokens();
        let mut worst: f64 = 0.0;
        for u in &ctx {
            for v in &ctx {
                let total: f64 = vocab.iter().map(|w| lm.prob(u, v, w)).sum();
                worst = worst.max((total - 1.0).abs());
            }
        }
        worst
    });
    match sums {
        Ok(w) => out.push(CheckResult::flag(
            "language model conditionals sum to 1",
            w < 1e-9,
            format!("worst deviation {w:.2e}"),
        )),
        Err(e) => out.push(CheckResult::flag(
            "language model conditionals sum to 1",
            false,
            e.to_string(),
        )),
    }
}

/// Runs every check on the current thread.
pub fn run_battery() -> Vec<CheckResult> {
    let mut out = Vec::new();
    primitive_checks(&mut out);
    composite_checks(&mut out);
    closed_form_checks(&mut out);
    metric_checks(&mut out);
    out
}

/// Runs the battery and renders a pass/fail table; the flag is true when
/// every check passed.
pub fn run_and_report() -> (bool, String) {
    let start = Instant::now();
    let results = run_battery();
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut text = String::new();
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        text.push_str(&format!("{status}  {:width$}  {}\n", r.name, r.detail));
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    text.push_str(&format!(
        "{} checks, {} failed, {:.1}s\n",
        results.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    ));
    if !failed.is_empty() {
        text.push_str(&format!("failing: {}\n", failed.join(", ")));
    }
    (failed.is_empty(), text)
}
