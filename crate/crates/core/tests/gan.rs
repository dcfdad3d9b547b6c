use latent_dialog::autodiff::gradcheck::{check_params, DEFAULT_STEP, DEFAULT_TOLERANCE};
use latent_dialog::autodiff::layers::Mode;
use latent_dialog::autodiff::optim::AdamConfig;
use latent_dialog::autodiff::{Tape, Tensor};
use latent_dialog::gan::{
    train_gan, AdversarialLoss, DiscriminatorHead, GanConfig, GanPreset, GanTrainer, LatentGan,
    LatentPair,
};
use latent_dialog::synthetic::{affine, LinearMapTask};
use latent_dialog::vae::LatentCode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny(preset: GanPreset) -> GanConfig {
    GanConfig {
        preset,
        latent: 4,
        hidden: 5,
        batch_size: 4,
        ..GanConfig::default()
    }
}

fn random_pairs(n: usize, dim: usize, ctx: usize, rng: &mut impl Rng) -> Vec<LatentPair> {
    let code = |rng: &mut dyn rand::RngCore| {
        LatentCode((0..dim).map(|_| rng.sample(StandardNormal)).collect())
    };
    (0..n)
        .map(|i| LatentPair {
            query: code(rng),
            context: (0..(i % (ctx + 1))).map(|_| code(rng)).collect(),
            response: code(rng),
        })
        .collect()
}

fn zero_final_layer(gan: &mut LatentGan) {
    let names: Vec<String> = gan
        .store()
        .params()
        .keys()
        .filter(|k| k.starts_with("disc.l2") || k.starts_with("disc.out"))
        .cloned()
        .collect();
    for n in names {
        gan.store_mut()
            .get_mut(&n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

fn set(gan: &mut LatentGan, name: &str, values: &[f64]) {
    let t = gan.store_mut().get_mut(name).unwrap();
    assert_eq!(t.len(), values.len(), "{name}");
    t.data_mut().copy_from_slice(values);
}

#[test]
fn default_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let single = LatentGan::new(&GanConfig::default(), &mut rng).unwrap();
    assert_eq!(single.generator_input_dim(), 128);
    assert_eq!(single.generator_output_dim(), 128);
    assert_eq!(single.discriminator_input_dim(), 256);
    let multi = LatentGan::new(
        &GanConfig {
            multi_turn: true,
            ..GanConfig::default()
        },
        &mut rng,
    )
    .unwrap();
    assert_eq!(multi.generator_input_dim(), 1152);
    assert_eq!(multi.generator_output_dim(), 128);
    assert_eq!(multi.discriminator_input_dim(), 128 + 1152);
    assert_eq!(multi.context_vector(&[]).unwrap(), vec![0.0; 1024]);
}

#[test]
fn generator_is_deterministic_and_checks_width() {
    let gan = LatentGan::new(
        &tiny(GanPreset::LeakyBatchNorm),
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let x = [0.3, -0.1, 0.8, 1.2];
    assert_eq!(gan.generate(&x).unwrap(), gan.generate(&x).unwrap());
    assert_eq!(gan.generate(&x).unwrap().dim(), 4);
    assert!(gan.generate(&[0.0; 5]).is_err());
    assert!(gan.discriminate(&LatentCode(vec![0.0; 3]), &x).is_err());
}

#[test]
fn generator_matches_hand_evaluation() {
    let cfg = GanConfig {
        preset: GanPreset::Relu,
        latent: 2,
        hidden: 2,
        ..GanConfig::default()
    };
    let mut gan = LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    set(&mut gan, "gen.l1.w", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut gan, "gen.l1.b", &[0.5, -1.0]);
    set(&mut gan, "gen.l2.w", &[1.0, 0.0, 0.0, 1.0]);
    set(&mut gan, "gen.l2.b", &[0.0, 0.25]);
    // relu([0.2 + 0.5, 0.4 - 1.0]) + [0, 0.25] = [0.7, 0.25]
    let out = gan.generate(&[0.2, 0.4]).unwrap();
    assert!((out.0[0] - 0.7).abs() < 1e-15 && (out.0[1] - 0.25).abs() < 1e-15);
    set(&mut gan, "gen.l2.w", &[2.0, 1.0, -1.0, 3.0]);
    // h = [0.7, 0]; h W2 = [1.4, 0.7]
    let out = gan.generate(&[0.2, 0.4]).unwrap();
    assert!((out.0[0] - 1.4).abs() < 1e-15 && (out.0[1] - 0.95).abs() < 1e-15);
}

#[test]
fn discriminator_matches_hand_evaluation() {
    let cfg = GanConfig {
        preset: GanPreset::Relu,
        latent: 2,
        hidden: 2,
        ..GanConfig::default()
    };
    let mut gan = LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(gan.discriminator_input_dim(), 4);
    set(
        &mut gan,
        "disc.l1.w",
        &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, -1.0],
    );
    set(&mut gan, "disc.l1.b", &[0.0, 0.1]);
    set(&mut gan, "disc.l2.w", &[2.0, -1.0]);
    set(&mut gan, "disc.l2.b", &[0.3]);
    // x = [z_r ; z_q] = [1, 2, 0.5, -1]
    // h_pre = [1 + 0.5, 2 + 1 + 0.1] = [1.5, 3.1]; logit = 3.0 - 3.1 + 0.3 = 0.2
    let p = gan
        .discriminate(&LatentCode(vec![1.0, 2.0]), &[0.5, -1.0])
        .unwrap();
    assert!((p - 1.0 / (1.0 + (-0.2f64).exp())).abs() < 1e-15);
    let swapped = gan
        .discriminate(&LatentCode(vec![0.5, -1.0]), &[1.0, 2.0])
        .unwrap();
    assert!((p - swapped).abs() > 1e-6);
}

#[test]
fn neutral_discriminator_values() {
    for head in [DiscriminatorHead::Mlp, DiscriminatorHead::Logistic] {
        let cfg = GanConfig {
            discriminator_head: head,
            ..tiny(GanPreset::LeakyBatchNorm)
        };
        let mut gan = LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        zero_final_layer(&mut gan);
        let pairs = random_pairs(6, 4, 0, &mut ChaCha8Rng::seed_from_u64(5));
        let conds = gan.conditions(&pairs).unwrap();
        let reals: Vec<LatentCode> = pairs.iter().map(|p| p.response.clone()).collect();
        assert!(gan
            .discriminate_batch(&reals, &conds)
            .unwrap()
            .iter()
            .all(|&p| p == 0.5));
        let v = gan.value(&conds, &reals).unwrap();
        assert!((v + 2.0 * 2f64.ln()).abs() < 1e-12, "{v}");

        let mut tape = Tape::new();
        let b = gan.store().bind(&mut tape, false).unwrap();
        let cond = tape.constant(Tensor::from_rows(&conds).unwrap()).unwrap();
        let real = tape
            .constant(
                Tensor::from_rows(&reals.iter().map(|z| z.0.clone()).collect::<Vec<_>>()).unwrap(),
            )
            .unwrap();
        let (fake, _) = gan
            .generator_on_tape(&mut tape, &b, cond, Mode::Train)
            .unwrap();
        let d = gan
            .discriminator_loss_on_tape(&mut tape, &b, cond, real, fake)
            .unwrap();
        assert!((tape.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let g = gan
            .generator_loss_on_tape(&mut tape, &b, cond, fake, real, 0.0)
            .unwrap();
        assert!((tape.value(g.total).item() - 2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn confident_discriminator_has_near_zero_loss() {
    let cfg = GanConfig {
        discriminator_head: DiscriminatorHead::Logistic,
        latent: 2,
        ..GanConfig::default()
    };
    let mut gan = LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    set(&mut gan, "disc.out.w", &[50.0, 50.0, 0.0, 0.0]);
    set(&mut gan, "disc.out.b", &[0.0]);
    let mut tape = Tape::new();
    let b = gan.store().bind(&mut tape, false).unwrap();
    let cond = tape
        .constant(Tensor::from_rows(&[[0.3, 0.1], [-0.2, 0.4]]).unwrap())
        .unwrap();
    let real = tape.constant(Tensor::full(&[2, 2], 1.0)).unwrap();
    let fake = tape.constant(Tensor::full(&[2, 2], -1.0)).unwrap();
    let loss = gan
        .discriminator_loss_on_tape(&mut tape, &b, cond, real, fake)
        .unwrap();
    assert!(tape.value(loss).item() < 1e-40);
}

#[test]
fn generator_loss_components() {
    let mut gan = LatentGan::new(
        &GanConfig {
            latent: 2,
            ..tiny(GanPreset::Relu)
        },
        &mut ChaCha8Rng::seed_from_u64(7),
    )
    .unwrap();
    zero_final_layer(&mut gan);
    let mut tape = Tape::new();
    let b = gan.store().bind(&mut tape, false).unwrap();
    let cond = tape.constant(Tensor::row(&[0.0, 0.0])).unwrap();
    let target = tape.constant(Tensor::row(&[1.0, 2.0])).unwrap();
    let fake = tape.constant(Tensor::row(&[0.0, 0.0])).unwrap();
    let l = gan
        .generator_loss_on_tape(&mut tape, &b, cond, fake, target, 0.7)
        .unwrap();
    assert_eq!(l.mse, 5.0);
    assert!((l.adv - 2f64.ln()).abs() < 1e-15);
    assert!((tape.value(l.total).item() - (l.adv + 0.7 * l.mse)).abs() < 1e-15);
    let same = gan
        .generator_loss_on_tape(&mut tape, &b, cond, target, target, 1.0)
        .unwrap();
    assert_eq!(same.mse, 0.0);
}

#[test]
fn minimax_form_is_log_one_minus_d() {
    let cfg = GanConfig {
        adversarial_loss: AdversarialLoss::Minimax,
        discriminator_head: DiscriminatorHead::Logistic,
        latent: 2,
        ..GanConfig::default()
    };
    let mut gan = LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    set(&mut gan, "disc.out.w", &[1.0, 0.0, 0.0, 0.0]);
    set(&mut gan, "disc.out.b", &[0.0]);
    let mut tape = Tape::new();
    let b = gan.store().bind(&mut tape, false).unwrap();
    let cond = tape.constant(Tensor::row(&[0.0, 0.0])).unwrap();
    let fake = tape.constant(Tensor::row(&[0.8, 0.0])).unwrap();
    let l = gan
        .generator_loss_on_tape(&mut tape, &b, cond, fake, fake, 1.0)
        .unwrap();
    let d: f64 = 1.0 / (1.0 + (-0.8f64).exp());
    assert!((l.adv - (1.0 - d).ln()).abs() < 1e-15);
}

fn gan_losses_gradcheck(cfg: GanConfig) {
    let gan = LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let pairs = random_pairs(4, cfg.latent, 2, &mut ChaCha8Rng::seed_from_u64(10));
    let queries: Vec<&LatentCode> = pairs.iter().map(|p| &p.query).collect();
    let contexts: Vec<&[LatentCode]> = pairs.iter().map(|p| p.context.as_slice()).collect();
    let rows: Vec<Vec<f64>> = pairs.iter().map(|p| p.response.0.clone()).collect();

    let d_report = check_params(gan.store(), DEFAULT_STEP, |tape, b| {
        let cond = gan.condition_on_tape(tape, b, &queries, &contexts)?;
        let (fake, _) = gan.generator_on_tape(tape, b, cond, Mode::Train)?;
        let real = tape.constant(Tensor::from_rows(&rows)?)?;
        gan.discriminator_loss_on_tape(tape, b, cond, real, fake)
    })
    .unwrap();
    assert!(d_report.passes(DEFAULT_TOLERANCE), "{cfg:?}\n{d_report:?}");
    let g_report = check_params(gan.store(), DEFAULT_STEP, |tape, b| {
        let cond = gan.condition_on_tape(tape, b, &queries, &contexts)?;
        let (fake, _) = gan.generator_on_tape(tape, b, cond, Mode::Train)?;
        let target = tape.constant(Tensor::from_rows(&rows)?)?;
        Ok(gan
            .generator_loss_on_tape(tape, b, cond, fake, target, 0.8)?
            .total)
    })
    .unwrap();
    assert!(g_report.passes(DEFAULT_TOLERANCE), "{cfg:?}\n{g_report:?}");
}

#[test]
fn gan_losses_match_finite_differences() {
    for preset in [GanPreset::LeakyBatchNorm, GanPreset::Relu] {
        gan_losses_gradcheck(tiny(preset));
    }
    gan_losses_gradcheck(GanConfig {
        adversarial_loss: AdversarialLoss::Minimax,
        discriminator_head: DiscriminatorHead::Logistic,
        ..tiny(GanPreset::Relu)
    });
    gan_losses_gradcheck(GanConfig {
        multi_turn: true,
        context_hidden: 3,
        ..tiny(GanPreset::LeakyBatchNorm)
    });
}

fn snapshot(gan: &LatentGan, prefix: &str) -> Vec<(String, Vec<f64>)> {
    gan.store()
        .params()
        .iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.data().to_vec()))
        .collect()
}

#[test]
fn updates_are_isolated_between_players() {
    let cfg = GanConfig {
        multi_turn: true,
        context_hidden: 3,
        ..tiny(GanPreset::LeakyBatchNorm)
    };
    let pairs = random_pairs(6, 4, 2, &mut ChaCha8Rng::seed_from_u64(11));
    let batch: Vec<&LatentPair> = pairs.iter().collect();
    let mut trainer =
        GanTrainer::new(LatentGan::new(&cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap());
    let (g0, c0, d0) = (
        snapshot(trainer.gan(), "gen."),
        snapshot(trainer.gan(), "ctx."),
        snapshot(trainer.gan(), "disc."),
    );
    let buffers0 = trainer.gan().store().buffers().clone();
    trainer.discriminator_step(&batch).unwrap();
    assert_eq!(snapshot(trainer.gan(), "gen."), g0);
    assert_eq!(snapshot(trainer.gan(), "ctx."), c0);
    assert_eq!(trainer.gan().store().buffers(), &buffers0);
    let d1 = snapshot(trainer.gan(), "disc.");
    assert_ne!(d1, d0);
    trainer.generator_step(&batch).unwrap();
    assert_eq!(snapshot(trainer.gan(), "disc."), d1);
    assert_ne!(snapshot(trainer.gan(), "gen."), g0);
    assert_ne!(snapshot(trainer.gan(), "ctx."), c0);
    assert_ne!(trainer.gan().store().buffers(), &buffers0);
}

#[test]
fn mse_term_ignores_batch_order() {
    let gan = LatentGan::new(
        &tiny(GanPreset::Relu),
        &mut ChaCha8Rng::seed_from_u64(13),
    )
    .unwrap();
    let pairs = random_pairs(5, 4, 0, &mut ChaCha8Rng::seed_from_u64(14));
    let loss = |order: &[usize]| {
        let mut tape = Tape::new();
        let b = gan.store().bind(&mut tape, false).unwrap();
        let q: Vec<&LatentCode> = order.iter().map(|&i| &pairs[i].query).collect();
        let c: Vec<&[LatentCode]> = order.iter().map(|_| &[][..]).collect();
        let cond = gan.condition_on_tape(&mut tape, &b, &q, &c).unwrap();
        let (fake, _) = gan
            .generator_on_tape(&mut tape, &b, cond, Mode::Eval)
            .unwrap();
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| pairs[i].response.0.clone()).collect();
        let target = tape.constant(Tensor::from_rows(&rows).unwrap()).unwrap();
        gan.generator_loss_on_tape(&mut tape, &b, cond, fake, target, 1.0)
            .unwrap()
            .mse
    };
    let a = loss(&[0, 1, 2, 3, 4]);
    let b = loss(&[3, 0, 4, 2, 1]);
    assert!((a - b).abs() < 1e-12);
}

fn linear_pairs(task: &LinearMapTask, noise: f64, rng: &mut impl Rng) -> Vec<LatentPair> {
    task.queries
        .iter()
        .map(|q| {
            let mut r = affine(&task.matrix, &task.bias, q);
            r.iter_mut()
                .for_each(|v| *v += noise * rng.sample::<f64, _>(StandardNormal));
            LatentPair {
                query: LatentCode(q.clone()),
                context: Vec::new(),
                response: LatentCode(r),
            }
        })
        .collect()
}

/// Least squares with an intercept via the normal equations, solved by
/// Gauss-Jordan elimination.
#[allow(clippy::needless_range_loop)]
fn least_squares(pairs: &[LatentPair]) -> Vec<Vec<f64>> {
    let d = pairs[0].query.dim();
    let k = d + 1;
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![vec![0.0; d]; k];
    for p in pairs {
        let mut x = p.query.0.clone();
        x.push(1.0);
        for i in 0..k {
            for j in 0..k {
                xtx[i][j] += x[i] * x[j];
            }
            for j in 0..d {
                xty[i][j] += x[i] * p.response.0[j];
            }
        }
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&a, &b| xtx[a][col].abs().total_cmp(&xtx[b][col].abs()))
            .unwrap();
        xtx.swap(col, piv);
        xty.swap(col, piv);
        let p = xtx[col][col];
        for j in 0..k {
            xtx[col][j] /= p;
        }
        for j in 0..d {
            xty[col][j] /= p;
        }
        for r in 0..k {
            if r != col {
                let f = xtx[r][col];
                for j in 0..k {
                    xtx[r][j] -= f * xtx[col][j];
                }
                for j in 0..d {
                    xty[r][j] -= f * xty[col][j];
                }
            }
        }
    }
    xty
}

#[test]
fn pure_regression_matches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let task = LinearMapTask::generate(8, 6500, &mut rng);
    let pairs = linear_pairs(&task, 0.3, &mut rng);
    let (train, held) = pairs.split_at(6000);
    let coef = least_squares(train);
    let ols_mse = held
        .iter()
        .map(|p| {
            let mut x = p.query.0.clone();
            x.push(1.0);
            (0..8)
                .map(|j| {
                    let pred: f64 = (0..9).map(|i| x[i] * coef[i][j]).sum();
                    (pred - p.response.0[j]).powi(2)
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / held.len() as f64;
    let cfg = GanConfig {
        latent: 8,
        adv_weight: 0.0,
        gamma: Some(1.0),
        epochs: 40,
        batch_size: 256,
        generator_adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..GanConfig::default()
    };
    let (gan, log) = train_gan(train, held, &cfg, &mut rng, &mut |_, _| {}).unwrap();
    let (mse, _) = gan.evaluate(held).unwrap();
    assert_eq!(mse, log.epochs.last().unwrap().valid_mse);
    assert!(
        (mse - ols_mse).abs() <= 0.1 * ols_mse,
        "regression {mse} vs least squares {ols_mse}"
    );
}

#[test]
fn short_linear_map_training_reduces_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let task = LinearMapTask::generate(8, 600, &mut rng);
    let pairs = linear_pairs(&task, 0.0, &mut rng);
    let (train, held) = pairs.split_at(500);
    let cfg = GanConfig {
        latent: 8,
        epochs: 5,
        ..GanConfig::default()
    };
    let (_, log) = train_gan(train, held, &cfg, &mut rng, &mut |_, _| {}).unwrap();
    assert_eq!(log.epochs.len(), 5);
    assert!(log.epochs[4].valid_mse < log.epochs[0].valid_mse);
    assert!(log
        .epochs
        .iter()
        .all(|e| (e.g_total - (e.g_adv + e.g_mse)).abs() < 1e-9
            && (0.0..=1.0).contains(&e.valid_d_accuracy)));
}
