//! Training-loop contracts: reproducibility, update scheduling, gradient
//! isolation between the two players, loss gradients on a frozen micro
//! network, and divergence handling.

use fusegan_core::discriminator::{build_discriminator, DiscriminatorKind};
use fusegan_core::generator::{build_unet, UNetSpec};
use fusegan_core::objective::{
    adam_step, d_loss, eval_generator, g_loss, train, GenLossForm, OptimizerState, TrainConfig,
    TrainSetup,
};
use fusegan_core::rng::stream;
use fusegan_core::taskgen::{generate_dataset, SamplePair, SceneSpec, TaskKind};
use fusegan_core::tensor::Tensor;

fn tiny_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        canvas: 16,
        seed,
        ..SceneSpec::default()
    }
}

fn tiny_setup<'a>(
    cfg: &'a TrainConfig,
    train_data: &'a [SamplePair],
    eval_data: &'a [SamplePair],
    gen_spec: &'a UNetSpec,
) -> TrainSetup<'a> {
    TrainSetup {
        cfg,
        task: TaskKind::Segmentation,
        train_data,
        eval_data,
        gen_spec,
        disc_kind: DiscriminatorKind::Fusion4,
        disc_use_sn: true,
        out_dir: None,
    }
}

#[test]
fn zero_iterations_yields_initial_metrics_only() {
    let data = generate_dataset(&tiny_scene(1), 6, TaskKind::Segmentation).unwrap();
    let cfg = TrainConfig {
        total_iters: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let gen_spec = UNetSpec::small(3, 5, 16);
    let report = train(&tiny_setup(&cfg, &data[..4], &data[4..], &gen_spec)).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.records[0].iter, 0);
    assert!(report.records[0].metric("miou").is_some());
    assert!(report.records[0].metric("pixacc").is_some());
    assert_eq!(report.d_updates, 0);
    assert_eq!(report.g_updates, 0);
    assert!(!report.diverged);
}

#[test]
fn same_seed_reproduces_the_loss_curve_exactly() {
    let data = generate_dataset(&tiny_scene(2), 8, TaskKind::Segmentation).unwrap();
    let cfg = TrainConfig {
        total_iters: 12,
        eval_every: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let gen_spec = UNetSpec::small(3, 5, 16);
    let a = train(&tiny_setup(&cfg, &data[..6], &data[6..], &gen_spec)).unwrap();
    let b = train(&tiny_setup(&cfg, &data[..6], &data[6..], &gen_spec)).unwrap();
    assert_eq!(a.to_log(), b.to_log());
    assert!(a.records.len() >= 4);
}

#[test]
fn one_generator_update_per_d_steps_per_g() {
    let data = generate_dataset(&tiny_scene(3), 6, TaskKind::Segmentation).unwrap();
    let gen_spec = UNetSpec::small(3, 5, 16);
    for (d_steps, total, expect_g) in [(2u64, 10u64, 5u64), (3, 10, 3), (1, 7, 7)] {
        let cfg = TrainConfig {
            total_iters: total,
            eval_every: 10,
            d_steps_per_g: d_steps,
            seed: 11,
            ..TrainConfig::default()
        };
        let report = train(&tiny_setup(&cfg, &data[..4], &data[4..], &gen_spec)).unwrap();
        assert_eq!(report.d_updates, total);
        assert_eq!(report.g_updates, expect_g);
    }
}

// A discriminator update must never move generator parameters: the fake is
// detached before the discriminator sees it.
#[test]
fn d_step_leaves_generator_untouched() {
    let data = generate_dataset(&tiny_scene(4), 4, TaskKind::Segmentation).unwrap();
    let mut g = build_unet(&UNetSpec::small(3, 5, 16), 7).unwrap();
    let mut d = build_discriminator(DiscriminatorKind::Fusion4, 3, 5, true, 8).unwrap();
    let g_before: Vec<Vec<f32>> = g.params().iter().map(|p| p.to_vec()).collect();

    let mut rng = stream(1, "dstep");
    let x = data[0].x.clone();
    let y = data[0].y.clone();
    let fake = g.forward(&x, true, &mut rng).unwrap().detach();
    let z_real = d.forward(&x, &y, true, &mut rng).unwrap();
    let z_fake = d.forward(&x, &fake, true, &mut rng).unwrap();
    let loss = d_loss(&z_real, &z_fake).unwrap();
    loss.backward().unwrap();

    let cfg = TrainConfig::default();
    let mut opt = OptimizerState::new(&d.params());
    adam_step(&d.params(), &mut opt, &cfg).unwrap();

    for (p, before) in g.params().iter().zip(&g_before) {
        assert!(p.grad().is_none(), "generator parameter got a gradient");
        assert_eq!(&p.to_vec(), before, "generator parameter moved");
    }
    let d_moved = d
        .params()
        .iter()
        .any(|p| p.grad().is_none() && !p.to_vec().is_empty());
    assert!(d_moved);
}

// Both loss surfaces, differentiated through the full forward graphs of a
// frozen micro pair, must match central finite differences.
#[test]
fn loss_gradients_match_finite_differences_on_micro_network() {
    let mut gen_spec = UNetSpec::small(2, 2, 8);
    gen_spec.dropout_layers.clear();
    gen_spec.use_sn = false;
    let mut g = build_unet(&gen_spec, 21).unwrap();
    for block in g.encoder.iter().chain(g.decoder.iter()) {
        block.bias.set_data(&vec![0.3; block.bias.len()]);
    }
    let mut d = build_discriminator(DiscriminatorKind::Fusion4, 2, 2, false, 22).unwrap();
    for (name, p) in d.named_params() {
        if name.ends_with(".bias") {
            p.set_data(&vec![0.25; p.len()]);
        }
    }

    let x = Tensor::from_vec(
        (0..2 * 64).map(|i| ((i % 13) as f32 - 6.0) / 7.0).collect(),
        [1, 2, 8, 8],
    )
    .unwrap();
    let y = Tensor::from_vec(
        (0..2 * 64).map(|i| ((i % 7) as f32 - 3.0) / 4.0).collect(),
        [1, 2, 8, 8],
    )
    .unwrap();
    let mut rng = stream(2, "unused");

    // d_loss gradient w.r.t. the first y-branch weight.
    {
        let probe = match &d {
            fusegan_core::discriminator::Discriminator::Fusion(net) => {
                net.y_branch[0].weight.clone()
            }
            _ => unreachable!(),
        };
        let fake = g.forward(&x, false, &mut rng).unwrap().detach();
        let eval = |d: &mut fusegan_core::discriminator::Discriminator| -> f64 {
            let mut r = stream(3, "unused");
            let z_real = d.forward(&x, &y, false, &mut r).unwrap();
            let z_fake = d.forward(&x, &fake, false, &mut r).unwrap();
            f64::from(d_loss(&z_real, &z_fake).unwrap().item())
        };
        for p in d.params() {
            p.zero_grad();
        }
        let z_real = d.forward(&x, &y, false, &mut rng).unwrap();
        let z_fake = d.forward(&x, &fake, false, &mut rng).unwrap();
        d_loss(&z_real, &z_fake).unwrap().backward().unwrap();
        let analytic = probe.grad().unwrap();
        assert_fd_close(&probe, analytic, |_| eval(&mut d), 1e-2, "d_loss");
    }

    // g_loss gradient w.r.t. the first encoder weight.
    {
        let probe = g.encoder[0].weight.clone();
        let eval = |g: &mut fusegan_core::generator::UNet,
                    d: &mut fusegan_core::discriminator::Discriminator| -> f64 {
            let mut r = stream(4, "unused");
            let fake = g.forward(&x, false, &mut r).unwrap();
            let z = d.forward(&x, &fake, false, &mut r).unwrap();
            f64::from(
                g_loss(&z, &fake, &y, 10.0, GenLossForm::NonSaturating)
                    .unwrap()
                    .item(),
            )
        };
        for p in g.params() {
            p.zero_grad();
        }
        d.set_trainable(false);
        let fake = g.forward(&x, false, &mut rng).unwrap();
        let z = d.forward(&x, &fake, false, &mut rng).unwrap();
        g_loss(&z, &fake, &y, 10.0, GenLossForm::NonSaturating)
            .unwrap()
            .backward()
            .unwrap();
        let analytic = probe.grad().unwrap();
        assert_fd_close(&probe, analytic, |_| eval(&mut g, &mut d), 1e-2, "g_loss");
    }
}

fn assert_fd_close(
    param: &Tensor,
    analytic: Vec<f32>,
    mut eval: impl FnMut(()) -> f64,
    step: f32,
    label: &str,
) {
    let base = param.to_vec();
    let mut err = 0.0f64;
    let mut norm = 0.0f64;
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + step;
        param.set_data(&probe);
        let plus = eval(());
        probe[i] = base[i] - step;
        param.set_data(&probe);
        let minus = eval(());
        param.set_data(&base);
        let numeric = (plus - minus) / (2.0 * f64::from(step));
        err += (f64::from(analytic[i]) - numeric).powi(2);
        norm += numeric * numeric;
    }
    let rel = err.sqrt() / norm.sqrt().max(1e-12);
    assert!(rel < 1e-3, "{label}: rel error {rel:.3e}");
}

#[test]
fn absurd_learning_rate_diverges_and_is_reported() {
    let data = generate_dataset(&tiny_scene(5), 6, TaskKind::Segmentation).unwrap();
    let cfg = TrainConfig {
        total_iters: 20,
        eval_every: 5,
        lr: 1e12,
        seed: 13,
        ..TrainConfig::default()
    };
    let gen_spec = UNetSpec::small(3, 5, 16);
    let report = train(&tiny_setup(&cfg, &data[..4], &data[4..], &gen_spec)).unwrap();
    assert!(report.diverged, "lr 1e12 should blow up");
    assert!(report.iters_done <= 20);
}

#[test]
fn eval_metrics_cover_each_task() {
    for (task, expected) in [
        (TaskKind::Segmentation, vec!["miou", "pixacc"]),
        (TaskKind::MaskToImage, vec!["proxy_miou", "pixacc"]),
        (TaskKind::Depth, vec!["rel", "rms", "log10"]),
    ] {
        let data = generate_dataset(&tiny_scene(6), 4, task).unwrap();
        let out_ch = task.y_channels(5);
        let mut g = build_unet(&UNetSpec::small(3, out_ch, 16), 31).unwrap();
        let metrics = eval_generator(&mut g, &data, task, 4).unwrap();
        let names: Vec<&str> = metrics.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(names, expected, "{task}");
        for (name, v) in &metrics {
            assert!(v.is_finite(), "{task}.{name} = {v}");
            if name.contains("iou") || name.contains("acc") {
                assert!((0.0..=1.0).contains(v), "{task}.{name} = {v}");
            } else {
                assert!(*v >= 0.0, "{task}.{name} = {v}");
            }
        }
    }
}
