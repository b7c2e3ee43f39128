mod common;

use dtss::graph::Graph;
use dtss::model::{ForwardOptions, LayerGroup, Model, ModelConfig, ParamKind};
use dtss::rng;
use dtss::spiking::LifParams;
use dtss::train::{self, TrainConfig};
use dtss::Tensor;
use proptest::prelude::*;

#[test]
fn finite_differences_agree_on_every_smooth_op() {
    let mut r = rng::stream(11, "gradcheck-it");
    for _ in 0..5 {
        for case in common::gradcheck_cases(&mut r) {
            let err = common::gradcheck(&case.inputs, &*case.build, 1e-3, &mut r);
            assert!(err < 1e-4, "{}: relative error {err:e}", case.op);
        }
    }
}

/// Masking step `t` to zero must give exactly the weight gradient obtained by
/// dropping step `t`'s output from the loss.
#[test]
fn masked_step_contributes_nothing_to_weight_gradients() {
    let mut r = rng::stream(5, "excise");
    let (steps, n_in, n_out) = (4, 5, 3);
    let x = common::random_tensor(&mut r, &[steps, 1, n_in], 0.0, 1.0).cast::<f32>();
    let w = common::random_tensor(&mut r, &[n_in, n_out], -1.0, 1.5).cast::<f32>();
    let weights = common::random_tensor(&mut r, &[steps, 1, n_out], -1.0, 1.0).cast::<f32>();
    for t in 0..steps {
        let run = |mask: Vec<f32>, loss_w: Tensor| {
            let mut g: Graph<f32> = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(w.clone());
            let d = g.matmul(xv, wv).unwrap();
            let s = g.lif(d, LifParams::default()).unwrap();
            let m = g.constant(Tensor::from_vec(mask));
            let o = g.time_mask(s, m).unwrap();
            let lw = g.constant(loss_w);
            let p = g.mul(o, lw).unwrap();
            let l = g.sum(p);
            g.backward(l).unwrap().get_or_zeros(wv)
        };
        let mut mask = vec![1.0; steps];
        mask[t] = 0.0;
        let masked = run(mask, weights.clone());
        let mut excised_w = weights.clone();
        for v in &mut excised_w.data_mut()[t * n_out..(t + 1) * n_out] {
            *v = 0.0;
        }
        let excised = run(vec![1.0; steps], excised_w);
        assert_eq!(masked.data(), excised.data(), "step {t}");
    }
}

/// With every score inside the window, `d(λ Σ TM)/dTP_i = λ (i + 1)`.
#[test]
fn mask_loss_gradient_matches_hand_expansion() {
    let lambda = 1e-2f64;
    let tp = Tensor::from_vec(vec![0.1, 0.3, 0.2, 0.6f64]);
    let mut g: Graph<f64> = Graph::new();
    let v = g.param(tp);
    let ts = g.suffix_sum(v).unwrap();
    let tm = g.threshold(ts);
    let s = g.sum(tm);
    let l = g.scale(s, lambda);
    let grad = g.backward(l).unwrap().get_or_zeros(v);
    let want: Vec<f64> = (0..4).map(|i| lambda * (i + 1) as f64).collect();
    for (a, b) in grad.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Inside the window the mask loss only ever pushes time parameters down.
    #[test]
    fn mask_loss_gradient_is_nonnegative(raw in prop::collection::vec(0.0f64..1.0, 1..=8), lambda in 1e-6f64..1.0) {
        // Rescale so the total score lies in (0, 2).
        let total: f64 = raw.iter().sum::<f64>() + 1e-3;
        let tp: Vec<f64> = raw.iter().map(|v| (v + 1e-3 / raw.len() as f64) / total * 1.9).collect();
        let mut g: Graph<f64> = Graph::new();
        let v = g.param(Tensor::from_vec(tp));
        let ts = g.suffix_sum(v).unwrap();
        prop_assume!(g.value(ts).data().iter().all(|&s| s > 0.0 && s < 2.0));
        let tm = g.threshold(ts);
        let s = g.sum(tm);
        let l = g.scale(s, lambda);
        let grad = g.backward(l).unwrap().get_or_zeros(v);
        prop_assert!(grad.data().iter().all(|&x| x >= 0.0));
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        heads: 2,
        image_size: 8,
        patch_size: 2,
        sps_stages: 1,
        mlp_ratio: 2,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn group_selective_mask_loss() {
    let model = Model::build(&ModelConfig::default(), 2, 4).unwrap();
    let mut r = rng::stream(4, "images");
    let x = common::random_tensor(&mut r, &[2, 1, 16, 16], 0.0, 1.0).cast::<f32>();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &x, ForwardOptions::train()).unwrap();
    let groups = [LayerGroup::Qkv, LayerGroup::Mlp];
    let ml = train::mask_loss(&mut g, &model, &out, &groups, 1e-3).unwrap();
    // Manual enumeration of the selected layers' mask sums.
    let mut want = 0.0;
    for (info, m) in model.layers().iter().zip(&out.masks) {
        if groups.contains(&info.group) {
            want += g.value(m.unwrap()).sum();
        }
    }
    assert!((g.value(ml).item() - 1e-3 * want).abs() < 1e-9);
    let ce = g.cross_entropy(out.logits, &[1, 7]).unwrap();
    let gm = g.backward(ml).unwrap();
    let gc = g.backward(ce).unwrap();
    for info in model.layers() {
        let i = model.time_param_index(&info.name).unwrap().unwrap();
        let pv = out.param_vars[i];
        let from_mask = gm.get_or_zeros(pv);
        let from_ce = gc.get_or_zeros(pv);
        if groups.contains(&info.group) {
            assert!(from_mask.data().iter().any(|&v| v != 0.0), "{}", info.name);
        } else {
            assert!(from_mask.data().iter().all(|&v| v == 0.0), "{}", info.name);
        }
        assert!(
            from_ce.data().iter().any(|&v| v != 0.0),
            "{} has no CE gradient",
            info.name
        );
    }
}

/// Fully active masks and no mask loss must train exactly like the same
/// network without masks.
#[test]
fn full_masks_match_plain_network_bitwise() {
    let cfg = toy_config();
    let plain_cfg = ModelConfig {
        dtss: false,
        ..cfg.clone()
    };
    let mut masked = Model::build(&cfg, cfg.t_max, 8).unwrap();
    let mut plain = Model::build(&plain_cfg, cfg.t_max, 8).unwrap();
    let tc = TrainConfig {
        lambda_m: 0.0,
        ..TrainConfig::default()
    };
    let mut om = train::optimizer_for(&masked, &tc);
    let mut op = train::optimizer_for(&plain, &tc);
    let mut r = rng::stream(8, "ref");
    for _ in 0..5 {
        let x = common::random_tensor(&mut r, &[4, 1, 8, 8], 0.0, 1.0).cast::<f32>();
        let y = [0, 1, 2, 1];
        let a = train::train_step(&mut masked, &mut om, &x, &y, &tc, tc.lr).unwrap();
        let b = train::train_step(&mut plain, &mut op, &x, &y, &tc, tc.lr).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    for p in plain.params() {
        let q = masked.param(&p.name).unwrap();
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert!(masked
        .params()
        .iter()
        .any(|p| p.kind == ParamKind::TimeSteps));
}

#[test]
fn learning_rate_zero_freezes_parameters() {
    let cfg = toy_config();
    let mut model = Model::build(&cfg, 2, 1).unwrap();
    let before: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let tc = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = train::optimizer_for(&model, &tc);
    let x = Tensor::full(&[2, 1, 8, 8], 0.8);
    let l0 = train::train_step(&mut model, &mut opt, &x, &[0, 1], &tc, 0.0)
        .unwrap()
        .loss;
    let l1 = train::train_step(&mut model, &mut opt, &x, &[0, 1], &tc, 0.0)
        .unwrap()
        .loss;
    for (p, b) in model.params().iter().zip(&before) {
        assert_eq!(&p.value, b);
    }
    assert_eq!(l0, l1);
}

#[test]
fn separable_toy_loss_decreases() {
    let cfg = ModelConfig {
        num_classes: 2,
        ..toy_config()
    };
    let mut model = Model::build(&cfg, 2, 2).unwrap();
    let tc = TrainConfig::default();
    let mut opt = train::optimizer_for(&model, &tc);
    let mut x = Tensor::zeros(&[4, 1, 8, 8]);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        let sample = i / 64;
        let col = i % 8;
        *v = if (sample % 2 == 0) == (col < 4) {
            1.0
        } else {
            0.0
        };
    }
    let y = [0, 1, 0, 1];
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(
            train::train_step(&mut model, &mut opt, &x, &y, &tc, tc.lr)
                .unwrap()
                .loss,
        );
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn strong_mask_loss_prunes_steps() {
    let cfg = toy_config();
    let mut model = Model::build(&cfg, 2, 3).unwrap();
    let t0 = model.t_avg().unwrap();
    let tc = TrainConfig {
        lambda_m: 1e-2,
        mask_groups: LayerGroup::ALL.to_vec(),
        ..TrainConfig::default()
    };
    let mut opt = train::optimizer_for(&model, &tc);
    let mut r = rng::stream(3, "prune");
    for _ in 0..200 {
        let x = common::random_tensor(&mut r, &[4, 1, 8, 8], 0.0, 1.0).cast::<f32>();
        train::train_step(&mut model, &mut opt, &x, &[0, 1, 2, 0], &tc, tc.lr).unwrap();
        for p in model
            .params()
            .iter()
            .filter(|p| p.kind == ParamKind::TimeSteps)
        {
            assert!(p.value.data().iter().all(|&v| v >= 0.0));
        }
    }
    assert!(model.t_avg().unwrap() < t0);
}
