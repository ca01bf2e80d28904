mod common;

use common::{balanced_set, reference_sgd, test_set, RefConfig};
use lpg::trainer::{metrics_csv, train, TrainConfig};
use lpg::{ClosedFormScope, PerturbMethod, PlanConfig, SplitMode, Threshold};

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: vec![12, 8],
        epochs: 5,
        batch_size: 32,
        lr_schedule: vec![(3, 0.1)],
        seed,
        diagnostics: false,
        ..TrainConfig::default()
    }
}

#[test]
fn no_perturb_matches_hand_written_sgd() {
    for seed in [0, 7] {
        let train_ds = balanced_set(seed, 30);
        let test_ds = test_set(seed);
        let c = cfg(seed);
        let dims = c.layer_dims(train_ds.dim(), train_ds.num_classes());
        let out = train(&c, &train_ds, &test_ds).unwrap();
        let reference = reference_sgd(
            &RefConfig {
                dims: &dims,
                lr: c.lr,
                momentum: c.momentum,
                weight_decay: c.weight_decay,
                epochs: c.epochs,
                batch_size: c.batch_size,
                lr_schedule: &c.lr_schedule,
                seed,
            },
            &train_ds,
        );
        let ours: Vec<u64> = out.net.params().iter().map(|v| v.to_bits()).collect();
        let theirs: Vec<u64> = reference.params.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ours, theirs, "seed {seed}: parameters differ");
        let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
        assert_eq!(losses, reference.epoch_losses);
    }
}

#[test]
fn zero_bound_lpg_is_no_perturb() {
    let train_ds = balanced_set(3, 30);
    let test_ds = test_set(3);
    let base = cfg(3);
    let plain = train(&base, &train_ds, &test_ds).unwrap();
    for split in [
        SplitMode::Accuracy,
        SplitMode::Frequency,
        SplitMode::Variance,
    ] {
        let lpg = TrainConfig {
            method: PerturbMethod::LpgClosedForm {
                scope: ClosedFormScope::PerSample,
            },
            plan: PlanConfig {
                split,
                epsilon: 0.0,
                delta_epsilon: 0.0,
                tau: Threshold::Median,
            },
            ..base.clone()
        };
        let out = train(&lpg, &train_ds, &test_ds).unwrap();
        assert_eq!(out.net, plain.net);
        assert_eq!(
            metrics_csv(&out.history, 10),
            metrics_csv(&plain.history, 10)
        );
    }
}

#[test]
fn one_step_update_equals_summed_jacobian_products() {
    use lpg::math;
    use lpg::net::{sgd_step, Momentum, ParamGrad};
    let ds = balanced_set(11, 4);
    let net = lpg::Mlp::init(&[16, 6, 10], &mut lpg::Rng::new(2)).unwrap();
    let mut via_backward = ParamGrad::zeros(net.num_params());
    let mut via_jacobian = vec![0.0; net.num_params()];
    for i in 0..ds.len() {
        let (u, cache) = net.forward(ds.x(i)).unwrap();
        let h = math::ce_logit_grad(&u, ds.labels()[i]).unwrap();
        net.backward_accumulate(&cache, &h, &mut via_backward)
            .unwrap();
        let jh = net.assemble_jacobian(&cache).unwrap().apply(&h).unwrap();
        math::axpy(1.0, &jh, &mut via_jacobian);
    }
    for (a, b) in via_backward.iter().zip(&via_jacobian) {
        assert!((a - b).abs() <= 1e-10);
    }
    let lr = 0.05;
    let mut moved = net.clone();
    sgd_step(
        &mut moved,
        &via_backward,
        &mut Momentum::new(net.num_params()),
        lr,
        0.9,
        0.0,
    )
    .unwrap();
    for ((w1, w0), g) in moved.params().iter().zip(net.params()).zip(&via_jacobian) {
        assert!((w1 - (w0 - lr * g)).abs() <= 1e-10);
    }
}
