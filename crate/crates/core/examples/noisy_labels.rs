//! Symmetric label noise on half the classes: plain SGD against
//! variance-split LPG, with the running per-class variance statistic.

use lpg::data::{gen_gaussian_mixture, inject_symmetric_noise};
use lpg::trainer::{evaluate, train, TrainConfig};
use lpg::{ClosedFormScope, PerturbMethod, PlanConfig, Rng, SplitMode, Threshold};

fn main() -> lpg::Result<()> {
    let root = Rng::new(2);
    let clean = gen_gaussian_mixture(10, 16, 200, 3.0, &mut root.substream("data.train"))?;
    let noisy = inject_symmetric_noise(&clean, 0.4, &mut root.substream("data.noise"), Some(&[0, 1, 2, 3, 4]))?;
    let test_ds = gen_gaussian_mixture(10, 16, 100, 3.0, &mut root.substream("data.test"))?;
    println!("flipped fraction: {:.3}", noisy.noise_fraction().unwrap_or(0.0));

    let plain = TrainConfig {
        epochs: 10,
        eval_every: 10,
        diagnostics: false,
        ..TrainConfig::default()
    };
    let lpg = TrainConfig {
        method: PerturbMethod::LpgClosedForm {
            scope: ClosedFormScope::PerSample,
        },
        plan: PlanConfig {
            split: SplitMode::Variance,
            epsilon: 0.1,
            delta_epsilon: 0.2,
            tau: Threshold::Median,
        },
        ..plain.clone()
    };
    for cfg in [&plain, &lpg] {
        let out = train(cfg, &noisy, &test_ds)?;
        let last = out.history.last().unwrap();
        let var: Vec<String> = last.stats.variance.iter().map(|v| format!("{v:.3}")).collect();
        println!("{:16} test acc {:.3}", cfg.method.name(), evaluate(&out.net, &test_ds)?.overall);
        println!("  Var(h_c): [{}]", var.join(", "));
    }
    Ok(())
}
