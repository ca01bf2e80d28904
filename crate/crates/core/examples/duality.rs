//! Shifting the logits by a small `delta` changes the parameter gradient by
//! `J·H·delta` to first order, where `H` is the cross-entropy Hessian in logit
//! space. The relative error should roughly halve with `delta`.

use lpg::analysis::duality_check;
use lpg::{Mlp, Rng};

fn main() -> lpg::Result<()> {
    let mut rng = Rng::new(5);
    let net = Mlp::init(&[6, 10, 4], &mut rng)?;
    let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
    for scale in [1e-2, 1e-3, 1e-4] {
        let delta: Vec<f64> = (0..4).map(|_| scale * rng.normal()).collect();
        let r = duality_check(&net, (&x, 1), &delta)?;
        println!(
            "|delta| {:.1e}: exact {:.3e}, first-order {:.3e}, rel err {:.2e}, halving ratio {}",
            r.delta_norm,
            r.exact_norm,
            r.approx_norm,
            r.rel_error,
            r.halving_ratio.map_or("n/a".into(), |v| format!("{v:.3}"))
        );
    }
    Ok(())
}
