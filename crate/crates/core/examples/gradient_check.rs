//! Compare backprop against central finite differences on a small net, then
//! confirm that backward seeded with `h` equals the assembled `J·h`.

use lpg::analysis::{finite_diff_param_grad, rel_err, FD_STEP, REL_ERR_FLOOR};
use lpg::{math, Mlp, Rng};

fn main() -> lpg::Result<()> {
    let mut rng = Rng::new(1);
    let net = Mlp::init(&[4, 8, 6, 3], &mut rng)?;
    let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let y = 2;

    let (u, cache) = net.forward(&x)?;
    let h = math::ce_logit_grad(&u, y)?;
    let analytic = net.backward_from_logit_grad(&cache, &h)?;
    let numeric = finite_diff_param_grad(&net, (&x, y), FD_STEP)?;
    let worst = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| rel_err(*a, *n, REL_ERR_FLOOR))
        .fold(0.0, f64::max);
    println!("{} parameters, max relative error vs finite differences: {worst:.2e}", net.num_params());

    let jh = net.assemble_jacobian(&cache)?.apply(&h)?;
    let gap = jh.iter().zip(analytic.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max |J·h - backward(h)|: {gap:.2e}");
    Ok(())
}
