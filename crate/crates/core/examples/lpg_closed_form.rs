//! Closed-form logit-gradient perturbation: the norm of `h` moves by exactly
//! `eps` in the planned direction, and the negative side stops at zero.

use lpg::perturb::lpg_closed_form;
use lpg::{math, Direction, Mlp, Rng};

fn main() -> lpg::Result<()> {
    let mut rng = Rng::new(7);
    let net = Mlp::init(&[5, 12, 4], &mut rng)?;
    let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let (u, cache) = net.forward(&x)?;
    let h = math::ce_logit_grad(&u, 0)?;
    println!("|h| = {:.4}", math::norm(&h));

    for (dir, eps) in [(Direction::Positive, 0.2), (Direction::Negative, 0.2), (Direction::Negative, 5.0)] {
        let seed = lpg_closed_form(&h, eps, dir)?;
        let g = net.backward_from_logit_grad(&cache, &seed)?;
        println!("{dir:?} eps={eps}: |h'| = {:.4}, |g'| = {:.4}", math::norm(&seed), g.norm());
    }
    Ok(())
}
