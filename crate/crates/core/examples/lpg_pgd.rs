//! Sign-step PGD over the logit-gradient perturbation ball for a two-class
//! problem, compared with a dense grid search of the same ball.

use lpg::analysis::pgd_grid_oracle;
use lpg::perturb::{lpg_pgd, pgd_kappa, ClassObjective};
use lpg::{math, Direction, Mlp, PgdStep, Rng};

fn main() -> lpg::Result<()> {
    let mut rng = Rng::new(11);
    let net = Mlp::init(&[3, 8, 2], &mut rng)?;
    let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
    let (u, cache) = net.forward(&x)?;
    let jac = vec![net.assemble_jacobian(&cache)?];
    let grads = vec![math::ce_logit_grad(&u, 1)?];
    let objective = ClassObjective::new(&jac, &grads)?;

    let (eps, steps) = (0.3, 3);
    let kappa = pgd_kappa(PgdStep::BoundOverSteps, eps, steps);
    let out = lpg_pgd(&objective, eps, kappa, steps, Direction::Positive)?;
    for (t, d) in out.iterates.iter().enumerate() {
        println!("step {}: delta = [{:+.4}, {:+.4}], |delta| = {:.4}", t + 1, d[0], d[1], math::norm(d));
    }
    let (grid_delta, grid_best) = pgd_grid_oracle(&jac, &grads, eps, 201, Direction::Positive)?;
    println!("objective: unperturbed {:.5}, pgd {:.5}, grid {grid_best:.5} at [{:+.4}, {:+.4}]", objective.value(&[0.0, 0.0])?, objective.value(&out.delta)?, grid_delta[0], grid_delta[1]);
    Ok(())
}
