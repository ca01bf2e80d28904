//! Clip, Gaussian noise and SAM written as perturbations of one batch gradient.

use lpg::data::gen_gaussian_mixture;
use lpg::perturb::{clip_grad, noise_grad, sam_grad};
use lpg::{math, Mlp, Rng};

fn main() -> lpg::Result<()> {
    let root = Rng::new(3);
    let ds = gen_gaussian_mixture(4, 6, 16, 2.0, &mut root.substream("data"))?;
    let net = Mlp::init(&[6, 16, 4], &mut root.substream("init"))?;
    let batch: Vec<_> = (0..ds.len()).map(|i| (ds.x(i), ds.labels()[i])).collect();
    let (loss, g) = net.batch_loss_grad(&batch)?;
    println!("loss {loss:.4}, |g| = {:.4}", g.norm());

    let clipped = clip_grad(&g, 0.1);
    println!("clip tau=0.1     |g'| = {:.4}, cos = {:.6}", clipped.norm(), math::cosine(&clipped, &g).unwrap());

    let mut rng = root.substream("noise");
    let noisy = noise_grad(&g, 0.05, &mut rng);
    println!("noise sigma=0.05 |g'-g| = {:.4}", math::norm(&math::sub(&noisy, &g)));

    let sam = sam_grad(&net, &batch, 0.05)?;
    println!("sam rho=0.05     |g'| = {:.4}, cos = {:.4}", sam.norm(), math::cosine(&sam, &g).unwrap());
    Ok(())
}
