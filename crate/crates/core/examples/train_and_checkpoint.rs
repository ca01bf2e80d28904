//! Train a small model, write metrics and a checkpoint, and reload it.

use lpg::data::gen_gaussian_mixture;
use lpg::trainer::{metrics_csv, train, TrainConfig};
use lpg::{Mlp, Rng};

fn main() -> lpg::Result<()> {
    let root = Rng::new(4);
    let train_ds = gen_gaussian_mixture(3, 4, 50, 2.5, &mut root.substream("data.train"))?;
    let test_ds = gen_gaussian_mixture(3, 4, 30, 2.5, &mut root.substream("data.test"))?;
    let cfg = TrainConfig {
        hidden: vec![16],
        epochs: 5,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &train_ds, &test_ds)?;
    print!("{}", metrics_csv(&out.history, 3));

    let dir = std::env::temp_dir().join("lpg-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    out.net.save_checkpoint(&path)?;
    let back = Mlp::load_checkpoint(&path)?;
    println!("checkpoint {} reloads identically: {}", path.display(), back == out.net);
    Ok(())
}
