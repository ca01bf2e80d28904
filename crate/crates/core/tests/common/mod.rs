#![allow(dead_code)]

use lpg::data::{gen_gaussian_mixture, gen_longtail, inject_symmetric_noise};
use lpg::{Dataset, Mlp, Rng};

/// Plain minibatch SGD written out by hand over the flat parameter layout
/// (layer-major, row-major weights then biases), used as an oracle for the
/// trainer. Returns the final parameters and the mean train loss per epoch.
pub struct RefRun {
    pub params: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

pub struct RefConfig<'a> {
    pub dims: &'a [usize],
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: &'a [(usize, f64)],
    pub seed: u64,
}

fn offsets(dims: &[usize]) -> Vec<(usize, usize)> {
    let mut at = 0;
    dims.windows(2)
        .map(|w| {
            let o = (at, at + w[0] * w[1]);
            at += w[0] * w[1] + w[1];
            o
        })
        .collect()
}

pub fn reference_sgd(cfg: &RefConfig<'_>, ds: &Dataset) -> RefRun {
    let root = Rng::new(cfg.seed);
    let mut w = Mlp::init(cfg.dims, &mut root.substream("init"))
        .unwrap()
        .params()
        .to_vec();
    let mut shuffle = root.substream("shuffle");
    let offs = offsets(cfg.dims);
    let layers = cfg.dims.len() - 1;
    let mut vel = vec![0.0; w.len()];
    let mut epoch_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut lr = cfg.lr;
        for &(e, m) in cfg.lr_schedule {
            if e <= epoch {
                lr *= m;
            }
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = vec![0.0; w.len()];
            for &i in chunk {
                let y = ds.labels()[i];
                // forward
                let mut acts: Vec<Vec<f64>> = vec![ds.x(i).to_vec()];
                let mut pres: Vec<Vec<f64>> = Vec::new();
                for l in 0..layers {
                    let (fan_in, fan_out) = (cfg.dims[l], cfg.dims[l + 1]);
                    let (wo, bo) = offs[l];
                    let a = &acts[l];
                    let z: Vec<f64> = (0..fan_out)
                        .map(|r| {
                            w[wo + r * fan_in..wo + (r + 1) * fan_in]
                                .iter()
                                .zip(a)
                                .map(|(p, q)| p * q)
                                .sum::<f64>()
                                + w[bo + r]
                        })
                        .collect();
                    acts.push(z.iter().map(|v| v.max(0.0)).collect());
                    pres.push(z);
                }
                let u = &pres[layers - 1];
                let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut p: Vec<f64> = u.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = p.iter().sum();
                for v in &mut p {
                    *v /= s;
                }
                loss_sum += -p[y].max(1e-300).ln();
                // backward
                let mut d = p;
                d[y] -= 1.0;
                for l in (0..layers).rev() {
                    let (fan_in, _) = (cfg.dims[l], cfg.dims[l + 1]);
                    let (wo, bo) = offs[l];
                    let a = &acts[l];
                    for (r, &dr) in d.iter().enumerate() {
                        for c in 0..fan_in {
                            g[wo + r * fan_in + c] += dr * a[c];
                        }
                        g[bo + r] += dr;
                    }
                    if l > 0 {
                        let mut next = vec![0.0; fan_in];
                        for (r, &dr) in d.iter().enumerate() {
                            for c in 0..fan_in {
                                next[c] += dr * w[wo + r * fan_in + c];
                            }
                        }
                        for (c, n) in next.iter_mut().enumerate() {
                            if pres[l - 1][c] <= 0.0 {
                                *n = 0.0;
                            }
                        }
                        d = next;
                    }
                }
            }
            let n = chunk.len() as f64;
            for k in 0..w.len() {
                g[k] /= n;
                vel[k] = cfg.momentum * vel[k] + (g[k] + cfg.weight_decay * w[k]);
                w[k] -= lr * vel[k];
            }
        }
        epoch_losses.push(loss_sum / ds.len() as f64);
    }
    RefRun {
        params: w,
        epoch_losses,
    }
}

pub const CLASSES: usize = 10;
pub const DIM: usize = 16;
pub const SEPARATION: f64 = 3.0;
pub const TEST_PER_CLASS: usize = 100;

/// Balanced clean test set drawn from the same mixture as the training data.
pub fn test_set(seed: u64) -> Dataset {
    gen_gaussian_mixture(
        CLASSES,
        DIM,
        TEST_PER_CLASS,
        SEPARATION,
        &mut Rng::new(seed).substream("data.test"),
    )
    .unwrap()
}

pub fn balanced_set(seed: u64, per_class: usize) -> Dataset {
    gen_gaussian_mixture(
        CLASSES,
        DIM,
        per_class,
        SEPARATION,
        &mut Rng::new(seed).substream("data.train"),
    )
    .unwrap()
}

/// 10-class long-tail set with ratio 100 (`n_max` samples in class 0).
pub fn longtail_set(seed: u64, n_max: usize) -> Dataset {
    let base = balanced_set(seed, n_max);
    gen_longtail(&base, 100.0, &mut Rng::new(seed).substream("data.longtail")).unwrap()
}

/// Balanced set with `rate` symmetric noise injected into classes 0..5.
pub fn noisy_set(seed: u64, per_class: usize, rate: f64) -> Dataset {
    let base = balanced_set(seed, per_class);
    inject_symmetric_noise(
        &base,
        rate,
        &mut Rng::new(seed).substream("data.noise"),
        Some(&[0, 1, 2, 3, 4]),
    )
    .unwrap()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
