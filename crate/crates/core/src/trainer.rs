//! The training loop: per-epoch plan rebuild, logit-gradient interception,
//! perturbation, SGD with momentum, evaluation and metrics.
//!
//! Randomness comes from named substreams of the run seed: `init` for the
//! weights, `shuffle` for batch order, `noise` for gradient noise and
//! `diagnostics` for the noise draws inside the relative-variation pass.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{self, Rng};
use crate::net::{sgd_step, ForwardCache, Mlp, Momentum, ParamGrad, Sample};
use crate::perturb::{
    self, apply_method, closed_form_seeds, BatchContext, ClassObjective, PerturbMethod, Perturbed,
};
use crate::schedule::{
    build_plan, ClassStats, Direction, PerturbationPlan, PlanConfig, SplitMode, Threshold,
};

/// Classes whose mean gradient norm is at or below this are left out of the
/// relative-variation diagnostic.
pub const MIN_CLASS_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// hidden layer widths; input and output sizes come from the data
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(epoch, multiplier)`: from that (0-based) epoch on the rate is multiplied
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    pub method: PerturbMethod,
    pub plan: PlanConfig,
    pub ema_beta: f64,
    /// evaluate after every `eval_every` epochs (and always after the last)
    pub eval_every: usize,
    /// compute the per-class relative gradient variation at eval points
    pub diagnostics: bool,
    /// check per batch that LPG moves class gradient norms the planned way
    pub check_directions: bool,
    /// record wall-clock time per epoch; off keeps metrics byte-reproducible
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 60,
            batch_size: 64,
            lr_schedule: vec![(30, 0.1), (45, 0.1)],
            seed: 0,
            method: PerturbMethod::NoPerturb,
            plan: PlanConfig {
                split: SplitMode::Accuracy,
                epsilon: 0.1,
                delta_epsilon: 0.2,
                tau: Threshold::Value(0.5),
            },
            ema_beta: 0.9,
            eval_every: 1,
            diagnostics: true,
            check_directions: false,
            wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad(format!("ema beta must be in [0,1), got {}", self.ema_beta));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad(format!(
                "hidden widths must be positive, got {:?}",
                self.hidden
            ));
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return bad(format!(
                    "lr schedule epochs must increase strictly: {:?}",
                    self.lr_schedule
                ));
            }
        }
        if let Some((e, m)) = self.lr_schedule.iter().find(|(_, m)| !(*m > 0.0)) {
            return bad(format!("lr multiplier at epoch {e} must be > 0, got {m}"));
        }
        self.method.validate()?;
        self.plan.validate()
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, m)| lr * m)
    }

    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }
}

/// Per-batch norm-direction checks for LPG runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionChecks {
    /// class-in-batch gradient comparisons made
    pub class_checks: usize,
    /// comparisons where `‖g̃_c‖` did not move in the planned direction
    pub class_violations: usize,
    pub sample_checks: usize,
    pub sample_violations: usize,
}

/// Overall and per-class accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub overall: f64,
    /// `None` for classes with no samples
    pub per_class: Vec<Option<f64>>,
}

impl Evaluation {
    /// Mean of the per-class accuracies that are present.
    pub fn balanced(&self) -> f64 {
        let present: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based number of completed epochs
    pub epoch: usize,
    pub train_loss: f64,
    pub acc_overall: f64,
    pub acc_class: Vec<Option<f64>>,
    /// `‖g̃_c − ḡ_c‖ / ‖ḡ_c‖`
    pub rgv: Vec<Option<f64>>,
    pub eps_bar: f64,
    pub wall_ms: u64,
    pub plan: PerturbationPlan,
    pub stats: ClassStats,
    pub checks: DirectionChecks,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: Mlp,
    pub history: Vec<MetricsRecord>,
    /// set when training stopped on a numeric failure
    pub abort: Option<String>,
}

/// Argmax predictions, ties broken toward the lowest class index.
pub fn evaluate(net: &Mlp, ds: &Dataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::InvalidInput(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let c = ds.num_classes();
    let mut total = vec![0usize; c];
    let mut correct = vec![0usize; c];
    for (i, &y) in ds.true_labels().iter().enumerate() {
        let pred = math::argmax(&net.logits(ds.x(i))?);
        total[y] += 1;
        correct[y] += usize::from(pred == y);
    }
    let per_class = total
        .iter()
        .zip(&correct)
        .map(|(&t, &k)| (t > 0).then(|| k as f64 / t as f64))
        .collect();
    Ok(Evaluation {
        overall: correct.iter().sum::<usize>() as f64 / ds.len() as f64,
        per_class,
    })
}

struct ClassPass {
    caches: Vec<ForwardCache>,
    logit_grads: Vec<Vec<f64>>,
    xs: Vec<usize>,
}

fn class_pass(net: &Mlp, ds: &Dataset, class: usize) -> Result<ClassPass> {
    let mut pass = ClassPass {
        caches: Vec::new(),
        logit_grads: Vec::new(),
        xs: Vec::new(),
    };
    for (i, &y) in ds.labels().iter().enumerate() {
        if y != class {
            continue;
        }
        let (u, cache) = net.forward(ds.x(i))?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits for sample {i}")));
        }
        pass.logit_grads.push(math::ce_logit_grad(&u, y)?);
        pass.caches.push(cache);
        pass.xs.push(i);
    }
    Ok(pass)
}

fn mean_backward(net: &Mlp, caches: &[ForwardCache], seeds: &[Vec<f64>]) -> Result<ParamGrad> {
    let mut g = ParamGrad::zeros(net.num_params());
    for (cache, s) in caches.iter().zip(seeds) {
        net.backward_accumulate(cache, s, &mut g)?;
    }
    let n = caches.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// Per-class relative gradient variation over a full pass with frozen
/// parameters. `ḡ_c` is the class-mean loss gradient; `g̃_c` is what the
/// method turns it into (LPG rules are applied to the class's logit gradients
/// with the whole class as the batch).
pub fn relative_grad_variation(
    net: &Mlp,
    ds: &Dataset,
    plan: &PerturbationPlan,
    method: &PerturbMethod,
    rng: &mut Rng,
) -> Result<Vec<Option<f64>>> {
    let c = ds.num_classes();
    let mut out = Vec::with_capacity(c);
    for class in 0..c {
        let pass = class_pass(net, ds, class)?;
        if pass.caches.is_empty() {
            out.push(None);
            continue;
        }
        let g = mean_backward(net, &pass.caches, &pass.logit_grads)?;
        let gn = g.norm();
        if gn <= MIN_CLASS_GRAD_NORM {
            out.push(None);
            continue;
        }
        let perturbed: ParamGrad = match *method {
            PerturbMethod::NoPerturb => g.clone(),
            PerturbMethod::Clip { tau_clip } => perturb::clip_grad(&g, tau_clip),
            PerturbMethod::Noise { sigma } => perturb::noise_grad(&g, sigma, rng),
            PerturbMethod::Sam { rho } => {
                let batch: Vec<Sample<'_>> = pass.xs.iter().map(|&i| (ds.x(i), class)).collect();
                perturb::sam_grad_from(net, &batch, &g, rho)?
            }
            PerturbMethod::LpgClosedForm { scope } => {
                let labels = vec![class; pass.caches.len()];
                let seeds = closed_form_seeds(&pass.logit_grads, &labels, plan, scope)?;
                mean_backward(net, &pass.caches, &seeds)?
            }
            PerturbMethod::LpgPgd { steps, step } => {
                let dir = plan.direction(class).ok_or_else(|| {
                    Error::Config(format!(
                        "class {class} is not covered by the perturbation plan"
                    ))
                })?;
                let eps = plan.eps_c[class];
                let caches: Vec<&ForwardCache> = pass.caches.iter().collect();
                let hs: Vec<&[f64]> = pass.logit_grads.iter().map(Vec::as_slice).collect();
                let obj = ClassObjective::from_caches(net, &caches, &hs)?;
                let delta =
                    perturb::lpg_pgd(&obj, eps, perturb::pgd_kappa(step, eps, steps), steps, dir)?
                        .delta;
                let seeds: Vec<Vec<f64>> = pass
                    .logit_grads
                    .iter()
                    .map(|h| h.iter().zip(&delta).map(|(a, b)| a + b).collect())
                    .collect();
                mean_backward(net, &pass.caches, &seeds)?
            }
        };
        out.push(Some(math::norm(&math::sub(&perturbed, &g)) / gn));
    }
    Ok(out)
}

fn is_eval_point(cfg: &TrainConfig, epoch: usize) -> bool {
    (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs
}

fn check_batch_directions(
    ctx: &BatchContext<'_>,
    seeds: &[Vec<f64>],
    plan: &PerturbationPlan,
    checks: &mut DirectionChecks,
) -> Result<()> {
    let c = ctx.net.num_classes();
    for (class, members) in ctx.class_members(c).iter().enumerate() {
        if members.is_empty() || plan.eps_c[class] == 0.0 {
            continue;
        }
        let dir = plan.membership[class];
        let moved_right = |before: f64, after: f64| match dir {
            Direction::Positive => after > before,
            Direction::Negative => after < before,
        };
        let mut plain = ParamGrad::zeros(ctx.net.num_params());
        let mut pert = ParamGrad::zeros(ctx.net.num_params());
        for &i in members {
            ctx.net
                .backward_accumulate(&ctx.caches[i], &ctx.logit_grads[i], &mut plain)?;
            ctx.net
                .backward_accumulate(&ctx.caches[i], &seeds[i], &mut pert)?;
            let hn = math::norm(&ctx.logit_grads[i]);
            if hn > 0.0 {
                checks.sample_checks += 1;
                if !moved_right(hn, math::norm(&seeds[i])) {
                    checks.sample_violations += 1;
                }
            }
        }
        let n = members.len() as f64;
        let (before, after) = (plain.norm() / n, pert.norm() / n);
        if before > 0.0 {
            checks.class_checks += 1;
            if !moved_right(before, after) {
                checks.class_violations += 1;
            }
        }
    }
    Ok(())
}

/// Run the full training procedure.
pub fn train(cfg: &TrainConfig, train_ds: &Dataset, test_ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(Error::Config(
            "training and test sets must be non-empty".into(),
        ));
    }
    if train_ds.dim() != test_ds.dim() || train_ds.num_classes() != test_ds.num_classes() {
        return Err(Error::Config(format!(
            "train set (d={}, C={}) and test set (d={}, C={}) disagree",
            train_ds.dim(),
            train_ds.num_classes(),
            test_ds.dim(),
            test_ds.num_classes()
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut init_rng = root.substream("init");
    let mut shuffle_rng = root.substream("shuffle");
    let mut noise_rng = root.substream("noise");
    let mut diag_rng = root.substream("diagnostics");

    let c = train_ds.num_classes();
    let mut net = Mlp::init(&cfg.layer_dims(train_ds.dim(), c), &mut init_rng)?;
    let mut velocity = Momentum::new(net.num_params());
    let mut stats = ClassStats::new(train_ds.class_counts().to_vec());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_ds.len()).collect();

    for epoch in 0..cfg.epochs {
        let plan = if cfg.method.is_logit_space() {
            build_plan(&stats, &cfg.plan)?
        } else {
            PerturbationPlan::inert(c)
        };
        let lr = cfg.lr_at(epoch);
        let mut checks = DirectionChecks::default();
        let started = Instant::now();
        let mut loss_sum = 0.0;

        order.sort_unstable();
        shuffle_rng.shuffle(&mut order);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<Sample<'_>> = chunk
                .iter()
                .map(|&i| (train_ds.x(i), train_ds.labels()[i]))
                .collect();
            let mut caches = Vec::with_capacity(chunk.len());
            let mut hs = Vec::with_capacity(chunk.len());
            let mut preds = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &(x, y) in &samples {
                let (u, cache) = net.forward(x)?;
                let loss = if u.iter().all(|v| v.is_finite()) {
                    math::cross_entropy_loss(&u, y)?
                } else {
                    f64::NAN
                };
                if !loss.is_finite() {
                    let msg = format!("non-finite loss at epoch {}, batch {b}", epoch + 1);
                    return Ok(TrainOutcome {
                        net,
                        history,
                        abort: Some(msg),
                    });
                }
                loss_sum += loss;
                hs.push(math::ce_logit_grad(&u, y)?);
                preds.push(math::argmax(&u));
                labels.push(y);
                caches.push(cache);
            }
            stats.update(&preds, &labels, &hs, cfg.ema_beta)?;

            let ctx = BatchContext {
                net: &net,
                samples: &samples,
                caches: &caches,
                logit_grads: &hs,
            };
            let grad = match apply_method(&cfg.method, &ctx, &plan, &mut noise_rng)? {
                Perturbed::Identity => ctx.mean_param_grad(&hs)?,
                Perturbed::Seeds(seeds) => {
                    if cfg.check_directions {
                        check_batch_directions(&ctx, &seeds, &plan, &mut checks)?;
                    }
                    ctx.mean_param_grad(&seeds)?
                }
                Perturbed::Grad(g) => g,
            };
            if let Err(e) = sgd_step(
                &mut net,
                &grad,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            ) {
                return match e {
                    Error::Numeric(m) => Ok(TrainOutcome {
                        net,
                        history,
                        abort: Some(format!("epoch {}, batch {b}: {m}", epoch + 1)),
                    }),
                    other => Err(other),
                };
            }
            if let Some(i) = net.params().iter().position(|w| !w.is_finite()) {
                let msg = format!(
                    "epoch {}, batch {b}: parameter {i} became non-finite",
                    epoch + 1
                );
                return Ok(TrainOutcome {
                    net,
                    history,
                    abort: Some(msg),
                });
            }
        }
        let wall_ms = if cfg.wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };

        if is_eval_point(cfg, epoch) {
            let eval = evaluate(&net, test_ds)?;
            let rgv = if cfg.diagnostics {
                match relative_grad_variation(&net, train_ds, &plan, &cfg.method, &mut diag_rng) {
                    Ok(v) => v,
                    Err(Error::Numeric(m)) => {
                        return Ok(TrainOutcome {
                            net,
                            history,
                            abort: Some(format!("epoch {} diagnostics: {m}", epoch + 1)),
                        })
                    }
                    Err(e) => return Err(e),
                }
            } else {
                vec![None; c]
            };
            history.push(MetricsRecord {
                epoch: epoch + 1,
                train_loss: loss_sum / train_ds.len() as f64,
                acc_overall: eval.overall,
                acc_class: eval.per_class,
                rgv,
                eps_bar: plan.mean_epsilon(train_ds.class_counts())?,
                wall_ms,
                plan,
                stats: stats.clone(),
                checks,
            });
        }
    }
    Ok(TrainOutcome {
        net,
        history,
        abort: None,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header of the metrics CSV for `C` classes.
pub fn metrics_header(num_classes: usize) -> String {
    let mut h = String::from("epoch,train_loss,acc_overall");
    for c in 0..num_classes {
        write!(h, ",acc_class_{c}").unwrap();
    }
    for c in 0..num_classes {
        write!(h, ",rgv_class_{c}").unwrap();
    }
    h.push_str(",eps_bar,wall_ms");
    h
}

/// Metrics CSV: one row per eval point; absent values are empty fields.
pub fn metrics_csv(history: &[MetricsRecord], num_classes: usize) -> String {
    let mut s = metrics_header(num_classes);
    s.push('\n');
    for r in history {
        write!(s, "{},{},{}", r.epoch, r.train_loss, r.acc_overall).unwrap();
        for v in &r.acc_class {
            write!(s, ",{}", opt(*v)).unwrap();
        }
        for v in &r.rgv {
            write!(s, ",{}", opt(*v)).unwrap();
        }
        writeln!(s, ",{},{}", r.eps_bar, r.wall_ms).unwrap();
    }
    s
}

#[derive(Serialize)]
struct PlanLine<'a> {
    epoch: usize,
    plan: &'a PerturbationPlan,
    positive: Vec<usize>,
    negative: Vec<usize>,
    stats: &'a ClassStats,
    checks: &'a DirectionChecks,
}

/// JSON-lines sidecar: the plan, class statistics and direction checks per eval point.
pub fn plans_jsonl(history: &[MetricsRecord]) -> Result<String> {
    let mut s = String::new();
    for r in history {
        let line = PlanLine {
            epoch: r.epoch,
            plan: &r.plan,
            positive: r.plan.positive(),
            negative: r.plan.negative(),
            stats: &r.stats,
            checks: &r.checks,
        };
        s.push_str(&serde_json::to_string(&line)?);
        s.push('\n');
    }
    Ok(s)
}

/// One parsed row of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub acc_overall: f64,
    pub acc_class: Vec<Option<f64>>,
    pub rgv: Vec<Option<f64>>,
    pub eps_bar: f64,
    pub wall_ms: u64,
}

/// Parse a metrics CSV written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "empty metrics file"))?;
    let cols = header.split(',').count();
    if cols < 5 || (cols - 5) % 2 != 0 {
        return Err(Error::parse(
            "line 1",
            format!("unexpected metrics header '{header}'"),
        ));
    }
    let c = (cols - 5) / 2;
    if header != metrics_header(c) {
        return Err(Error::parse(
            "line 1",
            format!("unexpected metrics header '{header}'"),
        ));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let loc = format!("line {}", i + 2);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols {
            return Err(Error::parse(
                &loc,
                format!("expected {cols} fields, got {}", f.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(&loc, format!("bad number '{s}'")))
        };
        let maybe = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        rows.push(MetricsRow {
            epoch: f[0].parse().map_err(|_| Error::parse(&loc, "bad epoch"))?,
            train_loss: num(f[1])?,
            acc_overall: num(f[2])?,
            acc_class: f[3..3 + c]
                .iter()
                .map(|s| maybe(s))
                .collect::<Result<_>>()?,
            rgv: f[3 + c..3 + 2 * c]
                .iter()
                .map(|s| maybe(s))
                .collect::<Result<_>>()?,
            eps_bar: num(f[3 + 2 * c])?,
            wall_ms: f[4 + 2 * c]
                .parse()
                .map_err(|_| Error::parse(&loc, "bad wall_ms"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_mixture;
    use crate::math::Matrix;

    fn small_data(seed: u64) -> (Dataset, Dataset) {
        let mut rng = Rng::new(seed);
        let train = gen_gaussian_mixture(3, 4, 30, 3.0, &mut rng).unwrap();
        let test = gen_gaussian_mixture(3, 4, 20, 3.0, &mut rng).unwrap();
        (train, test)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            hidden: vec![8],
            epochs: 4,
            batch_size: 16,
            lr_schedule: vec![(2, 0.5)],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_is_a_step_function() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.05);
        assert_eq!(cfg.lr_at(29), 0.05);
        assert_eq!(cfg.lr_at(30), 0.05 * 0.1);
        assert_eq!(cfg.lr_at(44), 0.05 * 0.1);
        assert_eq!(cfg.lr_at(45), 0.05 * 0.1 * 0.1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = quick_cfg();
        cfg.lr_schedule = vec![(3, 0.1), (3, 0.1)];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = quick_cfg();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = quick_cfg();
        cfg.method = PerturbMethod::Sam { rho: 0.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn constant_logits_tie_break_to_class_zero() {
        let net = Mlp::zeros(&[2, 2]).unwrap();
        let ds = Dataset::new(
            Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![2.0, 2.0],
                vec![-1.0, 3.0],
            ])
            .unwrap(),
            vec![0, 1, 0, 1],
            None,
            2,
        )
        .unwrap();
        let e = evaluate(&net, &ds).unwrap();
        assert_eq!(e.overall, 0.5);
        assert_eq!(e.per_class, vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn perfect_net_and_absent_class() {
        let mut net = Mlp::zeros(&[3, 3]).unwrap();
        net.weight_mut(0)
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let ds = Dataset::new(
            Matrix::from_rows(&[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 2.0, 0.0],
                vec![3.0, 0.0, 0.0],
            ])
            .unwrap(),
            vec![0, 1, 0],
            None,
            3,
        )
        .unwrap();
        let e = evaluate(&net, &ds).unwrap();
        assert_eq!(e.overall, 1.0);
        assert_eq!(e.per_class[2], None);
        let empty = ds.subset(&[]).unwrap();
        assert!(evaluate(&net, &empty).is_err());
    }

    #[test]
    fn per_class_accuracy_weights_back_to_overall() {
        let (train_ds, test) = small_data(4);
        let out = train_quick(&train_ds, &test);
        let e = evaluate(&out.net, &test).unwrap();
        let counts = test.class_counts();
        let weighted: f64 = e
            .per_class
            .iter()
            .zip(counts)
            .map(|(a, &n)| a.unwrap() * n as f64)
            .sum::<f64>()
            / test.len() as f64;
        assert!((weighted - e.overall).abs() <= 1e-12);
    }

    fn train_quick(train_ds: &Dataset, test_ds: &Dataset) -> TrainOutcome {
        train(&quick_cfg(), train_ds, test_ds).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let (train_ds, test_ds) = small_data(2);
        let a = train_quick(&train_ds, &test_ds);
        let b = train_quick(&train_ds, &test_ds);
        assert_eq!(metrics_csv(&a.history, 3), metrics_csv(&b.history, 3));
        assert_eq!(a.net, b.net);
        assert_eq!(a.history.len(), 4);
    }

    #[test]
    fn no_perturb_has_zero_variation() {
        let (train_ds, test_ds) = small_data(3);
        let out = train_quick(&train_ds, &test_ds);
        for r in &out.history {
            assert!(r.rgv.iter().all(|v| *v == Some(0.0)));
        }
    }

    #[test]
    fn eval_cadence_controls_rows() {
        let (train_ds, test_ds) = small_data(5);
        let mut cfg = quick_cfg();
        cfg.epochs = 5;
        cfg.eval_every = 2;
        let out = train(&cfg, &train_ds, &test_ds).unwrap();
        let epochs: Vec<usize> = out.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![2, 4, 5]);
        let csv = metrics_csv(&out.history, 3);
        assert_eq!(csv.lines().count(), 4);
        let rows = parse_metrics_csv(&csv).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].acc_overall, out.history[2].acc_overall);
        assert_eq!(plans_jsonl(&out.history).unwrap().lines().count(), 3);
    }

    #[test]
    fn mismatched_datasets_are_config_errors() {
        let (train_ds, _) = small_data(1);
        let other = gen_gaussian_mixture(4, 4, 5, 2.0, &mut Rng::new(1)).unwrap();
        assert!(matches!(
            train(&quick_cfg(), &train_ds, &other),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn header_layout() {
        assert_eq!(
            metrics_header(2),
            "epoch,train_loss,acc_overall,acc_class_0,acc_class_1,rgv_class_0,rgv_class_1,eps_bar,wall_ms"
        );
    }
}
