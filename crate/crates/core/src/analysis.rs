//! Numerical checks: finite-difference gradients, the logit-perturbation
//! duality, a brute-force PGD oracle and the SAM Taylor expansion.
//!
//! The oracles only share the `math` primitives with the code they check.
//! Each `run_*` suite returns a [`CheckReport`] carrying pass/fail, the
//! measured values and the thresholds they were held to.

use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::math::{self, Matrix, Rng};
use crate::net::{ForwardCache, Jacobian, Mlp, ParamGrad, Sample};
use crate::perturb::{self, ClassObjective};
use crate::schedule::Direction;

/// Denominator floor of the per-parameter relative error.
pub const REL_ERR_FLOOR: f64 = 1e-4;
/// Central-difference step of the gradient oracle.
pub const FD_STEP: f64 = 1e-5;
/// Inputs whose hidden pre-activations come closer than this to zero are
/// redrawn by the gradient checks.
pub const KINK_MARGIN: f64 = 1e-3;
/// Step of the finite-difference Hessian-vector product.
pub const HVP_STEP: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn sample_loss(net: &Mlp, x: &[f64], y: usize) -> Result<f64> {
    math::cross_entropy_loss(&net.logits(x)?, y)
}

/// Central differences of the sample loss over every parameter.
pub fn finite_diff_param_grad(net: &Mlp, sample: Sample<'_>, step: f64) -> Result<ParamGrad> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step must be in [1e-7, 1e-3], got {step}"
        )));
    }
    let (x, y) = sample;
    let mut probe = net.clone();
    let mut g = ParamGrad::zeros(net.num_params());
    for i in 0..net.num_params() {
        let w = net.params()[i];
        probe.params_mut()[i] = w + step;
        let up = sample_loss(&probe, x, y)?;
        probe.params_mut()[i] = w - step;
        let down = sample_loss(&probe, x, y)?;
        probe.params_mut()[i] = w;
        g[i] = (up - down) / (2.0 * step);
    }
    Ok(g)
}

/// A random ReLU network with at most `max_params` parameters: one or two
/// hidden layers, nonzero biases.
pub fn random_net(rng: &mut Rng, num_classes: Option<usize>, max_params: usize) -> Result<Mlp> {
    loop {
        let c = num_classes.unwrap_or_else(|| 2 + rng.below(4));
        let mut dims = vec![2 + rng.below(5)];
        for _ in 0..1 + rng.below(2) {
            dims.push(3 + rng.below(8));
        }
        dims.push(c);
        if crate::net::param_count(&dims) > max_params {
            continue;
        }
        let mut net = Mlp::init(&dims, rng)?;
        for l in 0..net.num_layers() {
            for b in net.bias_mut(l) {
                *b = 0.2 * rng.normal();
            }
        }
        return Ok(net);
    }
}

/// A standard-normal input whose forward pass keeps every hidden
/// pre-activation at least `margin` away from the ReLU kink.
pub fn smooth_input(net: &Mlp, rng: &mut Rng, margin: f64) -> Result<(Vec<f64>, ForwardCache)> {
    for _ in 0..10_000 {
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.normal()).collect();
        let (_, cache) = net.forward(&x)?;
        if cache.min_hidden_margin() >= margin {
            return Ok((x, cache));
        }
    }
    Err(Error::Numeric(
        "could not draw an input away from the ReLU kinks".into(),
    ))
}

fn activation_pattern(net: &Mlp, x: &[f64]) -> Result<Vec<bool>> {
    let (_, cache) = net.forward(x)?;
    let pre = cache.pre_activations();
    Ok(pre[..pre.len() - 1]
        .iter()
        .flatten()
        .map(|z| *z > 0.0)
        .collect())
}

/// Machine-readable outcome of one check suite.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub suite: String,
    pub passed: bool,
    pub measured: Value,
    pub thresholds: Value,
    /// human-readable lines
    pub lines: Vec<String>,
}

impl CheckReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "[{}] {}\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite
        );
        for l in &self.lines {
            s.push_str("  ");
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

/// Gradient oracle and chain-rule identity.
pub fn run_grads_check(seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::new(seed).substream("check.grads");
    let started = Instant::now();
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let net = random_net(&mut rng, None, 300)?;
        let (x, cache) = smooth_input(&net, &mut rng, KINK_MARGIN)?;
        let y = rng.below(net.num_classes());
        let h = math::ce_logit_grad(cache.logits(), y)?;
        let analytic = net.backward_from_logit_grad(&cache, &h)?;
        let numeric = finite_diff_param_grad(&net, (&x, y), FD_STEP)?;
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            worst_rel = worst_rel.max(rel_err(*a, *n, REL_ERR_FLOOR));
        }
    }
    let fd_secs = started.elapsed().as_secs_f64();

    let mut worst_chain = 0.0f64;
    for _ in 0..50 {
        let net = random_net(&mut rng, None, 300)?;
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.normal()).collect();
        let (_, cache) = net.forward(&x)?;
        let h: Vec<f64> = (0..net.num_classes()).map(|_| rng.normal()).collect();
        let jac = net.assemble_jacobian(&cache)?;
        let jh = jac.matrix().matvec(&h)?;
        let bw = net.backward_from_logit_grad(&cache, &h)?;
        for (a, b) in jh.iter().zip(bw.iter()) {
            worst_chain = worst_chain.max((a - b).abs());
        }
    }
    let passed = worst_rel <= 1e-6 && fd_secs < 5.0 && worst_chain <= 1e-10;
    Ok(CheckReport {
        suite: "grads".into(),
        passed,
        measured: json!({
            "fd_max_rel_err": worst_rel,
            "fd_seconds": fd_secs,
            "chain_rule_max_abs_err": worst_chain,
        }),
        thresholds: json!({
            "fd_max_rel_err": 1e-6,
            "fd_seconds": 5.0,
            "chain_rule_max_abs_err": 1e-10,
            "rel_err_floor": REL_ERR_FLOOR,
            "fd_step": FD_STEP,
        }),
        lines: vec![
            format!("finite differences, 20 nets: max rel err {worst_rel:.3e} (<= 1e-6) in {fd_secs:.3} s (< 5 s)"),
            format!("J·h vs backward(h), 50 triples: max abs err {worst_chain:.3e} (<= 1e-10)"),
        ],
    })
}

/// Exact vs first-order parameter-gradient change under a logit shift.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub delta_norm: f64,
    pub exact_norm: f64,
    pub approx_norm: f64,
    pub rel_error: f64,
    /// `rel_error(δ/2) / rel_error(δ)`; `None` when `rel_error(δ)` is zero
    pub halving_ratio: Option<f64>,
}

fn duality_terms(
    net: &Mlp,
    cache: &ForwardCache,
    y: usize,
    delta: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let u = cache.logits();
    let shifted: Vec<f64> = u.iter().zip(delta).map(|(a, b)| a + b).collect();
    let after = net.backward_from_logit_grad(cache, &math::ce_logit_grad(&shifted, y)?)?;
    let before = net.backward_from_logit_grad(cache, &math::ce_logit_grad(u, y)?)?;
    let exact = math::sub(&after, &before);
    let hd = math::ce_logit_hessian(u)?.matvec(delta)?;
    let approx = net.backward_from_logit_grad(cache, &hd)?.into_vec();
    Ok((exact, approx))
}

fn duality_rel(exact: &[f64], approx: &[f64]) -> f64 {
    let n = math::norm(exact);
    if n == 0.0 {
        0.0
    } else {
        math::norm(&math::sub(exact, approx)) / n
    }
}

/// Compare `Δg` from shifting the logits by `delta` with `J·H·delta`.
pub fn duality_check(net: &Mlp, sample: Sample<'_>, delta: &[f64]) -> Result<DualityReport> {
    let (x, y) = sample;
    if delta.len() != net.num_classes() {
        return Err(Error::shape(net.num_classes(), delta.len()));
    }
    let (_, cache) = net.forward(x)?;
    let (exact, approx) = duality_terms(net, &cache, y, delta)?;
    let rel = duality_rel(&exact, &approx);
    let halving_ratio = if rel > 0.0 {
        let half = math::scale(delta, 0.5);
        let (e2, a2) = duality_terms(net, &cache, y, &half)?;
        Some(duality_rel(&e2, &a2) / rel)
    } else {
        None
    };
    Ok(DualityReport {
        delta_norm: math::norm(delta),
        exact_norm: math::norm(&exact),
        approx_norm: math::norm(&approx),
        rel_error: rel,
        halving_ratio,
    })
}

pub fn run_duality_check(seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::new(seed).substream("check.duality");
    let mut reports = Vec::new();
    for _ in 0..20 {
        let net = random_net(&mut rng, None, 300)?;
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.normal()).collect();
        let y = rng.below(net.num_classes());
        let dir: Vec<f64> = (0..net.num_classes()).map(|_| rng.normal()).collect();
        let delta = math::scale(&dir, 1e-3 / math::norm(&dir));
        reports.push(duality_check(&net, (&x, y), &delta)?);
    }
    let max_rel = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let ratios: Vec<f64> = reports
        .iter()
        .map(|r| r.halving_ratio.unwrap_or(f64::NAN))
        .collect();
    let good = ratios.iter().filter(|r| **r <= 0.75).count();
    let passed = max_rel <= 0.1 && good >= 18;
    let mut lines = vec![
        format!("max rel err at |delta| = 1e-3: {max_rel:.3e} (<= 0.1)"),
        format!("halving ratio <= 0.75 in {good}/20 trials (need >= 18)"),
    ];
    lines.extend(ratios.iter().enumerate().map(|(i, r)| {
        format!(
            "trial {i:2}: rel err {:.3e}, halving ratio {r:.4}",
            reports[i].rel_error
        )
    }));
    Ok(CheckReport {
        suite: "duality".into(),
        passed,
        measured: json!({ "max_rel_error": max_rel, "halving_ratios": ratios, "trials_passing_ratio": good, "reports": reports }),
        thresholds: json!({ "delta_norm": 1e-3, "max_rel_error": 0.1, "halving_ratio": 0.75, "min_trials": 18, "trials": 20 }),
        lines,
    })
}

fn oracle_objective(sum_jac: &Matrix, base: &[f64], delta: &[f64]) -> Result<f64> {
    let mut r = sum_jac.matvec(delta)?;
    math::axpy(1.0, base, &mut r);
    Ok(math::norm(&r))
}

/// Exhaustive search of `‖Σ J_i (h_i + δ)‖` over a `grid_n × grid_n` lattice
/// on `[−ε_c, ε_c]²` restricted to the disk. Maximises for a positive class,
/// minimises for a negative one.
pub fn pgd_grid_oracle(
    jacobians: &[Jacobian],
    logit_grads: &[Vec<f64>],
    epsilon_c: f64,
    grid_n: usize,
    direction: Direction,
) -> Result<(Vec<f64>, f64)> {
    let first = jacobians
        .first()
        .ok_or_else(|| Error::InvalidInput("grid oracle needs at least one sample".into()))?;
    if first.num_classes() != 2 {
        return Err(Error::UnsupportedDimension(format!(
            "grid oracle needs C = 2, got C = {}",
            first.num_classes()
        )));
    }
    if grid_n < 101 {
        return Err(Error::InvalidInput(format!(
            "grid_n must be >= 101, got {grid_n}"
        )));
    }
    if !(epsilon_c >= 0.0) || jacobians.len() != logit_grads.len() {
        return Err(Error::InvalidInput(
            "grid oracle needs epsilon_c >= 0 and one h per Jacobian".into(),
        ));
    }
    let p = first.num_params();
    let mut sum_jac = Matrix::zeros(p, 2);
    let mut base = vec![0.0; p];
    for (j, h) in jacobians.iter().zip(logit_grads) {
        sum_jac.add_scaled(1.0, j.matrix())?;
        math::axpy(1.0, &j.matrix().matvec(h)?, &mut base);
    }
    let mut best = (
        vec![0.0, 0.0],
        oracle_objective(&sum_jac, &base, &[0.0, 0.0])?,
    );
    if epsilon_c == 0.0 {
        return Ok(best);
    }
    let better = |a: f64, b: f64| match direction {
        Direction::Positive => a > b,
        Direction::Negative => a < b,
    };
    let step = 2.0 * epsilon_c / (grid_n - 1) as f64;
    for i in 0..grid_n {
        let a = -epsilon_c + step * i as f64;
        for j in 0..grid_n {
            let b = -epsilon_c + step * j as f64;
            if a * a + b * b > epsilon_c * epsilon_c {
                continue;
            }
            let v = oracle_objective(&sum_jac, &base, &[a, b])?;
            if better(v, best.1) {
                best = (vec![a, b], v);
            }
        }
    }
    Ok(best)
}

/// One random two-class PGD instance.
#[derive(Debug, Clone)]
pub struct PgdInstance {
    pub jacobians: Vec<Jacobian>,
    pub logit_grads: Vec<Vec<f64>>,
    pub epsilon_c: f64,
    pub direction: Direction,
}

/// One sample of a random two-class net, positive direction, `ε_c` drawn
/// from `[0.05, 0.5]`.
pub fn random_pgd_instance(rng: &mut Rng) -> Result<PgdInstance> {
    let net = random_net(rng, Some(2), 300)?;
    let class = rng.below(2);
    let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.normal()).collect();
    let (u, cache) = net.forward(&x)?;
    let epsilon_c = 0.05 + 0.45 * rng.uniform();
    Ok(PgdInstance {
        jacobians: vec![net.assemble_jacobian(&cache)?],
        logit_grads: vec![math::ce_logit_grad(&u, class)?],
        epsilon_c,
        direction: Direction::Positive,
    })
}

pub fn run_pgd_check(seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::new(seed).substream("check.pgd");
    let started = Instant::now();
    let mut all_feasible = true;
    let mut worst_gap = 0.0f64;
    let mut lines = Vec::new();
    let mut gaps = Vec::new();
    for t in 0..20 {
        let inst = random_pgd_instance(&mut rng)?;
        let obj = ClassObjective::new(&inst.jacobians, &inst.logit_grads)?;
        let steps = perturb::DEFAULT_PGD_STEPS;
        let kappa = inst.epsilon_c / steps as f64;
        let out = perturb::lpg_pgd(&obj, inst.epsilon_c, kappa, steps, inst.direction)?;
        let feasible = out.iterates.iter().all(|d| math::norm(d) <= inst.epsilon_c);
        all_feasible &= feasible;
        let pgd_val = obj.value(&out.delta)?;
        let (_, grid_val) = pgd_grid_oracle(
            &inst.jacobians,
            &inst.logit_grads,
            inst.epsilon_c,
            201,
            inst.direction,
        )?;
        let gap = (pgd_val - grid_val).abs() / grid_val.max(f64::MIN_POSITIVE);
        worst_gap = worst_gap.max(gap);
        gaps.push(gap);
        lines.push(format!(
            "instance {t:2}: {:?} eps {:.3}, pgd {pgd_val:.6}, grid {grid_val:.6}, gap {:.2}%{}",
            inst.direction,
            inst.epsilon_c,
            100.0 * gap,
            if feasible { "" } else { " INFEASIBLE" }
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    let passed = all_feasible && worst_gap <= 0.05 && secs < 10.0;
    lines.insert(
        0,
        format!(
            "all iterates feasible: {all_feasible}; worst gap to 201x201 grid {:.2}% (<= 5%); {secs:.3} s (< 10 s)",
            100.0 * worst_gap
        ),
    );
    Ok(CheckReport {
        suite: "pgd".into(),
        passed,
        measured: json!({ "all_iterates_feasible": all_feasible, "max_relative_gap": worst_gap, "gaps": gaps, "seconds": secs }),
        thresholds: json!({ "max_relative_gap": 0.05, "grid_n": 201, "steps": perturb::DEFAULT_PGD_STEPS, "seconds": 10.0 }),
        lines,
    })
}

/// Taylor errors of a SAM gradient against `g + ρ·Hv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorTable {
    pub rhos: Vec<f64>,
    pub errors: Vec<f64>,
    /// `error(ρ) / error(ρ/2)` for every ρ in the list
    pub halving_ratios: Vec<f64>,
}

/// Core of the SAM Taylor check, for any gradient field.
///
/// `grad_at` maps parameters to the loss gradient and `sam_at(ρ)` returns
/// the SAM gradient under test. `Hv` is a central difference of `grad_at`
/// along `g/‖g‖`. Returns `None` when `g` vanishes.
pub fn taylor_table<G, S>(
    params: &[f64],
    mut grad_at: G,
    mut sam_at: S,
    rhos: &[f64],
) -> Result<Option<TaylorTable>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
    S: FnMut(f64) -> Result<Vec<f64>>,
{
    if rhos.iter().any(|r| !(*r > 0.0)) || rhos.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput(format!(
            "rho values must be positive and decreasing: {rhos:?}"
        )));
    }
    let g = grad_at(params)?;
    let gn = math::norm(&g);
    if gn <= 1e-12 {
        log::info!("SAM Taylor check skipped: gradient norm {gn:e}");
        return Ok(None);
    }
    let v = math::scale(&g, 1.0 / gn);
    let at = |s: f64| -> Vec<f64> { params.iter().zip(&v).map(|(w, d)| w + s * d).collect() };
    let up = grad_at(&at(HVP_STEP))?;
    let down = grad_at(&at(-HVP_STEP))?;
    let hv: Vec<f64> = up
        .iter()
        .zip(&down)
        .map(|(a, b)| (a - b) / (2.0 * HVP_STEP))
        .collect();
    let mut error_at = |rho: f64| -> Result<f64> {
        let sam = sam_at(rho)?;
        let taylor: Vec<f64> = g.iter().zip(&hv).map(|(a, b)| a + rho * b).collect();
        Ok(math::norm(&math::sub(&sam, &taylor)))
    };
    let mut errors = Vec::with_capacity(rhos.len());
    let mut halving_ratios = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let e = error_at(rho)?;
        halving_ratios.push(e / error_at(rho / 2.0)?);
        errors.push(e);
    }
    Ok(Some(TaylorTable {
        rhos: rhos.to_vec(),
        errors,
        halving_ratios,
    }))
}

/// SAM Taylor check on the mean cross-entropy of a batch.
pub fn sam_taylor_check(
    net: &Mlp,
    batch: &[Sample<'_>],
    rhos: &[f64],
) -> Result<Option<TaylorTable>> {
    let mut probe = net.clone();
    taylor_table(
        net.params(),
        |p| {
            probe.set_params(p)?;
            Ok(probe.batch_loss_grad(batch)?.1.into_vec())
        },
        |rho| Ok(perturb::sam_grad(net, batch, rho)?.into_vec()),
        rhos,
    )
}

/// Whether every hidden unit keeps its ReLU state for all batch inputs when
/// the parameters move anywhere up to `reach` along `g/‖g‖` (checked at the
/// end points and at the Hessian probe points).
fn batch_is_smooth(net: &Mlp, batch: &[Sample<'_>], reach: f64) -> Result<bool> {
    let (_, g) = net.batch_loss_grad(batch)?;
    let gn = g.norm();
    if gn == 0.0 {
        return Ok(false);
    }
    let base: Vec<Vec<bool>> = batch
        .iter()
        .map(|(x, _)| activation_pattern(net, x))
        .collect::<Result<_>>()?;
    let mut probe = net.clone();
    let mut s = -HVP_STEP;
    let mut checkpoints = vec![-HVP_STEP, HVP_STEP];
    while s < reach {
        s = (s + reach / 64.0).min(reach);
        checkpoints.push(s);
    }
    for s in checkpoints {
        let p: Vec<f64> = net
            .params()
            .iter()
            .zip(g.iter())
            .map(|(w, d)| w + s * d / gn)
            .collect();
        probe.set_params(&p)?;
        for ((x, _), pat) in batch.iter().zip(&base) {
            if activation_pattern(&probe, x)? != *pat {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

pub fn run_sam_check(seed: u64) -> Result<CheckReport> {
    let mut rng = Rng::new(seed).substream("check.sam");
    let rhos = [1e-2, 5e-3];
    let mut ratios = Vec::new();
    let mut restored = true;
    let mut lines = Vec::new();
    let mut nets = 0;
    let mut draws = 0;
    while nets < 10 {
        draws += 1;
        if draws > 1000 {
            return Err(Error::Numeric(
                "could not draw kink-free SAM instances".into(),
            ));
        }
        let net = random_net(&mut rng, None, 300)?;
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..net.input_dim()).map(|_| rng.normal()).collect())
            .collect();
        let ys: Vec<usize> = (0..4).map(|_| rng.below(net.num_classes())).collect();
        let batch: Vec<Sample<'_>> = xs
            .iter()
            .map(Vec::as_slice)
            .zip(ys.iter().copied())
            .collect();
        if !batch_is_smooth(&net, &batch, rhos[0])? {
            continue;
        }
        let before = net.params().to_vec();
        let Some(table) = sam_taylor_check(&net, &batch, &rhos)? else {
            continue;
        };
        restored &= net
            .params()
            .iter()
            .zip(&before)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        lines.push(format!(
            "net {nets}: errors {:.3e} / {:.3e}, ratios {:.3} / {:.3}",
            table.errors[0], table.errors[1], table.halving_ratios[0], table.halving_ratios[1]
        ));
        ratios.extend(table.halving_ratios);
        nets += 1;
    }
    let in_band = ratios.iter().all(|r| (2.5..=6.0).contains(r));
    let passed = in_band && restored;
    lines.insert(
        0,
        format!("error(rho)/error(rho/2) within [2.5, 6] for rho in {{1e-2, 5e-3}} on 10 nets: {in_band}; parameters restored: {restored}"),
    );
    Ok(CheckReport {
        suite: "sam".into(),
        passed,
        measured: json!({ "halving_ratios": ratios, "params_restored": restored }),
        thresholds: json!({ "ratio_min": 2.5, "ratio_max": 6.0, "rhos": rhos, "nets": 10 }),
        lines,
    })
}

/// Names accepted by [`run_suite`].
pub const SUITES: [&str; 4] = ["grads", "duality", "pgd", "sam"];

pub fn run_suite(name: &str, seed: u64) -> Result<CheckReport> {
    match name {
        "grads" => run_grads_check(seed),
        "duality" => run_duality_check(seed),
        "pgd" => run_pgd_check(seed),
        "sam" => run_sam_check(seed),
        other => Err(Error::Config(format!(
            "unknown check suite '{other}' (expected all, {})",
            SUITES.join(", ")
        ))),
    }
}
