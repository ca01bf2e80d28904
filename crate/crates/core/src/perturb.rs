//! Gradient perturbation rules.
//!
//! Parameter-space rules (clipping, Gaussian noise, SAM) transform the reduced
//! batch gradient. The LPG rules act earlier: they rewrite each sample's logit
//! gradient `h_i` before it is pushed through the network, so the parameter
//! gradient becomes `J_i h̃_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix, Rng};
use crate::net::{ForwardCache, Jacobian, Mlp, ParamGrad, Sample};
use crate::schedule::{Direction, PerturbationPlan};

/// Default number of PGD steps.
pub const DEFAULT_PGD_STEPS: usize = 3;

/// How the closed-form LPG scale is derived for a class in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedFormScope {
    /// every sample is rescaled so its own norm moves by exactly `ε_c`
    PerSample,
    /// every sample of the class is multiplied by the one factor that moves
    /// the in-batch class-mean logit gradient's norm by `ε_c`
    ClassMean,
}

/// PGD step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdStep {
    Fixed(f64),
    /// `κ = ε_c / T`, reaching the ball boundary in `T` steps
    BoundOverSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum PerturbMethod {
    #[serde(rename = "none")]
    NoPerturb,
    Clip {
        tau_clip: f64,
    },
    Noise {
        sigma: f64,
    },
    Sam {
        rho: f64,
    },
    LpgClosedForm {
        scope: ClosedFormScope,
    },
    LpgPgd {
        steps: usize,
        step: PgdStep,
    },
}

impl PerturbMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbMethod::NoPerturb => "none",
            PerturbMethod::Clip { .. } => "clip",
            PerturbMethod::Noise { .. } => "noise",
            PerturbMethod::Sam { .. } => "sam",
            PerturbMethod::LpgClosedForm { .. } => "lpg_closed_form",
            PerturbMethod::LpgPgd { .. } => "lpg_pgd",
        }
    }

    pub fn is_logit_space(&self) -> bool {
        matches!(
            self,
            PerturbMethod::LpgClosedForm { .. } | PerturbMethod::LpgPgd { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            PerturbMethod::Clip { tau_clip } if !(tau_clip > 0.0) => {
                bad(format!("clip threshold must be > 0, got {tau_clip}"))
            }
            PerturbMethod::Noise { sigma } if !(sigma >= 0.0) || !sigma.is_finite() => {
                bad(format!("noise sigma must be >= 0, got {sigma}"))
            }
            PerturbMethod::Sam { rho } if !(rho > 0.0) => {
                bad(format!("SAM radius must be > 0, got {rho}"))
            }
            PerturbMethod::LpgPgd { steps: 0, .. } => bad("PGD needs at least one step".into()),
            PerturbMethod::LpgPgd {
                step: PgdStep::Fixed(k),
                ..
            } if !(k > 0.0) => bad(format!("PGD step size must be > 0, got {k}")),
            _ => Ok(()),
        }
    }
}

/// `g · min(1, τ/‖g‖)`; a zero gradient is returned as is.
pub fn clip_grad(g: &[f64], tau_clip: f64) -> ParamGrad {
    let n = math::norm(g);
    if n <= tau_clip || n == 0.0 {
        return ParamGrad(g.to_vec());
    }
    ParamGrad(g.iter().map(|v| v * tau_clip / n).collect())
}

/// `g + N(0, σ² I)`.
pub fn noise_grad(g: &[f64], sigma: f64, rng: &mut Rng) -> ParamGrad {
    if sigma == 0.0 {
        return ParamGrad(g.to_vec());
    }
    ParamGrad(g.iter().map(|v| v + sigma * rng.normal()).collect())
}

/// Gradient evaluated at the ascent point `w + ρ·g/‖g‖`, where `g` is the
/// gradient at `w`. `grad_at` maps a flat parameter vector to a gradient.
///
/// Returns `g` itself when it is zero.
pub fn sam_ascent_grad<F>(params: &[f64], g: &[f64], rho: f64, mut grad_at: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let gn = math::norm(g);
    if gn == 0.0 {
        log::debug!("SAM: zero gradient, no ascent direction");
        return Ok(g.to_vec());
    }
    let shifted: Vec<f64> = params
        .iter()
        .zip(g)
        .map(|(w, gi)| w + rho * gi / gn)
        .collect();
    grad_at(&shifted)
}

/// Two-pass SAM gradient of the mean batch loss. The network is left untouched.
pub fn sam_grad(net: &Mlp, batch: &[Sample<'_>], rho: f64) -> Result<ParamGrad> {
    let (_, g) = net.batch_loss_grad(batch)?;
    sam_grad_from(net, batch, &g, rho)
}

/// SAM with the first-pass gradient already available.
pub fn sam_grad_from(net: &Mlp, batch: &[Sample<'_>], g: &[f64], rho: f64) -> Result<ParamGrad> {
    if !(rho > 0.0) {
        return Err(Error::InvalidInput(format!(
            "SAM radius must be > 0, got {rho}"
        )));
    }
    let mut probe = net.clone();
    let out = sam_ascent_grad(net.params(), g, rho, |p| {
        probe.set_params(p)?;
        Ok(probe.batch_loss_grad(batch)?.1.into_vec())
    })?;
    Ok(ParamGrad(out))
}

/// Multiplier applied to a logit gradient of norm `norm` by the closed-form
/// rule: `1 + α/‖h‖` (positive) or `max(0, 1 − α/‖h‖)` (negative).
/// A zero norm gives 1.
pub fn closed_form_scale(norm: f64, alpha: f64, direction: Direction) -> f64 {
    if norm == 0.0 {
        return 1.0;
    }
    match direction {
        Direction::Positive => 1.0 + alpha / norm,
        Direction::Negative => (1.0 - alpha / norm).max(0.0),
    }
}

/// Closed-form LPG: move `h` along its own direction so its norm changes by
/// `±α` (dampening stops at zero).
pub fn lpg_closed_form(h: &[f64], alpha: f64, direction: Direction) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    let n = math::norm(h);
    if n == 0.0 {
        log::debug!("closed-form LPG: zero logit gradient left unchanged");
    }
    Ok(math::scale(h, closed_form_scale(n, alpha, direction)))
}

/// Stacked class quantities used by the aggregate objective
/// `‖Σ_i J_i (h_i + δ)‖ = ‖G + A δ‖` with `A = Σ J_i`, `G = Σ J_i h_i`.
#[derive(Debug, Clone)]
pub struct ClassObjective {
    sum_jac: Matrix,
    base: Vec<f64>,
}

impl ClassObjective {
    pub fn new(jacobians: &[Jacobian], logit_grads: &[Vec<f64>]) -> Result<Self> {
        let first = jacobians
            .first()
            .ok_or_else(|| Error::InvalidInput("objective needs at least one sample".into()))?;
        if jacobians.len() != logit_grads.len() {
            return Err(Error::shape(
                format!("{} logit gradients", jacobians.len()),
                logit_grads.len(),
            ));
        }
        let (p, c) = (first.num_params(), first.num_classes());
        let mut sum_jac = Matrix::zeros(p, c);
        let mut base = vec![0.0; p];
        for (j, h) in jacobians.iter().zip(logit_grads) {
            if j.num_params() != p || j.num_classes() != c || h.len() != c {
                return Err(Error::shape(
                    format!("{p}x{c} Jacobian and length-{c} logit gradient"),
                    format!("{}x{} and {}", j.num_params(), j.num_classes(), h.len()),
                ));
            }
            sum_jac.add_scaled(1.0, j.matrix())?;
            math::axpy(1.0, &j.matrix().matvec(h)?, &mut base);
        }
        Ok(Self { sum_jac, base })
    }

    /// Same sums built straight from forward caches, one reverse pass per class
    /// column and sample, without materialising per-sample Jacobians.
    pub fn from_caches(
        net: &Mlp,
        caches: &[&ForwardCache],
        logit_grads: &[&[f64]],
    ) -> Result<Self> {
        if caches.is_empty() {
            return Err(Error::InvalidInput(
                "objective needs at least one sample".into(),
            ));
        }
        if caches.len() != logit_grads.len() {
            return Err(Error::shape(
                format!("{} logit gradients", caches.len()),
                logit_grads.len(),
            ));
        }
        let (p, c) = (net.num_params(), net.num_classes());
        let mut base = vec![0.0; p];
        let mut columns = vec![vec![0.0; p]; c];
        let mut unit = vec![0.0; c];
        for (cache, h) in caches.iter().zip(logit_grads) {
            net.backward_accumulate(cache, h, &mut base)?;
            for (j, col) in columns.iter_mut().enumerate() {
                unit[j] = 1.0;
                net.backward_accumulate(cache, &unit, col)?;
                unit[j] = 0.0;
            }
        }
        let mut sum_jac = Matrix::zeros(p, c);
        for (j, col) in columns.iter().enumerate() {
            sum_jac.set_col(j, col);
        }
        Ok(Self { sum_jac, base })
    }

    pub fn num_classes(&self) -> usize {
        self.sum_jac.cols()
    }

    /// `G + A δ`
    pub fn residual(&self, delta: &[f64]) -> Result<Vec<f64>> {
        let mut r = self.sum_jac.matvec(delta)?;
        math::axpy(1.0, &self.base, &mut r);
        Ok(r)
    }

    pub fn value(&self, delta: &[f64]) -> Result<f64> {
        Ok(math::norm(&self.residual(delta)?))
    }

    /// `Aᵀ(G + Aδ)/‖G + Aδ‖`, or `None` where the objective is zero.
    pub fn gradient(&self, delta: &[f64]) -> Result<Option<Vec<f64>>> {
        let r = self.residual(delta)?;
        let n = math::norm(&r);
        if n == 0.0 {
            return Ok(None);
        }
        Ok(Some(math::scale(&self.sum_jac.t_matvec(&r)?, 1.0 / n)))
    }
}

/// `‖Σ_i J_i (h_i + δ)‖` over a class's in-batch samples.
pub fn perturbed_objective(
    jacobians: &[Jacobian],
    logit_grads: &[Vec<f64>],
    delta: &[f64],
) -> Result<f64> {
    let obj = ClassObjective::new(jacobians, logit_grads)?;
    if delta.len() != obj.num_classes() {
        return Err(Error::shape(obj.num_classes(), delta.len()));
    }
    obj.value(delta)
}

/// Result of a PGD solve: the final perturbation and every iterate after `δ⁰ = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdOutcome {
    pub delta: Vec<f64>,
    pub iterates: Vec<Vec<f64>>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign-step projected gradient ascent (positive) or descent (negative) of the
/// class objective over the ball `‖δ‖ ≤ ε_c`, starting from zero.
///
/// `sign(0) = 0`, and a zero objective produces a zero step.
pub fn lpg_pgd(
    objective: &ClassObjective,
    epsilon_c: f64,
    kappa: f64,
    steps: usize,
    direction: Direction,
) -> Result<PgdOutcome> {
    if !(epsilon_c >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "epsilon_c must be >= 0, got {epsilon_c}"
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidInput("PGD needs at least one step".into()));
    }
    if !(kappa >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "PGD step size must be >= 0, got {kappa}"
        )));
    }
    let c = objective.num_classes();
    let mut delta = vec![0.0; c];
    let mut iterates = Vec::with_capacity(steps);
    let dir = match direction {
        Direction::Positive => 1.0,
        Direction::Negative => -1.0,
    };
    for _ in 0..steps {
        if epsilon_c > 0.0 {
            if let Some(grad) = objective.gradient(&delta)? {
                for (d, g) in delta.iter_mut().zip(&grad) {
                    *d += dir * kappa * sign(*g);
                }
            }
        }
        delta = math::l2_project(&delta, epsilon_c)?;
        iterates.push(delta.clone());
    }
    Ok(PgdOutcome { delta, iterates })
}

/// Step size for a class bound under the configured rule.
pub fn pgd_kappa(step: PgdStep, epsilon_c: f64, steps: usize) -> f64 {
    match step {
        PgdStep::Fixed(k) => k,
        PgdStep::BoundOverSteps => epsilon_c / steps as f64,
    }
}

/// Everything a rule may look at for one mini-batch.
pub struct BatchContext<'a> {
    pub net: &'a Mlp,
    pub samples: &'a [Sample<'a>],
    pub caches: &'a [ForwardCache],
    /// unperturbed logit gradients `h_i`
    pub logit_grads: &'a [Vec<f64>],
}

impl BatchContext<'_> {
    /// Mean of `J_i · seed_i` over the batch, summed in batch order.
    pub fn mean_param_grad(&self, seeds: &[Vec<f64>]) -> Result<ParamGrad> {
        let mut g = ParamGrad::zeros(self.net.num_params());
        for (cache, seed) in self.caches.iter().zip(seeds) {
            self.net.backward_accumulate(cache, seed, &mut g)?;
        }
        let n = self.caches.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        Ok(g)
    }

    /// Batch positions of each class, in batch order.
    pub fn class_members(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); num_classes];
        for (i, &(_, y)) in self.samples.iter().enumerate() {
            members[y].push(i);
        }
        members
    }
}

/// What a rule hands back to the training step.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbed {
    /// leave everything as it is
    Identity,
    /// perturbed per-sample logit gradients, to be back-propagated
    Seeds(Vec<Vec<f64>>),
    /// transformed batch parameter gradient
    Grad(ParamGrad),
}

fn plan_entry(plan: &PerturbationPlan, class: usize) -> Result<(Direction, f64)> {
    match (plan.direction(class), plan.bound(class)) {
        (Some(d), Some(e)) => Ok((d, e)),
        _ => Err(Error::Config(format!(
            "class {class} is not covered by the perturbation plan ({} classes)",
            plan.num_classes()
        ))),
    }
}

/// Per-sample perturbed logit gradients under closed-form LPG.
pub fn closed_form_seeds(
    logit_grads: &[Vec<f64>],
    labels: &[usize],
    plan: &PerturbationPlan,
    scope: ClosedFormScope,
) -> Result<Vec<Vec<f64>>> {
    match scope {
        ClosedFormScope::PerSample => logit_grads
            .iter()
            .zip(labels)
            .map(|(h, &y)| {
                let (dir, eps) = plan_entry(plan, y)?;
                lpg_closed_form(h, eps, dir)
            })
            .collect(),
        ClosedFormScope::ClassMean => {
            let c = plan.num_classes();
            let width = logit_grads.first().map_or(0, Vec::len);
            let mut mean = vec![vec![0.0; width]; c];
            let mut n = vec![0usize; c];
            for (h, &y) in logit_grads.iter().zip(labels) {
                plan_entry(plan, y)?;
                math::axpy(1.0, h, &mut mean[y]);
                n[y] += 1;
            }
            let scales: Vec<f64> = (0..c)
                .map(|k| {
                    if n[k] == 0 {
                        return 1.0;
                    }
                    let norm = math::norm(&mean[k]) / n[k] as f64;
                    closed_form_scale(norm, plan.eps_c[k], plan.membership[k])
                })
                .collect();
            Ok(logit_grads
                .iter()
                .zip(labels)
                .map(|(h, &y)| math::scale(h, scales[y]))
                .collect())
        }
    }
}

/// Per-sample perturbed logit gradients under PGD-refined LPG: one shared `δ_c`
/// per class present in the batch.
pub fn pgd_seeds(
    ctx: &BatchContext<'_>,
    plan: &PerturbationPlan,
    steps: usize,
    step: PgdStep,
) -> Result<Vec<Vec<f64>>> {
    let c = ctx.net.num_classes();
    let mut seeds = ctx.logit_grads.to_vec();
    for (class, members) in ctx.class_members(c).iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let (dir, eps) = plan_entry(plan, class)?;
        if eps == 0.0 {
            continue;
        }
        let caches: Vec<&ForwardCache> = members.iter().map(|&i| &ctx.caches[i]).collect();
        let hs: Vec<&[f64]> = members
            .iter()
            .map(|&i| ctx.logit_grads[i].as_slice())
            .collect();
        let obj = ClassObjective::from_caches(ctx.net, &caches, &hs)?;
        let out = lpg_pgd(&obj, eps, pgd_kappa(step, eps, steps), steps, dir)?;
        for &i in members {
            math::axpy(1.0, &out.delta, &mut seeds[i]);
        }
    }
    Ok(seeds)
}

/// Dispatch one rule on a batch.
pub fn apply_method(
    method: &PerturbMethod,
    ctx: &BatchContext<'_>,
    plan: &PerturbationPlan,
    noise_rng: &mut Rng,
) -> Result<Perturbed> {
    let labels: Vec<usize> = ctx.samples.iter().map(|s| s.1).collect();
    if let Some(&y) = labels.iter().find(|&&y| y >= plan.num_classes()) {
        plan_entry(plan, y)?;
    }
    Ok(match *method {
        PerturbMethod::NoPerturb => Perturbed::Identity,
        PerturbMethod::Clip { tau_clip } => {
            Perturbed::Grad(clip_grad(&ctx.mean_param_grad(ctx.logit_grads)?, tau_clip))
        }
        PerturbMethod::Noise { sigma } => Perturbed::Grad(noise_grad(
            &ctx.mean_param_grad(ctx.logit_grads)?,
            sigma,
            noise_rng,
        )),
        PerturbMethod::Sam { rho } => {
            let g = ctx.mean_param_grad(ctx.logit_grads)?;
            Perturbed::Grad(sam_grad_from(ctx.net, ctx.samples, &g, rho)?)
        }
        PerturbMethod::LpgClosedForm { scope } => {
            Perturbed::Seeds(closed_form_seeds(ctx.logit_grads, &labels, plan, scope)?)
        }
        PerturbMethod::LpgPgd { steps, step } => {
            Perturbed::Seeds(pgd_seeds(ctx, plan, steps, step)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use crate::schedule::SplitMode;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_grad(&[3.0, 4.0], 1.0).0, vec![0.6, 0.8]);
        assert_eq!(clip_grad(&[3.0, 4.0], 10.0).0, vec![3.0, 4.0]);
        assert_eq!(clip_grad(&[0.0, 0.0], 1.0).0, vec![0.0, 0.0]);
    }

    #[test]
    fn noise_examples() {
        let g = [0.5, -1.0, 2.0];
        assert_eq!(noise_grad(&g, 0.0, &mut Rng::new(1)).0, g.to_vec());
        let a = noise_grad(&g, 0.3, &mut Rng::new(9));
        let b = noise_grad(&g, 0.3, &mut Rng::new(9));
        assert_eq!(a, b);
        assert_ne!(a.0, g.to_vec());
    }

    #[test]
    fn noise_variance_monte_carlo() {
        let g = vec![0.0; 1000];
        let mut rng = Rng::new(17);
        let mean: f64 = (0..1000)
            .map(|_| {
                let n = noise_grad(&g, 0.1, &mut rng);
                math::dot(&n, &n) / 1000.0
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean - 0.01).abs() <= 0.001, "{mean}");
    }

    #[test]
    fn closed_form_examples() {
        let h = [-0.5, 0.5];
        let out = lpg_closed_form(&h, 0.2, Direction::Positive).unwrap();
        let s = 1.0 + 0.2 / 0.5f64.sqrt();
        assert!((s - 1.28284).abs() < 1e-5);
        assert!(close(&out, &[-0.64142, 0.64142], 1e-5));
        assert_eq!(
            lpg_closed_form(&h, 0.0, Direction::Negative).unwrap(),
            h.to_vec()
        );
        let h = [0.3, -0.3, 0.0];
        let out = lpg_closed_form(&h, math::norm(&h), Direction::Negative).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        assert_eq!(
            lpg_closed_form(&[0.0, 0.0], 1.0, Direction::Positive).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(lpg_closed_form(&h, -1.0, Direction::Positive).is_err());
    }

    #[test]
    fn method_validation() {
        assert!(PerturbMethod::Clip { tau_clip: 0.0 }.validate().is_err());
        assert!(PerturbMethod::Sam { rho: -1.0 }.validate().is_err());
        assert!(PerturbMethod::Noise { sigma: 0.0 }.validate().is_ok());
        assert!(PerturbMethod::LpgPgd {
            steps: 0,
            step: PgdStep::BoundOverSteps
        }
        .validate()
        .is_err());
        assert!(PerturbMethod::LpgPgd {
            steps: 3,
            step: PgdStep::Fixed(0.0)
        }
        .validate()
        .is_err());
    }

    fn tiny_instance(seed: u64, classes: usize) -> (Mlp, ForwardCache, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let net = Mlp::init(&[3, 5, classes], &mut rng).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let (u, cache) = net.forward(&x).unwrap();
        let h = math::ce_logit_grad(&u, 0).unwrap();
        (net, cache, h)
    }

    #[test]
    fn objective_examples() {
        let (net, cache, h) = tiny_instance(3, 3);
        let j = net.assemble_jacobian(&cache).unwrap();
        let g = net.backward_from_logit_grad(&cache, &h).unwrap();
        let v0 = perturbed_objective(&[j.clone()], &[h.clone()], &[0.0; 3]).unwrap();
        assert!((v0 - g.norm()).abs() <= 1e-12);
        let neg: Vec<f64> = h.iter().map(|v| -v).collect();
        assert!(perturbed_objective(&[j.clone()], &[h.clone()], &neg).unwrap() <= 1e-15);
        let delta = [0.1, -0.3, 0.05];
        let seed: Vec<f64> = h.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let direct = net.backward_from_logit_grad(&cache, &seed).unwrap().norm();
        let v = perturbed_objective(&[j.clone()], &[h.clone()], &delta).unwrap();
        assert!((v - direct).abs() <= 1e-10);
        assert!(perturbed_objective(&[], &[], &delta).is_err());
    }

    #[test]
    fn objective_from_caches_matches_jacobians() {
        let mut rng = Rng::new(21);
        let net = Mlp::init(&[3, 4, 3], &mut rng).unwrap();
        let mut caches = Vec::new();
        let mut hs = Vec::new();
        for _ in 0..4 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let (u, cache) = net.forward(&x).unwrap();
            hs.push(math::ce_logit_grad(&u, 1).unwrap());
            caches.push(cache);
        }
        let jacs: Vec<Jacobian> = caches
            .iter()
            .map(|c| net.assemble_jacobian(c).unwrap())
            .collect();
        let a = ClassObjective::new(&jacs, &hs).unwrap();
        let cref: Vec<&ForwardCache> = caches.iter().collect();
        let href: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
        let b = ClassObjective::from_caches(&net, &cref, &href).unwrap();
        let d = [0.2, -0.1, 0.4];
        assert!((a.value(&d).unwrap() - b.value(&d).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pgd_degenerate_and_projection() {
        let (net, cache, h) = tiny_instance(5, 3);
        let obj = ClassObjective::new(&[net.assemble_jacobian(&cache).unwrap()], &[h]).unwrap();
        let out = lpg_pgd(&obj, 0.0, 0.1, 3, Direction::Positive).unwrap();
        assert_eq!(out.delta, vec![0.0; 3]);
        let out = lpg_pgd(&obj, 0.2, 10.0, 1, Direction::Positive).unwrap();
        assert!((math::norm(&out.delta) - 0.2).abs() <= 1e-12);
        assert!(lpg_pgd(&obj, 0.2, 0.1, 0, Direction::Positive).is_err());
    }

    #[test]
    fn pgd_zero_objective_takes_no_step() {
        let jac = Jacobian(Matrix::zeros(4, 2));
        let obj = ClassObjective::new(&[jac], &[vec![0.5, -0.5]]).unwrap();
        let out = lpg_pgd(&obj, 1.0, 0.3, 3, Direction::Positive).unwrap();
        assert_eq!(out.delta, vec![0.0, 0.0]);
    }

    #[test]
    fn pgd_first_step_usually_ascends() {
        let mut ascents = 0;
        for trial in 0..100 {
            let (net, cache, h) = tiny_instance(100 + trial, 3);
            let obj = ClassObjective::new(&[net.assemble_jacobian(&cache).unwrap()], &[h]).unwrap();
            let eps = 0.5;
            let out = lpg_pgd(&obj, eps, eps / 10.0, 1, Direction::Positive).unwrap();
            if obj.value(&out.delta).unwrap() >= obj.value(&[0.0; 3]).unwrap() {
                ascents += 1;
            }
        }
        assert!(ascents >= 90, "{ascents}");
    }

    #[test]
    fn sam_restores_and_vanishes_with_rho() {
        let mut rng = Rng::new(8);
        let net = Mlp::init(&[3, 6, 3], &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.normal()).collect())
            .collect();
        let batch: Vec<Sample<'_>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| (x.as_slice(), i % 3))
            .collect();
        let before = net.params().to_vec();
        let (_, g) = net.batch_loss_grad(&batch).unwrap();
        let s = sam_grad(&net, &batch, 1e-8).unwrap();
        assert_eq!(net.params(), &before[..]);
        let diff = math::norm(&math::sub(&s, &g));
        assert!(diff <= 1e-6 * g.norm(), "{diff}");
    }

    fn plan_of(dirs: Vec<Direction>, eps: Vec<f64>) -> PerturbationPlan {
        PerturbationPlan {
            split: SplitMode::Frequency,
            stat: vec![0.0; dirs.len()],
            membership: dirs,
            eps_c: eps,
            tau_raw: 0.0,
            tau: 0.0,
            epsilon: 0.0,
            delta_epsilon: 0.0,
        }
    }

    #[test]
    fn class_mean_scope_scales_uniformly() {
        let hs = vec![vec![-0.6, 0.6], vec![-0.2, 0.2], vec![0.3, -0.3]];
        let labels = [0, 0, 1];
        let plan = plan_of(
            vec![Direction::Positive, Direction::Negative],
            vec![0.1, 0.1],
        );
        let seeds = closed_form_seeds(&hs, &labels, &plan, ClosedFormScope::ClassMean).unwrap();
        let s0 = seeds[0][0] / hs[0][0];
        assert!((seeds[1][0] / hs[1][0] - s0).abs() < 1e-15);
        let mean_norm = math::norm(&[-0.4, 0.4]);
        assert!((s0 - (1.0 + 0.1 / mean_norm)).abs() < 1e-12);
        assert!(seeds[2][0].abs() < hs[2][0].abs());
    }

    #[test]
    fn missing_class_is_config_error() {
        let hs = vec![vec![-0.6, 0.6, 0.0]];
        let plan = plan_of(vec![Direction::Positive], vec![0.1]);
        assert!(matches!(
            closed_form_seeds(&hs, &[2], &plan, ClosedFormScope::PerSample),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn clip_bounds_norm_and_keeps_direction(
            g in prop::collection::vec(-10.0f64..10.0, 1..20),
            tau in 0.01f64..5.0,
        ) {
            let out = clip_grad(&g, tau);
            prop_assert!(out.norm() <= tau + 1e-12 || out.0 == g);
            if math::norm(&g) > 0.0 {
                prop_assert!((math::cosine(&out, &g).unwrap() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn closed_form_changes_norm_exactly(
            h in prop::collection::vec(-1.0f64..1.0, 2..10),
            alpha in 0.0f64..2.0,
            positive in any::<bool>(),
        ) {
            let n = math::norm(&h);
            prop_assume!(n > 1e-6);
            let dir = if positive { Direction::Positive } else { Direction::Negative };
            let out = lpg_closed_form(&h, alpha, dir).unwrap();
            let m = math::norm(&out);
            if positive {
                prop_assert!((m - n - alpha).abs() <= 1e-12);
            } else if alpha < n {
                prop_assert!((m - n + alpha).abs() <= 1e-12);
            } else {
                prop_assert_eq!(m, 0.0);
            }
            if m > 0.0 {
                prop_assert!((math::cosine(&out, &h).unwrap() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
