//! Minimal ReLU multilayer perceptron.
//!
//! Parameters live in one flat vector. The flattening order is layer-major and,
//! within a layer, the weight matrix (row-major, shape `out × in`) comes before
//! the bias vector. [`ParamGrad`], [`Momentum`] and the checkpoint format all
//! share this order.
//!
//! The backward pass takes an arbitrary logit cotangent, so a perturbed logit
//! gradient can be pushed into parameter space exactly like the loss gradient.
//! ReLU's derivative at exactly zero is taken to be 0.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{self, Matrix, Rng};

/// One labelled input.
pub type Sample<'a> = (&'a [f64], usize);

/// Version word written at the start of every checkpoint file.
pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
    /// (weight offset, bias offset) per layer
    offsets: Vec<(usize, usize)>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: Vec<usize>,
    input: Vec<f64>,
    /// Pre-activations per layer; the last entry is the logit vector.
    pre: Vec<Vec<f64>>,
    /// ReLU outputs of the hidden layers.
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }

    /// Smallest |z| over all hidden pre-activations (infinite without hidden layers).
    pub fn min_hidden_margin(&self) -> f64 {
        self.pre[..self.pre.len() - 1]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

/// Flat parameter-space gradient, in the network's flattening order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad(pub Vec<f64>);

impl ParamGrad {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        math::norm(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParamGrad {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamGrad {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Per-sample Jacobian of the logits w.r.t. the parameters, shape `|W| × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian(pub Matrix);

impl Jacobian {
    pub fn num_params(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    /// `J · h`
    pub fn apply(&self, h: &[f64]) -> Result<ParamGrad> {
        Ok(ParamGrad(self.0.matvec(h)?))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// SGD velocity buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(num_params: usize) -> Self {
        Self {
            velocity: vec![0.0; num_params],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "an MLP needs at least input and output dims, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidInput(format!(
            "layer dims must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

fn layer_offsets(dims: &[usize]) -> (Vec<(usize, usize)>, usize) {
    let mut offsets = Vec::with_capacity(dims.len() - 1);
    let mut at = 0;
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        offsets.push((at, at + fan_in * fan_out));
        at += fan_in * fan_out + fan_out;
    }
    (offsets, at)
}

/// `Σ (m_l · m_{l-1} + m_l)` for the given layer dims.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Network with all parameters zero.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        validate_dims(dims)?;
        let (offsets, n) = layer_offsets(dims);
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; n],
            offsets,
        })
    }

    /// He-uniform initialisation: weights of layer `l` are drawn from
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))` in flattening order; biases are zero.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        for l in 0..net.num_layers() {
            let bound = (6.0 / dims[l] as f64).sqrt();
            for w in net.weight_mut(l) {
                *w = (2.0 * rng.uniform() - 1.0) * bound;
            }
        }
        Ok(net)
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        if params.len() != net.params.len() {
            return Err(Error::shape(
                format!("{} parameters", net.params.len()),
                format!("{} parameters", params.len()),
            ));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Replace the whole parameter vector (same length required).
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// Flat slice of layer `l`'s weights, row-major `dims[l+1] × dims[l]`.
    pub fn weight(&self, l: usize) -> &[f64] {
        let (w, b) = self.offsets[l];
        &self.params[w..b]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let (w, b) = self.offsets[l];
        &mut self.params[w..b]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let (_, b) = self.offsets[l];
        &self.params[b..b + self.dims[l + 1]]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (_, b) = self.offsets[l];
        let n = self.dims[l + 1];
        &mut self.params[b..b + n]
    }

    pub fn weight_matrix(&self, l: usize) -> Matrix {
        Matrix::from_vec(self.dims[l + 1], self.dims[l], self.weight(l).to_vec())
            .expect("layer slice matches dims")
    }

    /// Offset of the first weight / first bias of layer `l` in the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        self.offsets[l]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(
                format!("input of length {}", self.input_dim()),
                format!("length {}", x.len()),
            ));
        }
        Ok(())
    }

    fn affine(&self, l: usize, a: &[f64]) -> Vec<f64> {
        let cols = self.dims[l];
        let w = self.weight(l);
        self.bias(l)
            .iter()
            .enumerate()
            .map(|(i, b)| math::dot(&w[i * cols..(i + 1) * cols], a) + b)
            .collect()
    }

    /// Logits `f(x; W)` together with the cache needed for backward passes.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        let layers = self.num_layers();
        let mut pre = Vec::with_capacity(layers);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers - 1);
        for l in 0..layers {
            let a: &[f64] = if l == 0 { x } else { &post[l - 1] };
            let z = self.affine(l, a);
            if l + 1 < layers {
                post.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        let u = pre.last().unwrap().clone();
        Ok((
            u,
            ForwardCache {
                dims: self.dims.clone(),
                input: x.to_vec(),
                pre,
                post,
            },
        ))
    }

    /// Logits only.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in 0..self.num_layers() {
            let mut z = self.affine(l, &a);
            if l + 1 < self.num_layers() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.dims != self.dims {
            return Err(Error::InvalidState(format!(
                "forward cache built for dims {:?}, network has {:?}",
                cache.dims, self.dims
            )));
        }
        Ok(())
    }

    /// Adds `J · seed` into `out` (length `|W|`).
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        seed: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        self.check_cache(cache)?;
        if seed.len() != self.num_classes() {
            return Err(Error::shape(
                format!("seed of length {}", self.num_classes()),
                format!("length {}", seed.len()),
            ));
        }
        if out.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), out.len()));
        }
        let mut delta = seed.to_vec();
        for l in (0..self.num_layers()).rev() {
            let a_prev: &[f64] = if l == 0 {
                &cache.input
            } else {
                &cache.post[l - 1]
            };
            let cols = self.dims[l];
            let (wo, bo) = self.offsets[l];
            for (i, &d) in delta.iter().enumerate() {
                let row = &mut out[wo + i * cols..wo + (i + 1) * cols];
                for (g, a) in row.iter_mut().zip(a_prev) {
                    *g += d * a;
                }
                out[bo + i] += d;
            }
            if l > 0 {
                let w = self.weight(l);
                let z_prev = &cache.pre[l - 1];
                let mut next = vec![0.0; cols];
                for (i, &d) in delta.iter().enumerate() {
                    math::axpy(d, &w[i * cols..(i + 1) * cols], &mut next);
                }
                for (n, z) in next.iter_mut().zip(z_prev) {
                    if *z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        Ok(())
    }

    /// Parameter gradient when the logit cotangent is `seed`, i.e. `J · seed`.
    pub fn backward_from_logit_grad(
        &self,
        cache: &ForwardCache,
        seed: &[f64],
    ) -> Result<ParamGrad> {
        let mut g = ParamGrad::zeros(self.num_params());
        self.backward_accumulate(cache, seed, &mut g)?;
        Ok(g)
    }

    /// Full `|W| × C` Jacobian, one reverse pass per unit seed.
    pub fn assemble_jacobian(&self, cache: &ForwardCache) -> Result<Jacobian> {
        let c = self.num_classes();
        let mut jac = Matrix::zeros(self.num_params(), c);
        let mut seed = vec![0.0; c];
        for j in 0..c {
            seed[j] = 1.0;
            let col = self.backward_from_logit_grad(cache, &seed)?;
            jac.set_col(j, &col);
            seed[j] = 0.0;
        }
        Ok(Jacobian(jac))
    }

    /// Cross-entropy loss gradient for one sample.
    pub fn loss_grad(&self, x: &[f64], y: usize) -> Result<(f64, ParamGrad)> {
        let (u, cache) = self.forward(x)?;
        let loss = math::cross_entropy_loss(&u, y)?;
        let h = math::ce_logit_grad(&u, y)?;
        Ok((loss, self.backward_from_logit_grad(&cache, &h)?))
    }

    /// Mean loss and mean parameter gradient over a batch. Per-sample gradients
    /// are summed in batch order and then divided by the batch size.
    pub fn batch_loss_grad(&self, batch: &[Sample<'_>]) -> Result<(f64, ParamGrad)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut g = ParamGrad::zeros(self.num_params());
        let mut loss = 0.0;
        for &(x, y) in batch {
            let (u, cache) = self.forward(x)?;
            loss += math::cross_entropy_loss(&u, y)?;
            let h = math::ce_logit_grad(&u, y)?;
            self.backward_accumulate(&cache, &h, &mut g)?;
        }
        let n = batch.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        Ok((loss / n, g))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Binary little-endian layout: version `u64`, number of dims `u64`, each dim
    /// as `u64`, parameter count `u64`, then every parameter as `f64`.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dims.len() as u64).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        fn word<R: Read>(r: &mut R, what: &str) -> Result<[u8; 8]> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|e| Error::parse(what, format!("truncated checkpoint: {e}")))?;
            Ok(b)
        }
        let version = u64::from_le_bytes(word(r, "version")?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(
                "version",
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let n_dims = u64::from_le_bytes(word(r, "dim count")?) as usize;
        if n_dims > 1 << 16 {
            return Err(Error::parse(
                "dim count",
                format!("implausible value {n_dims}"),
            ));
        }
        let dims = (0..n_dims)
            .map(|i| Ok(u64::from_le_bytes(word(r, &format!("dim {i}"))?) as usize))
            .collect::<Result<Vec<_>>>()?;
        validate_dims(&dims)?;
        let n = u64::from_le_bytes(word(r, "parameter count")?) as usize;
        if n != param_count(&dims) {
            return Err(Error::parse(
                "parameter count",
                format!("{n} does not match dims {dims:?}"),
            ));
        }
        let params = (0..n)
            .map(|i| Ok(f64::from_le_bytes(word(r, &format!("parameter {i}"))?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(&dims, params)
    }
}

/// One SGD-with-momentum step, applied in place:
///
/// ```text
/// v <- momentum * v + (grad + weight_decay * w)
/// w <- w - lr * v
/// ```
///
/// A non-finite gradient aborts the step with nothing modified.
pub fn sgd_step(
    net: &mut Mlp,
    grad: &[f64],
    state: &mut Momentum,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "sgd needs lr > 0, 0 <= momentum < 1, weight_decay >= 0 (got {lr}, {momentum}, {weight_decay})"
        )));
    }
    if grad.len() != net.num_params() || state.velocity.len() != net.num_params() {
        return Err(Error::shape(
            net.num_params(),
            format!("grad {} / velocity {}", grad.len(), state.velocity.len()),
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at parameter {i}"
        )));
    }
    for ((w, v), g) in net.params.iter_mut().zip(&mut state.velocity).zip(grad) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
    Ok(())
}
