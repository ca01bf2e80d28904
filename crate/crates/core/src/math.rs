//! Dense numeric kernels and cross-entropy primitives.
//!
//! Everything here is `f64`. Vectors are plain slices; [`Matrix`] is a
//! row-major dense array used for weights, Jacobians and Hessians.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    format!("row {i} of length {cols}"),
                    format!("length {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    pub fn set_col(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = *v;
        }
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape(
                format!("vector of length {}", self.cols),
                format!("length {}", v.len()),
            ));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::shape(
                format!("vector of length {}", self.rows),
                format!("length {}", v.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            axpy(vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// Elementwise `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Cosine similarity; `None` when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot(a, b) / (na * nb))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_logits(u: &[f64]) -> Result<()> {
    if u.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 logits, got {}",
            u.len()
        )));
    }
    if let Some(i) = u.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit at {i}")));
    }
    Ok(())
}

fn check_class(u: &[f64], y: usize) -> Result<()> {
    if y >= u.len() {
        return Err(Error::Index {
            index: y,
            len: u.len(),
        });
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(u: &[f64]) -> Result<Vec<f64>> {
    check_logits(u)?;
    let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = p.iter().sum();
    for pi in &mut p {
        *pi /= z;
    }
    Ok(p)
}

/// `-log softmax(u)[y]`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy_loss(u: &[f64], y: usize) -> Result<f64> {
    check_class(u, y)?;
    let p = softmax(u)?;
    Ok(-p[y].max(PROB_FLOOR).ln())
}

/// Gradient of the cross-entropy loss w.r.t. the logits: `softmax(u) - e_y`.
pub fn ce_logit_grad(u: &[f64], y: usize) -> Result<Vec<f64>> {
    check_class(u, y)?;
    let mut h = softmax(u)?;
    h[y] -= 1.0;
    Ok(h)
}

/// Hessian of the cross-entropy loss w.r.t. the logits: `diag(p) - p pᵀ`.
///
/// Independent of the label.
pub fn ce_logit_hessian(u: &[f64]) -> Result<Matrix> {
    let p = softmax(u)?;
    let c = p.len();
    let mut h = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            h[(i, j)] = if i == j {
                p[i] - p[i] * p[i]
            } else {
                -p[i] * p[j]
            };
        }
    }
    Ok(h)
}

/// Euclidean projection onto the closed ℓ2 ball of radius `r`.
pub fn l2_project(v: &[f64], r: f64) -> Result<Vec<f64>> {
    if !(r >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "ball radius must be >= 0, got {r}"
        )));
    }
    let n = norm(v);
    if n <= r {
        return Ok(v.to_vec());
    }
    let mut out: Vec<f64> = v.iter().map(|x| x * r / n).collect();
    // rounding in r/n can leave the result a few ulps outside the ball
    while norm(&out) > r {
        for x in &mut out {
            *x *= 1.0 - 2.0 * f64::EPSILON;
        }
    }
    Ok(out)
}

/// Deterministic random number generator.
///
/// Backed by ChaCha8 with a 64-bit seed. Independent per-purpose streams are
/// obtained with [`Rng::substream`]; a substream depends only on the seed and
/// its name path, never on how much of the parent stream has been consumed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(state, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator for a named purpose (`"data"`, `"init"`, `"noise"`, ...).
    pub fn substream(&self, name: &str) -> Rng {
        let h = fnv1a(
            fnv1a(FNV_OFFSET, &self.stream.to_le_bytes()),
            name.as_bytes(),
        );
        Self::with_stream(self.seed, h)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(self)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        rand::Rng::sample(self, rand_distr::StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(self, 0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        rand::seq::SliceRandom::shuffle(items, self);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::RngCore;
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[1.0, 1.0, 1.0]).unwrap();
        assert!(p.iter().all(|x| close(*x, 1.0 / 3.0, 1e-15)));
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15) && close(p[1], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let p = softmax(&[1000.0, 0.0, -1000.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(close(p.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(close(
            cross_entropy_loss(&[0.0, 0.0], 0).unwrap(),
            std::f64::consts::LN_2,
            1e-15
        ));
        let expect = (1.0 + (-10f64).exp()).ln();
        let got = cross_entropy_loss(&[10.0, 0.0], 0).unwrap();
        assert!((got - expect).abs() / expect < 1e-10, "{got} vs {expect}");
        assert!((got - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_index_error() {
        assert!(matches!(
            cross_entropy_loss(&[0.0, 0.0], 2),
            Err(Error::Index { index: 2, len: 2 })
        ));
        assert!(matches!(
            ce_logit_grad(&[0.0, 0.0], 5),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_floor_avoids_infinity() {
        let l = cross_entropy_loss(&[0.0, 800.0], 0).unwrap();
        assert!(l.is_finite());
        assert!(l > 690.0);
    }

    #[test]
    fn logit_grad_examples() {
        let h = ce_logit_grad(&[0.0, 0.0], 0).unwrap();
        assert_eq!(h, vec![-0.5, 0.5]);
        let h = ce_logit_grad(&[20.0, 0.0], 0).unwrap();
        assert!(h.iter().all(|x| x.abs() <= 1e-8));
    }

    #[test]
    fn hessian_example() {
        let h = ce_logit_hessian(&[0.0, 0.0]).unwrap();
        assert_eq!(h.data(), &[0.25, -0.25, -0.25, 0.25]);
    }

    #[test]
    fn project_examples() {
        assert_eq!(l2_project(&[3.0, 4.0], 1.0).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_project(&[0.1, 0.0], 1.0).unwrap(), vec![0.1, 0.0]);
        assert_eq!(l2_project(&[3.0, -1.0], 0.0).unwrap(), vec![0.0, 0.0]);
        assert!(l2_project(&[1.0], -1.0).is_err());
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(m.matvec(&[1.0, -1.0]).unwrap(), vec![-1.0, -1.0, -1.0]);
        assert_eq!(m.t_matvec(&[1.0, 0.0, 1.0]).unwrap(), vec![6.0, 8.0]);
        assert_eq!(m.transpose().row(1), &[2.0, 4.0, 6.0]);
        assert!(m.matvec(&[1.0]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn rng_streams() {
        let a: Vec<u64> = {
            let mut r = Rng::new(7);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(7);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);

        let root = Rng::new(7);
        let mut consumed = Rng::new(7);
        consumed.next_u64();
        let mut s1 = root.substream("noise");
        let mut s2 = consumed.substream("noise");
        assert_eq!(s1.next_u64(), s2.next_u64());
        let mut other = root.substream("data");
        assert_ne!(root.substream("noise").next_u64(), other.next_u64());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            u in prop::collection::vec(-50.0f64..50.0, 2..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&u).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|x| *x > 0.0));
            let shifted: Vec<f64> = u.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300).max(1.0));
            }
        }

        #[test]
        fn logit_grad_sums_to_zero(
            u in prop::collection::vec(-20.0f64..20.0, 2..10),
            y_seed in 0usize..100,
        ) {
            let y = y_seed % u.len();
            let h = ce_logit_grad(&u, y).unwrap();
            prop_assert!(h.iter().sum::<f64>().abs() <= 1e-12);
            prop_assert!(h[y] < 0.0 || h[y] == 0.0);
            for (j, v) in h.iter().enumerate() {
                if j != y {
                    prop_assert!(*v >= 0.0);
                }
            }
        }

        #[test]
        fn hessian_rows_sum_to_zero_and_symmetric(u in prop::collection::vec(-10.0f64..10.0, 2..8)) {
            let h = ce_logit_hessian(&u).unwrap();
            let c = u.len();
            for i in 0..c {
                prop_assert!(h.row(i).iter().sum::<f64>().abs() <= 1e-12);
                for j in 0..c {
                    prop_assert_eq!(h[(i, j)], h[(j, i)]);
                }
            }
        }

        #[test]
        fn projection_is_idempotent_and_bounded(
            v in prop::collection::vec(-100.0f64..100.0, 1..16),
            r in 0.0f64..50.0,
        ) {
            let p = l2_project(&v, r).unwrap();
            prop_assert!(norm(&p) <= r + 1e-12);
            let pp = l2_project(&p, r).unwrap();
            prop_assert_eq!(p, pp);
        }
    }
}
