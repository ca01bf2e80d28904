//! Synthetic datasets: balanced Gaussian mixtures, exponential long-tail
//! subsampling and symmetric label noise, plus the CSV file format.
//!
//! File format (text, `.` as decimal separator):
//!
//! ```text
//! # C=<int> d=<int> N=<int> has_clean=<0|1>
//! f_1,...,f_d,label[,clean_label]
//! ```
//!
//! Features are written with Rust's shortest round-trip `f64` formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{Matrix, Rng};

/// Symmetric noise rates used in the standard noisy-label protocol.
pub const NOISE_RATE_PRESETS: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    clean_labels: Option<Vec<usize>>,
    num_classes: usize,
    class_counts: Vec<usize>,
}

fn histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    counts
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        clean_labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidInput(
                "dataset needs at least one class".into(),
            ));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels", features.rows()),
                format!("{} labels", labels.len()),
            ));
        }
        let check = |ls: &[usize]| -> Result<()> {
            match ls.iter().find(|&&y| y >= num_classes) {
                Some(&y) => Err(Error::Index {
                    index: y,
                    len: num_classes,
                }),
                None => Ok(()),
            }
        };
        check(&labels)?;
        if let Some(clean) = &clean_labels {
            if clean.len() != labels.len() {
                return Err(Error::shape(
                    format!("{} clean labels", labels.len()),
                    format!("{} clean labels", clean.len()),
                ));
            }
            check(clean)?;
        }
        let class_counts = histogram(&labels, num_classes);
        Ok(Self {
            features,
            labels,
            clean_labels,
            num_classes,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clean_labels(&self) -> Option<&[usize]> {
        self.clean_labels.as_deref()
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Labels to score predictions against: clean labels when present.
    pub fn true_labels(&self) -> &[usize] {
        self.clean_labels.as_deref().unwrap_or(&self.labels)
    }

    /// Fraction of samples whose label differs from the clean label.
    pub fn noise_fraction(&self) -> Option<f64> {
        let clean = self.clean_labels.as_ref()?;
        if self.is_empty() {
            return Some(0.0);
        }
        let flipped = clean
            .iter()
            .zip(&self.labels)
            .filter(|(a, b)| a != b)
            .count();
        Some(flipped as f64 / self.len() as f64)
    }

    /// Classes that had at least one sample relabelled away from them.
    pub fn noisy_classes(&self) -> Vec<usize> {
        let Some(clean) = &self.clean_labels else {
            return Vec::new();
        };
        let mut hit = vec![false; self.num_classes];
        for (c, y) in clean.iter().zip(&self.labels) {
            if c != y {
                hit[*c] = true;
            }
        }
        (0..self.num_classes).filter(|c| hit[*c]).collect()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.x(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let clean = self
            .clean_labels
            .as_ref()
            .map(|c| indices.iter().map(|&i| c[i]).collect());
        Self::new(
            Matrix::from_vec(indices.len(), d, data)?,
            labels,
            clean,
            self.num_classes,
        )
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        let has_clean = self.clean_labels.is_some();
        writeln!(
            s,
            "# C={} d={} N={} has_clean={}",
            self.num_classes,
            self.dim(),
            self.len(),
            u8::from(has_clean)
        )
        .unwrap();
        for i in 0..self.len() {
            for f in self.x(i) {
                write!(s, "{f},").unwrap();
            }
            write!(s, "{}", self.labels[i]).unwrap();
            if let Some(clean) = &self.clean_labels {
                write!(s, ",{}", clean[i]).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("line 1", "empty file, missing header"))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| Error::parse("line 1", "header must start with '# '"))?;
        let mut fields = [None; 4];
        const KEYS: [&str; 4] = ["C", "d", "N", "has_clean"];
        for tok in header.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::parse("line 1", format!("malformed header field '{tok}'")))?;
            let slot = KEYS
                .iter()
                .position(|key| *key == k)
                .ok_or_else(|| Error::parse("line 1", format!("unknown header field '{k}'")))?;
            let n: usize = v.parse().map_err(|_| {
                Error::parse(
                    "line 1",
                    format!("header field {k} is not an integer: '{v}'"),
                )
            })?;
            fields[slot] = Some(n);
        }
        let get = |i: usize| {
            fields[i]
                .ok_or_else(|| Error::parse("line 1", format!("missing header field {}", KEYS[i])))
        };
        let (c, d, n, has_clean) = (get(0)?, get(1)?, get(2)?, get(3)?);
        if has_clean > 1 {
            return Err(Error::parse("line 1", "has_clean must be 0 or 1"));
        }
        let has_clean = has_clean == 1;
        let width = d + 1 + usize::from(has_clean);

        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut clean = has_clean.then(|| Vec::with_capacity(n));
        for (idx, line) in lines {
            let loc = format!("line {}", idx + 1);
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != width {
                return Err(Error::parse(
                    loc,
                    format!("expected {width} fields for d={d}, found {}", parts.len()),
                ));
            }
            for p in &parts[..d] {
                let v: f64 = p
                    .parse()
                    .map_err(|_| Error::parse(&loc, format!("bad feature value '{p}'")))?;
                if !v.is_finite() {
                    return Err(Error::parse(&loc, format!("non-finite feature '{p}'")));
                }
                data.push(v);
            }
            let parse_label = |s: &str, what: &str| -> Result<usize> {
                let y: usize = s
                    .parse()
                    .map_err(|_| Error::parse(&loc, format!("bad {what} '{s}'")))?;
                if y >= c {
                    return Err(Error::parse(
                        &loc,
                        format!("{what} {y} out of range for C={c}"),
                    ));
                }
                Ok(y)
            };
            labels.push(parse_label(parts[d], "label")?);
            if let Some(clean) = clean.as_mut() {
                clean.push(parse_label(parts[d + 1], "clean label")?);
            }
        }
        if labels.len() != n {
            return Err(Error::parse(
                "N",
                format!("header says N={n} but file has {} rows", labels.len()),
            ));
        }
        Self::new(Matrix::from_vec(n, d, data)?, labels, clean, c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?)
    }
}

/// Class means of the Gaussian mixture.
///
/// With `d >= C` class `c` sits at `(separation/√2)·e_c` (a scaled simplex);
/// otherwise the means are spread evenly on a circle in the first two
/// coordinates. Either way every pair of means is at least `separation` apart.
pub fn mixture_means(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut m = vec![0.0; dim];
            if dim >= num_classes {
                m[c] = separation / std::f64::consts::SQRT_2;
            } else {
                let r = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
                let angle = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                m[0] = r * angle.cos();
                m[1] = r * angle.sin();
            }
            m
        })
        .collect()
}

/// Balanced mixture of unit-variance isotropic Gaussians, stored class by class.
pub fn gen_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if num_classes < 2 || dim < 2 || n_per_class == 0 {
        return Err(Error::InvalidInput(format!(
            "mixture needs C >= 2, d >= 2, n_per_class >= 1 (got {num_classes}, {dim}, {n_per_class})"
        )));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::InvalidInput(format!(
            "separation must be positive and finite, got {separation}"
        )));
    }
    let means = mixture_means(num_classes, dim, separation);
    let n = num_classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(mean.iter().map(|m| m + rng.normal()));
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, None, num_classes)
}

/// Per-class counts of the exponential long-tail profile:
/// `round(n_max · ratio^(-c/(C-1)))`, clamped below at 1.
pub fn longtail_counts(num_classes: usize, n_max: usize, ratio: f64) -> Vec<usize> {
    (0..num_classes)
        .map(|c| {
            let frac = if num_classes > 1 {
                c as f64 / (num_classes - 1) as f64
            } else {
                0.0
            };
            let n = (n_max as f64 * ratio.powf(-frac)).round() as usize;
            n.max(1)
        })
        .collect()
}

/// Subsample a balanced dataset to the exponential long-tail profile
/// (class 0 keeps everything, class `C-1` keeps `n_max / ratio`).
///
/// Kept samples retain their original relative order.
pub fn gen_longtail(base: &Dataset, ratio: f64, rng: &mut Rng) -> Result<Dataset> {
    if !(ratio >= 1.0) || !ratio.is_finite() {
        return Err(Error::InvalidInput(format!(
            "imbalance ratio must be >= 1, got {ratio}"
        )));
    }
    let counts = base.class_counts();
    let n_max = counts[0];
    if counts.iter().any(|&n| n != n_max) {
        return Err(Error::InvalidInput(format!(
            "long-tail subsampling needs a balanced base, got counts {counts:?}"
        )));
    }
    let c = base.num_classes();
    let target = longtail_counts(c, n_max, ratio);
    for (class, &n) in target.iter().enumerate() {
        if n == 1 && n_max as f64 * ratio.powf(-(class as f64) / (c - 1).max(1) as f64) < 0.5 {
            log::warn!("long-tail profile gives class {class} zero samples; keeping one");
        }
    }
    let mut keep = Vec::new();
    for (class, &n_keep) in target.iter().enumerate() {
        let mut idx: Vec<usize> = (0..base.len())
            .filter(|&i| base.labels()[i] == class)
            .collect();
        rng.shuffle(&mut idx);
        idx.truncate(n_keep);
        keep.extend(idx);
    }
    keep.sort_unstable();
    base.subset(&keep)
}

/// Flip each eligible label with probability `rate` to a uniformly chosen
/// *different* class.
///
/// Eligibility is decided by the sample's clean label; with `class_subset` only
/// samples whose clean label is listed can be flipped. Clean labels are kept
/// (or carried over if the input already had them).
pub fn inject_symmetric_noise(
    ds: &Dataset,
    rate: f64,
    rng: &mut Rng,
    class_subset: Option<&[usize]>,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!(
            "noise rate must be in [0,1], got {rate}"
        )));
    }
    let c = ds.num_classes();
    if c < 2 && rate > 0.0 {
        return Err(Error::InvalidInput(
            "label noise needs at least two classes".into(),
        ));
    }
    let mut eligible = vec![class_subset.is_none(); c];
    for &k in class_subset.unwrap_or(&[]) {
        if k >= c {
            return Err(Error::Index { index: k, len: c });
        }
        eligible[k] = true;
    }
    let clean = ds.true_labels().to_vec();
    let mut labels = ds.labels().to_vec();
    for (label, &truth) in labels.iter_mut().zip(&clean) {
        if !eligible[truth] {
            continue;
        }
        if rng.uniform() < rate {
            let draw = rng.below(c - 1);
            *label = if draw >= truth { draw + 1 } else { draw };
        }
    }
    Dataset::new(ds.features().clone(), labels, Some(clean), c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture(seed: u64) -> Dataset {
        gen_gaussian_mixture(10, 12, 100, 3.0, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn mixture_is_balanced_and_deterministic() {
        let a = mixture(1);
        assert_eq!(a.class_counts(), &[100; 10]);
        assert_eq!(a.to_csv_string(), mixture(1).to_csv_string());
        assert_ne!(a.to_csv_string(), mixture(2).to_csv_string());
    }

    #[test]
    fn mixture_means_respect_separation() {
        for (c, d) in [(10, 12), (10, 2), (3, 2), (2, 2)] {
            let m = mixture_means(c, d, 2.5);
            for i in 0..c {
                for j in i + 1..c {
                    let dist = crate::math::norm(&crate::math::sub(&m[i], &m[j]));
                    assert!(dist >= 2.5 - 1e-9, "C={c} d={d}: {dist}");
                }
            }
        }
    }

    #[test]
    fn mixture_rejects_bad_args() {
        let mut rng = Rng::new(0);
        assert!(gen_gaussian_mixture(1, 3, 10, 1.0, &mut rng).is_err());
        assert!(gen_gaussian_mixture(3, 1, 10, 1.0, &mut rng).is_err());
        assert!(gen_gaussian_mixture(3, 3, 0, 1.0, &mut rng).is_err());
        assert!(gen_gaussian_mixture(3, 3, 5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn far_apart_classes_are_linearly_separable() {
        let ds = gen_gaussian_mixture(2, 3, 200, 1e3, &mut Rng::new(4)).unwrap();
        let means = mixture_means(2, 3, 1e3);
        // nearest-mean rule is linear: argmax_c <m_c, x> - |m_c|²/2
        let correct = (0..ds.len())
            .filter(|&i| {
                let s: Vec<f64> = means
                    .iter()
                    .map(|m| crate::math::dot(m, ds.x(i)) - crate::math::dot(m, m) / 2.0)
                    .collect();
                crate::math::argmax(&s) == ds.labels()[i]
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn longtail_profile() {
        assert_eq!(longtail_counts(10, 1000, 100.0)[9], 10);
        assert_eq!(longtail_counts(10, 1000, 100.0)[0], 1000);
        let base = gen_gaussian_mixture(10, 12, 200, 3.0, &mut Rng::new(3)).unwrap();
        let lt = gen_longtail(&base, 100.0, &mut Rng::new(5)).unwrap();
        let counts = lt.class_counts();
        assert_eq!(counts, &longtail_counts(10, 200, 100.0)[..]);
        let ratio = counts[0] as f64 / counts[9] as f64;
        // rounding of n_min = 2 bounds the realised ratio
        assert!((ratio - 100.0).abs() <= 100.0 * 0.5 / 2.0 + 1e-9, "{ratio}");
        // every kept row exists in the base with the same label
        for i in 0..lt.len() {
            assert!(
                (0..base.len()).any(|j| base.x(j) == lt.x(i) && base.labels()[j] == lt.labels()[i])
            );
        }
    }

    #[test]
    fn longtail_ratio_one_is_identity() {
        let base = mixture(8);
        let lt = gen_longtail(&base, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(lt, base);
    }

    #[test]
    fn longtail_clamps_to_one_and_rejects_unbalanced() {
        let base = gen_gaussian_mixture(3, 2, 4, 2.0, &mut Rng::new(1)).unwrap();
        let lt = gen_longtail(&base, 1e6, &mut Rng::new(1)).unwrap();
        assert_eq!(lt.class_counts(), &[4, 1, 1]);
        assert!(gen_longtail(&lt, 2.0, &mut Rng::new(1)).is_err());
        assert!(gen_longtail(&base, 0.5, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn zero_noise_keeps_labels() {
        let ds = mixture(2);
        let noisy = inject_symmetric_noise(&ds, 0.0, &mut Rng::new(1), None).unwrap();
        assert_eq!(noisy.labels(), ds.labels());
        assert_eq!(noisy.clean_labels().unwrap(), ds.labels());
        assert_eq!(noisy.noise_fraction(), Some(0.0));
    }

    #[test]
    fn half_noise_concentrates() {
        let ds = gen_gaussian_mixture(10, 2, 1000, 1.0, &mut Rng::new(3)).unwrap();
        let noisy = inject_symmetric_noise(&ds, 0.5, &mut Rng::new(9), None).unwrap();
        let f = noisy.noise_fraction().unwrap();
        assert!((0.48..=0.52).contains(&f), "{f}");
        // strict flips only
        let clean = noisy.clean_labels().unwrap();
        assert_eq!(clean, ds.labels());
    }

    #[test]
    fn noise_restricted_to_subset() {
        let ds = mixture(5);
        let noisy =
            inject_symmetric_noise(&ds, 0.4, &mut Rng::new(2), Some(&[0, 2, 4, 6, 8])).unwrap();
        let clean = noisy.clean_labels().unwrap();
        for (c, y) in clean.iter().zip(noisy.labels()) {
            if c % 2 == 1 {
                assert_eq!(c, y);
            }
        }
        assert_eq!(noisy.noisy_classes(), vec![0, 2, 4, 6, 8]);
        assert!(inject_symmetric_noise(&ds, 1.5, &mut Rng::new(2), None).is_err());
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let ds = inject_symmetric_noise(&mixture(6), 0.3, &mut Rng::new(1), None).unwrap();
        let text = ds.to_csv_string();
        let back = Dataset::from_csv_str(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_csv_string(), text);
    }

    #[test]
    fn csv_without_clean_column() {
        let text = "# C=2 d=2 N=2 has_clean=0\n0.5,-1,1\n2,3.25,0\n";
        let ds = Dataset::from_csv_str(text).unwrap();
        assert!(ds.clean_labels().is_none());
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.to_csv_string(), text);
    }

    #[test]
    fn csv_errors_name_the_problem() {
        let err = |t: &str| match Dataset::from_csv_str(t) {
            Err(Error::Parse { location, message }) => format!("{location}: {message}"),
            other => panic!("expected parse error, got {other:?}"),
        };
        assert!(err("# C=2 d=2 N=3 has_clean=0\n0,0,1\n").contains("N=3"));
        assert!(err("# C=2 d=3 N=1 has_clean=0\n0,0,1\n").contains("d=3"));
        assert!(err("# C=2 d=2 N=1 has_clean=0\n0,0,2\n").contains("out of range"));
        assert!(err("C=2 d=2 N=1 has_clean=0\n").contains("line 1"));
        assert!(err("# C=2 d=2 has_clean=0\n").contains("missing header field N"));
        assert!(err("# C=2 d=2 N=1 has_clean=0\n0,x,1\n").starts_with("line 2"));
    }
}
