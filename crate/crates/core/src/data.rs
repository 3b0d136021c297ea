//! Datasets, synthetic generators, CSV ingestion, standardization and
//! reproducible splitting.
//!
//! The four synthetic generators share the same input distribution,
//! `x ~ N([-2.0, -1.5], I₂)`, and differ in the polynomial mean function and
//! the shape of the two-dimensional error term.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_named, rng};

/// Mean of the synthetic input distribution.
pub const INPUT_MEAN: [f64; 2] = [-2.0, -1.5];

/// Mixture weights of the mixture-Gaussian error term.
pub const MIXTURE_WEIGHTS: [f64; 3] = [0.3, 0.4, 0.3];

/// Means of the mixture-Gaussian error components.
pub const MIXTURE_MEANS: [[f64; 2]; 3] = [[0.0, 0.0], [5.0, 5.0], [10.0, 0.0]];

/// Per-column affine standardization `(v - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fits column means and sample standard deviations on the given rows
    /// only. A constant column is an error.
    pub fn fit(data: ArrayView2<f64>, rows: &[usize]) -> Result<Self> {
        let s = Self::fit_raw(data, rows)?;
        if let Some(column) = s.std.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::ZeroVariance { column });
        }
        Ok(s)
    }

    /// Like [`Standardizer::fit`], but constant columns get a unit scale
    /// instead of failing.
    pub fn fit_lenient(data: ArrayView2<f64>, rows: &[usize]) -> Result<Self> {
        let mut s = Self::fit_raw(data, rows)?;
        for v in &mut s.std {
            if !(*v > 0.0) {
                *v = 1.0;
            }
        }
        Ok(s)
    }

    fn fit_raw(data: ArrayView2<f64>, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no rows to fit standardization on".into()));
        }
        let d = data.ncols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for j in 0..d {
                mean[j] += data[[r, j]];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &r in rows {
            for j in 0..d {
                let e = data[[r, j]] - mean[j];
                var[j] += e * e;
            }
        }
        let denom = if rows.len() > 1 { n - 1.0 } else { 1.0 };
        let std = var.iter().map(|v| (v / denom).sqrt()).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn inverse(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut out = data.to_owned();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = row[j] * self.std[j] + self.mean[j];
            }
        }
        out
    }

    /// `Σ_j ln std_j`, the log-Jacobian of the inverse (unstandardizing) map.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.std.iter().all(|&s| s == 1.0)
    }
}

/// Paired inputs `x` (n×p) and outputs `y` (n×q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_scaler: Option<Standardizer>,
    pub y_scaler: Option<Standardizer>,
    /// Generator name and seed, or the source file path.
    pub source: String,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>, source: impl Into<String>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::shape("dataset rows", x.nrows(), y.nrows()));
        }
        Ok(Dataset {
            x,
            y,
            x_scaler: None,
            y_scaler: None,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(ndarray::Axis(0), indices),
            y: self.y.select(ndarray::Axis(0), indices),
            x_scaler: self.x_scaler.clone(),
            y_scaler: self.y_scaler.clone(),
            source: self.source.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (1..=self.p())
            .map(|j| format!("x{j}"))
            .chain((1..=self.q()).map(|j| format!("y{j}")))
            .collect();
        w.write_record(&header)?;
        for i in 0..self.len() {
            let rec: Vec<String> = self
                .x
                .row(i)
                .iter()
                .chain(self.y.row(i).iter())
                .map(|v| format!("{v}"))
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a numeric CSV whose first `p` columns are inputs and next `q`
/// columns are outputs.
pub fn load_csv(path: &Path, p: usize, q: usize, has_header: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut ds = read_csv(file, p, q, has_header)?;
    ds.source = path.display().to_string();
    Ok(ds)
}

pub fn read_csv<R: std::io::Read>(reader: R, p: usize, q: usize, has_header: bool) -> Result<Dataset> {
    let width = p + q;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut n = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1 + usize::from(has_header);
        if rec.len() != width {
            return Err(Error::Malformed {
                row,
                message: format!("expected {width} columns (p = {p}, q = {q}), found {}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Malformed {
                row,
                message: format!("column {}: '{cell}' is not a number", j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Malformed {
                    row,
                    message: format!("column {}: non-finite value", j + 1),
                });
            }
            if j < p {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("csv has no data rows".into()));
    }
    let x = Array2::from_shape_vec((n, p), xs).expect("row count");
    let y = Array2::from_shape_vec((n, q), ys).expect("row count");
    Dataset::new(x, y, "csv")
}

/// Standardizes `x` (and `y` when requested) using statistics fitted on the
/// `fit_on` rows only; the fitted statistics are kept on the returned set.
pub fn standardize(ds: &Dataset, fit_on: &[usize], include_y: bool) -> Result<Dataset> {
    let xs = Standardizer::fit(ds.x.view(), fit_on)?;
    let mut out = ds.clone();
    out.x = xs.transform(ds.x.view());
    out.x_scaler = Some(xs);
    if include_y {
        let ysc = Standardizer::fit(ds.y.view(), fit_on)?;
        out.y = ysc.transform(ds.y.view());
        out.y_scaler = Some(ysc);
    }
    Ok(out)
}

/// Undoes [`standardize`].
pub fn unstandardize(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    if let Some(s) = &ds.x_scaler {
        out.x = s.inverse(ds.x.view());
    }
    if let Some(s) = &ds.y_scaler {
        out.y = s.inverse(ds.y.view());
    }
    out.x_scaler = None;
    out.y_scaler = None;
    out
}

/// How to partition a dataset into training, calibration and test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
    /// Fraction of the training rows given to the point predictor when the
    /// training set is split again for the residual method.
    #[serde(default)]
    pub predictor_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSizes {
    Counts { train: usize, calibration: usize, test: usize },
    Ratios { train: f64, calibration: f64, test: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSizes {
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        match *self {
            SplitSizes::Counts {
                train,
                calibration,
                test,
            } => {
                if train + calibration + test != n {
                    return Err(Error::InvalidArgument(format!(
                        "split counts {train} + {calibration} + {test} do not sum to {n} rows"
                    )));
                }
                Ok((train, calibration, test))
            }
            SplitSizes::Ratios {
                train,
                calibration,
                test,
            } => {
                let total = train + calibration + test;
                if !(train >= 0.0 && calibration >= 0.0 && test >= 0.0 && total > 0.0) {
                    return Err(Error::InvalidArgument("split ratios must be nonnegative".into()));
                }
                let nf = n as f64;
                let n_test = (nf * test / total).round() as usize;
                let n_cal = (nf * calibration / total).round() as usize;
                if n_test + n_cal > n {
                    return Err(Error::InvalidArgument("split ratios exceed row count".into()));
                }
                Ok((n - n_cal - n_test, n_cal, n_test))
            }
        }
    }
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed));
    idx
}

/// Disjoint, exhaustive, seed-determined partition of `0..n`.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    let (n_train, n_cal, _) = spec.sizes.counts(n)?;
    let perm = permutation(n, derive_named(spec.seed, "split"));
    Ok(Split {
        train: perm[..n_train].to_vec(),
        calibration: perm[n_train..n_train + n_cal].to_vec(),
        test: perm[n_train + n_cal..].to_vec(),
    })
}

/// Shuffles `pool` with `seed` and cuts it into a first part of `first`
/// elements and the remainder.
pub fn split_pool(pool: &[usize], first: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if first > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot take {first} rows from a pool of {}",
            pool.len()
        )));
    }
    let perm = permutation(pool.len(), seed);
    let a = perm[..first].iter().map(|&i| pool[i]).collect();
    let b = perm[first..].iter().map(|&i| pool[i]).collect();
    Ok((a, b))
}

/// Fails with [`Error::Overlap`] if any index occurs in two of the sets.
pub fn check_disjoint(sets: &[&[usize]]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for s in sets {
        for &i in *s {
            if !seen.insert(i) {
                return Err(Error::Overlap { index: i });
            }
        }
    }
    Ok(())
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn draw_input<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    [
        INPUT_MEAN[0] + standard_normal(rng),
        INPUT_MEAN[1] + standard_normal(rng),
    ]
}

/// Noise-free mean of the mixture-Gaussian model.
pub fn mixture_mean(x: [f64; 2]) -> [f64; 2] {
    let [x1, x2] = x;
    [
        3.0 * x1.powi(3) * x2 - 5.0 * x2 * x2 + 4.0 * x1 * x2 - 6.0 * x2 + 7.0,
        x1 * x2 - x2.powi(3) + 3.0 * x1 * x2 * x2 + 8.0,
    ]
}

/// Noise-free mean shared by the spiral, moon and ring models.
pub fn curve_mean(x: [f64; 2]) -> [f64; 2] {
    let [x1, x2] = x;
    [
        2.0 * x1.powi(3) - 3.0 * x2 * x2 + 5.0 * x2 + x1 * x2,
        x1 * x1 * x2 - 4.0 * x2 * x2 + 3.0 * x1 * x1 * x2 + 7.0,
    ]
}

/// Square-root factors of the mixture component covariances
/// `0.5(I + J)`, `1.5(I - J)` and `I`.
///
/// `1.5(I - J)` has eigenvalues ±1.5 and is not a covariance matrix; the
/// factor used is the square root of its matrix absolute value, `√1.5·I`.
fn mixture_factors() -> [[[f64; 2]; 2]; 3] {
    let a = 1.5f64.sqrt();
    let b = 0.5f64.sqrt();
    // 0.5(I+J) = 1.5·P₊ + 0.5·P₋ with P± = ½[[1, ±1], [±1, 1]]
    let c1 = [[(a + b) / 2.0, (a - b) / 2.0], [(a - b) / 2.0, (a + b) / 2.0]];
    [c1, [[a, 0.0], [0.0, a]], [[1.0, 0.0], [0.0, 1.0]]]
}

pub fn mixture_noise<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let u: f64 = rng.random();
    let comp = if u < MIXTURE_WEIGHTS[0] {
        0
    } else if u < MIXTURE_WEIGHTS[0] + MIXTURE_WEIGHTS[1] {
        1
    } else {
        2
    };
    let g = [standard_normal(rng), standard_normal(rng)];
    let f = mixture_factors()[comp];
    let m = MIXTURE_MEANS[comp];
    [
        m[0] + f[0][0] * g[0] + f[0][1] * g[1],
        m[1] + f[1][0] * g[0] + f[1][1] * g[1],
    ]
}

pub fn spiral_noise<R: Rng + ?Sized>(rng: &mut R, sd1: f64, sd2: f64) -> [f64; 2] {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    [
        theta * theta.cos() + sd1 * standard_normal(rng),
        theta * theta.sin() + sd2 * standard_normal(rng),
    ]
}

pub fn moon_noise<R: Rng + ?Sized>(rng: &mut R, sd: f64) -> [f64; 2] {
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    [
        theta.cos() + sd * standard_normal(rng),
        theta.sin() + sd * standard_normal(rng),
    ]
}

pub fn ring_noise<R: Rng + ?Sized>(rng: &mut R, r_inner: f64, r_outer: f64) -> [f64; 2] {
    let r2 = rng.random_range(r_inner * r_inner..=r_outer * r_outer);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let r = r2.sqrt();
    [r * theta.cos(), r * theta.sin()]
}

fn generate<R, M, E>(n: usize, rng: &mut R, mean: M, mut noise: E, source: String) -> Dataset
where
    R: Rng + ?Sized,
    M: Fn([f64; 2]) -> [f64; 2],
    E: FnMut(&mut R) -> [f64; 2],
{
    let mut x = Array2::zeros((n, 2));
    let mut y = Array2::zeros((n, 2));
    for i in 0..n {
        let xi = draw_input(rng);
        let m = mean(xi);
        let e = noise(rng);
        x[[i, 0]] = xi[0];
        x[[i, 1]] = xi[1];
        y[[i, 0]] = m[0] + e[0];
        y[[i, 1]] = m[1] + e[1];
    }
    Dataset::new(x, y, source).expect("equal rows")
}

pub fn gen_mixture(n: usize, seed: u64) -> Dataset {
    generate(n, &mut rng(seed), mixture_mean, |r| mixture_noise(r), format!("mixture(seed={seed})"))
}

pub fn gen_spiral(n: usize, seed: u64) -> Dataset {
    gen_spiral_with(n, seed, 0.2, 0.1)
}

/// Spiral model with explicit noise standard deviations for both coordinates.
pub fn gen_spiral_with(n: usize, seed: u64, sd1: f64, sd2: f64) -> Dataset {
    generate(
        n,
        &mut rng(seed),
        curve_mean,
        |r| spiral_noise(r, sd1, sd2),
        format!("spiral(seed={seed})"),
    )
}

pub fn gen_moon(n: usize, seed: u64) -> Dataset {
    generate(n, &mut rng(seed), curve_mean, |r| moon_noise(r, 0.1), format!("moon(seed={seed})"))
}

pub fn gen_ring(n: usize, seed: u64, r_inner: f64, r_outer: f64) -> Result<Dataset> {
    if !(r_inner >= 0.0 && r_inner < r_outer) {
        return Err(Error::InvalidArgument(format!(
            "ring radii must satisfy 0 <= r_inner < r_outer, got {r_inner} and {r_outer}"
        )));
    }
    Ok(generate(
        n,
        &mut rng(seed),
        curve_mean,
        |r| ring_noise(r, r_inner, r_outer),
        format!("ring(seed={seed})"),
    ))
}

/// A named synthetic model with its noise parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum Generator {
    Mixture,
    Spiral {
        #[serde(default = "default_spiral_sd1")]
        sd1: f64,
        #[serde(default = "default_spiral_sd2")]
        sd2: f64,
    },
    Moon {
        #[serde(default = "default_moon_sd")]
        sd: f64,
    },
    Ring {
        #[serde(default = "default_ring_inner")]
        r_inner: f64,
        #[serde(default = "default_ring_outer")]
        r_outer: f64,
    },
}

fn default_spiral_sd1() -> f64 {
    0.2
}
fn default_spiral_sd2() -> f64 {
    0.1
}
fn default_moon_sd() -> f64 {
    0.1
}
fn default_ring_inner() -> f64 {
    1.0
}
fn default_ring_outer() -> f64 {
    2.0
}

impl Generator {
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match *self {
            Generator::Mixture => Ok(gen_mixture(n, seed)),
            Generator::Spiral { sd1, sd2 } => Ok(gen_spiral_with(n, seed, sd1, sd2)),
            Generator::Moon { sd } => Ok(generate(n, &mut rng(seed), curve_mean, |r| moon_noise(r, sd), format!("moon(seed={seed})"))),
            Generator::Ring { r_inner, r_outer } => gen_ring(n, seed, r_inner, r_outer),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mixture_constant_terms() {
        assert_eq!(mixture_mean([0.0, 0.0]), [7.0, 8.0]);
    }

    #[test]
    fn mixture_noise_mean() {
        let mut r = rng(1);
        let n = 100_000;
        let mut s = [0.0; 2];
        for _ in 0..n {
            let e = mixture_noise(&mut r);
            s[0] += e[0];
            s[1] += e[1];
        }
        assert!((s[0] / n as f64 - 5.0).abs() < 0.05);
        assert!((s[1] / n as f64 - 2.0).abs() < 0.05);
    }

    #[test]
    fn mixture_first_component_covariance() {
        let f = mixture_factors()[0];
        // F·Fᵀ must equal 0.5(I + J)
        let c00 = f[0][0] * f[0][0] + f[0][1] * f[0][1];
        let c01 = f[0][0] * f[1][0] + f[0][1] * f[1][1];
        assert!((c00 - 1.0).abs() < 1e-14);
        assert!((c01 - 0.5).abs() < 1e-14);
    }

    #[test]
    fn moon_noise_near_unit_arc() {
        let mut r = rng(2);
        let n = 100_000;
        let ok = (0..n)
            .filter(|_| {
                let e = moon_noise(&mut r, 0.1);
                ((e[0] * e[0] + e[1] * e[1]).sqrt() - 1.0).abs() < 0.5
            })
            .count();
        assert!(ok as f64 / n as f64 >= 0.9999);
    }

    #[test]
    fn ring_squared_radius_is_uniform() {
        let mut r = rng(3);
        let (ri, ro) = (1.0, 2.0);
        let mut v: Vec<f64> = (0..10_000)
            .map(|_| {
                let e = ring_noise(&mut r, ri, ro);
                e[0] * e[0] + e[1] * e[1]
            })
            .collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let ks = v
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let cdf = (s - ri * ri) / (ro * ro - ri * ri);
                (cdf - i as f64 / n).abs().max((cdf - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "KS = {ks}");
    }

    #[test]
    fn spiral_zero_noise_traces_curve() {
        let mut r = rng(4);
        for _ in 0..100 {
            let e = spiral_noise(&mut r, 0.0, 0.0);
            let theta = e[1].atan2(e[0]).rem_euclid(std::f64::consts::TAU);
            let rad = (e[0] * e[0] + e[1] * e[1]).sqrt();
            // on the curve (θcosθ, θsinθ) the radius equals the angle
            assert!((rad - theta).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_rejects_bad_radii() {
        assert!(gen_ring(10, 0, 2.0, 1.0).is_err());
        assert!(gen_ring(10, 0, 1.0, 1.0).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_mixture(50, 9), gen_mixture(50, 9));
        assert_ne!(gen_mixture(50, 9).y, gen_mixture(50, 10).y);
        assert_eq!(gen_moon(20, 1), gen_moon(20, 1));
    }

    #[test]
    fn constant_column_is_rejected() {
        let x = array![[1.0, 3.0], [2.0, 3.0], [4.0, 3.0]];
        let err = Standardizer::fit(x.view(), &[0, 1, 2]).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { column: 1 }));
    }

    #[test]
    fn standardize_roundtrip() {
        let ds = gen_spiral(200, 5);
        let idx: Vec<usize> = (0..150).collect();
        let st = standardize(&ds, &idx, true).unwrap();
        let back = unstandardize(&st);
        for (a, b) in back.x.iter().chain(back.y.iter()).zip(ds.x.iter().chain(ds.y.iter())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardization_ignores_held_out_rows() {
        let ds = gen_mixture(100, 3);
        let train: Vec<usize> = (0..60).collect();
        let a = standardize(&ds, &train, true).unwrap();
        let mut mutated = ds.clone();
        for i in 60..100 {
            mutated.x[[i, 0]] += 1000.0;
            mutated.y[[i, 1]] -= 55.0;
        }
        let b = standardize(&mutated, &train, true).unwrap();
        assert_eq!(a.x_scaler, b.x_scaler);
        assert_eq!(a.y_scaler, b.y_scaler);
    }

    #[test]
    fn ratio_split_of_9005_rows() {
        let spec = SplitSpec {
            sizes: SplitSizes::Ratios {
                train: 0.6,
                calibration: 0.2,
                test: 0.2,
            },
            seed: 1,
            predictor_fraction: None,
        };
        let s = split(5403 + 1801 + 1801, &spec).unwrap();
        assert_eq!((s.train.len(), s.calibration.len(), s.test.len()), (5403, 1801, 1801));
    }

    #[test]
    fn count_split_must_be_exhaustive() {
        let spec = SplitSpec {
            sizes: SplitSizes::Counts {
                train: 5,
                calibration: 3,
                test: 1,
            },
            seed: 0,
            predictor_fraction: None,
        };
        assert!(split(10, &spec).is_err());
        assert!(split(9, &spec).is_ok());
    }

    #[test]
    fn csv_errors() {
        let ragged = "1,2,3\n4,5\n";
        let e = read_csv(ragged.as_bytes(), 2, 1, false).unwrap_err();
        assert!(matches!(e, Error::Malformed { row: 2, .. }), "{e}");
        let text = "x1,y1\n1,abc\n";
        let e = read_csv(text.as_bytes(), 1, 1, true).unwrap_err();
        assert!(matches!(e, Error::Malformed { row: 2, .. }), "{e}");
        let wide = "1,2,3\n";
        assert!(read_csv(wide.as_bytes(), 1, 1, false).is_err());
        let ok = read_csv("x1,x2,y1\n1,2,3\n4,5,6\n".as_bytes(), 2, 1, true).unwrap();
        assert_eq!(ok.x, array![[1.0, 2.0], [4.0, 5.0]]);
        assert_eq!(ok.y, array![[3.0], [6.0]]);
    }

    #[test]
    fn disjointness_check() {
        assert!(check_disjoint(&[&[0, 1], &[2, 3]]).is_ok());
        assert!(matches!(check_disjoint(&[&[0, 1], &[1, 3]]), Err(Error::Overlap { index: 1 })));
    }
}
