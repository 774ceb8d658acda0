//! Dense 64-bit linear algebra, activations, a deterministic random stream,
//! the ridge-regularised affine least-squares solver and central finite
//! differences.
//!
//! Everything here is a pure function of its inputs except [`Rng`], which is
//! the only mutable object and must not be shared between concurrent tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self * v` for a column vector `v`.
    pub fn apply(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.cols {
            return Err(Error::Shape(format!(
                "cannot apply {}x{} matrix to vector of dim {}",
                self.rows,
                self.cols,
                v.dim()
            )));
        }
        Ok(Vector(
            (0..self.rows)
                .map(|r| {
                    self.row(r)
                        .iter()
                        .zip(v.as_slice())
                        .fold(0.0, |acc, (a, b)| acc + a * b)
                })
                .collect(),
        ))
    }
}

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Exact widening of a 32-bit row.
    pub fn from_f32(values: &[f32]) -> Self {
        Vector(values.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        self.0.iter().zip(&other.0).fold(0.0, |acc, (a, b)| acc + a * b)
    }

    pub fn squared_distance(&self, other: &Vector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

/// Standard matrix product with ascending-index accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for p in 0..a.cols {
            let s = a.data[i * a.cols + p];
            let src = &b.data[p * b.cols..(p + 1) * b.cols];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += s * x;
            }
        }
    }
    Ok(out)
}

/// Max-subtracted softmax.
pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.0.is_empty() {
        return Err(Error::Shape("softmax of empty vector".into()));
    }
    Ok(Vector(softmax_slice(&v.0)))
}

pub(crate) fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `(v - mean) / sqrt(var + eps) * gamma + beta` with population variance.
pub fn layer_norm(v: &Vector, gamma: &Vector, beta: &Vector, eps: f64) -> Result<Vector> {
    if v.dim() != gamma.dim() || v.dim() != beta.dim() {
        return Err(Error::Shape(format!(
            "layer_norm dims {} / {} / {}",
            v.dim(),
            gamma.dim(),
            beta.dim()
        )));
    }
    if v.dim() == 0 {
        return Err(Error::Shape("layer_norm of empty vector".into()));
    }
    let n = v.dim() as f64;
    let mean = v.0.iter().sum::<f64>() / n;
    let var = v.0.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    Ok(Vector(
        v.0.iter()
            .zip(&gamma.0)
            .zip(&beta.0)
            .map(|((x, g), b)| {
                let centered = x - mean;
                // zero-variance input with eps = 0 would divide 0 by 0
                let normed = if centered == 0.0 { 0.0 } else { centered / denom };
                normed * g + b
            })
            .collect(),
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

/// Tanh-approximated GELU, elementwise.
pub fn gelu(v: &Vector) -> Vector {
    Vector(v.0.iter().map(|&x| gelu_scalar(x)).collect())
}

/// Fits `y ≈ A x + b` minimising `Σ‖A x + b − y‖² + ridge·‖A‖²_F`.
///
/// Solved in 64-bit through the normal equations of the bias-augmented
/// design `[x, 1]`; the bias column is not penalised. Returns `A` with shape
/// `dim(y) × dim(x)` and `b` with `dim(y)` entries.
pub fn least_squares_affine(xs: &[Vector], ys: &[Vector], ridge: f64) -> Result<(Matrix, Vector)> {
    if xs.is_empty() {
        return Err(Error::Argument("least squares needs at least one pair".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::Argument(format!(
            "{} inputs but {} targets",
            xs.len(),
            ys.len()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Argument(format!("ridge must be >= 0, got {ridge}")));
    }
    let dx = xs[0].dim();
    let dy = ys[0].dim();
    if xs.iter().any(|x| x.dim() != dx) || ys.iter().any(|y| y.dim() != dy) {
        return Err(Error::Shape("inconsistent pair dimensions".into()));
    }
    let p = dx + 1;

    // Gram = ZᵀZ + ridge·diag(1,…,1,0), rhs = ZᵀY.
    let mut gram = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p * dy];
    let mut z = vec![0.0f64; p];
    for (x, y) in xs.iter().zip(ys) {
        z[..dx].copy_from_slice(x.as_slice());
        z[dx] = 1.0;
        for r in 0..p {
            let zr = z[r];
            if zr == 0.0 {
                continue;
            }
            let grow = &mut gram[r * p..(r + 1) * p];
            for (g, zc) in grow.iter_mut().zip(&z) {
                *g += zr * zc;
            }
            let rrow = &mut rhs[r * dy..(r + 1) * dy];
            for (t, yv) in rrow.iter_mut().zip(y.as_slice()) {
                *t += zr * yv;
            }
        }
    }
    for r in 0..dx {
        gram[r * p + r] += ridge;
    }

    let chol = cholesky(&gram, p).ok_or_else(|| {
        Error::Solver(
            "normal equations are singular; use a nonzero ridge (e.g. 1e-6) for rank-deficient pairs"
                .into(),
        )
    })?;
    let w = cholesky_solve(&chol, p, &rhs, dy);

    // w is p × dy; A = first dx rows transposed, b = last row.
    let mut a = Matrix::zeros(dy, dx);
    for r in 0..dx {
        for c in 0..dy {
            a.data[c * dx + r] = w[r * dy + c];
        }
    }
    let b = Vector(w[dx * dy..].to_vec());
    Ok((a, b))
}

/// Lower-triangular factor of a symmetric positive-definite matrix, or `None`
/// when a pivot collapses relative to the diagonal scale.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = scale.max(f64::MIN_POSITIVE) * 1e-12;
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > tol) {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, rhs: &[f64], m: usize) -> Vec<f64> {
    let mut x = rhs.to_vec();
    for c in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i * m + c];
            for k in 0..i {
                s -= l[i * n + k] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
        // back: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[i * m + c];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + c];
            }
            x[i * m + c] = s / l[i * n + i];
        }
    }
    x
}

/// Deterministic SplitMix64 stream: state advances by a fixed odd increment
/// and each output is a bijective mix of the counter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, derived deterministically from this seed
    /// and a label.
    pub fn derive(&self, label: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(label.wrapping_add(0x51_7C_C1_B7_27_22_0A_95))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(
            self.seed
                .wrapping_add(self.counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        )
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)` in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// One standard normal draw via Box–Muller (cosine branch).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` independent draws from `N(0, sigma²)`.
pub fn gaussian(rng: &mut Rng, sigma: f64, n: usize) -> Result<Vector> {
    if !(sigma >= 0.0) {
        return Err(Error::Argument(format!("sigma must be >= 0, got {sigma}")));
    }
    Ok(Vector((0..n).map(|_| sigma * rng.standard_normal()).collect()))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &Vector, eps: f64) -> Vector
where
    F: Fn(&Vector) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.dim());
    for i in 0..x.dim() {
        let orig = probe.0[i];
        probe.0[i] = orig + eps;
        let up = f(&probe);
        probe.0[i] = orig - eps;
        let down = f(&probe);
        probe.0[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Vector(grad)
}
