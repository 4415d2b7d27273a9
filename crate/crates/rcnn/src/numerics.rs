//! Dense 64-bit vector/matrix primitives and the exact convolution,
//! activation, loss, and finite-difference operations the models build on.
//!
//! All loops accumulate strictly left to right so results are bitwise
//! reproducible across runs and thread counts. No SIMD, no FFT, no reduced
//! precision: gradient checks at 1e-6 relative tolerance need every bit.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            y[r] = acc;
        }
        y
    }

    /// y = Aᵀ g.
    pub fn matvec_t(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.rows, "matvec_t dimension mismatch");
        let mut y = vec![0.0; self.cols];
        for c in 0..self.cols {
            let mut acc = 0.0;
            for r in 0..self.rows {
                acc += self.data[r * self.cols + c] * g[r];
            }
            y[c] = acc;
        }
        y
    }

    /// A += g xᵀ (rank-one update).
    pub fn add_outer(&mut self, g: &[f64], x: &[f64]) {
        assert_eq!(g.len(), self.rows, "add_outer row mismatch");
        assert_eq!(x.len(), self.cols, "add_outer col mismatch");
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for c in 0..self.cols {
                row[c] += g[r] * x[c];
            }
        }
    }

    /// Column c += v.
    pub fn add_to_col(&mut self, c: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows, "add_to_col length mismatch");
        for r in 0..self.rows {
            self.data[r * self.cols + c] += v[r];
        }
    }
}

/// The non-linearity applied after every convolution and recurrence step.
///
/// Defaults to the logistic function; tanh is available behind the same
/// switch everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sigmoid {
    #[default]
    Logistic,
    Tanh,
}

impl Sigmoid {
    /// The largest representable value strictly below 1.
    const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

    /// Applies the activation, clamped to the open interval so that the
    /// (0,1) (resp. (−1,1)) range holds even where f64 saturates.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Sigmoid::Logistic => {
                (1.0 / (1.0 + (-x).exp())).clamp(f64::MIN_POSITIVE, Self::ONE_BELOW)
            }
            Sigmoid::Tanh => x.tanh().clamp(-Self::ONE_BELOW, Self::ONE_BELOW),
        }
    }

    /// Derivative expressed in terms of the activation output y = σ(x).
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Sigmoid::Logistic => y * (1.0 - y),
            Sigmoid::Tanh => 1.0 - y * y,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sigmoid::Logistic => "logistic",
            Sigmoid::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Sigmoid::Logistic),
            "tanh" => Ok(Sigmoid::Tanh),
            other => Err(Error::invalid(format!("unknown sigmoid `{other}`"))),
        }
    }
}

/// Discrete valid 1-D convolution:
///
/// `out[i] = Σ_{j=1..k} kernel[j] · signal[k+i−j]` (1-based),
///
/// i.e. the kernel is applied reversed relative to a sliding correlation.
/// Output length is `|signal| − |kernel| + 1`.
pub fn conv1d_valid(kernel: &[f64], signal: &[f64]) -> Result<Vec<f64>> {
    let k = kernel.len();
    if k == 0 {
        return Err(Error::invalid("convolution kernel is empty"));
    }
    if k > signal.len() {
        return Err(Error::invalid(format!(
            "kernel of size {k} longer than signal of size {}",
            signal.len()
        )));
    }
    let out_len = signal.len() - k + 1;
    let mut out = vec![0.0; out_len];
    for i in 0..out_len {
        let mut acc = 0.0;
        for j in 0..k {
            // 1-based m_{k+i-j} with i,j shifted down by one.
            acc += kernel[j] * signal[k + i - j - 1];
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Elementwise logistic function 1/(1+e^{−x}); outputs stay strictly
/// inside (0,1) even where f64 would saturate.
pub fn logistic(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| Sigmoid::Logistic.apply(x)).collect()
}

/// Numerically safe softmax (max-subtraction). Output sums to 1.
pub fn softmax(y: &[f64]) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    let mut max = y[0];
    for &v in &y[1..] {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<f64> = y.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = 0.0;
    for &v in &out {
        sum += v;
    }
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// −ln p[target], with p[target] clamped below at 1e-300.
pub fn cross_entropy(p: &[f64], target: usize) -> Result<f64> {
    if target >= p.len() {
        return Err(Error::invalid(format!(
            "cross-entropy target {target} out of range for {} classes",
            p.len()
        )));
    }
    Ok(-p[target].max(1e-300).ln())
}

/// Central-difference gradient of a scalar function over a flat parameter
/// vector: `(f(θ+εe_i) − f(θ−εe_i)) / 2ε` per coordinate.
///
/// This is the oracle every hand-derived backward pass is checked against;
/// it touches only the forward path of `f`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], eps: f64) -> Vec<f64> {
    assert!(eps > 0.0, "fd_gradient requires eps > 0");
    let mut theta = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let plus = f(&theta);
        theta[i] = orig - eps;
        let minus = f(&theta);
        theta[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// |a − n| / max(|a|, |n|, 1); the scale used by every gradient check.
///
/// The unit floor makes this a combined absolute-and-relative tolerance:
/// relative above magnitude 1, absolute below. Central differences at
/// eps = 1e-5 resolve a loss of order 1 to roughly 1e-10 absolute, so a
/// purely relative measure would be unattainable for the (correct) tiny
/// gradient entries regardless of implementation.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs())).max(1.0)
}
