//! Differentiable numerical primitives and the finite-difference
//! verification harness.
//!
//! All arithmetic is f64: the finite-difference comparisons at 1e-4
//! relative tolerance are not reliable in single precision.

pub mod tape;

pub use tape::{BufId, Tape};

use crate::error::{Error, Result};

/// Default perturbation for central finite differences.
pub const DEFAULT_GRAD_STEP: f64 = 1e-5;

/// Floor for the relative-error denominator, so near-zero gradients do not
/// blow up the ratio.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

// ── Dense storage ───────────────────────────────────────────────────

/// Row-major dense matrix of finite f64 values. Feature maps use the
/// convention (rows = feature dimension, cols = sequence position).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix from {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix construction"));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    /// A 1 x n row vector.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(1, n, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols);
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.rows && j < self.cols);
        self.values[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transposed(&self) -> DenseMatrix {
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.get(i, j);
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

// ── Shared stable kernels ───────────────────────────────────────────

/// Softmax with max subtraction. `out` must have `v.len()` slots.
pub(crate) fn stable_softmax(v: &[f64], out: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log Σ exp with max subtraction.
pub(crate) fn stable_log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

// ── Pure primitives ─────────────────────────────────────────────────

/// cosine(u, v) = u·v / (|u||v|), in [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
    Ok(dot / (nu * nv))
}

/// softmax(v / tau), stable under large magnitudes. Output sums to 1.
pub fn softmax_temp(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "softmax temperature {tau} must be > 0"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax_temp input"));
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / tau).collect();
    let mut out = vec![0.0; v.len()];
    stable_softmax(&scaled, &mut out);
    Ok(out)
}

/// log Σ exp(v_i), stable under large magnitudes. Result ≥ max(v).
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidInput("log_sum_exp of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log_sum_exp input"));
    }
    Ok(stable_log_sum_exp(v))
}

// ── Gradient verification ───────────────────────────────────────────

/// Outcome of one analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Worst relative error within each input buffer, in input order.
    pub per_input_errors: Vec<f64>,
    pub passed: bool,
}

/// Compare the tape's analytic gradient of a scalar function against
/// central finite differences, coordinate by coordinate.
///
/// `f` builds the function on a fresh tape from leaves registered for each
/// input and returns the scalar output buffer. The relative error uses the
/// denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(
    f: F,
    inputs: &[DenseMatrix],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[BufId]) -> Result<BufId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {step} must be > 0"
        )));
    }

    let run = |bufs: &[DenseMatrix]| -> Result<(Tape, BufId)> {
        let mut tape = Tape::new();
        let ids = bufs
            .iter()
            .map(|m| tape.leaf(m.values().to_vec(), m.rows(), m.cols()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &ids)?;
        if tape.shape(out) != (1, 1) {
            return Err(Error::Contract("grad_check target must be scalar".into()));
        }
        if !tape.scalar(out).is_finite() {
            return Err(Error::NonFinite("grad_check function value"));
        }
        Ok((tape, out))
    };

    // Analytic gradients.
    let (mut tape, out) = run(inputs)?;
    let ids: Vec<BufId> = (0..inputs.len()).collect();
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[id].values().len()])
        })
        .collect();

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<DenseMatrix> = inputs.to_vec();

    for (k, input) in inputs.iter().enumerate() {
        let mut input_rel = 0.0f64;
        for idx in 0..input.values().len() {
            let orig = input.values()[idx];

            perturb(&mut work[k], idx, orig + step)?;
            let (plus_tape, plus_out) = run(&work)?;
            let f_plus = plus_tape.scalar(plus_out);

            perturb(&mut work[k], idx, orig - step)?;
            let (minus_tape, minus_out) = run(&work)?;
            let f_minus = minus_tape.scalar(minus_out);

            perturb(&mut work[k], idx, orig)?;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite-difference quotient"));
            }
            let a = analytic[k][idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            input_rel = input_rel.max(rel);
        }
        per_input.push(input_rel);
    }

    Ok(GradCheckReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        per_input_errors: per_input,
        passed: max_rel < tolerance,
    })
}

fn perturb(m: &mut DenseMatrix, flat_idx: usize, value: f64) -> Result<()> {
    let cols = m.cols();
    m.set(flat_idx / cols, flat_idx % cols, value);
    Ok(())
}
