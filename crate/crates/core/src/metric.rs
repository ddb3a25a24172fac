//! The natural-gradient metric as a matrix-free operator.
//!
//! For model samples `x_m` with weights `w_m` (uniform `1/M` for chain
//! samples), the metric is the weighted covariance of the energy gradient.
//! With `S` the `M x N` matrix of per-sample gradients and `S̄` its weighted
//! column mean,
//!
//! ```text
//! L y = (S - S̄)^T diag(w) [(S - S̄) y] + alpha y
//! ```
//!
//! is evaluated as two matrix-vector products through a length-`M`
//! intermediate; the `N x N` matrix is only ever formed by [`dense_metric`],
//! which exists for testing.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::model::{EnergyModel, JointState};
use crate::solver::LinearOperator;

/// Default cap on `N` for [`dense_metric`].
pub const DENSE_CAP: usize = 2000;

/// Per-sample energy gradients and their weighted column mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    /// `M x N`, row `m` is `dE(x_m)/dθ`.
    pub rows: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub mean: DVector<f64>,
}

impl SampleMatrix {
    /// Uniformly weighted rows `energy_grad(model, state_m)`.
    pub fn from_states<M: EnergyModel>(model: &M, states: &[JointState]) -> Result<Self> {
        let flat: Vec<&[f64]> = states.iter().map(JointState::as_flat).collect();
        let w = 1.0 / states.len().max(1) as f64;
        Self::build(model, &flat, vec![w; states.len()])
    }

    /// Rows from flat states with explicit probability weights.
    pub fn from_weighted<M: EnergyModel>(model: &M, states: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        check_len("sample weights", states.len(), weights.len())?;
        let flat: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
        Self::build(model, &flat, weights.to_vec())
    }

    fn build<M: EnergyModel>(model: &M, states: &[&[f64]], weights: Vec<f64>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument("sample matrix needs at least one sample".into()));
        }
        let n = model.num_params();
        let mut rows = DMatrix::<f64>::zeros(states.len(), n);
        let mut buf = vec![0.0; n];
        for (m, x) in states.iter().enumerate() {
            check_len("sample state", model.num_units(), x.len())?;
            model.energy_grad_flat(x, &mut buf);
            for (j, &v) in buf.iter().enumerate() {
                rows[(m, j)] = v;
            }
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mean = rows.tr_mul(&DVector::from_column_slice(&weights));
        Ok(Self { rows, weights, mean })
    }

    pub fn num_samples(&self) -> usize {
        self.rows.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.rows.ncols()
    }

    /// Weighted mean of the rows as a plain vector.
    pub fn mean_vec(&self) -> Vec<f64> {
        self.mean.as_slice().to_vec()
    }
}

/// `y -> (S - S̄)^T diag(w) (S - S̄) y + alpha y`, never materialising the product.
#[derive(Clone, Debug)]
pub struct MetricOperator {
    centered: DMatrix<f64>,
    weights: DVector<f64>,
    damping: f64,
}

impl MetricOperator {
    pub fn new(samples: &SampleMatrix, damping: f64) -> Result<Self> {
        if !(damping >= 0.0) {
            return Err(Error::InvalidArgument(format!("damping must be >= 0, got {damping}")));
        }
        let mut centered = samples.rows.clone();
        for (mut col, &mu) in centered.column_iter_mut().zip(samples.mean.iter()) {
            col.add_scalar_mut(-mu);
        }
        Ok(Self {
            centered,
            weights: DVector::from_column_slice(&samples.weights),
            damping,
        })
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn num_params(&self) -> usize {
        self.centered.ncols()
    }

    pub fn num_samples(&self) -> usize {
        self.centered.nrows()
    }

    /// The centered sample matrix `S - S̄`.
    pub fn centered(&self) -> &DMatrix<f64> {
        &self.centered
    }

    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len("metric operand", self.num_params(), y.len())?;
        let mut out = vec![0.0; y.len()];
        self.apply_into(y, &mut out);
        Ok(out)
    }

    fn apply_into(&self, y: &[f64], out: &mut [f64]) {
        let yv = DVector::from_column_slice(y);
        let t = (&self.centered * &yv).component_mul(&self.weights);
        let r = self.centered.tr_mul(&t);
        for ((o, &ri), &yi) in out.iter_mut().zip(r.iter()).zip(y) {
            *o = ri + self.damping * yi;
        }
    }

    /// `d_j = sum_m w_m (S - S̄)_mj^2 + alpha`.
    pub fn diagonal(&self) -> Vec<f64> {
        self.centered
            .column_iter()
            .map(|col| col.iter().zip(self.weights.iter()).map(|(c, w)| w * c * c).sum::<f64>() + self.damping)
            .collect()
    }
}

impl LinearOperator for MetricOperator {
    fn dim(&self) -> usize {
        self.num_params()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.apply_into(x, out);
    }
}

/// Builds the sample matrix of the negative-phase states.
pub fn build_sample_matrix<M: EnergyModel>(model: &M, states: &[JointState]) -> Result<SampleMatrix> {
    SampleMatrix::from_states(model, states)
}

pub fn apply_metric(op: &MetricOperator, y: &[f64]) -> Result<Vec<f64>> {
    op.apply(y)
}

pub fn metric_diagonal(op: &MetricOperator) -> Vec<f64> {
    op.diagonal()
}

/// Explicit `(S - S̄)^T diag(w) (S - S̄) + alpha I`, capped at [`DENSE_CAP`].
pub fn dense_metric(op: &MetricOperator) -> Result<DMatrix<f64>> {
    dense_metric_capped(op, DENSE_CAP)
}

pub fn dense_metric_capped(op: &MetricOperator, cap: usize) -> Result<DMatrix<f64>> {
    let n = op.num_params();
    if n > cap {
        return Err(Error::DenseCap { n, cap });
    }
    let mut weighted = op.centered.clone();
    for (mut row, &w) in weighted.row_iter_mut().zip(op.weights.iter()) {
        row *= w;
    }
    let mut out = op.centered.tr_mul(&weighted);
    for i in 0..n {
        out[(i, i)] += op.damping;
    }
    // products are accumulated in different orders above and below the diagonal
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Writes the sample matrix as `rows u32, cols u32` followed by row-major
/// little-endian `f64` values.
pub fn write_sample_matrix<W: std::io::Write>(samples: &SampleMatrix, mut w: W) -> Result<()> {
    w.write_all(&(samples.num_samples() as u32).to_le_bytes())?;
    w.write_all(&(samples.num_params() as u32).to_le_bytes())?;
    for row in samples.rows.row_iter() {
        for v in row.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}
