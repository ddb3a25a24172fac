//! Boltzmann machine energy functions and the flat parameter layout.
//!
//! Two model families live here:
//!
//! * [`GenericBm`], a fully visible machine with a symmetric, zero-diagonal
//!   weight matrix. Small instances serve as ground-truth fixtures.
//! * [`DbmModel`], a layered deep Boltzmann machine with fixed per-unit
//!   centering offsets `c`. Its energy is
//!   `E(x) = -sum_l (x^(l-1) - c^(l-1))^T W^(l) (x^(l) - c^(l)) - sum_l b^(l)^T (x^(l) - c^(l))`.
//!
//! Both implement [`EnergyModel`], which is what the exact oracles and the
//! metric builders consume. States are handled as flat unit vectors with the
//! visible units first.
//!
//! The DBM parameter layout is `W^(1), ..., W^(K), b^(0), ..., b^(K)`, each
//! weight block row-major with shape `n_(l-1) x n_l`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{check_len, Error, Result};

/// One named block of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, disjoint blocks covering `[0, len)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    len: usize,
}

impl ParamLayout {
    pub fn new<S: Into<String>>(shapes: impl IntoIterator<Item = (S, usize, usize)>) -> Self {
        let mut offset = 0;
        let blocks = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let b = Block {
                    name: name.into(),
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                b
            })
            .collect();
        Self { blocks, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Flat parameter vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        check_len("parameter vector", layout.len(), values.len())?;
        Ok(Self { values, layout })
    }

    /// Rebuilds a vector from per-block slices given in layout order.
    pub fn flatten(layout: Arc<ParamLayout>, blocks: &[Vec<f64>]) -> Result<Self> {
        check_len("block count", layout.blocks().len(), blocks.len())?;
        let mut values = Vec::with_capacity(layout.len());
        for (spec, data) in layout.blocks().iter().zip(blocks) {
            check_len("parameter block", spec.len(), data.len())?;
            values.extend_from_slice(data);
        }
        Ok(Self { values, layout })
    }

    /// Splits into per-block vectors in layout order.
    pub fn unflatten(&self) -> Vec<Vec<f64>> {
        self.layout
            .blocks()
            .iter()
            .map(|b| self.values[b.range()].to_vec())
            .collect()
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block(&self, index: usize) -> &[f64] {
        &self.values[self.layout.blocks()[index].range()]
    }

    pub fn block_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layout.blocks()[index].range();
        &mut self.values[range]
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &ParamVector) {
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A configuration of all units, stored flat with per-layer boundaries.
///
/// Sampler output is strictly binary; positive-phase states produced by
/// mean-field inference may hold marginals in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    values: Vec<f64>,
    bounds: Arc<[usize]>,
}

impl JointState {
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        let bounds = layer_bounds(layer_sizes);
        Self {
            values: vec![0.0; *bounds.last().unwrap()],
            bounds,
        }
    }

    pub fn from_layers(layers: &[Vec<f64>]) -> Self {
        let sizes: Vec<usize> = layers.iter().map(Vec::len).collect();
        Self {
            values: layers.concat(),
            bounds: layer_bounds(&sizes),
        }
    }

    pub fn from_flat(layer_sizes: &[usize], values: Vec<f64>) -> Result<Self> {
        let bounds = layer_bounds(layer_sizes);
        check_len("joint state", *bounds.last().unwrap(), values.len())?;
        Ok(Self { values, bounds })
    }

    pub fn num_layers(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.bounds.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.values[self.bounds[l]..self.bounds[l + 1]]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.values[self.bounds[l]..self.bounds[l + 1]]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

fn layer_bounds(sizes: &[usize]) -> Arc<[usize]> {
    let mut bounds = Vec::with_capacity(sizes.len() + 1);
    let mut acc = 0;
    bounds.push(0);
    for &s in sizes {
        acc += s;
        bounds.push(acc);
    }
    bounds.into()
}

/// Common surface of energy-based models over binary units.
///
/// States are flat slices with the visible units first. The energy must be
/// affine in every single unit (no self-interaction), which is what makes
/// [`EnergyModel::local_field`] well defined.
pub trait EnergyModel: Sync {
    fn num_units(&self) -> usize;
    fn num_visible(&self) -> usize;
    fn num_params(&self) -> usize;
    fn params(&self) -> &[f64];
    /// Same model structure with a replaced flat parameter vector.
    fn with_params(&self, values: &[f64]) -> Self
    where
        Self: Sized;
    fn energy_flat(&self, x: &[f64]) -> f64;
    fn energy_grad_flat(&self, x: &[f64], out: &mut [f64]);

    /// `E(x | x_unit = 0) - E(x | x_unit = 1)`.
    fn local_field(&self, x: &[f64], unit: usize) -> f64 {
        let mut y = x.to_vec();
        y[unit] = 0.0;
        let e0 = self.energy_flat(&y);
        y[unit] = 1.0;
        e0 - self.energy_flat(&y)
    }
}

/// Fully visible Boltzmann machine with pairwise weights over `k < l`.
///
/// Layout: block `"W"` holds the strict upper triangle row by row, block
/// `"b"` the biases.
#[derive(Clone, Debug, PartialEq)]
pub struct GenericBm {
    n_units: usize,
    params: ParamVector,
}

impl GenericBm {
    pub fn new(n_units: usize) -> Self {
        let pairs = n_units * n_units.saturating_sub(1) / 2;
        let layout = Arc::new(ParamLayout::new([("W", 1, pairs), ("b", 1, n_units)]));
        Self {
            n_units,
            params: ParamVector::zeros(layout),
        }
    }

    /// Builds from a full matrix, which must be symmetric with zero diagonal.
    pub fn from_dense(weights: &[Vec<f64>], biases: &[f64]) -> Result<Self> {
        let n = biases.len();
        check_len("weight rows", n, weights.len())?;
        let mut bm = Self::new(n);
        for (k, row) in weights.iter().enumerate() {
            check_len("weight columns", n, row.len())?;
            if row[k] != 0.0 {
                return Err(Error::InvalidArgument(format!("weight diagonal entry {k} is nonzero")));
            }
            for l in (k + 1)..n {
                if row[l] != weights[l][k] {
                    return Err(Error::InvalidArgument(format!("weights not symmetric at ({k}, {l})")));
                }
                let idx = bm.pair_index(k, l);
                bm.params.values_mut()[idx] = row[l];
            }
        }
        let off = bm.n_pairs();
        bm.params.values_mut()[off..].copy_from_slice(biases);
        Ok(bm)
    }

    /// Weights uniform in `[-w_scale, w_scale]`, biases in `[-b_scale, b_scale]`.
    pub fn random<R: Rng + ?Sized>(n_units: usize, w_scale: f64, b_scale: f64, rng: &mut R) -> Self {
        let mut bm = Self::new(n_units);
        let pairs = bm.n_pairs();
        for (i, v) in bm.params.values_mut().iter_mut().enumerate() {
            let s = if i < pairs { w_scale } else { b_scale };
            *v = rng.random_range(-1.0..=1.0) * s;
        }
        bm
    }

    pub fn n_pairs(&self) -> usize {
        self.n_units * self.n_units.saturating_sub(1) / 2
    }

    /// Flat index of `W_kl` (`k != l`).
    pub fn pair_index(&self, k: usize, l: usize) -> usize {
        let (k, l) = if k < l { (k, l) } else { (l, k) };
        debug_assert!(k != l && l < self.n_units);
        // rows 0..k contribute n-1, n-2, ..., n-k entries
        k * (2 * self.n_units - k - 1) / 2 + (l - k - 1)
    }

    pub fn weight(&self, k: usize, l: usize) -> f64 {
        if k == l {
            0.0
        } else {
            self.params.values()[self.pair_index(k, l)]
        }
    }

    pub fn bias(&self, k: usize) -> f64 {
        self.params.values()[self.n_pairs() + k]
    }

    pub fn param_vector(&self) -> &ParamVector {
        &self.params
    }

    pub fn param_vector_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }
}

impl EnergyModel for GenericBm {
    fn num_units(&self) -> usize {
        self.n_units
    }

    fn num_visible(&self) -> usize {
        self.n_units
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        self.params.values()
    }

    fn with_params(&self, values: &[f64]) -> Self {
        let mut out = self.clone();
        out.params.values_mut().copy_from_slice(values);
        out
    }

    fn energy_flat(&self, x: &[f64]) -> f64 {
        let n = self.n_units;
        let p = self.params.values();
        let mut e = 0.0;
        let mut idx = 0;
        for k in 0..n {
            for l in (k + 1)..n {
                e -= p[idx] * x[k] * x[l];
                idx += 1;
            }
        }
        for k in 0..n {
            e -= p[idx + k] * x[k];
        }
        e
    }

    fn energy_grad_flat(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_units;
        let mut idx = 0;
        for k in 0..n {
            for l in (k + 1)..n {
                out[idx] = -x[k] * x[l];
                idx += 1;
            }
        }
        for k in 0..n {
            out[idx + k] = -x[k];
        }
    }

    fn local_field(&self, x: &[f64], unit: usize) -> f64 {
        let mut f = self.bias(unit);
        for j in 0..self.n_units {
            if j != unit {
                f += self.weight(unit, j) * x[j];
            }
        }
        f
    }
}

/// Centered deep Boltzmann machine.
#[derive(Clone, Debug, PartialEq)]
pub struct DbmModel {
    layer_sizes: Vec<usize>,
    params: ParamVector,
    offsets: Vec<f64>,
    unit_bounds: Vec<usize>,
}

impl DbmModel {
    /// Zero-parameter model with all offsets zero.
    pub fn new(layer_sizes: &[usize]) -> Result<Self> {
        let total = layer_sizes.iter().sum();
        Self::with_offsets(layer_sizes, vec![0.0; total])
    }

    /// Zero-parameter model with the given flat offsets (layer order).
    pub fn with_offsets(layer_sizes: &[usize], offsets: Vec<f64>) -> Result<Self> {
        if layer_sizes.is_empty() || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "layer sizes must be a nonempty list of positive integers".into(),
            ));
        }
        let total: usize = layer_sizes.iter().sum();
        check_len("centering offsets", total, offsets.len())?;
        if let Some(c) = offsets.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidArgument(format!("centering offset {c} outside [0, 1]")));
        }
        let mut shapes = Vec::with_capacity(2 * layer_sizes.len());
        for l in 1..layer_sizes.len() {
            shapes.push((format!("W{l}"), layer_sizes[l - 1], layer_sizes[l]));
        }
        for (l, &n) in layer_sizes.iter().enumerate() {
            shapes.push((format!("b{l}"), 1, n));
        }
        let layout = Arc::new(ParamLayout::new(shapes));
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: ParamVector::zeros(layout),
            offsets,
            unit_bounds: layer_bounds(layer_sizes).to_vec(),
        })
    }

    /// Visible offsets from the data mean, hidden offsets at 0.5.
    pub fn with_data_offsets(layer_sizes: &[usize], visible_mean: &[f64]) -> Result<Self> {
        check_len(
            "visible mean",
            layer_sizes.first().copied().unwrap_or(0),
            visible_mean.len(),
        )?;
        let mut offsets = visible_mean.to_vec();
        offsets.extend(std::iter::repeat_n(0.5, layer_sizes[1..].iter().sum()));
        Self::with_offsets(layer_sizes, offsets)
    }

    /// Draws weights uniformly in `[-w_scale, w_scale]` and biases in `[-b_scale, b_scale]`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, w_scale: f64, b_scale: f64, rng: &mut R) {
        let n_weights = self.num_weights();
        for (i, v) in self.params.values_mut().iter_mut().enumerate() {
            let s = if i < n_weights { w_scale } else { b_scale };
            *v = rng.random_range(-1.0..=1.0) * s;
        }
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn num_weights(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn param_vector(&self) -> &ParamVector {
        &self.params
    }

    pub fn param_vector_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        check_len("parameter vector", self.params.len(), values.len())?;
        self.params.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Weight block between layers `l - 1` and `l`, row-major `n_(l-1) x n_l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        self.params.block(l - 1)
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        self.params.block_mut(l - 1)
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        self.params.block(self.num_layers() - 1 + l)
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let idx = self.num_layers() - 1 + l;
        self.params.block_mut(idx)
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn layer_offsets(&self, l: usize) -> &[f64] {
        &self.offsets[self.unit_bounds[l]..self.unit_bounds[l + 1]]
    }

    pub fn unit_range(&self, l: usize) -> std::ops::Range<usize> {
        self.unit_bounds[l]..self.unit_bounds[l + 1]
    }

    /// Layer index of a flat unit index.
    pub fn layer_of(&self, unit: usize) -> usize {
        self.unit_bounds.partition_point(|&b| b <= unit) - 1
    }

    fn check_state(&self, state: &JointState) -> Result<()> {
        check_len("state layers", self.num_layers(), state.num_layers())?;
        for (l, &n) in self.layer_sizes.iter().enumerate() {
            check_len("state layer", n, state.layer(l).len())?;
        }
        Ok(())
    }

    pub fn energy(&self, state: &JointState) -> Result<f64> {
        self.check_state(state)?;
        Ok(self.energy_flat(state.as_flat()))
    }

    pub fn energy_grad(&self, state: &JointState) -> Result<ParamVector> {
        self.check_state(state)?;
        let mut g = ParamVector::zeros(self.params.layout().clone());
        self.energy_grad_flat(state.as_flat(), g.values_mut());
        Ok(g)
    }

    /// Total input to every unit of layer `l` given its neighbours in `x`:
    /// `b^(l) + W^(l)^T (x^(l-1) - c^(l-1)) + W^(l+1) (x^(l+1) - c^(l+1))`.
    pub fn layer_input(&self, x: &[f64], l: usize, out: &mut [f64]) {
        let n = self.layer_sizes[l];
        out[..n].copy_from_slice(self.bias(l));
        if l > 0 {
            let below = &x[self.unit_range(l - 1)];
            let c = self.layer_offsets(l - 1);
            let w = self.weights(l);
            for (j, (&xj, &cj)) in below.iter().zip(c).enumerate() {
                let d = xj - cj;
                if d == 0.0 {
                    continue;
                }
                let row = &w[j * n..(j + 1) * n];
                for (o, &wji) in out.iter_mut().zip(row) {
                    *o += wji * d;
                }
            }
        }
        if l + 1 < self.num_layers() {
            let m = self.layer_sizes[l + 1];
            let above = &x[self.unit_range(l + 1)];
            let c = self.layer_offsets(l + 1);
            let w = self.weights(l + 1);
            for (i, o) in out.iter_mut().enumerate().take(n) {
                let row = &w[i * m..(i + 1) * m];
                let mut acc = 0.0;
                for k in 0..m {
                    acc += row[k] * (above[k] - c[k]);
                }
                *o += acc;
            }
        }
    }

    /// Equivalent zero-offset model plus the constant `k` with
    /// `E_centered(x) = E_uncentered(x) + k` for every `x`.
    pub fn uncenter(&self) -> (DbmModel, f64) {
        let mut out = DbmModel::new(&self.layer_sizes).expect("sizes already validated");
        out.params = self.params.clone();
        let mut shift = 0.0;
        for l in 0..self.num_layers() {
            let n = self.layer_sizes[l];
            let c = self.layer_offsets(l);
            let mut b = self.bias(l).to_vec();
            shift += dot(self.bias(l), c);
            if l > 0 {
                // -(x - c)^T W (y - d): bias of y picks up -W^T c
                let cb = self.layer_offsets(l - 1);
                let w = self.weights(l);
                for (j, &cj) in cb.iter().enumerate() {
                    for i in 0..n {
                        b[i] -= w[j * n + i] * cj;
                    }
                }
            }
            if l + 1 < self.num_layers() {
                let m = self.layer_sizes[l + 1];
                let ca = self.layer_offsets(l + 1);
                let w = self.weights(l + 1);
                for (i, bi) in b.iter_mut().enumerate() {
                    for k in 0..m {
                        *bi -= w[i * m + k] * ca[k];
                    }
                }
                for i in 0..n {
                    for k in 0..m {
                        shift -= c[i] * w[i * m + k] * ca[k];
                    }
                }
            }
            out.bias_mut(l).copy_from_slice(&b);
        }
        (out, shift)
    }
}

impl EnergyModel for DbmModel {
    fn num_units(&self) -> usize {
        self.offsets.len()
    }

    fn num_visible(&self) -> usize {
        self.layer_sizes[0]
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        self.params.values()
    }

    fn with_params(&self, values: &[f64]) -> Self {
        let mut out = self.clone();
        out.params.values_mut().copy_from_slice(values);
        out
    }

    fn energy_flat(&self, x: &[f64]) -> f64 {
        let mut e = 0.0;
        for l in 0..self.num_layers() {
            let xs = &x[self.unit_range(l)];
            let c = self.layer_offsets(l);
            for ((&xi, &ci), &bi) in xs.iter().zip(c).zip(self.bias(l)) {
                e -= bi * (xi - ci);
            }
            if l > 0 {
                let n = self.layer_sizes[l];
                let below = &x[self.unit_range(l - 1)];
                let cb = self.layer_offsets(l - 1);
                let w = self.weights(l);
                for (j, (&xj, &cj)) in below.iter().zip(cb).enumerate() {
                    let d = xj - cj;
                    let row = &w[j * n..(j + 1) * n];
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += row[i] * (xs[i] - c[i]);
                    }
                    e -= d * acc;
                }
            }
        }
        e
    }

    fn energy_grad_flat(&self, x: &[f64], out: &mut [f64]) {
        let mut idx = 0;
        for l in 1..self.num_layers() {
            let below = &x[self.unit_range(l - 1)];
            let cb = self.layer_offsets(l - 1);
            let above = &x[self.unit_range(l)];
            let ca = self.layer_offsets(l);
            for (&xj, &cj) in below.iter().zip(cb) {
                let d = xj - cj;
                for (&xi, &ci) in above.iter().zip(ca) {
                    out[idx] = -d * (xi - ci);
                    idx += 1;
                }
            }
        }
        for (&xi, &ci) in x.iter().zip(&self.offsets) {
            out[idx] = -(xi - ci);
            idx += 1;
        }
    }

    fn local_field(&self, x: &[f64], unit: usize) -> f64 {
        let l = self.layer_of(unit);
        let i = unit - self.unit_bounds[l];
        let n = self.layer_sizes[l];
        let mut f = self.bias(l)[i];
        if l > 0 {
            let below = &x[self.unit_range(l - 1)];
            let cb = self.layer_offsets(l - 1);
            let w = self.weights(l);
            for (j, (&xj, &cj)) in below.iter().zip(cb).enumerate() {
                f += w[j * n + i] * (xj - cj);
            }
        }
        if l + 1 < self.num_layers() {
            let m = self.layer_sizes[l + 1];
            let above = &x[self.unit_range(l + 1)];
            let ca = self.layer_offsets(l + 1);
            let row = &self.weights(l + 1)[i * m..(i + 1) * m];
            for k in 0..m {
                f += row[k] * (above[k] - ca[k]);
            }
        }
        f
    }
}
