//! Dense CRF definition: voxel grid, label set, unary field and weighted
//! Gaussian pairwise kernels with a Potts compatibility.
//!
//! The Gibbs energy of a labeling `x` is
//!
//! ```text
//! E(x) = sum_i psi_u(i, x_i) + sum_{i<j} sum_k w_k exp(-0.5 |(f_i - f_j) / sigma_k|^2) [x_i != x_j]
//! ```
//!
//! with every unordered pair counted once. Unary potentials are in nats;
//! lower means more likely.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking `-ln`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Number of labels `m`; labels are `0..m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSet(usize);

impl LabelSet {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidModel(format!("label set needs m >= 2, got {m}")));
        }
        Ok(Self(m))
    }

    pub fn len(&self) -> usize {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Row-major voxel grid of rank 1 to 3; the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridDims(Vec<usize>);

impl GridDims {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::InvalidModel(format!(
                "grid must have 1 to 3 axes, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidModel(format!("grid axes must be positive: {dims:?}")));
        }
        Ok(Self(dims.to_vec()))
    }

    pub fn axes(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.0.iter().product()
    }

    /// Integer coordinates of voxel `index`.
    pub fn coords(&self, index: usize) -> Vec<usize> {
        let mut rest = index;
        let mut out = vec![0; self.0.len()];
        for (axis, &len) in self.0.iter().enumerate().rev() {
            out[axis] = rest % len;
            rest /= len;
        }
        out
    }
}

/// Unary potentials `psi_u(i, l)` stored voxel-major (`N x m`).
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    n_voxels: usize,
    n_labels: usize,
    values: Vec<f64>,
}

impl UnaryField {
    pub fn new(n_voxels: usize, n_labels: usize, values: Vec<f64>) -> Result<Self> {
        if n_voxels == 0 {
            return Err(Error::InvalidModel("unary field has no voxels".into()));
        }
        if values.len() != n_voxels * n_labels {
            return shape_err(format!(
                "unary field expects {n_voxels}x{n_labels} = {} values, got {}",
                n_voxels * n_labels,
                values.len()
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "unary potential at voxel {}, label {} is not finite",
                pos / n_labels,
                pos % n_labels
            )));
        }
        Ok(Self { n_voxels, n_labels, values })
    }

    /// Converts per-voxel label probabilities into `-ln p` potentials.
    pub fn from_probabilities(n_voxels: usize, n_labels: usize, probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| p.is_nan()) {
            return Err(Error::InvalidModel("probability map contains NaN".into()));
        }
        let values = probs
            .iter()
            .map(|&p| -p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln())
            .collect();
        Self::new(n_voxels, n_labels, values)
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.values[voxel * self.n_labels..(voxel + 1) * self.n_labels]
    }

    pub fn get(&self, voxel: usize, label: usize) -> f64 {
        self.values[voxel * self.n_labels + label]
    }
}

/// `w * exp(-0.5 * sum_d ((f_i,d - f_j,d) / sigma_d)^2)` over a per-voxel feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    weight: f64,
    dim: usize,
    features: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl GaussianKernel {
    /// `features` holds one `bandwidths.len()`-vector per voxel, voxel-major.
    pub fn new(weight: f64, features: Vec<f64>, bandwidths: Vec<f64>) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidModel(format!("kernel weight must be finite and >= 0, got {weight}")));
        }
        if bandwidths.is_empty() {
            return Err(Error::InvalidModel("kernel needs at least one feature dimension".into()));
        }
        if bandwidths.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidModel(format!("kernel bandwidths must be positive: {bandwidths:?}")));
        }
        let dim = bandwidths.len();
        if features.len() % dim != 0 {
            return shape_err(format!(
                "feature map length {} is not a multiple of feature dimension {dim}",
                features.len()
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("feature map contains non-finite values".into()));
        }
        Ok(Self { weight, dim, features, bandwidths })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn n_points(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features divided by their bandwidths, so the kernel becomes a
    /// unit-variance Gaussian in the returned coordinates.
    pub fn standardized_features(&self) -> Vec<f64> {
        self.features
            .chunks_exact(self.dim)
            .flat_map(|f| f.iter().zip(&self.bandwidths).map(|(v, s)| v / s))
            .collect()
    }

    /// Kernel value between voxels `i` and `j`; lies in `[0, weight]`.
    pub fn weight_between(&self, i: usize, j: usize) -> f64 {
        let sq: f64 = self
            .feature(i)
            .iter()
            .zip(self.feature(j))
            .zip(&self.bandwidths)
            .map(|((a, b), s)| {
                let z = (a - b) / s;
                z * z
            })
            .sum();
        self.weight * (-0.5 * sq).exp()
    }
}

/// Free-function form of [`GaussianKernel::weight_between`].
pub fn kernel_weight(kernel: &GaussianKernel, i: usize, j: usize) -> f64 {
    kernel.weight_between(i, j)
}

/// Potts compatibility `1{l != l'}`.
pub fn potts(l: usize, l_prime: usize) -> f64 {
    if l == l_prime {
        0.0
    } else {
        1.0
    }
}

/// Optional per-voxel appearance channels appended to the spatial features.
#[derive(Debug, Clone, PartialEq)]
pub struct Appearance {
    /// `N x channels` values, voxel-major.
    pub values: Vec<f64>,
    /// One bandwidth per channel.
    pub bandwidths: Vec<f64>,
}

/// Kernel description resolved against a grid by [`build_grid_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub weight: f64,
    /// One bandwidth per grid axis, or a single value used for every axis.
    pub spatial_bandwidths: Vec<f64>,
    pub appearance: Option<Appearance>,
}

impl KernelSpec {
    /// Smoothness kernel over voxel positions.
    pub fn spatial(weight: f64, sigma: f64) -> Self {
        Self { weight, spatial_bandwidths: vec![sigma], appearance: None }
    }
}

/// Label sequence, one label per voxel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap(Vec<u32>);

impl LabelMap {
    pub fn new(values: Vec<u32>, labels: LabelSet) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&v| v as usize >= labels.len()) {
            return Err(Error::InvalidModel(format!(
                "label {bad} out of range for m = {}",
                labels.len()
            )));
        }
        Ok(Self(values))
    }

    /// Skips the range check; callers guarantee every value is a valid label.
    pub(crate) fn from_raw(values: Vec<u32>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, voxel: usize) -> usize {
        self.0[voxel] as usize
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }
}

/// A fully connected CRF over a voxel grid.
///
/// Immutable once built; kernels are reference counted so perturbed copies
/// share them.
#[derive(Debug, Clone)]
pub struct DenseCrfModel {
    dims: GridDims,
    labels: LabelSet,
    unary: UnaryField,
    kernels: Arc<[GaussianKernel]>,
}

impl DenseCrfModel {
    pub fn new(
        dims: GridDims,
        labels: LabelSet,
        unary: UnaryField,
        kernels: Vec<GaussianKernel>,
    ) -> Result<Self> {
        let n = dims.n_voxels();
        if unary.n_voxels() != n {
            return shape_err(format!(
                "unary field has {} voxels but grid {:?} has {n}",
                unary.n_voxels(),
                dims.axes()
            ));
        }
        if unary.n_labels() != labels.len() {
            return shape_err(format!(
                "unary field has {} labels, model has {}",
                unary.n_labels(),
                labels.len()
            ));
        }
        for (k, kernel) in kernels.iter().enumerate() {
            if kernel.n_points() != n {
                return shape_err(format!(
                    "kernel {k} has {} feature vectors, expected {n}",
                    kernel.n_points()
                ));
            }
        }
        Ok(Self { dims, labels, unary, kernels: kernels.into() })
    }

    pub fn dims(&self) -> &GridDims {
        &self.dims
    }

    pub fn labels(&self) -> LabelSet {
        self.labels
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.n_voxels()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn unary(&self) -> &UnaryField {
        &self.unary
    }

    pub fn kernels(&self) -> &[GaussianKernel] {
        &self.kernels
    }

    /// Same pairwise structure with a different unary field.
    pub fn with_unary(&self, unary: UnaryField) -> Result<Self> {
        if unary.n_voxels() != self.n_voxels() || unary.n_labels() != self.n_labels() {
            return shape_err(format!(
                "replacement unary is {}x{}, model is {}x{}",
                unary.n_voxels(),
                unary.n_labels(),
                self.n_voxels(),
                self.n_labels()
            ));
        }
        Ok(Self { unary, ..self.clone() })
    }

    /// Summed kernel value between two voxels.
    pub fn pairwise_weight(&self, i: usize, j: usize) -> f64 {
        self.kernels.iter().map(|k| k.weight_between(i, j)).sum()
    }

    /// Dense `N x N` matrix of summed kernel values with a zero diagonal.
    pub fn pairwise_matrix(&self) -> Vec<f64> {
        let n = self.n_voxels();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.pairwise_weight(i, j);
                out[i * n + j] = w;
                out[j * n + i] = w;
            }
        }
        out
    }

    pub fn has_pairwise(&self) -> bool {
        self.kernels.iter().any(|k| k.weight() > 0.0)
    }

    pub(crate) fn check_labeling(&self, labeling: &LabelMap) -> Result<()> {
        if labeling.len() != self.n_voxels() {
            return shape_err(format!(
                "labeling has {} voxels, model has {}",
                labeling.len(),
                self.n_voxels()
            ));
        }
        if labeling.as_slice().iter().any(|&l| l as usize >= self.n_labels()) {
            return Err(Error::InvalidModel("labeling contains an out-of-range label".into()));
        }
        Ok(())
    }
}

/// Gibbs energy of `labeling`.
pub fn energy(model: &DenseCrfModel, labeling: &LabelMap) -> Result<f64> {
    model.check_labeling(labeling)?;
    let x = labeling.as_slice();
    let unary: f64 = x
        .iter()
        .enumerate()
        .map(|(i, &l)| model.unary().get(i, l as usize))
        .sum();
    let mut pairwise = 0.0;
    for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            if x[i] != x[j] {
                pairwise += model.pairwise_weight(i, j);
            }
        }
    }
    Ok(unary + pairwise)
}

/// Builds a model whose kernel features are the voxel coordinates (plus
/// optional appearance channels).
pub fn build_grid_model(
    dims: &[usize],
    labels: LabelSet,
    unary: UnaryField,
    kernels: &[KernelSpec],
) -> Result<DenseCrfModel> {
    let grid = GridDims::new(dims)?;
    let n = grid.n_voxels();
    if unary.n_voxels() != n {
        return shape_err(format!(
            "grid {dims:?} has {n} voxels but unary field has {}",
            unary.n_voxels()
        ));
    }
    let coords: Vec<Vec<usize>> = (0..n).map(|i| grid.coords(i)).collect();
    let mut built = Vec::with_capacity(kernels.len());
    for (k, spec) in kernels.iter().enumerate() {
        let spatial = match spec.spatial_bandwidths.len() {
            1 => vec![spec.spatial_bandwidths[0]; grid.rank()],
            r if r == grid.rank() => spec.spatial_bandwidths.clone(),
            r => {
                return shape_err(format!(
                    "kernel {k} has {r} spatial bandwidths for a rank-{} grid",
                    grid.rank()
                ))
            }
        };
        let channels = spec.appearance.as_ref().map_or(0, |a| a.bandwidths.len());
        if let Some(app) = &spec.appearance {
            if app.values.len() != n * channels {
                return shape_err(format!(
                    "kernel {k} appearance has {} values, expected {n}x{channels}",
                    app.values.len()
                ));
            }
        }
        let mut features = Vec::with_capacity(n * (grid.rank() + channels));
        for (i, c) in coords.iter().enumerate() {
            features.extend(c.iter().map(|&v| v as f64));
            if let Some(app) = &spec.appearance {
                features.extend_from_slice(&app.values[i * channels..(i + 1) * channels]);
            }
        }
        let mut bandwidths = spatial;
        if let Some(app) = &spec.appearance {
            bandwidths.extend_from_slice(&app.bandwidths);
        }
        built.push(GaussianKernel::new(spec.weight, features, bandwidths)?);
    }
    DenseCrfModel::new(grid, labels, unary, built)
}
