//! Fully factorised mean-field inference for the dense CRF and MPM decoding.
//!
//! One sweep replaces every marginal simultaneously with
//!
//! ```text
//! Q'_i(l) ∝ exp(-psi_u(i, l) - sum_{j != i} k(i, j) (1 - Q_j(l)))
//! ```
//!
//! which is the Potts specialisation of `sum_{l'} sum_{j != i} Q_j(l') psi_p(l, l')`.
//! The pairwise message can be computed exactly in `O(N^2 m)` or
//! approximately through a permutohedral lattice in `O(N m d)`.

pub mod lattice;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::crf_model::{DenseCrfModel, GaussianKernel, LabelMap, UnaryField};
use crate::error::{shape_err, Error, Result};

pub use lattice::PermutohedralLattice;

/// Tolerance on row sums accepted by [`MarginalField::new`].
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Voxel counts above which the dense kernel matrix is not cached.
const DENSE_CACHE_LIMIT: usize = 4096;
/// Voxel counts above which per-voxel work is spread over the thread pool.
const PARALLEL_LIMIT: usize = 512;

/// Per-voxel categorical distributions, `N x m`, voxel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    n_voxels: usize,
    n_labels: usize,
    values: Vec<f64>,
}

impl MarginalField {
    pub fn new(n_voxels: usize, n_labels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_voxels * n_labels {
            return shape_err(format!(
                "marginal field expects {n_voxels}x{n_labels} values, got {}",
                values.len()
            ));
        }
        for (i, row) in values.chunks_exact(n_labels.max(1)).enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidModel(format!("voxel {i} has a probability outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidModel(format!("voxel {i} sums to {s}, not 1")));
            }
        }
        Ok(Self { n_voxels, n_labels, values })
    }

    pub(crate) fn from_raw(n_voxels: usize, n_labels: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), n_voxels * n_labels);
        Self { n_voxels, n_labels, values }
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

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_labels)
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.n_voxels != other.n_voxels || self.n_labels != other.n_labels {
            return shape_err(format!(
                "marginal fields differ in shape: {}x{} vs {}x{}",
                self.n_voxels, self.n_labels, other.n_voxels, other.n_labels
            ));
        }
        Ok(())
    }
}

/// Message-passing strategy for the pairwise term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Backend {
    #[default]
    Exact,
    Lattice,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "lattice" => Ok(Self::Lattice),
            other => Err(Error::InvalidArgument(format!(
                "unknown backend `{other}` (expected `exact` or `lattice`)"
            ))),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::Lattice => "lattice",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub max_iterations: usize,
    /// Stop once the largest change of any marginal falls below this.
    pub convergence_tol: f64,
    pub backend: Backend,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { max_iterations: 10, convergence_tol: 1e-5, backend: Backend::Exact }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "convergence_tol must be non-negative, got {}",
                self.convergence_tol
            )));
        }
        Ok(())
    }
}

/// Outcome of [`mean_field_infer`].
#[derive(Debug, Clone)]
pub struct Inference {
    pub marginals: MarginalField,
    /// Number of sweeps performed.
    pub iterations: usize,
    pub converged: bool,
}

enum Passer {
    /// Sum of all kernels, evaluated directly.
    Exact { dense: Option<Vec<f64>> },
    Lattice { weight: f64, lattice: PermutohedralLattice },
}

/// Mean-field engine with the pairwise structure of one model prepared once
/// (kernel matrix or lattices), reusable for any unary field of that shape.
pub struct MeanFieldSolver<'a> {
    model: &'a DenseCrfModel,
    cfg: InferenceConfig,
    passers: Vec<Passer>,
}

impl<'a> MeanFieldSolver<'a> {
    pub fn new(model: &'a DenseCrfModel, cfg: InferenceConfig) -> Result<Self> {
        cfg.validate()?;
        let n = model.n_voxels();
        let mut passers = Vec::new();
        if model.has_pairwise() {
            match cfg.backend {
                Backend::Exact => {
                    let dense = (n <= DENSE_CACHE_LIMIT).then(|| model.pairwise_matrix());
                    passers.push(Passer::Exact { dense });
                }
                Backend::Lattice => {
                    for k in model.kernels().iter().filter(|k| k.weight() > 0.0) {
                        passers.push(Passer::Lattice {
                            weight: k.weight(),
                            lattice: PermutohedralLattice::new(&k.standardized_features(), k.dim()),
                        });
                    }
                }
            }
        }
        Ok(Self { model, cfg, passers })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    /// Total pairwise message `N x m` for the current marginals.
    pub fn messages(&self, q: &MarginalField) -> Vec<f64> {
        let (n, m) = (q.n_voxels(), q.n_labels());
        let mut total = vec![0.0; n * m];
        for passer in &self.passers {
            let part = match passer {
                Passer::Exact { dense: Some(k) } => exact_messages_dense(k, q),
                Passer::Exact { dense: None } => exact_messages_on_the_fly(self.model, q),
                Passer::Lattice { weight, lattice } => lattice_messages(lattice, *weight, q),
            };
            total.iter_mut().zip(part).for_each(|(t, p)| *t += p);
        }
        total
    }

    /// One synchronous sweep using `unary` in place of the model's own unaries.
    pub fn step_with_unary(&self, unary: &UnaryField, q: &MarginalField) -> MarginalField {
        let m = q.n_labels();
        let mut energies = self.messages(q);
        energies
            .iter_mut()
            .zip(unary.values())
            .for_each(|(e, u)| *e += u);
        let normalise = |row: &mut [f64]| softmax_neg_in_place(row);
        if q.n_voxels() >= PARALLEL_LIMIT {
            energies.par_chunks_mut(m).for_each(normalise);
        } else {
            energies.chunks_mut(m).for_each(normalise);
        }
        MarginalField::from_raw(q.n_voxels(), m, energies)
    }

    /// Runs sweeps from the unary softmax until convergence or the iteration cap.
    pub fn infer_with_unary(&self, unary: &UnaryField) -> Inference {
        self.infer_traced(unary, |_, _| {})
    }

    /// Like [`infer_with_unary`](Self::infer_with_unary), calling `observe`
    /// with the initial field (iteration 0) and after every sweep.
    pub fn infer_traced(
        &self,
        unary: &UnaryField,
        mut observe: impl FnMut(usize, &MarginalField),
    ) -> Inference {
        let mut q = softmax_of_unary(unary);
        observe(0, &q);
        let mut converged = false;
        let mut iterations = 0;
        while iterations < self.cfg.max_iterations {
            let next = self.step_with_unary(unary, &q);
            iterations += 1;
            let delta = q
                .values
                .iter()
                .zip(&next.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            q = next;
            observe(iterations, &q);
            if delta < self.cfg.convergence_tol {
                converged = true;
                break;
            }
        }
        Inference { marginals: q, iterations, converged }
    }

    pub fn infer(&self) -> Inference {
        self.infer_with_unary(self.model.unary())
    }
}

/// `exp(-e) / sum exp(-e)` in place, shifted by the minimum for stability.
fn softmax_neg_in_place(row: &mut [f64]) {
    let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for e in row.iter_mut() {
        *e = (lo - *e).exp();
        z += *e;
    }
    row.iter_mut().for_each(|p| *p /= z);
}

fn softmax_of_unary(unary: &UnaryField) -> MarginalField {
    let mut values = unary.values().to_vec();
    values.chunks_mut(unary.n_labels()).for_each(softmax_neg_in_place);
    MarginalField::from_raw(unary.n_voxels(), unary.n_labels(), values)
}

fn exact_messages_dense(k: &[f64], q: &MarginalField) -> Vec<f64> {
    let (n, m) = (q.n_voxels(), q.n_labels());
    let row = |i: usize, out: &mut [f64]| {
        let ki = &k[i * n..(i + 1) * n];
        for (j, &w) in ki.iter().enumerate() {
            if w != 0.0 {
                for (o, &p) in out.iter_mut().zip(q.row(j)) {
                    *o += w * (1.0 - p);
                }
            }
        }
    };
    let mut out = vec![0.0; n * m];
    if n >= PARALLEL_LIMIT {
        out.par_chunks_mut(m).enumerate().for_each(|(i, o)| row(i, o));
    } else {
        out.chunks_mut(m).enumerate().for_each(|(i, o)| row(i, o));
    }
    out
}

fn exact_messages_on_the_fly(model: &DenseCrfModel, q: &MarginalField) -> Vec<f64> {
    let (n, m) = (q.n_voxels(), q.n_labels());
    let mut out = vec![0.0; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, o)| {
        for j in (0..n).filter(|&j| j != i) {
            let w = model.pairwise_weight(i, j);
            for (v, &p) in o.iter_mut().zip(q.row(j)) {
                *v += w * (1.0 - p);
            }
        }
    });
    out
}

fn lattice_messages(lattice: &PermutohedralLattice, weight: f64, q: &MarginalField) -> Vec<f64> {
    let m = q.n_labels();
    let complement: Vec<f64> = q.values().iter().map(|p| 1.0 - p).collect();
    let mut out = lattice.filter(&complement, m);
    for (i, row) in out.chunks_mut(m).enumerate() {
        let own = lattice.self_weight(i);
        for (o, c) in row.iter_mut().zip(&complement[i * m..(i + 1) * m]) {
            *o = weight * (*o - own * c);
        }
    }
    out
}

/// Softmax of the negative unaries, voxel by voxel.
pub fn mean_field_init(model: &DenseCrfModel) -> MarginalField {
    softmax_of_unary(model.unary())
}

fn check_field(model: &DenseCrfModel, q: &MarginalField) -> Result<()> {
    if q.n_voxels() != model.n_voxels() || q.n_labels() != model.n_labels() {
        return shape_err(format!(
            "marginal field is {}x{}, model is {}x{}",
            q.n_voxels(),
            q.n_labels(),
            model.n_voxels(),
            model.n_labels()
        ));
    }
    Ok(())
}

/// One parallel mean-field update of every marginal.
pub fn mean_field_step(model: &DenseCrfModel, q: &MarginalField, backend: Backend) -> Result<MarginalField> {
    check_field(model, q)?;
    let solver = MeanFieldSolver::new(model, InferenceConfig { backend, ..Default::default() })?;
    Ok(solver.step_with_unary(model.unary(), q))
}

pub fn mean_field_infer(model: &DenseCrfModel, cfg: &InferenceConfig) -> Result<Inference> {
    Ok(MeanFieldSolver::new(model, *cfg)?.infer())
}

/// `message(i, l) = sum_{j != i} k(i, j) sum_{l'} [l != l'] Q_j(l')` for one kernel.
pub fn message_pass_exact(model: &DenseCrfModel, q: &MarginalField, kernel: &GaussianKernel) -> Result<Vec<f64>> {
    check_field(model, q)?;
    let (n, m) = (q.n_voxels(), q.n_labels());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            let w = kernel.weight_between(i, j);
            let qj = q.row(j);
            for l in 0..m {
                let off: f64 = (0..m).filter(|&lp| lp != l).map(|lp| qj[lp]).sum();
                out[i * m + l] += w * off;
            }
        }
    }
    Ok(out)
}

/// Lattice approximation of [`message_pass_exact`] with the self term removed.
pub fn message_pass_lattice(model: &DenseCrfModel, q: &MarginalField, kernel: &GaussianKernel) -> Result<Vec<f64>> {
    check_field(model, q)?;
    if kernel.weight() == 0.0 {
        return Ok(vec![0.0; q.n_voxels() * q.n_labels()]);
    }
    let lattice = PermutohedralLattice::new(&kernel.standardized_features(), kernel.dim());
    Ok(lattice_messages(&lattice, kernel.weight(), q))
}

/// Per-voxel argmax; ties go to the lowest label.
pub fn mpm_decode(q: &MarginalField) -> LabelMap {
    let labels = q
        .rows()
        .map(|row| {
            let mut best = 0;
            for (l, &p) in row.iter().enumerate().skip(1) {
                if p > row[best] {
                    best = l;
                }
            }
            best as u32
        })
        .collect();
    LabelMap::from_raw(labels)
}
