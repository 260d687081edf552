//! Gumbel perturbations of the unary potentials and the Perturb-and-MPM
//! sampling loop.
//!
//! A standard Gumbel variate is `g = -ln(-ln u)` with `u ~ U(0, 1)`; with
//! `euler_shift` the Euler-Mascheroni constant is subtracted so that `g` has
//! zero mean. Energies are minimised, so noise enters them negated:
//! `argmin_j (theta_j - g_j)` picks `j` with probability
//! `exp(-theta_j) / sum_j' exp(-theta_j')`.
//!
//! Every sampling iteration `t` draws from its own ChaCha stream keyed by
//! `(seed, t)`, so iterations can run in any order (or concurrently) and still
//! reproduce bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crf_model::{DenseCrfModel, LabelMap, LabelSet, UnaryField};
use crate::error::{shape_err, Error, Result};
use crate::mean_field::{mpm_decode, InferenceConfig, MarginalField, MeanFieldSolver};

/// Euler-Mascheroni constant, the mean of a standard Gumbel variate.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Uniform draws are clamped to `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]`.
pub const UNIFORM_CLAMP: f64 = 1e-15;

/// Number of samples generated concurrently before they are handed over in order.
const SAMPLE_BATCH: usize = 1024;

/// `-ln(-ln u)`, minus the Euler constant when `euler_shift` is set.
pub fn gumbel_from_uniform(u: f64, euler_shift: bool) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    let g = -(-u.ln()).ln();
    if euler_shift {
        g - EULER_GAMMA
    } else {
        g
    }
}

/// Anything that produces Gumbel variates.
pub trait GumbelSource {
    fn next_gumbel(&mut self) -> f64;

    fn fill(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = self.next_gumbel());
    }
}

/// Seeded Gumbel stream.
#[derive(Debug, Clone)]
pub struct GumbelSampler {
    rng: ChaCha8Rng,
    euler_shift: bool,
}

impl GumbelSampler {
    pub fn new(seed: u64, euler_shift: bool) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), euler_shift }
    }

    /// Independent stream for sampling iteration `t` of a run seeded with `seed`.
    pub fn for_iteration(seed: u64, t: u64, euler_shift: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t);
        Self { rng, euler_shift }
    }

    pub fn euler_shift(&self) -> bool {
        self.euler_shift
    }

    /// Raw uniform draw on `[0, 1)` from the same stream.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

impl GumbelSource for GumbelSampler {
    fn next_gumbel(&mut self) -> f64 {
        let u = self.uniform();
        gumbel_from_uniform(u, self.euler_shift)
    }
}

/// Degenerate source that always returns zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl GumbelSource for ZeroNoise {
    fn next_gumbel(&mut self) -> f64 {
        0.0
    }
}

pub fn sample_gumbel(sampler: &mut impl GumbelSource, count: usize) -> Vec<f64> {
    let mut out = vec![0.0; count];
    sampler.fill(&mut out);
    out
}

/// Order-1 perturbation: one independent variate per (voxel, label) entry.
pub fn perturbed_unary(unary: &UnaryField, noise: &mut impl GumbelSource) -> UnaryField {
    let values = unary.values().iter().map(|&u| u - noise.next_gumbel()).collect();
    UnaryField::new(unary.n_voxels(), unary.n_labels(), values)
        .expect("perturbed unary keeps the shape and finiteness of its input")
}

/// Copy of `model` with Gumbel-perturbed unaries; kernels are shared.
pub fn perturb_unaries(model: &DenseCrfModel, noise: &mut impl GumbelSource) -> DenseCrfModel {
    model
        .with_unary(perturbed_unary(model.unary(), noise))
        .expect("perturbed unary has the model's shape")
}

/// `argmin_j (theta_j - g_j)` with fresh variates; ties go to the lowest index.
pub fn gumbel_max_select(theta: &[f64], noise: &mut impl GumbelSource) -> usize {
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (j, &t) in theta.iter().enumerate() {
        let v = t - noise.next_gumbel();
        if v < best_val {
            best_val = v;
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Number of perturbed MPM decodes `T`.
    pub samples: usize,
    pub seed: u64,
    pub euler_shift: bool,
    pub inference: InferenceConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { samples: 200, seed: 0, euler_shift: true, inference: InferenceConfig::default() }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument("sample count T must be at least 1".into()));
        }
        self.inference.validate()
    }
}

/// Ordered collection of sampled label maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    n_voxels: usize,
    n_labels: usize,
    samples: Vec<LabelMap>,
}

impl SampleSet {
    pub fn new(n_voxels: usize, labels: LabelSet) -> Self {
        Self { n_voxels, n_labels: labels.len(), samples: Vec::new() }
    }

    pub fn from_samples(n_voxels: usize, labels: LabelSet, samples: Vec<LabelMap>) -> Result<Self> {
        let mut set = Self::new(n_voxels, labels);
        for s in samples {
            set.push(s)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, sample: LabelMap) -> Result<()> {
        if sample.len() != self.n_voxels {
            return shape_err(format!("sample has {} voxels, set expects {}", sample.len(), self.n_voxels));
        }
        if sample.as_slice().iter().any(|&l| l as usize >= self.n_labels) {
            return Err(Error::InvalidModel("sample contains an out-of-range label".into()));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabelMap] {
        &self.samples
    }

    /// Per-voxel label histogram, `N x m`.
    pub fn label_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_voxels * self.n_labels];
        for s in &self.samples {
            accumulate_counts(&mut counts, s, self.n_labels);
        }
        counts
    }
}

pub(crate) fn accumulate_counts(counts: &mut [u64], sample: &LabelMap, n_labels: usize) {
    for (i, &l) in sample.as_slice().iter().enumerate() {
        counts[i * n_labels + l as usize] += 1;
    }
}

/// Normalises an `N x m` label histogram over `total` samples.
pub fn marginals_from_counts(counts: &[u64], n_labels: usize, total: usize) -> Result<MarginalField> {
    if total == 0 {
        return Err(Error::EmptySampleSet);
    }
    let inv = 1.0 / total as f64;
    let values = counts.iter().map(|&c| c as f64 * inv).collect();
    Ok(MarginalField::from_raw(counts.len() / n_labels, n_labels, values))
}

/// Relative label frequencies per voxel.
pub fn empirical_marginals(set: &SampleSet) -> Result<MarginalField> {
    marginals_from_counts(&set.label_counts(), set.n_labels, set.len())
}

/// Calls `visit(t, sample)` for `t = 0..T` in order. Samples are produced
/// concurrently in batches; each one only depends on `(model, cfg, t)`.
pub fn for_each_sample(
    model: &DenseCrfModel,
    cfg: &SamplingConfig,
    mut visit: impl FnMut(usize, LabelMap),
) -> Result<()> {
    cfg.validate()?;
    let solver = MeanFieldSolver::new(model, cfg.inference)?;
    let draw = |t: usize| {
        let mut noise = GumbelSampler::for_iteration(cfg.seed, t as u64, cfg.euler_shift);
        let unary = perturbed_unary(model.unary(), &mut noise);
        mpm_decode(&solver.infer_with_unary(&unary).marginals)
    };
    let mut start = 0;
    while start < cfg.samples {
        let end = (start + SAMPLE_BATCH).min(cfg.samples);
        let batch: Vec<LabelMap> = (start..end).into_par_iter().map(draw).collect();
        for (offset, sample) in batch.into_iter().enumerate() {
            visit(start + offset, sample);
        }
        start = end;
    }
    Ok(())
}

/// Perturb, run mean field, decode, repeat `T` times.
pub fn perturb_and_mpm(model: &DenseCrfModel, cfg: &SamplingConfig) -> Result<SampleSet> {
    let mut set = SampleSet::new(model.n_voxels(), model.labels());
    set.samples.reserve(cfg.samples);
    for_each_sample(model, cfg, |_, s| set.samples.push(s))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf_model::{build_grid_model, KernelSpec};
    use approx::assert_abs_diff_eq;

    #[test]
    fn gumbel_transform_fixed_points() {
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(gumbel_from_uniform((-1.0f64).exp(), false), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(gumbel_from_uniform((-1.0f64).exp(), true), -0.57722, epsilon = 1e-5);
        assert_abs_diff_eq!(gumbel_from_uniform((-e).exp(), false), -1.0, epsilon = 1e-14);
        assert!(gumbel_from_uniform(0.0, false).is_finite());
        assert!(gumbel_from_uniform(1.0, false).is_finite());
    }

    #[test]
    fn samplers_are_reproducible() {
        let a = sample_gumbel(&mut GumbelSampler::new(7, true), 64);
        let b = sample_gumbel(&mut GumbelSampler::new(7, true), 64);
        let c = sample_gumbel(&mut GumbelSampler::new(8, true), 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let t0 = sample_gumbel(&mut GumbelSampler::for_iteration(7, 0, true), 8);
        let t1 = sample_gumbel(&mut GumbelSampler::for_iteration(7, 1, true), 8);
        assert_ne!(t0, t1);
    }

    fn small_model() -> DenseCrfModel {
        let unary = UnaryField::new(3, 2, vec![0.1, 0.9, 0.4, 0.2, 1.5, 0.0]).unwrap();
        build_grid_model(&[3], LabelSet::new(2).unwrap(), unary, &[KernelSpec::spatial(0.5, 1.0)]).unwrap()
    }

    #[test]
    fn zero_noise_leaves_unaries_alone() {
        let model = small_model();
        let out = perturb_unaries(&model, &mut ZeroNoise);
        assert_eq!(out.unary(), model.unary());
        assert_eq!(out.kernels(), model.kernels());
    }

    #[test]
    fn perturbation_depends_on_seed_only() {
        let model = small_model();
        let a = perturb_unaries(&model, &mut GumbelSampler::new(1, true));
        let b = perturb_unaries(&model, &mut GumbelSampler::new(1, true));
        let c = perturb_unaries(&model, &mut GumbelSampler::new(2, true));
        assert_eq!(a.unary(), b.unary());
        assert_ne!(a.unary(), c.unary());
        assert_eq!(model.unary().get(0, 0), 0.1);
    }

    #[test]
    fn select_with_zero_noise_is_argmin() {
        assert_eq!(gumbel_max_select(&[0.3, -1.0, 2.0], &mut ZeroNoise), 1);
        assert_eq!(gumbel_max_select(&[0.0, 0.0], &mut ZeroNoise), 0);
    }

    #[test]
    fn empirical_marginal_counting() {
        let labels = LabelSet::new(2).unwrap();
        let maps = |v: &[&[u32]]| v.iter().map(|s| LabelMap::new(s.to_vec(), labels).unwrap()).collect::<Vec<_>>();

        let set = SampleSet::from_samples(1, labels, maps(&[&[0], &[0], &[1], &[1]])).unwrap();
        assert_eq!(empirical_marginals(&set).unwrap().row(0), &[0.5, 0.5]);

        let set = SampleSet::from_samples(2, labels, maps(&[&[1, 0]])).unwrap();
        assert_eq!(empirical_marginals(&set).unwrap().values(), &[0.0, 1.0, 1.0, 0.0]);

        let set = SampleSet::from_samples(2, labels, maps(&[&[0, 1], &[0, 1], &[0, 0]])).unwrap();
        let f = empirical_marginals(&set).unwrap();
        assert_eq!(f.row(0), &[1.0, 0.0]);
        assert_abs_diff_eq!(f.get(1, 0), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f.get(1, 1), 2.0 / 3.0, epsilon = 1e-15);

        let empty = SampleSet::new(2, labels);
        assert!(matches!(empirical_marginals(&empty), Err(Error::EmptySampleSet)));
    }

    #[test]
    fn sample_set_rejects_bad_samples() {
        let labels = LabelSet::new(2).unwrap();
        let mut set = SampleSet::new(2, labels);
        assert!(set.push(LabelMap::from_raw(vec![0])).is_err());
        assert!(set.push(LabelMap::from_raw(vec![0, 2])).is_err());
    }

    #[test]
    fn single_sample_run() {
        let cfg = SamplingConfig { samples: 1, seed: 3, ..Default::default() };
        let set = perturb_and_mpm(&small_model(), &cfg).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.samples()[0].len(), 3);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let cfg = SamplingConfig { samples: 2500, seed: 11, ..Default::default() };
        let a = perturb_and_mpm(&small_model(), &cfg).unwrap();
        let b = perturb_and_mpm(&small_model(), &cfg).unwrap();
        assert_eq!(a, b);
        let c = perturb_and_mpm(&small_model(), &SamplingConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_samples_rejected() {
        let cfg = SamplingConfig { samples: 0, ..Default::default() };
        assert!(perturb_and_mpm(&small_model(), &cfg).is_err());
    }
}
