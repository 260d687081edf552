//! Experiment harnesses: the synthetic convergence study against exact
//! marginals, uncertainty/error confusion counts and uncertainty-corrected
//! volume biomarkers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::crf_model::{build_grid_model, DenseCrfModel, KernelSpec, LabelMap, LabelSet, UnaryField, PROB_FLOOR};
use crate::error::{shape_err, Error, Result};
use crate::exact_oracle::{enumerate_gibbs, exact_marginals};
use crate::mean_field::{mean_field_infer, mpm_decode, InferenceConfig, MarginalField};
use crate::metrics::{entropy_map, UncertaintyMap};
use crate::perturbation::{
    accumulate_counts, empirical_marginals, for_each_sample, marginals_from_counts, perturb_and_mpm,
    SamplingConfig,
};

/// How the N voxels of a synthetic model are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Geometry {
    /// `(N,)`.
    Line,
    /// The most square `a x b` grid with `a * b = N`, `a <= b`.
    #[default]
    Grid2d,
}

impl Geometry {
    pub fn dims(self, n: usize) -> Vec<usize> {
        match self {
            Geometry::Line => vec![n],
            Geometry::Grid2d => {
                let a = (1..=n).filter(|a| n % a == 0 && a * a <= n).max().unwrap_or(1);
                if a == 1 {
                    vec![n]
                } else {
                    vec![a, n / a]
                }
            }
        }
    }
}

impl std::str::FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(Geometry::Line),
            "grid" | "grid2d" => Ok(Geometry::Grid2d),
            other => Err(Error::InvalidArgument(format!("unknown geometry '{other}'"))),
        }
    }
}

/// Whether the sample-count sweep reuses prefixes of one long run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleMode {
    #[default]
    Nested,
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticExperimentConfig {
    pub grid_sizes: Vec<usize>,
    pub sample_counts: Vec<usize>,
    pub n_inits: usize,
    pub base_seed: u64,
    pub kernel_weight: f64,
    pub kernel_bandwidth: f64,
    pub geometry: Geometry,
    pub mode: SampleMode,
    /// Also report the l1 distance between log-probabilities.
    pub log_errors: bool,
    pub euler_shift: bool,
    pub inference: InferenceConfig,
}

impl Default for SyntheticExperimentConfig {
    fn default() -> Self {
        Self {
            grid_sizes: vec![6, 9, 12],
            sample_counts: vec![10, 50, 100, 1_000, 10_000, 100_000, 1_000_000],
            n_inits: 20,
            base_seed: 0,
            kernel_weight: 1.0,
            kernel_bandwidth: 1.0,
            geometry: Geometry::default(),
            mode: SampleMode::default(),
            log_errors: false,
            euler_shift: true,
            inference: InferenceConfig::default(),
        }
    }
}

impl SyntheticExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.into()));
        if self.grid_sizes.is_empty() || self.grid_sizes.contains(&0) {
            return bad("grid sizes must be positive");
        }
        if self.grid_sizes.iter().any(|&n| n > 24) {
            return bad("grid sizes above 24 exceed the exact oracle");
        }
        if self.sample_counts.is_empty() || self.sample_counts.contains(&0) {
            return bad("sample counts must be positive");
        }
        if self.n_inits == 0 {
            return bad("n_inits must be positive");
        }
        if !(self.kernel_weight >= 0.0 && self.kernel_weight.is_finite()) {
            return bad("kernel weight must be finite and non-negative");
        }
        if !(self.kernel_bandwidth > 0.0 && self.kernel_bandwidth.is_finite()) {
            return bad("kernel bandwidth must be finite and positive");
        }
        self.inference.validate()
    }
}

/// Errors averaged over voxels and initialisations.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub n: usize,
    pub samples: usize,
    /// Mean per-voxel `l1` distance of the empirical marginals to the exact ones.
    pub mpm_error: f64,
    /// Same for the unperturbed mean-field marginals (independent of `samples`).
    pub mean_field_error: f64,
    pub mpm_log_error: Option<f64>,
    pub mean_field_log_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorCurve {
    pub rows: Vec<ErrorRow>,
}

impl ErrorCurve {
    pub fn rows_for(&self, n: usize) -> impl Iterator<Item = &ErrorRow> {
        self.rows.iter().filter(move |r| r.n == n)
    }

    pub fn row(&self, n: usize, samples: usize) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.n == n && r.samples == samples)
    }
}

impl std::fmt::Display for ErrorCurve {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:>4} {:>9} {:>12} {:>12}", "N", "samples", "mpm_l1", "mf_l1")?;
        for r in &self.rows {
            writeln!(f, "{:>4} {:>9} {:>12.6} {:>12.6}", r.n, r.samples, r.mpm_error, r.mean_field_error)?;
        }
        Ok(())
    }
}

/// Mean over voxels of `sum_l |a_il - b_il|`.
pub fn mean_l1(a: &MarginalField, b: &MarginalField) -> f64 {
    let total: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum();
    total / a.n_voxels() as f64
}

/// Mean over voxels of `sum_l |ln a_il - ln b_il|`, probabilities floored at `1e-12`.
pub fn mean_log_l1(a: &MarginalField, b: &MarginalField) -> f64 {
    let ln = |p: f64| p.max(PROB_FLOOR).ln();
    let total: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (ln(*x) - ln(*y)).abs()).sum();
    total / a.n_voxels() as f64
}

/// Independent seed for cell `(n, init)` and purpose `k`.
fn cell_seed(base: u64, n: usize, init: usize, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(((n as u64) << 40) ^ ((init as u64) << 8) ^ k);
    rng.next_u64()
}

/// Binary model with `psi(0) = -ln p`, `psi(1) = -ln(1 - p)`, `p ~ U[0, 1)`.
pub fn random_binary_model(
    dims: &[usize],
    seed: u64,
    kernel_weight: f64,
    kernel_bandwidth: f64,
) -> Result<DenseCrfModel> {
    let n: usize = dims.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs: Vec<f64> = (0..n)
        .flat_map(|_| {
            let p: f64 = rng.random();
            [p, 1.0 - p]
        })
        .collect();
    let unary = UnaryField::from_probabilities(n, 2, &probs)?;
    build_grid_model(
        dims,
        LabelSet::new(2)?,
        unary,
        &[KernelSpec::spatial(kernel_weight, kernel_bandwidth)],
    )
}

struct CellErrors {
    n: usize,
    mean_field: (f64, f64),
    /// Per sample count: (l1, log l1).
    mpm: Vec<(f64, f64)>,
}

fn run_cell(cfg: &SyntheticExperimentConfig, n: usize, init: usize) -> Result<CellErrors> {
    let dims = cfg.geometry.dims(n);
    let model = random_binary_model(&dims, cell_seed(cfg.base_seed, n, init, 0), cfg.kernel_weight, cfg.kernel_bandwidth)?;
    let exact = exact_marginals(&enumerate_gibbs(&model)?);
    let q = mean_field_infer(&model, &cfg.inference)?.marginals;
    let score = |f: &MarginalField| (mean_l1(f, &exact), mean_log_l1(f, &exact));
    let sampling = |samples: usize, k: u64| SamplingConfig {
        samples,
        seed: cell_seed(cfg.base_seed, n, init, k),
        euler_shift: cfg.euler_shift,
        inference: cfg.inference,
    };

    let mpm = match cfg.mode {
        SampleMode::Nested => {
            let mut order: Vec<usize> = cfg.sample_counts.clone();
            order.sort_unstable();
            order.dedup();
            let max = *order.last().expect("validated non-empty");
            let mut counts = vec![0u64; n * 2];
            let mut at_prefix = Vec::with_capacity(order.len());
            let mut next = 0;
            for_each_sample(&model, &sampling(max, 1), |t, s| {
                accumulate_counts(&mut counts, &s, 2);
                while next < order.len() && order[next] == t + 1 {
                    at_prefix.push(marginals_from_counts(&counts, 2, t + 1).map(|f| score(&f)));
                    next += 1;
                }
            })?;
            let at_prefix = at_prefix.into_iter().collect::<Result<Vec<_>>>()?;
            cfg.sample_counts
                .iter()
                .map(|c| at_prefix[order.binary_search(c).expect("count is in the sorted list")])
                .collect()
        }
        SampleMode::Independent => cfg
            .sample_counts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let set = perturb_and_mpm(&model, &sampling(c, 2 + k as u64))?;
                Ok(score(&empirical_marginals(&set)?))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(CellErrors { n, mean_field: score(&q), mpm })
}

/// Compares Perturb-and-MPM and plain mean-field marginals with exact
/// marginals on random binary models. Cells run concurrently; the result is
/// bitwise reproducible for a fixed `base_seed`.
pub fn run_synthetic_experiment(cfg: &SyntheticExperimentConfig) -> Result<ErrorCurve> {
    cfg.validate()?;
    let cells: Vec<(usize, usize)> = cfg
        .grid_sizes
        .iter()
        .flat_map(|&n| (0..cfg.n_inits).map(move |i| (n, i)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(n, i)| run_cell(cfg, n, i))
        .collect::<Result<Vec<_>>>()?;

    let inits = cfg.n_inits as f64;
    let mut curve = ErrorCurve::default();
    for &n in &cfg.grid_sizes {
        let group: Vec<&CellErrors> = results.iter().filter(|c| c.n == n).collect();
        let mf = group.iter().map(|c| c.mean_field.0).sum::<f64>() / inits;
        let mf_log = group.iter().map(|c| c.mean_field.1).sum::<f64>() / inits;
        for (k, &samples) in cfg.sample_counts.iter().enumerate() {
            let mpm = group.iter().map(|c| c.mpm[k].0).sum::<f64>() / inits;
            let mpm_log = group.iter().map(|c| c.mpm[k].1).sum::<f64>() / inits;
            curve.rows.push(ErrorRow {
                n,
                samples,
                mpm_error: mpm,
                mean_field_error: mf,
                mpm_log_error: cfg.log_errors.then_some(mpm_log),
                mean_field_log_error: cfg.log_errors.then_some(mf_log),
            });
        }
    }
    Ok(curve)
}

/// Voxel counts of the four (misclassified, uncertain) situations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyConfusion {
    /// Misclassified and uncertain.
    pub tp: usize,
    /// Misclassified but certain.
    pub fn_: usize,
    /// Correct but uncertain.
    pub fp: usize,
    /// Correct and certain.
    pub tn: usize,
}

impl UncertaintyConfusion {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    /// `tp / (tp + fn)`, `None` without misclassified voxels.
    pub fn sensitivity(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `tn / (tn + fp)`, `None` without correctly classified voxels.
    pub fn specificity(&self) -> Option<f64> {
        let d = self.tn + self.fp;
        (d > 0).then(|| self.tn as f64 / d as f64)
    }
}

pub fn uncertainty_confusion(
    pred: &LabelMap,
    truth: &LabelMap,
    u: &UncertaintyMap,
    threshold: f64,
    roi: Option<&[bool]>,
) -> Result<UncertaintyConfusion> {
    let n = pred.len();
    if truth.len() != n || u.len() != n || roi.is_some_and(|r| r.len() != n) {
        return shape_err("prediction, truth, uncertainty and roi must have the same voxel count");
    }
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be non-negative, got {threshold}")));
    }
    let mut c = UncertaintyConfusion { tp: 0, fn_: 0, fp: 0, tn: 0 };
    for i in 0..n {
        if roi.is_some_and(|r| !r[i]) {
            continue;
        }
        let wrong = pred.get(i) != truth.get(i);
        let uncertain = u.values()[i] > threshold;
        match (wrong, uncertain) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Extent of resection `(v_pre - v_post) / v_pre`.
pub fn compute_eor(v_pre: f64, v_post: f64) -> Result<f64> {
    if !(v_pre > 0.0) || !v_pre.is_finite() {
        return Err(Error::InvalidArgument(format!("EOR needs a positive pre-operative volume, got {v_pre}")));
    }
    if !(v_post >= 0.0) || !v_post.is_finite() {
        return Err(Error::InvalidArgument(format!("post-operative volume must be non-negative, got {v_post}")));
    }
    Ok((v_pre - v_post) / v_pre)
}

/// Volume of `target_label`, skipping voxels whose uncertainty exceeds `threshold`.
pub fn corrected_label_volume(
    pred: &LabelMap,
    u: &UncertaintyMap,
    threshold: f64,
    target_label: u32,
    voxel_volume: f64,
) -> Result<f64> {
    if pred.len() != u.len() {
        return shape_err(format!("prediction has {} voxels, uncertainty map {}", pred.len(), u.len()));
    }
    if !(voxel_volume > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel volume must be positive, got {voxel_volume}")));
    }
    let kept = pred
        .as_slice()
        .iter()
        .zip(u.values())
        .filter(|(&l, &h)| l == target_label && h <= threshold)
        .count();
    Ok(kept as f64 * voxel_volume)
}

pub fn label_volume(labels: &LabelMap, target_label: u32, voxel_volume: f64) -> f64 {
    labels.as_slice().iter().filter(|&&l| l == target_label).count() as f64 * voxel_volume
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiomarkerConfig {
    pub sampling: SamplingConfig,
    pub target_label: u32,
    pub threshold: f64,
    pub voxel_volume: f64,
}

impl Default for BiomarkerConfig {
    fn default() -> Self {
        Self { sampling: SamplingConfig::default(), target_label: 1, threshold: 0.0, voxel_volume: 1.0 }
    }
}

/// Consensus segmentation and its uncertainty for one model.
#[derive(Debug, Clone)]
pub struct SegmentationSummary {
    pub marginals: MarginalField,
    pub consensus: LabelMap,
    pub uncertainty: UncertaintyMap,
}

/// Samples the model and reduces the sample set to marginals, their argmax
/// and their entropy.
pub fn summarise_segmentation(model: &DenseCrfModel, cfg: &SamplingConfig) -> Result<SegmentationSummary> {
    let marginals = empirical_marginals(&perturb_and_mpm(model, cfg)?)?;
    Ok(SegmentationSummary {
        consensus: mpm_decode(&marginals),
        uncertainty: entropy_map(&marginals),
        marginals,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiomarkerReport {
    pub v_pre_truth: f64,
    pub v_post_truth: f64,
    pub v_pre: f64,
    pub v_post: f64,
    pub v_pre_corrected: f64,
    pub v_post_corrected: f64,
    pub eor_truth: f64,
    pub eor: f64,
    /// `None` when every pre-operative target voxel was excluded.
    pub eor_corrected: Option<f64>,
}

impl BiomarkerReport {
    pub fn rtv_error(&self) -> f64 {
        (self.v_post - self.v_post_truth).abs()
    }

    pub fn rtv_error_corrected(&self) -> f64 {
        (self.v_post_corrected - self.v_post_truth).abs()
    }

    pub fn eor_error(&self) -> f64 {
        (self.eor - self.eor_truth).abs()
    }

    pub fn eor_error_corrected(&self) -> Option<f64> {
        self.eor_corrected.map(|e| (e - self.eor_truth).abs())
    }
}

/// Uncorrected and uncertainty-corrected volumes, residual volume (RTV) and
/// extent of resection (EOR) from a pre- and a post-operative model.
pub fn run_biomarker_experiment(
    pre_model: &DenseCrfModel,
    post_model: &DenseCrfModel,
    truth_pre: &LabelMap,
    truth_post: &LabelMap,
    cfg: &BiomarkerConfig,
) -> Result<BiomarkerReport> {
    if truth_pre.len() != pre_model.n_voxels() || truth_post.len() != post_model.n_voxels() {
        return shape_err("ground truth does not match its model");
    }
    let pre = summarise_segmentation(pre_model, &cfg.sampling)?;
    let post = summarise_segmentation(post_model, &cfg.sampling)?;
    let (t, vv) = (cfg.target_label, cfg.voxel_volume);

    let v_pre_truth = label_volume(truth_pre, t, vv);
    let v_post_truth = label_volume(truth_post, t, vv);
    let v_pre = label_volume(&pre.consensus, t, vv);
    let v_post = label_volume(&post.consensus, t, vv);
    let v_pre_corrected = corrected_label_volume(&pre.consensus, &pre.uncertainty, cfg.threshold, t, vv)?;
    let v_post_corrected = corrected_label_volume(&post.consensus, &post.uncertainty, cfg.threshold, t, vv)?;
    Ok(BiomarkerReport {
        v_pre_truth,
        v_post_truth,
        v_pre,
        v_post,
        v_pre_corrected,
        v_post_corrected,
        eor_truth: compute_eor(v_pre_truth, v_post_truth)?,
        eor: compute_eor(v_pre, v_post)?,
        eor_corrected: compute_eor(v_pre_corrected, v_post_corrected).ok(),
    })
}
