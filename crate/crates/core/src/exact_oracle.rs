//! Brute-force ground truth for tiny models.
//!
//! Labelings are indexed by a mixed-radix code with voxel 0 as the least
//! significant digit: `code = sum_i x_i * m^i`.

use rayon::prelude::*;

use crate::crf_model::{DenseCrfModel, LabelMap, UnaryField};
use crate::error::{shape_err, Error, Result};
use crate::mean_field::MarginalField;
use crate::perturbation::{perturbed_unary, GumbelSampler, GumbelSource};

/// Largest state space [`enumerate_gibbs`] and [`exact_map`] accept.
pub const ENUMERATION_LIMIT: u128 = 1 << 24;
/// Largest state space full-order perturbation accepts.
pub const FULL_ORDER_LIMIT: u128 = 1 << 20;

const PARALLEL_STATES: usize = 1 << 12;

/// `m^N`, saturating at `u128::MAX`.
pub fn state_count(n_voxels: usize, n_labels: usize) -> u128 {
    let mut total: u128 = 1;
    for _ in 0..n_voxels {
        total = total.saturating_mul(n_labels as u128);
    }
    total
}

fn check_capacity(n_voxels: usize, n_labels: usize, limit: u128) -> Result<usize> {
    let states = state_count(n_voxels, n_labels);
    if states > limit {
        return Err(Error::Capacity { states, limit });
    }
    Ok(states as usize)
}

/// Labels of the labeling with the given code.
pub fn decode_labeling(code: usize, n_voxels: usize, n_labels: usize) -> Vec<u32> {
    let mut c = code;
    (0..n_voxels)
        .map(|_| {
            let d = c % n_labels;
            c /= n_labels;
            d as u32
        })
        .collect()
}

pub fn encode_labeling(labels: &[u32], n_labels: usize) -> usize {
    labels.iter().rev().fold(0, |acc, &l| acc * n_labels + l as usize)
}

fn unary_sum(unary: &UnaryField, code: usize) -> f64 {
    let m = unary.n_labels();
    let mut c = code;
    let mut s = 0.0;
    for i in 0..unary.n_voxels() {
        s += unary.get(i, c % m);
        c /= m;
    }
    s
}

fn map_states<F>(states: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    if states >= PARALLEL_STATES {
        (0..states).into_par_iter().map(f).collect()
    } else {
        (0..states).map(f).collect()
    }
}

/// Lowest index of the minimum; NaN never wins.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (k, v) in values.enumerate() {
        if v < best_val {
            best_val = v;
            best = k;
        }
    }
    best
}

/// Pairwise part of the energy for every labeling, `sum_{i<j} k_ij [x_i != x_j]`.
pub fn pairwise_state_energies(model: &DenseCrfModel, limit: u128) -> Result<Vec<f64>> {
    let (n, m) = (model.n_voxels(), model.n_labels());
    let states = check_capacity(n, m, limit)?;
    if !model.has_pairwise() {
        return Ok(vec![0.0; states]);
    }
    let k = model.pairwise_matrix();
    Ok(map_states(states, |code| {
        let x = decode_labeling(code, n, m);
        let mut e = 0.0;
        for i in 0..n {
            let row = &k[i * n..(i + 1) * n];
            for j in i + 1..n {
                if x[i] != x[j] {
                    e += row[j];
                }
            }
        }
        e
    }))
}

/// Fully enumerated Gibbs distribution `P(X) = exp(-E(X)) / Z`.
#[derive(Debug, Clone)]
pub struct ExactDistribution {
    n_voxels: usize,
    n_labels: usize,
    energies: Vec<f64>,
    probabilities: Vec<f64>,
    log_partition: f64,
    cdf: Vec<f64>,
}

impl ExactDistribution {
    /// Normalises a table of energies indexed by labeling code.
    pub fn from_energies(n_voxels: usize, n_labels: usize, energies: Vec<f64>) -> Result<Self> {
        let states = check_capacity(n_voxels, n_labels, ENUMERATION_LIMIT)?;
        if energies.len() != states {
            return shape_err(format!("expected {states} energies, got {}", energies.len()));
        }
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::InvalidModel("non-finite energy".into()));
        }
        let lo = energies.iter().copied().fold(f64::INFINITY, f64::min);
        let mut probabilities: Vec<f64> = energies.iter().map(|e| (lo - e).exp()).collect();
        let z: f64 = probabilities.iter().sum();
        probabilities.iter_mut().for_each(|p| *p /= z);
        let log_partition = z.ln() - lo;
        let mut acc = 0.0;
        let cdf = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { n_voxels, n_labels, energies, probabilities, log_partition, cdf })
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_states(&self) -> usize {
        self.probabilities.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// `ln Z`.
    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn labeling(&self, code: usize) -> LabelMap {
        LabelMap::from_raw(decode_labeling(code, self.n_voxels, self.n_labels))
    }

    /// Code of the labeling with the lowest energy (lowest code on ties).
    pub fn map_code(&self) -> usize {
        argmin(self.energies.iter().copied())
    }

    /// Inverse-CDF lookup for `u` in `[0, 1)`.
    pub fn code_for_uniform(&self, u: f64) -> usize {
        let k = self.cdf.partition_point(|&c| c <= u);
        // rounding can leave the last CDF entry slightly below u
        let k = k.min(self.n_states() - 1);
        // never return a zero-probability state that the lookup landed on by rounding
        if self.probabilities[k] > 0.0 {
            k
        } else {
            self.probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(k)
        }
    }

    /// Argmin of `E(X) - g_X` with one fresh Gumbel variate per labeling.
    pub fn perturbed_map_code(&self, noise: &mut impl GumbelSource) -> Result<usize> {
        check_capacity(self.n_voxels, self.n_labels, FULL_ORDER_LIMIT)?;
        Ok(argmin(self.energies.iter().map(|&e| e - noise.next_gumbel())))
    }

    /// `KL(Q || P)` in nats for the fully factorised `Q`, by summing over all labelings.
    pub fn kl_from_product(&self, q: &MarginalField) -> Result<f64> {
        if q.n_voxels() != self.n_voxels || q.n_labels() != self.n_labels {
            return shape_err("marginal field does not match the distribution");
        }
        let (n, m) = (self.n_voxels, self.n_labels);
        let terms = map_states(self.n_states(), |code| {
            let mut c = code;
            let mut log_q = 0.0;
            for i in 0..n {
                let qi = q.get(i, c % m);
                if qi == 0.0 {
                    return 0.0;
                }
                log_q += qi.ln();
                c /= m;
            }
            let log_p = -self.energies[code] - self.log_partition;
            log_q.exp() * (log_q - log_p)
        });
        Ok(terms.iter().sum())
    }
}

pub fn enumerate_gibbs(model: &DenseCrfModel) -> Result<ExactDistribution> {
    let mut energies = pairwise_state_energies(model, ENUMERATION_LIMIT)?;
    let unary = model.unary();
    if energies.len() >= PARALLEL_STATES {
        energies.par_iter_mut().enumerate().for_each(|(c, e)| *e += unary_sum(unary, c));
    } else {
        energies.iter_mut().enumerate().for_each(|(c, e)| *e += unary_sum(unary, c));
    }
    ExactDistribution::from_energies(model.n_voxels(), model.n_labels(), energies)
}

pub fn exact_marginals(d: &ExactDistribution) -> MarginalField {
    let (n, m) = (d.n_voxels, d.n_labels);
    let mut values = vec![0.0; n * m];
    for (code, &p) in d.probabilities.iter().enumerate() {
        let mut c = code;
        for i in 0..n {
            values[i * m + c % m] += p;
            c /= m;
        }
    }
    MarginalField::from_raw(n, m, values)
}

pub fn exact_map(model: &DenseCrfModel) -> Result<LabelMap> {
    let pairwise = pairwise_state_energies(model, ENUMERATION_LIMIT)?;
    let code = argmin(pairwise.iter().enumerate().map(|(c, p)| p + unary_sum(model.unary(), c)));
    Ok(LabelMap::from_raw(decode_labeling(code, model.n_voxels(), model.n_labels())))
}

pub fn exact_gibbs_sample(d: &ExactDistribution, sampler: &mut GumbelSampler) -> LabelMap {
    d.labeling(d.code_for_uniform(sampler.uniform()))
}

/// Exact Gibbs sample through the Gumbel-max trick over the full labeling table.
pub fn perturb_and_map_full_order(model: &DenseCrfModel, noise: &mut impl GumbelSource) -> Result<LabelMap> {
    check_capacity(model.n_voxels(), model.n_labels(), FULL_ORDER_LIMIT)?;
    let d = enumerate_gibbs(model)?;
    Ok(d.labeling(d.perturbed_map_code(noise)?))
}

/// Exact MAP solver for a fixed pairwise structure; the unaries may vary.
#[derive(Debug, Clone)]
pub struct Order1Oracle {
    n_voxels: usize,
    n_labels: usize,
    pairwise: Vec<f64>,
}

impl Order1Oracle {
    pub fn new(model: &DenseCrfModel) -> Result<Self> {
        Ok(Self {
            n_voxels: model.n_voxels(),
            n_labels: model.n_labels(),
            pairwise: pairwise_state_energies(model, ENUMERATION_LIMIT)?,
        })
    }

    pub fn map_with_unary(&self, unary: &UnaryField) -> Result<LabelMap> {
        if unary.n_voxels() != self.n_voxels || unary.n_labels() != self.n_labels {
            return shape_err("unary field does not match the oracle's model");
        }
        let code = argmin(self.pairwise.iter().enumerate().map(|(c, p)| p + unary_sum(unary, c)));
        Ok(LabelMap::from_raw(decode_labeling(code, self.n_voxels, self.n_labels)))
    }
}

/// Perturbs the unaries only and returns the exact MAP of the perturbed model.
pub fn perturb_and_map_order1(model: &DenseCrfModel, noise: &mut impl GumbelSource) -> Result<LabelMap> {
    Order1Oracle::new(model)?.map_with_unary(&perturbed_unary(model.unary(), noise))
}

/// Closed form of `KL(Q || P)` for factorised `Q`:
/// `E_Q[E] - H(Q) + ln Z`, in nats.
pub fn mean_field_kl(model: &DenseCrfModel, q: &MarginalField, log_partition: f64) -> Result<f64> {
    let (n, m) = (model.n_voxels(), model.n_labels());
    if q.n_voxels() != n || q.n_labels() != m {
        return shape_err("marginal field does not match the model");
    }
    let mut expected = 0.0;
    let mut neg_entropy = 0.0;
    for i in 0..n {
        for l in 0..m {
            let p = q.get(i, l);
            expected += p * model.unary().get(i, l);
            if p > 0.0 {
                neg_entropy += p * p.ln();
            }
        }
    }
    if model.has_pairwise() {
        for i in 0..n {
            for j in i + 1..n {
                let agree: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                expected += model.pairwise_weight(i, j) * (1.0 - agree);
            }
        }
    }
    Ok(expected + neg_entropy + log_partition)
}

/// Total variation between two distributions over the same state table.
pub fn state_tv(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return shape_err(format!("state tables of length {} and {}", p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf_model::{build_grid_model, energy, KernelSpec, LabelSet};
    use crate::mean_field::mean_field_init;
    use crate::perturbation::ZeroNoise;
    use approx::assert_abs_diff_eq;

    fn model(dims: &[usize], m: usize, unary: Vec<f64>, kernels: &[KernelSpec]) -> DenseCrfModel {
        let n = dims.iter().product();
        let u = UnaryField::new(n, m, unary).unwrap();
        build_grid_model(dims, LabelSet::new(m).unwrap(), u, kernels).unwrap()
    }

    fn single_node() -> DenseCrfModel {
        model(&[1], 2, vec![-(0.8f64.ln()), -(0.2f64.ln())], &[])
    }

    /// Two nodes with kernel value exactly 1 between them.
    fn potts_pair() -> DenseCrfModel {
        model(&[2], 2, vec![0.0; 4], &[KernelSpec::spatial(1.0, 1e9)])
    }

    #[test]
    fn codes_round_trip() {
        for code in 0..81 {
            let x = decode_labeling(code, 4, 3);
            assert_eq!(encode_labeling(&x, 3), code);
        }
        assert_eq!(decode_labeling(5, 3, 2), vec![1, 0, 1]);
        assert_eq!(state_count(30, 3), 205_891_132_094_649);
    }

    #[test]
    fn single_node_distribution() {
        let d = enumerate_gibbs(&single_node()).unwrap();
        assert_abs_diff_eq!(d.probabilities()[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(d.probabilities()[1], 0.2, epsilon = 1e-12);
        let q = exact_marginals(&d);
        assert_abs_diff_eq!(q.get(0, 0), 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(d.log_partition(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn independent_nodes_factorise() {
        let u = vec![0.3, 1.1, -0.4, 0.9];
        let d = enumerate_gibbs(&model(&[2], 2, u.clone(), &[])).unwrap();
        let soft = |a: f64, b: f64| (-a).exp() / ((-a).exp() + (-b).exp());
        let p0 = soft(u[0], u[1]);
        let p1 = soft(u[2], u[3]);
        let expect = [p0 * p1, (1.0 - p0) * p1, p0 * (1.0 - p1), (1.0 - p0) * (1.0 - p1)];
        for (a, b) in d.probabilities().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        let q = exact_marginals(&d);
        assert_abs_diff_eq!(q.get(0, 0), p0, epsilon = 1e-12);
        assert_abs_diff_eq!(q.get(1, 0), p1, epsilon = 1e-12);
    }

    #[test]
    fn potts_pair_enumeration() {
        let d = enumerate_gibbs(&potts_pair()).unwrap();
        let z = 2.0 + 2.0 * (-1.0f64).exp();
        let (eq, ne) = (1.0 / z, (-1.0f64).exp() / z);
        assert_abs_diff_eq!(eq, 0.36552, epsilon = 1e-5);
        assert_abs_diff_eq!(ne, 0.13448, epsilon = 1e-5);
        let p = d.probabilities();
        assert_abs_diff_eq!(p[0], eq, epsilon = 1e-9);
        assert_abs_diff_eq!(p[3], eq, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], ne, epsilon = 1e-9);
        assert_abs_diff_eq!(p[2], ne, epsilon = 1e-9);
        let q = exact_marginals(&d);
        for v in q.values() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(d.log_partition(), z.ln(), epsilon = 1e-12);
    }

    #[test]
    fn map_examples() {
        let m = model(&[1], 2, vec![1.0, 2.0], &[]);
        assert_eq!(exact_map(&m).unwrap().as_slice(), &[0]);
        assert_eq!(exact_map(&potts_pair()).unwrap().as_slice(), &[0, 0]);
    }

    #[test]
    fn map_beats_every_labeling_of_a_chain() {
        let m = model(&[3], 3, vec![0.2, 1.0, 0.1, 1.5, 0.0, 0.4, 0.3, 0.3, 2.0], &[KernelSpec::spatial(0.8, 1.2)]);
        let best = exact_map(&m).unwrap();
        let e_best = energy(&m, &best).unwrap();
        for code in 0..27 {
            let x = LabelMap::from_raw(decode_labeling(code, 3, 3));
            assert!(e_best <= energy(&m, &x).unwrap());
        }
    }

    #[test]
    fn enumerated_energies_match_direct_evaluation() {
        let m = model(&[2, 2], 2, vec![0.1, 0.5, 0.9, 0.2, 0.0, 0.0, 1.3, 0.7], &[KernelSpec::spatial(0.6, 1.5)]);
        let d = enumerate_gibbs(&m).unwrap();
        for code in 0..d.n_states() {
            assert_abs_diff_eq!(d.energies()[code], energy(&m, &d.labeling(code)).unwrap(), epsilon = 1e-12);
        }
        let z: f64 = d.energies().iter().map(|e| (-e).exp()).sum();
        assert!((d.log_partition().exp() - z).abs() <= 1e-9 * z);
    }

    #[test]
    fn zero_noise_perturbations_reduce_to_map() {
        let m = model(&[3], 2, vec![0.4, 0.1, 0.0, 0.9, 0.5, 0.5], &[KernelSpec::spatial(1.0, 1.0)]);
        let map = exact_map(&m).unwrap();
        assert_eq!(perturb_and_map_full_order(&m, &mut ZeroNoise).unwrap(), map);
        assert_eq!(perturb_and_map_order1(&m, &mut ZeroNoise).unwrap(), map);
    }

    #[test]
    fn degenerate_distribution_always_samples_its_mode() {
        let d = ExactDistribution::from_energies(1, 2, vec![0.0, 1e6]).unwrap();
        let mut s = GumbelSampler::new(4, false);
        for _ in 0..1000 {
            assert_eq!(exact_gibbs_sample(&d, &mut s).as_slice(), &[0]);
        }
        assert_eq!(d.code_for_uniform(0.999_999_999_999), 0);
    }

    #[test]
    fn capacity_guards() {
        let big = model(&[25], 2, vec![0.0; 50], &[]);
        assert!(matches!(enumerate_gibbs(&big), Err(Error::Capacity { .. })));
        assert!(matches!(exact_map(&big), Err(Error::Capacity { .. })));
        let mid = model(&[21], 2, vec![0.0; 42], &[]);
        assert!(matches!(
            perturb_and_map_full_order(&mid, &mut ZeroNoise),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn kl_routes_agree() {
        let m = model(&[2, 2], 2, vec![0.1, 0.5, 0.9, 0.2, 0.0, 0.3, 1.3, 0.7], &[KernelSpec::spatial(0.7, 1.0)]);
        let d = enumerate_gibbs(&m).unwrap();
        let q = mean_field_init(&m);
        let a = mean_field_kl(&m, &q, d.log_partition()).unwrap();
        let b = d.kl_from_product(&q).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert!(a > 0.0);
        // factorised model: unary softmax is exact, KL is zero
        let f = model(&[3], 2, vec![0.1, 0.5, 0.9, 0.2, 0.0, 0.3], &[]);
        let df = enumerate_gibbs(&f).unwrap();
        assert_abs_diff_eq!(df.kl_from_product(&mean_field_init(&f)).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_marginals_are_consistent() {
        let m = model(&[4], 2, vec![0.1, 0.5, 0.9, 0.2, 0.0, 0.3, 1.3, 0.7], &[KernelSpec::spatial(0.9, 1.0)]);
        let d = enumerate_gibbs(&m).unwrap();
        let q = exact_marginals(&d);
        for (i, j) in [(0, 1), (1, 3), (0, 2)] {
            let mut pair = [[0.0; 2]; 2];
            for code in 0..d.n_states() {
                let x = decode_labeling(code, 4, 2);
                pair[x[i] as usize][x[j] as usize] += d.probabilities()[code];
            }
            for l in 0..2 {
                assert_abs_diff_eq!(pair[l][0] + pair[l][1], q.get(i, l), epsilon = 1e-12);
                assert_abs_diff_eq!(pair[0][l] + pair[1][l], q.get(j, l), epsilon = 1e-12);
            }
        }
    }
}
