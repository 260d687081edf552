//! Distances between labelings and marginal fields, entropy uncertainty and
//! the concentration bounds used to size sample sets.
//!
//! Entropies are in bits. Sample sizes come from Hoeffding's inequality and
//! use the natural log.

use crate::crf_model::LabelMap;
use crate::error::{shape_err, Error, Result};
use crate::mean_field::MarginalField;

/// Per-voxel Shannon entropy in bits.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    n_labels: usize,
    values: Vec<f64>,
}

impl UncertaintyMap {
    /// Checks every value lies in `[0, log2 m]` (with `1e-12` slack).
    pub fn new(values: Vec<f64>, n_labels: usize) -> Result<Self> {
        if n_labels < 2 {
            return Err(Error::InvalidArgument("uncertainty needs at least 2 labels".into()));
        }
        let hi = (n_labels as f64).log2() + 1e-12;
        if let Some(v) = values.iter().find(|v| !(0.0..=hi).contains(*v)) {
            return Err(Error::InvalidArgument(format!("entropy {v} outside [0, log2 {n_labels}]")));
        }
        Ok(Self { n_labels, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// `log2 m`, the largest attainable entropy.
    pub fn max_entropy(&self) -> f64 {
        (self.n_labels as f64).log2()
    }

    /// Voxels whose entropy exceeds `threshold`; `0` flags any non-zero entropy.
    pub fn uncertain_mask(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&h| is_uncertain(h, threshold)).collect()
    }
}

pub fn is_uncertain(entropy: f64, threshold: f64) -> bool {
    entropy > threshold
}

/// Fraction of voxels where the two labelings differ.
pub fn hamming_loss(x1: &LabelMap, x2: &LabelMap) -> Result<f64> {
    if x1.len() != x2.len() {
        return shape_err(format!("labelings of length {} and {}", x1.len(), x2.len()));
    }
    if x1.is_empty() {
        return Ok(0.0);
    }
    let diff = x1.as_slice().iter().zip(x2.as_slice()).filter(|(a, b)| a != b).count();
    Ok(diff as f64 / x1.len() as f64)
}

/// Half the `l1` distance between two categorical rows.
pub fn row_tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Per-voxel total variation distances.
pub fn voxel_tv(p: &MarginalField, q: &MarginalField) -> Result<Vec<f64>> {
    check_same_dims(p, q)?;
    Ok(p.rows().zip(q.rows()).map(|(a, b)| row_tv(a, b)).collect())
}

/// Voxel-averaged total variation distance.
pub fn total_variation(p: &MarginalField, q: &MarginalField) -> Result<f64> {
    let tv = voxel_tv(p, q)?;
    if tv.is_empty() {
        return Ok(0.0);
    }
    Ok(tv.iter().sum::<f64>() / tv.len() as f64)
}

fn check_same_dims(p: &MarginalField, q: &MarginalField) -> Result<()> {
    if p.n_voxels() != q.n_voxels() || p.n_labels() != q.n_labels() {
        return shape_err(format!(
            "marginal fields {}x{} and {}x{}",
            p.n_voxels(),
            p.n_labels(),
            q.n_voxels(),
            q.n_labels()
        ));
    }
    Ok(())
}

/// Shannon entropy of one categorical row in bits, `0 log 0 = 0`.
pub fn entropy_bits(row: &[f64]) -> f64 {
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    // summation noise can push a one-hot or near-one-hot row slightly negative
    h.max(0.0)
}

pub fn entropy_map(f: &MarginalField) -> UncertaintyMap {
    let hi = (f.n_labels() as f64).log2();
    let values = f.rows().map(|r| entropy_bits(r).min(hi)).collect();
    UncertaintyMap { n_labels: f.n_labels(), values }
}

/// `h(p) = -p log2 p - (1-p) log2 (1-p)`.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("binary entropy of {p}")));
    }
    Ok(entropy_bits(&[p, 1.0 - p]))
}

/// `ceil(ln(2m / delta) / (2 eps^2))`: samples needed so that every label
/// frequency of a voxel is within `eps` of its expectation with probability
/// at least `1 - delta`. `m = 1` gives the single-frequency bound.
pub fn required_sample_size(epsilon: f64, delta: f64, m: usize) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0, 1), got {delta}")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("label count must be at least 1".into()));
    }
    let n = ((2.0 * m as f64 / delta).ln() / (2.0 * epsilon * epsilon)).ceil();
    Ok(n as u64)
}

/// Upper bound on `|H(P_i) - H(Q_i)|` in bits given their total variation:
/// `tv log2(m - 1) + h(tv)`.
pub fn entropy_error_bound(tv: f64, m: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&tv) {
        return Err(Error::InvalidArgument(format!("total variation must be in [0, 1], got {tv}")));
    }
    if m < 2 {
        return Err(Error::InvalidArgument("entropy bound needs at least 2 labels".into()));
    }
    Ok(tv * ((m - 1) as f64).log2() + binary_entropy(tv)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf_model::LabelSet;
    use approx::assert_abs_diff_eq;

    fn map(v: &[u32], m: usize) -> LabelMap {
        LabelMap::new(v.to_vec(), LabelSet::new(m).unwrap()).unwrap()
    }

    fn field(n: usize, m: usize, v: &[f64]) -> MarginalField {
        MarginalField::new(n, m, v.to_vec()).unwrap()
    }

    #[test]
    fn hamming_examples() {
        let a = map(&[0, 1, 1, 0], 2);
        assert_eq!(hamming_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(hamming_loss(&map(&[0, 0, 0, 0], 2), &map(&[1, 0, 0, 0], 2)).unwrap(), 0.25);
        assert_eq!(hamming_loss(&a, &map(&[1, 0, 0, 1], 2)).unwrap(), 1.0);
        assert!(hamming_loss(&a, &map(&[0], 2)).is_err());
    }

    #[test]
    fn tv_examples() {
        let p = field(1, 2, &[0.7, 0.3]);
        assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
        assert_eq!(total_variation(&field(1, 2, &[1.0, 0.0]), &field(1, 2, &[0.0, 1.0])).unwrap(), 1.0);
        assert_abs_diff_eq!(total_variation(&p, &field(1, 2, &[0.5, 0.5])).unwrap(), 0.2, epsilon = 1e-15);
        assert!(total_variation(&p, &field(1, 3, &[0.5, 0.5, 0.0])).is_err());
    }

    #[test]
    fn entropy_examples() {
        let h = entropy_map(&field(3, 4, &[0.25, 0.25, 0.25, 0.25, 0.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0]));
        assert_abs_diff_eq!(h.values()[0], 2.0, epsilon = 1e-15);
        assert_eq!(h.values()[1], 0.0);
        assert_abs_diff_eq!(h.values()[2], 1.0, epsilon = 1e-15);
        assert_eq!(h.uncertain_mask(0.0), vec![true, false, true]);
        assert_eq!(h.uncertain_mask(1.5), vec![true, false, false]);
    }

    #[test]
    fn binary_entropy_examples() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(binary_entropy(0.11).unwrap(), 0.49999, epsilon = 1e-4);
        assert!(binary_entropy(1.1).is_err());
    }

    #[test]
    fn sample_size_examples() {
        assert_eq!(required_sample_size(0.1, 0.05, 1).unwrap(), 185);
        assert_eq!(required_sample_size(0.1, 0.05, 2).unwrap(), 220);
        assert_eq!(required_sample_size(0.1, 0.05, 4).unwrap(), 254);
        assert!(required_sample_size(0.0, 0.05, 1).is_err());
        assert!(required_sample_size(0.1, 1.0, 1).is_err());
        assert!(required_sample_size(0.1, 0.05, 0).is_err());
    }

    #[test]
    fn entropy_bound_examples() {
        assert_abs_diff_eq!(entropy_error_bound(1.0, 4).unwrap(), 1.585, epsilon = 1e-3);
        assert_eq!(entropy_error_bound(0.0, 7).unwrap(), 0.0);
        assert_eq!(entropy_error_bound(0.5, 2).unwrap(), 1.0);
        assert!(entropy_error_bound(1.5, 2).is_err());
        assert!(entropy_error_bound(0.5, 1).is_err());
    }

    #[test]
    fn uncertainty_map_validates_range() {
        assert!(UncertaintyMap::new(vec![0.0, 1.0], 2).is_ok());
        assert!(UncertaintyMap::new(vec![1.2], 2).is_err());
        assert!(UncertaintyMap::new(vec![-0.1], 2).is_err());
    }
}
