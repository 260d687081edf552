//! CSV exporters. Every file starts with a header row.

use std::io::Write;

use crate::error::Result;
use crate::evaluation::{BiomarkerReport, ErrorCurve};
use crate::exact_oracle::ExactDistribution;
use crate::mean_field::MarginalField;
use crate::metrics::UncertaintyMap;
use crate::perturbation::SampleSet;

/// `voxel,label,probability`
pub fn write_marginals_csv(w: impl Write, q: &MarginalField) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["voxel", "label", "probability"])?;
    for i in 0..q.n_voxels() {
        for l in 0..q.n_labels() {
            out.serialize((i, l, q.get(i, l)))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `voxel,label,count`
pub fn write_histogram_csv(w: impl Write, s: &SampleSet) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["voxel", "label", "count"])?;
    let m = s.n_labels();
    for (k, c) in s.label_counts().into_iter().enumerate() {
        out.serialize((k / m, k % m, c))?;
    }
    out.flush()?;
    Ok(())
}

/// `voxel,entropy_bits`
pub fn write_uncertainty_csv(w: impl Write, u: &UncertaintyMap) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["voxel", "entropy_bits"])?;
    for (i, h) in u.values().iter().enumerate() {
        out.serialize((i, h))?;
    }
    out.flush()?;
    Ok(())
}

/// `code,energy,probability`
pub fn write_distribution_csv(w: impl Write, d: &ExactDistribution) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["code", "energy", "probability"])?;
    for (code, (e, p)) in d.energies().iter().zip(d.probabilities()).enumerate() {
        out.serialize((code, e, p))?;
    }
    out.flush()?;
    Ok(())
}

/// `n,samples,mpm_l1,mean_field_l1[,mpm_log_l1,mean_field_log_l1]`
pub fn write_error_curve_csv(w: impl Write, curve: &ErrorCurve) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let with_log = curve.rows.iter().any(|r| r.mpm_log_error.is_some());
    let mut header = vec!["n", "samples", "mpm_l1", "mean_field_l1"];
    if with_log {
        header.extend(["mpm_log_l1", "mean_field_log_l1"]);
    }
    out.write_record(&header)?;
    for r in &curve.rows {
        let mut rec = vec![r.n.to_string(), r.samples.to_string(), r.mpm_error.to_string(), r.mean_field_error.to_string()];
        if with_log {
            rec.push(r.mpm_log_error.map_or(String::new(), |v| v.to_string()));
            rec.push(r.mean_field_log_error.map_or(String::new(), |v| v.to_string()));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// `quantity,truth,uncorrected,corrected`
pub fn write_biomarker_csv(w: impl Write, r: &BiomarkerReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["quantity", "truth", "uncorrected", "corrected"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    out.write_record(["v_pre", &r.v_pre_truth.to_string(), &r.v_pre.to_string(), &r.v_pre_corrected.to_string()])?;
    out.write_record(["rtv", &r.v_post_truth.to_string(), &r.v_post.to_string(), &r.v_post_corrected.to_string()])?;
    out.write_record(["eor", &r.eor_truth.to_string(), &r.eor.to_string(), &opt(r.eor_corrected)])?;
    out.write_record(["rtv_abs_error", "0", &r.rtv_error().to_string(), &r.rtv_error_corrected().to_string()])?;
    out.write_record(["eor_abs_error", "0", &r.eor_error().to_string(), &opt(r.eor_error_corrected())])?;
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crf_model::{LabelMap, LabelSet};

    fn text(f: impl FnOnce(&mut Vec<u8>)) -> String {
        let mut buf = Vec::new();
        f(&mut buf);
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn marginal_rows() {
        let q = MarginalField::new(1, 2, vec![0.25, 0.75]).unwrap();
        let s = text(|b| write_marginals_csv(b, &q).unwrap());
        assert_eq!(s, "voxel,label,probability\n0,0,0.25\n0,1,0.75\n");
    }

    #[test]
    fn histogram_rows() {
        let labels = LabelSet::new(2).unwrap();
        let set = SampleSet::from_samples(
            2,
            labels,
            vec![LabelMap::new(vec![0, 1], labels).unwrap(), LabelMap::new(vec![0, 0], labels).unwrap()],
        )
        .unwrap();
        let s = text(|b| write_histogram_csv(b, &set).unwrap());
        assert_eq!(s, "voxel,label,count\n0,0,2\n0,1,0\n1,0,1\n1,1,1\n");
    }

    #[test]
    fn distribution_rows() {
        let d = ExactDistribution::from_energies(1, 2, vec![0.0, 0.0]).unwrap();
        let s = text(|b| write_distribution_csv(b, &d).unwrap());
        assert_eq!(s, "code,energy,probability\n0,0.0,0.5\n1,0.0,0.5\n");
    }
}
