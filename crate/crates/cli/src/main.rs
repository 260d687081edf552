use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use pmpm_core::crf_model::LabelMap;
use pmpm_core::error::{Error, Result};
use pmpm_core::evaluation::{
    random_binary_model, run_biomarker_experiment, run_synthetic_experiment, summarise_segmentation,
    BiomarkerConfig, Geometry,
};
use pmpm_core::exact_oracle::{
    encode_labeling, enumerate_gibbs, exact_gibbs_sample, exact_marginals, state_tv, ExactDistribution,
};
use pmpm_core::io::config::{echo_experiment, parse_experiment, parse_experiment_str, RunConfig};
use pmpm_core::io::csv_export::{
    write_biomarker_csv, write_distribution_csv, write_error_curve_csv, write_histogram_csv, write_marginals_csv,
    write_uncertainty_csv,
};
use pmpm_core::io::pgm::entropy_heatmap;
use pmpm_core::io::tensor::labels_from_tensor;
use pmpm_core::io::{parse_config, read_tensor, write_manifest, write_pgm, write_tensor, Tensor};
use pmpm_core::mean_field::{mean_field_infer, mpm_decode, InferenceConfig};
use pmpm_core::metrics::total_variation;
use pmpm_core::perturbation::{empirical_marginals, perturb_and_mpm, GumbelSampler, SampleSet, SamplingConfig};

/// Perturb-and-MPM sampling and uncertainty maps for dense CRFs.
#[derive(Parser)]
#[command(name = "pmpm", version, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mean-field marginals of a model.
    Infer(InferArgs),
    /// Perturb-and-MPM label map samples.
    Sample(SampleArgs),
    /// Per-voxel entropy of the sampled marginals.
    Uncertainty(UncertaintyArgs),
    /// Sampled and mean-field marginals against exact ones on random small grids.
    SynthExperiment(SynthArgs),
    /// Uncorrected and uncertainty-corrected volume, RTV and EOR.
    Biomarker(BiomarkerArgs),
    /// Compares the samplers with exact enumeration on a random N-voxel model.
    OracleCheck(OracleArgs),
}

/// Flags that override the model config.
#[derive(Args, Default)]
struct Overrides {
    /// Number of samples T.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Message-passing backend.
    #[arg(long, value_parser = ["exact", "lattice"])]
    backend: Option<String>,
    /// Entropy (bits) above which a voxel counts as uncertain.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
}

impl Overrides {
    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(v) = self.samples {
            cfg.samples = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.backend {
            cfg.backend = v.clone();
        }
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if let Some(v) = self.max_iterations {
            cfg.max_iterations = v;
        }
        cfg.validated()
    }
}

#[derive(Args)]
struct InferArgs {
    /// Model config (TOML).
    #[arg(long)]
    model: PathBuf,
    /// Output [N, m] f64 marginal tensor.
    #[arg(long)]
    out: PathBuf,
    /// Also write the MPM labels as an [N] u32 tensor.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    /// Also write the marginals as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output [T, N] u32 tensor of label maps.
    #[arg(long)]
    out: PathBuf,
    /// Also write per-voxel label counts as CSV.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct UncertaintyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output [N] f64 entropy tensor (bits).
    #[arg(long)]
    out: PathBuf,
    /// Also write an 8-bit PGM heatmap.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BiomarkerArgs {
    /// Pre-operative model config.
    #[arg(long)]
    pre: PathBuf,
    /// Post-operative model config.
    #[arg(long)]
    post: PathBuf,
    /// Ground-truth labels, u32 tensor with N entries.
    #[arg(long)]
    truth_pre: PathBuf,
    #[arg(long)]
    truth_post: PathBuf,
    #[arg(long, default_value_t = 1)]
    target_label: u32,
    #[arg(long, default_value_t = 1.0)]
    voxel_volume: f64,
    /// Output report CSV.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct OracleArgs {
    /// Number of voxels of the random binary model.
    #[arg(long, default_value_t = 6)]
    n: usize,
    /// Draws per sampler.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the enumerated distribution as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Capacity { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Infer(a) => infer(a),
        Command::Sample(a) => sample(a),
        Command::Uncertainty(a) => uncertainty(a),
        Command::SynthExperiment(a) => synth(a),
        Command::Biomarker(a) => biomarker(a),
        Command::OracleCheck(a) => oracle_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let cfg = overrides.apply(parse_config(path)?)?;
    print!("# resolved config\n{}", cfg.echo());
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg = load(&a.model, &a.overrides)?;
    let model = cfg.load_model()?;
    let inf = mean_field_infer(&model, &cfg.inference())?;
    let echo = cfg.echo();
    write_tensor(&a.out, &Tensor::from(&inf.marginals))?;
    write_manifest(&a.out, "infer", cfg.seed, &echo)?;
    if let Some(p) = &a.labels_out {
        write_tensor(p, &Tensor::from(&mpm_decode(&inf.marginals)))?;
        write_manifest(p, "infer", cfg.seed, &echo)?;
    }
    if let Some(p) = &a.csv {
        write_marginals_csv(create(p)?, &inf.marginals)?;
        write_manifest(p, "infer", cfg.seed, &echo)?;
    }
    println!("iterations: {}\nconverged: {}", inf.iterations, inf.converged);
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let cfg = load(&a.model, &a.overrides)?;
    let model = cfg.load_model()?;
    let set = perturb_and_mpm(&model, &cfg.sampling())?;
    let echo = cfg.echo();
    write_tensor(&a.out, &Tensor::from(&set))?;
    write_manifest(&a.out, "sample", cfg.seed, &echo)?;
    if let Some(p) = &a.histogram {
        write_histogram_csv(create(p)?, &set)?;
        write_manifest(p, "sample", cfg.seed, &echo)?;
    }
    println!("samples: {} x {} voxels", set.len(), set.n_voxels());
    Ok(())
}

fn uncertainty(a: UncertaintyArgs) -> Result<()> {
    let cfg = load(&a.model, &a.overrides)?;
    let model = cfg.load_model()?;
    let summary = summarise_segmentation(&model, &cfg.sampling())?;
    let u = &summary.uncertainty;
    let echo = cfg.echo();
    write_tensor(&a.out, &Tensor::from(u))?;
    write_manifest(&a.out, "uncertainty", cfg.seed, &echo)?;
    if let Some(p) = &a.heatmap {
        write_pgm(p, &entropy_heatmap(u, model.dims())?)?;
        write_manifest(p, "uncertainty", cfg.seed, &echo)?;
    }
    if let Some(p) = &a.csv {
        write_uncertainty_csv(create(p)?, u)?;
        write_manifest(p, "uncertainty", cfg.seed, &echo)?;
    }
    let uncertain = u.uncertain_mask(cfg.threshold).iter().filter(|&&b| b).count();
    let mean = u.values().iter().sum::<f64>() / u.len() as f64;
    println!("uncertain voxels (entropy > {}): {uncertain} of {}\nmean entropy: {mean:.6} bits", cfg.threshold, u.len());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => parse_experiment(p)?,
        None => parse_experiment_str("")?,
    };
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    let echo = echo_experiment(&cfg);
    print!("# resolved config\n{echo}");
    let curve = run_synthetic_experiment(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    let out = a.out_dir.join("error_curve.csv");
    write_error_curve_csv(create(&out)?, &curve)?;
    write_manifest(&out, "synth-experiment", cfg.base_seed, &echo)?;
    print!("{curve}");
    Ok(())
}

fn read_truth(path: &Path, n: usize, m: usize) -> Result<LabelMap> {
    let labels = labels_from_tensor(&read_tensor(path)?, n)?;
    LabelMap::new(labels, pmpm_core::crf_model::LabelSet::new(m)?)
}

fn biomarker(a: BiomarkerArgs) -> Result<()> {
    let pre_cfg = load(&a.pre, &a.overrides)?;
    let post_cfg = load(&a.post, &a.overrides)?;
    let pre = pre_cfg.load_model()?;
    let post = post_cfg.load_model()?;
    let truth_pre = read_truth(&a.truth_pre, pre.n_voxels(), pre.n_labels())?;
    let truth_post = read_truth(&a.truth_post, post.n_voxels(), post.n_labels())?;
    let cfg = BiomarkerConfig {
        sampling: pre_cfg.sampling(),
        target_label: a.target_label,
        threshold: pre_cfg.threshold,
        voxel_volume: a.voxel_volume,
    };
    let report = run_biomarker_experiment(&pre, &post, &truth_pre, &truth_post, &cfg)?;
    write_biomarker_csv(create(&a.out)?, &report)?;
    let echo = format!("[pre]\n{}[post]\n{}", pre_cfg.echo(), post_cfg.echo());
    write_manifest(&a.out, "biomarker", pre_cfg.seed, &echo)?;
    println!(
        "RTV truth {} uncorrected {} corrected {}\nEOR truth {:.6} uncorrected {:.6} corrected {}",
        report.v_post_truth,
        report.v_post,
        report.v_post_corrected,
        report.eor_truth,
        report.eor,
        report.eor_corrected.map_or("n/a".to_string(), |e| format!("{e:.6}"))
    );
    Ok(())
}

fn state_histogram(d: &ExactDistribution, codes: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut counts = vec![0.0; d.n_states()];
    let mut total = 0.0;
    for c in codes {
        counts[c] += 1.0;
        total += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

fn oracle_check(a: OracleArgs) -> Result<()> {
    if a.samples == 0 {
        return Err(Error::InvalidArgument("--samples must be at least 1".into()));
    }
    let dims = Geometry::Grid2d.dims(a.n);
    let model = random_binary_model(&dims, a.seed, 1.0, 1.0)?;
    let d = enumerate_gibbs(&model)?;
    let exact = exact_marginals(&d);

    let mut noise = GumbelSampler::new(a.seed ^ 0x9e37_79b9_7f4a_7c15, true);
    let mut perturbed = Vec::with_capacity(a.samples);
    for _ in 0..a.samples {
        perturbed.push(d.perturbed_map_code(&mut noise)?);
    }
    let mut uniform = GumbelSampler::new(a.seed.wrapping_add(1), false);
    let gibbs: Vec<usize> = (0..a.samples)
        .map(|_| encode_labeling(exact_gibbs_sample(&d, &mut uniform).as_slice(), d.n_labels()))
        .collect();

    let marginal_tv = |codes: &[usize]| -> Result<f64> {
        let set = SampleSet::from_samples(model.n_voxels(), model.labels(), codes.iter().map(|&c| d.labeling(c)).collect())?;
        total_variation(&empirical_marginals(&set)?, &exact)
    };
    let inference = InferenceConfig::default();
    let mpm = empirical_marginals(&perturb_and_mpm(
        &model,
        &SamplingConfig { samples: a.samples, seed: a.seed, euler_shift: true, inference },
    )?)?;
    let mf = mean_field_infer(&model, &inference)?.marginals;

    println!("model: {:?} grid, {} states, seed {}", dims, d.n_states(), a.seed);
    println!("full-order perturb-and-MAP  state TV {:.6}  marginal TV {:.6}", state_tv(&state_histogram(&d, perturbed.iter().copied()), d.probabilities())?, marginal_tv(&perturbed)?);
    println!("inverse-CDF Gibbs sampler   state TV {:.6}  marginal TV {:.6}", state_tv(&state_histogram(&d, gibbs.iter().copied()), d.probabilities())?, marginal_tv(&gibbs)?);
    println!("perturb-and-MPM                              marginal TV {:.6}", total_variation(&mpm, &exact)?);
    println!("mean field                                   marginal TV {:.6}", total_variation(&mf, &exact)?);
    if let Some(p) = &a.out {
        write_distribution_csv(create(p)?, &d)?;
        write_manifest(p, "oracle-check", a.seed, &format!("n = {}\nsamples = {}\n", a.n, a.samples))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Capacity { states: 10, limit: 1 }), 3);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_revalidate() {
        let cfg = pmpm_core::io::config::parse_config_str("dims = [2]\nlabels = 2\nunary = \"u\"\n", Path::new(".")).unwrap();
        let bad = Overrides { samples: Some(0), ..Default::default() };
        assert!(bad.apply(cfg.clone()).is_err());
        let ok = Overrides { backend: Some("lattice".into()), seed: Some(5), ..Default::default() };
        let out = ok.apply(cfg).unwrap();
        assert_eq!((out.backend.as_str(), out.seed), ("lattice", 5));
    }
}
