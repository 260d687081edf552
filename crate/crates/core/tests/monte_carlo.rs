//! Statistical checks against closed forms and the exact enumerator.

use approx::assert_abs_diff_eq;

use pmpm_core::crf_model::{build_grid_model, energy, KernelSpec, LabelMap, LabelSet, UnaryField};
use pmpm_core::evaluation::random_binary_model;
use pmpm_core::exact_oracle::{
    decode_labeling, encode_labeling, enumerate_gibbs, exact_gibbs_sample, exact_map, exact_marginals,
    perturb_and_map_full_order, state_tv,
};
use pmpm_core::mean_field::{mean_field_infer, InferenceConfig};
use pmpm_core::metrics::{required_sample_size, total_variation};
use pmpm_core::perturbation::{
    empirical_marginals, gumbel_max_select, perturb_and_mpm, sample_gumbel, GumbelSampler, SamplingConfig,
};

fn labels(m: usize) -> LabelSet {
    LabelSet::new(m).unwrap()
}

fn unary_from_p1(p1: &[f64]) -> UnaryField {
    let probs: Vec<f64> = p1.iter().flat_map(|&p| [1.0 - p, p]).collect();
    UnaryField::from_probabilities(p1.len(), 2, &probs).unwrap()
}

#[test]
fn shifted_gumbel_has_zero_mean() {
    let g = sample_gumbel(&mut GumbelSampler::new(1, true), 1_000_000);
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    assert!(mean.abs() < 0.005, "mean {mean}");
    let g = sample_gumbel(&mut GumbelSampler::new(1, false), 1_000_000);
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    assert!((mean - 0.5772).abs() < 0.005, "mean {mean}");
}

#[test]
fn gumbel_max_recovers_softmax() {
    let trials = 200_000;
    for probs in [vec![0.5, 0.5], vec![0.7, 0.3], vec![0.2, 0.5, 0.3]] {
        let theta: Vec<f64> = probs.iter().map(|p: &f64| -p.ln()).collect();
        let mut noise = GumbelSampler::new(7, true);
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..trials {
            counts[gumbel_max_select(&theta, &mut noise)] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            assert_abs_diff_eq!(*c as f64 / trials as f64, p, epsilon = 0.005);
        }
        // a common offset changes nothing
        let shifted: Vec<f64> = theta.iter().map(|t| t + 3.0).collect();
        let mut a = GumbelSampler::new(9, true);
        let mut b = GumbelSampler::new(9, true);
        for _ in 0..1000 {
            assert_eq!(gumbel_max_select(&theta, &mut a), gumbel_max_select(&shifted, &mut b));
        }
    }
}

#[test]
fn gumbel_over_full_energy_vector_samples_gibbs() {
    // a frozen 4-state energy vector
    let energies = [0.3, 1.1, 0.0, 2.0];
    let z: f64 = energies.iter().map(|e: &f64| (-e).exp()).sum();
    let mut noise = GumbelSampler::new(21, true);
    let trials = 200_000;
    let mut counts = [0usize; 4];
    for _ in 0..trials {
        counts[gumbel_max_select(&energies, &mut noise)] += 1;
    }
    for (c, e) in counts.iter().zip(energies) {
        assert_abs_diff_eq!(*c as f64 / trials as f64, (-e).exp() / z, epsilon = 0.005);
    }
}

#[test]
fn single_node_mpm_frequency() {
    let model = build_grid_model(&[1], labels(2), unary_from_p1(&[0.7]), &[]).unwrap();
    let cfg = SamplingConfig { samples: 100_000, seed: 5, ..SamplingConfig::default() };
    let q = empirical_marginals(&perturb_and_mpm(&model, &cfg).unwrap()).unwrap();
    assert_abs_diff_eq!(q.get(0, 1), 0.7, epsilon = 0.01);
}

#[test]
fn independent_nodes_match_their_unaries() {
    let p1 = [0.1, 0.5, 0.85];
    let model = build_grid_model(&[3], labels(2), unary_from_p1(&p1), &[KernelSpec::spatial(0.0, 1.0)]).unwrap();
    let cfg = SamplingConfig { samples: 20_000, seed: 2, ..SamplingConfig::default() };
    let q = empirical_marginals(&perturb_and_mpm(&model, &cfg).unwrap()).unwrap();
    for (i, p) in p1.iter().enumerate() {
        assert_abs_diff_eq!(q.get(i, 1), p, epsilon = 0.01);
    }
}

#[test]
fn frequency_deviation_stays_inside_hoeffding_envelope() {
    // eps = 0.1, delta = 0.05 for a single frequency
    let t = required_sample_size(0.1, 0.05, 1).unwrap() as usize;
    let model = build_grid_model(&[1], labels(2), unary_from_p1(&[0.4]), &[]).unwrap();
    let mut misses = 0;
    for seed in 0..100 {
        let cfg = SamplingConfig { samples: t, seed, ..SamplingConfig::default() };
        let q = empirical_marginals(&perturb_and_mpm(&model, &cfg).unwrap()).unwrap();
        if (q.get(0, 1) - 0.4).abs() > 0.1 {
            misses += 1;
        }
    }
    assert!(misses <= 5, "{misses} of 100 runs left the envelope");
}

#[test]
fn exact_sampler_frequency() {
    let model = build_grid_model(&[1], labels(2), unary_from_p1(&[0.8]), &[]).unwrap();
    let d = enumerate_gibbs(&model).unwrap();
    let mut rng = GumbelSampler::new(3, true);
    let draws = 1_000_000;
    let ones = (0..draws).filter(|_| exact_gibbs_sample(&d, &mut rng).get(0) == 1).count();
    assert_abs_diff_eq!(ones as f64 / draws as f64, 0.8, epsilon = 0.005);
}

#[test]
fn exact_sampler_matches_grid_marginals() {
    let model = random_binary_model(&[2, 3], 17, 1.0, 1.0).unwrap();
    let d = enumerate_gibbs(&model).unwrap();
    let mut rng = GumbelSampler::new(4, true);
    let draws = 100_000;
    let mut ones = vec![0usize; 6];
    for _ in 0..draws {
        for (i, &l) in exact_gibbs_sample(&d, &mut rng).as_slice().iter().enumerate() {
            ones[i] += l as usize;
        }
    }
    let q = exact_marginals(&d);
    for (i, c) in ones.iter().enumerate() {
        assert_abs_diff_eq!(*c as f64 / draws as f64, q.get(i, 1), epsilon = 0.01);
    }
}

#[test]
fn full_order_perturb_and_map_matches_gibbs() {
    let model = random_binary_model(&[2, 3], 8, 1.0, 1.0).unwrap();
    let d = enumerate_gibbs(&model).unwrap();
    let draws = 100_000;
    let mut freq = vec![0.0; d.n_states()];
    let mut noise = GumbelSampler::new(12, true);
    for _ in 0..draws {
        let x = perturb_and_map_full_order(&model, &mut noise).unwrap();
        freq[encode_labeling(x.as_slice(), 2)] += 1.0 / draws as f64;
    }
    let tv = state_tv(&freq, d.probabilities()).unwrap();
    assert!(tv <= 0.02, "state TV {tv}");
}

#[test]
fn exact_map_beats_random_labelings() {
    let model = random_binary_model(&[3, 3], 99, 2.0, 1.0).unwrap();
    let best = energy(&model, &exact_map(&model).unwrap()).unwrap();
    let mut rng = GumbelSampler::new(1, false);
    for _ in 0..1000 {
        let code = (rng.uniform() * 512.0) as usize % 512;
        let x = LabelMap::new(decode_labeling(code, 9, 2), labels(2)).unwrap();
        assert!(energy(&model, &x).unwrap() >= best - 1e-12);
    }
}

#[test]
fn perturb_and_mpm_tracks_weakly_coupled_gibbs() {
    let model = random_binary_model(&[2, 3], 31, 0.2, 1.0).unwrap();
    let truth = exact_marginals(&enumerate_gibbs(&model).unwrap());
    let cfg = SamplingConfig { samples: 20_000, seed: 31, ..SamplingConfig::default() };
    let q = empirical_marginals(&perturb_and_mpm(&model, &cfg).unwrap()).unwrap();
    let mf = mean_field_infer(&model, &InferenceConfig::default()).unwrap().marginals;
    assert!(total_variation(&q, &truth).unwrap() < 0.05);
    assert!(total_variation(&mf, &truth).unwrap() < 0.05);
}
