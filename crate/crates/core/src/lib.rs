pub mod crf_model;
pub mod error;
pub mod evaluation;
pub mod exact_oracle;
pub mod io;
pub mod mean_field;
pub mod metrics;
pub mod perturbation;
