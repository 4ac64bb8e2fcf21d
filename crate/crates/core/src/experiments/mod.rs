//! Data generation, validation metrics, the separable prediction-error
//! baseline and Monte Carlo studies.

pub mod generate;
pub mod informativity;
pub mod metrics;
pub mod monte_carlo;
pub mod pem;
pub mod simulate;

pub use generate::{derive_seed, generate_random_network, generate_reference, random_network, GeneratorSpec};
pub use informativity::{informativity_check, InformativityReport};
pub use metrics::{fit, snr_db, validate_metrics, validation_fit, MetricsReport, ValidationFit};
pub use simulate::{simulate, simulate_noise_free, simulate_with_noise, Trajectory};
pub use pem::{pem_baseline, PemConfig, PemEstimate};
pub use monte_carlo::{monte_carlo, ConsistencyConfig, MonteCarloConfig, MonteCarloReport};
