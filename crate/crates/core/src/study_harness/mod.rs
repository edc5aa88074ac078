//! Simulation studies, bootstrap inference, CSV ingestion, reports and the
//! command-line front end.

pub mod bootstrap;
pub mod cli;
pub mod csv_input;
pub mod dgp;
pub mod monte_carlo;
pub mod report;
pub mod scaling;
pub mod tpr;

pub use bootstrap::{bootstrap_se, resample_indices, BootstrapResult};
pub use cli::cli_main;
pub use csv_input::{read_csv, CsvData};
pub use dgp::{simulate_dataset, DgpConfig, ErrorFamily, PRESET_NAMES};
pub use monte_carlo::{run_monte_carlo, McSummary};
pub use scaling::{standardize, Standardization};
pub use tpr::{run_tpr_study, TprSettings, TprSummary};

use rand_chacha::ChaCha8Rng;

/// Independent generator for replication `index`: the master seed keys the
/// generator and the index selects the stream, so draws do not depend on the
/// order in which replications run.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
