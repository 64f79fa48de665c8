//! Shared fixtures for the benchmarks.

use nfra_core::sim::{Design, ExperimentConfig, Method};
use nfra_core::{Position, Result};

/// UE position used by the single-point benchmarks.
pub const UE: Position = Position::new(10.35, 1.67, 0.0);

/// Default scenario with the smaller 27-point sample lattice.
pub fn config() -> ExperimentConfig {
    ExperimentConfig::parse("sample_lattice = 3").expect("built-in configuration is valid")
}

/// Power-allocated design for `method` under [`config`].
pub fn design(method: Method) -> Result<Design> {
    let cfg = config();
    Design::build(&cfg, method, cfg.bases_for(method, 0.0))
}
