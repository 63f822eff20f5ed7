//! Experiment orchestration: configuration, counting-measure construction,
//! error metrics between discrete measures, and the convergence sweep that
//! compares graph runs against the local tensor-mobility reference solver.

pub mod config;
pub mod counting;
pub mod metrics;
pub mod sweep;

pub use config::ExperimentConfig;
pub use sweep::{run_convergence_sweep, ConvergenceReport};

/// FNV-1a 64-bit fingerprint, used to stamp outputs with their config.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hex fingerprint of a canonical config serialization. The output
/// directory is excluded so the hash identifies the experiment content, not
/// where it is written.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut canon = config.clone();
    canon.out_dir = String::new();
    let text = serde_json::to_string(&canon).unwrap_or_default();
    format!("{:016x}", fnv1a64(text.as_bytes()))
}
