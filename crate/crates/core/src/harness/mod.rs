//! Configuration, persistence, training and evaluation orchestration.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Method, RunConfig};
pub use manifest::{load_policy, Manifest, ManifestWeights};
pub use metrics::{MetricsRow, MetricsTable, METRICS_HEADER};
pub use pipeline::{
    prepare_dataset, reference_rows, run_eval, run_training, sweep_dataset_size, train_methods,
    Trained,
};

pub const THREADS_ENV: &str = "MODALCOMPOSE_THREADS";

/// Cap the global worker pool at `MODALCOMPOSE_THREADS` if set. Results do
/// not depend on the thread count.
pub fn init_threads() -> crate::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => {
            return Err(crate::Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{raw}`"
            )))
        }
    };
    // a pool built earlier in the process wins
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}
