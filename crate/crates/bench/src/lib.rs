//! Shared fixtures for the benchmark targets.

use etsim_core::traceio::{self, GeneratorSpec, TraceBundle};

/// A mid-sized stationary bundle: 6 batch sizes, 5 power limits, 4 replicas.
pub fn bench_bundle() -> TraceBundle {
    traceio::generate_synthetic(&bench_spec(), 17).expect("valid spec").0
}

pub fn bench_spec() -> GeneratorSpec {
    GeneratorSpec {
        job_id: "bench".to_string(),
        batch_sizes: vec![16, 24, 32, 48, 64, 96],
        power_limits: vec![100.0, 125.0, 150.0, 200.0, 250.0],
        default_batch_size: 96,
        max_power: 250.0,
        max_epochs: 150,
        seed_replicas: 4,
        slices: 1,
        noise: 0.05,
        epochs_base: 40.0,
        epochs_curvature: 1.15,
        optimal_batch_size: 32,
        drift_points: Vec::new(),
        throughput_scale: 0.02,
        throughput_half_batch: 32.0,
        throughput_knee_w: 40.0,
        throughput_tau_w: 25.0,
        idle_power_w: 70.0,
        util_min: 0.30,
        util_max: 0.85,
        util_half_batch: 48.0,
    }
}
