//! Offline evaluation: ranking metrics, ablations, sweeps, recall probes and
//! serving latency.

pub mod ablation;
pub mod latency;
pub mod metrics;
pub mod recall;
pub mod sweep;

pub use metrics::{auc, gauc};
pub use recall::{recall_topk, region_probe, region_query, RecallReport};
pub use ablation::{run_ablation, EvalReport, Timings, Variant, VariantSpec};
pub use latency::{latency_bench, LatencyReport};
pub use sweep::{sweep, Curve, SweepParam};
