//! Synthetic benchmarks: phantoms under known motion, simulated gated
//! acquisitions and image-quality metrics.

pub mod dataset;
pub mod metrics;
pub mod phantom;

pub use dataset::{simulate, AcquisitionPlan, Dataset, GateRecord};
pub use metrics::{metrics, Metrics};
pub use phantom::{phantom_sequence, Motion, Phantom};
