//! Lifting-risk classification from wearable IMU recordings: bandpass
//! filtering, time-series-to-image encoding, a small CNN engine with Adam and
//! early stopping, multiclass correlation metrics and gradient saliency.

pub mod hypertune;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod saliency;
pub mod signal;
pub mod synthdata;
pub mod trainer;
