//! Multimodal haptic material perception.
//!
//! The crate covers the whole path from raw grasp recordings to material
//! predictions:
//!
//! * [`synth`] generates seeded, physically plausible sensor traces and on-disk
//!   sessions for a set of material archetypes.
//! * [`ingest`] loads sessions, aligns the multirate streams onto the 50 Hz grid
//!   and converts thermistor voltages to degrees Celsius.
//! * [`signal`] holds the smoothing stack (Butterworth, causal moving average,
//!   Savitzky-Golay, microphone and linear-acceleration conditioning).
//! * [`features`] builds the nine-channel contact window, detects contact per
//!   gripper cup and applies the dataset exclusion rules.
//! * [`models`] is the multi-kernel convolutional encoder with hand-written
//!   backpropagation, its training loop, the decision-forest baseline and the
//!   evaluation metrics.
//! * [`fusion`] turns visual-provider log-probabilities into a prior, fuses it
//!   with the haptic logits and filters uncertain predictions.

pub mod dataset;
pub mod error;
pub mod features;
pub mod fusion;
pub mod ingest;
pub mod labels;
pub mod models;
pub mod signal;
pub mod synth;

pub use error::{ClampError, Result};
pub use labels::{Compliance, Embodiment, Material};
