//! Hybrid SCADA/PMU power state estimation with unknown PMU sampling phase
//! errors, by centralized and distributed variational inference.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod centralized;
pub mod distributed;
pub mod experiment;
pub mod measurement;
pub mod network;
pub mod oracle;
pub mod phase;
pub mod scada;
pub mod truncnorm;

pub use measurement::{MeasurementSet, PmuReading, ScadaReading, TrueState};
pub use network::{BusId, BusMeasurementModel, Coloring, NetworkCase};
pub use phase::{PhaseBelief, PhasePrior};
pub use scada::{PolarEstimate, RectPrior};
pub use truncnorm::TruncatedGaussian;

pub use nalgebra;
