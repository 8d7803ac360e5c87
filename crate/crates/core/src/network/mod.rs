//! Network cases, the linear PMU measurement model and bus scheduling.

mod case;
mod coloring;
mod model;
mod placement;

pub use case::{Branch, Bus, BusId, CaseError, NetworkCase};
pub use coloring::{distance2_coloring, Coloring, ColoringError};
pub use model::{
    all_measurement_models, build_measurement_model, kappa, kappa_between, Block,
    BusMeasurementModel, Kappa, ModelError, ROTATE,
};
pub use placement::greedy_pmu_placement;
