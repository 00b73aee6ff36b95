//! Point-to-area extreme value modeling of daily rainfall.
//!
//! Generalized Pareto peaks-over-threshold fits at rain gauges are carried to
//! polygonal regions by three estimators: a conditional autoregressive
//! point-to-area random effects model ([`pare`]), block kriging
//! ([`kriging`]) and a regional daily maximum baseline ([`regionalmax`]).
//! [`simulation`] scores the estimators against a known truth.

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod estimates;
pub mod extremes;
pub mod geometry;
pub mod kriging;
pub mod optimize;
pub mod pare;
pub mod regionalmax;
pub mod simulation;

pub use estimates::{Method, RegionEstimate, RegionEstimates};
pub use extremes::{
    DailySeries, ExtremesError, FitOptions, GpdFit, GpdParams, ReturnLevelEstimate,
};
pub use geometry::{
    DistanceMatrix, GeometryError, Point, Projection, Region, RegionSet, Station, StationSet,
    WeightMatrix,
};
pub use kriging::{BlockMethod, KrigingError, KrigingOptions, KrigingReport, VariogramKind};
pub use pare::{PareError, PareFit, PareParameterFits};
pub use regionalmax::{RegionalMaxError, RegionalSeries};
pub use simulation::{SimulationConfig, SimulationError, SimulationReport};
