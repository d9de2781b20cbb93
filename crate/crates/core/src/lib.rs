//! Doubly robust difference-in-differences for general treatment paths.
//!
//! Treatment histories are summarized into discrete effective treatments
//! ([`efftreat`]); each estimation cell compares movers with stayers under
//! outcome-regression and propensity-score first steps ([`nuisance`],
//! [`estimator`]); uniform bands come from a multiplier bootstrap
//! ([`inference`]).
//!
//! The numerical core is generic over [`Real`]; the aliases below fix `f64`.

pub mod efftreat;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod linalg;
pub mod nuisance;
pub mod panel;
pub mod rng;
pub mod scalar;
pub mod simulate;

pub use efftreat::{
    build_cell_frame, compute_effective_treatment, default_design, with_pretrends, BuiltinKind, Cell,
    CovariateSet, Design, EffectiveKind, EffectivePanel, EffectiveTreatmentSpec,
};
pub use error::{Error, ErrorCategory, Result};
pub use estimator::{
    aggregate_time_average, aggregate_weighted, aggregate_weighted_by_movers, atem_dr, atem_ipw, atem_or,
    atem_pretrend, estimate_cell, estimate_cells, AggregateKind, EstimandKind,
};
pub use inference::{
    bootstrap_estimates, multiplier_bootstrap, pretrends_report, BootstrapConfig, BootstrapTarget,
    PretrendsVerdict, WeightKind,
};
pub use nuisance::{fit_gps, fit_gps_logit, fit_nuisances, fit_or_stayers, GpsLink, NuisanceOptions};
pub use panel::{load_panel_csv, read_panel_csv, PanelSchema};
pub use scalar::Real;
pub use simulate::{generate_dgp, run_monte_carlo, MonteCarloDesign, SimConfig, SimTable};

pub type Panel = panel::PanelDataset<f64>;
pub type Frame = efftreat::MoverStayerFrame<f64>;
pub type TreatmentSpec = efftreat::EffectiveTreatmentSpec<f64>;
pub type Estimate = estimator::AtemEstimate<f64>;
pub type Aggregate = estimator::AggregateEstimate<f64>;
pub type OrFit = nuisance::OrFit<f64>;
pub type GpsFit = nuisance::GpsFit<f64>;
pub type Options = nuisance::NuisanceOptions<f64>;
pub type Band = inference::Band<f64>;
pub type BootstrapResult = inference::BootstrapResult<f64>;
