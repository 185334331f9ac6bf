//! Transport applications: regularized optimal transport, telescopic density
//! ratio estimation and worst-case sampling.

mod dre;
mod dro;
mod ot;
mod ratio;

pub use dre::{
    compare_dre, dre_grid, flow_bridge_path, mse, ou_bridge_densities, ou_bridge_path, ou_evolve_density,
    telescope_sum, telescopic_log_ratio, BridgeKind, DreComparison, GridSpec, TelescopeEstimate,
};
pub use dro::{dro_on_tape, dro_train, CustomRisk, DescentGuard, DroConfig, DroResult, RiskFunction};
pub use ot::{
    ot_analytic_on_tape, ot_classifier_on_tape, ot_train, transport_cost, EndpointMode, Marginal, OtConfig,
    OtResult, OtTerms,
};
pub use ratio::{fit_logistic_ratio, fit_logistic_ratio_with, logistic_on_tape, RatioModel, DEFAULT_RATIO_HIDDEN};
