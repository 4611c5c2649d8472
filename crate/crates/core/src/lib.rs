//! First-differenced GMM estimation and bootstrap inference for dynamic
//! panel threshold regressions.

pub mod bootstrap;
pub mod dgp;
pub mod error;
pub mod gmm;
pub mod grid;
pub mod mc;
pub mod panel;
pub mod rng;
pub mod stats;

pub use bootstrap::{
    continuity_bootstrap_test, grid_bootstrap_ci, linearity_bootstrap_test,
    nonparametric_bootstrap_ci, residual_bootstrap_ci, BootstrapConfig, BootstrapContext,
    CoefficientCis, GridCi, TestOutcome,
};
pub use dgp::{simulate_panel, DgpConfig};
pub use error::{Error, Result};
pub use gmm::{
    fit_unrestricted, profiled_alpha, weight_matrix, FitKind, FitReport, GmmFit, KinkParams,
    ThresholdModel, WeightChoice,
};
pub use grid::{GammaGrid, GridRule};
pub use mc::{run_mc, McConfig, McResult};
pub use panel::{
    build_instruments, first_difference, load_panel, moment_eval, write_panel_csv, DiffPanel,
    InstrumentSet, InstrumentSpec, LagRange, MomentEvaluation, PanelDataset, PanelSchema,
    ThresholdParams,
};
pub use stats::{continuity_stat, distance_stat, sup_wald, TestReport, TestStat};
