//! Physics-informed Gaussian-process inference of power-system dynamics.
//!
//! The swing equation `M ω̇ + D ω + L θ = p` with uniform damping `D = γM`
//! decouples into scalar eigensystems. Their impulse responses give closed-form
//! covariance kernels for angles, speeds, ROCOFs and power injections at every
//! bus, which are then used to condition unmetered signals on synchrophasor data.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod filter;
pub mod frame;
pub mod gp;
pub mod grid;
pub mod covariance;
pub mod kernels;
pub mod mom;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
pub use filter::{apply_zero_phase, design, BandSpec, FilterOperator};
pub use frame::{convert_units, ChannelSpec, Quantity, SignalFrame, Unit, UnitSystem};
pub use grid::{
    build_model, build_reduced_model, eigenspace, kron_reduce, load_case, parse_case, Band, CaseFile, EigenSpace,
    GridModel, TurbineSpec,
};
pub use kernels::{
    cross_corr, kernel_matrix, mode_kernel, poles_second_order, poles_third_order, to_expmix, CorrKernel,
    EigenSystemPoles, ExpMixKernel, KernelQuantity,
};
pub use covariance::{
    add_noise, filtered_noise, kernel_at_lags, participation, CovarianceBlock, CovarianceModel, Filtering, SelectionSet,
};
pub use gp::{
    anomaly_score, differentiate, fit_model_free, fit_model_free_points, impute, posterior, posterior_with_cov,
    robust_cholesky, score_against, woodbury_solve, InferenceProblem, ModelFreeKernel, PosteriorEstimate, Prior, Solver,
    Woodbury,
};
pub use mom::{
    cutoffs, fit_alpha, make_mask, overlap_mask, project_psd, project_psd_masked, sample_cov, sample_covs, AlphaMatrix,
    AlphaProvenance, MaskPolicy, MomFit, MomOptions, NoiseSpec, SampleCovariance,
};
pub use pipeline::{replay, ChannelRef, Experiment, ExperimentConfig, Manifest, Overrides, ResultTable, Stage, Summary};
pub use sim::{
    alpha_from_input_cov, ambient_alpha, decimation_factor, eigen_trajectories, input_cov_from_alpha, measure,
    simulate, simulate_input, state_space, MeasurementPipeline, Scenario, ScenarioKind,
};
