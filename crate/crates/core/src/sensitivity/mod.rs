//! Numerical checks of the over-squashing sensitivity bounds.
//!
//! Attention is frozen, hidden states are differentiated by central finite
//! differences, and the measured Jacobian norms are compared with the
//! closed-form bounds built from the mixing matrices and Lipschitz profile.

mod drift;
mod jacobian;
mod lipschitz;
mod mixing;

pub use drift::{left_drift_limit, uniform_causal, DriftCurve, DriftPoint};
pub use jacobian::{
    bound_sweep, finite_difference_jacobian, jacobian_norms, operator_norm, position_jacobians,
    run_seed, JacobianReport, PositionSensitivity, SeedReport, SweepConfig, FD_STEP,
    MAX_FD_ENTRIES,
};
pub use lipschitz::{estimate_lipschitz, norm_beta, spectral_norm, LipschitzProfile, NormScope};
pub use mixing::{build_mixing, path_sum_bruteforce, MixingSystem, MAX_PATH_LAYERS, MAX_PATH_N};
