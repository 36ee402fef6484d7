//! Off-policy estimation of long-term average rewards from batch trajectory
//! data, with asymptotically valid confidence intervals.
//!
//! Given `n` independent trajectories collected under an arbitrary (possibly
//! history-dependent) behavior policy, this crate estimates the long-run
//! average reward of one or more target policies by minimizing an empirical
//! projected Bellman error over reproducing-kernel function classes, reduced
//! to closed-form linear algebra. It also provides the companion variance
//! estimator (via a direction-function fit), data-driven tuning-parameter
//! selection, simulators with exact finite-MDP oracles, and a Monte-Carlo
//! coverage harness.

pub mod coverage;
pub mod data;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod estimator;
pub mod inference;
pub mod simulator;
pub mod stats;
pub mod tuning;

pub use coverage::{run_study, CaseKind, StudyCase, StudyConfig, StudyModel, StudyResult};
pub use data::{
    load_csv, policy_prob_matrix, validate_dataset, write_csv, Dataset, Policy, ReferencePoint,
    Trajectory, TransitionTable, TuningParams, WeightedTransitions,
};
pub use error::{Error, Result};
pub use inference::{
    covariance_matrix, density_ratio, evaluate_policies, fit_direction, infer, DirectionFit,
    InferenceResult, Interval, PolicyEvaluation,
};
pub use kernel::{KernelSpec, ShiftedKernelSpec};
pub use simulator::{
    finite_mdp_direction, finite_mdp_solve, simulate_finite_mdp, simulate_luckett, FiniteMdp,
    LuckettModelConfig, MdpSolution,
};
pub use tuning::{
    select_tuning, select_tuning_many, split_dataset, validation_score, ScoreCell, ScoreTable,
    TuningGrid,
};
