//! Optimal control of the twist-and-turn collective-spin Hamiltonian
//! `H = χ Jz² + ω Jz + Ω(t) Jx` for parameter estimation.
//!
//! The state and its ω-derivative are evolved together as one augmented
//! linear system. A matching costate system, integrated backward from a
//! terminal condition set by the cost, yields the switching function
//! `Φ(t)`, which is the time-local gradient of the cost with respect to the
//! control. The same trajectories give the control Hamiltonian `H_c(t)`,
//! whose flatness and sign are used as optimality diagnostics.
//!
//! Module map:
//!
//! * [`spin`]: collective spin operators, special states, `Jx` eigenbasis.
//! * [`dynamics`]: forward augmented and backward costate integration (RK5).
//! * [`costs`]: QFI, CFI and fidelity terminal costs with costate boundaries.
//! * [`optimizer`]: switching function, diagnostics, projected gradient descent.
//! * [`oracle`]: finite-difference and brute-force verifiers.

pub mod costs;
pub mod dynamics;
pub mod error;
pub mod optimizer;
pub mod oracle;
pub mod spin;
pub mod state;

pub use costs::{CostKind, MeasurementDistribution};
pub use dynamics::{
    AugmentedState, ControlProtocol, CostatePair, IntegratorSettings, ProblemSpec,
    SampledTrajectory,
};
pub use error::{Error, Result};
pub use optimizer::{
    DiagnosticsSeries, OptimizationResult, OptimizerOptions, Status, StepRule, optimize,
};
pub use spin::{Eigensystem, SpinOperators};
pub use state::StateVector;

pub use num_complex::Complex64;
