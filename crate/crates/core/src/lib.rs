//! Spin-Hamiltonian modelling, spectroscopy fitting and control simulation
//! for NV centers coupled to paramagnetic X defects.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dipolar;
pub mod error;
pub mod field_solver;
pub mod fitting;
pub mod hyperfine;
pub mod io;
pub mod linalg;
pub mod pulse;
pub mod spectrum;
pub mod spin_model;
pub mod synth;

pub use dipolar::{DipolarObservation, ProbabilityMap};
pub use error::{Error, Result};
pub use field_solver::{FieldSolution, Manifold};
pub use fitting::{FitModel, FitResult};
pub use linalg::{Eigensystem, HermitianOperator};
pub use pulse::{DensityState, PhaseCycleResult, PulseSequence};
pub use spectrum::Spectrum;
pub use spin_model::{
    DipolarGeometry, EulerAngles, FieldVector, HyperfineTensor, NvSpec, Spin, SpinSpecies, SpinSystemSpec,
    XDefectSpec,
};
