//! Shared inputs for the criterion benchmarks.

use spinforge::{FieldVector, SpinSystemSpec};

pub fn reference_system() -> SpinSystemSpec {
    SpinSystemSpec::reference()
}

pub fn tilted_field(b0: f64, tilt: f64) -> FieldVector {
    FieldVector {
        b0,
        theta: spinforge::spin_model::THETA_NV + tilt,
        phi: 0.0,
    }
}
