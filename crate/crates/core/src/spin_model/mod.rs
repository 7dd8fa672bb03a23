//! Spin species, tensors, fields and the static Hamiltonians built from them.
//!
//! Energies are linear frequencies in MHz, fields in Gauss, angles in degrees.
//! Basis orders are fixed: NV is (m_s = +1, 0, −1) ⊗ (nucleus up, down) and
//! an X defect is (electron up, down) ⊗ (nucleus up, down).

mod hamiltonian;
mod types;

pub use hamiltonian::{
    basis_factor, bilinear, nv_electron_hamiltonian, nv_hamiltonian, rotation_matrix, spin_operators,
    tensor_in_crystal_frame, x_defect_hamiltonian, zeeman_hamiltonian, NuclearZeeman,
};
pub use types::*;

/// Eigenvalues (ascending) and eigenvectors of an operator.
pub fn eigensystem(h: &crate::linalg::HermitianOperator) -> crate::Result<crate::linalg::Eigensystem> {
    h.eigensystem()
}
