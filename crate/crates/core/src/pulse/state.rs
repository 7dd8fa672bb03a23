use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, hermitian_deviation, identity, re, CMatrix, CVector, C64};

/// Tolerance on the trace of a density matrix.
pub const TRACE_TOL: f64 = 1e-9;
/// Most negative eigenvalue accepted as positive semidefinite.
pub const EIGEN_FLOOR: f64 = -1e-9;

pub const DIM: usize = 8;

/// One of the three qubits of the register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Qubit {
    #[serde(rename = "NV")]
    Nv,
    X1,
    X2,
}

impl Qubit {
    pub const ALL: [Qubit; 3] = [Qubit::Nv, Qubit::X1, Qubit::X2];

    pub fn name(self) -> &'static str {
        match self {
            Qubit::Nv => "NV",
            Qubit::X1 => "X1",
            Qubit::X2 => "X2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Qubit::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| Error::UnknownTransition(s.to_string()))
    }

    /// Position in (NV, X1, X2).
    pub fn slot(self) -> usize {
        self as usize
    }

    /// Weight of this qubit's bit in a basis index (NV is the most significant).
    pub fn bit(self) -> usize {
        4 >> self.slot()
    }
}

/// Embeds a one-qubit operator on `q` into the 8-dimensional register.
pub fn embed(op: &CMatrix, q: Qubit) -> CMatrix {
    let mut out = CMatrix::zeros(DIM, DIM);
    let b = q.bit();
    for i in 0..DIM {
        for j in 0..DIM {
            if i & !b == j & !b {
                out[(i, j)] = op[(usize::from(i & b != 0), usize::from(j & b != 0))];
            }
        }
    }
    out
}

/// `Z` eigenvalue (+1 for |0⟩, −1 for |1⟩) of qubit `q` in basis state `i`.
pub fn z_sign(i: usize, q: Qubit) -> f64 {
    if i & q.bit() == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Three-qubit density matrix over (NV, X1, X2).
///
/// Qubit |0⟩ is NV m_s = 0 and X spin up; |1⟩ is NV m_s = −1 and X spin
/// down. Basis index is 4·NV + 2·X1 + X2, so ρ_11 is `rho[(0, 0)]`, ρ_88 is
/// `rho[(7, 7)]` and ρ_18 is `rho[(0, 7)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    rho: CMatrix,
}

impl DensityState {
    /// Validates Hermiticity, unit trace and positivity.
    pub fn new(rho: CMatrix) -> Result<Self> {
        if rho.nrows() != DIM || rho.ncols() != DIM {
            return Err(Error::Dimension(format!("density matrix must be 8×8, got {}×{}", rho.nrows(), rho.ncols())));
        }
        let s = Self { rho };
        s.validate()?;
        Ok(s)
    }

    pub fn ground() -> Self {
        Self::basis(0)
    }

    pub fn basis(i: usize) -> Self {
        let mut rho = CMatrix::zeros(DIM, DIM);
        rho[(i, i)] = re(1.0);
        Self { rho }
    }

    pub fn maximally_mixed() -> Self {
        Self {
            rho: identity(DIM) * re(1.0 / DIM as f64),
        }
    }

    /// |ψ⟩⟨ψ| for a normalized copy of `psi`.
    pub fn pure(psi: &CVector) -> Result<Self> {
        let n = psi.norm();
        if psi.len() != DIM || !(n > 0.0) {
            return Err(Error::invalid("state vector must have 8 entries and nonzero norm"));
        }
        let v = psi / re(n);
        Ok(Self { rho: &v * v.adjoint() })
    }

    /// (|000⟩ + e^{iχ}|111⟩)/√2.
    pub fn ghz(chi: f64) -> Self {
        let mut v = CVector::zeros(DIM);
        v[0] = re(std::f64::consts::FRAC_1_SQRT_2);
        v[7] = c(chi.cos(), chi.sin()) * std::f64::consts::FRAC_1_SQRT_2;
        Self { rho: &v * v.adjoint() }
    }

    /// Product of single-qubit density matrices in (NV, X1, X2) order.
    pub fn product(factors: [&CMatrix; 3]) -> Result<Self> {
        Self::new(factors[0].kronecker(factors[1]).kronecker(factors[2]))
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn into_matrix(self) -> CMatrix {
        self.rho
    }

    pub fn element(&self, i: usize, j: usize) -> C64 {
        self.rho[(i, j)]
    }

    pub fn trace(&self) -> C64 {
        self.rho.trace()
    }

    pub fn purity(&self) -> f64 {
        (&self.rho * &self.rho).trace().re
    }

    pub fn hermitian_deviation(&self) -> f64 {
        hermitian_deviation(&self.rho)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.rho + self.rho.adjoint()) * re(0.5);
        SymmetricEigen::new(h).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidState("non-finite entry".into()));
        }
        let dev = self.hermitian_deviation();
        if dev > crate::linalg::HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("not Hermitian (deviation {dev:.3e})")));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace {tr} is not 1")));
        }
        let lo = self.min_eigenvalue();
        if lo < EIGEN_FLOOR {
            return Err(Error::InvalidState(format!("negative eigenvalue {lo:.3e}")));
        }
        Ok(())
    }

    /// |⟨111|ρ|000⟩|.
    pub fn coherence(&self) -> f64 {
        self.rho[(7, 0)].norm()
    }

    /// GHZ fidelity maximized over the relative phase χ:
    /// ½(ρ_11 + ρ_88) + |ρ_18|.
    pub fn ghz_fidelity(&self) -> f64 {
        0.5 * (self.rho[(0, 0)].re + self.rho[(7, 7)].re) + self.rho[(0, 7)].norm()
    }

    /// ⟨Z⟩ of one qubit.
    pub fn expect_z(&self, q: Qubit) -> f64 {
        (0..DIM).map(|i| z_sign(i, q) * self.rho[(i, i)].re).sum()
    }

    /// Reduced 2×2 state of one qubit.
    pub fn reduced(&self, q: Qubit) -> CMatrix {
        let b = q.bit();
        let mut out = CMatrix::zeros(2, 2);
        for i in 0..DIM {
            for j in 0..DIM {
                if i & !b == j & !b {
                    out[(usize::from(i & b != 0), usize::from(j & b != 0))] += self.rho[(i, j)];
                }
            }
        }
        out
    }

    /// Short basis labels in index order, e.g. `"101"` for NV=1, X1=0, X2=1.
    pub fn labels() -> Vec<String> {
        (0..DIM).map(|i| format!("{}{}{}", (i >> 2) & 1, (i >> 1) & 1, i & 1)).collect()
    }

    /// U ρ U†.
    pub fn evolve(&self, u: &CMatrix) -> Self {
        Self {
            rho: u * &self.rho * u.adjoint(),
        }
    }

    /// Replaces the state of qubit `q` by `sigma` with probability `p`:
    /// ρ → (1 − p)ρ + p·σ_q ⊗ Tr_q ρ.
    pub fn replace_qubit(&self, q: Qubit, sigma: &CMatrix, p: f64) -> Self {
        if p == 0.0 {
            return self.clone();
        }
        let b = q.bit();
        let mut out = &self.rho * re(1.0 - p);
        for i in 0..DIM {
            for j in 0..DIM {
                // Tr_q ρ at the other bits of (i, j), times σ at q's bits
                let (io, jo) = (i & !b, j & !b);
                let t = self.rho[(io, jo)] + self.rho[(io | b, jo | b)];
                out[(i, j)] += sigma[(usize::from(i & b != 0), usize::from(j & b != 0))] * t * p;
            }
        }
        Self { rho: out }
    }

    /// Depolarizing channel of strength `p` on one qubit.
    pub fn depolarize(&self, q: Qubit, p: f64) -> Self {
        self.replace_qubit(q, &(identity(2) * re(0.5)), p)
    }
}

/// Pumps the NV factor toward |0⟩: ρ → (1 − η)ρ + η·|0⟩⟨0| ⊗ Tr_NV ρ.
pub fn polarize_nv(rho: &DensityState, efficiency: f64) -> Result<DensityState> {
    if !(0.0..=1.0).contains(&efficiency) {
        return Err(Error::invalid(format!("polarization efficiency {efficiency} outside [0, 1]")));
    }
    let mut zero = CMatrix::zeros(2, 2);
    zero[(0, 0)] = re(1.0);
    Ok(rho.replace_qubit(Qubit::Nv, &zero, efficiency))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_convention() {
        let s = DensityState::basis(4);
        assert_eq!(s.expect_z(Qubit::Nv), -1.0);
        assert_eq!(s.expect_z(Qubit::X1), 1.0);
        assert_eq!(DensityState::labels()[4], "100");
    }

    #[test]
    fn ghz_has_half_coherence() {
        let g = DensityState::ghz(0.7);
        assert!((g.coherence() - 0.5).abs() < 1e-15);
        assert!((g.ghz_fidelity() - 1.0).abs() < 1e-15);
        g.validate().unwrap();
    }

    #[test]
    fn reset_keeps_other_qubits() {
        let g = DensityState::ghz(0.0);
        let p = polarize_nv(&g, 1.0).unwrap();
        assert!((p.expect_z(Qubit::Nv) - 1.0).abs() < 1e-15);
        assert!((p.reduced(Qubit::X1) - g.reduced(Qubit::X1)).norm() < 1e-15);
        assert!((p.trace().re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_states() {
        let mut m = identity(DIM) * re(0.125);
        m[(0, 1)] = re(0.3);
        assert!(DensityState::new(m).is_err());
        assert!(DensityState::new(identity(DIM)).is_err());
        let mut m = CMatrix::zeros(DIM, DIM);
        m[(0, 0)] = re(1.5);
        m[(1, 1)] = re(-0.5);
        assert!(DensityState::new(m).is_err());
    }
}
