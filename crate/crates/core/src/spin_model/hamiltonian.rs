use nalgebra::{Matrix3, Vector3};

use crate::linalg::{identity, kron, re, spin_half_ops, spin_one_ops, BasisFactor, CMatrix, HermitianOperator};

use super::types::{EulerAngles, FieldVector, HyperfineTensor, NvSpec, Spin, SpinSpecies, XDefectSpec};

/// Whether to include the nuclear Zeeman term in a Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NuclearZeeman {
    Include,
    #[default]
    Exclude,
}

impl NuclearZeeman {
    pub fn included(self) -> bool {
        matches!(self, NuclearZeeman::Include)
    }
}

impl From<bool> for NuclearZeeman {
    fn from(b: bool) -> Self {
        if b {
            NuclearZeeman::Include
        } else {
            NuclearZeeman::Exclude
        }
    }
}

pub fn spin_operators(spin: Spin) -> [CMatrix; 3] {
    match spin {
        Spin::Half => spin_half_ops(),
        Spin::One => spin_one_ops(),
    }
}

pub fn basis_factor(species: &SpinSpecies) -> BasisFactor {
    BasisFactor::new(species.label.clone(), species.spin.state_labels())
}

/// `Σ_k v_k · ops_k`.
fn dot_ops(v: &Vector3<f64>, ops: &[CMatrix; 3]) -> CMatrix {
    &ops[0] * re(v.x) + &ops[1] * re(v.y) + &ops[2] * re(v.z)
}

/// `Σ_ij A_ij · S_i ⊗ I_j`.
pub fn bilinear(a: &Matrix3<f64>, s: &[CMatrix; 3], i: &[CMatrix; 3]) -> CMatrix {
    let n = s[0].nrows() * i[0].nrows();
    let mut out = CMatrix::zeros(n, n);
    for (p, sp) in s.iter().enumerate() {
        for (q, iq) in i.iter().enumerate() {
            if a[(p, q)] != 0.0 {
                out += kron(sp, iq) * re(a[(p, q)]);
            }
        }
    }
    out
}

/// Zeeman Hamiltonian `gyro · B · S` in MHz, crystal frame.
pub fn zeeman_hamiltonian(species: &SpinSpecies, field: &FieldVector) -> HermitianOperator {
    let ops = spin_operators(species.spin);
    let m = dot_ops(&(field.cartesian() * species.gyro), &ops);
    HermitianOperator::from_parts(m, vec![basis_factor(species)])
}

/// Rotation matrix from the principal frame of a tensor to the crystal frame
/// convention `Â = Rᵀ·A·R`.
pub fn rotation_matrix(angles: &EulerAngles) -> Matrix3<f64> {
    let (a, b, g) = angles.radians();
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sg, cg) = g.sin_cos();
    Matrix3::new(
        cg * cb * ca - sg * sa,
        cg * cb * sa + sg * ca,
        -cg * sb,
        -sg * cb * ca - cg * sa,
        -sg * cb * sa + cg * ca,
        sg * sb,
        sb * ca,
        sb * sa,
        cb,
    )
}

pub fn tensor_in_crystal_frame(t: &HyperfineTensor) -> Matrix3<f64> {
    let r = rotation_matrix(&t.orientation);
    let a = r.transpose() * t.principal() * r;
    // exact symmetry
    (a + a.transpose()) * 0.5
}

fn x_basis(x: &XDefectSpec) -> Vec<BasisFactor> {
    vec![basis_factor(&x.electron), basis_factor(&x.nucleus)]
}

/// X-defect Hamiltonian on (electron up, down) ⊗ (nucleus up, down), in MHz.
pub fn x_defect_hamiltonian(x: &XDefectSpec, field: &FieldVector, nuclear: NuclearZeeman) -> HermitianOperator {
    let s = spin_half_ops();
    let b = field.cartesian();
    let id2 = identity(2);
    let mut h = kron(&dot_ops(&(b * x.electron.gyro), &s), &id2);
    h += bilinear(&tensor_in_crystal_frame(&x.hyperfine), &s, &s);
    if nuclear.included() {
        h += kron(&id2, &dot_ops(&(b * x.nucleus.gyro), &s));
    }
    HermitianOperator::from_parts(h, x_basis(x))
}

/// NV electron-only Hamiltonian (3×3, basis m_s = +1, 0, −1), NV frame.
pub fn nv_electron_hamiltonian(nv: &NvSpec, field: &FieldVector) -> CMatrix {
    let s = spin_one_ops();
    let b = nv.field_in_nv_frame(field) * nv.electron.gyro;
    &s[2] * &s[2] * re(nv.zfs) + dot_ops(&b, &s)
}

/// Full NV Hamiltonian on (m_s = +1, 0, −1) ⊗ (15N up, down), in MHz.
/// Zero-field splitting along the molecular axis; the host hyperfine tensor
/// is oriented relative to the NV frame.
pub fn nv_hamiltonian(nv: &NvSpec, field: &FieldVector, nuclear: NuclearZeeman) -> HermitianOperator {
    let s = spin_one_ops();
    let i = spin_half_ops();
    let b = nv.field_in_nv_frame(field);
    let mut h = kron(&nv_electron_hamiltonian(nv, field), &identity(2));
    h += bilinear(&tensor_in_crystal_frame(&nv.n15_hyperfine), &s, &i);
    if nuclear.included() {
        h += kron(&identity(3), &dot_ops(&(b * nv.nucleus.gyro), &i));
    }
    HermitianOperator::from_parts(h, vec![basis_factor(&nv.electron), basis_factor(&nv.nucleus)])
}
