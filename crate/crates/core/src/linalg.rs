//! Dense complex linear algebra for small spin spaces.
//!
//! Everything here works on `nalgebra::DMatrix<Complex<f64>>`. The matrices in
//! this crate never exceed 8×8, so no effort is spent on structure.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Relative tolerance for accepting a matrix as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

/// Spin-1/2 operators (σ/2) in the basis (up, down).
pub fn spin_half_ops() -> [CMatrix; 3] {
    let z = C64::new(0.0, 0.0);
    let h = re(0.5);
    let ih = c(0.0, 0.5);
    [
        CMatrix::from_row_slice(2, 2, &[z, h, h, z]),
        CMatrix::from_row_slice(2, 2, &[z, -ih, ih, z]),
        CMatrix::from_row_slice(2, 2, &[h, z, z, -h]),
    ]
}

/// Pauli matrices in the basis (up, down).
pub fn pauli() -> [CMatrix; 3] {
    spin_half_ops().map(|m| m * re(2.0))
}

/// Spin-1 operators in the basis (m = +1, 0, −1).
pub fn spin_one_ops() -> [CMatrix; 3] {
    let z = C64::new(0.0, 0.0);
    let s = re(std::f64::consts::FRAC_1_SQRT_2);
    let is = c(0.0, std::f64::consts::FRAC_1_SQRT_2);
    let one = re(1.0);
    [
        CMatrix::from_row_slice(3, 3, &[z, s, z, s, z, s, z, s, z]),
        CMatrix::from_row_slice(3, 3, &[z, -is, z, is, z, -is, z, is, z]),
        CMatrix::from_row_slice(3, 3, &[one, z, z, z, z, z, z, z, -one]),
    ]
}

/// Frobenius norm of `m − m†` relative to the norm of `m`.
pub fn hermitian_deviation(m: &CMatrix) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let diff = (m - m.adjoint()).norm();
    let scale = m.norm();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn is_hermitian(m: &CMatrix, tol: f64) -> bool {
    hermitian_deviation(m) <= tol
}

/// Real embedding of a real 3×3 matrix.
pub fn complexify(m: &DMatrix<f64>) -> CMatrix {
    m.map(re)
}

/// Eigen-decomposition of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct Eigensystem {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector for `values[k]`.
    pub vectors: CMatrix,
}

impl Eigensystem {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, k: usize) -> CVector {
        self.vectors.column(k).into_owned()
    }

    /// Index of the eigenvector with the largest weight on basis state `basis`.
    pub fn best_overlap(&self, basis: usize) -> (usize, f64) {
        (0..self.dim())
            .map(|k| (k, self.vectors[(basis, k)].norm_sqr()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    }
}

/// Diagonalize a Hermitian matrix.
///
/// Eigenvalues are sorted ascending. Each eigenvector is phase-fixed so that
/// its largest-magnitude component is real and positive, which makes the output
/// reproducible for identical input.
pub fn eigh(m: &CMatrix) -> Result<Eigensystem> {
    let dev = hermitian_deviation(m);
    if dev > HERMITIAN_TOL {
        return Err(Error::NonHermitian(dev));
    }
    let n = m.nrows();
    // Symmetrize exactly so the solver sees a Hermitian input.
    let h = (m + m.adjoint()) * re(0.5);
    let eig = SymmetricEigen::new(h);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut vectors = CMatrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(eig.eigenvalues[src]);
        let col = eig.eigenvectors.column(src);
        // Pick the first component whose magnitude is within rounding of the max.
        let max = col.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let pivot = col
            .iter()
            .find(|z| z.norm() >= max * (1.0 - 1e-9))
            .copied()
            .unwrap_or(re(1.0));
        let phase = if pivot.norm() > 0.0 {
            pivot.conj() / pivot.norm()
        } else {
            re(1.0)
        };
        for i in 0..n {
            vectors[(i, dst)] = col[i] * phase;
        }
    }
    Ok(Eigensystem { values, vectors })
}

/// Unitary `exp(-i·2π·H·t)` for `H` in MHz and `t` in µs.
pub fn propagator(eig: &Eigensystem, t_us: f64) -> CMatrix {
    let n = eig.dim();
    let mut d = CMatrix::zeros(n, n);
    for k in 0..n {
        let ph = -std::f64::consts::TAU * eig.values[k] * t_us;
        d[(k, k)] = c(ph.cos(), ph.sin());
    }
    &eig.vectors * d * eig.vectors.adjoint()
}

/// `exp(-i·θ·G)` for a Hermitian generator `G` with eigenvalues ±1
/// (i.e. `G² = 1`).
pub fn involutory_exp(g: &CMatrix, theta: f64) -> CMatrix {
    let n = g.nrows();
    identity(n) * re(theta.cos()) - g * c(0.0, theta.sin())
}

/// One factor of a tensor-product basis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisFactor {
    pub label: String,
    pub states: Vec<String>,
}

impl BasisFactor {
    pub fn new(label: impl Into<String>, states: &[&str]) -> Self {
        Self {
            label: label.into(),
            states: states.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }
}

/// Dense Hermitian matrix with a labelled tensor-product basis.
#[derive(Debug, Clone)]
pub struct HermitianOperator {
    matrix: CMatrix,
    basis: Vec<BasisFactor>,
}

impl HermitianOperator {
    pub fn new(matrix: CMatrix, basis: Vec<BasisFactor>) -> Result<Self> {
        let dim: usize = basis.iter().map(BasisFactor::dim).product();
        if !matrix.is_square() || matrix.nrows() != dim {
            return Err(Error::Dimension(format!(
                "{}x{} matrix for a basis of dimension {dim}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let dev = hermitian_deviation(&matrix);
        if dev > HERMITIAN_TOL {
            return Err(Error::NonHermitian(dev));
        }
        Ok(Self { matrix, basis })
    }

    /// Builds without re-checking Hermiticity; used for sums of operators
    /// already known to be Hermitian.
    pub(crate) fn from_parts(matrix: CMatrix, basis: Vec<BasisFactor>) -> Self {
        debug_assert!(hermitian_deviation(&matrix) <= 1e-10);
        Self { matrix, basis }
    }

    pub fn zeros(basis: Vec<BasisFactor>) -> Self {
        let dim: usize = basis.iter().map(BasisFactor::dim).product();
        Self {
            matrix: CMatrix::zeros(dim, dim),
            basis,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn basis(&self) -> &[BasisFactor] {
        &self.basis
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn eigensystem(&self) -> Result<Eigensystem> {
        eigh(&self.matrix)
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        Ok(self.eigensystem()?.values)
    }

    /// Tensor product `self ⊗ other`.
    pub fn tensor(&self, other: &HermitianOperator) -> HermitianOperator {
        let mut basis = self.basis.clone();
        basis.extend(other.basis.iter().cloned());
        Self::from_parts(kron(&self.matrix, &other.matrix), basis)
    }

    pub fn add(&self, other: &HermitianOperator) -> Result<HermitianOperator> {
        if self.basis != other.basis {
            return Err(Error::Dimension("operators act on different bases".into()));
        }
        Ok(Self::from_parts(&self.matrix + &other.matrix, self.basis.clone()))
    }

    pub fn scaled(&self, k: f64) -> HermitianOperator {
        Self::from_parts(&self.matrix * re(k), self.basis.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_hermitian(n: usize, seed: u64) -> CMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = CMatrix::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        (&a + a.adjoint()) * re(0.5)
    }

    #[test]
    fn diagonal_matrix_eigenvalues_sorted() {
        let m = CMatrix::from_diagonal(&CVector::from_vec(vec![re(3.0), re(-1.0), re(2.0)]));
        let e = eigh(&m).unwrap();
        assert_eq!(e.values, vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn pauli_x_eigenvalues() {
        let e = eigh(&pauli()[0]).unwrap();
        assert!((e.values[0] + 1.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_hermitian() {
        let m = CMatrix::from_row_slice(2, 2, &[re(0.0), re(1.0), re(0.0), re(0.0)]);
        assert!(matches!(eigh(&m), Err(Error::NonHermitian(_))));
    }

    /// Characteristic-polynomial oracle: det(H − λ) = 0 for each eigenvalue,
    /// with the 3×3 determinant expanded by hand.
    #[test]
    fn dim3_matches_characteristic_polynomial() {
        for seed in 0..20 {
            let h = random_hermitian(3, seed);
            let e = eigh(&h).unwrap();
            for &lam in &e.values {
                let m = &h - identity(3) * re(lam);
                let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                    - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                    + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
                assert!(det.norm() < 1e-10, "seed {seed}: det {det}");
            }
            // trace and determinant of H are the eigenvalue sum and product
            let sum: f64 = e.values.iter().sum();
            assert!((sum - h.trace().re).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_and_determinism() {
        for seed in 0..10 {
            let h = random_hermitian(6, seed);
            let a = eigh(&h).unwrap();
            let b = eigh(&h).unwrap();
            assert_eq!(a.values, b.values);
            assert_eq!(a.vectors, b.vectors);
            let norm = h.norm();
            for k in 0..6 {
                let v = a.vector(k);
                let r = &h * &v - &v * re(a.values[k]);
                assert!(r.norm() <= 1e-9 * norm);
            }
        }
    }

    #[test]
    fn operator_rejects_wrong_dimension() {
        let basis = vec![BasisFactor::new("e", &["up", "down"])];
        assert!(HermitianOperator::new(identity(3), basis).is_err());
    }

    #[test]
    fn spin_commutation_relations() {
        for ops in [spin_half_ops(), spin_one_ops()] {
            let [x, y, z] = &ops;
            let lhs = commutator(x, y);
            let rhs = z * c(0.0, 1.0);
            assert!((lhs - rhs).norm() < 1e-14);
        }
    }

    #[test]
    fn propagator_is_unitary() {
        let h = random_hermitian(4, 7);
        let e = eigh(&h).unwrap();
        let u = propagator(&e, 0.37);
        assert!((&u * u.adjoint() - identity(4)).norm() < 1e-12);
    }
}
