//! NV–X dipolar couplings, coupling extraction from time traces, and defect
//! localization.
//!
//! Couplings are returned in kHz. Internally Hamiltonians stay in MHz like the
//! rest of the crate.

use std::f64::consts::TAU;

use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{
    build_fit_result, levenberg_marquardt, multi_start, multi_start_all, FitModel, FitResult, LmOptions, LsqProblem,
};
use crate::linalg::{eigh, kron, re, spin_half_ops, spin_one_ops, BasisFactor, CVector, HermitianOperator};
use crate::spectrum::{amplitude_spectrum, find_peaks};
use crate::spin_model::{DipolarGeometry, FieldVector, NvSpec, XDefectSpec, GAMMA_E};

/// Dipolar constant for two electron spins 1 nm apart, MHz.
pub const DIPOLAR_CONSTANT_MHZ: f64 = 0.052041;
/// Same constant in kHz.
pub const DIPOLAR_CONSTANT_KHZ: f64 = 52.041;

/// A measured coupling magnitude at one field orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipolarObservation {
    pub field: FieldVector,
    /// |d| in kHz.
    pub coupling: f64,
    /// kHz.
    pub sigma: f64,
}

impl DipolarObservation {
    pub fn new(field: FieldVector, coupling: f64, sigma: f64) -> Result<Self> {
        let o = Self { field, coupling, sigma };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coupling >= 0.0) || !self.coupling.is_finite() {
            return Err(Error::invalid(format!("coupling must be >= 0, got {}", self.coupling)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// `−k/r³ [3(S·r̂)(I·r̂) − S·I]` on NV (m = +1, 0, −1) ⊗ X (up, down), NV
/// frame, MHz. `k` equals the dipolar constant for two free electrons.
pub fn dipolar_hamiltonian(g: &DipolarGeometry, nv_gyro: f64, x_gyro: f64) -> Result<HermitianOperator> {
    if !(g.r > 0.0) {
        return Err(Error::invalid("distance must be positive"));
    }
    let k = DIPOLAR_CONSTANT_MHZ * (nv_gyro / GAMMA_E) * (x_gyro / GAMMA_E) / g.r.powi(3);
    let s = spin_one_ops();
    let i = spin_half_ops();
    let u = g.unit();
    let sr = &s[0] * re(u.x) + &s[1] * re(u.y) + &s[2] * re(u.z);
    let ir = &i[0] * re(u.x) + &i[1] * re(u.y) + &i[2] * re(u.z);
    let mut h = kron(&sr, &ir) * re(3.0);
    for (a, b) in s.iter().zip(&i) {
        h -= kron(a, b);
    }
    HermitianOperator::new(
        h * re(-k),
        vec![
            BasisFactor::new("nv", &["+1", "0", "-1"]),
            BasisFactor::new("x", &["up", "down"]),
        ],
    )
}

/// NV eigenvectors adiabatically connected to m = 0 and m = −1, from the
/// electron Hamiltonian restricted to that subspace. Embedded in 3-d.
fn nv_qubit_states(nv: &NvSpec, field: &FieldVector) -> Result<[CVector; 2]> {
    // labeling must also hold with m = +1 present, otherwise the projection
    // is meaningless
    crate::field_solver::adiabatic_electron_basis(nv, field)?;
    let h = crate::spin_model::nv_electron_hamiltonian(nv, field);
    let block = h.view((1, 1), (2, 2)).into_owned();
    let eig = eigh(&block)?;
    let mut out = [CVector::zeros(3), CVector::zeros(3)];
    for (slot, (bare, label)) in [(0usize, "0"), (1usize, "-1")].into_iter().enumerate() {
        let (k, w) = eig.best_overlap(bare);
        if w < 0.5 {
            return Err(Error::DegenerateMixing {
                state: format!("m_s={label}"),
                overlap: w,
            });
        }
        let v = eig.vector(k);
        out[slot][1] = v[0];
        out[slot][2] = v[1];
    }
    Ok(out)
}

/// Secular dipolar coupling (kHz, signed) from separate diagonalization of the
/// NV (restricted to m = 0, −1) and X electron Hamiltonians.
///
/// d is half the change of the NV 0 ↔ −1 transition when X flips from
/// parallel to antiparallel with the field.
pub fn secular_dipolar_numeric(nv: &NvSpec, x: &XDefectSpec, field: &FieldVector) -> Result<f64> {
    x.validate()?;
    let hdd = dipolar_hamiltonian(&x.geometry, nv.electron.gyro, x.electron.gyro)?;
    let [v0, vm] = nv_qubit_states(nv, field)?;

    let b = nv.field_in_nv_frame(field);
    let bh = if b.norm() > 0.0 { b.normalize() } else { Vector3::z() };
    let s = spin_half_ops();
    let hx = &s[0] * re(bh.x) + &s[1] * re(bh.y) + &s[2] * re(bh.z);
    let ex = eigh(&hx)?;
    // eigenvalues ascending; for a positive gyro the upper state is along B
    let (up, down) = if x.electron.gyro >= 0.0 {
        (ex.vector(1), ex.vector(0))
    } else {
        (ex.vector(0), ex.vector(1))
    };

    let m = hdd.matrix();
    let e = |a: &CVector, bx: &CVector| -> f64 {
        let psi = a.kronecker(bx);
        (psi.adjoint() * m * &psi)[(0, 0)].re
    };
    let d = 0.5 * ((e(&vm, &up) - e(&v0, &up)) - (e(&vm, &down) - e(&v0, &down)));
    Ok(d * 1e3)
}

/// Closed-form secular coupling (kHz, signed) for a field tilted by
/// `theta_prime` degrees from the NV axis in the NV-frame xz plane.
pub fn dipolar_analytic(g: &DipolarGeometry, theta_prime: f64, b0: f64, nv: &NvSpec) -> f64 {
    let (z, x, t) = (g.zeta.to_radians(), g.xi.to_radians(), theta_prime.to_radians());
    let gb = nv.electron.gyro * b0;
    let delta = nv.zfs;
    let num = 3.0 * (2.0 * z).sin() * x.cos() * t.sin() * (delta - 3.0 * gb * t.cos())
        - 6.0 * gb * z.sin().powi(2) * (2.0 * x).cos() * t.sin().powi(2)
        + (3.0 * (2.0 * z).cos() + 1.0) * (delta * t.cos() - gb * (2.0 * t).cos());
    let den = 4.0 * g.r.powi(3) * (2.0 * (gb * t.sin()).powi(2) + (delta - gb * t.cos()).powi(2)).sqrt();
    DIPOLAR_CONSTANT_KHZ * num / den
}

/// Closed-form coupling for an arbitrary field: the azimuth of the field
/// around the NV axis is absorbed into ξ.
pub fn dipolar_analytic_field(g: &DipolarGeometry, field: &FieldVector, nv: &NvSpec) -> f64 {
    let (tp, az) = nv.field_angles(field);
    let rotated = DipolarGeometry { xi: g.xi - az, ..*g };
    dipolar_analytic(&rotated, tp, field.b0, nv)
}

/// The closed form as a quadratic form: `d(p) = pᵀ Q p / |p|⁵` (kHz, p in nm,
/// NV frame). Cheap enough to evaluate over millions of lattice cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipolarKernel {
    pub q: Matrix3<f64>,
}

impl DipolarKernel {
    pub fn new(field: &FieldVector, nv: &NvSpec) -> Self {
        let (tp, az) = nv.field_angles(field);
        let (t, ph) = (tp.to_radians(), az.to_radians());
        let gb = nv.electron.gyro * field.b0;
        let delta = nv.zfs;
        let s = (2.0 * (gb * t.sin()).powi(2) + (delta - gb * t.cos()).powi(2)).sqrt();
        let a = 6.0 * t.sin() * (delta - 3.0 * gb * t.cos());
        let b = -6.0 * gb * t.sin().powi(2);
        let cc = delta * t.cos() - gb * (2.0 * t).cos();
        let k = DIPOLAR_CONSTANT_KHZ / (4.0 * s);
        let qp = Matrix3::new(b - 2.0 * cc, 0.0, a / 2.0, 0.0, -b - 2.0 * cc, 0.0, a / 2.0, 0.0, 4.0 * cc) * k;
        let (sp, cp) = ph.sin_cos();
        let m = Matrix3::new(cp, sp, 0.0, -sp, cp, 0.0, 0.0, 0.0, 1.0);
        Self { q: m.transpose() * qp * m }
    }

    #[inline]
    pub fn eval(&self, p: &Vector3<f64>) -> f64 {
        let r2 = p.norm_squared();
        p.dot(&(self.q * p)) / (r2 * r2 * r2.sqrt())
    }
}

/// Result of a two-tone fit to a coherence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingExtraction {
    /// Slow (dipolar) frequency, kHz.
    pub d_khz: f64,
    /// Fast (hyperfine mixing) frequency, MHz; absent when no fast tone is
    /// resolved.
    pub fast_mhz: Option<f64>,
    pub modulation_depth: f64,
    /// Coefficient of determination of the fit.
    pub r_squared: f64,
    pub fit: FitResult,
}

pub const TWO_TONE_PARAMS: [&str; 7] = ["amplitude", "slow_khz", "slow_phase", "depth", "fast_mhz", "fast_phase", "offset"];
const SLOW_TONE_PARAMS: [&str; 4] = ["amplitude", "slow_khz", "slow_phase", "offset"];

struct TwoTone<'a> {
    t: &'a [f64],
    y: &'a [f64],
    fast: bool,
}

impl TwoTone<'_> {
    fn model(&self, p: &DVector<f64>, t: f64) -> f64 {
        let slow = p[0] * (TAU * p[1] * 1e-3 * t + p[2]).cos();
        if self.fast {
            slow * (1.0 - p[3] + p[3] * (TAU * p[4] * t + p[5]).cos()) + p[6]
        } else {
            slow + p[3]
        }
    }
}

impl LsqProblem for TwoTone<'_> {
    fn n_params(&self) -> usize {
        if self.fast {
            7
        } else {
            4
        }
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.t.len(), self.t.iter().zip(self.y).map(|(&t, &y)| self.model(p, t) - y))
    }
}

/// Phase in radians of a linear cos/sin pair `a cos + b sin = A cos(ωt + φ)`.
fn phase_of(a: f64, b: f64) -> (f64, f64) {
    ((a * a + b * b).sqrt(), (-b).atan2(a))
}

/// Linear least squares on a set of sinusoid frequencies (MHz) plus offset.
fn linear_tones(t: &[f64], y: &[f64], freqs: &[f64]) -> Option<Vec<(f64, f64)>> {
    let n = 2 * freqs.len() + 1;
    let mut a = nalgebra::DMatrix::zeros(t.len(), n);
    for (row, &ti) in t.iter().enumerate() {
        for (k, f) in freqs.iter().enumerate() {
            a[(row, 2 * k)] = (TAU * f * ti).cos();
            a[(row, 2 * k + 1)] = (TAU * f * ti).sin();
        }
        a[(row, n - 1)] = 1.0;
    }
    let sol = a.svd(true, true).solve(&DVector::from_column_slice(y), 1e-12).ok()?;
    let mut out: Vec<(f64, f64)> = (0..freqs.len()).map(|k| phase_of(sol[2 * k], sol[2 * k + 1])).collect();
    out.push((sol[n - 1], 0.0));
    Some(out)
}

/// Fits `A cos(2π d t + φs)(1 − m + m cos(2π ν t + φf)) + c` to a trace
/// sampled at times `t` (µs). d is returned in kHz and ν in MHz.
pub fn extract_coupling(t: &[f64], y: &[f64]) -> Result<CouplingExtraction> {
    if t.len() != y.len() {
        return Err(Error::Dimension(format!("{} times vs {} samples", t.len(), y.len())));
    }
    if t.len() < 16 {
        return Err(Error::InsufficientData("need at least 16 samples".into()));
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    let dwell = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    if !(dwell > 0.0) || t.windows(2).any(|w| ((w[1] - w[0]) - dwell).abs() > 1e-6 * dwell) {
        return Err(Error::invalid("time samples must be uniformly spaced and increasing"));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let spread = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
    if spread <= 1e-12 * (1.0 + mean.abs()) * (y.len() as f64).sqrt() {
        return Err(Error::NonConvergence("signal has no oscillating component".into()));
    }

    // Hann-windowed, zero-padded spectrum for frequency initialization
    let pad = (8 * y.len()).next_power_of_two();
    let mut buf = vec![0.0; pad];
    let nm1 = (y.len() - 1) as f64;
    for (k, v) in y.iter().enumerate() {
        let w = 0.5 - 0.5 * (TAU * k as f64 / nm1).cos();
        buf[k] = (v - mean) * w;
    }
    let spec = amplitude_spectrum(&buf, dwell)?;
    let amax = spec.amplitudes.iter().copied().fold(0.0, f64::max);
    let peaks = find_peaks(&spec.amplitudes, 0.1 * amax);
    let mut by_freq: Vec<usize> = peaks.iter().copied().filter(|&k| k > 0).collect();
    by_freq.sort_unstable();
    let &slow_k = by_freq
        .first()
        .ok_or_else(|| Error::NonConvergence("no oscillation found in the spectrum".into()))?;
    let f_slow = spec.frequencies[slow_k];
    // fast tone: the strongest remaining peak clearly above the slow one
    let fast_peak = peaks.iter().copied().find(|&k| spec.frequencies[k] > 2.0 * f_slow);
    let f_fast = fast_peak.map(|k| spec.frequencies[k]);
    if let Some(ff) = f_fast {
        if ff < 3.0 * f_slow {
            return Err(Error::IndistinguishableTones {
                slow_khz: f_slow * 1e3,
                fast_mhz: ff,
            });
        }
    }

    let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    if let Some(ff) = f_fast {
        match fit_two_tone(t, y, f_slow, ff) {
            Ok(fit) => {
                let (d, nu, m) = (fit.param("slow_khz"), fit.param("fast_mhz"), fit.param("depth"));
                if nu < 3.0 * d * 1e-3 {
                    return Err(Error::IndistinguishableTones { slow_khz: d, fast_mhz: nu });
                }
                return Ok(CouplingExtraction {
                    d_khz: d,
                    fast_mhz: Some(nu),
                    modulation_depth: m,
                    r_squared: 1.0 - fit.chi2 / ss_tot,
                    fit,
                });
            }
            // an unresolved fast tone leaves the two-tone model singular
            Err(Error::RankDeficient(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let lin = linear_tones(t, y, &[f_slow]).ok_or_else(|| Error::NonConvergence("linear initialization failed".into()))?;
    let start = DVector::from_vec(vec![lin[0].0, f_slow * 1e3, lin[0].1, lin[1].0]);
    let problem = TwoTone { t, y, fast: false };
    let best = multi_start(&problem, &[start], &LmOptions::default(), canonical_tones)?;
    let fit = build_fit_result(&problem, FitModel::TwoTone, &SLOW_TONE_PARAMS, &best.params, best.iterations)?;
    Ok(CouplingExtraction {
        d_khz: best.params[1],
        fast_mhz: None,
        modulation_depth: 0.0,
        r_squared: 1.0 - fit.chi2 / ss_tot,
        fit,
    })
}

fn fit_two_tone(t: &[f64], y: &[f64], f_slow: f64, f_peak: f64) -> Result<FitResult> {
    // the fast peak may be either sideband ν ± d; try both
    let mut starts = Vec::new();
    for nu in [f_peak - f_slow, f_peak + f_slow, f_peak] {
        if nu <= 2.0 * f_slow {
            continue;
        }
        let Some(lin) = linear_tones(t, y, &[f_slow, nu - f_slow, nu + f_slow]) else {
            continue;
        };
        let (slow_amp, phs) = lin[0];
        let side = 0.5 * (lin[1].0 + lin[2].0);
        let amp = slow_amp + 2.0 * side;
        let m = if amp > 0.0 { (2.0 * side / amp).clamp(0.0, 1.0) } else { 0.0 };
        let phf = lin[2].1 - phs;
        starts.push(DVector::from_vec(vec![amp, f_slow * 1e3, phs, m, nu, phf, lin[3].0]));
    }
    if starts.is_empty() {
        return Err(Error::NonConvergence("no usable two-tone start".into()));
    }
    let problem = TwoTone { t, y, fast: true };
    let best = multi_start(&problem, &starts, &LmOptions::default(), canonical_tones)?;
    build_fit_result(&problem, FitModel::TwoTone, &TWO_TONE_PARAMS, &best.params, best.iterations)
}

fn canonical_tones(p: &mut DVector<f64>) {
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[2] += std::f64::consts::PI;
    }
    if p[1] < 0.0 {
        p[1] = -p[1];
        p[2] = -p[2];
    }
    p[2] = p[2].rem_euclid(TAU);
    if p.len() == 7 {
        if p[4] < 0.0 {
            p[4] = -p[4];
            p[5] = -p[5];
        }
        p[5] = p[5].rem_euclid(TAU);
    }
}

pub const GEOMETRY_PARAMS: [&str; 3] = ["r", "zeta", "xi"];

struct GeometryProblem<'a> {
    kernels: Vec<DipolarKernel>,
    data: &'a [DipolarObservation],
}

impl LsqProblem for GeometryProblem<'_> {
    fn n_params(&self) -> usize {
        3
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        let pos = geometry_position(p[0], p[1], p[2]);
        DVector::from_iterator(
            self.data.len(),
            self.kernels
                .iter()
                .zip(self.data)
                .map(|(k, o)| (k.eval(&pos).abs() - o.coupling) / o.sigma),
        )
    }
}

fn geometry_position(r: f64, zeta: f64, xi: f64) -> Vector3<f64> {
    let (z, x) = (zeta.to_radians(), xi.to_radians());
    Vector3::new(z.sin() * x.cos(), z.sin() * x.sin(), z.cos()) * r
}

/// True when every field lies in the NV-frame xz plane, so that ξ and −ξ
/// cannot be told apart.
fn fields_in_plane(data: &[DipolarObservation], nv: &NvSpec) -> bool {
    data.iter().all(|o| {
        let b = nv.frame() * o.field.direction();
        b.y.abs() < 1e-9
    })
}

/// Maps (r, ζ, ξ) onto the representative with z ≥ 0 (the coupling is even
/// in p), and with y ≥ 0 when the data cannot distinguish ±ξ.
pub fn canonicalize_geometry(p: &mut DVector<f64>, mirror_xi: bool) {
    let pos = geometry_position(p[0], p[1], p[2]);
    let mut pos = if pos.z < 0.0 || (pos.z == 0.0 && pos.y < 0.0) { -pos } else { pos };
    if mirror_xi && pos.y < 0.0 {
        pos.y = -pos.y;
    }
    let r = pos.norm();
    p[0] = r;
    p[1] = (pos.z / r).clamp(-1.0, 1.0).acos().to_degrees();
    p[2] = if pos.x.abs() < 1e-300 && pos.y.abs() < 1e-300 {
        0.0
    } else {
        pos.y.atan2(pos.x).to_degrees().rem_euclid(360.0)
    };
}

fn distinct_orientations(data: &[DipolarObservation], nv: &NvSpec) -> usize {
    let mut seen: Vec<Vector3<f64>> = Vec::new();
    for o in data {
        let d = nv.frame() * o.field.direction();
        if !seen.iter().any(|s| (s - d).norm() < 1e-9) {
            seen.push(d);
        }
    }
    seen.len()
}

fn check_observations(data: &[DipolarObservation]) -> Result<()> {
    for o in data {
        o.validate()?;
    }
    Ok(())
}

/// A geometry fit together with every other optimum that reproduces the data
/// equally well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryFit {
    pub fit: FitResult,
    /// Distinct canonical geometries whose χ² ties the best one. Coupling
    /// magnitudes measured in a single field plane are invariant under a
    /// sign flip of the secular tensor, which often has a second geometric
    /// realization at a different distance.
    pub equivalent: Vec<DipolarGeometry>,
}

/// Relative χ² window within which geometry optima count as equivalent.
pub const GEOMETRY_TIE: f64 = 1e-6;

/// Orders positions by the map tie rule: larger z, then y, then x first.
/// Coordinates are compared at 1e-6 nm so that mirror images found by
/// separate optimizations compare equal where they should.
fn position_order(a: &Vector3<f64>, b: &Vector3<f64>) -> std::cmp::Ordering {
    let q = |v: f64| (v * 1e6).round() as i64;
    q(b.z).cmp(&q(a.z)).then(q(b.y).cmp(&q(a.y))).then(q(b.x).cmp(&q(a.x)))
}

/// Weighted least squares of |d| over (r, ζ, ξ) with a multi-start over a
/// 15° angle grid. The distance of each start follows from linear least
/// squares in 1/r³. Tied optima resolve by the same rule as
/// [`ProbabilityMap::argmax`].
pub fn locate(data: &[DipolarObservation], nv: &NvSpec) -> Result<GeometryFit> {
    check_observations(data)?;
    if data.len() < 4 || distinct_orientations(data, nv) < 4 {
        return Err(Error::InsufficientData(
            "geometry fit needs at least 4 observations at distinct field orientations".into(),
        ));
    }
    let kernels: Vec<DipolarKernel> = data.iter().map(|o| DipolarKernel::new(&o.field, nv)).collect();
    let mirror = fields_in_plane(data, nv);
    let xi_max = if mirror { 180.0 } else { 360.0 };
    let mut starts = Vec::new();
    for zi in 0..=6 {
        let zeta = 15.0 * zi as f64;
        let n_xi = if zi == 0 { 1 } else { (xi_max / 15.0) as usize + usize::from(mirror) };
        for xk in 0..n_xi {
            let xi = 15.0 * xk as f64;
            let u = geometry_position(1.0, zeta, xi);
            let (mut num, mut den) = (0.0, 0.0);
            for (k, o) in kernels.iter().zip(data) {
                let g = k.eval(&u).abs() / o.sigma;
                num += g * o.coupling / o.sigma;
                den += g * g;
            }
            if num <= 0.0 || den <= 0.0 {
                continue;
            }
            let r = (den / num).cbrt();
            starts.push(DVector::from_vec(vec![r, zeta, xi]));
        }
    }
    if starts.is_empty() {
        return Err(Error::NonConvergence("no admissible geometry start".into()));
    }
    let problem = GeometryProblem { kernels, data };
    let opts = LmOptions::default();
    let outcomes = multi_start_all(&problem, &starts, &opts, |p| canonicalize_geometry(p, mirror));
    let first = &outcomes[0];
    if !first.converged || !first.chi2.is_finite() {
        return Err(Error::NonConvergence(format!("geometry fit did not converge (χ² {:.4e})", first.chi2)));
    }
    let limit = first.chi2 * (1.0 + GEOMETRY_TIE) + 1e-12;
    let mut tied: Vec<(Vector3<f64>, usize)> = Vec::new();
    for (k, o) in outcomes.iter().enumerate() {
        if !o.converged || o.chi2 > limit {
            continue;
        }
        let pos = geometry_position(o.params[0], o.params[1], o.params[2]);
        match tied.iter_mut().find(|(q, _)| (q - pos).norm() < 1e-4 * (1.0 + pos.norm())) {
            Some(slot) => {
                if o.chi2 < outcomes[slot.1].chi2 {
                    slot.1 = k;
                }
            }
            None => tied.push((pos, k)),
        }
    }
    tied.sort_by(|a, b| position_order(&a.0, &b.0));
    let best = &outcomes[tied[0].1];
    let fit = build_fit_result(&problem, FitModel::Geometry, &GEOMETRY_PARAMS, &best.params, best.iterations).map_err(
        |e| match e {
            Error::RankDeficient(cond) => Error::DegenerateGeometry(format!(
                "field orientations cannot separate the geometry parameters (condition {cond:.2e})"
            )),
            other => other,
        },
    )?;
    let equivalent = tied[1..]
        .iter()
        .map(|(_, k)| {
            let p = &outcomes[*k].params;
            DipolarGeometry { r: p[0], zeta: p[1], xi: p[2] }
        })
        .collect();
    Ok(GeometryFit { fit, equivalent })
}

/// The best geometry fit; see [`locate`] for the equivalent optima.
pub fn fit_geometry(data: &[DipolarObservation], nv: &NvSpec) -> Result<FitResult> {
    locate(data, nv).map(|g| g.fit)
}

/// Normalized location likelihood on a cubic lattice centered on the NV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    /// Half-width of the box, nm.
    pub half_width: f64,
    /// Cell edge, nm.
    pub resolution: f64,
    /// Cells per axis.
    pub cells: usize,
    /// Weights indexed `(ix·n + iy)·n + iz`, summing to 1.
    pub values: Vec<f64>,
    /// Smallest χ² over the lattice.
    pub chi2_min: f64,
    /// Most likely position (nm): the best lattice maxima polished to the
    /// continuous likelihood maximum.
    pub mode: Vector3<f64>,
    /// χ² at `mode`.
    pub mode_chi2: f64,
}

impl ProbabilityMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn axis(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.resolution
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.cells + iy) * self.cells + iz
    }

    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let n = self.cells;
        (idx / (n * n), (idx / n) % n, idx % n)
    }

    pub fn center(&self, idx: usize) -> Vector3<f64> {
        let (ix, iy, iz) = self.unravel(idx);
        Vector3::new(self.axis(ix), self.axis(iy), self.axis(iz))
    }

    /// Cell index containing `p`, if inside the box.
    pub fn cell_of(&self, p: &Vector3<f64>) -> Option<usize> {
        let mut ids = [0usize; 3];
        for (k, v) in p.iter().enumerate() {
            let f = ((v + self.half_width) / self.resolution).floor();
            if f < 0.0 || f >= self.cells as f64 {
                return None;
            }
            ids[k] = f as usize;
        }
        Some(self.index(ids[0], ids[1], ids[2]))
    }

    pub fn contains(&self, idx: usize, p: &Vector3<f64>) -> bool {
        let c = self.center(idx);
        (p - c).iter().all(|d| d.abs() <= 0.5 * self.resolution * (1.0 + 1e-9))
    }

    /// Cell holding the most likely position. The lattice maximum alone can
    /// sit one cell off when the mode lies near a cell boundary.
    pub fn argmax(&self) -> usize {
        self.cell_of(&self.mode).unwrap_or_else(|| self.lattice_argmax())
    }

    /// Largest lattice weight. Ties resolve toward larger z, then larger y,
    /// then larger x.
    pub fn lattice_argmax(&self) -> usize {
        let vmax = self.values.iter().copied().fold(0.0, f64::max);
        let tol = vmax * 1e-9;
        let mut best: Option<usize> = None;
        for (i, &v) in self.values.iter().enumerate() {
            if v + tol < vmax {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if position_order(&self.center(i), &self.center(b)).is_lt() => Some(i),
                keep => keep,
            };
        }
        best.unwrap_or(0)
    }

    /// Participation ratio `1/Σw²`: the effective number of occupied cells.
    pub fn effective_cells(&self) -> f64 {
        1.0 / self.values.iter().map(|w| w * w).sum::<f64>()
    }

    /// Sum over one axis, returning an n×n slice indexed `[a·n + b]` over the
    /// two remaining axes in (x, y, z) order.
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let n = self.cells;
        let mut out = vec![0.0; n * n];
        for (idx, &v) in self.values.iter().enumerate() {
            let (x, y, z) = self.unravel(idx);
            let (a, b) = match axis {
                0 => (y, z),
                1 => (x, z),
                _ => (x, y),
            };
            out[a * n + b] += v;
        }
        out
    }
}

/// Evaluates χ² of |d| for every lattice cell and assigns weights
/// ∝ exp(−χ²/2), normalized to one.
pub fn probability_map(data: &[DipolarObservation], nv: &NvSpec, half_width: f64, resolution: f64) -> Result<ProbabilityMap> {
    check_observations(data)?;
    if data.is_empty() {
        return Err(Error::InsufficientData("no observations".into()));
    }
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::invalid(format!("resolution must be > 0, got {resolution}")));
    }
    if !(half_width >= resolution) || !half_width.is_finite() {
        return Err(Error::invalid("box half-width must be at least one cell"));
    }
    let cells = (2.0 * half_width / resolution).round() as usize;
    let half_width = 0.5 * cells as f64 * resolution;
    let kernels: Vec<(DipolarKernel, f64, f64)> = data
        .iter()
        .map(|o| (DipolarKernel::new(&o.field, nv), o.coupling, 1.0 / o.sigma))
        .collect();
    let axis: Vec<f64> = (0..cells).map(|i| -half_width + (i as f64 + 0.5) * resolution).collect();

    let plane = |ix: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(cells * cells);
        for &y in &axis {
            for &z in &axis {
                let p = Vector3::new(axis[ix], y, z);
                let chi2: f64 = kernels
                    .iter()
                    .map(|(k, obs, w)| ((k.eval(&p).abs() - obs) * w).powi(2))
                    .sum();
                out.push(chi2);
            }
        }
        out
    };
    let planes: Vec<Vec<f64>> = (0..cells).into_par_iter().map(plane).collect();
    let chi2: Vec<f64> = planes.into_iter().flatten().collect();
    let chi2_min = chi2.iter().copied().fold(f64::INFINITY, f64::min);
    let (mode, mode_chi2) = polish_modes(data, nv, &chi2, cells, &axis, chi2_min);
    let mut values: Vec<f64> = chi2.iter().map(|c| (-(c - chi2_min) / 2.0).exp()).collect();
    // fixed-order reduction so the normalization is reproducible
    let sums: Vec<f64> = values.par_chunks(cells * cells).map(|c| c.iter().sum::<f64>()).collect();
    let total: f64 = sums.iter().sum();
    for v in values.iter_mut() {
        *v /= total;
    }
    Ok(ProbabilityMap {
        half_width,
        resolution,
        cells,
        values,
        chi2_min,
        mode,
        mode_chi2,
    })
}

struct CartesianProblem<'a> {
    kernels: Vec<DipolarKernel>,
    data: &'a [DipolarObservation],
}

impl LsqProblem for CartesianProblem<'_> {
    fn n_params(&self) -> usize {
        3
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        let pos = Vector3::new(p[0], p[1], p[2]);
        DVector::from_iterator(
            self.data.len(),
            self.kernels
                .iter()
                .zip(self.data)
                .map(|(k, o)| (k.eval(&pos).abs() - o.coupling) / o.sigma),
        )
    }
}

/// Polishes the strongest lattice local maxima with LM in Cartesian
/// coordinates and returns the best, ties resolved by the positional rule.
fn polish_modes(
    data: &[DipolarObservation],
    nv: &NvSpec,
    chi2: &[f64],
    n: usize,
    axis: &[f64],
    chi2_min: f64,
) -> (Vector3<f64>, f64) {
    const WINDOW: f64 = 100.0;
    const MAX_CANDIDATES: usize = 64;
    let idx = |x: usize, y: usize, z: usize| (x * n + y) * n + z;
    let mut cand: Vec<usize> = (0..chi2.len())
        .filter(|&i| chi2[i] <= chi2_min + WINDOW)
        .filter(|&i| {
            let (x, y, z) = (i / (n * n), (i / n) % n, i % n);
            let mut nb = Vec::with_capacity(6);
            if x > 0 {
                nb.push(idx(x - 1, y, z));
            }
            if x + 1 < n {
                nb.push(idx(x + 1, y, z));
            }
            if y > 0 {
                nb.push(idx(x, y - 1, z));
            }
            if y + 1 < n {
                nb.push(idx(x, y + 1, z));
            }
            if z > 0 {
                nb.push(idx(x, y, z - 1));
            }
            if z + 1 < n {
                nb.push(idx(x, y, z + 1));
            }
            nb.iter().all(|&j| chi2[i] <= chi2[j])
        })
        .collect();
    cand.sort_by(|&a, &b| chi2[a].total_cmp(&chi2[b]).then(a.cmp(&b)));
    cand.truncate(MAX_CANDIDATES);
    let center = |i: usize| Vector3::new(axis[i / (n * n)], axis[(i / n) % n], axis[i % n]);
    let fallback = cand
        .first()
        .map(|&i| (center(i), chi2[i]))
        .unwrap_or((Vector3::new(axis[0], axis[0], axis[0]), chi2_min));
    let problem = CartesianProblem {
        kernels: data.iter().map(|o| DipolarKernel::new(&o.field, nv)).collect(),
        data,
    };
    let opts = LmOptions::default();
    let mut modes: Vec<(Vector3<f64>, f64)> = cand
        .par_iter()
        .map(|&i| {
            let c = center(i);
            let out = levenberg_marquardt(&problem, DVector::from_vec(vec![c.x, c.y, c.z]), &opts);
            let p = Vector3::new(out.params[0], out.params[1], out.params[2]);
            // a polish that wanders off its basin keeps the lattice value
            if out.chi2.is_finite() && out.chi2 <= chi2[i] && p.norm() > 0.0 {
                (p, out.chi2)
            } else {
                (c, chi2[i])
            }
        })
        .collect();
    if modes.is_empty() {
        return fallback;
    }
    let best = modes.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let limit = best * (1.0 + GEOMETRY_TIE) + 1e-12;
    modes.retain(|m| m.1 <= limit);
    modes.sort_by(|a, b| position_order(&a.0, &b.0));
    modes[0]
}

/// Position (nm, NV frame) of a fitted geometry.
pub fn fitted_position(fit: &FitResult) -> Vector3<f64> {
    geometry_position(fit.param("r"), fit.param("zeta"), fit.param("xi"))
}
