//! Static-field determination from the NV resonance frequency and an ESEEM
//! spectrum.

use std::f64::consts::TAU;

use nalgebra::SMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, eigh, identity, kron, CMatrix, C64};
use crate::spectrum::{amplitude_spectrum, normalized_cross_correlation, Spectrum};
use crate::spin_model::{nv_electron_hamiltonian, nv_hamiltonian, FieldVector, NuclearZeeman, NvSpec};

type M4 = SMatrix<C64, 4, 4>;

/// Electron transition of the NV, always starting from m_s = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Manifold {
    #[default]
    #[serde(rename = "0->-1")]
    Minus,
    #[serde(rename = "0->+1")]
    Plus,
}

impl Manifold {
    /// Index of the target level in the (+1, 0, −1) basis.
    fn index(self) -> usize {
        match self {
            Manifold::Minus => 2,
            Manifold::Plus => 0,
        }
    }
}

/// Electron-only transition frequency (MHz) between adiabatically labeled
/// m_s = 0 and target levels.
pub fn nv_resonance_frequency(nv: &NvSpec, field: &FieldVector, manifold: Manifold) -> Result<f64> {
    let eig = eigh(&nv_electron_hamiltonian(nv, field))?;
    let label = |basis: usize, name: &str| -> Result<usize> {
        let (k, w) = eig.best_overlap(basis);
        if w < 0.5 {
            return Err(Error::DegenerateMixing {
                state: name.into(),
                overlap: w,
            });
        }
        Ok(k)
    };
    let k0 = label(1, "m_s=0")?;
    let k1 = label(manifold.index(), if manifold == Manifold::Minus { "m_s=-1" } else { "m_s=+1" })?;
    Ok(eig.values[k1] - eig.values[k0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Crystal-frame polar angle, degrees.
    pub theta: f64,
    pub b0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveOptions {
    /// Azimuth of the rotation plane, degrees.
    pub phi: f64,
    pub manifold: Manifold,
    /// Upper end of the B0 scan as a fraction of Δ/γ_e.
    pub b_max_fraction: f64,
    pub coarse_steps: usize,
    /// Root tolerance on the frequency, MHz.
    pub tolerance: f64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self {
            phi: 0.0,
            manifold: Manifold::Minus,
            b_max_fraction: 0.9,
            coarse_steps: 200,
            tolerance: 1e-3,
        }
    }
}

/// Crystal-frame θ values at θ' = 0°, 0.1°, …, 60° from the NV axis.
///
/// θ' and −θ' give identical spectra in the φ = 0 plane, so the default
/// search covers one side only.
pub fn default_theta_grid(nv: &NvSpec) -> Vec<f64> {
    (0..=600).map(|k| nv.axis_theta + k as f64 * 0.1).collect()
}

fn resonance_at(nv: &NvSpec, theta: f64, b0: f64, opts: &CurveOptions) -> Option<f64> {
    let f = FieldVector { b0, theta, phi: opts.phi };
    nv_resonance_frequency(nv, &f, opts.manifold).ok()
}

/// All B0 ≥ 0 solving ν(B0, θ) = `resonance` at one θ, ascending.
pub fn field_roots(nv: &NvSpec, resonance: f64, theta: f64, opts: &CurveOptions) -> Vec<f64> {
    let b_max = opts.b_max_fraction * nv.zfs / nv.electron.gyro.abs();
    let n = opts.coarse_steps.max(2);
    let g = |b: f64| resonance_at(nv, theta, b, opts).map(|v| v - resonance);
    let grid: Vec<(f64, Option<f64>)> = (0..=n)
        .map(|k| {
            let b = b_max * k as f64 / n as f64;
            (b, g(b))
        })
        .collect();

    let mut roots = Vec::new();
    let exact = |v: f64| v.abs() <= 1e-9;
    for (k, &(b, v)) in grid.iter().enumerate() {
        let Some(v) = v else { continue };
        if exact(v) {
            roots.push(b);
            continue;
        }
        let Some(&(b1, Some(v1))) = grid.get(k + 1) else { continue };
        if exact(v1) || v.signum() == v1.signum() {
            continue;
        }
        let (mut lo, mut hi, mut flo) = (b, b1, v);
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..100 {
            mid = 0.5 * (lo + hi);
            let Some(fm) = g(mid) else { break };
            if fm.abs() <= opts.tolerance * 1e-3 || hi - lo < 1e-12 {
                break;
            }
            if fm.signum() == flo.signum() {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
            }
        }
        if g(mid).is_some_and(|fm| fm.abs() <= opts.tolerance) {
            roots.push(mid);
        }
    }
    roots
}

/// Points (θ, B0) that reproduce the given resonance frequency, ordered by θ
/// then B0. Empty when no grid angle admits a solution.
pub fn admissible_field_curve(nv: &NvSpec, resonance: f64, theta_grid: &[f64], opts: &CurveOptions) -> Vec<CurvePoint> {
    theta_grid
        .par_iter()
        .map(|&theta| {
            field_roots(nv, resonance, theta, opts)
                .into_iter()
                .map(|b0| CurvePoint { theta, b0 })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EseemFrequencies {
    /// Nuclear transition in the m_s = 0 manifold, MHz.
    pub nu0: f64,
    /// Nuclear transition in the m_s = −1 manifold, MHz.
    pub nu1: f64,
    pub difference: f64,
    pub sum: f64,
    /// Two-pulse modulation depth k = 4c(1 − c).
    pub depth: f64,
    pub observable: bool,
}

/// Minimum modulation depth for a component to be reported as observable.
pub const DEPTH_FLOOR: f64 = 1e-6;

/// Electron-only eigenvectors of the NV, columns in bare order
/// (m_s = +1, 0, −1), each labeled by maximal overlap with its bare state.
pub fn adiabatic_electron_basis(nv: &NvSpec, field: &FieldVector) -> Result<CMatrix> {
    let eig = eigh(&nv_electron_hamiltonian(nv, field))?;
    let names = ["m_s=+1", "m_s=0", "m_s=-1"];
    let mut u = CMatrix::zeros(3, 3);
    let mut used = [false; 3];
    for (level, name) in names.iter().enumerate() {
        let (k, w) = eig.best_overlap(level);
        if w < 0.5 || used[k] {
            return Err(Error::DegenerateMixing {
                state: (*name).into(),
                overlap: w,
            });
        }
        used[k] = true;
        u.set_column(level, &eig.vectors.column(k));
    }
    Ok(u)
}

/// Nuclear Hamiltonians (2×2, MHz) of the m_s = 0 and m_s = −1 manifolds:
/// diagonal blocks of the NV Hamiltonian in the adiabatic electron basis,
/// including the electron energy on the diagonal.
pub fn nuclear_blocks(nv: &NvSpec, field: &FieldVector) -> Result<[CMatrix; 2]> {
    let u = adiabatic_electron_basis(nv, field)?;
    let u6 = kron(&u, &identity(2));
    let h = nv_hamiltonian(nv, field, NuclearZeeman::Include);
    let ht = u6.adjoint() * h.matrix() * &u6;
    let block = |level: usize| {
        let mut b = ht.view((2 * level, 2 * level), (2, 2)).into_owned();
        // exact hermiticity
        b = (&b + b.adjoint()) * c(0.5, 0.0);
        b
    };
    Ok([block(1), block(2)])
}

pub fn eseem_frequencies(nv: &NvSpec, field: &FieldVector) -> Result<EseemFrequencies> {
    let [h0, h1] = nuclear_blocks(nv, field)?;
    let e0 = eigh(&h0)?;
    let e1 = eigh(&h1)?;
    let nu0 = e0.values[1] - e0.values[0];
    let nu1 = e1.values[1] - e1.values[0];
    let overlap = (e0.vectors.column(0).adjoint() * e1.vectors.column(0))[(0, 0)];
    let cc = overlap.norm_sqr().clamp(0.0, 1.0);
    let depth = 4.0 * cc * (1.0 - cc);
    Ok(EseemFrequencies {
        nu0,
        nu1,
        difference: (nu1 - nu0).abs(),
        sum: nu1 + nu0,
        depth,
        observable: depth > DEPTH_FLOOR,
    })
}

/// Two-pulse echo signal P(m_s=0) − P(m_s=−1) at each τ in `taus` (µs).
///
/// Ideal x pulses act on the 0 ↔ −1 electron transition; free evolution is
/// block-diagonal in the electron manifolds (secular in the electron spin).
pub fn eseem_time_trace(nv: &NvSpec, field: &FieldVector, taus: &[f64]) -> Result<Vec<f64>> {
    let [h0, h1] = nuclear_blocks(nv, field)?;
    let e0 = eigh(&h0)?;
    let e1 = eigh(&h1)?;
    // eigenbasis of the block-diagonal Hamiltonian, basis (0 ⊗ nuc, −1 ⊗ nuc)
    let mut w = M4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            w[(i, j)] = e0.vectors[(i, j)];
            w[(2 + i, 2 + j)] = e1.vectors[(i, j)];
        }
    }
    let e = [e0.values[0], e0.values[1], e1.values[0], e1.values[1]];
    let wd = w.adjoint();

    let pulse = |angle: f64| {
        let (cs, sn) = ((angle / 2.0).cos(), (angle / 2.0).sin());
        let mut p = M4::zeros();
        for nuc in 0..2 {
            let (a, b) = (nuc, 2 + nuc);
            p[(a, a)] = c(cs, 0.0);
            p[(b, b)] = c(cs, 0.0);
            p[(a, b)] = c(0.0, -sn);
            p[(b, a)] = c(0.0, -sn);
        }
        p
    };
    let p90 = pulse(std::f64::consts::FRAC_PI_2);
    let p180 = pulse(std::f64::consts::PI);
    let rho0 = M4::from_diagonal(&nalgebra::Vector4::new(c(0.5, 0.0), c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0)));
    let z = M4::from_diagonal(&nalgebra::Vector4::new(c(1.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0), c(-1.0, 0.0)));

    let rho1 = wd * p90 * rho0 * p90.adjoint() * w;
    let pi_e = wd * p180 * w;
    let pi_e_d = pi_e.adjoint();
    let obs = wd * p90.adjoint() * z * p90 * w;

    Ok(taus
        .iter()
        .map(|&tau| {
            let ph: [C64; 4] = std::array::from_fn(|k| {
                let a = -TAU * e[k] * tau;
                c(a.cos(), a.sin())
            });
            let evolve = |m: &M4| M4::from_fn(|i, j| m[(i, j)] * ph[i] * ph[j].conj());
            let r = evolve(&(pi_e * evolve(&rho1) * pi_e_d));
            (obs * r).trace().re
        })
        .collect())
}

/// ESEEM amplitude spectrum from `npoints` echo samples at τ_k = k·dwell.
pub fn simulate_eseem(nv: &NvSpec, field: &FieldVector, dwell: f64, npoints: usize) -> Result<Spectrum> {
    if npoints < 16 {
        return Err(Error::invalid(format!("need at least 16 points, got {npoints}")));
    }
    if !(dwell > 0.0) {
        return Err(Error::invalid(format!("dwell must be positive, got {dwell}")));
    }
    let taus: Vec<f64> = (0..npoints).map(|k| k as f64 * dwell).collect();
    let trace = eseem_time_trace(nv, field, &taus)?;
    amplitude_spectrum(&trace, dwell)
}

/// Default ESEEM sampling: 0.1 µs dwell, 512 points.
pub const DEFAULT_DWELL: f64 = 0.1;
pub const DEFAULT_NPOINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldCandidate {
    pub b0: f64,
    pub theta: f64,
    /// Normalized cross-correlation with the measured spectrum.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSolution {
    pub field: FieldVector,
    /// 1 − best score.
    pub residual: f64,
    pub score: f64,
    /// Other local optima along the admissible curve, best first.
    pub alternates: Vec<FieldCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub curve: CurveOptions,
    /// Crystal-frame θ grid, degrees. Empty means [`default_theta_grid`].
    pub theta_grid: Vec<f64>,
    /// Best scores below this are treated as uninformative.
    pub min_score: f64,
    /// Relative score gap under which two optima are indistinguishable.
    pub ambiguity: f64,
    /// Number of local optima refined by golden-section search.
    pub refine: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            curve: CurveOptions::default(),
            theta_grid: Vec::new(),
            min_score: 0.5,
            ambiguity: 0.01,
            refine: 6,
        }
    }
}

struct Scorer<'a> {
    nv: &'a NvSpec,
    measured: Vec<f64>,
    grid: &'a Spectrum,
    dwell: f64,
    npoints: usize,
    phi: f64,
}

impl Scorer<'_> {
    fn score(&self, theta: f64, b0: f64) -> f64 {
        let f = FieldVector { b0, theta, phi: self.phi };
        let Ok(sim) = simulate_eseem(self.nv, &f, self.dwell, self.npoints) else {
            return 0.0;
        };
        let dc = sim.amplitudes[0].abs();
        let ac_max = sim.amplitudes[1..].iter().copied().fold(0.0, f64::max);
        if ac_max <= 1e-9 * dc.max(1e-300) {
            return 0.0;
        }
        let aligned = sim.len() == self.grid.len()
            && sim
                .frequencies
                .iter()
                .zip(&self.grid.frequencies)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * b.abs().max(1.0));
        let sim_amps: Vec<f64> = if aligned {
            sim.amplitudes[1..].to_vec()
        } else {
            self.grid.frequencies[1..].iter().map(|&f| sim.interpolate(f)).collect()
        };
        normalized_cross_correlation(&self.measured, &sim_amps)
    }
}

fn golden_max(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..60 {
        if hi - lo < 1e-7 {
            break;
        }
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Searches the admissible curve for the (B0, θ) whose simulated ESEEM
/// spectrum best matches `measured`.
///
/// Fails with [`Error::Ambiguous`] when the best score is below
/// `opts.min_score` or when the runner-up is within `opts.ambiguity`
/// (relative) of it; the error carries the full solution.
pub fn solve_field(nv: &NvSpec, resonance: f64, measured: &Spectrum, opts: &SolveOptions) -> Result<FieldSolution> {
    if measured.len() < 3 {
        return Err(Error::InsufficientData("measured spectrum needs at least 3 bins".into()));
    }
    let (dwell, npoints) = measured.sampling().ok_or_else(|| {
        Error::invalid("cannot infer dwell time and record length from the measured spectrum")
    })?;
    let theta_grid = if opts.theta_grid.is_empty() {
        default_theta_grid(nv)
    } else {
        opts.theta_grid.clone()
    };
    let curve = admissible_field_curve(nv, resonance, &theta_grid, &opts.curve);
    if curve.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no field on the θ grid reproduces a {resonance} MHz resonance"
        )));
    }

    let scorer = Scorer {
        nv,
        measured: measured.amplitudes[1..].to_vec(),
        grid: measured,
        dwell,
        npoints,
        phi: opts.curve.phi,
    };
    let scores: Vec<f64> = curve.par_iter().map(|p| scorer.score(p.theta, p.b0)).collect();

    // Branches: group curve points by root index at each θ.
    let mut branches: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < curve.len() {
        let mut j = i;
        while j < curve.len() && curve[j].theta == curve[i].theta {
            j += 1;
        }
        for (r, idx) in (i..j).enumerate() {
            if branches.len() <= r {
                branches.push(Vec::new());
            }
            branches[r].push(idx);
        }
        i = j;
    }

    let mut optima: Vec<(usize, Option<(usize, usize)>)> = Vec::new();
    for br in &branches {
        for (k, &idx) in br.iter().enumerate() {
            let left = k.checked_sub(1).map(|l| br[l]);
            let right = br.get(k + 1).copied();
            let s = scores[idx];
            if left.is_none_or(|l| s >= scores[l]) && right.is_none_or(|r| s >= scores[r]) {
                let lo = left.unwrap_or(idx);
                let hi = right.unwrap_or(idx);
                optima.push((idx, Some((lo, hi))));
            }
        }
    }

    let mut order: Vec<usize> = (0..optima.len()).collect();
    order.sort_by(|&a, &b| {
        scores[optima[b].0]
            .total_cmp(&scores[optima[a].0])
            .then(optima[a].0.cmp(&optima[b].0))
    });

    let refine_one = |idx: usize, lo: usize, hi: usize| -> FieldCandidate {
        let base = FieldCandidate {
            b0: curve[idx].b0,
            theta: curve[idx].theta,
            score: scores[idx],
        };
        if lo == hi || scores[idx] <= 0.0 {
            return base;
        }
        let b_guess = curve[idx].b0;
        let root_near = |theta: f64| -> Option<f64> {
            field_roots(nv, resonance, theta, &opts.curve)
                .into_iter()
                .min_by(|a, b| (a - b_guess).abs().total_cmp(&(b - b_guess).abs()))
        };
        let (t, s) = golden_max(curve[lo].theta, curve[hi].theta, |t| {
            root_near(t).map(|b| scorer.score(t, b)).unwrap_or(-1.0)
        });
        match root_near(t) {
            Some(b0) if s > base.score => FieldCandidate { b0, theta: t, score: s },
            _ => base,
        }
    };

    let refined: Vec<FieldCandidate> = order
        .par_iter()
        .enumerate()
        .map(|(rank, &o)| {
            let (idx, bounds) = optima[o];
            match bounds {
                Some((lo, hi)) if rank < opts.refine => refine_one(idx, lo, hi),
                _ => FieldCandidate {
                    b0: curve[idx].b0,
                    theta: curve[idx].theta,
                    score: scores[idx],
                },
            }
        })
        .collect();
    let mut cands = refined;
    cands.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.theta.total_cmp(&b.theta))
            .then(a.b0.total_cmp(&b.b0))
    });

    // optima closer than this to a better one are the same solution
    let distinct = |a: &FieldCandidate, b: &FieldCandidate| {
        (a.b0 - b.b0).abs() > SAME_B0_GAUSS || (a.theta - b.theta).abs() > SAME_THETA_DEG
    };
    let mut kept: Vec<FieldCandidate> = Vec::with_capacity(cands.len());
    for c in cands {
        if kept.iter().all(|k| distinct(k, &c)) {
            kept.push(c);
        }
    }
    let cands = kept;
    let best = cands[0];
    let solution = FieldSolution {
        field: FieldVector {
            b0: best.b0,
            theta: best.theta,
            phi: opts.curve.phi,
        },
        residual: (1.0 - best.score).max(0.0),
        score: best.score,
        alternates: cands[1..].to_vec(),
    };
    let runner_up = cands.get(1).map(|c| c.score).unwrap_or(f64::NEG_INFINITY);
    let tied = best.score - runner_up <= opts.ambiguity * best.score.abs();
    if best.score < opts.min_score || tied {
        return Err(Error::Ambiguous {
            best: best.score,
            runner_up,
            solution: Box::new(solution),
        });
    }
    Ok(solution)
}

const SAME_B0_GAUSS: f64 = 2.0;
const SAME_THETA_DEG: f64 = 1.0;
