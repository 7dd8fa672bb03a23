use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{build_fit_result, multi_start, FitModel, FitResult, LmOptions, LsqProblem};
use crate::linalg::{eigh, identity, kron, re, spin_half_ops, CMatrix};
use crate::spectrum::{find_peaks, Spectrum, SpectrumMeta};
use crate::spin_model::{x_defect_hamiltonian, FieldVector, NuclearZeeman, SpinSystemSpec};

/// Electron transition of one X defect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SedorLine {
    pub defect: String,
    /// MHz.
    pub frequency: f64,
    /// Share of the defect's total electron-transition strength.
    pub weight: f64,
}

/// Electron-flip transitions of every X defect, weighted by |⟨i|S⊥|j⟩|²
/// and normalized to unit total per defect. Lines below `1e-9` relative
/// weight are dropped.
pub fn sedor_lines(system: &SpinSystemSpec, field: &FieldVector) -> Result<Vec<SedorLine>> {
    system.validate()?;
    if !(field.b0 > 0.0) {
        return Err(Error::ZeroField);
    }
    let n = field.direction();
    let s = spin_half_ops();
    let s_op: Vec<CMatrix> = s.iter().map(|m| kron(m, &identity(2))).collect();
    let s_par = &s_op[0] * re(n.x) + &s_op[1] * re(n.y) + &s_op[2] * re(n.z);
    let mut out = Vec::new();
    for x in &system.defects {
        let h = x_defect_hamiltonian(x, field, NuclearZeeman::Include);
        let eig = eigh(h.matrix())?;
        let v = &eig.vectors;
        let proj = |op: &CMatrix| v.adjoint() * op * v;
        let (sx, sy, sz, sp) = (proj(&s_op[0]), proj(&s_op[1]), proj(&s_op[2]), proj(&s_par));
        let mut lines = Vec::new();
        for i in 0..4 {
            for j in (i + 1)..4 {
                // only transitions that flip the electron along the field
                if (sp[(i, i)].re - sp[(j, j)].re).abs() < 0.5 {
                    continue;
                }
                let w = sx[(i, j)].norm_sqr() + sy[(i, j)].norm_sqr() + sz[(i, j)].norm_sqr() - sp[(i, j)].norm_sqr();
                lines.push((eig.values[j] - eig.values[i], w.max(0.0)));
            }
        }
        let total: f64 = lines.iter().map(|l| l.1).sum();
        if total > 0.0 {
            for (f, w) in lines {
                if w > 1e-9 * total {
                    out.push(SedorLine {
                        defect: x.label.clone(),
                        frequency: f,
                        weight: w / total,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| a.frequency.total_cmp(&b.frequency).then_with(|| a.defect.cmp(&b.defect)));
    Ok(out)
}

/// Peak-normalized Lorentzian of full width `fwhm` at `center`.
pub fn lorentzian(f: f64, center: f64, fwhm: f64) -> f64 {
    let u = 2.0 * (f - center) / fwhm;
    1.0 / (1.0 + u * u)
}

/// SEDOR response: one Lorentzian per electron transition, height equal to
/// its weight. `linewidth` is the full width in kHz.
pub fn sedor_spectrum(system: &SpinSystemSpec, field: &FieldVector, probe: &[f64], linewidth: f64) -> Result<Spectrum> {
    if !(linewidth > 0.0) {
        return Err(Error::invalid("linewidth must be positive"));
    }
    let lines = sedor_lines(system, field)?;
    let w = linewidth * 1e-3;
    let amps = probe
        .iter()
        .map(|&f| lines.iter().map(|l| l.weight * lorentzian(f, l.frequency, w)).sum())
        .collect();
    Spectrum::new(probe.to_vec(), amps, SpectrumMeta::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzLine {
    /// MHz.
    pub center: f64,
    /// MHz.
    pub fwhm: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    /// Sorted by center.
    pub lines: Vec<LorentzLine>,
    pub fit: FitResult,
}

struct MultiLorentz<'a> {
    f: &'a [f64],
    y: &'a [f64],
    n: usize,
}

impl LsqProblem for MultiLorentz<'_> {
    fn n_params(&self) -> usize {
        3 * self.n
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.f.len(),
            self.f.iter().zip(self.y).map(|(&f, &y)| {
                let m: f64 = (0..self.n)
                    .map(|k| p[3 * k + 2] * lorentzian(f, p[3 * k], p[3 * k + 1].abs()))
                    .sum();
                m - y
            }),
        )
    }
}

/// Width at half maximum around bin `k`, from linear interpolation.
fn half_width(s: &Spectrum, k: usize) -> f64 {
    let half = 0.5 * s.amplitudes[k];
    let cross = |range: &mut dyn Iterator<Item = usize>| {
        let mut prev = k;
        for j in range {
            if s.amplitudes[j] <= half {
                let (a0, a1) = (s.amplitudes[prev], s.amplitudes[j]);
                let t = if a0 != a1 { (a0 - half) / (a0 - a1) } else { 0.5 };
                return Some(s.frequencies[prev] + t * (s.frequencies[j] - s.frequencies[prev]));
            }
            prev = j;
        }
        None
    };
    let lo = cross(&mut (0..k).rev());
    let hi = cross(&mut (k + 1..s.len()));
    match (lo, hi) {
        (Some(l), Some(h)) => h - l,
        (Some(l), None) => 2.0 * (s.frequencies[k] - l),
        (None, Some(h)) => 2.0 * (h - s.frequencies[k]),
        (None, None) => 3.0 * s.bin_width(),
    }
}

/// Least-squares fit of `n_lines` Lorentzians, initialized at the strongest
/// local maxima above 5% of the spectrum maximum.
pub fn fit_lorentzians(s: &Spectrum, n_lines: usize) -> Result<LorentzianFit> {
    if n_lines == 0 {
        return Err(Error::invalid("need at least one line"));
    }
    if s.len() < 3 * n_lines + 1 {
        return Err(Error::InsufficientData(format!("{} points for {} lines", s.len(), n_lines)));
    }
    let amax = s.amplitudes.iter().copied().fold(0.0, f64::max);
    let min = s.amplitudes.iter().copied().fold(f64::INFINITY, f64::min);
    let peaks = if amax > 0.0 && amax - min > 1e-12 * amax {
        find_peaks(&s.amplitudes, 0.05 * amax)
    } else {
        Vec::new()
    };
    if peaks.len() < n_lines {
        return Err(Error::TooFewPeaks {
            found: peaks.len(),
            requested: n_lines,
        });
    }
    let mut chosen: Vec<usize> = peaks[..n_lines].to_vec();
    chosen.sort_unstable();
    let mut p0 = DVector::zeros(3 * n_lines);
    for (k, &idx) in chosen.iter().enumerate() {
        p0[3 * k] = s.frequencies[idx];
        p0[3 * k + 1] = half_width(s, idx).max(s.bin_width());
        p0[3 * k + 2] = s.amplitudes[idx];
    }
    let problem = MultiLorentz {
        f: &s.frequencies,
        y: &s.amplitudes,
        n: n_lines,
    };
    let canon = |p: &mut DVector<f64>| {
        for k in 0..n_lines {
            p[3 * k + 1] = p[3 * k + 1].abs();
        }
    };
    let best = multi_start(&problem, &[p0], &LmOptions::default(), canon)?;
    let mut order: Vec<usize> = (0..n_lines).collect();
    order.sort_by(|&a, &b| best.params[3 * a].total_cmp(&best.params[3 * b]));
    let mut p = DVector::zeros(3 * n_lines);
    let mut names = Vec::with_capacity(3 * n_lines);
    for (k, &src) in order.iter().enumerate() {
        for j in 0..3 {
            p[3 * k + j] = best.params[3 * src + j];
        }
        names.push(format!("center_{k}"));
        names.push(format!("fwhm_{k}"));
        names.push(format!("amplitude_{k}"));
    }
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let fit = build_fit_result(&problem, FitModel::Lorentzian, &name_refs, &p, best.iterations)?;
    let lines = (0..n_lines)
        .map(|k| LorentzLine {
            center: p[3 * k],
            fwhm: p[3 * k + 1],
            amplitude: p[3 * k + 2],
        })
        .collect();
    Ok(LorentzianFit { lines, fit })
}
