//! Weighted nonlinear least squares (Levenberg–Marquardt) and fit reports.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition number of the Jacobian above which a fit is declared degenerate.
pub const CONDITION_LIMIT: f64 = 1e8;

/// A least-squares problem in whitened form: residuals are already divided
/// by their standard deviations, so χ² = Σ r_i².
pub trait LsqProblem: Sync {
    fn n_params(&self) -> usize;
    fn residuals(&self, p: &DVector<f64>) -> DVector<f64>;

    /// Analytic Jacobian ∂r_i/∂p_j, if available.
    fn jacobian(&self, _p: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

pub fn finite_difference_jacobian<P: LsqProblem + ?Sized>(problem: &P, p: &DVector<f64>) -> DMatrix<f64> {
    let m = problem.residuals(p).len();
    let n = p.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let h = 1e-6 * p[j].abs().max(1.0);
        let mut hi = p.clone();
        let mut lo = p.clone();
        hi[j] += h;
        lo[j] -= h;
        let d = (problem.residuals(&hi) - problem.residuals(&lo)) / (2.0 * h);
        jac.set_column(j, &d);
    }
    jac
}

fn jacobian_of<P: LsqProblem + ?Sized>(problem: &P, p: &DVector<f64>) -> DMatrix<f64> {
    problem
        .jacobian(p)
        .unwrap_or_else(|| finite_difference_jacobian(problem, p))
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative χ² decrease below which the fit is considered converged.
    pub ftol: f64,
    /// Relative step size below which the fit is considered converged.
    pub xtol: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            ftol: 1e-12,
            xtol: 1e-12,
            lambda0: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    pub chi2: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn levenberg_marquardt<P: LsqProblem + ?Sized>(problem: &P, p0: DVector<f64>, opts: &LmOptions) -> LmOutcome {
    let mut p = p0;
    let mut r = problem.residuals(&p);
    let mut chi2 = r.norm_squared();
    let mut lambda = opts.lambda0;
    let n = p.len();

    if !chi2.is_finite() {
        return LmOutcome {
            params: p,
            chi2,
            iterations: 0,
            converged: false,
        };
    }

    for it in 0..opts.max_iter {
        if chi2 < 1e-30 {
            return LmOutcome { params: p, chi2, iterations: it, converged: true };
        }
        let jac = jacobian_of(problem, &p);
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * &r;
        let dmax = (0..n).map(|k| a[(k, k)]).fold(0.0, f64::max);
        if dmax == 0.0 || g.amax() <= 1e-15 * chi2.sqrt().max(1e-300) {
            return LmOutcome { params: p, chi2, iterations: it, converged: true };
        }

        loop {
            let mut m = a.clone();
            for k in 0..n {
                m[(k, k)] += lambda * a[(k, k)].max(1e-12 * dmax);
            }
            let step = match m.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e20 {
                        return LmOutcome { params: p, chi2, iterations: it, converged: true };
                    }
                    continue;
                }
            };
            let trial = &p + &step;
            let r_trial = problem.residuals(&trial);
            let chi2_trial = r_trial.norm_squared();
            if chi2_trial.is_finite() && chi2_trial < chi2 {
                let decrease = chi2 - chi2_trial;
                let small_step = step.norm() <= opts.xtol * (p.norm() + opts.xtol);
                p = trial;
                r = r_trial;
                chi2 = chi2_trial;
                lambda = (lambda / 10.0).max(1e-15);
                if decrease <= opts.ftol * chi2 || small_step || chi2 < 1e-30 {
                    return LmOutcome { params: p, chi2, iterations: it + 1, converged: true };
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                // no downhill step exists at machine precision
                return LmOutcome { params: p, chi2, iterations: it + 1, converged: true };
            }
        }
    }
    LmOutcome {
        params: p,
        chi2,
        iterations: opts.max_iter,
        converged: false,
    }
}

fn lexicographic(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Relative χ² difference below which two optima count as tied.
pub const CHI2_TIE: f64 = 1e-9;

/// Runs LM from every start in parallel and canonicalizes each optimum.
/// Outcomes come back converged first, then by χ² and lexicographic
/// parameters.
pub fn multi_start_all<P, F>(problem: &P, starts: &[DVector<f64>], opts: &LmOptions, canonical: F) -> Vec<LmOutcome>
where
    P: LsqProblem + ?Sized,
    F: Fn(&mut DVector<f64>) + Sync,
{
    let mut outcomes: Vec<LmOutcome> = starts
        .par_iter()
        .map(|s| {
            let mut o = levenberg_marquardt(problem, s.clone(), opts);
            canonical(&mut o.params);
            o
        })
        .collect();
    outcomes.sort_by(|a, b| {
        b.converged
            .cmp(&a.converged)
            .then(a.chi2.total_cmp(&b.chi2))
            .then_with(|| lexicographic(&a.params, &b.params))
    });
    outcomes
}

/// Best optimum over all starts. Optima tied in χ² (within [`CHI2_TIE`])
/// resolve to the lexicographically smallest parameter vector, so the
/// choice does not depend on rounding noise.
pub fn multi_start<P, F>(problem: &P, starts: &[DVector<f64>], opts: &LmOptions, canonical: F) -> Result<LmOutcome>
where
    P: LsqProblem + ?Sized,
    F: Fn(&mut DVector<f64>) + Sync,
{
    if starts.is_empty() {
        return Err(Error::invalid("no starting points"));
    }
    let mut outcomes = multi_start_all(problem, starts, opts, canonical);
    let first = &outcomes[0];
    if !first.converged {
        return Err(Error::NonConvergence(format!(
            "no start converged within {} iterations (best χ² {:.4e})",
            opts.max_iter, first.chi2
        )));
    }
    if !first.chi2.is_finite() {
        return Err(Error::NonConvergence("χ² is not finite".into()));
    }
    let limit = first.chi2 * (1.0 + CHI2_TIE) + 1e-300;
    let pick = (0..outcomes.len())
        .filter(|&k| outcomes[k].converged && outcomes[k].chi2 <= limit)
        .min_by(|&i, &j| lexicographic(&outcomes[i].params, &outcomes[j].params))
        .unwrap_or(0);
    Ok(outcomes.swap_remove(pick))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    Axial,
    Full,
    Geometry,
    TwoTone,
    Lorentzian,
}

impl FitModel {
    pub fn name(self) -> &'static str {
        match self {
            FitModel::Axial => "axial",
            FitModel::Full => "full",
            FitModel::Geometry => "geometry",
            FitModel::TwoTone => "two-tone",
            FitModel::Lorentzian => "lorentzian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub params: BTreeMap<String, f64>,
    /// One standard deviation, same units as the parameter.
    pub uncertainties: BTreeMap<String, f64>,
    pub chi2: f64,
    pub dof: usize,
    /// Weighted residuals at the optimum.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub condition_number: f64,
}

impl FitResult {
    pub fn param(&self, name: &str) -> f64 {
        self.params.get(name).copied().unwrap_or(f64::NAN)
    }

    pub fn sigma(&self, name: &str) -> f64 {
        self.uncertainties.get(name).copied().unwrap_or(f64::NAN)
    }

    pub fn reduced_chi2(&self) -> f64 {
        self.chi2 / self.dof.max(1) as f64
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }
}

/// Singular values of the Jacobian and the unscaled covariance (JᵀJ)⁻¹.
pub struct Curvature {
    pub covariance: DMatrix<f64>,
    pub condition_number: f64,
}

pub fn curvature(jac: &DMatrix<f64>) -> Curvature {
    let n = jac.ncols();
    let svd = jac.clone().svd(false, true);
    let s = &svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let condition_number = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let vt = svd.v_t.expect("v_t requested");
    let mut cov = DMatrix::zeros(n, n);
    for k in 0..s.len() {
        if s[k] > 0.0 {
            let v = vt.row(k).transpose();
            cov += &v * v.transpose() / (s[k] * s[k]);
        }
    }
    Curvature {
        covariance: cov,
        condition_number,
    }
}

/// Builds a report at parameters `p`. Fails with `RankDeficient` when the
/// Jacobian condition number exceeds [`CONDITION_LIMIT`].
pub fn build_fit_result<P: LsqProblem + ?Sized>(
    problem: &P,
    model: FitModel,
    names: &[&str],
    p: &DVector<f64>,
    iterations: usize,
) -> Result<FitResult> {
    build_fit_result_fixed(problem, model, names, p, iterations, &[])
}

/// Like [`build_fit_result`], but parameters listed in `fixed` as
/// (index, reported uncertainty) are excluded from the curvature analysis.
pub fn build_fit_result_fixed<P: LsqProblem + ?Sized>(
    problem: &P,
    model: FitModel,
    names: &[&str],
    p: &DVector<f64>,
    iterations: usize,
    fixed: &[(usize, f64)],
) -> Result<FitResult> {
    assert_eq!(names.len(), p.len());
    let r = problem.residuals(p);
    let jac = jacobian_of(problem, p);
    let free: Vec<usize> = (0..p.len()).filter(|k| !fixed.iter().any(|f| f.0 == *k)).collect();
    let jac_free = jac.select_columns(free.iter());
    let curv = curvature(&jac_free);
    if !(curv.condition_number <= CONDITION_LIMIT) {
        return Err(Error::RankDeficient(curv.condition_number));
    }
    let params = names.iter().zip(p.iter()).map(|(n, v)| (n.to_string(), *v)).collect();
    let mut uncertainties: BTreeMap<String, f64> = free
        .iter()
        .enumerate()
        .map(|(k, &idx)| (names[idx].to_string(), curv.covariance[(k, k)].max(0.0).sqrt()))
        .collect();
    for &(idx, u) in fixed {
        uncertainties.insert(names[idx].to_string(), u);
    }
    Ok(FitResult {
        model,
        params,
        uncertainties,
        chi2: r.norm_squared(),
        dof: r.len().saturating_sub(free.len()),
        residuals: r.iter().copied().collect(),
        iterations,
        condition_number: curv.condition_number,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exp {
        t: Vec<f64>,
        y: Vec<f64>,
        sigma: f64,
    }

    impl LsqProblem for Exp {
        fn n_params(&self) -> usize {
            2
        }
        fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
            DVector::from_iterator(
                self.t.len(),
                self.t
                    .iter()
                    .zip(&self.y)
                    .map(|(t, y)| (p[0] * (-p[1] * t).exp() - y) / self.sigma),
            )
        }
    }

    fn exp_problem() -> Exp {
        let t: Vec<f64> = (0..30).map(|k| k as f64 * 0.1).collect();
        let y = t.iter().map(|t| 2.5 * (-1.3 * t).exp()).collect();
        Exp { t, y, sigma: 0.01 }
    }

    #[test]
    fn recovers_noiseless_exponential() {
        let p = exp_problem();
        let out = levenberg_marquardt(&p, DVector::from_vec(vec![1.0, 0.5]), &LmOptions::default());
        assert!(out.converged);
        assert!(out.chi2 <= 1e-12, "chi2 {}", out.chi2);
        assert!((out.params[0] - 2.5).abs() < 1e-8);
        assert!((out.params[1] - 1.3).abs() < 1e-8);
    }

    #[test]
    fn linear_fit_covariance_matches_normal_equations() {
        struct Line(Vec<f64>, Vec<f64>);
        impl LsqProblem for Line {
            fn n_params(&self) -> usize {
                2
            }
            fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
                DVector::from_iterator(self.0.len(), self.0.iter().zip(&self.1).map(|(x, y)| p[0] + p[1] * x - y))
            }
        }
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|x| 1.0 + 2.0 * x + 0.1 * (x * 7.0).sin()).collect();
        let prob = Line(x.clone(), y);
        let out = levenberg_marquardt(&prob, DVector::zeros(2), &LmOptions::default());
        let fit = build_fit_result(&prob, FitModel::Axial, &["a", "b"], &out.params, out.iterations).unwrap();
        // closed-form (XᵀX)⁻¹ for a straight line
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let det = n * sxx - sx * sx;
        assert!((fit.sigma("a") / (sxx / det).sqrt() - 1.0).abs() < 1e-8);
        assert!((fit.sigma("b") / (n / det).sqrt() - 1.0).abs() < 1e-8);
        assert_eq!(fit.dof, 8);
    }

    #[test]
    fn degenerate_parameters_flagged() {
        struct Dup;
        impl LsqProblem for Dup {
            fn n_params(&self) -> usize {
                2
            }
            fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
                DVector::from_iterator(5, (0..5).map(|k| (p[0] + p[1]) * k as f64 - 3.0 * k as f64))
            }
        }
        let res = build_fit_result(&Dup, FitModel::Axial, &["a", "b"], &DVector::from_vec(vec![1.0, 2.0]), 0);
        assert!(matches!(res, Err(Error::RankDeficient(_))));
    }

    #[test]
    fn multi_start_is_deterministic() {
        let p = exp_problem();
        let starts: Vec<_> = (0..8).map(|k| DVector::from_vec(vec![0.5 + k as f64, 0.2 * k as f64])).collect();
        let a = multi_start(&p, &starts, &LmOptions::default(), |_| {}).unwrap();
        let b = multi_start(&p, &starts, &LmOptions::default(), |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.chi2, b.chi2);
    }
}
