//! Secular hyperfine strengths and tensor fits from splitting-vs-angle data.
//!
//! The observable is the doublet splitting C_z = |Â·b̂|, the norm of the
//! row of the crystal-frame tensor along the field direction.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::{build_fit_result, build_fit_result_fixed, levenberg_marquardt, multi_start, FitModel, FitResult, LmOptions, LsqProblem};
use crate::linalg::{c, kron, pauli, CMatrix};
use crate::spin_model::{rotation_matrix, tensor_in_crystal_frame, EulerAngles, FieldVector, HyperfineTensor, GAMMA_E};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperfineObservation {
    pub field: FieldVector,
    /// MHz.
    pub splitting: f64,
    /// MHz.
    pub sigma: f64,
}

impl HyperfineObservation {
    pub fn new(field: FieldVector, splitting: f64, sigma: f64) -> Result<Self> {
        let obs = Self { field, splitting, sigma };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.splitting >= 0.0) || !self.splitting.is_finite() {
            return Err(Error::invalid(format!("splitting must be >= 0, got {}", self.splitting)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// C_z by explicit trace projection of the electron Zeeman and hyperfine
/// Hamiltonians (Pauli normalization).
pub fn secular_strength_numeric(t: &HyperfineTensor, field: &FieldVector) -> Result<f64> {
    let omega = GAMMA_E * field.b0;
    if omega == 0.0 {
        return Err(Error::ZeroField);
    }
    let norm = t.norm();
    if norm > 0.0 && omega / norm < 10.0 {
        log::warn!(
            "electron Zeeman {omega:.3} MHz is not large against |A| = {norm:.3} MHz; secular strength is approximate"
        );
    }
    let s = pauli();
    let b = field.direction();
    let h_e: CMatrix = &s[0] * c(omega * b.x, 0.0) + &s[1] * c(omega * b.y, 0.0) + &s[2] * c(omega * b.z, 0.0);
    let a = tensor_in_crystal_frame(t);
    let mut h_h = CMatrix::zeros(4, 4);
    for i in 0..3 {
        for j in 0..3 {
            h_h += kron(&s[i], &s[j]) * c(a[(i, j)], 0.0);
        }
    }
    let sum: f64 = (0..3)
        .map(|k| {
            let tr = (kron(&h_e, &s[k]) * &h_h).trace();
            tr.re * tr.re
        })
        .sum();
    Ok(sum.sqrt() / (4.0 * omega))
}

/// Row-norm form |Â·b̂| in the crystal frame.
pub fn secular_strength_row_norm(t: &HyperfineTensor, field: &FieldVector) -> f64 {
    (tensor_in_crystal_frame(t) * field.direction()).norm()
}

struct Angles {
    sd: f64,
    cd: f64,
    s2d: f64,
    c2d: f64,
    sb: f64,
    cb: f64,
    s2b: f64,
    c2b: f64,
    st: f64,
    s2t: f64,
    c2t: f64,
}

impl Angles {
    fn new(alpha: f64, beta: f64, field: &FieldVector) -> Self {
        let d = (alpha - field.phi).to_radians();
        let b = beta.to_radians();
        let t = field.theta.to_radians();
        Self {
            sd: d.sin(),
            cd: d.cos(),
            s2d: (2.0 * d).sin(),
            c2d: (2.0 * d).cos(),
            sb: b.sin(),
            cb: b.cos(),
            s2b: (2.0 * b).sin(),
            c2b: (2.0 * b).cos(),
            st: t.sin(),
            s2t: (2.0 * t).sin(),
            c2t: (2.0 * t).cos(),
        }
    }

    fn x(&self) -> f64 {
        4.0 * self.c2d * self.sb * self.sb * self.st * self.st
            + 4.0 * self.cd * self.s2b * self.s2t
            + self.c2b * (3.0 * self.c2t + 1.0)
            + self.c2t
    }

    fn dx_ddelta(&self) -> f64 {
        -8.0 * self.s2d * self.sb * self.sb * self.st * self.st - 4.0 * self.sd * self.s2b * self.s2t
    }

    fn dx_dbeta(&self) -> f64 {
        4.0 * self.c2d * self.s2b * self.st * self.st + 8.0 * self.cd * self.c2b * self.s2t
            - 2.0 * self.s2b * (3.0 * self.c2t + 1.0)
    }

    fn p(&self) -> f64 {
        -8.0 * (self.cb * self.s2d * self.st * self.st - self.sb * self.sd * self.s2t)
    }

    fn dp_ddelta(&self) -> f64 {
        -8.0 * (2.0 * self.cb * self.c2d * self.st * self.st - self.sb * self.cd * self.s2t)
    }

    fn dp_dbeta(&self) -> f64 {
        -8.0 * (-self.sb * self.s2d * self.st * self.st - self.cb * self.sd * self.s2t)
    }

    fn q(&self) -> f64 {
        2.0 * (self.c2b + 3.0) * self.c2d * self.st * self.st - 4.0 * self.s2b * self.cd * self.s2t
            + 2.0 * self.sb * self.sb * (3.0 * self.c2t + 1.0)
    }

    fn dq_ddelta(&self) -> f64 {
        -4.0 * (self.c2b + 3.0) * self.s2d * self.st * self.st + 4.0 * self.s2b * self.sd * self.s2t
    }

    fn dq_dbeta(&self) -> f64 {
        -4.0 * self.s2b * self.c2d * self.st * self.st - 8.0 * self.c2b * self.cd * self.s2t
            + 2.0 * self.s2b * (3.0 * self.c2t + 1.0)
    }
}

/// Closed-form C_z for an axially symmetric tensor, δ = α − φ.
pub fn hyperfine_axial(a_perp: f64, a_par: f64, alpha: f64, beta: f64, field: &FieldVector) -> f64 {
    let x = Angles::new(alpha, beta, field).x();
    let (p2, z2) = (a_perp * a_perp, a_par * a_par);
    let q = 5.0 * p2 + 3.0 * z2 - (p2 - z2) * x;
    q.max(0.0).sqrt() / (2.0 * std::f64::consts::SQRT_2)
}

/// Value and gradient w.r.t. (a_perp, a_par, alpha, beta); angles in degrees.
pub fn hyperfine_axial_grad(a_perp: f64, a_par: f64, alpha: f64, beta: f64, field: &FieldVector) -> (f64, [f64; 4]) {
    let an = Angles::new(alpha, beta, field);
    let x = an.x();
    let (p2, z2) = (a_perp * a_perp, a_par * a_par);
    let q = 5.0 * p2 + 3.0 * z2 - (p2 - z2) * x;
    let cz = q.max(0.0).sqrt() / (2.0 * std::f64::consts::SQRT_2);
    if cz <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let k = 1.0 / (16.0 * cz);
    let deg = std::f64::consts::PI / 180.0;
    let grad = [
        k * (10.0 * a_perp - 2.0 * a_perp * x),
        k * (6.0 * a_par + 2.0 * a_par * x),
        k * (-(p2 - z2) * an.dx_ddelta()) * deg,
        k * (-(p2 - z2) * an.dx_dbeta()) * deg,
    ];
    (cz, grad)
}

/// Closed-form C_z for a general tensor.
pub fn hyperfine_full(t: &HyperfineTensor, field: &FieldVector) -> f64 {
    full_value_grad(t.ax, t.ay, t.az, &t.orientation, field).0
}

/// Value and gradient w.r.t. (ax, ay, az, alpha, beta, gamma).
pub fn hyperfine_full_grad(t: &HyperfineTensor, field: &FieldVector) -> (f64, [f64; 6]) {
    full_value_grad(t.ax, t.ay, t.az, &t.orientation, field)
}

fn full_value_grad(ax: f64, ay: f64, az: f64, o: &EulerAngles, field: &FieldVector) -> (f64, [f64; 6]) {
    let an = Angles::new(o.alpha, o.beta, field);
    let g = o.gamma.to_radians();
    let (s2g, c2g) = ((2.0 * g).sin(), (2.0 * g).cos());
    let (x, p, q) = (an.x(), an.p(), an.q());
    let d = ax * ax - ay * ay;
    let e = 2.0 * az * az - ax * ax - ay * ay;
    let t = 5.0 * (ax * ax + ay * ay) + 6.0 * az * az + d * s2g * p + d * c2g * q + e * x;
    let cz = t.max(0.0).sqrt() / 4.0;
    if cz <= 0.0 {
        return (0.0, [0.0; 6]);
    }
    let k = 1.0 / (32.0 * cz);
    let deg = std::f64::consts::PI / 180.0;
    let mix = s2g * p + c2g * q;
    let grad = [
        k * (10.0 * ax + 2.0 * ax * mix - 2.0 * ax * x),
        k * (10.0 * ay - 2.0 * ay * mix - 2.0 * ay * x),
        k * (12.0 * az + 4.0 * az * x),
        k * (d * s2g * an.dp_ddelta() + d * c2g * an.dq_ddelta() + e * an.dx_ddelta()) * deg,
        k * (d * s2g * an.dp_dbeta() + d * c2g * an.dq_dbeta() + e * an.dx_dbeta()) * deg,
        k * (2.0 * d * c2g * p - 2.0 * d * s2g * q) * deg,
    ];
    (cz, grad)
}

/// Standard deviation of a uniform distribution over the canonical γ range.
pub const GAMMA_UNIFORM_SIGMA: f64 = 25.980762113533157;

pub const AXIAL_PARAMS: [&str; 4] = ["a_perp", "a_par", "alpha", "beta"];
pub const FULL_PARAMS: [&str; 6] = ["ax", "ay", "az", "alpha", "beta", "gamma"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorModel {
    Axial,
    Full,
}

impl TensorModel {
    pub fn fit_model(self) -> FitModel {
        match self {
            TensorModel::Axial => FitModel::Axial,
            TensorModel::Full => FitModel::Full,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            TensorModel::Axial => &AXIAL_PARAMS,
            TensorModel::Full => &FULL_PARAMS,
        }
    }

    fn min_observations(self) -> usize {
        match self {
            TensorModel::Axial => 5,
            TensorModel::Full => 7,
        }
    }
}

impl std::str::FromStr for TensorModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(TensorModel::Axial),
            "full" => Ok(TensorModel::Full),
            other => Err(Error::invalid(format!("unknown tensor model `{other}`"))),
        }
    }
}

/// Weighted least-squares problem for a tensor model.
pub struct HyperfineProblem<'a> {
    pub data: &'a [HyperfineObservation],
    pub model: TensorModel,
}

impl HyperfineProblem<'_> {
    fn value_grad(&self, p: &DVector<f64>, f: &FieldVector) -> (f64, Vec<f64>) {
        match self.model {
            TensorModel::Axial => {
                let (v, g) = hyperfine_axial_grad(p[0], p[1], p[2], p[3], f);
                (v, g.to_vec())
            }
            TensorModel::Full => {
                let o = EulerAngles { alpha: p[3], beta: p[4], gamma: p[5] };
                let (v, g) = full_value_grad(p[0], p[1], p[2], &o, f);
                (v, g.to_vec())
            }
        }
    }

    /// Gradient of χ² = Σ r_i².
    pub fn chi2_gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        let r = self.residuals(p);
        let j = self.jacobian(p).expect("analytic jacobian");
        j.transpose() * r * 2.0
    }

    pub fn chi2(&self, p: &DVector<f64>) -> f64 {
        self.residuals(p).norm_squared()
    }
}

impl LsqProblem for HyperfineProblem<'_> {
    fn n_params(&self) -> usize {
        self.model.param_names().len()
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.data.len(),
            self.data
                .iter()
                .map(|o| (self.value_grad(p, &o.field).0 - o.splitting) / o.sigma),
        )
    }

    fn jacobian(&self, p: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.n_params();
        let mut j = DMatrix::zeros(self.data.len(), n);
        for (i, o) in self.data.iter().enumerate() {
            let (_, g) = self.value_grad(p, &o.field);
            for k in 0..n {
                j[(i, k)] = g[k] / o.sigma;
            }
        }
        Some(j)
    }
}

fn wrap360(x: f64) -> f64 {
    let w = x.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Maps parameters onto a unique representative of their equivalence class.
pub fn canonicalize(model: TensorModel, p: &mut DVector<f64>) {
    match model {
        TensorModel::Axial => {
            p[0] = p[0].abs();
            p[1] = p[1].abs();
            let e = EulerAngles::new(p[2], p[3], 0.0);
            let (mut a, mut b) = (e.alpha, e.beta);
            if b > 90.0 {
                // the symmetry axis n and −n are indistinguishable
                b = 180.0 - b;
                a += 180.0;
            }
            p[2] = wrap360(a);
            p[3] = b;
        }
        TensorModel::Full => {
            for k in 0..3 {
                p[k] = p[k].abs();
            }
            let e = EulerAngles::new(p[3], p[4], p[5]);
            let (mut a, mut b, mut g) = (e.alpha, e.beta, e.gamma);
            if b > 90.0 {
                // negates the second and third principal axes
                a += 180.0;
                b = 180.0 - b;
                g = -g;
            }
            // γ + 180° negates the first two axes
            g = g.rem_euclid(180.0);
            if g >= 90.0 {
                // γ + 90° exchanges the roles of ax and ay
                p.swap_rows(0, 1);
                g -= 90.0;
            }
            p[3] = wrap360(a);
            p[4] = b;
            p[5] = g;
        }
    }
}

/// Squared field direction components in the principal frame.
fn principal_weights(angles: &EulerAngles, field: &FieldVector) -> Vector3<f64> {
    let r: Matrix3<f64> = rotation_matrix(angles);
    (r * field.direction()).map(|v| v * v)
}

/// Principal values minimizing Σ((C² − Σ_k A_k² w_k)/σ²)² for fixed angles.
fn linear_amplitudes(model: TensorModel, angles: &EulerAngles, data: &[HyperfineObservation]) -> Vec<f64> {
    let rows: Vec<(Vec<f64>, f64)> = data
        .iter()
        .map(|o| {
            let w = principal_weights(angles, &o.field);
            let s = 2.0 * o.splitting.max(o.sigma) * o.sigma;
            let x = match model {
                TensorModel::Axial => vec![(w.x + w.y) / s, w.z / s],
                TensorModel::Full => vec![w.x / s, w.y / s, w.z / s],
            };
            (x, o.splitting * o.splitting / s)
        })
        .collect();
    let n = rows[0].0.len();
    let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let sol = a
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(n));
    let amps: Vec<f64> = sol.iter().map(|v| v.max(0.0).sqrt()).collect();
    // a zero amplitude has zero gradient and would never leave the origin
    let floor = 0.05 * amps.iter().copied().fold(0.0, f64::max).max(1e-3);
    amps.into_iter().map(|a| a.max(floor)).collect()
}

fn angle_grid(step: f64, max: f64, inclusive: bool) -> Vec<f64> {
    let n = (max / step).round() as usize;
    let n = if inclusive { n + 1 } else { n };
    (0..n).map(|k| k as f64 * step).collect()
}

fn starting_points(model: TensorModel, data: &[HyperfineObservation]) -> Vec<DVector<f64>> {
    let alphas = angle_grid(15.0, 360.0, false);
    // β and 180° − β describe the same axial tensor
    let betas = match model {
        TensorModel::Axial => angle_grid(15.0, 90.0, true),
        TensorModel::Full => angle_grid(15.0, 180.0, true),
    };
    let gammas: &[f64] = match model {
        TensorModel::Axial => &[0.0],
        TensorModel::Full => &[0.0, 45.0, 90.0, 135.0],
    };
    let mut starts = Vec::new();
    for &a in &alphas {
        for &b in &betas {
            for &g in gammas {
                let angles = EulerAngles { alpha: a, beta: b, gamma: g };
                let amps = linear_amplitudes(model, &angles, data);
                let mut v = amps;
                match model {
                    TensorModel::Axial => v.extend([a, b]),
                    TensorModel::Full => v.extend([a, b, g]),
                }
                starts.push(DVector::from_vec(v));
            }
        }
    }
    let problem = HyperfineProblem { data, model };
    let mut scored: Vec<(f64, DVector<f64>)> = starts.into_iter().map(|p| (problem.chi2(&p), p)).collect();
    // stable sort keeps grid order among equal χ²
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = match model {
        TensorModel::Axial => AXIAL_STARTS,
        TensorModel::Full => FULL_STARTS,
    };
    scored.into_iter().take(keep).map(|(_, p)| p).collect()
}

/// Grid starts polished by LM, lowest initial χ² first.
const AXIAL_STARTS: usize = 32;
const FULL_STARTS: usize = 96;

fn check_data(data: &[HyperfineObservation], model: TensorModel) -> Result<()> {
    for o in data {
        o.validate()?;
    }
    let need = model.min_observations();
    if data.len() < need {
        return Err(Error::InsufficientData(format!(
            "{} model needs at least {need} observations, got {}",
            model.fit_model().name(),
            data.len()
        )));
    }
    let mut dirs: Vec<Vector3<f64>> = Vec::new();
    for o in data {
        let d = o.field.direction();
        if !dirs.iter().any(|e| (e - d).norm() < 1e-9) {
            dirs.push(d);
        }
    }
    if dirs.len() < 2 {
        return Err(Error::RankDeficient(f64::INFINITY));
    }
    Ok(())
}

/// Fits a tensor model to splitting observations.
///
/// Without `init`, scores a 15° (α, β) grid (and four γ values for the full
/// model) with linear least-squares principal values, then runs LM from the
/// best-scoring grid points.
pub fn fit_hyperfine(data: &[HyperfineObservation], model: TensorModel, init: Option<&[f64]>) -> Result<FitResult> {
    check_data(data, model)?;
    let problem = HyperfineProblem { data, model };
    let names = model.param_names();
    let starts = match init {
        Some(p) => {
            if p.len() != names.len() {
                return Err(Error::Dimension(format!("{} initial values for {} parameters", p.len(), names.len())));
            }
            vec![DVector::from_row_slice(p)]
        }
        None => starting_points(model, data),
    };
    let opts = LmOptions::default();
    let best = multi_start(&problem, &starts, &opts, |p| canonicalize(model, p))?;
    if model == TensorModel::Full {
        if let Some(snapped) = snap_to_axial(data, &best.params, &opts) {
            // γ has no effect on an axial tensor; report it as uniform on [0°, 90°)
            return build_fit_result_fixed(
                &problem,
                model.fit_model(),
                names,
                &snapped,
                best.iterations,
                &[(5, GAMMA_UNIFORM_SIGMA)],
            );
        }
    }
    build_fit_result(&problem, model.fit_model(), names, &best.params, best.iterations)
}

/// When a full-model optimum is nearly axial (any two principal values
/// equal), polishes it under the axial model and returns the equivalent full
/// parameters if they fit as well.
fn snap_to_axial(data: &[HyperfineObservation], p: &DVector<f64>, opts: &LmOptions) -> Option<DVector<f64>> {
    let scale = p.rows(0, 3).amax().max(1e-12);
    let (i, j, unique) = [(0, 1, 2), (0, 2, 1), (1, 2, 0)]
        .into_iter()
        .min_by(|x, y| (p[x.0] - p[x.1]).abs().total_cmp(&(p[y.0] - p[y.1]).abs()))?;
    if (p[i] - p[j]).abs() > 1e-3 * scale {
        return None;
    }
    let r = rotation_matrix(&EulerAngles::new(p[3], p[4], p[5]));
    let axis = r.row(unique);
    let beta = axis[2].clamp(-1.0, 1.0).acos().to_degrees();
    let alpha = axis[1].atan2(axis[0]).to_degrees();
    let full = HyperfineProblem { data, model: TensorModel::Full };
    let axial = HyperfineProblem { data, model: TensorModel::Axial };
    let init = DVector::from_vec(vec![0.5 * (p[i] + p[j]), p[unique], alpha, beta]);
    let mut fit = levenberg_marquardt(&axial, init, opts);
    canonicalize(TensorModel::Axial, &mut fit.params);
    let q = &fit.params;
    let snapped = DVector::from_vec(vec![q[0], q[0], q[1], q[2], q[3], 0.0]);
    let (c_full, c_snap) = (full.chi2(p), full.chi2(&snapped));
    (c_snap <= c_full * (1.0 + 1e-6) + 1e-12).then_some(snapped)
}

/// Tensor described by a fit.
pub fn tensor_from_fit(fit: &FitResult) -> Result<HyperfineTensor> {
    match fit.model {
        FitModel::Axial => Ok(HyperfineTensor::axial(
            fit.param("a_perp"),
            fit.param("a_par"),
            fit.param("alpha"),
            fit.param("beta"),
        )),
        FitModel::Full => Ok(HyperfineTensor::new(
            fit.param("ax"),
            fit.param("ay"),
            fit.param("az"),
            EulerAngles::new(fit.param("alpha"), fit.param("beta"), fit.param("gamma")),
        )),
        other => Err(Error::invalid(format!("{} fit does not describe a hyperfine tensor", other.name()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: FitModel,
    pub chi2: f64,
    pub dof: usize,
    pub reduced_chi2: f64,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    /// Best first.
    pub ranking: Vec<ModelScore>,
    pub preferred: FitModel,
}

/// Ranks fits by reduced χ²; near-ties (1e-9 relative) go to the model with
/// fewer parameters.
pub fn compare_models(data: &[HyperfineObservation], fits: &[FitResult]) -> Result<ModelComparison> {
    if fits.len() < 2 {
        return Err(Error::InsufficientData("need at least two fits to compare".into()));
    }
    for f in fits {
        if f.residuals.len() != data.len() {
            return Err(Error::Dimension(format!(
                "{} fit has {} residuals for {} observations",
                f.model.name(),
                f.residuals.len(),
                data.len()
            )));
        }
    }
    let mut ranking: Vec<ModelScore> = fits
        .iter()
        .map(|f| ModelScore {
            model: f.model,
            chi2: f.chi2,
            dof: f.dof,
            reduced_chi2: f.reduced_chi2(),
            n_params: f.n_params(),
        })
        .collect();
    ranking.sort_by(|a, b| {
        let scale = a.reduced_chi2.abs().max(b.reduced_chi2.abs()).max(1e-300);
        if (a.reduced_chi2 - b.reduced_chi2).abs() <= 1e-9 * scale || (a.chi2 < 1e-12 && b.chi2 < 1e-12) {
            a.n_params.cmp(&b.n_params).then(a.model.cmp(&b.model))
        } else {
            a.reduced_chi2.total_cmp(&b.reduced_chi2)
        }
    });
    let preferred = ranking[0].model;
    Ok(ModelComparison { ranking, preferred })
}
