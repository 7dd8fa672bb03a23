//! Seeded synthetic data sets used by the tests, benches and the `synth`
//! command.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dipolar::{dipolar_analytic_field, DipolarObservation};
use crate::error::Result;
use crate::hyperfine::HyperfineObservation;
use crate::spin_model::{DipolarGeometry, FieldVector, NvSpec, THETA_NV};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rng: Option<&mut ChaCha8Rng>, sigma: f64) -> f64 {
    match rng {
        Some(r) if sigma > 0.0 => Normal::new(0.0, sigma).map(|n| n.sample(r)).unwrap_or(0.0),
        _ => 0.0,
    }
}

/// Rotation sweeps used for hyperfine fits: θ from θ_NV − 50° to θ_NV + 50°
/// in 5° steps at φ = 0, and φ from 0° to 120° in 10° steps at θ = 90°.
/// With `third_plane`, adds a θ sweep 0°..120° at φ = 90°, which is needed to
/// identify a fully anisotropic tensor.
pub fn hyperfine_sweep_fields(b0: f64, third_plane: bool) -> Vec<FieldVector> {
    let mut f: Vec<FieldVector> = (-10..=10)
        .map(|k| FieldVector { b0, theta: THETA_NV + 5.0 * k as f64, phi: 0.0 })
        .collect();
    f.extend((0..=12).map(|k| FieldVector { b0, theta: 90.0, phi: 10.0 * k as f64 }));
    if third_plane {
        f.extend((0..=12).map(|k| FieldVector { b0, theta: 10.0 * k as f64, phi: 90.0 }));
    }
    f
}

/// Splittings `|model(field)| + N(0, σ)`; noiseless when `seed` is `None`.
pub fn hyperfine_observations(
    fields: &[FieldVector],
    model: impl Fn(&FieldVector) -> f64,
    sigma: f64,
    seed: Option<u64>,
) -> Result<Vec<HyperfineObservation>> {
    let mut r = seed.map(rng);
    fields
        .iter()
        .map(|f| {
            let v = model(f) + gaussian(r.as_mut(), sigma);
            HyperfineObservation::new(*f, v.abs(), sigma)
        })
        .collect()
}

/// Fields tilted from the NV axis by −60°..60° in 1° steps inside the
/// NV/crystal-z plane.
pub fn dipolar_sweep_fields(b0: f64) -> Vec<FieldVector> {
    (-60..=60)
        .map(|k| FieldVector { b0, theta: THETA_NV + k as f64, phi: 0.0 })
        .collect()
}

/// Coupling magnitudes from the closed form with relative Gaussian noise.
/// Each σ is `rel · max(|d|, 0.1·max|d|)` so that near-zero couplings do not
/// get vanishing error bars.
pub fn dipolar_observations(
    g: &DipolarGeometry,
    nv: &NvSpec,
    fields: &[FieldVector],
    rel_noise: f64,
    seed: Option<u64>,
) -> Result<Vec<DipolarObservation>> {
    let d: Vec<f64> = fields.iter().map(|f| dipolar_analytic_field(g, f, nv)).collect();
    let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rel = if rel_noise > 0.0 { rel_noise } else { 0.05 };
    let mut r = seed.map(rng);
    fields
        .iter()
        .zip(&d)
        .map(|(f, &di)| {
            let sigma = rel * di.abs().max(0.1 * dmax).max(1e-300);
            let noise = if rel_noise > 0.0 { gaussian(r.as_mut(), sigma) } else { 0.0 };
            DipolarObservation::new(*f, (di + noise).abs(), sigma)
        })
        .collect()
}

/// Parameters of a two-tone coherence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoToneSpec {
    pub amplitude: f64,
    pub slow_khz: f64,
    pub slow_phase: f64,
    pub depth: f64,
    pub fast_mhz: f64,
    pub fast_phase: f64,
    pub offset: f64,
}

impl TwoToneSpec {
    pub fn eval(&self, t: f64) -> f64 {
        self.amplitude
            * (TAU * self.slow_khz * 1e-3 * t + self.slow_phase).cos()
            * (1.0 - self.depth + self.depth * (TAU * self.fast_mhz * t + self.fast_phase).cos())
            + self.offset
    }
}

/// `n` samples every `dwell` µs with additive noise of standard deviation
/// `noise`.
pub fn two_tone_trace(spec: &TwoToneSpec, dwell: f64, n: usize, noise: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let t: Vec<f64> = (0..n).map(|k| k as f64 * dwell).collect();
    let y = t.iter().map(|&ti| spec.eval(ti) + gaussian(Some(&mut r), noise)).collect();
    (t, y)
}
