use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Free-electron gyromagnetic ratio, MHz/G.
pub const GAMMA_E: f64 = 2.802495;
/// NV ground-state zero-field splitting, MHz.
pub const NV_ZFS: f64 = 2870.0;
/// 15N nuclear Zeeman coefficient, MHz/G (magnitude of 0.4316 kHz/G).
pub const GAMMA_15N: f64 = 4.316e-4;
/// Polar angle of the NV axis in the crystal frame, degrees.
pub const THETA_NV: f64 = 54.7;
/// 15N hyperfine principal values of the NV host nucleus, MHz.
pub const NV_15N_A_PERP: f64 = 3.65;
pub const NV_15N_A_PAR: f64 = 3.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum Spin {
    Half,
    One,
}

impl Spin {
    pub fn dim(self) -> usize {
        match self {
            Spin::Half => 2,
            Spin::One => 3,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Spin::Half => 0.5,
            Spin::One => 1.0,
        }
    }

    pub fn state_labels(self) -> &'static [&'static str] {
        match self {
            Spin::Half => &["up", "down"],
            Spin::One => &["+1", "0", "-1"],
        }
    }
}

impl TryFrom<f64> for Spin {
    type Error = String;

    fn try_from(v: f64) -> std::result::Result<Self, Self::Error> {
        if v == 0.5 {
            Ok(Spin::Half)
        } else if v == 1.0 {
            Ok(Spin::One)
        } else {
            Err(format!("unsupported spin quantum number {v}; expected 0.5 or 1"))
        }
    }
}

impl From<Spin> for f64 {
    fn from(s: Spin) -> f64 {
        s.value()
    }
}

/// A spin with its Zeeman coefficient. The Zeeman Hamiltonian is
/// `gyro · B · S`, so `gyro` carries whatever sign convention the caller wants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSpecies {
    pub spin: Spin,
    /// MHz per Gauss.
    pub gyro: f64,
    pub label: String,
}

impl SpinSpecies {
    pub fn new(spin: Spin, gyro: f64, label: impl Into<String>) -> Self {
        Self {
            spin,
            gyro,
            label: label.into(),
        }
    }

    pub fn free_electron() -> Self {
        Self::new(Spin::Half, GAMMA_E, "e")
    }

    pub fn nv_electron() -> Self {
        Self::new(Spin::One, GAMMA_E, "NV")
    }

    pub fn n15() -> Self {
        Self::new(Spin::Half, GAMMA_15N, "15N")
    }

    pub fn check_electron(&self) -> Result<()> {
        if !self.gyro.is_finite() || self.gyro == 0.0 {
            return Err(Error::invalid(format!(
                "electron species `{}` needs a finite nonzero gyromagnetic ratio",
                self.label
            )));
        }
        Ok(())
    }
}

/// Euler angles in degrees, in the convention of [`rotation_matrix`].
///
/// Stored normalized: alpha, gamma in [0, 360), beta in [0, 180].
///
/// [`rotation_matrix`]: crate::spin_model::rotation_matrix
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(from = "RawEuler")]
pub struct EulerAngles {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Deserialize)]
struct RawEuler {
    alpha: f64,
    beta: f64,
    #[serde(default)]
    gamma: f64,
}

impl From<RawEuler> for EulerAngles {
    fn from(r: RawEuler) -> Self {
        EulerAngles::new(r.alpha, r.beta, r.gamma)
    }
}

fn wrap360(x: f64) -> f64 {
    let w = x.rem_euclid(360.0);
    // rem_euclid can return 360.0 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

impl EulerAngles {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        let mut b = wrap360(beta);
        let (mut a, mut g) = (alpha, gamma);
        if b > 180.0 {
            // R(α, β, γ) = R(α + 180°, −β, γ + 180°)
            b = 360.0 - b;
            a += 180.0;
            g += 180.0;
        }
        Self {
            alpha: wrap360(a),
            beta: b,
            gamma: wrap360(g),
        }
    }

    pub fn radians(&self) -> (f64, f64, f64) {
        (
            self.alpha.to_radians(),
            self.beta.to_radians(),
            self.gamma.to_radians(),
        )
    }
}

/// Hyperfine tensor given by principal values (MHz) and orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawHyperfine")]
pub struct HyperfineTensor {
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub orientation: EulerAngles,
}

#[derive(Deserialize)]
struct RawHyperfine {
    ax: f64,
    ay: f64,
    az: f64,
    #[serde(default)]
    orientation: EulerAngles,
}

impl From<RawHyperfine> for HyperfineTensor {
    fn from(r: RawHyperfine) -> Self {
        HyperfineTensor::new(r.ax, r.ay, r.az, r.orientation)
    }
}

impl HyperfineTensor {
    pub fn new(ax: f64, ay: f64, az: f64, orientation: EulerAngles) -> Self {
        let orientation = if ax == ay {
            EulerAngles::new(orientation.alpha, orientation.beta, 0.0)
        } else {
            orientation
        };
        Self {
            ax,
            ay,
            az,
            orientation,
        }
    }

    /// Axially symmetric tensor with symmetry axis at polar angle `beta`
    /// and azimuth `alpha` (degrees).
    pub fn axial(a_perp: f64, a_par: f64, alpha: f64, beta: f64) -> Self {
        Self::new(a_perp, a_perp, a_par, EulerAngles::new(alpha, beta, 0.0))
    }

    pub fn isotropic(a: f64) -> Self {
        Self::new(a, a, a, EulerAngles::default())
    }

    pub fn zero() -> Self {
        Self::isotropic(0.0)
    }

    pub fn is_axial(&self) -> bool {
        self.ax == self.ay
    }

    pub fn principal(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(self.ax, self.ay, self.az))
    }

    pub fn norm(&self) -> f64 {
        (self.ax * self.ax + self.ay * self.ay + self.az * self.az).sqrt()
    }
}

/// Static field: strength in Gauss, polar/azimuthal angles in degrees in the
/// crystal frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldVector {
    pub b0: f64,
    pub theta: f64,
    pub phi: f64,
}

impl FieldVector {
    pub fn new(b0: f64, theta: f64, phi: f64) -> Result<Self> {
        if !(b0 >= 0.0) || !b0.is_finite() {
            return Err(Error::invalid(format!("field strength must be >= 0, got {b0}")));
        }
        Ok(Self { b0, theta, phi })
    }

    /// Unit vector `(sinθ cosφ, sinθ sinφ, cosθ)`.
    pub fn direction(&self) -> Vector3<f64> {
        let (t, p) = (self.theta.to_radians(), self.phi.to_radians());
        Vector3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos())
    }

    /// Field vector in Gauss.
    pub fn cartesian(&self) -> Vector3<f64> {
        self.direction() * self.b0
    }
}

/// The NV center: spin-1 electron with zero-field splitting along its
/// molecular axis, plus the host 15N nucleus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NvSpec {
    /// MHz.
    pub zfs: f64,
    /// Molecular-axis direction in the crystal frame, degrees.
    pub axis_theta: f64,
    pub axis_phi: f64,
    /// Host-nucleus hyperfine tensor, oriented relative to the NV frame.
    pub n15_hyperfine: HyperfineTensor,
    pub electron: SpinSpecies,
    pub nucleus: SpinSpecies,
}

impl Default for NvSpec {
    fn default() -> Self {
        Self {
            zfs: NV_ZFS,
            axis_theta: THETA_NV,
            axis_phi: 0.0,
            n15_hyperfine: HyperfineTensor::axial(NV_15N_A_PERP, NV_15N_A_PAR, 0.0, 0.0),
            electron: SpinSpecies::nv_electron(),
            nucleus: SpinSpecies::n15(),
        }
    }
}

impl NvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.zfs > 0.0) {
            return Err(Error::invalid("NV zero-field splitting must be positive"));
        }
        if self.electron.spin != Spin::One {
            return Err(Error::invalid("NV electron must be spin 1"));
        }
        if self.nucleus.spin != Spin::Half {
            return Err(Error::invalid("NV nucleus must be spin 1/2"));
        }
        self.electron.check_electron()
    }

    /// Rows are the NV-frame axes (x, y, z) expressed in crystal coordinates.
    /// z is the molecular axis, y is normal to the plane containing the
    /// crystal z axis and the molecular axis.
    pub fn frame(&self) -> Matrix3<f64> {
        let (t, p) = (self.axis_theta.to_radians(), self.axis_phi.to_radians());
        let z = Vector3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos());
        let y = Vector3::new(-p.sin(), p.cos(), 0.0);
        let x = y.cross(&z);
        Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
    }

    /// Field vector (Gauss) in NV-frame coordinates.
    pub fn field_in_nv_frame(&self, field: &FieldVector) -> Vector3<f64> {
        self.frame() * field.cartesian()
    }

    /// Angle between field and molecular axis (degrees, in [0, 180]) and
    /// azimuth of the field around the axis (degrees).
    pub fn field_angles(&self, field: &FieldVector) -> (f64, f64) {
        let b = self.frame() * field.direction();
        let polar = b.z.clamp(-1.0, 1.0).acos().to_degrees();
        let azimuth = if b.x.abs() < 1e-15 && b.y.abs() < 1e-15 {
            0.0
        } else {
            b.y.atan2(b.x).to_degrees()
        };
        (polar, azimuth)
    }
}

/// Position of an X defect relative to the NV: distance in nm, polar and
/// azimuthal angles (degrees) in the NV frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipolarGeometry {
    pub r: f64,
    pub zeta: f64,
    pub xi: f64,
}

impl DipolarGeometry {
    pub fn new(r: f64, zeta: f64, xi: f64) -> Result<Self> {
        if !(r > 0.0) {
            return Err(Error::invalid(format!("distance must be positive, got {r}")));
        }
        Ok(Self { r, zeta, xi })
    }

    pub fn unit(&self) -> Vector3<f64> {
        let (z, x) = (self.zeta.to_radians(), self.xi.to_radians());
        Vector3::new(z.sin() * x.cos(), z.sin() * x.sin(), z.cos())
    }

    /// Cartesian position in nm, NV frame.
    pub fn position(&self) -> Vector3<f64> {
        self.unit() * self.r
    }

    pub fn from_position(p: &Vector3<f64>) -> Result<Self> {
        let r = p.norm();
        let zeta = (p.z / r).clamp(-1.0, 1.0).acos().to_degrees();
        let xi = p.y.atan2(p.x).to_degrees().rem_euclid(360.0);
        Self::new(r, zeta, xi)
    }
}

/// Electron spin 1/2 hyperfine-coupled to a nuclear spin 1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XDefectSpec {
    pub label: String,
    pub hyperfine: HyperfineTensor,
    pub geometry: DipolarGeometry,
    #[serde(default = "SpinSpecies::free_electron")]
    pub electron: SpinSpecies,
    #[serde(default = "default_x_nucleus")]
    pub nucleus: SpinSpecies,
}

fn default_x_nucleus() -> SpinSpecies {
    SpinSpecies::new(Spin::Half, 0.0, "n")
}

impl XDefectSpec {
    pub fn new(label: impl Into<String>, hyperfine: HyperfineTensor, geometry: DipolarGeometry) -> Self {
        Self {
            label: label.into(),
            hyperfine,
            geometry,
            electron: SpinSpecies::free_electron(),
            nucleus: default_x_nucleus(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.electron.spin != Spin::Half || self.nucleus.spin != Spin::Half {
            return Err(Error::invalid(format!(
                "defect `{}`: electron and nucleus must both be spin 1/2",
                self.label
            )));
        }
        self.electron.check_electron()?;
        if !(self.geometry.r > 0.0) {
            return Err(Error::invalid(format!("defect `{}`: r must be > 0", self.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SpinSystemSpec {
    #[serde(default)]
    pub nv: NvSpec,
    #[serde(default)]
    pub defects: Vec<XDefectSpec>,
}

impl SpinSystemSpec {
    pub fn validate(&self) -> Result<()> {
        self.nv.validate()?;
        let mut seen = BTreeSet::new();
        for d in &self.defects {
            d.validate()?;
            if !seen.insert(d.label.as_str()) {
                return Err(Error::invalid(format!("duplicate defect label `{}`", d.label)));
            }
        }
        Ok(())
    }

    pub fn defect(&self, label: &str) -> Option<&XDefectSpec> {
        self.defects.iter().find(|d| d.label == label)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The two defects characterized in the reference measurement, with
    /// placeholder positions at the fitted distances.
    pub fn reference() -> Self {
        Self {
            nv: NvSpec::default(),
            defects: vec![
                XDefectSpec::new(
                    "X1",
                    HyperfineTensor::axial(17.2, 29.4, 0.0, 87.0),
                    DipolarGeometry { r: 9.23, zeta: 40.0, xi: 30.0 },
                ),
                XDefectSpec::new(
                    "X2",
                    HyperfineTensor::axial(1.6, 11.2, 45.0, 66.0),
                    DipolarGeometry { r: 6.58, zeta: 70.0, xi: 120.0 },
                ),
            ],
        }
    }
}
