use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, identity, involutory_exp, pauli, re, CMatrix};

use super::state::{embed, polarize_nv, z_sign, DensityState, Qubit, DIM};

/// Dipolar couplings between the three electrons, kHz (half the shift of
/// one spin's transition when the other flips).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Couplings {
    pub nv_x1: f64,
    pub nv_x2: f64,
    #[serde(default)]
    pub x1_x2: f64,
}

impl Default for Couplings {
    fn default() -> Self {
        Self {
            nv_x1: 40.0,
            nv_x2: 120.0,
            x1_x2: 15.0,
        }
    }
}

impl Couplings {
    pub fn get(&self, a: Qubit, b: Qubit) -> f64 {
        match (a.min(b), a.max(b)) {
            (Qubit::Nv, Qubit::X1) => self.nv_x1,
            (Qubit::Nv, Qubit::X2) => self.nv_x2,
            (Qubit::X1, Qubit::X2) => self.x1_x2,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.nv_x1, self.nv_x2, self.x1_x2].iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("couplings must be finite"));
        }
        Ok(())
    }
}

/// Imperfections applied while running a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorModel {
    /// Depolarizing probability on the addressed qubit after every pulse.
    pub depolarizing: f64,
    /// Fractional error on every rotation angle.
    pub over_rotation: f64,
    /// Efficiency of each optical reset of the NV.
    pub polarization_efficiency: f64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self::IDEAL
    }
}

impl ErrorModel {
    pub const IDEAL: ErrorModel = ErrorModel {
        depolarizing: 0.0,
        over_rotation: 0.0,
        polarization_efficiency: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.depolarizing) || !(0.0..=1.0).contains(&self.polarization_efficiency) {
            return Err(Error::invalid("depolarizing and polarization efficiency must lie in [0, 1]"));
        }
        if !self.over_rotation.is_finite() {
            return Err(Error::invalid("over-rotation must be finite"));
        }
        Ok(())
    }
}

/// One step of a control sequence. Targets name a qubit (`NV`, `X1`, `X2`);
/// a pulse on an X spin stands for the same rotation applied to each of its
/// hyperfine lines in series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Element {
    /// Rotation by `angle` degrees about the axis at `phase` degrees from x
    /// in the rotating-frame xy plane.
    Pulse { target: String, phase: f64, angle: f64 },
    /// Free evolution under the dipolar couplings, µs.
    Delay { duration: f64 },
    /// Optical reset of the NV.
    Polarize,
    /// Hartmann–Hahn exchange between the NV and `target`, µs.
    SwapHh { target: String, duration: f64 },
}

impl Element {
    pub fn pulse(target: Qubit, phase: f64, angle: f64) -> Self {
        Element::Pulse {
            target: target.name().into(),
            phase,
            angle,
        }
    }

    pub fn delay(duration: f64) -> Self {
        Element::Delay { duration }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PulseSequence {
    pub elements: Vec<Element>,
}

impl PulseSequence {
    pub fn new(elements: Vec<Element>) -> Self {
        Self { elements }
    }

    pub fn extend(&mut self, other: PulseSequence) {
        self.elements.extend(other.elements);
    }

    /// Checks targets and durations.
    pub fn validate(&self) -> Result<()> {
        for e in &self.elements {
            match e {
                Element::Pulse { target, phase, angle } => {
                    Qubit::parse(target)?;
                    if !phase.is_finite() || !angle.is_finite() {
                        return Err(Error::invalid("pulse phase and angle must be finite"));
                    }
                }
                Element::Delay { duration } => check_duration(*duration)?,
                Element::Polarize => {}
                Element::SwapHh { target, duration } => {
                    if Qubit::parse(target)? == Qubit::Nv {
                        return Err(Error::invalid("swap_hh target must be an X spin"));
                    }
                    check_duration(*duration)?;
                }
            }
        }
        Ok(())
    }

    /// Copy with `offsets[q]` degrees added to the phase of every pulse on
    /// qubit q, in (NV, X1, X2) order.
    pub fn with_phase_offsets(&self, offsets: [f64; 3]) -> Self {
        let elements = self
            .elements
            .iter()
            .map(|e| match e {
                Element::Pulse { target, phase, angle } => {
                    let off = Qubit::parse(target).map(|q| offsets[q.slot()]).unwrap_or(0.0);
                    Element::Pulse {
                        target: target.clone(),
                        phase: phase + off,
                        angle: *angle,
                    }
                }
                other => other.clone(),
            })
            .collect();
        Self { elements }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let seq: Self = serde_json::from_str(s)?;
        seq.validate()?;
        Ok(seq)
    }
}

fn check_duration(d: f64) -> Result<()> {
    if d < 0.0 {
        return Err(Error::NegativeDuration(d));
    }
    if !d.is_finite() {
        return Err(Error::invalid("duration must be finite"));
    }
    Ok(())
}

/// exp(−i θ/2 (cos φ X + sin φ Y)) on qubit `q`, angles in degrees.
pub fn rotation(q: Qubit, phase: f64, angle: f64) -> CMatrix {
    let [x, y, _] = pauli();
    let (p, a) = (phase.to_radians(), angle.to_radians());
    let g = x * re(p.cos()) + y * re(p.sin());
    embed(&involutory_exp(&g, 0.5 * a), q)
}

/// Diagonal propagator of Σ (d_ij/2) Z_i Z_j for `t` µs.
pub fn zz_evolution(couplings: &Couplings, t: f64) -> CMatrix {
    let pairs = [(Qubit::Nv, Qubit::X1), (Qubit::Nv, Qubit::X2), (Qubit::X1, Qubit::X2)];
    let mut u = CMatrix::zeros(DIM, DIM);
    for i in 0..DIM {
        let e: f64 = pairs
            .iter()
            .map(|&(a, b)| 0.5 * couplings.get(a, b) * 1e-3 * z_sign(i, a) * z_sign(i, b))
            .sum();
        let ph = -std::f64::consts::TAU * e * t;
        u[(i, i)] = c(ph.cos(), ph.sin());
    }
    u
}

/// Rotating-frame flip-flop exp(−iπ d t (XX + YY)/2) between the NV and `x`.
/// A full exchange of the pair's polarizations takes 1/(2|d|).
pub fn flip_flop(x: Qubit, d_khz: f64, t: f64) -> CMatrix {
    let theta = PI * d_khz * 1e-3 * t;
    let (nb, xb) = (Qubit::Nv.bit(), x.bit());
    let mut u = identity(DIM);
    for i in 0..DIM {
        // pair the |0 1⟩ and |1 0⟩ states of (NV, x)
        if i & nb == 0 && i & xb != 0 {
            let j = (i | nb) & !xb;
            u[(i, i)] = re(theta.cos());
            u[(j, j)] = re(theta.cos());
            u[(i, j)] = c(0.0, -theta.sin());
            u[(j, i)] = c(0.0, -theta.sin());
        }
    }
    u
}

/// Coherent spin exchange between the NV and `x` under matched driving.
pub fn hartmann_hahn_swap(rho: &DensityState, x: Qubit, d_khz: f64, duration: f64) -> Result<DensityState> {
    check_duration(duration)?;
    if x == Qubit::Nv {
        return Err(Error::invalid("exchange partner must be an X spin"));
    }
    if d_khz == 0.0 || !d_khz.is_finite() {
        return Err(Error::invalid("exchange needs a finite nonzero coupling"));
    }
    Ok(rho.evolve(&flip_flop(x, d_khz, duration)))
}

/// Runs `seq` on `rho`. Delays evolve under all ZZ couplings; pulses are
/// instantaneous rotations.
pub fn apply_gate(
    rho: &DensityState,
    seq: &PulseSequence,
    couplings: &Couplings,
    errors: Option<&ErrorModel>,
) -> Result<DensityState> {
    seq.validate()?;
    couplings.validate()?;
    let em = errors.copied().unwrap_or(ErrorModel::IDEAL);
    em.validate()?;
    let mut s = rho.clone();
    for e in &seq.elements {
        s = match e {
            Element::Pulse { target, phase, angle } => {
                let q = Qubit::parse(target)?;
                let r = s.evolve(&rotation(q, *phase, angle * (1.0 + em.over_rotation)));
                r.depolarize(q, em.depolarizing)
            }
            Element::Delay { duration } => s.evolve(&zz_evolution(couplings, *duration)),
            Element::Polarize => polarize_nv(&s, em.polarization_efficiency)?,
            Element::SwapHh { target, duration } => {
                let q = Qubit::parse(target)?;
                hartmann_hahn_swap(&s, q, couplings.get(Qubit::Nv, q), *duration)?
            }
        };
    }
    Ok(s)
}

/// Recoupled spin-echo CNOT from `control` to `target`.
///
/// Target π/2 about −y, ZZ evolution for 1/(4|d|) split by π pulses on both
/// spins (couplings to the third spin refocus), target π/2 about y and a
/// final target π/2 about ∓x. Implements |0⟩⟨0| ⊗ 1 + |1⟩⟨1| ⊗ (i·s·X) with
/// s = sign(d).
pub fn cnot(control: Qubit, target: Qubit, couplings: &Couplings) -> Result<PulseSequence> {
    if control == target {
        return Err(Error::invalid("control and target must differ"));
    }
    let d = couplings.get(control, target);
    if d == 0.0 || !d.is_finite() {
        return Err(Error::invalid(format!(
            "no coupling between {} and {}",
            control.name(),
            target.name()
        )));
    }
    let half = 1.0 / (8.0 * d.abs() * 1e-3);
    Ok(PulseSequence::new(vec![
        Element::pulse(target, 90.0, -90.0),
        Element::delay(half),
        Element::pulse(control, 0.0, 180.0),
        Element::pulse(target, 0.0, 180.0),
        Element::delay(half),
        Element::pulse(control, 0.0, 180.0),
        Element::pulse(target, 0.0, 180.0),
        Element::pulse(target, 90.0, 90.0),
        Element::pulse(target, 0.0, -90.0 * d.signum()),
    ]))
}

/// NV Hadamard-like π/2 about y followed by CNOTs onto X1 and X2. Takes
/// |000⟩ to (|000⟩ − s₁s₂|111⟩)/√2, with s_k the sign of the NV–X_k coupling.
pub fn entangler(couplings: &Couplings) -> Result<PulseSequence> {
    let mut s = PulseSequence::new(vec![Element::pulse(Qubit::Nv, 90.0, 90.0)]);
    s.extend(cnot(Qubit::Nv, Qubit::X1, couplings)?);
    s.extend(cnot(Qubit::Nv, Qubit::X2, couplings)?);
    Ok(s)
}

/// Maps the GHZ pair back onto NV populations: CNOTs in reverse order, then
/// NV π/2 about −y.
pub fn disentangler(couplings: &Couplings) -> Result<PulseSequence> {
    let mut s = cnot(Qubit::Nv, Qubit::X2, couplings)?;
    s.extend(cnot(Qubit::Nv, Qubit::X1, couplings)?);
    s.elements.push(Element::pulse(Qubit::Nv, 90.0, -90.0));
    Ok(s)
}

/// Storage of `duration` µs with two rounds of π pulses on all spins.
pub fn storage_echo(duration: f64) -> PulseSequence {
    let flip = || Qubit::ALL.map(|q| Element::pulse(q, 0.0, 180.0));
    let mut e = vec![Element::delay(0.25 * duration)];
    e.extend(flip());
    e.push(Element::delay(0.5 * duration));
    e.extend(flip());
    e.push(Element::delay(0.25 * duration));
    PulseSequence::new(e)
}

/// Optical reset and Hartmann–Hahn transfer onto X1 then X2, repeated
/// `rounds` times, ending with an NV reset.
pub fn initialization(couplings: &Couplings, rounds: usize) -> Result<PulseSequence> {
    let mut e = Vec::new();
    for _ in 0..rounds {
        for q in [Qubit::X1, Qubit::X2] {
            let d = couplings.get(Qubit::Nv, q);
            if d == 0.0 || !d.is_finite() {
                return Err(Error::invalid(format!("no NV coupling to {}", q.name())));
            }
            e.push(Element::Polarize);
            e.push(Element::SwapHh {
                target: q.name().into(),
                duration: 1.0 / (2.0 * d.abs() * 1e-3),
            });
        }
    }
    e.push(Element::Polarize);
    Ok(PulseSequence::new(e))
}
