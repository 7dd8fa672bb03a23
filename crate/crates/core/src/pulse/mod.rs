//! Qubit-layer density-matrix simulation of the control protocol: optical
//! reset, Hartmann–Hahn exchange, recoupled spin-echo gates, GHZ phase
//! cycling and SEDOR line shapes.
//!
//! The register holds the NV (restricted to m_s = 0, −1) and the two X
//! electrons. X nuclei are traced out: pulses on an X spin are assumed to
//! address each hyperfine line in turn with the same rotation, which acts
//! as a single electron rotation. Pulses are instantaneous.

mod protocol;
mod sedor;
mod sequence;
mod state;

pub use protocol::*;
pub use sedor::*;
pub use sequence::*;
pub use state::*;
