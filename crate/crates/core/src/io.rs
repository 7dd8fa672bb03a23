//! CSV readers and writers for observation sets and simulation records.
//!
//! Every file has a header row. Floats are written in shortest round-trip
//! form, so output is byte-identical across runs.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dipolar::{DipolarObservation, ProbabilityMap};
use crate::error::{Error, Result};
use crate::hyperfine::HyperfineObservation;
use crate::spin_model::FieldVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperfineRow {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub b0_gauss: f64,
    pub splitting_mhz: f64,
    pub sigma_mhz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DipolarRow {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub b0_gauss: f64,
    pub coupling_khz: f64,
    pub sigma_khz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t_us: f64,
    pub signal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseCycleRow {
    pub n: usize,
    pub signal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub x_nm: f64,
    pub y_nm: f64,
    pub z_nm: f64,
    pub weight: f64,
}

pub fn read_rows<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    if rows.is_empty() {
        return Err(Error::InsufficientData("CSV file has no data rows".into()));
    }
    Ok(rows)
}

pub fn write_rows<T: Serialize, W: Write>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn field(theta: f64, phi: f64, b0: f64) -> Result<FieldVector> {
    FieldVector::new(b0, theta, phi)
}

pub fn read_hyperfine<R: Read>(reader: R) -> Result<Vec<HyperfineObservation>> {
    read_rows::<HyperfineRow, _>(reader)?
        .into_iter()
        .map(|r| HyperfineObservation::new(field(r.theta_deg, r.phi_deg, r.b0_gauss)?, r.splitting_mhz, r.sigma_mhz))
        .collect()
}

pub fn load_hyperfine(path: impl AsRef<Path>) -> Result<Vec<HyperfineObservation>> {
    read_hyperfine(std::fs::File::open(path)?)
}

pub fn write_hyperfine<W: Write>(writer: W, obs: &[HyperfineObservation]) -> Result<()> {
    let rows: Vec<HyperfineRow> = obs
        .iter()
        .map(|o| HyperfineRow {
            theta_deg: o.field.theta,
            phi_deg: o.field.phi,
            b0_gauss: o.field.b0,
            splitting_mhz: o.splitting,
            sigma_mhz: o.sigma,
        })
        .collect();
    write_rows(writer, &rows)
}

pub fn read_dipolar<R: Read>(reader: R) -> Result<Vec<DipolarObservation>> {
    read_rows::<DipolarRow, _>(reader)?
        .into_iter()
        .map(|r| DipolarObservation::new(field(r.theta_deg, r.phi_deg, r.b0_gauss)?, r.coupling_khz, r.sigma_khz))
        .collect()
}

pub fn load_dipolar(path: impl AsRef<Path>) -> Result<Vec<DipolarObservation>> {
    read_dipolar(std::fs::File::open(path)?)
}

pub fn write_dipolar<W: Write>(writer: W, obs: &[DipolarObservation]) -> Result<()> {
    let rows: Vec<DipolarRow> = obs
        .iter()
        .map(|o| DipolarRow {
            theta_deg: o.field.theta,
            phi_deg: o.field.phi,
            b0_gauss: o.field.b0,
            coupling_khz: o.coupling,
            sigma_khz: o.sigma,
        })
        .collect();
    write_rows(writer, &rows)
}

pub fn read_trace<R: Read>(reader: R) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(read_rows::<TraceRow, _>(reader)?.into_iter().map(|r| (r.t_us, r.signal)).unzip())
}

pub fn write_trace<W: Write>(writer: W, t: &[f64], y: &[f64]) -> Result<()> {
    let rows: Vec<TraceRow> = t.iter().zip(y).map(|(&t_us, &signal)| TraceRow { t_us, signal }).collect();
    write_rows(writer, &rows)
}

pub fn write_phase_cycle<W: Write>(writer: W, signal: &[f64]) -> Result<()> {
    let rows: Vec<PhaseCycleRow> = signal.iter().enumerate().map(|(n, &s)| PhaseCycleRow { n, signal: s }).collect();
    write_rows(writer, &rows)
}

pub fn read_phase_cycle<R: Read>(reader: R) -> Result<Vec<f64>> {
    let rows = read_rows::<PhaseCycleRow, _>(reader)?;
    if rows.iter().enumerate().any(|(k, r)| r.n != k) {
        return Err(Error::invalid("phase-cycle rows must be n = 0, 1, 2, …"));
    }
    Ok(rows.into_iter().map(|r| r.signal).collect())
}

/// Cells whose weight is at least `rel_threshold` times the largest weight,
/// in index order.
pub fn map_rows(map: &ProbabilityMap, rel_threshold: f64) -> Vec<MapRow> {
    let wmax = map.values.iter().copied().fold(0.0, f64::max);
    map.values
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0 && w >= rel_threshold * wmax)
        .map(|(i, &w)| {
            let c = map.center(i);
            MapRow {
                x_nm: c.x,
                y_nm: c.y,
                z_nm: c.z,
                weight: w,
            }
        })
        .collect()
}

pub fn write_map<W: Write>(writer: W, map: &ProbabilityMap, rel_threshold: f64) -> Result<()> {
    write_rows(writer, &map_rows(map, rel_threshold))
}
