//! Frequency-domain records and the helpers that build and compare them.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpectrumMeta {
    /// Sampling rate of the underlying time record, MHz (1/dwell).
    pub sample_rate: Option<f64>,
    /// Number of time-domain samples.
    pub record_length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// MHz, strictly increasing.
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
    #[serde(default)]
    pub meta: SpectrumMeta,
}

impl Spectrum {
    pub fn new(frequencies: Vec<f64>, amplitudes: Vec<f64>, meta: SpectrumMeta) -> Result<Self> {
        if frequencies.len() != amplitudes.len() {
            return Err(Error::Dimension(format!(
                "{} frequencies vs {} amplitudes",
                frequencies.len(),
                amplitudes.len()
            )));
        }
        if frequencies.iter().any(|f| !f.is_finite()) || frequencies.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("spectrum frequencies must be finite and strictly increasing"));
        }
        if amplitudes.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid("spectrum amplitudes must be finite and nonnegative"));
        }
        Ok(Self {
            frequencies,
            amplitudes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn bin_width(&self) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        (self.frequencies[self.len() - 1] - self.frequencies[0]) / (self.len() - 1) as f64
    }

    /// Dwell time (µs) and record length implied by the metadata, or by the
    /// frequency grid of a one-sided FFT spectrum when metadata is missing.
    pub fn sampling(&self) -> Option<(f64, usize)> {
        match (self.meta.sample_rate, self.meta.record_length) {
            (Some(fs), Some(n)) if fs > 0.0 && n > 0 => Some((1.0 / fs, n)),
            _ => {
                let m = self.len();
                let f_last = *self.frequencies.last()?;
                if m < 2 || self.frequencies[0] != 0.0 || f_last <= 0.0 {
                    return None;
                }
                let n = 2 * (m - 1);
                Some((1.0 / (2.0 * f_last), n))
            }
        }
    }

    /// Linear interpolation at `f`, zero outside the grid.
    pub fn interpolate(&self, f: f64) -> f64 {
        let fr = &self.frequencies;
        if fr.is_empty() || f < fr[0] || f > fr[fr.len() - 1] {
            return 0.0;
        }
        let k = fr.partition_point(|x| *x <= f);
        if k == 0 {
            return self.amplitudes[0];
        }
        if k >= fr.len() {
            return self.amplitudes[fr.len() - 1];
        }
        let (f0, f1) = (fr[k - 1], fr[k]);
        let t = (f - f0) / (f1 - f0);
        self.amplitudes[k - 1] * (1.0 - t) + self.amplitudes[k] * t
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut freqs = Vec::new();
        let mut amps = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::invalid(format!("spectrum row {}: need 2 columns", line + 1)));
            }
            let (f, a) = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
            match (f, a) {
                (Ok(f), Ok(a)) => {
                    freqs.push(f);
                    amps.push(a);
                }
                // tolerate a header row
                _ if line == 0 => continue,
                _ => return Err(Error::invalid(format!("spectrum row {}: not numeric", line + 1))),
            }
        }
        if freqs.is_empty() {
            return Err(Error::InsufficientData("spectrum file has no rows".into()));
        }
        Self::new(freqs, amps, SpectrumMeta::default())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frequency_mhz", "amplitude"])?;
        for (f, a) in self.frequencies.iter().zip(&self.amplitudes) {
            w.write_record([format!("{f}"), format!("{a}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One-sided amplitude spectrum of a real record sampled every `dwell` µs.
/// Bin k sits at k/(N·dwell) MHz; DC is |X₀|/N and every other bin 2|X_k|/N.
pub fn amplitude_spectrum(samples: &[f64], dwell: f64) -> Result<Spectrum> {
    let n = samples.len();
    if n < 2 || !(dwell > 0.0) {
        return Err(Error::invalid("need at least 2 samples and a positive dwell"));
    }
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let m = n / 2 + 1;
    let nf = n as f64;
    let freqs = (0..m).map(|k| k as f64 / (nf * dwell)).collect();
    let amps = (0..m)
        .map(|k| {
            let a = buf[k].norm() / nf;
            if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
                a
            } else {
                2.0 * a
            }
        })
        .collect();
    Spectrum::new(
        freqs,
        amps,
        SpectrumMeta {
            sample_rate: Some(1.0 / dwell),
            record_length: Some(n),
        },
    )
}

/// Frequency at which a real tone `f` appears after sampling at `fs`
/// (reflection about multiples of the Nyquist frequency).
pub fn aliased_frequency(f: f64, fs: f64) -> f64 {
    let r = f.abs().rem_euclid(fs);
    if r > fs / 2.0 {
        fs - r
    } else {
        r
    }
}

/// Pearson correlation between two equally long vectors. Zero when either
/// has no variance.
pub fn normalized_cross_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale = (saa * sbb).sqrt();
    let flat = |v: f64, xs: &[f64]| v <= 1e-28 * xs.iter().map(|x| x * x).sum::<f64>();
    if scale <= 1e-300 || flat(saa, a) || flat(sbb, b) {
        return 0.0;
    }
    (sab / scale).clamp(-1.0, 1.0)
}

/// Indices of strict local maxima above `threshold`, strongest first.
pub fn find_peaks(amplitudes: &[f64], threshold: f64) -> Vec<usize> {
    let n = amplitudes.len();
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&k| {
            let a = amplitudes[k];
            let left = if k == 0 { f64::NEG_INFINITY } else { amplitudes[k - 1] };
            let right = if k + 1 == n { f64::NEG_INFINITY } else { amplitudes[k + 1] };
            a > threshold && a > left && a >= right
        })
        .collect();
    peaks.sort_by(|&i, &j| amplitudes[j].total_cmp(&amplitudes[i]).then(i.cmp(&j)));
    peaks
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn tone(f: f64, dwell: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| (TAU * f * k as f64 * dwell).cos()).collect()
    }

    #[test]
    fn bin_centred_tone_has_unit_amplitude() {
        let (dwell, n) = (0.1, 512);
        let f = 37.0 / (n as f64 * dwell);
        let s = amplitude_spectrum(&tone(f, dwell, n), dwell).unwrap();
        let k = find_peaks(&s.amplitudes, 0.1)[0];
        assert_eq!(k, 37);
        assert!((s.amplitudes[k] - 1.0).abs() < 1e-12);
        assert_eq!(s.sampling(), Some((dwell, n)));
    }

    #[test]
    fn aliasing_reflection_identity() {
        let (dwell, n) = (0.1, 512);
        let fs = 1.0 / dwell;
        let df = fs / n as f64;
        // above the 5 MHz Nyquist limit, folds to 2·5 − f
        let f_true = 6.6 - 6.6 % df + 3.0 * df;
        let s = amplitude_spectrum(&tone(f_true, dwell, n), dwell).unwrap();
        let k = find_peaks(&s.amplitudes, 0.1)[0];
        let expect = 2.0 * (fs / 2.0) - f_true;
        assert!((s.frequencies[k] - expect).abs() < 1e-9);
        assert!((aliased_frequency(f_true, fs) - expect).abs() < 1e-12);
    }

    #[test]
    fn ncc_properties() {
        let a = [1.0, 3.0, 2.0, 5.0];
        let b: Vec<f64> = a.iter().map(|x| 4.0 * x + 1.0).collect();
        assert!((normalized_cross_correlation(&a, &b) - 1.0).abs() < 1e-12);
        assert_eq!(normalized_cross_correlation(&a, &[2.0; 4]), 0.0);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Spectrum::new(vec![0.0, 0.0], vec![1.0, 1.0], SpectrumMeta::default()).is_err());
        assert!(Spectrum::new(vec![0.0, 1.0], vec![1.0, f64::NAN], SpectrumMeta::default()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = Spectrum::new(vec![0.0, 0.5, 1.0], vec![0.1, 0.7, 0.2], SpectrumMeta::default()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = Spectrum::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.frequencies, s.frequencies);
        assert_eq!(back.amplitudes, s.amplitudes);
    }
}
