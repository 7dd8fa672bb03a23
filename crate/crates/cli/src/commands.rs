use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::json;
use spinforge::dipolar::{locate as locate_defect, probability_map, GeometryFit};
use spinforge::field_solver::{nv_resonance_frequency, simulate_eseem, solve_field, DEFAULT_DWELL, DEFAULT_NPOINTS};
use spinforge::hyperfine::{compare_models, fit_hyperfine, hyperfine_full, tensor_from_fit, ModelComparison, TensorModel};
use spinforge::io;
use spinforge::pulse::{
    apply_gate, coherence_and_fidelity, fit_lorentzians, prepare_state, run_phase_cycle_from, sedor_lines, sedor_spectrum,
    CoherenceReport, DensityState, LorentzianFit, PulseSequence, SedorLine, SinusoidFit,
};
use spinforge::spin_model::THETA_NV;
use spinforge::synth::{self, TwoToneSpec};
use spinforge::{Error, FieldSolution, FieldVector, FitResult, Manifold, Spectrum};

use crate::config::{require_file, required, ModelChoice, SynthKind};
use crate::svg::{self, Plot, Series};
use crate::{CliError, Context, Outcome};

/// Cells a map may spread over before the position counts as unconstrained.
const SPREAD_CELLS: f64 = 1000.0;

fn ac_normalized(s: &Spectrum) -> Vec<(f64, f64)> {
    let peak = s.amplitudes.iter().skip(1).copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    s.frequencies.iter().zip(&s.amplitudes).skip(1).map(|(&f, &a)| (f, a * scale)).collect()
}

#[derive(Serialize)]
struct FieldSolveResult {
    resonance_mhz: f64,
    solution: FieldSolution,
    /// NV resonance predicted at the solution, MHz.
    predicted_resonance_mhz: f64,
}

pub fn field_solve(ctx: &Context) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.field_solve;
    let path = required(&c.spectrum, "spectrum (--spectrum)")?;
    let resonance = required(&c.resonance, "resonance (--resonance)")?;
    require_file(&path)?;
    let nv = ctx.cfg.system()?.nv;
    let measured = Spectrum::load_csv(&path)?;
    let solution = solve_field(&nv, resonance, &measured, &c.options)?;

    let (dwell, n) = measured.sampling().unwrap_or((DEFAULT_DWELL, DEFAULT_NPOINTS));
    let sim = simulate_eseem(&nv, &solution.field, dwell, n)?;
    let plot = Plot::new(
        format!("ESEEM at B0 = {:.2} G, theta = {:.2} deg", solution.field.b0, solution.field.theta),
        "frequency (MHz)",
        "amplitude (normalized)",
    )
    .with(Series::Line { points: ac_normalized(&measured), color: svg::BLUE, label: "measured".into() })
    .with(Series::Line { points: ac_normalized(&sim), color: svg::ORANGE, label: "simulated".into() });
    ctx.write("field_overlay.svg", &plot.render())?;

    let predicted = nv_resonance_frequency(&nv, &solution.field, c.options.curve.manifold)?;
    Outcome::ok(FieldSolveResult {
        resonance_mhz: resonance,
        solution,
        predicted_resonance_mhz: predicted,
    })
}

#[derive(Serialize)]
struct HyperfineResult {
    observations: usize,
    fit: FitResult,
    /// Present when both models were fitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    alternative: Option<FitResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<ModelComparison>,
}

pub fn hyperfine_fit(ctx: &Context) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.hyperfine_fit;
    let path = required(&c.data, "data (--data)")?;
    require_file(&path)?;
    let data = io::load_hyperfine(&path)?;
    let axial = fit_hyperfine(&data, TensorModel::Axial, None)?;
    let (fit, alternative, comparison) = match c.model {
        ModelChoice::Axial => (axial, None, None),
        ModelChoice::Full => {
            let full = fit_hyperfine(&data, TensorModel::Full, None)?;
            let cmp = compare_models(&data, &[full.clone(), axial.clone()])?;
            (full, Some(axial), Some(cmp))
        }
    };

    let tensor = tensor_from_fit(&fit)?;
    let idx = |k: usize| k as f64;
    let mut plot = Plot::new("hyperfine splitting", "observation", "splitting (MHz)")
        .with(Series::ErrorBars {
            points: data.iter().enumerate().map(|(k, o)| (idx(k), o.splitting, o.sigma)).collect(),
            color: svg::BLUE,
            label: "data".into(),
        })
        .with(Series::Line {
            points: data.iter().enumerate().map(|(k, o)| (idx(k), hyperfine_full(&tensor, &o.field))).collect(),
            color: svg::ORANGE,
            label: format!("{} model", fit.model.name()),
        });
    if let Some(alt) = &alternative {
        let t = tensor_from_fit(alt)?;
        plot = plot.with(Series::Line {
            points: data.iter().enumerate().map(|(k, o)| (idx(k), hyperfine_full(&t, &o.field))).collect(),
            color: svg::GREEN,
            label: format!("{} model", alt.model.name()),
        });
    }
    ctx.write("hyperfine_fit.svg", &plot.render())?;
    Outcome::ok(HyperfineResult {
        observations: data.len(),
        fit,
        alternative,
        comparison,
    })
}

#[derive(Serialize)]
struct MapSummary {
    half_width_nm: f64,
    resolution_nm: f64,
    cells_per_axis: usize,
    chi2_min: f64,
    /// Center of the most likely cell, nm.
    argmax: [f64; 3],
    mode: [f64; 3],
    effective_cells: f64,
    csv_rows: usize,
}

#[derive(Serialize)]
struct LocateResult {
    observations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    geometry: Option<GeometryFit>,
    map: MapSummary,
}

/// Sums the map over one axis; the result is row-major over the other two.
fn projection(values: &[f64], n: usize, drop: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                let v = values[(ix * n + iy) * n + iz];
                let k = match drop {
                    0 => iy * n + iz,
                    1 => ix * n + iz,
                    _ => ix * n + iy,
                };
                out[k] += v;
            }
        }
    }
    out
}

pub fn locate(ctx: &Context) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.locate;
    if !(c.resolution > 0.0) || !c.resolution.is_finite() {
        return Err(CliError::input(format!("resolution must be > 0, got {}", c.resolution)));
    }
    let path = required(&c.data, "data (--data)")?;
    require_file(&path)?;
    let nv = ctx.cfg.system()?.nv;
    let data = io::load_dipolar(&path)?;
    let map = probability_map(&data, &nv, c.half_width, c.resolution)?;

    let mut warnings = Vec::new();
    let mut code = 0;
    let geometry = match locate_defect(&data, &nv) {
        Ok(g) => Some(g),
        Err(e @ (Error::InsufficientData(_) | Error::RankDeficient(_) | Error::DegenerateGeometry(_))) => {
            warnings.push(format!("degenerate map: {e}"));
            code = 2;
            None
        }
        Err(e) => return Err(e.into()),
    };
    let spread = map.effective_cells();
    if spread > SPREAD_CELLS {
        warnings.push(format!("map spreads over {spread:.0} cells; position is poorly constrained"));
        code = 2;
    }
    if let Some(g) = &geometry {
        if !g.equivalent.is_empty() {
            warnings.push(format!("{} other geometries fit equally well", g.equivalent.len()));
        }
    }

    let csv_rows = io::map_rows(&map, c.csv_threshold);
    io::write_rows(ctx.create("locate_map.csv")?, &csv_rows)?;
    let n = map.cells;
    let (lo, hi) = (-map.half_width, map.half_width);
    for (drop, name, xl, yl) in [(2, "xy", "x (nm)", "y (nm)"), (1, "xz", "x (nm)", "z (nm)"), (0, "yz", "y (nm)", "z (nm)")] {
        let svg = svg::heatmap(&format!("marginal probability, {name} plane"), xl, yl, (lo, hi, lo, hi), n, n, &projection(&map.values, n, drop));
        ctx.write(&format!("locate_{name}.svg"), &svg)?;
    }

    let a = map.center(map.argmax());
    let result = LocateResult {
        observations: data.len(),
        geometry,
        map: MapSummary {
            half_width_nm: map.half_width,
            resolution_nm: map.resolution,
            cells_per_axis: n,
            chi2_min: map.chi2_min,
            argmax: [a.x, a.y, a.z],
            mode: [map.mode.x, map.mode.y, map.mode.z],
            effective_cells: spread,
            csv_rows: csv_rows.len(),
        },
    };
    let mut o = Outcome::ok(result)?;
    o.code = code;
    o.warnings = warnings;
    Ok(o)
}

#[derive(Serialize)]
struct DefectSummary {
    defect: String,
    /// Weighted mean line frequency, MHz.
    center_mhz: f64,
    /// Gap between the two strongest lines, MHz.
    splitting_mhz: f64,
    /// Free-electron resonance γB0 of the defect, MHz.
    electron_larmor_mhz: f64,
}

#[derive(Serialize)]
struct SedorResult {
    field: FieldVector,
    linewidth_khz: f64,
    lines: Vec<SedorLine>,
    defects: Vec<DefectSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lorentzian_fit: Option<LorentzianFit>,
}

pub fn sedor_sim(ctx: &Context) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.sedor;
    let system = ctx.cfg.system()?;
    let field = FieldVector::new(c.b0, c.theta, c.phi)?;
    if !(c.probe_step > 0.0) {
        return Err(CliError::input("probe_step must be > 0"));
    }
    let lines = sedor_lines(&system, &field)?;
    if lines.is_empty() {
        return Err(CliError::input("spin system has no X defects"));
    }
    let start = c.probe_start.unwrap_or(lines[0].frequency - 2.0);
    let stop = c.probe_stop.unwrap_or(lines[lines.len() - 1].frequency + 2.0);
    if !(stop > start) {
        return Err(CliError::input("probe window is empty"));
    }
    let n = ((stop - start) / c.probe_step).floor() as usize + 1;
    let probe: Vec<f64> = (0..n).map(|k| start + k as f64 * c.probe_step).collect();
    let spectrum = sedor_spectrum(&system, &field, &probe, c.linewidth)?;
    spectrum.write_csv(ctx.create("sedor_spectrum.csv")?)?;

    let mut defects = Vec::new();
    for d in &system.defects {
        let mine: Vec<&SedorLine> = lines.iter().filter(|l| l.defect == d.label).collect();
        if mine.is_empty() {
            continue;
        }
        let center = mine.iter().map(|l| l.weight * l.frequency).sum::<f64>() / mine.iter().map(|l| l.weight).sum::<f64>();
        let mut strong = mine.clone();
        strong.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.frequency.total_cmp(&b.frequency)));
        let splitting = if strong.len() > 1 { (strong[0].frequency - strong[1].frequency).abs() } else { 0.0 };
        defects.push(DefectSummary {
            defect: d.label.clone(),
            center_mhz: center,
            splitting_mhz: splitting,
            electron_larmor_mhz: d.electron.gyro * c.b0,
        });
    }

    let mut warnings = Vec::new();
    let resolved = lines.iter().filter(|l| l.weight >= 0.05).count();
    let lorentzian_fit = match fit_lorentzians(&spectrum, resolved) {
        Ok(f) => Some(f),
        Err(e) => {
            warnings.push(format!("Lorentzian fit skipped: {e}"));
            None
        }
    };

    let peak = spectrum.amplitudes.iter().copied().fold(0.0, f64::max).max(1e-300);
    let plot = Plot::new(format!("SEDOR at B0 = {:.1} G", c.b0), "probe frequency (MHz)", "response")
        .with(Series::Line {
            points: spectrum.frequencies.iter().zip(&spectrum.amplitudes).map(|(&f, &a)| (f, a)).collect(),
            color: svg::BLUE,
            label: "spectrum".into(),
        })
        .with(Series::Sticks {
            points: lines.iter().map(|l| (l.frequency, l.weight.min(peak))).collect(),
            color: svg::GREY,
            label: "transitions".into(),
        });
    ctx.write("sedor_spectrum.svg", &plot.render())?;

    let mut o = Outcome::ok(SedorResult {
        field,
        linewidth_khz: c.linewidth,
        lines,
        defects,
        lorentzian_fit,
    })?;
    o.warnings = warnings;
    Ok(o)
}

#[derive(Serialize)]
struct GhzResult {
    n_reps: usize,
    prepared_coherence: f64,
    prepared_fidelity: f64,
    fit: SinusoidFit,
    /// Amplitude at each rate index 0..=8 (units of π/10 per step).
    amplitudes: BTreeMap<String, f64>,
    /// Largest amplitude away from the three-spin rate.
    leakage: f64,
    report: CoherenceReport,
}

pub fn ghz_sim(ctx: &Context) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.ghz;
    let prepared = match &c.sequence {
        Some(path) => {
            require_file(path)?;
            let seq = PulseSequence::from_json(&std::fs::read_to_string(path)?)?;
            apply_gate(&DensityState::maximally_mixed(), &seq, &c.protocol.couplings, Some(&c.errors))?
        }
        None => prepare_state(&c.protocol, &c.errors)?,
    };
    let r = run_phase_cycle_from(&c.protocol, &c.errors, &prepared)?;
    let report = coherence_and_fidelity(&r.fit, Some(&prepared));
    io::write_phase_cycle(ctx.create("ghz_signal.csv")?, &r.signal)?;

    let n = r.signal.len();
    let fine: Vec<(f64, f64)> = (0..=(n - 1) * 8).map(|k| k as f64 / 8.0).map(|x| (x, r.fit.eval(x))).collect();
    let plot = Plot::new("phase-cycled NV signal", "repetition", "<Z_NV>")
        .with(Series::Markers {
            points: r.signal.iter().enumerate().map(|(k, &s)| (k as f64, s)).collect(),
            color: svg::BLUE,
            label: "simulated".into(),
        })
        .with(Series::Line { points: fine, color: svg::ORANGE, label: "sinusoid fit".into() });
    ctx.write("ghz_signal.svg", &plot.render())?;

    let amplitudes = r.fit.components.iter().map(|c| (format!("{}", c.index), c.amplitude)).collect();
    Outcome::ok(GhzResult {
        n_reps: n,
        prepared_coherence: r.prepared_coherence,
        prepared_fidelity: r.prepared_fidelity,
        leakage: r.fit.max_other(8),
        fit: r.fit,
        amplitudes,
        report,
    })
}

fn noise_seed(ctx: &Context, noise: f64) -> Result<Option<u64>, CliError> {
    if noise < 0.0 || !noise.is_finite() {
        return Err(CliError::input(format!("noise must be finite and >= 0, got {noise}")));
    }
    if noise > 0.0 && ctx.seed.is_none() {
        return Err(CliError::input("synthetic noise requires --seed"));
    }
    Ok(if noise > 0.0 { ctx.seed } else { None })
}

#[derive(Serialize)]
struct SynthResult {
    kind: SynthKind,
    file: String,
    rows: usize,
    truth: serde_json::Value,
}

pub fn synth(ctx: &Context) -> Result<Outcome, CliError> {
    let c = &ctx.cfg.synth;
    let system = ctx.cfg.system()?;
    let defect = || {
        system
            .defect(&c.defect)
            .cloned()
            .ok_or_else(|| CliError::input(format!("no defect `{}` in the spin system", c.defect)))
    };
    let mut warnings = Vec::new();
    let (file, rows, truth) = match c.kind {
        SynthKind::Hyperfine => {
            let seed = noise_seed(ctx, c.noise)?;
            let x = defect()?;
            let fields = synth::hyperfine_sweep_fields(c.b0, c.third_plane);
            // noiseless files still carry a nominal error bar; no seed means no draws
            let sigma = if c.noise > 0.0 { c.noise } else { 0.2 };
            let obs = synth::hyperfine_observations(&fields, |f| hyperfine_full(&x.hyperfine, f), sigma, seed)?;
            io::write_hyperfine(ctx.create("hyperfine.csv")?, &obs)?;
            ("hyperfine.csv", obs.len(), json!({ "defect": x.label, "hyperfine": x.hyperfine }))
        }
        SynthKind::Dipolar => {
            let seed = noise_seed(ctx, c.noise)?;
            let x = defect()?;
            let fields = synth::dipolar_sweep_fields(c.b0);
            let obs = synth::dipolar_observations(&x.geometry, &system.nv, &fields, c.noise, seed)?;
            io::write_dipolar(ctx.create("dipolar.csv")?, &obs)?;
            ("dipolar.csv", obs.len(), json!({ "defect": x.label, "geometry": x.geometry }))
        }
        SynthKind::Eseem => {
            if c.noise > 0.0 {
                warnings.push("eseem spectra are noiseless; noise ignored".to_string());
            }
            let field = FieldVector::new(c.b0, THETA_NV + c.tilt, 0.0)?;
            let s = simulate_eseem(&system.nv, &field, DEFAULT_DWELL, DEFAULT_NPOINTS)?;
            s.write_csv(ctx.create("eseem.csv")?)?;
            let resonance = nv_resonance_frequency(&system.nv, &field, Manifold::Minus)?;
            ("eseem.csv", s.len(), json!({ "field": field, "resonance_mhz": resonance }))
        }
        SynthKind::TwoTone => {
            let seed = noise_seed(ctx, c.noise)?;
            let t = &c.two_tone;
            if !(t.dwell > 0.0) || t.points < 8 {
                return Err(CliError::input("two-tone trace needs dwell > 0 and at least 8 points"));
            }
            let spec = TwoToneSpec {
                amplitude: t.amplitude,
                slow_khz: t.slow_khz,
                slow_phase: t.slow_phase,
                depth: t.depth,
                fast_mhz: t.fast_mhz,
                fast_phase: t.fast_phase,
                offset: t.offset,
            };
            let (ts, ys) = synth::two_tone_trace(&spec, t.dwell, t.points, c.noise, seed.unwrap_or(0));
            io::write_trace(ctx.create("two_tone.csv")?, &ts, &ys)?;
            ("two_tone.csv", ts.len(), serde_json::to_value(t).map_err(|e| CliError::input(e.to_string()))?)
        }
    };
    let mut o = Outcome::ok(SynthResult {
        kind: c.kind,
        file: file.into(),
        rows,
        truth,
    })?;
    o.warnings = warnings;
    Ok(o)
}
