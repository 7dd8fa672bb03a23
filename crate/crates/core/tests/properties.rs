use nalgebra::{Matrix3, SymmetricEigen};
use proptest::prelude::*;
use spinforge::dipolar::{dipolar_analytic, secular_dipolar_numeric, DIPOLAR_CONSTANT_KHZ};
use spinforge::hyperfine::{
    hyperfine_axial, hyperfine_axial_grad, hyperfine_full, hyperfine_full_grad, secular_strength_numeric,
};
use spinforge::linalg::{c, hermitian_deviation, CMatrix};
use spinforge::pulse::*;
use spinforge::spin_model::{
    nv_hamiltonian, tensor_in_crystal_frame, x_defect_hamiltonian, zeeman_hamiltonian, NuclearZeeman, THETA_NV,
};
use spinforge::{DipolarGeometry, EulerAngles, FieldVector, HyperfineTensor, NvSpec, SpinSpecies, XDefectSpec};

fn field() -> impl Strategy<Value = FieldVector> {
    (1.0..500.0f64, 0.0..180.0f64, 0.0..360.0f64).prop_map(|(b, t, p)| FieldVector { b0: b, theta: t, phi: p })
}

fn tensor() -> impl Strategy<Value = HyperfineTensor> {
    (-40.0..40.0f64, -40.0..40.0f64, -40.0..40.0f64, 0.0..360.0f64, 0.0..180.0f64, 0.0..360.0f64)
        .prop_map(|(ax, ay, az, a, b, g)| HyperfineTensor::new(ax, ay, az, EulerAngles::new(a, b, g)))
}

fn sorted_eigs(m: &Matrix3<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(*m).eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn random_state(entries: &[f64]) -> DensityState {
    let mut g = CMatrix::zeros(8, 8);
    for i in 0..8 {
        for j in 0..8 {
            g[(i, j)] = c(entries[2 * (8 * i + j)], entries[2 * (8 * i + j) + 1]);
        }
    }
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityState::new(m / tr).unwrap()
}

fn state() -> impl Strategy<Value = DensityState> {
    prop::collection::vec(-1.0..1.0f64, 128).prop_map(|v| random_state(&v))
}

fn check_channel(rho: &DensityState) -> Result<(), TestCaseError> {
    prop_assert!((rho.trace().re - 1.0).abs() <= 1e-9);
    prop_assert!(rho.trace().im.abs() <= 1e-9);
    prop_assert!(rho.hermitian_deviation() <= 1e-12, "{}", rho.hermitian_deviation());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hamiltonians_are_hermitian(f in field(), t in tensor()) {
        let x = XDefectSpec::new("X", t, DipolarGeometry::new(5.0, 0.0, 0.0).unwrap());
        for inc in [NuclearZeeman::Include, NuclearZeeman::Exclude] {
            prop_assert!(hermitian_deviation(x_defect_hamiltonian(&x, &f, inc).matrix()) <= 1e-12);
            prop_assert!(hermitian_deviation(nv_hamiltonian(&NvSpec::default(), &f, inc).matrix()) <= 1e-12);
        }
    }

    #[test]
    fn x_defect_hamiltonian_is_traceless(f in field(), t in tensor()) {
        let x = XDefectSpec::new("X", t, DipolarGeometry::new(5.0, 0.0, 0.0).unwrap());
        let h = x_defect_hamiltonian(&x, &f, NuclearZeeman::Include);
        // every term is traceless; the sum of diagonal entries is zero up to rounding
        let tol = 8.0 * f64::EPSILON * h.matrix().norm();
        prop_assert!(h.trace().norm() <= tol, "{} > {tol}", h.trace());
    }

    #[test]
    fn zeeman_levels_ignore_direction(b in 0.0..1000.0f64, t1 in 0.0..180.0f64, p1 in 0.0..360.0f64, t2 in 0.0..180.0f64, p2 in 0.0..360.0f64) {
        for s in [SpinSpecies::free_electron(), SpinSpecies::nv_electron(), SpinSpecies::n15()] {
            let e1 = zeeman_hamiltonian(&s, &FieldVector { b0: b, theta: t1, phi: p1 }).eigenvalues().unwrap();
            let e2 = zeeman_hamiltonian(&s, &FieldVector { b0: b, theta: t2, phi: p2 }).eigenvalues().unwrap();
            for (a, b) in e1.iter().zip(&e2) {
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn rotation_preserves_principal_values(t in tensor()) {
        let got = sorted_eigs(&tensor_in_crystal_frame(&t));
        let mut want = vec![t.ax, t.ay, t.az];
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn closed_forms_match_numeric(t in tensor(), f in field()) {
        let n = secular_strength_numeric(&t, &f).unwrap();
        let full = hyperfine_full(&t, &f);
        prop_assert!((full - n).abs() <= 1e-9 * n.max(1e-12), "{full} vs {n}");
        let ax = HyperfineTensor::axial(t.ax, t.az, t.orientation.alpha, t.orientation.beta);
        let n = secular_strength_numeric(&ax, &f).unwrap();
        let a = hyperfine_axial(t.ax, t.az, t.orientation.alpha, t.orientation.beta, &f);
        prop_assert!((a - n).abs() <= 1e-9 * n.max(1e-12), "{a} vs {n}");
    }

    #[test]
    fn axial_full_reduction(p in 0.0..40.0f64, z in 0.0..40.0f64, al in 0.0..360.0f64, be in 0.0..180.0f64, ga in 0.0..360.0f64, f in field()) {
        let a = hyperfine_axial(p, z, al, be, &f);
        let t = HyperfineTensor { ax: p, ay: p, az: z, orientation: EulerAngles { alpha: al, beta: be, gamma: ga } };
        prop_assert!((hyperfine_full(&t, &f) - a).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn axial_symmetries(p in 0.0..40.0f64, z in 0.0..40.0f64, al in 0.0..360.0f64, be in 0.0..180.0f64, f in field(), shift in -720.0..720.0f64) {
        let a = hyperfine_axial(p, z, al, be, &f);
        let wrapped = FieldVector { phi: f.phi + 360.0, ..f };
        prop_assert!((hyperfine_axial(p, z, al, be, &wrapped) - a).abs() <= 1e-12 * a.max(1.0));
        // depends on α and φ only through δ = α − φ
        let moved = FieldVector { phi: f.phi + shift, ..f };
        prop_assert!((hyperfine_axial(p, z, al + shift, be, &moved) - a).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn hyperfine_gradients(t in tensor(), f in field()) {
        prop_assume!(hyperfine_full(&t, &f) > 0.5);
        let (_, g) = hyperfine_full_grad(&t, &f);
        let p = [t.ax, t.ay, t.az, t.orientation.alpha, t.orientation.beta, t.orientation.gamma];
        let eval = |q: &[f64; 6]| hyperfine_full(&HyperfineTensor { ax: q[0], ay: q[1], az: q[2], orientation: EulerAngles { alpha: q[3], beta: q[4], gamma: q[5] } }, &f);
        for k in 0..6 {
            let h = 1e-5;
            let (mut hi, mut lo) = (p, p);
            hi[k] += h;
            lo[k] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            prop_assert!((fd - g[k]).abs() <= 1e-6 * g.iter().fold(1.0f64, |m, v| m.max(v.abs())), "k={k}: {fd} vs {}", g[k]);
        }
        let (_, ga) = hyperfine_axial_grad(t.ax, t.az, t.orientation.alpha, t.orientation.beta, &f);
        let pa = [t.ax, t.az, t.orientation.alpha, t.orientation.beta];
        let eval = |q: &[f64; 4]| hyperfine_axial(q[0], q[1], q[2], q[3], &f);
        for k in 0..4 {
            let h = 1e-5;
            let (mut hi, mut lo) = (pa, pa);
            hi[k] += h;
            lo[k] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            prop_assert!((fd - ga[k]).abs() <= 1e-6 * ga.iter().fold(1.0f64, |m, v| m.max(v.abs())), "k={k}: {fd} vs {}", ga[k]);
        }
    }

    #[test]
    fn dipolar_inverse_cube(r in 0.5..20.0f64, zeta in 0.0..180.0f64, xi in 0.0..360.0f64, tilt in -80.0..80.0f64, lambda in 0.2..5.0f64) {
        let nv = NvSpec::default();
        let g = DipolarGeometry::new(r, zeta, xi).unwrap();
        let gl = DipolarGeometry::new(r * lambda, zeta, xi).unwrap();
        let a = dipolar_analytic(&g, tilt, 150.0, &nv);
        prop_assert!((dipolar_analytic(&gl, tilt, 150.0, &nv) * lambda.powi(3) - a).abs() <= 1e-12 * a.abs().max(1e-300));
        let f = FieldVector { b0: 150.0, theta: THETA_NV + tilt, phi: 0.0 };
        let x = |g| XDefectSpec::new("X", HyperfineTensor::zero(), g);
        let n = secular_dipolar_numeric(&nv, &x(g), &f).unwrap();
        let nl = secular_dipolar_numeric(&nv, &x(gl), &f).unwrap();
        prop_assert!((nl * lambda.powi(3) - n).abs() <= 1e-12 * n.abs().max(1e-300));
    }

    #[test]
    fn dipolar_aligned_reduction(r in 0.5..20.0f64, zeta in 0.0..180.0f64, xi in 0.0..360.0f64) {
        let g = DipolarGeometry::new(r, zeta, xi).unwrap();
        let want = DIPOLAR_CONSTANT_KHZ * (3.0 * zeta.to_radians().cos().powi(2) - 1.0) / (2.0 * r.powi(3));
        let got = dipolar_analytic(&g, 0.0, 171.8, &NvSpec::default());
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-9 * DIPOLAR_CONSTANT_KHZ / r.powi(3)));
    }
}

fn element() -> impl Strategy<Value = Element> {
    let q = prop_oneof![Just(Qubit::Nv), Just(Qubit::X1), Just(Qubit::X2)];
    prop_oneof![
        (q.clone(), 0.0..360.0f64, -360.0..360.0f64).prop_map(|(q, p, a)| Element::pulse(q, p, a)),
        (0.0..20.0f64).prop_map(Element::delay),
        Just(Element::Polarize),
        (prop_oneof![Just(Qubit::X1), Just(Qubit::X2)], 0.0..20.0f64).prop_map(|(q, d)| Element::SwapHh { target: q.name().into(), duration: d }),
    ]
}

fn error_model() -> impl Strategy<Value = ErrorModel> {
    (0.0..0.3f64, -0.2..0.2f64, 0.0..=1.0f64).prop_map(|(d, o, p)| ErrorModel {
        depolarizing: d,
        over_rotation: o,
        polarization_efficiency: p,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn channels_preserve_trace_and_hermiticity(rho in state(), els in prop::collection::vec(element(), 1..12), em in error_model()) {
        let k = Couplings::default();
        let out = apply_gate(&rho, &PulseSequence::new(els), &k, Some(&em)).unwrap();
        check_channel(&out)?;
        prop_assert!(out.min_eigenvalue() >= -1e-9);
    }

    #[test]
    fn single_channels(rho in state(), p in 0.0..=1.0f64, d in -200.0..200.0f64, t in 0.0..50.0f64) {
        prop_assume!(d.abs() > 1e-3);
        for q in Qubit::ALL {
            check_channel(&rho.depolarize(q, p))?;
        }
        check_channel(&polarize_nv(&rho, p).unwrap())?;
        check_channel(&hartmann_hahn_swap(&rho, Qubit::X2, d, t).unwrap())?;
    }

    #[test]
    fn ideal_sequences_preserve_purity(els in prop::collection::vec(element(), 1..12)) {
        // unitary steps only
        let els: Vec<Element> = els.into_iter().filter(|e| !matches!(e, Element::Polarize)).collect();
        let k = Couplings::default();
        let out = apply_gate(&DensityState::ground(), &PulseSequence::new(els), &k, None).unwrap();
        prop_assert!((out.purity() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn disentangler_confines_spectrum(rho in state()) {
        let cfg = PhaseCycleConfig::default();
        let r = run_phase_cycle_from(&cfg, &ErrorModel::IDEAL, &rho).unwrap();
        prop_assert!(r.fit.residual_rms <= 1e-9, "{}", r.fit.residual_rms);
        prop_assert!((r.fit.amplitude(8) - 2.0 * rho.coherence()).abs() <= 1e-9);
    }

    #[test]
    fn ghz_fidelity_formula(rho in state(), chi in 0.0..std::f64::consts::TAU) {
        let g = DensityState::ghz(chi);
        let overlap = (g.matrix() * rho.matrix()).trace().re;
        prop_assert!(overlap <= rho.ghz_fidelity() + 1e-12);
        // optimal χ attains the formula
        let z = rho.element(7, 0);
        let best = DensityState::ghz(z.im.atan2(z.re));
        prop_assert!(((best.matrix() * rho.matrix()).trace().re - rho.ghz_fidelity()).abs() <= 1e-12);
    }
}
