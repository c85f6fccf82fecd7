use diffshape::kernel::{gauss_kernel, KernelConfig, KernelParams};
use diffshape::registration::{
    register, symmetrized_kin, transport, velocity, DeformationFlow, SolverKind, SolverOptions,
};
use diffshape::standardize::{random_rotation, standardize};
use diffshape::surface::{Point, RingSurface};
use diffshape::synth::{generate_one, sphere_band, SynthParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair(seed: u64) -> (RingSurface, RingSurface) {
    let p = SynthParams {
        seed,
        ..Default::default()
    };
    let s = standardize(&generate_one(&p, "s", false).unwrap()).unwrap().surface;
    let t = standardize(&generate_one(&p, "t", seed % 2 == 0).unwrap()).unwrap().surface;
    (s, t)
}

fn params(s: &RingSurface, t: &RingSurface) -> KernelParams {
    KernelConfig::default().resolve(s.points(), t.points()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn velocity_is_the_kernel_sum(
        xs in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..6),
        z in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
        sigma in 0.2..2.0f64,
    ) {
        let controls: Vec<Point> = xs.iter().map(|&(a, b, c)| Point::new(a, b, c)).collect();
        let coeffs: Vec<Point> = xs.iter().map(|&(a, b, c)| Point::new(b, c, a)).collect();
        let z = Point::new(z.0, z.1, z.2);
        let v = velocity(&controls, &coeffs, sigma, &z);
        let expected = controls
            .iter()
            .zip(&coeffs)
            .fold(Point::zeros(), |acc, (x, a)| acc + gauss_kernel(x, &z, sigma) * a);
        prop_assert!((v - expected).norm() <= 1e-12 * (1.0 + expected.norm()));
    }
}

#[test]
fn identity_flow_has_zero_velocity() {
    let controls = vec![Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0)];
    let flow = DeformationFlow::identity(controls, vec![0, 1], 4, 0.5);
    for j in 0..=4 {
        assert_eq!(flow.evaluate_velocity(j, &Point::new(0.3, 0.2, 0.1)).unwrap(), Point::zeros());
    }
    assert!(flow.evaluate_velocity(5, &Point::zeros()).is_err());
}

#[test]
fn single_control_velocity() {
    let mut flow = DeformationFlow::identity(vec![Point::zeros()], vec![0], 2, 1.0);
    flow.coefficients[0][0] = Point::new(1.0, 0.0, 0.0);
    let at_control = flow.evaluate_velocity(0, &Point::zeros()).unwrap();
    assert_eq!(at_control, Point::new(1.0, 0.0, 0.0));
    let at_sigma = flow.evaluate_velocity(0, &Point::new(0.0, 1.0, 0.0)).unwrap();
    assert!((at_sigma.x - (-1.0f64).exp()).abs() < 1e-15);
}

/// Euler error halves when the number of time nodes doubles.
#[test]
fn euler_scheme_is_first_order() {
    let controls = vec![
        Point::new(0.0, 0.0, 0.0),
        Point::new(0.6, 0.1, 0.0),
        Point::new(-0.2, 0.5, 0.3),
    ];
    let a = vec![Point::new(0.8, 0.2, 0.0), Point::new(0.0, -0.7, 0.4), Point::new(0.5, 0.5, -0.6)];
    let sigma = 0.7;
    let tracer = [Point::new(0.2, 0.2, 0.1)];
    let end = |q: usize| {
        let coeffs = vec![a.clone(); q + 1];
        let traj = diffshape::registration::flow_forward(&controls, &coeffs, q, sigma).unwrap();
        transport(&traj, &coeffs, sigma, &tracer).unwrap()[q][0]
    };
    let (e8, e16, e32) = (end(8), end(16), end(32));
    let (d1, d2) = ((e8 - e16).norm(), (e16 - e32).norm());
    let ratio = d1 / d2;
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn self_registration_is_the_identity() {
    let (s, _) = pair(11);
    let kp = params(&s, &s);
    let r = register(&s, &s, &kp, &SolverOptions::default()).unwrap();
    assert!(r.converged);
    assert!(r.flow.kinetic_energy <= 1e-6, "kin {}", r.flow.kinetic_energy);
}

#[test]
fn kinetic_energy_grows_with_translation() {
    let s = sphere_band("s", 20, 10, 1.0).unwrap();
    let kp = params(&s, &s);
    let opts = SolverOptions::default();
    let mut last = 0.0;
    for d in [0.05, 0.1, 0.2] {
        let t = s.map_points(|p| p + Point::new(d, 0.0, 0.0)).unwrap();
        let r = register(&s, &t, &kp, &opts).unwrap();
        assert!(r.converged, "shift {d}");
        assert!(r.flow.kinetic_energy > last, "shift {d}: kin {}", r.flow.kinetic_energy);
        last = r.flow.kinetic_energy;
    }
}

#[test]
fn convergence_flag_agrees_with_mismatch() {
    for seed in 0..4 {
        let (s, t) = pair(seed);
        let r = register(&s, &t, &params(&s, &t), &SolverOptions::default()).unwrap();
        assert_eq!(r.converged, r.flow.terminal_mismatch <= r.threshold);
        assert_eq!(r.threshold, t.mesh_size());
        let start = r.flow.deform_at(&s, 0).unwrap();
        assert_eq!(start.points(), s.points());
        let end = r.flow.deform_at(&s, r.flow.q).unwrap();
        assert_eq!(end.points(), r.deformed.points());
        let text = r.flow.to_text();
        assert_eq!(text.lines().count(), 1 + (r.flow.q + 1) * r.flow.control_indices.len());
    }
}

#[test]
fn registration_is_rigid_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 20..23 {
        let (s, t) = pair(seed);
        let kp = params(&s, &t);
        let opts = SolverOptions::default();
        let base = register(&s, &t, &kp, &opts).unwrap().flow.kinetic_energy;
        let rot = random_rotation(&mut rng);
        let shift = Point::new(0.4, -1.0, 0.25);
        let g = |x: &RingSurface| x.map_points(|p| rot * p + shift).unwrap();
        let moved = register(&g(&s), &g(&t), &kp, &opts).unwrap().flow.kinetic_energy;
        let rel = (moved - base).abs() / base;
        assert!(rel <= 0.01, "seed {seed}: {base} vs {moved}");
    }
}

#[test]
fn symmetrized_energy_is_symmetric() {
    let s = sphere_band("s", 20, 10, 1.0).unwrap();
    let t = s.map_points(|p| Point::new(1.1 * p.x, p.y, p.z + 0.1)).unwrap().with_id("t");
    let kp = params(&s, &t);
    let opts = SolverOptions::default();
    let st = symmetrized_kin(&s, &t, &kp, &opts).unwrap();
    let ts = symmetrized_kin(&t, &s, &kp, &opts).unwrap();
    assert_eq!(st, ts);
    assert!(st > 0.0);
    let ss = symmetrized_kin(&s, &s, &kp, &opts).unwrap();
    assert!(ss <= 1e-6);
}

#[test]
fn failed_direction_is_reported() {
    let s = sphere_band("s", 20, 10, 1.0).unwrap();
    let t = s.map_points(|p| p + Point::new(0.3, 0.0, 0.0)).unwrap();
    let kp = params(&s, &t);
    let opts = SolverOptions {
        threshold_factor: 1e-6,
        ..Default::default()
    };
    let err = symmetrized_kin(&s, &t, &kp, &opts).unwrap_err();
    assert!(err.to_string().contains("forward"), "{err}");
}

#[test]
fn admm_augmented_lagrangian_decreases_after_burn_in() {
    let s = sphere_band("s", 20, 10, 1.0).unwrap();
    let t = s.map_points(|p| p + Point::new(0.15, 0.0, 0.0)).unwrap();
    let kp = params(&s, &t);
    let opts = SolverOptions {
        solver: SolverKind::Admm,
        max_iterations: 40,
        max_control_points: Some(60),
        max_target_points: Some(60),
        ..Default::default()
    };
    let r = register(&s, &t, &kp, &opts).unwrap();
    let aug: Vec<f64> = r.history.iter().map(|h| h.admm.as_ref().unwrap().augmented).collect();
    assert!(aug.len() > opts.burn_in + 1);
    for w in aug[opts.burn_in..].windows(2) {
        assert!(w[1] <= w[0] + 1e-6 * w[0].abs().max(1.0), "augmented rose: {w:?}");
    }
}

#[test]
fn invalid_options_are_rejected() {
    let (s, t) = pair(3);
    let kp = params(&s, &t);
    let bad = SolverOptions {
        q: 0,
        ..Default::default()
    };
    assert!(register(&s, &t, &kp, &bad).is_err());
    assert!(KernelParams::new(-1.0, 1.0, 1.0).is_err());
}
