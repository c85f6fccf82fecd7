use diffshape::field::{hermite_eval, truncation_for_tolerance, EigenBasis, FieldSpec, GaussHermite};
use diffshape::seeds::derive_seed;
use diffshape::surface::Point;
use diffshape::Error;
use proptest::prelude::*;

#[test]
fn hermite_low_orders() {
    for t in [-1.5, -0.3, 0.0, 0.7, 2.0] {
        assert_eq!(hermite_eval(0, t), 1.0);
        assert_eq!(hermite_eval(1, t), 2.0 * t);
        assert!((hermite_eval(2, t) - (4.0 * t * t - 2.0)).abs() < 1e-12);
        assert!((hermite_eval(3, t) - (8.0 * t.powi(3) - 12.0 * t)).abs() < 1e-12);
    }
}

#[test]
fn truncation_policy() {
    assert_eq!(truncation_for_tolerance(1.0, 1.0).unwrap(), 7);
    let n = truncation_for_tolerance(1e-3, 2.0).unwrap();
    let bound = |n: usize| 2f64.exp() * (n as f64).powf(0.7) / 2f64.powi(n as i32);
    assert!(bound(n) <= 1e-3 && bound(n - 1) > 1e-3);
    assert!(truncation_for_tolerance(1e-6, 2.0).unwrap() > n);
    assert!(truncation_for_tolerance(0.0, 2.0).is_err());
}

#[test]
fn eigenfunctions_are_orthonormal() {
    let basis = EigenBasis::validated(30);
    assert!(basis.orthonormality_error(30, &GaussHermite::new(120)) <= 1e-8);
    let l = basis.lambda();
    assert!(l.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn field_is_deterministic_per_seed() {
    let x = Point::new(0.3, -0.5, 1.1);
    let a = FieldSpec::new(12, [1.0; 3], 5).unwrap();
    let b = FieldSpec::new(12, [1.0; 3], 5).unwrap();
    let c = FieldSpec::new(12, [1.0; 3], 6).unwrap();
    assert_eq!(a.sample_vector(&x).unwrap(), b.sample_vector(&x).unwrap());
    assert_ne!(a.sample_vector(&x).unwrap(), c.sample_vector(&x).unwrap());
    assert_eq!(a.sample_many(&[x]).unwrap()[0], a.sample_vector(&x).unwrap());
    assert_eq!(
        a.sample_scalar_truncated(1, &x, 12).unwrap(),
        a.sample_scalar(1, &x).unwrap()
    );
    assert_eq!(a.clone().zeroed().sample_vector(&x).unwrap(), Point::zeros());
}

#[test]
fn domain_is_enforced_per_scale() {
    let f = FieldSpec::new(8, [1.0, 2.0, 1.0], 1).unwrap();
    let x = Point::new(3.0, 3.0, 0.0);
    assert!(matches!(f.sample_scalar(0, &x), Err(Error::FieldDomain { .. })));
    assert!(f.sample_scalar(1, &x).is_ok());
    let err = f.sample_many(&[Point::zeros(), x]).unwrap_err();
    assert!(matches!(err, Error::FieldDomain { index: 1, .. }));
    assert!(FieldSpec::new(8, [1.0, 0.0, 1.0], 1).is_err());
}

fn samples(n: usize, x: &Point) -> Vec<Point> {
    let basis = EigenBasis::validated(15);
    (0..n as u64)
        .map(|s| {
            FieldSpec::with_basis(basis.clone(), 15, [1.0; 3], derive_seed(9, "field-test", &s.to_string()))
                .unwrap()
                .sample_vector(x)
                .unwrap()
        })
        .collect()
}

#[test]
fn components_are_uncorrelated_gaussians() {
    let x = Point::new(0.4, -0.2, 0.9);
    let v = samples(1500, &x);
    let n = v.len() as f64;
    let mean = v.iter().sum::<Point>() / n;
    let centered: Vec<Point> = v.iter().map(|p| p - mean).collect();
    let var: Vec<f64> = (0..3).map(|j| centered.iter().map(|p| p[j] * p[j]).sum::<f64>() / n).collect();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let cov = centered.iter().map(|p| p[i] * p[j]).sum::<f64>() / n;
        let se = (var[i] * var[j] / n).sqrt();
        assert!(cov.abs() <= 4.0 * se, "cov({i},{j}) = {cov}, se {se}");
    }
    for j in 0..3 {
        let sd = var[j].sqrt();
        let skew = centered.iter().map(|p| (p[j] / sd).powi(3)).sum::<f64>() / n;
        let kurt = centered.iter().map(|p| (p[j] / sd).powi(4)).sum::<f64>() / n;
        assert!(skew.abs() <= 4.0 * (6.0 / n).sqrt(), "skew {skew}");
        assert!((kurt - 3.0).abs() <= 4.0 * (24.0 / n).sqrt(), "kurtosis {kurt}");
        assert!(mean[j].abs() <= 4.0 * sd / n.sqrt());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn field_is_smooth(seed in any::<u64>(), x in (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64)) {
        let f = FieldSpec::new(12, [1.0; 3], seed).unwrap();
        let x = Point::new(x.0, x.1, x.2);
        let h = 1e-4;
        let d = Point::new(h, h, h);
        let w0 = f.sample_vector(&x).unwrap();
        let w1 = f.sample_vector(&(x + d)).unwrap();
        let w2 = f.sample_vector(&(x + 2.0 * d)).unwrap();
        let second = (w2 - 2.0 * w1 + w0).norm();
        prop_assert!(second <= 1e-5, "second difference {second}");
    }
}
