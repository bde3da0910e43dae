use nf_core::eval::{
    angle_error, default_thresholds, flip_failure_rate, flip_rule_sweep, flip_rule_table, mst_orient, pca_normal,
    pca_normals, pgp_curve, rmse, AngleMode, EvalReport, ReportMeta,
};
use nf_core::pointcloud::{synth_shape, ShapeKind};
use nf_core::{PointCloud, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn unit_strategy() -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("non-zero", |(x, y, z)| x * x + y * y + z * z > 1e-4)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
}

fn points_strategy(min: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), min..60)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
}

/// Sum of squared offsets from the centroid along `n`.
fn plane_objective(points: &[Vec3], n: &Vec3) -> f64 {
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    points.iter().map(|p| (p - c).dot(n).powi(2)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn angle_error_symmetries(a in unit_strategy(), b in unit_strategy()) {
        let o = angle_error(&a, &b, AngleMode::Oriented);
        let u = angle_error(&a, &b, AngleMode::Unoriented);
        prop_assert_eq!(o, angle_error(&b, &a, AngleMode::Oriented));
        prop_assert!((0.0..=180.0).contains(&o));
        prop_assert!((0.0..=90.0).contains(&u));
        prop_assert!(u <= o);
        prop_assert!((u - angle_error(&-a, &b, AngleMode::Unoriented)).abs() <= 1e-12);
        prop_assert!((u - angle_error(&a, &-b, AngleMode::Unoriented)).abs() <= 1e-12);
    }

    #[test]
    fn rmse_matches_direct_formula(errors in prop::collection::vec(0.0f64..180.0, 1..200)) {
        let direct = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
        prop_assert!((rmse(&errors).unwrap() - direct).abs() <= 1e-12);
    }

    #[test]
    fn pgp_is_monotone_and_complete(errors in prop::collection::vec(0.0f64..180.0, 1..200)) {
        let curve = pgp_curve(&errors, &default_thresholds()).unwrap();
        prop_assert_eq!(curve.len(), 180);
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(curve[179], 1.0);
    }

    #[test]
    fn plane_fit_ignores_patch_scale_and_position(
        points in points_strategy(4),
        scale in 1e-3f64..1e3,
        shift in (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0),
    ) {
        let a = match pca_normal(&points) {
            Ok(n) => n,
            Err(_) => return Ok(()),
        };
        let shift = Vec3::new(shift.0, shift.1, shift.2);
        let moved: Vec<Vec3> = points.iter().map(|p| p * scale + shift).collect();
        let b = pca_normal(&moved).unwrap();
        // direction is what matters; near-degenerate spectra can rotate it
        let gap = plane_objective(&points, &b) - plane_objective(&points, &a);
        prop_assert!(a.dot(&b).abs() > 1.0 - 1e-6 || gap.abs() <= 1e-9 * (1.0 + plane_objective(&points, &a)));
    }

    #[test]
    fn plane_fit_beats_random_directions(points in points_strategy(3), seed in any::<u64>()) {
        let n = match pca_normal(&points) {
            Ok(n) => n,
            Err(_) => return Ok(()),
        };
        let best = plane_objective(&points, &n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)).normalize();
            prop_assert!(best <= plane_objective(&points, &v) + 1e-12);
        }
    }

    #[test]
    fn propagation_only_changes_signs(seed in any::<u64>(), n in 20usize..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let cloud = PointCloud::new(points).unwrap();
        let pca = pca_normals(&cloud, 8).unwrap();
        let oriented = mst_orient(&cloud, &pca, 6).unwrap();
        for (a, b) in pca.vectors.iter().zip(&oriented.vectors) {
            prop_assert!(a == b || *a == -b);
        }
    }
}

#[test]
fn noisy_plane_fit_error_scales_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for eps in [1e-4, 1e-3, 1e-2] {
        let n = Vec3::new(0.3, -0.4, 0.87).normalize();
        let u = n.cross(&Vec3::x()).normalize();
        let v = n.cross(&u);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| u * rng.gen_range(-1.0..1.0) + v * rng.gen_range(-1.0..1.0) + n * eps * rng.gen_range(-1.0..1.0))
            .collect();
        let est = pca_normal(&pts).unwrap();
        let err = (est - n).norm().min((est + n).norm());
        assert!(err < 10.0 * eps, "eps {eps}: err {err}");
    }
}

#[test]
fn naive_flip_rule_fails_on_sharp_sweeps() {
    let verdicts = flip_rule_table(&flip_rule_sweep(90));
    let rate = flip_failure_rate(&verdicts);
    assert!(rate > 0.0);
    // gentle bends propagate correctly
    assert!(verdicts[..20].iter().all(|v| v.correct));
}

#[test]
fn report_unoriented_never_exceeds_oriented() {
    let sphere = synth_shape(ShapeKind::Sphere, 500, 2).unwrap();
    let gt = sphere.gt_normals().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noisy: Vec<Vec3> = gt
        .iter()
        .map(|n| {
            let flip = if rng.gen::<f64>() < 0.2 { -1.0 } else { 1.0 };
            (n * flip
                + Vec3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ))
            .normalize()
        })
        .collect();
    let meta = ReportMeta {
        shape: "sphere".into(),
        noise: 0.0,
        stage: "test".into(),
    };
    let r = EvalReport::new(&noisy, gt, meta).unwrap();
    assert!(r.rmse_unoriented <= r.rmse_oriented);
    assert!(r.rmse_unoriented >= 0.0);
    assert!((0.7..0.9).contains(&r.agreement));
}
