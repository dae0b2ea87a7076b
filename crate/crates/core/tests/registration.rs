use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpcnet::datagen::{crop_to_visible_ratio, shapes};
use vpcnet::geometry::{normalize_to_unit_box, sample_mesh_uniform, PointCloud};
use vpcnet::registration::{
    icp, registration_csv, registration_experiment, rotation_error, translation_error, IcpConfig, RegistrationPair,
    RigidTransform, RotationMetric,
};

fn vehicle_cloud(n: usize, seed: u64) -> PointCloud {
    let mesh = shapes::vehicle(&shapes::VehicleParams::random(seed)).unwrap();
    let pc = sample_mesh_uniform(&mesh, n, seed).unwrap();
    normalize_to_unit_box(&pc, &pc).unwrap().0
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> RigidTransform {
    let axis = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    RigidTransform::from_axis_angle(axis, rng.gen_range(-max_angle..max_angle), [0.0; 3])
}

#[test]
fn printed_metric_is_twice_the_geodesic_angle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let a = random_rotation(&mut rng, std::f64::consts::PI);
        let b = random_rotation(&mut rng, std::f64::consts::PI);
        let rel = a.r.transpose() * b.r;
        let angle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
        let printed = rotation_error(&a, &b, RotationMetric::Printed);
        assert!((printed - 2.0 * angle).abs() < 1e-9, "{printed} vs {angle}");
        assert!((printed - rotation_error(&b, &a, RotationMetric::Printed)).abs() < 1e-12);
    }
}

#[test]
fn icp_recovers_small_known_motion() {
    let src = vehicle_cloud(500, 3);
    let gt = RigidTransform::from_axis_angle([0.2, 1.0, 0.3], 5f64.to_radians(), [0.1, 0.0, 0.0]);
    let dst = gt.apply_cloud(&src);
    let res = icp(&src, &dst, &IcpConfig::default()).unwrap();
    let angle = rotation_error(&res.transform, &gt, RotationMetric::Geodesic).to_radians();
    assert!(angle < 1e-3, "{angle}");
    assert!(translation_error(&res.transform, &gt) < 1e-3);
    assert!(!res.low_confidence);
    assert!(res.history.windows(2).all(|w| w[1] <= w[0] + 1e-15));
}

#[test]
fn icp_on_identical_clouds_is_identity() {
    let src = vehicle_cloud(300, 4);
    let res = icp(&src, &src, &IcpConfig::default()).unwrap();
    assert!((res.transform.r - nalgebra::Matrix3::identity()).norm() < 1e-9);
    assert!(res.transform.t.norm() < 1e-9);
}

#[test]
fn sparse_clouds_are_low_confidence() {
    let src = PointCloud::new(vehicle_cloud(400, 5).points.into_iter().step_by(40).collect());
    assert_eq!(src.len(), 10);
    let dst = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], 0.02, [0.01, 0.0, 0.0]).apply_cloud(&src);
    let res = icp(&src, &dst, &IcpConfig::default()).unwrap();
    assert!(res.low_confidence);
    assert!(res.transform.t.iter().all(|v| v.is_finite()));
}

#[test]
fn icp_rejects_collinear_input() {
    let line = PointCloud::new((0..10).map(|i| [i as f64, 0.0, 0.0]).collect());
    assert!(icp(&line, &line, &IcpConfig::default()).is_err());
}

#[test]
fn identity_pairs_give_zero_table() {
    let pc = vehicle_cloud(200, 6);
    let pairs: Vec<RegistrationPair> = (0..3)
        .map(|i| RegistrationPair {
            example: format!("ex{i}"),
            a: pc.clone(),
            b: pc.clone(),
            gt: RigidTransform::identity(),
        })
        .collect();
    let table = registration_experiment(&pairs, &IcpConfig::default(), RotationMetric::Printed).unwrap();
    assert_eq!(table.rows.len(), 3);
    for r in &table.rows {
        assert!(r.rot_err < 1e-5 && r.trans_err < 1e-9);
    }
    let csv = registration_csv(&table, &table).unwrap();
    assert!(csv.starts_with("example,rot_err_partial,trans_err_partial,rot_err_complete,trans_err_complete\n"));
    assert_eq!(csv.lines().count(), 5);
}

/// Two scans of one vehicle related by `gt`, each keeping `ratio` of the
/// surface as seen from a different direction.
fn overlap_pair(seed: u64, ratio: f64) -> RegistrationPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full_a = vehicle_cloud(2000, seed);
    let full_b = vehicle_cloud(2000, seed);
    let full_b = PointCloud::new(full_b.points.iter().rev().copied().collect());
    let gt = RigidTransform::from_axis_angle([0.0, 0.0, 1.0], rng.gen_range(0.05..0.15), [0.08, -0.05, 0.0]);
    let a = crop_to_visible_ratio(&full_a, ratio, seed * 2).unwrap();
    let b = gt.apply_cloud(&crop_to_visible_ratio(&full_b, ratio, seed * 2 + 1).unwrap());
    RegistrationPair {
        example: format!("pair{seed}"),
        a,
        b,
        gt,
    }
}

#[test]
fn more_overlap_registers_better() {
    let partial: Vec<_> = (1..=6).map(|s| overlap_pair(s, 0.3)).collect();
    let complete: Vec<_> = (1..=6).map(|s| overlap_pair(s, 0.9)).collect();
    let cfg = IcpConfig::default();
    let p = registration_experiment(&partial, &cfg, RotationMetric::Printed).unwrap();
    let c = registration_experiment(&complete, &cfg, RotationMetric::Printed).unwrap();
    assert!(c.mean_rot_err < p.mean_rot_err, "{} vs {}", c.mean_rot_err, p.mean_rot_err);
    assert!(c.mean_trans_err < p.mean_trans_err, "{} vs {}", c.mean_trans_err, p.mean_trans_err);
}

#[test]
fn translation_error_matches_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let t1: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let t2: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let a = RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::from(t1));
        let b = RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::from(t2));
        let manual = ((t1[0] - t2[0]).powi(2) + (t1[1] - t2[1]).powi(2) + (t1[2] - t2[2]).powi(2)).sqrt();
        assert!((translation_error(&a, &b) - manual).abs() < 1e-15);
    }
}
