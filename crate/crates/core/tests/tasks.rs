use gfm_core::density::{ConditionedDensity, GaussianMixture, NoiseSchedule, Reference};
use gfm_core::linalg;
use gfm_core::metrics::energy_distance;
use gfm_core::persistence::encode_container;
use gfm_core::rng;
use gfm_core::tasks::*;
use proptest::prelude::*;

fn bridge() -> ConditionedDensity {
    let m = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![vec![-2.0, 0.0], vec![2.0, 0.5]],
        vec![vec![0.6, 0.3], vec![0.2, 0.9]],
    )
    .unwrap();
    ConditionedDensity::new(m, vec![0, 1], Reference::Flat, NoiseSchedule::default()).unwrap()
}

fn rotation(n_pairs: usize) -> RotationTaskConfig {
    RotationTaskConfig {
        n_pairs,
        dim: 4,
        ..Default::default()
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn zero_rotation_pairs_are_identical() {
    let cfg = RotationTaskConfig {
        angle_range: [0.0, 0.0],
        ..rotation(20)
    };
    for p in make_rotation_task(&cfg, &mut rng::seeded(3)).unwrap() {
        assert_eq!(p.x0, p.x1);
        assert_eq!(p.meta[1], 0.0);
    }
}

#[test]
fn targets_are_the_transport_of_sources_and_it_inverts() {
    let cfg = rotation(40);
    for p in make_rotation_task(&cfg, &mut rng::seeded(4)).unwrap() {
        let dtheta = p.meta[1];
        assert!(close(&cfg.transport(&p.x0, dtheta), &p.x1, 1e-12));
        assert!(close(&cfg.transport(&p.x1, -dtheta), &p.x0, 1e-12));
    }
}

#[test]
fn conditions_encode_the_relative_angle() {
    let cfg = rotation(10);
    for p in make_rotation_task(&cfg, &mut rng::seeded(5)).unwrap() {
        assert_eq!(p.c0, vec![1.0, 0.0]);
        let d = p.meta[1];
        assert!(close(&p.c1, &[d.cos(), d.sin()], 1e-15));
        assert!(d >= cfg.angle_range[0] && d <= cfg.angle_range[1]);
    }
}

#[test]
fn same_seed_gives_identical_dataset_bytes() {
    let cfg = rotation(64);
    let bytes = |seed| encode_container(&dataset_to_container(&make_rotation_task(&cfg, &mut rng::seeded(seed)).unwrap()).unwrap()).unwrap();
    assert_eq!(bytes(7), bytes(7));
    assert_ne!(bytes(7), bytes(8));
}

#[test]
fn bridge_coupling_is_deterministic_and_moves_every_point() {
    let cd = bridge();
    let a = make_gmm_bridge_task(50, &cd, (0, 1), &mut rng::seeded(9)).unwrap();
    let b = make_gmm_bridge_task(50, &cd, (0, 1), &mut rng::seeded(9)).unwrap();
    assert_eq!(a, b);
    for p in &a {
        assert_ne!(p.x0, p.x1);
        assert_eq!(p.c0, vec![1.0, 0.0]);
        assert_eq!(p.c1, vec![0.0, 1.0]);
    }
}

#[test]
fn bridge_pairs_share_their_standardised_noise() {
    let cd = bridge();
    let m = cd.unconditional();
    for p in make_gmm_bridge_task(20, &cd, (0, 1), &mut rng::seeded(10)).unwrap() {
        for d in 0..2 {
            let e0 = (p.x0[d] - m.means()[0][d]) / m.variances()[0][d].sqrt();
            let e1 = (p.x1[d] - m.means()[1][d]) / m.variances()[1][d].sqrt();
            assert!((e0 - e1).abs() < 1e-12);
        }
    }
}

#[test]
fn bridge_marginals_match_their_components() {
    let cd = bridge();
    let m = cd.unconditional();
    let data = make_gmm_bridge_task(1500, &cd, (0, 1), &mut rng::seeded(11)).unwrap();
    let mut r = rng::seeded(12);
    for (k, side) in [(0, 0), (1, 1)] {
        let comp = GaussianMixture::gaussian(m.means()[k].clone(), m.variances()[k].clone()).unwrap();
        let reference: Vec<Vec<f64>> = (0..1500).map(|_| comp.sample(&mut r)).collect();
        let drawn: Vec<Vec<f64>> = data.iter().map(|p| if side == 0 { p.x0.clone() } else { p.x1.clone() }).collect();
        let e = energy_distance(&drawn, &reference).unwrap();
        assert!(e < 0.01, "component {k}: {e}");
    }
}

#[test]
fn bridge_rejects_bad_modes() {
    let cd = bridge();
    assert!(make_gmm_bridge_task(4, &cd, (0, 0), &mut rng::seeded(0)).is_err());
    assert!(make_gmm_bridge_task(4, &cd, (0, 2), &mut rng::seeded(0)).is_err());
}

#[test]
fn offset_task_adds_the_offset() {
    let base = GaussianMixture::standard_normal(3);
    let off = [1.0, -2.0, 0.5];
    for p in make_offset_task(10, &base, &off, &mut rng::seeded(1)).unwrap() {
        assert_eq!(p.x1, linalg::add(&p.x0, &off));
    }
    assert!(make_offset_task(1, &base, &[1.0], &mut rng::seeded(1)).is_err());
}

#[test]
fn dataset_file_roundtrip_with_ray_conditions() {
    let cfg = RotationTaskConfig {
        n_pairs: 9,
        rays: Some(RayConfig {
            width: 3,
            height: 2,
            ..Default::default()
        }),
        ..Default::default()
    };
    let data = make_rotation_task(&cfg, &mut rng::seeded(13)).unwrap();
    assert_eq!(data[0].c1.len(), 2 + 6 * 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rot.gfds");
    save_dataset(&path, &data).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
}

#[test]
fn invalid_rotation_configs_are_rejected() {
    for cfg in [
        RotationTaskConfig { dim: 1, ..Default::default() },
        RotationTaskConfig { warp: -1.0, ..Default::default() },
        RotationTaskConfig { angle_range: [1.0, 0.5], ..Default::default() },
        RotationTaskConfig { ring_var: 0.0, ..Default::default() },
    ] {
        assert!(make_rotation_task(&cfg, &mut rng::seeded(0)).is_err());
    }
}

#[test]
fn rolling_the_camera_rotates_its_rays() {
    let base = axis_angle([0.3, 1.0, -0.2], 0.8);
    let origin = [0.5, -1.0, 2.0];
    let pose = CameraPose::new(origin, base, 3.0, [2.0, 1.5]).unwrap();
    let roll_axis = [base[0][2], base[1][2], base[2][2]];
    for theta in [0.2, 1.3, -2.7] {
        let rz = axis_angle(roll_axis, theta);
        let mul = |m: &[[f64; 3]; 3], v: [f64; 3]| [0, 1, 2].map(|i| (0..3).map(|k| m[i][k] * v[k]).sum::<f64>());
        let rot = [0, 1, 2].map(|i| [0, 1, 2].map(|j| (0..3).map(|k| rz[i][k] * base[k][j]).sum::<f64>()));
        let rolled = CameraPose::new(mul(&rz, origin), rot, 3.0, [2.0, 1.5]).unwrap();
        for (a, b) in ray_grid(&pose, 4, 3).unwrap().iter().zip(ray_grid(&rolled, 4, 3).unwrap()) {
            let m = mul(&rz, [a[0], a[1], a[2]]);
            let d = mul(&rz, [a[3], a[4], a[5]]);
            assert!(close(&b, &[m[0], m[1], m[2], d[0], d[1], d[2]], 1e-12));
        }
    }
}

proptest! {
    #[test]
    fn plucker_direction_is_unit_and_moment_orthogonal(
        o in prop::array::uniform3(-10.0f64..10.0),
        d in prop::array::uniform3(-10.0f64..10.0),
    ) {
        prop_assume!(linalg::norm(&d) > 1e-3);
        let p = plucker_embed(o, d).unwrap();
        prop_assert!((linalg::norm(&p[3..]) - 1.0).abs() < 1e-12);
        prop_assert!(linalg::dot(&p[..3], &p[3..]).abs() < 1e-9);
    }

    #[test]
    fn plucker_ignores_position_along_the_ray_and_direction_scale(
        o in prop::array::uniform3(-5.0f64..5.0),
        d in prop::array::uniform3(-5.0f64..5.0),
        s in -4.0f64..4.0,
        k in 0.1f64..10.0,
    ) {
        prop_assume!(linalg::norm(&d) > 1e-2);
        let p = plucker_embed(o, d).unwrap();
        let moved = [0, 1, 2].map(|i| o[i] + s * d[i]);
        let q = plucker_embed(moved, d.map(|v| k * v)).unwrap();
        prop_assert!(close(&q, &p, 1e-9));
    }

    #[test]
    fn block_rotation_preserves_norm_and_composes(
        x in prop::collection::vec(-5.0f64..5.0, 1..8),
        a in -4.0f64..4.0,
        b in -4.0f64..4.0,
    ) {
        let r = block_rotate(&x, a);
        prop_assert!((linalg::norm(&r) - linalg::norm(&x)).abs() < 1e-10);
        prop_assert!(close(&block_rotate(&r, b), &block_rotate(&x, a + b), 1e-10));
        if x.len() % 2 == 1 {
            prop_assert_eq!(r[x.len() - 1], x[x.len() - 1]);
        }
    }

    #[test]
    fn warp_is_monotone_and_invertible(u in -20.0f64..20.0, v in -20.0f64..20.0, a in -0.9f64..3.0) {
        prop_assume!(u < v);
        prop_assert!(warp(u, a) < warp(v, a));
        prop_assert!((unwarp(warp(u, a), a) - u).abs() < 1e-10);
    }
}
