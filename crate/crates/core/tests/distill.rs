use gfm_core::density::{ConditionedDensity, GaussianMixture, NoiseSchedule, Reference};
use gfm_core::diffcore::Activation;
use gfm_core::distill::*;
use gfm_core::geodesic::{self, DiscretePath, GeodesicConfig, Projection};
use gfm_core::linalg;
use gfm_core::nets::{CorrectorNet, MlpSpec};
use gfm_core::rng;
use gfm_core::tasks::make_gmm_bridge_task;

fn bridge_density() -> ConditionedDensity {
    let m = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
        vec![vec![0.6, 0.6], vec![0.6, 0.6]],
    )
    .unwrap();
    ConditionedDensity::new(m, vec![0, 1], Reference::Flat, NoiseSchedule::default()).unwrap()
}

/// Guided density identically 1 (single class minus itself) and an identity PF-ODE.
fn constant_density() -> ConditionedDensity {
    ConditionedDensity::unlabeled(
        GaussianMixture::standard_normal(2),
        Reference::Unconditional,
        NoiseSchedule::default(),
    )
}

fn free_pairs(n: usize, seed: u64) -> Vec<DistillPair> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| {
            let x0 = rng::normal_vec(&mut r, 2);
            let x1 = rng::normal_vec(&mut r, 2);
            DistillPair {
                z0: x0.clone(),
                z1: x1.clone(),
                x0,
                x1,
                c0: vec![1.0],
                c1: vec![1.0],
            }
        })
        .collect()
}

fn bridge_pairs(n: usize, cfg: &DistillConfig) -> (ConditionedDensity, Vec<DistillPair>) {
    let cd = bridge_density();
    let data = make_gmm_bridge_task(n, &cd, (0, 1), &mut rng::seeded(11)).unwrap();
    let pairs = prepare_pairs(&data, &cd, cfg).unwrap();
    (cd, pairs)
}

fn small_cfg() -> DistillConfig {
    DistillConfig {
        tau: 0.05,
        hidden: vec![16, 16],
        ode_steps: 20,
        ..DistillConfig::default()
    }
}

fn random_net(hidden: Vec<usize>, seed: u64, scale: f64) -> CorrectorNet {
    let mut n = CorrectorNet::new(2, hidden, Activation::Tanh, seed).unwrap();
    n.mlp_mut().randomize(seed + 7, scale);
    n
}

#[test]
fn zero_teacher_in_constant_density_does_not_move() {
    let cd = constant_density();
    let cfg = DistillConfig {
        teacher_lr: 0.1,
        ..small_cfg()
    };
    let pairs = free_pairs(6, 1);
    let mut teacher = CorrectorNet::new(2, cfg.hidden.clone(), cfg.activation, 3).unwrap();
    let before = teacher.params().to_vec();
    let mut state = TeacherState::new(&cfg, before.len());
    let ts = [0.2, 0.5, 0.8];
    let signal = teacher_signal(&teacher, &cd, &pairs, &ts, &cfg).unwrap();
    assert!(signal.g.iter().flatten().flatten().flatten().all(|v| *v == 0.0));
    let r = teacher_step(&mut teacher, &mut state, &cd, &pairs, &ts, &cfg).unwrap();
    assert_eq!(r.loss, 0.0);
    assert_eq!(r.mean_g_norm, 0.0);
    assert_eq!(teacher.params(), &before[..]);
}

/// `∂φ/∂ξ` for a corrector with one tanh hidden unit, written out by hand.
///
/// Parameters: `w1[0..5]`, `b1`, `w2[0..2]`, `b2[0..2]`; input `u = (x0, x1, t)`.
fn hand_jacobian(params: &[f64], x0: &[f64], x1: &[f64], t: f64) -> [[f64; 10]; 2] {
    let u = [x0[0], x0[1], x1[0], x1[1], t];
    let e = t * (1.0 - t);
    let pre: f64 = params[5] + (0..5).map(|j| params[j] * u[j]).sum::<f64>();
    let h = pre.tanh();
    let dh = 1.0 - h * h;
    let mut jac = [[0.0; 10]; 2];
    for (k, row) in jac.iter_mut().enumerate() {
        let w2 = params[6 + k];
        for j in 0..5 {
            row[j] = e * w2 * dh * u[j];
        }
        row[5] = e * w2 * dh;
        row[6 + k] = e * h;
        row[8 + k] = e;
    }
    jac
}

#[test]
fn teacher_step_matches_hand_jacobian_update() {
    let cfg = DistillConfig {
        teacher_lr: 0.05,
        clip: 1e12,
        line_search: false,
        ..small_cfg()
    };
    let (cd, pairs) = bridge_pairs(3, &cfg);
    let spec = MlpSpec {
        input_dim: 5,
        hidden: vec![1],
        output_dim: 2,
        activation: Activation::Tanh,
        seed: 0,
    };
    let params: Vec<f64> = (0..10).map(|i| 0.3 * ((i as f64) * 1.7).sin()).collect();
    let mut teacher = CorrectorNet::from_parts(2, spec, params.clone()).unwrap();
    let ts = [0.3, 0.55, 0.7];
    let signal = teacher_signal(&teacher, &cd, &pairs, &ts, &cfg).unwrap();

    let mut expected = params.clone();
    let mut used = 0.0;
    for (p, row) in pairs.iter().zip(&signal.g) {
        for (&t, g) in ts.iter().zip(row) {
            let g = g.as_ref().unwrap();
            let jac = hand_jacobian(&params, &p.z0, &p.z1, t);
            for (i, e) in expected.iter_mut().enumerate() {
                *e -= cfg.teacher_lr * (jac[0][i] * g[0] + jac[1][i] * g[1]);
            }
            used += 1.0;
        }
    }
    for (e, p) in expected.iter_mut().zip(&params) {
        *e = p + (*e - p) / used;
    }

    let mut state = TeacherState::new(&cfg, params.len());
    teacher_step(&mut teacher, &mut state, &cd, &pairs, &ts, &cfg).unwrap();
    for (a, b) in teacher.params().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn scaling_the_frozen_signal_scales_the_gradient_only() {
    let cfg = small_cfg();
    let (cd, pairs) = bridge_pairs(4, &cfg);
    let teacher = random_net(vec![8], 5, 0.3);
    let ts = [0.25, 0.5, 0.75];
    let signal = teacher_signal(&teacher, &cd, &pairs, &ts, &cfg).unwrap();
    let mut doubled = signal.clone();
    for g in doubled.g.iter_mut().flatten().flatten() {
        *g = linalg::scale(g, 2.0);
    }
    let (l1, g1) = surrogate_gradient(&teacher, &pairs, &ts, &signal).unwrap();
    let (l2, g2) = surrogate_gradient(&teacher, &pairs, &ts, &doubled).unwrap();
    assert!((l2 - 2.0 * l1).abs() <= 1e-12 * l1.abs().max(1.0));
    let cos = linalg::dot(&g1, &g2) / (linalg::norm(&g1) * linalg::norm(&g2));
    assert!((cos - 1.0).abs() < 1e-12, "cos {cos}");
    assert!((linalg::norm(&g2) / linalg::norm(&g1) - 2.0).abs() < 1e-12);
}

#[test]
fn zero_student_initial_loss_is_lerp_error() {
    let cfg = small_cfg();
    let (cd, pairs) = bridge_pairs(4, &cfg);
    let teacher = random_net(vec![8], 2, 0.4);
    let student = CorrectorNet::new(2, vec![8], Activation::Silu, 9).unwrap();
    let ts = [0.1, 0.4, 0.9];
    let targets = student_targets(&teacher, &cd, &pairs, &ts, &cfg).unwrap();
    let (loss, _) = student_loss_gradient(&student, &pairs, &ts, &targets).unwrap();
    let mut total = 0.0;
    for (p, row) in pairs.iter().zip(&targets) {
        for (&t, target) in ts.iter().zip(row) {
            total += linalg::norm_sq(&linalg::sub(&linalg::lerp(&p.x0, &p.x1, t), target));
        }
    }
    let expected = total / (pairs.len() * ts.len()) as f64;
    assert!((loss - expected).abs() <= 1e-14 * expected.max(1.0));
}

#[test]
fn zero_teacher_in_constant_density_gives_linear_targets() {
    let cd = constant_density();
    let cfg = small_cfg();
    let pairs = free_pairs(5, 4);
    let teacher = CorrectorNet::new(2, vec![8], Activation::Silu, 0).unwrap();
    let mut student = random_net(vec![8], 6, 0.2);
    let mut opt = gfm_core::nets::optim::OptimizerConfig::adam(1e-2).build(student.params().len());
    let ts = [0.2, 0.4, 0.6, 0.8];
    let targets = student_targets(&teacher, &cd, &pairs, &ts, &cfg).unwrap();
    for (p, row) in pairs.iter().zip(&targets) {
        for (&t, target) in ts.iter().zip(row) {
            assert!(linalg::dist(&linalg::lerp(&p.x0, &p.x1, t), target) < 1e-10);
        }
    }
    let mut last = f64::INFINITY;
    for _ in 0..400 {
        last = student_step(&mut student, &mut opt, &teacher, &cd, &pairs, &ts, &cfg).unwrap().loss;
    }
    assert!(last < 1e-4, "student loss {last}");
}

#[test]
fn student_mse_decreases_over_first_epochs() {
    let cfg = DistillConfig {
        student_rule: UpdateRule::Adam,
        ..small_cfg()
    };
    let (cd, pairs) = bridge_pairs(8, &cfg);
    let teacher = random_net(vec![8], 12, 0.3);
    let mut student = CorrectorNet::new(2, vec![16, 16], Activation::Silu, 1).unwrap();
    let mut opt = gfm_core::nets::optim::OptimizerConfig::adam(cfg.student_lr).build(student.params().len());
    let ts = time_sampler(8, 0.0, &mut rng::seeded(0));
    let targets = student_targets(&teacher, &cd, &pairs, &ts, &cfg).unwrap();
    let mut losses = Vec::new();
    for _ in 0..11 {
        losses.push(student_loss_gradient(&student, &pairs, &ts, &targets).unwrap().0);
        student_step(&mut student, &mut opt, &teacher, &cd, &pairs, &ts, &cfg).unwrap();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn constant_density_run_stays_linear_and_is_deterministic() {
    let cd = constant_density();
    let mut r = rng::seeded(8);
    let data: Vec<_> = (0..8)
        .map(|_| gfm_core::tasks::PairedSample {
            x0: rng::normal_vec(&mut r, 2),
            x1: rng::normal_vec(&mut r, 2),
            c0: vec![1.0],
            c1: vec![1.0],
            meta: vec![],
        })
        .collect();
    let cfg = DistillConfig {
        epochs: 5,
        batch_size: 4,
        teacher_lr: 1e-2,
        monitor_pairs: 4,
        ..small_cfg()
    };
    let a = distill_run(&data, &cd, &cfg).unwrap();
    let b = distill_run(&data, &cd, &cfg).unwrap();
    let bits = |h: &[EpochRecord]| h.iter().flat_map(|r| r.row()).map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(&a.history), bits(&b.history));
    assert_eq!(a.student.params(), b.student.params());
    for p in &data {
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let x = a.student.interpolant(&p.x0, &p.x1, t).unwrap();
            assert!(linalg::dist(&x, &linalg::lerp(&p.x0, &p.x1, t)) < 1e-3);
        }
        assert_eq!(a.student.interpolant(&p.x0, &p.x1, 0.0).unwrap(), p.x0);
        assert_eq!(a.student.interpolant(&p.x0, &p.x1, 1.0).unwrap(), p.x1);
    }
}

#[test]
fn invalid_config_and_empty_data_are_rejected() {
    let cd = constant_density();
    let bad = DistillConfig {
        tau: 1.5,
        ..DistillConfig::default()
    };
    assert!(matches!(distill_run(&[], &cd, &bad), Err(DistillError::Config(_))));
    assert!(matches!(distill_run(&[], &cd, &small_cfg()), Err(DistillError::Empty)));
}

fn sampled_path(net: &CorrectorNet, x0: &[f64], x1: &[f64], n: usize) -> DiscretePath {
    DiscretePath::new((0..=n).map(|i| net.interpolant(x0, x1, i as f64 / n as f64).unwrap()).collect()).unwrap()
}

#[test]
fn bridge_student_action_is_close_to_optimized_path() {
    let cfg = DistillConfig {
        tau: 0.05,
        teacher_rule: UpdateRule::Adam,
        teacher_lr: 3e-3,
        student_rule: UpdateRule::Adam,
        epochs: 120,
        batch_size: 16,
        student_batch_size: Some(8),
        t_grid_size: 12,
        projection: Projection::Normal,
        mode: DistillMode::PhaseSeparated,
        hidden: vec![64, 64],
        monitor_pairs: 16,
        ..DistillConfig::default()
    };
    let cd = bridge_density();
    let data = make_gmm_bridge_task(16, &cd, (0, 1), &mut rng::seeded(1)).unwrap();
    let out = distill_run(&data, &cd, &cfg).unwrap();
    assert!(out.history.iter().all(|r| r.action.is_finite()));
    let acts: Vec<f64> = out.history.iter().map(|r| r.action).collect();
    assert!(acts.windows(2).all(|w| w[1] <= w[0]), "{acts:?}");
    assert!(acts[acts.len() - 1] < out.initial_action);
    let m = cd.unconditional();
    for p in data.iter().take(4) {
        let student = geodesic::action(&sampled_path(&out.student, &p.x0, &p.x1, 128), m);
        let opt = geodesic::optimize_path(&DiscretePath::linear(&p.x0, &p.x1, 64).unwrap(), m, &GeodesicConfig::default())
            .unwrap();
        let best = geodesic::action(&opt.path, m);
        assert!(student <= 1.1 * best, "student {student} vs optimized {best}");
    }
}
