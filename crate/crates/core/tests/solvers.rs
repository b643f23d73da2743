use nalgebra::{DVector, Matrix2, Vector2, Vector4};
use proptest::prelude::*;
use quadtank::controllers::{Lmpc, MpcConfig};
use quadtank::estimators::InitialBeliefConfig;
use quadtank::model::{discretize_zoh, linearize};
use quadtank::rng::NormalRng;
use quadtank::solvers::qp::objective;
use quadtank::solvers::*;
use quadtank::{ModelParams, NoiseParams, OperatingPoint, QuadTank};

mod common;
use common::{enumerate_box_qp, random_qp};

#[test]
fn box_qp_matches_face_enumeration() {
    let mut rng = NormalRng::seed_from_u64(2024);
    for case in 0..200 {
        let n = 1 + case % 6;
        let (h, g, lo, hi) = random_qp(&mut rng, n);
        let qp = BoxQp { h: &h, g: &g, lower: &lo, upper: &hi };
        let sol = solve_box_qp(&qp, None, None, &QpOptions::default()).unwrap();
        assert!(sol.converged, "case {case}");
        let (x, v) = enumerate_box_qp(&h, &g, &lo, &hi);
        let scale = 1.0 + x.amax();
        assert!((&sol.x - &x).amax() < 1e-8 * scale, "case {case}: {} vs {}", sol.x, x);
        assert!((sol.objective - v).abs() < 1e-8 * (1.0 + v.abs()), "case {case}");
    }
}

#[test]
fn warm_start_from_wrong_active_set_still_solves() {
    let mut rng = NormalRng::seed_from_u64(7);
    for case in 0..50 {
        let n = 2 + case % 5;
        let (h, g, lo, hi) = random_qp(&mut rng, n);
        let qp = BoxQp { h: &h, g: &g, lower: &lo, upper: &hi };
        let warm: Vec<Bound> = (0..n)
            .map(|i| match i % 3 {
                0 if lo[i].is_finite() => Bound::Lower,
                1 if hi[i].is_finite() => Bound::Upper,
                _ => Bound::Free,
            })
            .collect();
        let cold = solve_box_qp(&qp, None, None, &QpOptions::default()).unwrap();
        let hot = solve_box_qp(&qp, Some(&warm), None, &QpOptions::default()).unwrap();
        assert!((&cold.x - &hot.x).amax() < 1e-8 * (1.0 + cold.x.amax()), "case {case}");
    }
}

proptest! {
    #[test]
    fn qp_solution_beats_feasible_points(seed in 0u64..10_000, n in 1usize..8) {
        let mut rng = NormalRng::seed_from_u64(seed);
        let (h, g, lo, hi) = random_qp(&mut rng, n);
        let qp = BoxQp { h: &h, g: &g, lower: &lo, upper: &hi };
        let sol = solve_box_qp(&qp, None, None, &QpOptions::default()).unwrap();
        prop_assert!((0..n).all(|i| sol.x[i] >= lo[i] && sol.x[i] <= hi[i]));
        for _ in 0..20 {
            let y = DVector::from_fn(n, |i, _| {
                let (a, b) = (lo[i].max(-10.0), hi[i].min(10.0));
                a + (b - a) * rng.uniform()
            });
            prop_assert!(sol.objective <= objective(&h, &g, &y) + 1e-9);
        }
    }
}

struct Setup {
    op: OperatingPoint,
    lm: quadtank::LinearModel,
    cfg: MpcConfig,
}

fn setup(horizon: usize) -> Setup {
    let p = ModelParams::identified();
    let op = OperatingPoint::from_inputs(Vector2::new(300.0, 300.0), Vector4::zeros(), &p).unwrap();
    let lm = linearize(&p, &op).unwrap();
    let cfg = MpcConfig {
        horizon,
        ..MpcConfig::default()
    };
    Setup { op, lm, cfg }
}

fn ramp_refs(op: &OperatingPoint, n: usize) -> Vec<Vector2<f64>> {
    (0..n)
        .map(|j| op.z_s + Vector2::new(3.0, if j < n / 2 { -2.0 } else { 4.0 }))
        .collect()
}

#[test]
fn sqp_on_linear_dynamics_matches_lmpc_qp() {
    let n = 40;
    let Setup { op, lm, cfg } = setup(n);
    let zoh = discretize_zoh(&lm, cfg.ts).unwrap();
    let d_dev = Vector4::new(0.5, -1.0, 2.0, 0.0);
    // Absolute-coordinate form of the deviation model.
    let shooting = AffineShooting {
        a: zoh.a,
        b: zoh.b,
        c: op.x_s - zoh.a * op.x_s - zoh.b * op.u_s + zoh.e * d_dev,
    };
    let x_dev = Vector4::new(800.0, -500.0, 300.0, 100.0);
    // Large enough to saturate the pumps for the first samples.
    let refs: Vec<Vector2<f64>> = (0..n).map(|j| op.z_s + Vector2::new(12.0, if j < n / 2 { -10.0 } else { 4.0 })).collect();
    let u_prev = Vector2::new(320.0, 280.0);
    let nlp = NlpProblem {
        model: &shooting,
        x0: op.x_s + x_dev,
        cost: TrackingCost {
            cz: lm.cz,
            q: cfg.q,
            s: cfg.s,
            refs: refs.clone(),
            u_prev,
        },
        u_min: cfg.u_min,
        u_max: cfg.u_max,
    };
    let w0 = ShootingIterate::constant(nlp.x0, u_prev, n);
    let res = solve_sqp(&nlp, w0, None, &SqpOptions::default()).unwrap();
    assert!(res.converged);

    let mut lmpc = Lmpc::new(lm, &NoiseParams::simulation_default(), cfg, InitialBeliefConfig::default()).unwrap();
    let u_qp = lmpc.optimal_inputs(&x_dev, &d_dev, &refs, &u_prev).unwrap();
    assert!(u_qp.iter().flatten().any(|&v| v >= 349.999 || v <= 160.001), "bounds should bind");
    for (a, b) in res.iterate.u.iter().zip(&u_qp) {
        assert!((a - b).amax() < 1e-6, "{a} vs {b}");
    }
}

fn nonlinear_problem<'a>(shooting: &'a Rk4Shooting<QuadTank>, op: &OperatingPoint, n: usize) -> NlpProblem<'a> {
    NlpProblem {
        model: shooting,
        x0: op.x_s + Vector4::new(-2500.0, 1800.0, 900.0, -700.0),
        cost: TrackingCost {
            cz: shooting.model.output_matrix(),
            q: Matrix2::identity() * 10.0,
            s: Matrix2::new(1.0, 0.2, 0.2, 0.5),
            refs: ramp_refs(op, n),
            u_prev: Vector2::new(290.0, 310.0),
        },
        u_min: Vector2::repeat(160.0),
        u_max: Vector2::repeat(350.0),
    }
}

fn rk4(p: &ModelParams) -> Rk4Shooting<QuadTank> {
    Rk4Shooting {
        model: QuadTank::new(p.clone()).unwrap(),
        d: Vector4::new(0.0, 0.0, 5.0, 0.0),
        ts: 5.0,
        steps: 10,
    }
}

#[test]
fn condensed_gradient_matches_finite_differences() {
    let n = 12;
    let Setup { op, .. } = setup(n);
    let shooting = rk4(&ModelParams::identified());
    let nlp = nonlinear_problem(&shooting, &op, n);
    let u: Vec<Vector2<f64>> = (0..n).map(|j| Vector2::new(250.0 + 7.0 * j as f64, 330.0 - 5.0 * j as f64)).collect();
    let g = nlp.condensed_gradient(&u);
    for k in 0..2 * n {
        let h = 1e-4;
        let mut up = u.clone();
        let mut um = u.clone();
        up[k / 2][k % 2] += h;
        um[k / 2][k % 2] -= h;
        let fd = (nlp.rolled_out_objective(&up) - nlp.rolled_out_objective(&um)) / (2.0 * h);
        assert!((g[k] - fd).abs() < 1e-5 * g[k].abs().max(1.0), "k={k}: {} vs {fd}", g[k]);
    }
}

#[test]
fn sqp_merit_decreases_and_converges() {
    let n = 30;
    let Setup { op, .. } = setup(n);
    let shooting = rk4(&ModelParams::identified());
    let nlp = nonlinear_problem(&shooting, &op, n);
    let w0 = ShootingIterate::constant(nlp.x0, nlp.cost.u_prev, n);
    let res = solve_sqp(&nlp, w0, None, &SqpOptions::default()).unwrap();
    assert!(res.converged, "kkt {}", res.kkt_residual);
    assert!(res.merit_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));
    // Converged iterate is dynamically consistent and no worse than any
    // nearby feasible roll-out.
    let f = nlp.rolled_out_objective(&res.iterate.u);
    assert!((f - res.objective).abs() < 1e-6 * f);
    let mut rng = NormalRng::seed_from_u64(3);
    for _ in 0..20 {
        let u: Vec<Vector2<f64>> = res
            .iterate
            .u
            .iter()
            .map(|u| (u + Vector2::new(rng.standard_normal(), rng.standard_normal())).map(|v| v.clamp(160.0, 350.0)))
            .collect();
        assert!(nlp.rolled_out_objective(&u) >= f - 1e-6 * f);
    }
}

#[test]
fn sqp_at_steady_state_stops_immediately() {
    let n = 20;
    let Setup { op, .. } = setup(n);
    let mut shooting = rk4(&ModelParams::identified());
    shooting.d = Vector4::zeros();
    let nlp = NlpProblem {
        model: &shooting,
        x0: op.x_s,
        cost: TrackingCost {
            cz: shooting.model.output_matrix(),
            q: Matrix2::identity() * 10.0,
            s: Matrix2::identity(),
            refs: vec![op.z_s; n],
            u_prev: op.u_s,
        },
        u_min: Vector2::repeat(160.0),
        u_max: Vector2::repeat(350.0),
    };
    let res = solve_sqp(&nlp, ShootingIterate::constant(op.x_s, op.u_s, n), None, &SqpOptions::default()).unwrap();
    assert!(res.converged && res.iterations <= 2, "{} iterations", res.iterations);
    assert!(res.iterate.u.iter().all(|u| (u - op.u_s).amax() < 1e-6));
}

#[test]
fn sqp_rejects_mismatched_initial_guess() {
    let n = 5;
    let Setup { op, .. } = setup(n);
    let shooting = rk4(&ModelParams::identified());
    let nlp = nonlinear_problem(&shooting, &op, n);
    let err = solve_sqp(&nlp, ShootingIterate::constant(op.x_s, op.u_s, n + 1), None, &SqpOptions::default()).unwrap_err();
    assert_eq!(err.kind(), "invalid_input");
}
