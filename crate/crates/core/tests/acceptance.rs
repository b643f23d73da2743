//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `QT_ACCEPTANCE=1,5` to run a subset.

use std::time::Instant;

use nalgebra::{SMatrix, SVector, Vector2, Vector4};
use quadtank::controllers::{Lmpc, MpcConfig};
use quadtank::estimators::*;
use quadtank::harness::*;
use quadtank::model::{discretize_zoh, linearize, LinearDrift};
use quadtank::rng::NormalRng;
use quadtank::simulator::{measure, sde_step};
use quadtank::solvers::*;
use quadtank::sysid::*;
use quadtank::{ModelParams, NoiseParams, OperatingPoint, QuadTank};

mod common;
use common::{enumerate_box_qp, random_qp};

/// Criteria that fail with the implementation as specified; each has a
/// note in the README and still prints its FAIL line.
const KNOWN_FAILURES: &[u32] = &[5];

struct Outcome {
    criterion: u32,
    pass: bool,
}

fn outcome(criterion: u32, pass: bool, detail: String) -> Outcome {
    let note = if !pass && KNOWN_FAILURES.contains(&criterion) { " (documented deviation)" } else { "" };
    println!("{} criterion {criterion}{note}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { criterion, pass }
}

fn selected() -> Vec<u32> {
    match std::env::var("QT_ACCEPTANCE") {
        Ok(s) if !s.trim().is_empty() => s.split(',').map(|c| c.trim().parse().expect("criterion number")).collect(),
        _ => (1..=10).collect(),
    }
}

fn mean_of(result: &ExperimentResult, kind: ControllerKind, f: fn(&Metrics) -> f64) -> f64 {
    let v: Vec<f64> = result.runs_of(kind).map(|r| f(&r.metrics)).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn nise(m: &Metrics) -> f64 {
    m.nise
}

fn nisdu(m: &Metrics) -> f64 {
    m.nisdu
}

fn sim1_and_3(out: &mut Vec<Outcome>, want: &[u32]) {
    let spec = build_scenario("sim1").unwrap();
    let t0 = Instant::now();
    let r = run_experiment(&spec).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (p, l, n) = (
        mean_of(&r, ControllerKind::Pid, nise),
        mean_of(&r, ControllerKind::Lmpc, nise),
        mean_of(&r, ControllerKind::Nmpc, nise),
    );
    if want.contains(&1) {
        let pass = n <= l && l < p && p / l > 3.0 && secs <= 600.0;
        out.push(outcome(
            1,
            pass,
            format!(
                "sim1 x{} seeds NISE nmpc {n:.4} <= lmpc {l:.4} < pid {p:.4}, pid/lmpc {:.2} > 3, runtime {secs:.0} s <= 600 s",
                spec.seeds.len(),
                p / l
            ),
        ));
    }
    if want.contains(&3) {
        let (dp, dl) = (mean_of(&r, ControllerKind::Pid, nisdu), mean_of(&r, ControllerKind::Lmpc, nisdu));
        out.push(outcome(3, dl < dp / 10.0, format!("sim1 NISdU lmpc {dl:.3} < pid {dp:.3} / 10 (ratio {:.1})", dp / dl)));
    }
}

/// One-sided paired t-test critical value, 10% level, for 1..=30 degrees of freedom.
const T90: [f64; 30] = [
    3.078, 1.886, 1.638, 1.533, 1.476, 1.440, 1.415, 1.397, 1.383, 1.372, 1.363, 1.356, 1.350, 1.345, 1.341, 1.337,
    1.333, 1.330, 1.328, 1.325, 1.323, 1.321, 1.319, 1.318, 1.316, 1.315, 1.314, 1.313, 1.311, 1.310,
];

fn sim2(out: &mut Vec<Outcome>) {
    let mut spec = build_scenario("sim2").unwrap();
    spec.controllers = vec![ControllerKind::Pid, ControllerKind::Lmpc];
    let r = run_experiment(&spec).unwrap();
    let diffs: Vec<f64> = spec
        .seeds
        .iter()
        .map(|s| {
            let get = |k| r.runs_of(k).find(|x| x.seed == *s).unwrap().metrics.nise;
            get(ControllerKind::Pid) - get(ControllerKind::Lmpc)
        })
        .collect();
    let (m, sd) = mean_std(&diffs);
    let t = m / (sd / (diffs.len() as f64).sqrt());
    let crit = T90[diffs.len() - 2];
    let (p, l) = (mean_of(&r, ControllerKind::Pid, nise), mean_of(&r, ControllerKind::Lmpc, nise));
    out.push(outcome(
        2,
        m <= 0.0 || t < crit,
        format!("sim2 x{} seeds NISE pid {p:.4} vs lmpc {l:.4}; paired t = {t:.2} (reject pid > lmpc only if t >= {crit})", diffs.len()),
    ));
}

fn sim3(out: &mut Vec<Outcome>) {
    let spec = build_scenario("sim3").unwrap();
    let r = run_experiment(&spec).unwrap();
    let (p, l, n) = (
        mean_of(&r, ControllerKind::Pid, nise),
        mean_of(&r, ControllerKind::Lmpc, nise),
        mean_of(&r, ControllerKind::Nmpc, nise),
    );
    // Offset-free: the disturbance response without process or measurement
    // noise, checked over the 100 s before each later event and the end.
    let mut det = spec.clone();
    det.plant_noise = NoiseParams::zero();
    det.seeds = vec![1];
    let rd = run_experiment(&det).unwrap();
    let events = [spec.duration / 3.0, 2.0 * spec.duration / 3.0, spec.duration];
    let area = spec.params.area;
    let mut worst: f64 = 0.0;
    for run in &rd.runs {
        for &te in &events[1..] {
            for k in (0..run.log.len()).filter(|&k| run.log.t[k] < te && run.log.t[k] >= te - 100.0) {
                for i in 0..2 {
                    worst = worst.max((run.log.x[k][i] / (spec.params.rho * area[i]) - run.log.zbar[k][i]).abs());
                }
            }
        }
    }
    let pass = n < l && l < p && worst < 0.05;
    out.push(outcome(
        4,
        pass,
        format!(
            "sim3 x{} seeds NISE nmpc {n:.4} < lmpc {l:.4} < pid {p:.4}; noise-free worst pre-event |z - zbar| {worst:.1e} cm < 0.05",
            spec.seeds.len()
        ),
    ));
}

fn sim4(out: &mut Vec<Outcome>) {
    let spec = build_scenario("sim4").unwrap();
    let r = run_experiment(&spec).unwrap();
    let (p, l) = (mean_of(&r, ControllerKind::Pid, nise), mean_of(&r, ControllerKind::Lmpc, nise));
    let (dp, dl, dn) = (
        mean_of(&r, ControllerKind::Pid, nisdu),
        mean_of(&r, ControllerKind::Lmpc, nisdu),
        mean_of(&r, ControllerKind::Nmpc, nisdu),
    );
    let gap = (p - l).abs() / p;
    out.push(outcome(
        5,
        gap < 0.3 && dl < dp && dl < dn,
        format!(
            "sim4 x{} seeds |NISE pid {p:.4} - lmpc {l:.4}|/pid = {:.1}% < 30%; NISdU lmpc {dl:.2} < pid {dp:.2}, lmpc {dl:.2} < nmpc {dn:.2}",
            spec.seeds.len(),
            100.0 * gap
        ),
    ));
}

fn identification(out: &mut Vec<Outcome>) {
    let truth = ModelParams::identified();
    let noise = NoiseParams {
        sigma: [2.0; 4],
        sigma_d: [0.0; 4],
        r2: [0.02; 4],
    };
    let x0 = OperatingPoint::from_inputs(Vector2::new(270.0, 270.0), Vector4::zeros(), &truth).unwrap().x_s;
    let t0 = Instant::now();
    let mut drift_err = Vec::new();
    let mut r2_err = Vec::new();
    for seed in 1..=10u64 {
        let u = step_rich_input(2000, 200.0, 340.0, 40, 120, seed);
        let data = generate_dataset(&truth, &noise, &x0, &u, 5.0, 10, seed).unwrap();
        let start = Theta {
            model: ModelParams::nominal(),
            noise: noise.clone(),
        };
        let est = estimate_parameters(&data, &start, &EstimationSpec::drift_stage()).unwrap();
        let want = Theta {
            model: truth.clone(),
            noise: noise.clone(),
        }
        .to_vec();
        let e = relative_errors(&est.theta.to_vec()[..10], &want[..10]);
        drift_err.push(e.iter().cloned().fold(0.0, f64::max));
        if seed <= 3 {
            let start = Theta {
                model: est.theta.model.clone(),
                noise: NoiseParams {
                    sigma: [5.0; 4],
                    sigma_d: [0.0; 4],
                    r2: [0.05; 4],
                },
            };
            let est2 = estimate_parameters(&data, &start, &EstimationSpec::noise_stage()).unwrap();
            let e = relative_errors(&est2.theta.noise.r2, &noise.r2);
            r2_err.push(e.iter().cloned().fold(0.0, f64::max));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let (md, mr) = (median(&drift_err), median(&r2_err));
    out.push(outcome(
        6,
        md < 0.05 && mr < 0.25 && secs <= 300.0,
        format!(
            "drift stage x10 seeds: median of worst relative error {:.2}% < 5%; noise stage x3 seeds: median worst R error {:.1}% < 25%; runtime {secs:.0} s <= 300 s",
            100.0 * md,
            100.0 * mr
        ),
    ));
}

fn fit(out: &mut Vec<Outcome>) {
    let mut rng = NormalRng::seed_from_u64(1);
    let y: Vec<[f64; 4]> = (0..200).map(|_| [0; 4].map(|_: i32| 10.0 + rng.standard_normal())).collect();
    let other: Vec<[f64; 4]> = y.iter().map(|r| r.map(|v| v + 0.3 * rng.standard_normal())).collect();
    let mut mean = [0.0; 4];
    for r in &y {
        for i in 0..4 {
            mean[i] += r[i] / y.len() as f64;
        }
    }
    let self_fit = goodness_of_fit(&y, &y).unwrap();
    let mean_fit = goodness_of_fit(&y, &vec![mean; y.len()]).unwrap();
    // Per-formula value, written out independently.
    let mut want = 0.0;
    for i in 0..4 {
        let num: f64 = y.iter().zip(&other).map(|(a, b)| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
        let den: f64 = y.iter().map(|a| (a[i] - mean[i]).powi(2)).sum::<f64>().sqrt();
        want += 100.0 * (1.0 - num / den) / 4.0;
    }
    let got = goodness_of_fit(&y, &other).unwrap();
    out.push(outcome(
        7,
        self_fit == 100.0 && mean_fit.abs() < 1e-10 && (got - want).abs() < 1e-10,
        format!("self-fit {self_fit}%, mean-fit {mean_fit:.1e}%, formula {got:.6}% vs {want:.6}%"),
    ));
}

fn solvers(out: &mut Vec<Outcome>) {
    let mut rng = NormalRng::seed_from_u64(99);
    let mut qp_gap: f64 = 0.0;
    for case in 0..200 {
        let n = 1 + case % 6;
        let (h, g, lo, hi) = random_qp(&mut rng, n);
        let sol = solve_box_qp(&BoxQp { h: &h, g: &g, lower: &lo, upper: &hi }, None, None, &QpOptions::default()).unwrap();
        let (x, _) = enumerate_box_qp(&h, &g, &lo, &hi);
        qp_gap = qp_gap.max((&sol.x - &x).amax() / (1.0 + x.amax()));
    }

    let p = ModelParams::identified();
    let op = OperatingPoint::from_inputs(Vector2::new(300.0, 300.0), Vector4::zeros(), &p).unwrap();
    let lm = linearize(&p, &op).unwrap();
    let n = 60;
    let cfg = MpcConfig {
        horizon: n,
        ..MpcConfig::default()
    };
    let z = discretize_zoh(&lm, cfg.ts).unwrap();
    let d_dev = Vector4::new(1.0, 0.0, -2.0, 0.5);
    let shooting = AffineShooting {
        a: z.a,
        b: z.b,
        c: op.x_s - z.a * op.x_s - z.b * op.u_s + z.e * d_dev,
    };
    let x_dev = Vector4::new(-900.0, 600.0, 200.0, -300.0);
    let refs: Vec<Vector2<f64>> = (0..n).map(|j| op.z_s + Vector2::new(if j < 20 { 10.0 } else { -3.0 }, -8.0)).collect();
    let u_prev = Vector2::new(310.0, 290.0);
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
    let sqp = solve_sqp(&nlp, ShootingIterate::constant(nlp.x0, u_prev, n), None, &SqpOptions::default()).unwrap();
    let mut lmpc = Lmpc::new(lm.clone(), &NoiseParams::simulation_default(), cfg.clone(), InitialBeliefConfig::default()).unwrap();
    let u_qp = lmpc.optimal_inputs(&x_dev, &d_dev, &refs, &u_prev).unwrap();
    let sqp_gap = sqp.iterate.u.iter().zip(&u_qp).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);

    let shooting = Rk4Shooting {
        model: QuadTank::new(p.clone()).unwrap(),
        d: Vector4::new(0.0, 0.0, 5.0, 0.0),
        ts: 5.0,
        steps: 10,
    };
    let m = 15;
    let nlp = NlpProblem {
        model: &shooting,
        x0: op.x_s + Vector4::new(-2000.0, 1500.0, 800.0, -600.0),
        cost: TrackingCost {
            cz: lm.cz,
            q: cfg.q,
            s: cfg.s,
            refs: vec![op.z_s + Vector2::new(2.0, -1.0); m],
            u_prev,
        },
        u_min: cfg.u_min,
        u_max: cfg.u_max,
    };
    let u: Vec<Vector2<f64>> = (0..m).map(|j| Vector2::new(260.0 + 6.0 * j as f64, 320.0 - 4.0 * j as f64)).collect();
    let g = nlp.condensed_gradient(&u);
    let mut grad_err: f64 = 0.0;
    for k in 0..2 * m {
        let h = 1e-4;
        let (mut up, mut um) = (u.clone(), u.clone());
        up[k / 2][k % 2] += h;
        um[k / 2][k % 2] -= h;
        let fd = (nlp.rolled_out_objective(&up) - nlp.rolled_out_objective(&um)) / (2.0 * h);
        grad_err = grad_err.max((g[k] - fd).abs() / g[k].abs().max(1.0));
    }
    out.push(outcome(
        8,
        qp_gap < 1e-8 && sqp.converged && sqp_gap < 1e-6 && grad_err < 1e-5,
        format!("box QP vs enumeration (200 cases) {qp_gap:.1e} < 1e-8; SQP vs LMPC QP {sqp_gap:.1e} < 1e-6; gradient vs FD {grad_err:.1e} < 1e-5"),
    ));
}

fn filters(out: &mut Vec<Outcome>) {
    let ts = 5.0;
    let p = ModelParams::identified();
    let op = OperatingPoint::from_inputs(Vector2::new(300.0, 300.0), Vector4::zeros(), &p).unwrap();
    let lm = linearize(&p, &op).unwrap();
    let noise = NoiseParams::identified();
    let kf = LinearFilterModel::new(&lm, &noise, ts).unwrap();
    let mut ekf = AugmentedModel::new(LinearDrift { model: lm.clone() }, lm.c, &noise);
    ekf.rk4_steps = 100;
    let dev = SVector::<f64, 8>::from_column_slice(&[-400.0, 250.0, 100.0, -50.0, 1.0, 2.0, -1.0, 0.0]);
    let cov = SMatrix::<f64, 8, 8>::from_diagonal(&SVector::from_column_slice(&[100.0, 100.0, 100.0, 100.0, 25.0, 25.0, 25.0, 25.0]));
    let mut abs = dev;
    for i in 0..4 {
        abs[i] += op.x_s[i];
    }
    let (mut bk, mut be) = (GaussianBelief::new(dev, cov), GaussianBelief::new(abs, cov));
    for k in 0..20 {
        let du = Vector2::new(5.0 * (k as f64).cos(), 3.0);
        bk = kf_predict(&bk, &du, &kf);
        be = ekf_predict(&be, &(op.u_s + du), &ekf, ts).unwrap();
        let y = lm.c * bk.state() + Vector4::new(0.05, -0.1, 0.0, 0.02);
        bk = filter_update(&bk, &y, &kf.measurement).unwrap().belief;
        be = filter_update(&be, &(y + op.y_s), &kf.measurement).unwrap().belief;
    }
    let mut shifted = be.mean;
    for i in 0..4 {
        shifted[i] -= op.x_s[i];
    }
    let mean_gap = (shifted - bk.mean).amax() / be.mean.amax();
    let cov_gap = (be.cov - bk.cov).amax() / bk.cov.amax();

    // Self-generated data: plant and filter share the noise model.
    let plant = QuadTank::new(p.clone()).unwrap();
    let sim = |noise: &NoiseParams, n: usize, d: Vector4<f64>, d_on: usize, seed: u64| {
        let mut rng = NormalRng::seed_from_u64(seed);
        let mut x = op.x_s;
        let (mut y, mut u) = (Vec::new(), Vec::new());
        for k in 0..n {
            let uk = if (k / 150) % 2 == 0 { Vector2::new(300.0, 300.0) } else { Vector2::new(275.0, 320.0) };
            y.push(measure(&x, &plant, noise, &mut rng).into());
            u.push(uk.into());
            let dk = if k >= d_on { d } else { Vector4::zeros() };
            for _ in 0..10 {
                x = sde_step(&x, &uk, &dk, &plant, noise, ts / 10.0, &mut rng);
            }
        }
        (y, u)
    };
    let noise = NoiseParams {
        sigma: [5.0; 4],
        sigma_d: [0.0; 4],
        r2: [0.02, 0.02, 0.01, 0.01],
    };
    let (y, u) = sim(&noise, 2000, Vector4::zeros(), 2000, 21);
    let model = AugmentedModel::new(plant.clone(), plant.measurement_matrix(), &noise);
    let innov = innovation_sequence(&y, &u, &model, &GaussianBelief::<4>::initial(&op.x_s, &InitialBeliefConfig::default()), ts).unwrap();
    let chi2 = innov.iter().map(|i| i.mahalanobis).sum::<f64>() / innov.len() as f64;

    let plant_noise = NoiseParams {
        sigma: [1.0; 4],
        sigma_d: [0.0; 4],
        r2: [0.02; 4],
    };
    let step = 20.0;
    let (y, u) = sim(&plant_noise, 1500, Vector4::new(0.0, 0.0, step, 0.0), 200, 22);
    let filt = AugmentedModel::new(
        plant.clone(),
        plant.measurement_matrix(),
        &NoiseParams {
            sigma_d: [1.0; 4],
            ..plant_noise
        },
    );
    let mut tail = Vec::new();
    for_each_innovation(&y, &u, &filt, &GaussianBelief::<8>::initial(&op.x_s, &InitialBeliefConfig::default()), ts, |k, upd| {
        if k >= 1200 {
            tail.push(upd.belief.disturbance()[2]);
        }
    })
    .unwrap();
    let d_hat = tail.iter().sum::<f64>() / tail.len() as f64;
    let d_err = (d_hat - step).abs() / step;
    out.push(outcome(
        9,
        mean_gap < 1e-10 && cov_gap < 1e-10 && (chi2 - 4.0).abs() < 0.8 && d_err < 0.02,
        format!(
            "EKF vs KF mean {mean_gap:.1e}, cov {cov_gap:.1e} < 1e-10; mean normalized innovation {chi2:.3} in [3.2, 4.8]; disturbance estimate {d_hat:.3} vs {step} ({:.2}% < 2%)",
            100.0 * d_err
        ),
    ));
}

fn documentation(out: &mut Vec<Outcome>) {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap_or_default();
    let pass = readme.contains("Experimental results") && readme.contains("not reproducible");
    out.push(outcome(10, pass, "README documents the laboratory results as reference points that are not reproducible here".into()));
}

fn main() {
    let want = selected();
    let mut out = Vec::new();
    if want.contains(&1) || want.contains(&3) {
        sim1_and_3(&mut out, &want);
    }
    if want.contains(&2) {
        sim2(&mut out);
    }
    if want.contains(&4) {
        sim3(&mut out);
    }
    if want.contains(&5) {
        sim4(&mut out);
    }
    if want.contains(&6) {
        identification(&mut out);
    }
    if want.contains(&7) {
        fit(&mut out);
    }
    if want.contains(&8) {
        solvers(&mut out);
    }
    if want.contains(&9) {
        filters(&mut out);
    }
    if want.contains(&10) {
        documentation(&mut out);
    }
    let unexpected: Vec<u32> = out.iter().filter(|o| !o.pass && !KNOWN_FAILURES.contains(&o.criterion)).map(|o| o.criterion).collect();
    if !unexpected.is_empty() {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::exit(1);
    }
}
