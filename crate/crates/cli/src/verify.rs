//! The oracle suite behind `adpnet verify`: closed-form Riccati roots,
//! stationarity-equation annihilation, gradient checks against central
//! finite differences, the control-law/LQR-gain identity, and the
//! integrator/filter accuracy properties.

use adpnet::adp::{
    critic_update, hamiltonian, hjb_residual, optimal_control_from_value, LearnerConfig,
    ReservoirApproximator, ReservoirSpec,
};
use adpnet::error_dynamics::{rollout_cost, utility, AffineSystem, CostSpec};
use adpnet::net::{filter_spikes, step_dynamics, Integrator, LeakSpec, NetworkState, SpikeTrain};
use adpnet::oracle::{
    care_residual_norm, finite_difference_gradient, lqr_policy, solve_care, LinearQuadraticProblem,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name,
        passed,
        detail,
    }
}

/// Run the full suite. `perturb_care` injects a fault into the Riccati
/// solution before its residual is measured (negative control for the
/// harness itself).
pub fn run_suite(perturb_care: bool) -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    // Closed-form scalar roots.
    {
        let prob = LinearQuadraticProblem::scalar(0.0, 1.0, 1.0, 1.0).unwrap();
        let mut p = solve_care(&prob).expect("scalar CARE solves");
        if perturb_care {
            p[(0, 0)] += 1e-3;
        }
        let err = (p[(0, 0)] - 1.0).abs();
        let res = care_residual_norm(&p, &prob);
        out.push(check(
            "care-scalar-a0",
            err <= 1e-8 && res <= 1e-8,
            format!("|P - 1| = {err:.3e}, residual = {res:.3e} (tol 1e-8)"),
        ));
    }
    {
        let prob = LinearQuadraticProblem::scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let p = solve_care(&prob).expect("scalar CARE solves");
        let expected = 2.0f64.sqrt() - 1.0;
        let err = (p[(0, 0)] - expected).abs();
        out.push(check(
            "care-scalar-a-1",
            err <= 1e-8,
            format!("|P - (sqrt(2)-1)| = {err:.3e} (tol 1e-8)"),
        ));
    }
    {
        let prob = LinearQuadraticProblem::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let p = solve_care(&prob).expect("2x2 CARE solves");
        let err = (&p - DMatrix::<f64>::identity(2, 2)).norm();
        out.push(check(
            "care-identity-2x2",
            err <= 1e-8,
            format!("|P - I| = {err:.3e} (tol 1e-8)"),
        ));
    }

    // Random stabilizable problem: residual, symmetry, definiteness.
    let prob4 = {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 4;
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
        let qh = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = &qh * qh.transpose() + DMatrix::<f64>::identity(n, n) * 0.1;
        let q = (&q + q.transpose()) * 0.5;
        LinearQuadraticProblem::new(a, b, q, DMatrix::identity(2, 2)).unwrap()
    };
    {
        let p = solve_care(&prob4).expect("4x4 CARE solves");
        let res = care_residual_norm(&p, &prob4);
        let asym = (&p - p.transpose()).amax();
        let min_eig = p
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        out.push(check(
            "care-random-4x4",
            res <= 1e-8 && asym <= 1e-10 && min_eig >= -1e-10,
            format!("residual = {res:.3e}, asymmetry = {asym:.3e}, min eig = {min_eig:.3e}"),
        ));
    }

    // Stationarity-equation annihilation at the Riccati gradient.
    {
        let p = solve_care(&prob4).unwrap();
        let sys = AffineSystem::linear(prob4.a.clone(), prob4.b.clone()).unwrap();
        let cost = CostSpec::new(prob4.q.clone(), prob4.r.clone(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let grad = &p * &x * 2.0;
            worst = worst.max(hjb_residual(&x, &grad, &sys, &cost).unwrap().abs());
        }
        out.push(check(
            "hjb-annihilation",
            worst <= 1e-8,
            format!("max |residual| over 50 states = {worst:.3e} (tol 1e-8)"),
        ));
    }

    // Hamiltonian vanishes at the oracle pair.
    {
        let p = solve_care(&prob4).unwrap();
        let sys = AffineSystem::linear(prob4.a.clone(), prob4.b.clone()).unwrap();
        let cost = CostSpec::new(prob4.q.clone(), prob4.r.clone(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            let grad = &p * &x * 2.0;
            let u = optimal_control_from_value(&x, &grad, &sys, &cost).unwrap();
            worst = worst.max(hamiltonian(&x, &u, &grad, &sys, &cost).unwrap().abs());
        }
        out.push(check(
            "hamiltonian-zero-at-oracle",
            worst <= 1e-10,
            format!("max |H| over 50 states = {worst:.3e} (tol 1e-10)"),
        ));
    }

    // The residual equals the Hamiltonian at the stationary control.
    {
        let sys = AffineSystem::linear(
            DMatrix::from_row_slice(2, 2, &[-0.4, 0.3, 0.1, -0.8]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, -0.3, 0.9]),
        )
        .unwrap();
        let cost = CostSpec::diagonal(2, 1.5, 2, 0.4, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let grad = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let u = optimal_control_from_value(&x, &grad, &sys, &cost).unwrap();
            let lhs = hjb_residual(&x, &grad, &sys, &cost).unwrap();
            let rhs = hamiltonian(&x, &u, &grad, &sys, &cost).unwrap();
            worst = worst.max((lhs - rhs).abs());
        }
        out.push(check(
            "consistency-identity",
            worst <= 1e-10,
            format!("max |residual - H(u*)| over 100 pairs = {worst:.3e} (tol 1e-10)"),
        ));
    }

    // Stationary control equals the LQR gain on both scalar cases.
    {
        let mut worst: f64 = 0.0;
        for a in [0.0, -1.0] {
            let prob = LinearQuadraticProblem::scalar(a, 1.0, 1.0, 1.0).unwrap();
            let p = solve_care(&prob).unwrap();
            let k = lqr_policy(&p, &prob).unwrap();
            let sys = AffineSystem::linear(prob.a.clone(), prob.b.clone()).unwrap();
            let cost = CostSpec::new(prob.q.clone(), prob.r.clone(), 1.0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(80);
            for _ in 0..20 {
                let x = DVector::from_element(1, rng.gen_range(-3.0..3.0));
                let grad = &p * &x * 2.0;
                let u = optimal_control_from_value(&x, &grad, &sys, &cost).unwrap();
                worst = worst.max((u[0] + (&k * &x)[0]).abs());
            }
        }
        out.push(check(
            "lqr-gain-identity",
            worst <= 1e-10,
            format!("max |u* + Kx| = {worst:.3e} (tol 1e-10)"),
        ));
    }

    // Critic update against central finite differences on 1/2 delta^2.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let n = 2;
            let n_c = 3;
            let features = DVector::from_fn(n_c, |_, _| rng.gen_range(-1.0..1.0));
            let v_e = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let v_e_dot = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let w0 = DMatrix::from_fn(n, n_c, |_, _| rng.gen_range(-1.0..1.0));
            let cost = CostSpec::diagonal(n, 1.0, n, 1.0, 1.0).unwrap();

            let mut critic = ReservoirApproximator::new(&ReservoirSpec {
                leak: 1.0,
                ..ReservoirSpec::new(n_c, 1, n, 0)
            })
            .unwrap();
            critic.set_features(features.clone()).unwrap();
            critic.set_readout_weights(w0.clone()).unwrap();
            let cfg = LearnerConfig {
                critic_rate: 1.0,
                normalize: false,
                ..LearnerConfig::default()
            };
            critic_update(&mut critic, &v_e, &u, &v_e_dot, &cost, &cfg).unwrap();
            let analytic = -(critic.readout_weights() - &w0);

            let objective = |wflat: &DVector<f64>| {
                let w = DMatrix::from_iterator(n, n_c, wflat.iter().copied());
                let delta = (w * &features).dot(&v_e_dot) + utility(&v_e, &u, &cost).unwrap();
                0.5 * delta * delta
            };
            let wflat = DVector::from_iterator(n * n_c, w0.iter().copied());
            let fd = finite_difference_gradient(&objective, &wflat, 1e-6).unwrap();
            let fd_mat = DMatrix::from_iterator(n, n_c, fd.iter().copied());
            let rel = (&analytic - &fd_mat).norm() / fd_mat.norm().max(1e-12);
            worst = worst.max(rel);
        }
        out.push(check(
            "gradient-critic",
            worst <= 1e-6,
            format!("max relative error vs finite differences = {worst:.3e} (tol 1e-6)"),
        ));
    }

    // Quadratic-form utility against central finite differences.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let n = 3;
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = (&m + m.transpose()) * 0.5;
            let q = &q * &q + DMatrix::<f64>::identity(n, n) * 0.1;
            let q = (&q + q.transpose()) * 0.5;
            let cost = CostSpec::new(q.clone(), DMatrix::identity(n, n), 1.0).unwrap();
            let v_e = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let uc = u.clone();
            let costc = cost.clone();
            let f = move |x: &DVector<f64>| utility(x, &uc, &costc).unwrap();
            let fd = finite_difference_gradient(&f, &v_e, 1e-6).unwrap();
            let analytic = &q * &v_e * 2.0;
            let rel = (&fd - &analytic).norm() / analytic.norm().max(1e-12);
            worst = worst.max(rel);
        }
        out.push(check(
            "gradient-utility",
            worst <= 1e-6,
            format!("max relative error vs finite differences = {worst:.3e} (tol 1e-6)"),
        ));
    }

    // Leak-only decay against the analytic exponential.
    {
        let mut state = NetworkState::new(DVector::from_element(1, 1.0), 0.0).unwrap();
        let leak = LeakSpec::uniform(1, 1.0).unwrap();
        let input = DVector::zeros(1);
        let mut worst: f64 = 0.0;
        for k in 1..=100 {
            state = step_dynamics(&state, &input, &leak, 0.01, Integrator::Rk4).unwrap();
            let expected = (-(k as f64) * 0.01).exp();
            worst = worst.max(((state.v()[0] - expected) / expected).abs());
        }
        out.push(check(
            "leak-decay-rk4",
            worst <= 1e-5,
            format!("max relative error vs e^-t = {worst:.3e} (tol 1e-5)"),
        ));
    }

    // Spike filter against the analytic impulse response.
    {
        let train = SpikeTrain::new(vec![0.0, 1.0], 1.0).unwrap();
        let q1 = filter_spikes(&train, 1.0);
        let expected = (-1.0f64).exp() + 1.0;
        let err = (q1 - expected).abs();
        let q2 = filter_spikes(&train, 2.5);
        let decay_err = (q2 - q1 * (-1.5f64).exp()).abs();
        out.push(check(
            "spike-filter",
            err <= 1e-12 && decay_err <= 1e-12,
            format!("impulse error = {err:.3e}, decay error = {decay_err:.3e} (tol 1e-12)"),
        ));
    }

    // Integrator order ratios under step halving.
    {
        let exact = (-1.0f64).exp();
        let run = |dt: f64, method: Integrator| {
            let mut state = NetworkState::new(DVector::from_element(1, 1.0), 0.0).unwrap();
            let leak = LeakSpec::uniform(1, 1.0).unwrap();
            let input = DVector::zeros(1);
            for _ in 0..(1.0 / dt).round() as usize {
                state = step_dynamics(&state, &input, &leak, dt, method).unwrap();
            }
            (state.v()[0] - exact).abs()
        };
        let euler = run(0.01, Integrator::Euler) / run(0.005, Integrator::Euler);
        let rk4 = run(0.1, Integrator::Rk4) / run(0.05, Integrator::Rk4);
        out.push(check(
            "integrator-orders",
            (1.6..=2.4).contains(&euler) && (10.0..=22.0).contains(&rk4),
            format!(
                "euler halving ratio = {euler:.2} (in [1.6, 2.4]), rk4 = {rk4:.2} (in [10, 22])"
            ),
        ));
    }

    // Rollout cost under the LQR policy equals the oracle value.
    {
        let prob = LinearQuadraticProblem::scalar(0.0, 1.0, 1.0, 1.0).unwrap();
        let p = solve_care(&prob).unwrap();
        let k = lqr_policy(&p, &prob).unwrap();
        let sys = AffineSystem::linear(prob.a.clone(), prob.b.clone()).unwrap();
        let cost = CostSpec::new(prob.q.clone(), prob.r.clone(), 12.0).unwrap();
        let policy = move |x: &DVector<f64>| -(&k * x);
        let x0 = DVector::from_element(1, 1.0);
        let est = rollout_cost(&sys, &policy, &x0, &cost, 0.001).unwrap();
        let value = p[(0, 0)];
        let rel = (est - value).abs() / value;
        out.push(check(
            "rollout-value-identity",
            rel <= 0.01,
            format!("relative gap rollout vs x0'Px0 = {rel:.3e} (tol 1e-2)"),
        ));
    }

    out
}

/// Print the table and return the exit code.
pub fn cmd_verify(perturb_care: bool) -> i32 {
    let start = std::time::Instant::now();
    let outcomes = run_suite(perturb_care);
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<28} {}", o.name, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    println!(
        "{} checks, {} failed, {:.2} s",
        outcomes.len(),
        failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        crate::EXIT_VERIFY_FAILED
    } else {
        crate::EXIT_OK
    }
}
