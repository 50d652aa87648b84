//! Acceptance run: one PASS/FAIL line per criterion on stderr, exit status 1
//! if any criterion fails. Runs for several minutes on one core.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::time::Instant;

use pmpm::costs::{cfi_value, measurement_distribution};
use pmpm::dynamics::{evolve_costate_backward, evolve_forward, evolve_forward_with};
use pmpm::optimizer::Evaluator;
use pmpm::oracle::{CheckSettings, check_gradients, fd_parameter_derivative, random_control};
use pmpm::spin::{hl_state, jx_eigensystem};
use pmpm::state::{inner, norm_sqr};
use pmpm::{
    AugmentedState, Complex64, ControlProtocol, CostKind, CostatePair, IntegratorSettings,
    OptimizationResult, OptimizerOptions, ProblemSpec, StateVector, optimize,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MAX_ITERS: usize = 1000;

struct Report {
    failures: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, pass: bool, detail: String, started: Instant) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let mut err = std::io::stderr();
        let _ = writeln!(
            err,
            "criterion {id}: {verdict}  {detail}  [{:.1}s]",
            started.elapsed().as_secs_f64()
        );
        if !pass {
            self.failures.push(id);
        }
    }
}

fn spec(n: usize, chi: f64, t: f64) -> ProblemSpec {
    ProblemSpec::new(n, chi, t).unwrap()
}

/// Constant start `Ω ≡ 2Nχ/3`, or `Nχ/2` for CFI.
fn options(spec: &ProblemSpec, cost: &CostKind, n_intervals: usize) -> OptimizerOptions {
    let fraction = match cost {
        CostKind::Cfi { .. } => 0.5,
        _ => 2.0 / 3.0,
    };
    OptimizerOptions {
        n_intervals,
        max_iters: MAX_ITERS,
        init_value: fraction * spec.n_spins as f64 * spec.chi,
        ..OptimizerOptions::for_cost(cost)
    }
}

fn qfi_run(spec: &ProblemSpec, n_intervals: usize) -> OptimizationResult {
    optimize(spec, &CostKind::Qfi, &options(spec, &CostKind::Qfi, n_intervals)).unwrap()
}

fn qfi_of(s: &AugmentedState) -> f64 {
    4.0 * (norm_sqr(&s.psi1) - inner(&s.psi0, &s.psi1).norm_sqr())
}

/// Distance from `x` to the nearest `target + kπ`.
fn phase_distance(x: f64, target: f64) -> f64 {
    let d = (x - target).rem_euclid(PI);
    d.min(PI - d)
}

fn table_instances(r: &mut Report) -> OptimizationResult {
    let started = Instant::now();
    // (N, χ, reference QFI, reference Φ_sd) at N_t = 64.
    let table = [
        (10, 4.0, 88.15, 2.10e-3),
        (20, 1.0, 273.28, 5.55e-3),
        (20, 2.0, 331.88, 1.00e-2),
        (20, 4.0, 364.60, 1.08e-2),
        (30, 1.0, 661.78, 2.86e-2),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    let mut strong = None;
    for (n, chi, qfi, sd) in table {
        let s = spec(n, chi, 1.0);
        let res = qfi_run(&s, 64);
        let ok = res.objective >= 0.98 * qfi
            && res.objective <= (n * n) as f64 * (1.0 + 1e-9)
            && res.diagnostics.phi_sd <= 10.0 * sd;
        pass &= ok;
        detail.push(format!(
            "({n},{chi}) {:.2}/{:.1e}",
            res.objective, res.diagnostics.phi_sd
        ));
        if n == 20 && chi == 4.0 {
            strong = Some(res);
        }
    }
    r.line(1, pass, detail.join(" "), started);
    strong.unwrap()
}

fn interval_trend(r: &mut Report, at_64: &OptimizationResult) {
    let started = Instant::now();
    let s = spec(20, 4.0, 1.0);
    let mut points: Vec<(usize, f64, f64)> = [8, 16, 32]
        .iter()
        .map(|&nt| {
            let res = qfi_run(&s, nt);
            (nt, res.objective, res.diagnostics.phi_sd)
        })
        .collect();
    points.push((64, at_64.objective, at_64.diagnostics.phi_sd));
    let pass = points
        .windows(2)
        .all(|w| w[1].1 >= w[0].1 && w[1].2 < w[0].2);
    let detail = points
        .iter()
        .map(|(nt, q, sd)| format!("N_t={nt} {q:.2}/{sd:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    r.line(2, pass, detail, started);
}

fn bounded_controls(r: &mut Report) {
    let started = Instant::now();
    let reference = [(None, 2895.0), (Some(6.0), 2869.9), (Some(4.0), 2431.1), (Some(2.0), 1347.5)];
    let mut pass = true;
    let mut values = Vec::new();
    let mut detail = Vec::new();
    for (u_max, qfi) in reference {
        let s = spec(100, 0.1, 1.0).with_u_max(u_max).unwrap();
        let res = qfi_run(&s, 100);
        pass &= res.objective >= 0.98 * qfi && res.objective <= 1e4 * (1.0 + 1e-9);
        values.push(res.objective);

        let mut saturated = 0;
        let mut sign_ok = true;
        if let Some(u) = u_max {
            let eval = Evaluator::new(&s, &CostKind::Qfi, IntegratorSettings::default(), 8).unwrap();
            let g = eval.gradient(&res.control, 0.0).unwrap();
            for (w, phi) in res.control.values().iter().zip(&g.phi_integrals) {
                if w.abs() >= u - 1e-9 {
                    saturated += 1;
                    sign_ok &= phi.signum() == -w.signum() && *phi != 0.0;
                }
            }
        }
        pass &= sign_ok;
        let bound = u_max.map_or("none".to_string(), |u| u.to_string());
        detail.push(format!(
            "u_max={bound} {:.2} (saturated {saturated}, signs {})",
            res.objective,
            if sign_ok { "ok" } else { "wrong" }
        ));
    }
    pass &= values.windows(2).all(|w| w[0] > w[1]);
    r.line(3, pass, detail.join("; "), started);
}

fn cfi_optima(r: &mut Report) {
    let started = Instant::now();
    let small = spec(4, 1.0, 1.0);
    let cost = CostKind::cfi(0.0);
    let a = optimize(&small, &cost, &options(&small, &cost, 64)).unwrap();
    let phi_a = a.phase.unwrap();

    // CFI(0) is 0 but CFI(φ) tends to a large value as φ → 0. Warm start from
    // the QFI optimum and refine just off φ = 0.
    let large = spec(100, 0.1, 1.0);
    let cost = CostKind::cfi(0.01);
    let half = options(&large, &cost, 64);
    let warm = optimize(
        &large,
        &CostKind::Qfi,
        &OptimizerOptions { init_value: half.init_value, ..options(&large, &CostKind::Qfi, 64) },
    )
    .unwrap();
    let opts = OptimizerOptions {
        phase_restart: false,
        max_iters: 400,
        initial_control: Some(warm.control.values().to_vec()),
        ..half
    };
    let b = optimize(&large, &cost, &opts).unwrap();
    let phi_b = b.phase.unwrap();

    let ok_a = a.objective >= 0.98 * 8.19 && phase_distance(phi_a, FRAC_PI_2) <= 0.1;
    let ok_b = b.objective >= 0.98 * 2867.5 && phase_distance(phi_b, 0.0) <= 0.1;
    r.line(
        4,
        ok_a && ok_b,
        format!(
            "(4,1) {:.4} at φ={phi_a:.4}; (100,0.1) {:.2} at φ={phi_b:.4}",
            a.objective, b.objective
        ),
        started,
    );
}

fn analytic_limits(r: &mut Report) {
    let started = Instant::now();
    let t = 1.0;
    let mut worst: f64 = 0.0;
    for n in [2usize, 10, 50] {
        let free = spec(n, 0.0, t);
        let off = ControlProtocol::constant(8, t, 0.0).unwrap();
        let hl = AugmentedState {
            psi0: hl_state(n).unwrap(),
            psi1: StateVector::zeros(n + 1),
        };
        let q = qfi_of(evolve_forward(&free, &off, &hl, 1).unwrap().last());
        worst = worst.max((q - (n * n) as f64 * t * t).abs() / ((n * n) as f64 * t * t));
        let coh = AugmentedState::initial(n).unwrap();
        let q = qfi_of(evolve_forward(&free, &off, &coh, 1).unwrap().last());
        worst = worst.max((q - n as f64 * t * t).abs() / (n as f64 * t * t));
    }
    r.line(5, worst <= 1e-6, format!("max relative error {worst:.1e}"), started);
}

fn random_state(dim: usize, rng: &mut ChaCha8Rng) -> StateVector {
    StateVector::new(
        (0..dim)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect(),
    )
}

fn property_suite(r: &mut Report) {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut notes = Vec::new();

    // (a) ψ1(T) against a central difference of ψ0(T).
    let mut a_err: f64 = 0.0;
    for seed in 0..4 {
        let s = spec(10, 2.0, 1.0).with_omega(0.3);
        let c = random_control(8, 1.0, 4.0, seed).unwrap();
        let init = AugmentedState::initial(10).unwrap();
        let psi1 = evolve_forward(&s, &c, &init, 1).unwrap().last().psi1.clone();
        let fd = fd_parameter_derivative(&s, &c, 1e-4).unwrap();
        let diff: Vec<Complex64> = psi1.iter().zip(fd.iter()).map(|(x, y)| x - y).collect();
        a_err = a_err.max((norm_sqr(&diff) / norm_sqr(&fd)).sqrt());
    }
    let a = a_err <= 1e-6;
    notes.push(format!("a {a_err:.1e}"));

    // (b) pairing invariance with random boundary data.
    let mut b_drift: f64 = 0.0;
    for seed in 0..4 {
        let s = spec(8, 3.0, 1.0).with_omega(-0.4);
        let c = random_control(6, 1.0, 4.0, seed).unwrap();
        let init = AugmentedState {
            psi0: random_state(9, &mut rng),
            psi1: random_state(9, &mut rng),
        };
        let term = CostatePair {
            pi0: random_state(9, &mut rng),
            pi1: random_state(9, &mut rng),
        };
        let f = evolve_forward(&s, &c, &init, 4).unwrap();
        let g = evolve_costate_backward(&s, &c, &term, 4).unwrap();
        let reference = term.pairing(f.last());
        for (x, p) in f.states.iter().zip(&g.states) {
            b_drift = b_drift.max((p.pairing(x) - reference).norm() / reference.norm().max(1.0));
        }
    }
    let b = b_drift <= 1e-9;
    notes.push(format!("b {b_drift:.1e}"));

    // (c) costate gradient proportional to the finite-difference gradient.
    let mut c_ok = true;
    let mut c_spread: f64 = 0.0;
    for (k, n) in [4usize, 7, 10].into_iter().enumerate() {
        let s = spec(n, 1.0 + k as f64, 1.0);
        let c = random_control(8, 1.0, 2.0, 10 + k as u64).unwrap();
        for cost in [
            CostKind::Qfi,
            CostKind::cfi(0.7),
            CostKind::Fidelity { target: hl_state(n).unwrap() },
        ] {
            let rep = check_gradients(&s, &c, &cost, &CheckSettings::default()).unwrap();
            c_ok &= rep.passed && rep.proportionality_constant > 0.0;
            c_spread = c_spread.max(rep.proportionality_spread);
        }
    }
    let c = c_ok && c_spread <= 1e-3;
    notes.push(format!("c spread {c_spread:.1e}"));

    // (d) CFI ≤ QFI.
    let eig = jx_eigensystem(6).unwrap();
    let s = spec(6, 1.5, 1.0);
    let mut d = true;
    for seed in 0..120 {
        let ctl = random_control(6, 1.0, 5.0, 100 + seed).unwrap();
        let init = AugmentedState::initial(6).unwrap();
        let fin = evolve_forward(&s, &ctl, &init, 1).unwrap().last().clone();
        let cfi = cfi_value(&measurement_distribution(&fin, &eig, rng.gen_range(0.0..PI)));
        d &= cfi <= qfi_of(&fin) * (1.0 + 1e-9) + 1e-9;
    }
    notes.push(format!("d {}", if d { "ok" } else { "violated" }));

    // (e) norm conservation and ⟨ψ0|ψ1⟩ = 0 at ω = 0.
    let mut e_err: f64 = 0.0;
    for seed in 0..4 {
        let s = spec(12, 2.0, 1.0);
        let ctl = random_control(8, 1.0, 4.0, 200 + seed).unwrap();
        let traj = evolve_forward(&s, &ctl, &AugmentedState::initial(12).unwrap(), 4).unwrap();
        for x in &traj.states {
            e_err = e_err.max((norm_sqr(&x.psi0) - 1.0).abs());
            e_err = e_err.max(inner(&x.psi0, &x.psi1).norm());
        }
    }
    let e = e_err <= 1e-9;
    notes.push(format!("e {e_err:.1e}"));

    // (f) step-halving convergence slope against a fine reference.
    let s = spec(10, 4.0, 1.0);
    let ctl = random_control(4, 1.0, 4.0, 3).unwrap();
    let init = AugmentedState::initial(10).unwrap();
    let at = |m: usize| {
        evolve_forward_with(&s, &ctl, &init, 1, &IntegratorSettings::fixed(m))
            .unwrap()
            .last()
            .clone()
    };
    let reference = at(2048);
    let err = |m: usize| {
        let x = at(m);
        let d: Vec<Complex64> = x
            .psi0
            .iter()
            .chain(x.psi1.iter())
            .zip(reference.psi0.iter().chain(reference.psi1.iter()))
            .map(|(p, q)| p - q)
            .collect();
        norm_sqr(&d).sqrt()
    };
    let slope = (err(32) / err(64)).log2();
    let f = (4.5..=5.5).contains(&slope);
    notes.push(format!("f slope {slope:.2}"));

    r.line(6, a && b && c && d && e && f, notes.join(", "), started);
}

fn strong_twist(r: &mut Report, res: &OptimizationResult) {
    let started = Instant::now();
    let s = spec(20, 4.0, 1.0);
    let threshold = 0.05 * s.n_spins as f64 * s.chi;
    let values = res.control.values();
    // First interval after which the control stays below threshold.
    let off = values
        .iter()
        .rposition(|v| v.abs() > threshold)
        .map_or(0, |i| i + 1);
    let t_off = if off == values.len() {
        res.control.t_final()
    } else {
        res.control.interval_start(off)
    };
    let k = 8;
    let traj = evolve_forward(&s, &res.control, &AugmentedState::initial(20).unwrap(), k).unwrap();
    let psi = &traj.states[off * k].psi0;
    let overlap = inner(&hl_state(20).unwrap(), psi).norm();
    r.line(
        7,
        t_off <= 0.25 && overlap >= 0.9,
        format!("switch-off t={t_off:.4}, HL overlap {overlap:.4}"),
        started,
    );
}

fn fidelity_mode(r: &mut Report) {
    let started = Instant::now();
    let s = spec(20, 4.0, 0.125);
    let cost = CostKind::Fidelity {
        target: hl_state(20).unwrap(),
    };
    let res = optimize(&s, &cost, &options(&s, &cost, 64)).unwrap();
    let overlap = res.objective.sqrt();
    let hc_max = res.diagnostics.hc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    r.line(
        8,
        overlap >= 0.985 && hc_max < 0.0,
        format!(
            "overlap {overlap:.4}, H_c in [{:.3}, {hc_max:.3}]",
            res.diagnostics.hc.iter().copied().fold(f64::INFINITY, f64::min)
        ),
        started,
    );
}

fn main() {
    // `cargo test -- --list` and filters: report no tests and do nothing.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let mut r = Report { failures: Vec::new() };
    let strong = table_instances(&mut r);
    interval_trend(&mut r, &strong);
    bounded_controls(&mut r);
    cfi_optima(&mut r);
    analytic_limits(&mut r);
    property_suite(&mut r);
    strong_twist(&mut r, &strong);
    fidelity_mode(&mut r);
    if !r.failures.is_empty() {
        eprintln!("failed criteria: {:?}", r.failures);
        std::process::exit(1);
    }
}
