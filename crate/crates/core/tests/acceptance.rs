//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bros_core::blockmat::{BlockShape, BlockVar};
use bros_core::estimators::{
    assemble_multilayer_hvp, corr_hvp_single_layer, naive_lifted_hvp, sandwich_coefficients, CorrectionCoefficients,
};
use bros_core::linalg::{self, Matrix};
use bros_core::memproxy::{reduction_ratio, slots_to_f64, BlockDims, Method};
use bros_core::moments::{
    expected_self_sandwich, monte_carlo_cross_sandwich, monte_carlo_self_sandwich, weingarten_constants, Rational,
};
use bros_core::problems::{
    finite_difference_hypergradient, make_counterexample, make_hypercleaning, make_quadratic,
    make_quadratic_multilayer, stationarity_surrogate, BilevelProblem, QuadraticProblem,
};
use bros_core::randsrc::{purpose, sample_gaussian_blockvar, sample_probe_set, sample_projector_set, RngStream};
use bros_core::solvers::{run, SolverConfig, SolverMethod, StepSize};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_frob(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm()
}

fn rel_block(a: &BlockVar, b: &BlockVar) -> f64 {
    BlockVar::axpy(-1.0, b, a).unwrap().norm() / b.norm()
}

fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    linalg::norm(&d) / linalg::norm(b)
}

fn c1_weingarten() -> Outcome {
    let c = weingarten_constants(3, 2).unwrap();
    let mut ok = c.a == Rational::new(21, 20) && c.b == Rational::new(3, 20);
    for m in 2..=12usize {
        for r in 2..=m {
            let w = weingarten_constants(m, r).unwrap();
            let (mi, ri) = (m as i64, r as i64);
            ok &= w.a + w.b * mi == Rational::new(mi, ri);
            ok &= w.a_minus_2b() == Rational::new(mi * (ri - 1), ri * (mi - 1));
        }
    }
    outcome(ok, format!("(a, b)(3,2) = ({}, {}); grid 2<=r<=m<=12 exact", c.a, c.b))
}

fn c2_moment_identity() -> Outcome {
    let s = RngStream::new(2024);
    let h = Matrix::diag(&[1.0, 2.0, 3.0]);
    let mc = monte_carlo_self_sandwich(&s.child(1), &h, 2, 200_000).unwrap();
    let want = Matrix::diag(&[39.0 / 20.0, 3.0, 81.0 / 20.0]);
    let e_self = rel_frob(&mc, &want);
    let closed = rel_frob(&expected_self_sandwich(&h, 2).unwrap(), &want);
    let a = Matrix::from_fn(3, 4, |i, j| {
        1.0 + (i as f64) - 0.5 * (j as f64) + 0.25 * ((i * j) as f64)
    });
    let cross = monte_carlo_cross_sandwich(&s.child(2), &a, 2, 2, 200_000).unwrap();
    let e_cross = rel_frob(&cross, &a);
    outcome(
        e_self <= 0.01 && e_cross <= 0.01 && closed < 1e-14,
        format!("E[QHQ] rel err {e_self:.2e}, E[Q_l A Q_t] rel err {e_cross:.2e}"),
    )
}

fn c3_corr_hvp() -> Outcome {
    let s = RngStream::new(7);
    let q = make_quadratic(&s.child(purpose::PROBLEM), 8, 5, 2, 4.0, 0.0, 0.0).unwrap();
    let shape = q.lower_shape().clone();
    let x = [0.5, -0.25];
    let y = q.lower_solution(&x).unwrap();
    let z = sample_gaussian_blockvar(&s.child(1), &shape, 1.0).unwrap();
    let h = q.columnwise_hessian().unwrap().clone();
    let hz = h.matmul(z.block(0));
    let r = 3;
    let trials = 200_000;
    let mut corr_sum = Matrix::zeros(8, 5);
    let mut naive_sum = Matrix::zeros(8, 5);
    let base = s.child(purpose::TRIAL);
    for i in 0..trials {
        let t = base.child(i);
        let p = sample_projector_set(&t.child(purpose::PROJECTOR), &shape, &[r]).unwrap();
        let probes = sample_probe_set(&t.child(purpose::PROBE), &shape, &[r]).unwrap();
        let sample = q.projected_oracles(&t.child(purpose::NOISE), &x, &y, &p).unwrap();
        corr_sum.add_scaled(
            1.0,
            &corr_hvp_single_layer(&p.matrices()[0], z.block(0), &sample, &probes, 0).unwrap(),
        );
        naive_sum.add_scaled(1.0, naive_lifted_hvp(&p, &z, &sample).unwrap().block(0));
    }
    let corr_mean = corr_sum.scaled(1.0 / trials as f64);
    let naive_mean = naive_sum.scaled(1.0 / trials as f64);
    let e_corr = rel_frob(&corr_mean, &hz);
    let predicted_bias = expected_self_sandwich(&h, r).unwrap().matmul(z.block(0)).sub(&hz);
    let e_bias = rel_frob(&naive_mean.sub(&hz), &predicted_bias);
    outcome(
        e_corr <= 0.02 && e_bias <= 0.02,
        format!("corrected mean rel err {e_corr:.2e}; naive bias vs Weingarten prediction rel err {e_bias:.2e}"),
    )
}

fn c4_multilayer() -> Outcome {
    let s = RngStream::new(11);
    let shape = BlockShape::new(vec![(4, 2), (3, 2)]).unwrap();
    let q = make_quadratic_multilayer(&s.child(purpose::PROBLEM), shape.clone(), 2, 3.0, 0.0, 0.0).unwrap();
    let x = [0.3, 0.1];
    let y = q.lower_solution(&x).unwrap();
    let z = sample_gaussian_blockvar(&s.child(1), &shape, 1.0).unwrap();
    let want = q.hvp(&x, &y, &z);
    let ranks = [2, 2];
    let trials = 300_000;
    let mut sum = BlockVar::zeros(&shape);
    let base = s.child(purpose::TRIAL);
    for i in 0..trials {
        let t = base.child(i);
        let p = sample_projector_set(&t.child(purpose::PROJECTOR), &shape, &ranks).unwrap();
        let probes = sample_probe_set(&t.child(purpose::PROBE), &shape, &ranks).unwrap();
        let sample = q.projected_oracles(&t.child(purpose::NOISE), &x, &y, &p).unwrap();
        let est = assemble_multilayer_hvp(&p, &z, &sample, &probes).unwrap();
        sum = BlockVar::axpy(1.0, &est, &sum).unwrap();
    }
    let mean = sum.scaled(1.0 / trials as f64);
    let e = rel_block(&mean, &want);
    outcome(e <= 0.02, format!("coupled L=2 assembled mean rel err {e:.2e}"))
}

fn c5_coefficients() -> Outcome {
    let mut ok = true;
    for m in 2..=12usize {
        for r in 2..=m {
            let c = CorrectionCoefficients::new(m, r).unwrap();
            let (ca, cb, cc) = sandwich_coefficients(m, r).unwrap();
            ok &= c.main == ca - cb && c.trace == cc && c.sharp == cb;
        }
    }
    outcome(
        ok,
        "(main, trace, sharp) = (c_A - c_B, c_C, c_B) exact on 2<=r<=m<=12".into(),
    )
}

fn counterexample_config(method: SolverMethod, iterations: usize, alpha: f64) -> SolverConfig {
    SolverConfig {
        iterations,
        step: StepSize::Fixed(alpha),
        c1: 1.0,
        c2: 1.0,
        c3: 1.0,
        ranks: if method == SolverMethod::MaSoba {
            vec![]
        } else {
            vec![2]
        },
        seed: 7,
        eval_stride: if method.is_mean_field() { 1000 } else { 1 },
        ..SolverConfig::default()
    }
}

fn c6_counterexample_mean_field() -> Outcome {
    let p = make_counterexample();
    let naive = run(
        &p,
        &counterexample_config(SolverMethod::NaiveMeanField, 20_000, 0.05),
        SolverMethod::NaiveMeanField,
    )
    .unwrap();
    let fin = naive.final_state.as_ref().unwrap();
    let x_bar = fin.x[0];
    let g_bar = p.exact_hypergradient(&fin.x).unwrap()[0].abs();
    let z_bar = fin.z.block(0)[(0, 0)];
    let naive_ok = (x_bar + 20.0 / 39.0).abs() <= 1e-8
        && (g_bar - 19.0 / 39.0).abs() <= 1e-8
        && (z_bar - 20.0 / 39.0).abs() <= 1e-8;

    let bros = run(
        &p,
        &counterexample_config(SolverMethod::BrosMeanField, 20_000, 0.05),
        SolverMethod::BrosMeanField,
    )
    .unwrap();
    let x_bros = bros.final_state.as_ref().unwrap().x[0];
    let masoba = run(
        &p,
        &counterexample_config(SolverMethod::MaSoba, 20_000, 0.05),
        SolverMethod::MaSoba,
    )
    .unwrap();
    let x_ma = masoba.final_state.as_ref().unwrap().x[0];
    let ok = naive_ok && (x_bros + 1.0).abs() <= 1e-4 && (x_ma + 1.0).abs() <= 1e-4;
    outcome(
        ok,
        format!(
            "naive x = {x_bar:.12} |grad| = {g_bar:.12} z1 = {z_bar:.12}; corrected x = {x_bros:.9}; full-space x = {x_ma:.9}"
        ),
    )
}

fn c7_counterexample_stochastic() -> Outcome {
    let p = make_counterexample();
    let tail = |m: SolverMethod| {
        let t = run(&p, &counterexample_config(m, 50_000, 0.005), m).unwrap();
        t.tail_mean(0.2, |r| r.grad_norm).unwrap()
    };
    let bros = tail(SolverMethod::Bros);
    let naive = tail(SolverMethod::NaiveStochastic);
    outcome(
        bros < 0.05 && naive > 0.4,
        format!("tail-averaged |grad|: corrected {bros:.4}, naive {naive:.4}"),
    )
}

fn rate_problem() -> QuadraticProblem {
    make_quadratic(&RngStream::new(5), 8, 4, 3, 4.0, 0.1, 0.0).unwrap()
}

fn c8_rate_trend() -> Outcome {
    let p = rate_problem();
    let vals: Vec<f64> = [5_000usize, 20_000, 80_000]
        .iter()
        .map(|&k| {
            let cfg = SolverConfig {
                iterations: k,
                step: StepSize::Fixed(1.0 / (k as f64).sqrt()),
                ranks: vec![4],
                seed: 3,
                ..SolverConfig::default()
            };
            run(&p, &cfg, SolverMethod::Bros)
                .unwrap()
                .mean(|r| r.grad_norm * r.grad_norm)
                .unwrap()
        })
        .collect();
    let ratio = vals[2] / vals[0];
    outcome(
        vals[0] > vals[1] && vals[1] > vals[2] && ratio <= 0.5,
        format!(
            "avg |grad|^2 = {:.4e}, {:.4e}, {:.4e}; ratio K=8e4/K=5e3 = {ratio:.3} (target 0.25, slack <= 0.5)",
            vals[0], vals[1], vals[2]
        ),
    )
}

fn c9_memory() -> Outcome {
    let dims = |tau: u64| BlockDims {
        n: 1024,
        b: 1,
        s: tau * 1024,
        h: 16,
        r: 256,
        include_attention: false,
    };
    let a = slots_to_f64(reduction_ratio(Method::Bros, Method::MaSoba, &dims(1)).unwrap());
    let b = slots_to_f64(reduction_ratio(Method::Bros, Method::Penalty, &dims(2)).unwrap());
    let pct = |v: f64| format!("{:.1}", 100.0 * v);
    outcome(
        pct(a) == "37.3" && pct(b) == "7.7",
        format!(
            "vs MA-SOBA {:.3}%, vs Penalty {:.3}% (attention excluded)",
            100.0 * a,
            100.0 * b
        ),
    )
}

fn c10_hypercleaning() -> Outcome {
    let p = make_hypercleaning(&RngStream::new(21), 400, 200, 30, 5, 0.3, 0.01)
        .unwrap()
        .with_batches(Some(64), Some(64))
        .unwrap();
    let cfg = |m: SolverMethod| SolverConfig {
        iterations: 5_000,
        step: StepSize::Fixed(0.2),
        c1: 5.0,
        c2: 2.0,
        c3: 1.0,
        ranks: if m == SolverMethod::MaSoba { vec![] } else { vec![10] },
        seed: 1,
        eval_stride: 5_000,
        ..SolverConfig::default()
    };
    let bros = run(&p, &cfg(SolverMethod::Bros), SolverMethod::Bros).unwrap();
    let ma = run(&p, &cfg(SolverMethod::MaSoba), SolverMethod::MaSoba).unwrap();
    let init = bros.records[0].phi;
    let (fb, fm) = (bros.last().unwrap().phi, ma.last().unwrap().phi);
    let red_b = 1.0 - fb / init;
    let red_m = 1.0 - fm / init;
    let gap = (fb - fm).abs() / fm;
    outcome(
        red_b >= 0.2 && red_m >= 0.2 && gap <= 0.1,
        format!(
            "clean validation loss {init:.4} -> corrected {fb:.4} ({:.1}%), full-space {fm:.4} ({:.1}%); gap {:.2}%",
            100.0 * red_b,
            100.0 * red_m,
            100.0 * gap
        ),
    )
}

fn c11_hypergradient_oracle() -> Outcome {
    let q = make_quadratic(&RngStream::new(31), 6, 3, 3, 5.0, 0.0, 0.0).unwrap();
    let xq = [0.4, -1.2, 0.7];
    let gq = q.exact_hypergradient(&xq).unwrap();
    let fq = finite_difference_hypergradient(&q, &xq, 1e-4).unwrap();
    let eq = rel_vec(&gq, &fq);
    let sq = (stationarity_surrogate(&q, &xq).unwrap() - linalg::norm(&fq)).abs() / linalg::norm(&fq);

    let hc = make_hypercleaning(&RngStream::new(32), 60, 40, 10, 3, 0.3, 0.05).unwrap();
    let xh: Vec<f64> = (0..60).map(|i| 0.5 * ((i % 5) as f64 - 2.0)).collect();
    let gh = hc.exact_hypergradient(&xh).unwrap();
    let fh = finite_difference_hypergradient(&hc, &xh, 1e-4).unwrap();
    let eh = rel_vec(&gh, &fh);
    let sh = (stationarity_surrogate(&hc, &xh).unwrap() - linalg::norm(&fh)).abs() / linalg::norm(&fh);
    outcome(
        eq.max(sq) <= 1e-4 && eh.max(sh) <= 1e-4,
        format!("quadratic rel err {eq:.1e} (norm {sq:.1e}); hypercleaning rel err {eh:.1e} (norm {sh:.1e})"),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        (1, "Weingarten constants", c1_weingarten, Duration::from_secs(1)),
        (2, "moment identity", c2_moment_identity, Duration::from_secs(30)),
        (3, "corrected HVP unbiasedness", c3_corr_hvp, Duration::from_secs(120)),
        (4, "multilayer cancellation", c4_multilayer, Duration::from_secs(180)),
        (5, "coefficient consistency", c5_coefficients, Duration::from_secs(1)),
        (
            6,
            "counterexample (mean-field)",
            c6_counterexample_mean_field,
            Duration::from_secs(30),
        ),
        (
            7,
            "counterexample (stochastic)",
            c7_counterexample_stochastic,
            Duration::from_secs(60),
        ),
        (8, "rate trend", c8_rate_trend, Duration::from_secs(600)),
        (9, "memory proxies", c9_memory, Duration::from_secs(1)),
        (10, "hypercleaning smoke", c10_hypercleaning, Duration::from_secs(180)),
        (
            11,
            "hypergradient oracle",
            c11_hypergradient_oracle,
            Duration::from_secs(60),
        ),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, f, limit) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(f));
        let elapsed = t.elapsed();
        let (pass, detail) = match res {
            Ok(o) => (o.pass && elapsed <= limit, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {:<4} {name}: {detail} [{:.2}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
