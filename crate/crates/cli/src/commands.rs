//! Subcommand implementations. Each returns the text to print on stdout;
//! files are written as a side effect.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use bros_core::blockmat::{BlockShape, BlockVar};
use bros_core::estimators::{assemble_multilayer_hvp, naive_lifted_hvp};
use bros_core::linalg::Matrix;
use bros_core::memproxy::{peak_proxy, reduction_ratio, slots_to_f64, BlockDims, Method, Slots};
use bros_core::moments::{expected_self_sandwich, monte_carlo_cross_sandwich, monte_carlo_self_sandwich};
use bros_core::problems::{make_quadratic, make_quadratic_multilayer, BilevelProblem, QuadraticProblem};
use bros_core::randsrc::{purpose, sample_gaussian_blockvar, sample_probe_set, sample_projector_set, RngStream};
use bros_core::solvers::{run_with_clock, SolverConfig, SolverMethod, Trajectory};

use crate::config::{Alpha, MethodName, ProblemSpec, RunConfig, SolverSpec};
use crate::error::CliError;
use crate::output::{self, content_hash, Cell, Manifest, Table};

/// Where a table goes: stdout, or a file written atomically.
#[derive(Debug, Clone, PartialEq)]
pub enum Sink {
    Stdout,
    File(PathBuf),
}

fn emit(sink: &Sink, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<String, CliError> {
    match sink {
        Sink::Stdout => {
            let mut buf = Vec::new();
            body(&mut buf).expect("writing to memory");
            Ok(String::from_utf8(buf).expect("utf-8 output"))
        }
        Sink::File(path) => {
            output::write_file_atomic(path, body).map_err(|e| CliError::io(path, e))?;
            Ok(format!("wrote {}\n", path.display()))
        }
    }
}

/// `a.b.csv` → `a.b.state.csv`
pub fn state_path(trace: &Path) -> PathBuf {
    let stem = trace.file_stem().unwrap_or_default().to_string_lossy();
    trace.with_file_name(format!("{stem}.state.csv"))
}

fn clock(enabled: bool) -> impl Fn() -> f64 {
    let t0 = Instant::now();
    move || if enabled { t0.elapsed().as_secs_f64() } else { 0.0 }
}

pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub trace: PathBuf,
}

/// Runs an already validated configuration and writes its trace and final
/// state. On failure the partial trace is still written.
fn execute(
    cfg: &RunConfig,
    problem: &(dyn BilevelProblem + Send + Sync),
    solver: &SolverConfig,
    subcommand: &str,
    trace: &Path,
) -> Result<RunOutcome, CliError> {
    let manifest = Manifest::new(subcommand, Some(solver.seed), cfg.to_toml());
    let result = run_with_clock(problem, solver, cfg.method.0, &clock(cfg.wall_time));
    let (traj, failure) = match result {
        Ok(t) => (t, None),
        Err(e) => (e.partial, Some(e.error)),
    };
    output::write_file_atomic(trace, |w| output::write_trajectory(w, &manifest, &traj.records))
        .map_err(|e| CliError::io(trace, e))?;
    if let Some(state) = &traj.final_state {
        let path = state_path(trace);
        output::write_file_atomic(&path, |w| output::write_state(w, &manifest, state))
            .map_err(|e| CliError::io(&path, e))?;
    }
    match failure {
        None => Ok(RunOutcome {
            trajectory: traj,
            trace: trace.to_path_buf(),
        }),
        Some(e) => Err(CliError::Run(format!(
            "{e}; partial trace with {} records in {}",
            traj.records.len(),
            trace.display()
        ))),
    }
}

fn short_hash(cfg: &RunConfig) -> String {
    content_hash(&cfg.to_toml())[..8].to_string()
}

fn summarize(out: &RunOutcome) -> String {
    let mut s = String::new();
    let t = &out.trajectory;
    let _ = writeln!(s, "method: {}", t.method);
    let _ = writeln!(
        s,
        "stepsizes: alpha={} beta={} gamma={} theta={}",
        t.stepsizes.alpha, t.stepsizes.beta, t.stepsizes.gamma, t.stepsizes.theta
    );
    if let Some(r) = t.last() {
        let _ = writeln!(s, "final: k={} grad_norm={:.6e} phi={:.6e}", r.k, r.grad_norm, r.phi);
    }
    let _ = writeln!(s, "trace: {}", out.trace.display());
    let _ = writeln!(s, "state: {}", state_path(&out.trace).display());
    s
}

pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<String, CliError> {
    let (problem, solver) = cfg.resolve()?;
    let trace = cfg
        .output
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("run-{}-{}.csv", cfg.method, short_hash(cfg))));
    let out = execute(cfg, problem.as_ref(), &solver, "run", &trace)?;
    Ok(summarize(&out))
}

pub fn sweep(cfg: &RunConfig, out_dir: &Path, jobs: usize) -> Result<String, CliError> {
    let problem = cfg.problem.build()?;
    let (dir, stem) = match &cfg.output {
        Some(p) => (
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
            p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
        ),
        None => (out_dir.to_path_buf(), format!("sweep-{}", short_hash(cfg))),
    };
    let mut runs = Vec::new();
    for c in cfg.expand_sweep() {
        let solver = c.solver_config()?;
        solver
            .validate(problem.as_ref(), c.method.0)
            .map_err(|e| CliError::Config(format!("{} {:?} seed {}: {e}", c.method, c.solver.ranks, c.solver.seed)))?;
        let ranks = c
            .solver
            .ranks
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let name = format!(
            "{stem}-{}-r{}-k{}-s{}.csv",
            c.method,
            if ranks.is_empty() { "full".into() } else { ranks },
            c.solver.iterations,
            c.solver.seed
        );
        runs.push((c, solver, dir.join(name)));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunOutcome, CliError>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, runs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((c, solver, path)) = runs.get(i) else { break };
                let r = execute(c, problem.as_ref(), solver, "sweep", path);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut text = String::new();
    let mut failed = 0;
    for ((c, _, path), r) in runs.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every run finishes") {
            Ok(out) => {
                let g = out.trajectory.last().map_or(f64::NAN, |r| r.grad_norm);
                let _ = writeln!(
                    text,
                    "ok {} seed={} grad_norm={g:.6e} {}",
                    c.method,
                    c.solver.seed,
                    path.display()
                );
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(text, "failed {} seed={} {e}", c.method, c.solver.seed);
            }
        }
    }
    if failed > 0 {
        print!("{text}");
        return Err(CliError::Run(format!("{failed} of {} sweep runs failed", runs.len())));
    }
    Ok(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CounterexampleMode {
    /// Deterministic recursion with the Weingarten mean of the sketched HVP.
    MeanfieldNaive,
    /// Deterministic recursion with the corrected estimator's mean.
    MeanfieldBros,
    /// Stochastic projected recursion with the uncorrected HVP.
    NaiveStochastic,
    /// Stochastic projected recursion with the bi-probe correction.
    Bros,
    /// Full-space recursion.
    Masoba,
}

impl CounterexampleMode {
    fn method(self) -> SolverMethod {
        match self {
            CounterexampleMode::MeanfieldNaive => SolverMethod::NaiveMeanField,
            CounterexampleMode::MeanfieldBros => SolverMethod::BrosMeanField,
            CounterexampleMode::NaiveStochastic => SolverMethod::NaiveStochastic,
            CounterexampleMode::Bros => SolverMethod::Bros,
            CounterexampleMode::Masoba => SolverMethod::MaSoba,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CounterexampleMode::MeanfieldNaive => "meanfield-naive",
            CounterexampleMode::MeanfieldBros => "meanfield-bros",
            CounterexampleMode::NaiveStochastic => "naive-stochastic",
            CounterexampleMode::Bros => "bros",
            CounterexampleMode::Masoba => "masoba",
        }
    }

    /// Default `(alpha, iterations, eval_stride, seed)`.
    fn preset(self) -> (f64, usize, usize, u64) {
        match self {
            CounterexampleMode::NaiveStochastic | CounterexampleMode::Bros => (0.005, 50_000, 10, 7),
            _ => (0.05, 20_000, 100, 0),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CounterexampleArgs {
    pub iterations: Option<usize>,
    pub alpha: Option<f64>,
    pub rank: Option<usize>,
    pub seed: Option<u64>,
    pub eval_stride: Option<usize>,
    pub output: Option<PathBuf>,
    pub wall_time: bool,
}

pub fn counterexample_config(mode: CounterexampleMode, args: &CounterexampleArgs) -> RunConfig {
    let (alpha, iterations, stride, seed) = mode.preset();
    RunConfig {
        method: MethodName(mode.method()),
        output: args.output.clone(),
        wall_time: args.wall_time,
        problem: ProblemSpec::Counterexample {},
        solver: SolverSpec {
            iterations: args.iterations.unwrap_or(iterations),
            alpha: Alpha::Value(args.alpha.unwrap_or(alpha)),
            ranks: vec![args.rank.unwrap_or(2)],
            seed: args.seed.unwrap_or(seed),
            eval_stride: args.eval_stride.unwrap_or(stride),
            ..SolverSpec::default()
        },
        sweep: None,
    }
}

pub fn counterexample(mode: CounterexampleMode, args: &CounterexampleArgs, out_dir: &Path) -> Result<String, CliError> {
    let cfg = counterexample_config(mode, args);
    let (problem, solver) = cfg.resolve()?;
    let trace = cfg
        .output
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("counterexample-{}.csv", mode.name())));
    let out = execute(&cfg, problem.as_ref(), &solver, "counterexample", &trace)?;
    let t = &out.trajectory;
    let fin = t.final_state.as_ref().expect("completed run has a final state");
    let last = t.last().expect("at least one record");
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}", mode.name());
    let _ = writeln!(s, "x_final = {:.15}", fin.x[0]);
    let _ = writeln!(s, "grad = {:.15}", last.grad_norm);
    if let Some(tail) = t.tail_mean(0.2, |r| r.grad_norm) {
        let _ = writeln!(s, "tail_grad (last 20%) = {tail:.15}");
    }
    let _ = writeln!(s, "z1_final = {:.15}", fin.z.block(0)[(0, 0)]);
    let _ = writeln!(
        s,
        "reference: x* = -1; naive mean-field x = -20/39 = {:.15}, |grad| = 19/39 = {:.15}",
        -20.0 / 39.0,
        19.0 / 39.0
    );
    let _ = writeln!(s, "trace: {}", out.trace.display());
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct MomentsArgs {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

/// Closed form vs Monte Carlo of `E[Q H Q]` for `H = diag(1..m)` and of
/// `E[Q_l A Q_t] = A` for a fixed rectangular `A`.
pub fn verify_moments(args: &MomentsArgs, sink: &Sink) -> Result<String, CliError> {
    if args.trials == 0 {
        return Err(CliError::Config("trials must be >= 1".into()));
    }
    let cfg = |e: bros_core::Error| CliError::Config(e.to_string());
    let mut table = Table::new(&["kind", "m", "r", "i", "j", "closed_form", "monte_carlo", "abs_err"]);
    let base = RngStream::new(args.seed);
    for &m in &args.dims {
        for &r in &args.ranks {
            if r > m {
                continue;
            }
            let stream = base.child(m as u64).child(r as u64);
            let h = Matrix::diag(&(1..=m).map(|i| i as f64).collect::<Vec<_>>());
            let closed = expected_self_sandwich(&h, r).map_err(cfg)?;
            let mc = monte_carlo_self_sandwich(&stream.child(0), &h, r, args.trials).map_err(cfg)?;
            let a = Matrix::from_fn(m, m, |i, j| 1.0 + i as f64 - 0.5 * j as f64);
            let cross = monte_carlo_cross_sandwich(&stream.child(1), &a, r, r, args.trials).map_err(cfg)?;
            for (kind, want, got) in [("self", &closed, &mc), ("cross", &a, &cross)] {
                for i in 0..m {
                    for j in 0..m {
                        let (w, g) = (want[(i, j)], got[(i, j)]);
                        table.push(vec![
                            kind.into(),
                            m.into(),
                            r.into(),
                            i.into(),
                            j.into(),
                            w.into(),
                            g.into(),
                            (g - w).abs().into(),
                        ]);
                    }
                }
            }
        }
    }
    let manifest = Manifest::new(
        "verify-moments",
        Some(args.seed),
        format!(
            "dims = {:?}\nranks = {:?}\ntrials = {}\nseed = {}\n",
            args.dims, args.ranks, args.trials, args.seed
        ),
    );
    emit(sink, |w| table.write_csv(w, &manifest))
}

#[derive(Debug, Clone)]
pub struct EstimatorArgs {
    pub layers: Vec<(usize, usize)>,
    pub ranks: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub conditioning: f64,
}

fn rel_err(a: &BlockVar, b: &BlockVar) -> f64 {
    BlockVar::axpy(-1.0, b, a).map_or(f64::NAN, |d| d.norm()) / b.norm()
}

/// Mean error and spread of the corrected and naive HVP estimators against
/// the exact `𝓗[Z]` on a random quadratic.
pub fn verify_estimators(args: &EstimatorArgs, sink: &Sink) -> Result<String, CliError> {
    if args.trials < 2 {
        return Err(CliError::Config("trials must be >= 2".into()));
    }
    let cfg = |e: bros_core::Error| CliError::Config(e.to_string());
    let base = RngStream::new(args.seed);
    let shape = BlockShape::new(args.layers.clone()).map_err(cfg)?;
    let q: QuadraticProblem = if shape.num_layers() == 1 {
        let (m, n) = shape.layers()[0];
        make_quadratic(&base.child(purpose::PROBLEM), m, n, 1, args.conditioning, 0.0, 0.0)
    } else {
        make_quadratic_multilayer(
            &base.child(purpose::PROBLEM),
            shape.clone(),
            1,
            args.conditioning,
            0.0,
            0.0,
        )
    }
    .map_err(cfg)?;
    let x = [0.5];
    let y = q.lower_solution(&x).map_err(cfg)?;
    let z = sample_gaussian_blockvar(&base.child(1), &shape, 1.0).map_err(cfg)?;
    let truth = q.hvp(&x, &y, &z);
    let mut table = Table::new(&[
        "estimator",
        "layers",
        "r",
        "trials",
        "mean_rel_error",
        "predicted_rel_bias",
        "variance",
        "hvp_queries",
    ]);
    let layers_label = args
        .layers
        .iter()
        .map(|(m, n)| format!("{m}x{n}"))
        .collect::<Vec<_>>()
        .join("+");
    for &r in &args.ranks {
        let ranks: Vec<usize> = shape.layers().iter().map(|&(m, _)| r.min(m)).collect();
        shape.reduced(&ranks).map_err(cfg)?;
        let trials_stream = base.child(purpose::TRIAL).child(r as u64);
        let mut sums = [BlockVar::zeros(&shape), BlockVar::zeros(&shape)];
        let mut sq = [0.0f64; 2];
        let mut queries = [0usize; 2];
        for i in 0..args.trials {
            let t = trials_stream.child(i as u64);
            let p = sample_projector_set(&t.child(purpose::PROJECTOR), &shape, &ranks).map_err(cfg)?;
            let probes = sample_probe_set(&t.child(purpose::PROBE), &shape, &ranks).map_err(cfg)?;
            let sample = q.projected_oracles(&t.child(purpose::NOISE), &x, &y, &p).map_err(cfg)?;
            let corr = assemble_multilayer_hvp(&p, &z, &sample, &probes).map_err(cfg)?;
            queries[0] = sample.hvp_queries();
            let sample = q.projected_oracles(&t.child(purpose::NOISE), &x, &y, &p).map_err(cfg)?;
            let naive = naive_lifted_hvp(&p, &z, &sample).map_err(cfg)?;
            queries[1] = sample.hvp_queries();
            for (j, est) in [corr, naive].into_iter().enumerate() {
                sq[j] += est.norm().powi(2);
                sums[j] = BlockVar::axpy(1.0, &est, &sums[j]).map_err(cfg)?;
            }
        }
        let n = args.trials as f64;
        let predicted_naive = match q.columnwise_hessian() {
            Some(h) => {
                let bias = expected_self_sandwich(h, ranks[0])
                    .map_err(cfg)?
                    .matmul(z.block(0))
                    .sub(truth.block(0));
                bias.frobenius_norm() / truth.norm()
            }
            None => f64::NAN,
        };
        for (j, name) in ["corrected", "naive"].into_iter().enumerate() {
            let mean = sums[j].scaled(1.0 / n);
            // Unbiased total variance: E‖X − E X‖².
            let variance = (sq[j] - n * mean.norm().powi(2)) / (n - 1.0);
            let predicted = if j == 0 { 0.0 } else { predicted_naive };
            table.push(vec![
                name.into(),
                layers_label.clone().into(),
                r.into(),
                args.trials.into(),
                rel_err(&mean, &truth).into(),
                predicted.into(),
                variance.into(),
                queries[j].into(),
            ]);
        }
    }
    let manifest = Manifest::new(
        "verify-estimators",
        Some(args.seed),
        format!(
            "layers = {:?}\nranks = {:?}\ntrials = {}\nseed = {}\nconditioning = {}\n",
            args.layers, args.ranks, args.trials, args.seed, args.conditioning
        ),
    );
    emit(sink, |w| table.write_csv(w, &manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TableFormat {
    Table,
    Csv,
}

#[derive(Debug, Clone)]
pub struct MemoryArgs {
    pub methods: Vec<Method>,
    pub baseline: Method,
    pub n: u64,
    pub b: u64,
    pub s: Option<u64>,
    pub bs_ratio: f64,
    pub heads: u64,
    pub rank: Option<u64>,
    pub rank_ratios: Vec<f64>,
    pub attention: bool,
    pub format: TableFormat,
}

fn exact_multiple(ratio: f64, n: u64, what: &str) -> Result<u64, CliError> {
    let v = ratio * n as f64;
    let rounded = v.round();
    if !(ratio >= 0.0) || (v - rounded).abs() > 1e-9 * v.max(1.0) {
        return Err(CliError::Config(format!(
            "{what} = {ratio} * {n} is not a non-negative integer"
        )));
    }
    Ok(rounded as u64)
}

fn exact_str(q: Slots) -> String {
    if *q.denom() == 1 {
        q.numer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}

pub fn memory_proxy(args: &MemoryArgs, sink: &Sink) -> Result<String, CliError> {
    let cfg = |e: bros_core::Error| CliError::Config(e.to_string());
    let s = match args.s {
        Some(s) => s,
        None => {
            let bs = exact_multiple(args.bs_ratio, args.n, "b*s")?;
            if bs % args.b.max(1) != 0 {
                return Err(CliError::Config(format!(
                    "b*s = {bs} is not divisible by b = {}",
                    args.b
                )));
            }
            bs / args.b.max(1)
        }
    };
    let ranks: Vec<(u64, f64)> = match args.rank {
        Some(r) => vec![(r, r as f64 / args.n as f64)],
        None => args
            .rank_ratios
            .iter()
            .map(|&q| {
                if !(0.0..=1.0).contains(&q) {
                    return Err(CliError::Config(format!("rank ratio {q} outside [0, 1]")));
                }
                // Nearest integer rank; the ratio column reports r/n actually used.
                let r = (q * args.n as f64).round() as u64;
                Ok((r, r as f64 / args.n as f64))
            })
            .collect::<Result<_, CliError>>()?,
    };
    let reduction_col = format!("reduction_vs_{}", args.baseline);
    let mut table = Table::new(&[
        "method",
        "n",
        "b",
        "s",
        "heads",
        "r",
        "rank_ratio",
        "attention",
        "state",
        "hidden_activation",
        "attention_slots",
        "projected_activation",
        "directions",
        "total",
        "total_exact",
        "total_per_n2",
        &reduction_col,
        "reduction_exact",
    ]);
    for &(r, ratio) in &ranks {
        let dims = BlockDims {
            n: args.n,
            b: args.b,
            s,
            h: args.heads,
            r,
            include_attention: args.attention,
        };
        for &m in &args.methods {
            let bd = peak_proxy(m, &dims).map_err(cfg)?;
            let red = reduction_ratio(m, args.baseline, &dims).map_err(cfg)?;
            let f = slots_to_f64;
            table.push(vec![
                m.name().into(),
                args.n.into(),
                args.b.into(),
                s.into(),
                args.heads.into(),
                r.into(),
                ratio.into(),
                args.attention.to_string().into(),
                f(bd.state).into(),
                f(bd.hidden_activation).into(),
                f(bd.attention).into(),
                f(bd.projected_activation).into(),
                f(bd.directions).into(),
                f(bd.total).into(),
                exact_str(bd.total).into(),
                (f(bd.total) / (args.n as f64).powi(2)).into(),
                f(red).into(),
                exact_str(red).into(),
            ]);
        }
    }
    match args.format {
        TableFormat::Csv => {
            let manifest = Manifest::new(
                "memory-proxy",
                None,
                format!(
                    "methods = {:?}\nbaseline = {:?}\nn = {}\nb = {}\ns = {}\nheads = {}\nranks = {:?}\ninclude_attention = {}\n",
                    args.methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
                    args.baseline.name(),
                    args.n,
                    args.b,
                    s,
                    args.heads,
                    ranks.iter().map(|r| r.0).collect::<Vec<_>>(),
                    args.attention
                ),
            );
            emit(sink, |w| table.write_csv(w, &manifest))
        }
        TableFormat::Table => {
            let keep = [0usize, 5, 8, 9, 10, 11, 12, 13, 15, 16];
            let narrow = Table {
                columns: keep.iter().map(|&j| table.columns[j].clone()).collect(),
                rows: table
                    .rows
                    .iter()
                    .map(|row| keep.iter().map(|&j| row[j].clone()).collect())
                    .collect(),
            };
            let pct = narrow.columns.len() - 1;
            let per_n2 = narrow.columns.len() - 2;
            emit(sink, |w| {
                writeln!(
                    w,
                    "# n={} b={} s={} heads={} attention={}",
                    args.n,
                    args.b,
                    s,
                    args.heads,
                    if args.attention { "included" } else { "excluded" }
                )?;
                narrow.write_aligned(w, |j, c| match c {
                    Cell::Real(v) if j == pct => format!("{:.1}%", 100.0 * v),
                    Cell::Real(v) if j == per_n2 => format!("{v:.4}"),
                    Cell::Real(v) => format!("{v:.0}"),
                    other => other.render(),
                })?;
                for row in &table.rows {
                    if let (Cell::Text(m), Cell::Real(v), Cell::Text(exact)) = (&row[0], &row[16], &row[17]) {
                        if m != args.baseline.name() {
                            let r = row[5].render();
                            writeln!(
                                w,
                                "{m} (r={r}): reduction vs {} {:.1}% (exact {exact})",
                                args.baseline,
                                100.0 * v
                            )?;
                        }
                    }
                }
                Ok(())
            })
        }
    }
}
