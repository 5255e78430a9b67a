//! Coupled single-loop recursions on `(x, Y, Z, h)`.
//!
//! Every method runs
//!
//! ```text
//! x ← x − α h
//! Y ← Y − β V̂
//! Z ← Z − γ Ŝ
//! h ← (1 − θ) h + θ Ŵ
//! ```
//!
//! with `β = c₁α`, `γ = c₂α`, `θ = c₃α`, all directions evaluated at the
//! pre-update state. The methods differ only in how `(V̂, Ŝ, Ŵ)` are formed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::blockmat::BlockVar;
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    build_aux_direction, build_hypergrad_sample, build_lower_direction, build_naive_aux_direction,
    mean_field_corrected_hvp,
};
use crate::linalg::{self, Matrix};
use crate::math;
use crate::moments::mean_field_lifted_hessian;
use crate::problems::BilevelProblem;
use crate::randsrc::{purpose, sample_probe_set, sample_projector_set, ProjectorSet, RngStream};

/// State norms above this abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSize {
    Fixed(f64),
    /// `α = min(ᾱ, 1/√K)`.
    Auto {
        alpha_bar: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverMethod {
    /// Projected directions with the corrected HVP.
    Bros,
    /// Full-space directions.
    MaSoba,
    /// Projected directions with the uncorrected sketch-then-lift HVP.
    NaiveStochastic,
    /// Deterministic recursion with `E[QHQ]` in place of the sketched HVP.
    NaiveMeanField,
    /// Deterministic recursion with the corrected estimator's conditional mean.
    BrosMeanField,
}

impl SolverMethod {
    pub const ALL: [SolverMethod; 5] = [
        SolverMethod::Bros,
        SolverMethod::MaSoba,
        SolverMethod::NaiveStochastic,
        SolverMethod::NaiveMeanField,
        SolverMethod::BrosMeanField,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Bros => "bros",
            SolverMethod::MaSoba => "masoba",
            SolverMethod::NaiveStochastic => "naive-stochastic",
            SolverMethod::NaiveMeanField => "naive-meanfield",
            SolverMethod::BrosMeanField => "bros-meanfield",
        }
    }

    pub fn is_mean_field(self) -> bool {
        matches!(self, SolverMethod::NaiveMeanField | SolverMethod::BrosMeanField)
    }
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.to_ascii_lowercase().replace('_', "-");
        SolverMethod::ALL
            .into_iter()
            .find(|m| m.name() == key || (key == "ma-soba" && *m == SolverMethod::MaSoba))
            .ok_or_else(|| invalid("method", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub iterations: usize,
    pub step: StepSize,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// One rank per lower layer; ignored by full-space methods.
    pub ranks: Vec<usize>,
    pub seed: u64,
    /// Frobenius-norm ball radius for `Z` after each update.
    pub z_clip: Option<f64>,
    /// Metrics are recorded at `k = 0, stride, 2·stride, …` and at `K`.
    pub eval_stride: usize,
    /// Defaults to zero.
    pub x0: Option<Vec<f64>>,
    /// When set, iterates with `k ≥ average_from` are averaged into
    /// [`Trajectory::x_average`] and [`Trajectory::z_average`].
    pub average_from: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            iterations: 1000,
            step: StepSize::Fixed(0.01),
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            ranks: Vec::new(),
            seed: 0,
            z_clip: None,
            eval_stride: 1,
            x0: None,
            average_from: None,
        }
    }
}

/// Per-level stepsizes `(α, β, γ, θ) = (α, c₁α, c₂α, c₃α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stepsizes {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
}

impl Stepsizes {
    pub fn new(alpha: f64, c1: f64, c2: f64, c3: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(invalid("alpha", format!("must be finite and >= 0, got {alpha}")));
        }
        for (name, c) in [("c1", c1), ("c2", c2), ("c3", c3)] {
            if !(c > 0.0) || !c.is_finite() {
                return Err(invalid(name, format!("must be finite and > 0, got {c}")));
            }
        }
        let theta = c3 * alpha;
        if theta > 1.0 {
            return Err(invalid("c3", format!("theta = c3 * alpha = {theta} exceeds 1")));
        }
        Ok(Stepsizes {
            alpha,
            beta: c1 * alpha,
            gamma: c2 * alpha,
            theta,
        })
    }
}

impl SolverConfig {
    pub fn alpha(&self) -> f64 {
        match self.step {
            StepSize::Fixed(a) => a,
            StepSize::Auto { alpha_bar } => alpha_bar.min(1.0 / math::sqrt(self.iterations.max(1) as f64)),
        }
    }

    pub fn stepsizes(&self) -> Result<Stepsizes> {
        Stepsizes::new(self.alpha(), self.c1, self.c2, self.c3)
    }

    /// Checks the configuration against a problem and method.
    pub fn validate<B: BilevelProblem + ?Sized>(&self, problem: &B, method: SolverMethod) -> Result<Stepsizes> {
        let steps = self.stepsizes()?;
        if !(steps.alpha > 0.0) {
            return Err(invalid("alpha", "must be > 0"));
        }
        if self.eval_stride == 0 {
            return Err(invalid("eval_stride", "must be >= 1"));
        }
        if let Some(c) = self.z_clip {
            if !(c > 0.0) {
                return Err(invalid("z_clip", "must be > 0"));
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != problem.upper_dim() {
                return Err(Error::ShapeMismatch {
                    op: "x0",
                    expected: format!("length {}", problem.upper_dim()),
                    found: format!("{}", x0.len()),
                });
            }
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(invalid("x0", "non-finite entry"));
            }
        }
        if method != SolverMethod::MaSoba {
            problem.lower_shape().reduced(&self.ranks)?;
            if self.ranks.iter().any(|&r| r < 2) {
                return Err(invalid("ranks", "every rank must be >= 2"));
            }
        }
        if method.is_mean_field() && problem.columnwise_hessian().is_none() {
            return Err(Error::Unsupported(
                "mean-field modes need a single-layer problem with a constant columnwise Hessian",
            ));
        }
        Ok(steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub x: Vec<f64>,
    pub y: BlockVar,
    pub z: BlockVar,
    pub h: Vec<f64>,
    pub k: usize,
}

impl SolverState {
    /// `Y = Z = 0`, `h = 0`, `x = x0` (zero by default).
    pub fn initial<B: BilevelProblem + ?Sized>(problem: &B, x0: Option<&[f64]>) -> Self {
        let shape = problem.lower_shape();
        SolverState {
            x: x0.map_or_else(|| vec![0.0; problem.upper_dim()], <[f64]>::to_vec),
            y: BlockVar::zeros(shape),
            z: BlockVar::zeros(shape),
            h: vec![0.0; problem.upper_dim()],
            k: 0,
        }
    }

    /// Largest of the four component norms, or infinity if any entry is not
    /// finite.
    pub fn max_norm(&self) -> f64 {
        let finite = self.x.iter().chain(&self.h).all(|v| v.is_finite()) && self.y.is_finite() && self.z.is_finite();
        if !finite {
            return f64::INFINITY;
        }
        linalg::norm(&self.x)
            .max(linalg::norm(&self.h))
            .max(self.y.norm())
            .max(self.z.norm())
    }
}

/// Directions `(V̂, Ŝ, Ŵ)` for one step.
struct Directions {
    v: BlockVar,
    s: BlockVar,
    w: Vec<f64>,
}

fn apply_update(state: &SolverState, d: Directions, steps: &Stepsizes, z_clip: Option<f64>) -> SolverState {
    let mut x = state.x.clone();
    linalg::axpy_slice(-steps.alpha, &state.h, &mut x);
    let mut y = state.y.clone();
    y.add_scaled(-steps.beta, &d.v);
    let mut z = state.z.clone();
    z.add_scaled(-steps.gamma, &d.s);
    if let Some(c) = z_clip {
        let nz = z.norm();
        if nz > c {
            z = z.scaled(c / nz);
        }
    }
    let mut h: Vec<f64> = state.h.iter().map(|v| (1.0 - steps.theta) * v).collect();
    linalg::axpy_slice(steps.theta, &d.w, &mut h);
    SolverState {
        x,
        y,
        z,
        h,
        k: state.k + 1,
    }
}

fn check_divergence(state: &SolverState) -> Result<()> {
    let n = state.max_norm();
    if n > DIVERGENCE_THRESHOLD {
        return Err(Error::Divergence {
            iteration: state.k,
            norm: n,
        });
    }
    Ok(())
}

fn projected_step<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    state: &SolverState,
    stream: &RngStream,
    corrected: bool,
) -> Result<SolverState> {
    let steps = config.stepsizes()?;
    let shape = problem.lower_shape();
    let p = sample_projector_set(&stream.child(purpose::PROJECTOR), shape, &config.ranks)?;
    let sample = problem.projected_oracles(&stream.child(purpose::NOISE), &state.x, &state.y, &p)?;
    let s = if corrected {
        let probes = sample_probe_set(&stream.child(purpose::PROBE), shape, &config.ranks)?;
        build_aux_direction(&p, &state.z, &sample, &probes)?
    } else {
        build_naive_aux_direction(&p, &state.z, &sample)?
    };
    let d = Directions {
        v: build_lower_direction(&p, &sample)?,
        s,
        w: build_hypergrad_sample(&p, &state.z, &sample)?,
    };
    drop(sample);
    let next = apply_update(state, d, &steps, config.z_clip);
    check_divergence(&next)?;
    Ok(next)
}

/// One projected step with the corrected auxiliary direction. Randomness
/// comes from `stream` (projectors, probes and oracle noise use fixed
/// purpose children).
pub fn bros_step<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    state: &SolverState,
    stream: &RngStream,
) -> Result<SolverState> {
    projected_step(problem, config, state, stream, true)
}

/// One projected step with the uncorrected auxiliary direction.
pub fn naive_step<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    state: &SolverState,
    stream: &RngStream,
) -> Result<SolverState> {
    projected_step(problem, config, state, stream, false)
}

/// One full-space step.
pub fn masoba_step<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    state: &SolverState,
    stream: &RngStream,
) -> Result<SolverState> {
    let steps = config.stepsizes()?;
    let oracle = problem.draw_oracle(&stream.child(purpose::NOISE), &state.x, &state.y)?;
    let mut s = oracle.hvp(&state.z);
    s.add_scaled(-1.0, &oracle.grad_y_upper);
    let mut w = oracle.grad_x_upper.clone();
    linalg::axpy_slice(-1.0, &oracle.jvp(&state.z), &mut w);
    let d = Directions {
        v: oracle.grad_y_lower.clone(),
        s,
        w,
    };
    drop(oracle);
    let next = apply_update(state, d, &steps, config.z_clip);
    check_divergence(&next)?;
    Ok(next)
}

/// One deterministic mean-field step with exact lower tracking
/// (`Y = Y*(x)`). `corrected` selects the corrected estimator's mean
/// (`HZ`) instead of the naive lift's mean (`H̄Z`).
pub fn mean_field_step<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    state: &SolverState,
    corrected: bool,
) -> Result<SolverState> {
    let steps = config.stepsizes()?;
    let h = problem.columnwise_hessian().ok_or(Error::Unsupported(
        "mean-field modes need a single-layer problem with a constant columnwise Hessian",
    ))?;
    let r = *config
        .ranks
        .first()
        .ok_or_else(|| invalid("ranks", "mean-field mode needs one rank"))?;
    let z = state.z.block(0);
    let hz = if corrected {
        mean_field_corrected_hvp(h, z, r)?
    } else {
        mean_field_lifted_hessian(h, r)?.try_matmul(z)?
    };
    let y = problem.lower_solution(&state.x)?;
    let mut s = BlockVar::single(hz);
    s.add_scaled(-1.0, &problem.grad_y_upper(&state.x, &y));
    let mut w = problem.grad_x_upper(&state.x, &y);
    linalg::axpy_slice(-1.0, &problem.jvp(&state.x, &y, &state.z), &mut w);
    let mut next = apply_update(
        state,
        Directions {
            v: BlockVar::zeros(problem.lower_shape()),
            s,
            w,
        },
        &steps,
        config.z_clip,
    );
    next.y = problem.lower_solution(&next.x)?;
    check_divergence(&next)?;
    Ok(next)
}

/// Metrics at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub k: usize,
    /// `‖∇Φ(x^k)‖`
    pub grad_norm: f64,
    /// `Φ(x^k)`
    pub phi: f64,
    /// `f(x^k, Y^k)`
    pub upper_at_iterate: f64,
    /// `‖Y^k − Y*(x^k)‖`
    pub y_err: f64,
    /// `‖Z^k − Z*(x^k)‖`
    pub z_err: f64,
    /// `‖h^k − ∇Φ(x^k)‖`
    pub h_err: f64,
    /// Seconds since the run started, as reported by the run's clock.
    pub wall_time: f64,
}

impl EvalRecord {
    pub const COLUMNS: [&'static str; 8] = [
        "k",
        "grad_norm",
        "phi",
        "upper_at_iterate",
        "y_err",
        "z_err",
        "h_err",
        "wall_time",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.grad_norm,
            self.phi,
            self.upper_at_iterate,
            self.y_err,
            self.z_err,
            self.h_err,
            self.wall_time,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub method: SolverMethod,
    pub stepsizes: Stepsizes,
    pub records: Vec<EvalRecord>,
    pub final_state: Option<SolverState>,
    pub x_average: Option<Vec<f64>>,
    pub z_average: Option<BlockVar>,
}

impl Trajectory {
    fn new(method: SolverMethod, stepsizes: Stepsizes) -> Self {
        Trajectory {
            method,
            stepsizes,
            records: Vec::new(),
            final_state: None,
            x_average: None,
            z_average: None,
        }
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// Mean of `metric` over records with `k ≥ (1 − fraction)·K_last`.
    pub fn tail_mean(&self, fraction: f64, metric: impl Fn(&EvalRecord) -> f64) -> Option<f64> {
        let last_k = self.records.last()?.k as f64;
        let start = (1.0 - fraction) * last_k;
        let (sum, count) = self
            .records
            .iter()
            .filter(|r| r.k as f64 >= start)
            .fold((0.0, 0usize), |(s, c), r| (s + metric(r), c + 1));
        (count > 0).then(|| sum / count as f64)
    }

    /// Mean of `metric` over all records.
    pub fn mean(&self, metric: impl Fn(&EvalRecord) -> f64) -> Option<f64> {
        self.tail_mean(1.0, metric)
    }
}

/// A failed run with everything recorded before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunError {
    pub error: Error,
    pub partial: Trajectory,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} records)", self.error, self.partial.records.len())
    }
}

impl core::error::Error for RunError {}

/// Metrics at `state` with inner solves for `Y*(x)` and `Z*(x)`.
pub fn evaluate<B: BilevelProblem + ?Sized>(problem: &B, state: &SolverState, wall_time: f64) -> Result<EvalRecord> {
    let x = &state.x;
    let y_star = problem.lower_solution(x)?;
    let z_star = problem.aux_solution_at(x, &y_star)?;
    let mut grad = problem.grad_x_upper(x, &y_star);
    linalg::axpy_slice(-1.0, &problem.jvp(x, &y_star, &z_star), &mut grad);
    let h_err = linalg::norm(&grad.iter().zip(&state.h).map(|(g, h)| h - g).collect::<Vec<_>>());
    Ok(EvalRecord {
        k: state.k,
        grad_norm: linalg::norm(&grad),
        phi: problem.upper_objective(x, &y_star),
        upper_at_iterate: problem.upper_objective(x, &state.y),
        y_err: BlockVar::axpy(-1.0, &y_star, &state.y)?.norm(),
        z_err: BlockVar::axpy(-1.0, &z_star, &state.z)?.norm(),
        h_err,
        wall_time,
    })
}

/// Runs `method` for `config.iterations` steps; step `k` draws from
/// `RngStream::new(seed).child(k)`.
pub fn run<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    method: SolverMethod,
) -> core::result::Result<Trajectory, RunError> {
    run_with_clock(problem, config, method, &|| 0.0)
}

/// [`run`] with a caller-supplied clock for the `wall_time` column.
pub fn run_with_clock<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    method: SolverMethod,
    clock: &dyn Fn() -> f64,
) -> core::result::Result<Trajectory, RunError> {
    let placeholder = Stepsizes {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        theta: 0.0,
    };
    let steps = config.validate(problem, method).map_err(|error| RunError {
        error,
        partial: Trajectory::new(method, placeholder),
    })?;
    let mut traj = Trajectory::new(method, steps);
    let fail = |error: Error, traj: Trajectory| RunError { error, partial: traj };
    let base = RngStream::new(config.seed);
    let t0 = clock();
    let mut state = SolverState::initial(problem, config.x0.as_deref());
    if method.is_mean_field() {
        state.y = match problem.lower_solution(&state.x) {
            Ok(y) => y,
            Err(e) => return Err(fail(e, traj)),
        };
    }
    let mut x_sum: Option<Vec<f64>> = None;
    let mut z_sum: Option<BlockVar> = None;
    let mut n_avg = 0usize;
    let k_max = config.iterations;
    loop {
        let k = state.k;
        if let Some(start) = config.average_from {
            if k >= start {
                match (&mut x_sum, &mut z_sum) {
                    (Some(xs), Some(zs)) => {
                        linalg::axpy_slice(1.0, &state.x, xs);
                        zs.add_scaled(1.0, &state.z);
                    }
                    _ => {
                        x_sum = Some(state.x.clone());
                        z_sum = Some(state.z.clone());
                    }
                }
                n_avg += 1;
            }
        }
        if k.is_multiple_of(config.eval_stride) || k == k_max {
            match evaluate(problem, &state, clock() - t0) {
                Ok(rec) => traj.records.push(rec),
                Err(e) => return Err(fail(e, traj)),
            }
        }
        if k == k_max {
            break;
        }
        let stream = base.child(k as u64);
        let next = match method {
            SolverMethod::Bros => bros_step(problem, config, &state, &stream),
            SolverMethod::NaiveStochastic => naive_step(problem, config, &state, &stream),
            SolverMethod::MaSoba => masoba_step(problem, config, &state, &stream),
            SolverMethod::NaiveMeanField => mean_field_step(problem, config, &state, false),
            SolverMethod::BrosMeanField => mean_field_step(problem, config, &state, true),
        };
        state = match next {
            Ok(s) => s,
            Err(e) => {
                traj.final_state = Some(state);
                return Err(fail(e, traj));
            }
        };
    }
    if n_avg > 0 {
        let inv = 1.0 / n_avg as f64;
        traj.x_average = x_sum.map(|v| v.iter().map(|a| a * inv).collect());
        traj.z_average = z_sum.map(|z| z.scaled(inv));
    }
    traj.final_state = Some(state);
    Ok(traj)
}

pub fn run_bros<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
) -> core::result::Result<Trajectory, RunError> {
    run(problem, config, SolverMethod::Bros)
}

pub fn run_masoba<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
) -> core::result::Result<Trajectory, RunError> {
    run(problem, config, SolverMethod::MaSoba)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NaiveMode {
    Stochastic,
    MeanField,
}

pub fn run_naive_sketch<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    mode: NaiveMode,
) -> core::result::Result<Trajectory, RunError> {
    let method = match mode {
        NaiveMode::Stochastic => SolverMethod::NaiveStochastic,
        NaiveMode::MeanField => SolverMethod::NaiveMeanField,
    };
    run(problem, config, method)
}

/// Fixed point of the naive mean-field recursion for a columnwise problem
/// with `𝓙` independent of `(x, Y)`: solves `H̄ z̄ = ∇_Y f`, then `x̄` from
/// `∇_x f(x̄) = 𝓙[z̄]`. Only valid when `∇_x f(x) = x` (quadratic family).
pub fn naive_mean_field_fixed_point<B: BilevelProblem + ?Sized>(
    problem: &B,
    rank: usize,
) -> Result<(Vec<f64>, Matrix)> {
    let h = problem
        .columnwise_hessian()
        .ok_or(Error::Unsupported("fixed point needs a columnwise Hessian"))?;
    let hbar = mean_field_lifted_hessian(h, rank)?;
    let x0 = vec![0.0; problem.upper_dim()];
    let y0 = problem.lower_solution(&x0)?;
    let d = problem.grad_y_upper(&x0, &y0);
    let z = crate::linalg::Cholesky::new(&hbar)?.solve(d.block(0));
    let x = problem.jvp(&x0, &y0, &BlockVar::single(z.clone()));
    Ok((x, z))
}

/// Projectors used at step `k` of a projected run with `config`.
pub fn projectors_at_step<B: BilevelProblem + ?Sized>(
    problem: &B,
    config: &SolverConfig,
    k: usize,
) -> Result<ProjectorSet> {
    let stream = RngStream::new(config.seed).child(k as u64);
    sample_projector_set(&stream.child(purpose::PROJECTOR), problem.lower_shape(), &config.ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_counterexample, make_quadratic};

    fn cfg(alpha: f64, k: usize, ranks: Vec<usize>) -> SolverConfig {
        SolverConfig {
            iterations: k,
            step: StepSize::Fixed(alpha),
            c1: 1.0,
            c2: 1.0,
            c3: 1.0,
            ranks,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn stepsize_coupling_and_validation() {
        let s = Stepsizes::new(0.1, 2.0, 3.0, 4.0).unwrap();
        assert_eq!((s.beta, s.gamma, s.theta), (2.0 * 0.1, 3.0 * 0.1, 4.0 * 0.1));
        assert!(Stepsizes::new(0.5, 1.0, 1.0, 3.0).is_err());
        assert!(Stepsizes::new(0.1, 0.0, 1.0, 1.0).is_err());
        assert!(Stepsizes::new(-0.1, 1.0, 1.0, 1.0).is_err());
        let c = SolverConfig {
            iterations: 10_000,
            step: StepSize::Auto { alpha_bar: 0.5 },
            ..SolverConfig::default()
        };
        assert_eq!(c.alpha(), 0.01);
        let p = make_counterexample();
        assert!(cfg(0.1, 10, vec![1]).validate(&p, SolverMethod::Bros).is_err());
        assert!(cfg(0.1, 10, vec![2]).validate(&p, SolverMethod::Bros).is_ok());
        assert!(cfg(0.1, 10, vec![]).validate(&p, SolverMethod::MaSoba).is_ok());
    }

    #[test]
    fn zero_stepsize_only_advances_k() {
        let p = make_counterexample();
        let c = cfg(0.0, 1, vec![2]);
        let mut s = SolverState::initial(&p, Some(&[0.7]));
        s.h = vec![0.3];
        s.z = BlockVar::single(Matrix::from_rows(&[&[0.1], &[0.2], &[0.3]]));
        for step in [bros_step, naive_step, masoba_step] {
            let next = step(&p, &c, &s, &RngStream::new(4)).unwrap();
            assert_eq!(next.k, 1);
            assert_eq!((&next.x, &next.y, &next.z, &next.h), (&s.x, &s.y, &s.z, &s.h));
        }
    }

    #[test]
    fn exact_step_at_fixed_point() {
        let p = make_counterexample();
        let x = 0.4;
        let alpha = 0.05;
        let c = cfg(alpha, 1, vec![3]);
        let s = SolverState {
            x: vec![x],
            y: p.lower_solution(&[x]).unwrap(),
            z: p.aux_solution(&[x]).unwrap(),
            h: vec![x + 1.0],
            k: 0,
        };
        let next = bros_step(&p, &c, &s, &RngStream::new(11)).unwrap();
        assert!((next.x[0] - (x - alpha * (x + 1.0))).abs() < 1e-15);
        assert!(BlockVar::axpy(-1.0, &s.z, &next.z).unwrap().norm() < 1e-12);
        assert!((next.h[0] - (x + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn runs_are_deterministic_and_record_at_stride() {
        let p = make_quadratic(&RngStream::new(1), 5, 2, 2, 3.0, 0.1, 0.1).unwrap();
        let mut c = cfg(0.05, 50, vec![3]);
        c.eval_stride = 7;
        c.seed = 99;
        let a = run_bros(&p, &c).unwrap();
        let b = run_bros(&p, &c).unwrap();
        assert_eq!(a, b);
        let ks: Vec<usize> = a.records.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 7, 14, 21, 28, 35, 42, 49, 50]);
        c.seed = 100;
        assert_ne!(run_bros(&p, &c).unwrap().final_state, a.final_state);
    }

    #[test]
    fn divergence_reports_partial_trajectory() {
        let p = make_counterexample();
        let mut c = cfg(0.9, 10_000, vec![2]);
        c.c2 = 1e3;
        c.c3 = 1.0;
        let err = run_masoba(&p, &c).unwrap_err();
        assert!(matches!(err.error, Error::Divergence { .. }));
        assert!(!err.partial.records.is_empty());
    }

    #[test]
    fn mean_field_requires_columnwise_problem() {
        let shape = crate::blockmat::BlockShape::new(vec![(3, 1), (3, 1)]).unwrap();
        let p = crate::problems::make_quadratic_multilayer(&RngStream::new(0), shape, 1, 2.0, 0.0, 0.0).unwrap();
        let c = cfg(0.1, 10, vec![2, 2]);
        let err = run_naive_sketch(&p, &c, NaiveMode::MeanField).unwrap_err();
        assert!(matches!(err.error, Error::Unsupported(_)));
    }

    #[test]
    fn method_names_round_trip() {
        for m in SolverMethod::ALL {
            assert_eq!(m.name().parse::<SolverMethod>().unwrap(), m);
        }
        assert!("sgd".parse::<SolverMethod>().is_err());
    }
}
