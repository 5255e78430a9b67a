//! Bilevel problems and their stochastic oracles.
//!
//! A problem is `min_x Φ(x) = f(x, Y*(x))` with `Y*(x) = argmin_Y g(x, Y)`
//! and `g(x, ·)` strongly convex. Writing `𝓗 = ∇²_YY g` and
//! `𝓙 = ∇²_xY g`, the hypergradient is
//!
//! ```text
//! ∇Φ(x) = ∇_x f(x, Y*) − 𝓙(x, Y*)[Z*],     𝓗(x, Y*)[Z*] = ∇_Y f(x, Y*).
//! ```
//!
//! Projected oracles are built by composing projectors with the full-space
//! derivatives: `H̃[W] = Pᵀ 𝓗[P W]`, `J̃[W] = 𝓙[P W]`, `Ṽ = Pᵀ ∇_Y g`.

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::blockmat::{lift_up, project_down, BlockShape, BlockVar, ReducedVar};
use crate::error::Result;
use crate::linalg::{self, conjugate_gradient, Matrix};
use crate::randsrc::{ProjectorSet, RngStream};

mod hypercleaning;
mod quadratic;

pub use hypercleaning::{make_hypercleaning, HyperCleaning, HyperCleaningData};
pub use quadratic::{
    make_counterexample, make_quadratic, make_quadratic_multilayer, QuadraticHessian, QuadraticProblem,
};

/// Frozen linear operator `W ↦ A[W]`.
pub type LinearOp<'a, In, Out> = Box<dyn Fn(&In) -> Out + 'a>;

/// Oracle noise scales: additive gradient noise and operator noise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseLevels {
    pub sigma_grad: f64,
    pub sigma_op: f64,
}

/// One full-space stochastic oracle realization at `(x, Y)`.
///
/// The operator closures are frozen: repeated queries on the same direction
/// return bit-identical results.
pub struct FullOracle<'a> {
    pub grad_x_upper: Vec<f64>,
    pub grad_y_upper: BlockVar,
    pub grad_y_lower: BlockVar,
    hvp: LinearOp<'a, BlockVar, BlockVar>,
    jvp: LinearOp<'a, BlockVar, Vec<f64>>,
}

impl<'a> FullOracle<'a> {
    pub fn new(
        grad_x_upper: Vec<f64>,
        grad_y_upper: BlockVar,
        grad_y_lower: BlockVar,
        hvp: LinearOp<'a, BlockVar, BlockVar>,
        jvp: LinearOp<'a, BlockVar, Vec<f64>>,
    ) -> Self {
        FullOracle {
            grad_x_upper,
            grad_y_upper,
            grad_y_lower,
            hvp,
            jvp,
        }
    }

    pub fn hvp(&self, w: &BlockVar) -> BlockVar {
        (self.hvp)(w)
    }

    pub fn jvp(&self, w: &BlockVar) -> Vec<f64> {
        (self.jvp)(w)
    }
}

/// One iteration's projected stochastic oracles.
pub struct OracleSample<'a> {
    /// `Ũ_x`
    pub ux: Vec<f64>,
    /// `Ũ_Y = Pᵀ(∇_Y f + ε_f)`
    pub uy: ReducedVar,
    /// `Ṽ = Pᵀ(∇_Y g + ε_g)`
    pub v: ReducedVar,
    reduced_shape: BlockShape,
    hvp: LinearOp<'a, ReducedVar, ReducedVar>,
    jvp: LinearOp<'a, ReducedVar, Vec<f64>>,
    hvp_queries: Cell<usize>,
}

impl<'a> OracleSample<'a> {
    pub fn new(
        ux: Vec<f64>,
        uy: ReducedVar,
        v: ReducedVar,
        hvp: LinearOp<'a, ReducedVar, ReducedVar>,
        jvp: LinearOp<'a, ReducedVar, Vec<f64>>,
    ) -> Self {
        let reduced_shape = v.shape();
        OracleSample {
            ux,
            uy,
            v,
            reduced_shape,
            hvp,
            jvp,
            hvp_queries: Cell::new(0),
        }
    }

    /// Composes a full-space oracle with projectors.
    pub fn from_full(full: FullOracle<'a>, p: &'a ProjectorSet) -> Result<Self> {
        let uy = project_down(p, &full.grad_y_upper)?;
        let v = project_down(p, &full.grad_y_lower)?;
        let FullOracle {
            grad_x_upper, hvp, jvp, ..
        } = full;
        let hvp = Box::new(move |w: &ReducedVar| {
            let lifted = lift_up(p, w).expect("reduced shape matches projectors");
            project_down(p, &hvp(&lifted)).expect("full shape matches projectors")
        });
        let jvp = Box::new(move |w: &ReducedVar| jvp(&lift_up(p, w).expect("reduced shape matches projectors")));
        Ok(Self::new(grad_x_upper, uy, v, hvp, jvp))
    }

    /// `H̃[W]`.
    pub fn hvp(&self, w: &ReducedVar) -> ReducedVar {
        self.hvp_queries.set(self.hvp_queries.get() + 1);
        (self.hvp)(w)
    }

    /// `J̃[W]`.
    pub fn jvp(&self, w: &ReducedVar) -> Vec<f64> {
        (self.jvp)(w)
    }

    pub fn reduced_shape(&self) -> &BlockShape {
        &self.reduced_shape
    }

    /// Number of `H̃` queries issued so far.
    pub fn hvp_queries(&self) -> usize {
        self.hvp_queries.get()
    }
}

/// A bilevel problem with deterministic derivatives, reference solutions and a
/// stochastic oracle model.
pub trait BilevelProblem {
    fn upper_dim(&self) -> usize;
    fn lower_shape(&self) -> &BlockShape;
    fn noise(&self) -> NoiseLevels;
    /// `μ_g`, a lower bound on the smallest eigenvalue of `𝓗`.
    fn strong_convexity(&self) -> f64;

    fn upper_objective(&self, x: &[f64], y: &BlockVar) -> f64;
    fn lower_objective(&self, x: &[f64], y: &BlockVar) -> f64;
    fn grad_x_upper(&self, x: &[f64], y: &BlockVar) -> Vec<f64>;
    fn grad_y_upper(&self, x: &[f64], y: &BlockVar) -> BlockVar;
    fn grad_x_lower(&self, x: &[f64], y: &BlockVar) -> Vec<f64>;
    fn grad_y_lower(&self, x: &[f64], y: &BlockVar) -> BlockVar;
    /// `𝓗(x, Y)[W]`
    fn hvp(&self, x: &[f64], y: &BlockVar, w: &BlockVar) -> BlockVar;
    /// `𝓙(x, Y)[W] = ∇²_xY g(x, Y)[W]`
    fn jvp(&self, x: &[f64], y: &BlockVar, w: &BlockVar) -> Vec<f64>;

    /// `Y*(x)`.
    fn lower_solution(&self, x: &[f64]) -> Result<BlockVar>;

    /// `Z*(x)` solving `𝓗(x, Y*)[Z] = ∇_Y f(x, Y*)`.
    fn aux_solution(&self, x: &[f64]) -> Result<BlockVar> {
        let y = self.lower_solution(x)?;
        self.aux_solution_at(x, &y)
    }

    /// Solves the auxiliary system at a given lower point by conjugate
    /// gradients.
    fn aux_solution_at(&self, x: &[f64], y: &BlockVar) -> Result<BlockVar> {
        let shape = self.lower_shape().clone();
        let rhs = self.grad_y_upper(x, y).to_flat();
        let tol = 1e-12 * linalg::norm(&rhs).max(1.0);
        let sol = conjugate_gradient(
            |v| {
                let w = BlockVar::from_flat(&shape, v).expect("flat length");
                self.hvp(x, y, &w).to_flat()
            },
            &rhs,
            None,
            tol,
            20 * shape.dim() + 100,
        )?;
        BlockVar::from_flat(&shape, &sol.x)
    }

    /// `∇Φ(x) = ∇_x f(x, Y*) − 𝓙(x, Y*)[Z*]`.
    fn exact_hypergradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.lower_solution(x)?;
        let z = self.aux_solution_at(x, &y)?;
        let mut g = self.grad_x_upper(x, &y);
        let j = self.jvp(x, &y, &z);
        linalg::axpy_slice(-1.0, &j, &mut g);
        Ok(g)
    }

    /// `Φ(x) = f(x, Y*(x))`.
    fn phi(&self, x: &[f64]) -> Result<f64> {
        let y = self.lower_solution(x)?;
        Ok(self.upper_objective(x, &y))
    }

    /// Draws one full-space stochastic oracle realization at `(x, Y)`.
    fn draw_oracle<'a>(&'a self, stream: &RngStream, x: &'a [f64], y: &'a BlockVar) -> Result<FullOracle<'a>>;

    /// Projected oracles for one draw. Defaults to composing
    /// [`BilevelProblem::draw_oracle`] with `P`; implementations may evaluate
    /// directly in the subspace as long as the distribution is unchanged.
    fn projected_oracles<'a>(
        &'a self,
        stream: &RngStream,
        x: &'a [f64],
        y: &'a BlockVar,
        p: &'a ProjectorSet,
    ) -> Result<OracleSample<'a>> {
        OracleSample::from_full(self.draw_oracle(stream, x, y)?, p)
    }

    /// `H` when the Hessian acts columnwise (`𝓗[Z] = H Z`) on a single layer
    /// and does not depend on `(x, Y)`.
    fn columnwise_hessian(&self) -> Option<&Matrix> {
        None
    }
}

/// Projected oracles at `(x, Y)` for projectors `P`.
pub fn sample_projected_oracles<'a, B: BilevelProblem + ?Sized>(
    problem: &'a B,
    stream: &RngStream,
    x: &'a [f64],
    y: &'a BlockVar,
    p: &'a ProjectorSet,
) -> Result<OracleSample<'a>> {
    problem.projected_oracles(stream, x, y, p)
}

/// Hypergradient with inner solves; `‖∇Φ(x)‖`.
pub fn stationarity_surrogate<B: BilevelProblem + ?Sized>(problem: &B, x: &[f64]) -> Result<f64> {
    Ok(linalg::norm(&problem.exact_hypergradient(x)?))
}

/// Central finite differences of `Φ` with step `h` (test oracle).
pub fn finite_difference_hypergradient<B: BilevelProblem + ?Sized>(problem: &B, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = problem.phi(&xp)?;
        xp[i] = x[i] - h;
        let fm = problem.phi(&xp)?;
        xp[i] = x[i];
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}
