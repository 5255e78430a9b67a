use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{BilevelProblem, FullOracle, NoiseLevels, OracleSample};
use crate::blockmat::{project_down, BlockShape, BlockVar, ReducedVar};
use crate::error::{invalid, Error, Result};
use crate::linalg::{symmetric_eigenvalues, Cholesky, Matrix};
use crate::math;
use crate::randsrc::{
    gaussian_matrix, sample_gaussian_blockvar, sample_gaussian_vec, sample_haar_orthonormal, ProjectorSet, RngStream,
};

/// Constant lower Hessian of a quadratic problem.
#[derive(Debug, Clone, PartialEq)]
pub enum QuadraticHessian {
    /// `𝓗[Z] = H Z` on the row-stacked layers; all layers share `n`.
    Columnwise(Matrix),
    /// SPD operator on the flattened variable (layer-major, row-major blocks).
    Dense(Matrix),
}

fn stack_rows(y: &BlockVar) -> Matrix {
    let n = y.block(0).cols();
    let m: usize = y.blocks().iter().map(|b| b.rows()).sum();
    let mut out = Matrix::zeros(m, n);
    let mut r0 = 0;
    for b in y.blocks() {
        out.set_block(r0, 0, b);
        r0 += b.rows();
    }
    out
}

fn unstack_rows(shape: &BlockShape, s: &Matrix) -> BlockVar {
    let mut blocks = Vec::with_capacity(shape.num_layers());
    let mut r0 = 0;
    for &(m, n) in shape.layers() {
        blocks.push(s.block(r0, 0, m, n));
        r0 += m;
    }
    BlockVar::from_blocks_unchecked(blocks)
}

impl QuadraticHessian {
    fn apply_matrix(op: &Matrix, columnwise: bool, shape: &BlockShape, w: &BlockVar) -> BlockVar {
        if columnwise {
            unstack_rows(shape, &op.matmul(&stack_rows(w)))
        } else {
            BlockVar::from_flat(shape, &op.matvec(&w.to_flat())).expect("flat length")
        }
    }

    fn is_columnwise(&self) -> bool {
        matches!(self, QuadraticHessian::Columnwise(_))
    }

    pub fn matrix(&self) -> &Matrix {
        match self {
            QuadraticHessian::Columnwise(h) | QuadraticHessian::Dense(h) => h,
        }
    }

    fn check(&self, shape: &BlockShape) -> Result<()> {
        let h = self.matrix();
        let expected = match self {
            QuadraticHessian::Columnwise(_) => {
                let n = shape.layers()[0].1;
                if shape.layers().iter().any(|&(_, nl)| nl != n) {
                    return Err(invalid(
                        "hessian",
                        "columnwise action needs equal column counts across layers",
                    ));
                }
                shape.layers().iter().map(|&(m, _)| m).sum()
            }
            QuadraticHessian::Dense(_) => shape.dim(),
        };
        if h.shape() != (expected, expected) {
            return Err(Error::ShapeMismatch {
                op: "QuadraticHessian",
                expected: format!("{expected}x{expected}"),
                found: format!("{}x{}", h.rows(), h.cols()),
            });
        }
        if !h.is_symmetric(1e-12 * (1.0 + h.max_abs())) {
            return Err(invalid("hessian", "not symmetric"));
        }
        Ok(())
    }
}

/// Frozen noise of one quadratic oracle realization.
struct QuadNoise {
    ex: Vec<f64>,
    ef: BlockVar,
    eg: BlockVar,
    /// Symmetric perturbation with the same structure as the Hessian.
    xi: Matrix,
    /// `d_x × N` perturbation of the mixed Jacobian.
    psi: Matrix,
}

/// `g(x, Y) = ½⟨Y, 𝓗 Y⟩ − ⟨G(x), Y⟩`, `G(x) = Σ_j x_j G_j`;
/// `f(x, Y) = ½‖x‖² + ⟨D, Y⟩`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    shape: BlockShape,
    hessian: QuadraticHessian,
    chol: Cholesky,
    mu: f64,
    g_basis: Vec<BlockVar>,
    d: BlockVar,
    noise: NoiseLevels,
    y_basis: Vec<BlockVar>,
    z_star: BlockVar,
}

impl QuadraticProblem {
    pub fn new(
        shape: BlockShape,
        hessian: QuadraticHessian,
        g_basis: Vec<BlockVar>,
        d: BlockVar,
        noise: NoiseLevels,
    ) -> Result<Self> {
        hessian.check(&shape)?;
        if g_basis.is_empty() {
            return Err(invalid("d_x", "must be >= 1"));
        }
        for g in g_basis.iter().chain(core::iter::once(&d)) {
            if g.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "QuadraticProblem::new",
                    expected: format!("{:?}", shape.layers()),
                    found: format!("{:?}", g.shape().layers()),
                });
            }
        }
        if !(noise.sigma_grad >= 0.0 && noise.sigma_op >= 0.0) {
            return Err(invalid("noise", "sigmas must be >= 0"));
        }
        let chol = Cholesky::new(hessian.matrix())?;
        let mu = symmetric_eigenvalues(hessian.matrix())?[0];
        let mut p = QuadraticProblem {
            shape,
            hessian,
            chol,
            mu,
            g_basis,
            d,
            noise,
            y_basis: Vec::new(),
            z_star: BlockVar::single(Matrix::zeros(1, 1)),
        };
        p.y_basis = p.g_basis.iter().map(|g| p.solve(g)).collect();
        p.z_star = p.solve(&p.d);
        Ok(p)
    }

    /// `𝓗⁻¹ R`.
    pub fn solve(&self, rhs: &BlockVar) -> BlockVar {
        match &self.hessian {
            QuadraticHessian::Columnwise(_) => unstack_rows(&self.shape, &self.chol.solve(&stack_rows(rhs))),
            QuadraticHessian::Dense(_) => {
                BlockVar::from_flat(&self.shape, &self.chol.solve_vec(&rhs.to_flat())).expect("flat length")
            }
        }
    }

    pub fn hessian(&self) -> &QuadraticHessian {
        &self.hessian
    }

    pub fn apply_hessian(&self, w: &BlockVar) -> BlockVar {
        QuadraticHessian::apply_matrix(self.hessian.matrix(), self.hessian.is_columnwise(), &self.shape, w)
    }

    pub fn g_basis(&self) -> &[BlockVar] {
        &self.g_basis
    }

    pub fn upper_linear_term(&self) -> &BlockVar {
        &self.d
    }

    fn g_of_x(&self, x: &[f64]) -> BlockVar {
        let mut out = BlockVar::zeros(&self.shape);
        for (xj, gj) in x.iter().zip(&self.g_basis) {
            out.add_scaled(*xj, gj);
        }
        out
    }

    fn draw_noise(&self, stream: &RngStream) -> Result<QuadNoise> {
        let NoiseLevels { sigma_grad, sigma_op } = self.noise;
        let dx = self.g_basis.len();
        let ex = sample_gaussian_vec(&stream.child(0), dx, sigma_grad)?;
        let ef = sample_gaussian_blockvar(&stream.child(1), &self.shape, sigma_grad)?;
        let eg = sample_gaussian_blockvar(&stream.child(2), &self.shape, sigma_grad)?;
        let k = self.hessian.matrix().rows();
        let big_n = self.shape.dim();
        let (xi, psi) = if sigma_op == 0.0 {
            (Matrix::zeros(k, k), Matrix::zeros(dx, big_n))
        } else {
            // Ξ = R + Rᵀ with Var(R_ij) = σ²/(2k): E‖Ξ w‖² ≈ σ²‖w‖².
            let mut rng = stream.child(3).rng();
            let r = gaussian_matrix(&mut rng, k, k, sigma_op / math::sqrt(2.0 * k as f64));
            let xi = r.add(&r.transpose());
            let mut rng = stream.child(4).rng();
            let psi = gaussian_matrix(&mut rng, dx, big_n, sigma_op / math::sqrt(big_n as f64));
            (xi, psi)
        };
        Ok(QuadNoise { ex, ef, eg, xi, psi })
    }

    /// Subspace-native projected oracles: the reduced Hessian `Pᵀ(H + Ξ)P` is
    /// formed once per sample and queries never leave the reduced space.
    /// Available for columnwise Hessians only.
    pub fn sample_projected_oracles_native<'a>(
        &'a self,
        stream: &RngStream,
        x: &[f64],
        y: &BlockVar,
        p: &'a ProjectorSet,
    ) -> Result<OracleSample<'a>> {
        if !self.hessian.is_columnwise() {
            return Err(Error::Unsupported("native subspace oracle needs a columnwise Hessian"));
        }
        let noise = self.draw_noise(stream)?;
        let mut ux = x.to_vec();
        crate::linalg::axpy_slice(1.0, &noise.ex, &mut ux);
        let mut gy_f = self.d.clone();
        gy_f.add_scaled(1.0, &noise.ef);
        let mut gy_g = self.grad_y_lower(x, y);
        gy_g.add_scaled(1.0, &noise.eg);
        let uy = project_down(p, &gy_f)?;
        let v = project_down(p, &gy_g)?;

        let h = self.hessian.matrix().add(&noise.xi);
        let mats = p.matrices();
        let offsets: Vec<usize> = self
            .shape
            .layers()
            .iter()
            .scan(0, |acc, &(m, _)| {
                let o = *acc;
                *acc += m;
                Some(o)
            })
            .collect();
        let num_layers = mats.len();
        let mut reduced = Vec::with_capacity(num_layers * num_layers);
        for l in 0..num_layers {
            for t in 0..num_layers {
                let (ml, mt) = (mats[l].rows(), mats[t].rows());
                let h_lt = h.block(offsets[l], offsets[t], ml, mt);
                reduced.push(mats[l].t_matmul(&h_lt.matmul(&mats[t])));
            }
        }
        // J̃[W] = −(⟨Pᵀ G_j, W⟩)_j + Ψ vec(P W)
        let reduced_g: Vec<ReducedVar> = self.g_basis.iter().map(|g| project_down(p, g)).collect::<Result<_>>()?;
        let psi = noise.psi;
        let shape = self.shape.clone();
        let hvp = Box::new(move |w: &ReducedVar| {
            let blocks = (0..num_layers)
                .map(|l| {
                    let mut acc = reduced[l * num_layers].matmul(w.block(0));
                    for t in 1..num_layers {
                        acc.add_scaled(1.0, &reduced[l * num_layers + t].matmul(w.block(t)));
                    }
                    acc
                })
                .collect();
            ReducedVar::from_blocks_unchecked(blocks)
        });
        let jvp = Box::new(move |w: &ReducedVar| {
            let mut out: Vec<f64> = reduced_g.iter().map(|g| -g.dot(w)).collect();
            if psi.max_abs() > 0.0 {
                let lifted = crate::blockmat::lift_up(p, w).expect("reduced shape");
                debug_assert_eq!(lifted.shape(), shape);
                crate::linalg::axpy_slice(1.0, &psi.matvec(&lifted.to_flat()), &mut out);
            }
            out
        });
        Ok(OracleSample::new(ux, uy, v, hvp, jvp))
    }
}

impl BilevelProblem for QuadraticProblem {
    fn upper_dim(&self) -> usize {
        self.g_basis.len()
    }

    fn lower_shape(&self) -> &BlockShape {
        &self.shape
    }

    fn noise(&self) -> NoiseLevels {
        self.noise
    }

    fn strong_convexity(&self) -> f64 {
        self.mu
    }

    fn upper_objective(&self, x: &[f64], y: &BlockVar) -> f64 {
        0.5 * crate::linalg::dot(x, x) + self.d.dot(y)
    }

    fn lower_objective(&self, x: &[f64], y: &BlockVar) -> f64 {
        0.5 * y.dot(&self.apply_hessian(y)) - self.g_of_x(x).dot(y)
    }

    fn grad_x_upper(&self, x: &[f64], _y: &BlockVar) -> Vec<f64> {
        x.to_vec()
    }

    fn grad_y_upper(&self, _x: &[f64], _y: &BlockVar) -> BlockVar {
        self.d.clone()
    }

    fn grad_x_lower(&self, _x: &[f64], y: &BlockVar) -> Vec<f64> {
        self.g_basis.iter().map(|g| -g.dot(y)).collect()
    }

    fn grad_y_lower(&self, x: &[f64], y: &BlockVar) -> BlockVar {
        let mut out = self.apply_hessian(y);
        out.add_scaled(-1.0, &self.g_of_x(x));
        out
    }

    fn hvp(&self, _x: &[f64], _y: &BlockVar, w: &BlockVar) -> BlockVar {
        self.apply_hessian(w)
    }

    fn jvp(&self, _x: &[f64], _y: &BlockVar, w: &BlockVar) -> Vec<f64> {
        self.g_basis.iter().map(|g| -g.dot(w)).collect()
    }

    fn lower_solution(&self, x: &[f64]) -> Result<BlockVar> {
        if x.len() != self.g_basis.len() {
            return Err(Error::ShapeMismatch {
                op: "lower_solution",
                expected: format!("x of length {}", self.g_basis.len()),
                found: format!("{}", x.len()),
            });
        }
        let mut out = BlockVar::zeros(&self.shape);
        for (xj, yj) in x.iter().zip(&self.y_basis) {
            out.add_scaled(*xj, yj);
        }
        Ok(out)
    }

    fn aux_solution(&self, _x: &[f64]) -> Result<BlockVar> {
        Ok(self.z_star.clone())
    }

    fn aux_solution_at(&self, _x: &[f64], _y: &BlockVar) -> Result<BlockVar> {
        Ok(self.z_star.clone())
    }

    fn exact_hypergradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.g_basis.len() {
            return Err(Error::ShapeMismatch {
                op: "exact_hypergradient",
                expected: format!("x of length {}", self.g_basis.len()),
                found: format!("{}", x.len()),
            });
        }
        Ok(x.iter()
            .zip(&self.g_basis)
            .map(|(xj, g)| xj + g.dot(&self.z_star))
            .collect())
    }

    fn projected_oracles<'a>(
        &'a self,
        stream: &RngStream,
        x: &'a [f64],
        y: &'a BlockVar,
        p: &'a ProjectorSet,
    ) -> Result<OracleSample<'a>> {
        if self.hessian.is_columnwise() {
            self.sample_projected_oracles_native(stream, x, y, p)
        } else {
            OracleSample::from_full(self.draw_oracle(stream, x, y)?, p)
        }
    }

    fn draw_oracle<'a>(&'a self, stream: &RngStream, x: &'a [f64], y: &'a BlockVar) -> Result<FullOracle<'a>> {
        let noise = self.draw_noise(stream)?;
        let mut ux = x.to_vec();
        crate::linalg::axpy_slice(1.0, &noise.ex, &mut ux);
        let mut gy_f = self.d.clone();
        gy_f.add_scaled(1.0, &noise.ef);
        let mut gy_g = self.grad_y_lower(x, y);
        gy_g.add_scaled(1.0, &noise.eg);
        let columnwise = self.hessian.is_columnwise();
        let h = self.hessian.matrix().add(&noise.xi);
        let psi = noise.psi;
        let noisy_jac = psi.max_abs() > 0.0;
        let hvp = Box::new(move |w: &BlockVar| QuadraticHessian::apply_matrix(&h, columnwise, &self.shape, w));
        let jvp = Box::new(move |w: &BlockVar| {
            let mut out = self.jvp(x, y, w);
            if noisy_jac {
                crate::linalg::axpy_slice(1.0, &psi.matvec(&w.to_flat()), &mut out);
            }
            out
        });
        Ok(FullOracle::new(ux, gy_f, gy_g, hvp, jvp))
    }

    fn columnwise_hessian(&self) -> Option<&Matrix> {
        match &self.hessian {
            QuadraticHessian::Columnwise(h) if self.shape.num_layers() == 1 => Some(h),
            _ => None,
        }
    }
}

/// SPD matrix `Q diag(λ) Qᵀ` with geometric eigenvalues in `[1, κ]`.
fn spd_with_conditioning(stream: &RngStream, k: usize, conditioning: f64) -> Result<Matrix> {
    if conditioning == 1.0 {
        return Ok(Matrix::identity(k));
    }
    let mut rng = stream.rng();
    let q = sample_haar_orthonormal(&mut rng, k, k)?;
    let eig: Vec<f64> = (0..k)
        .map(|i| {
            if k == 1 {
                1.0
            } else {
                libm::pow(conditioning, i as f64 / (k - 1) as f64)
            }
        })
        .collect();
    let h = q.matmul(&Matrix::diag(&eig)).matmul(&q.transpose());
    Ok(h.add(&h.transpose()).scaled(0.5))
}

fn check_common(d_x: usize, conditioning: f64) -> Result<()> {
    if d_x == 0 {
        return Err(invalid("d_x", "must be >= 1"));
    }
    if !(conditioning >= 1.0) || !conditioning.is_finite() {
        return Err(invalid("conditioning", "must be finite and >= 1"));
    }
    Ok(())
}

fn random_linear_terms(stream: &RngStream, shape: &BlockShape, d_x: usize) -> Result<(Vec<BlockVar>, BlockVar)> {
    let scale = 1.0 / math::sqrt(shape.dim() as f64);
    let g_basis = (0..d_x)
        .map(|j| sample_gaussian_blockvar(&stream.child(1).child(j as u64), shape, scale))
        .collect::<Result<Vec<_>>>()?;
    let d = sample_gaussian_blockvar(&stream.child(2), shape, 1.0)?;
    Ok((g_basis, d))
}

/// Single-layer quadratic with columnwise Hessian `H ∈ R^{m×m}`.
pub fn make_quadratic(
    stream: &RngStream,
    m: usize,
    n: usize,
    d_x: usize,
    conditioning: f64,
    sigma_grad: f64,
    sigma_op: f64,
) -> Result<QuadraticProblem> {
    check_common(d_x, conditioning)?;
    let shape = BlockShape::single(m, n)?;
    let h = spd_with_conditioning(&stream.child(0), m, conditioning)?;
    let (g_basis, d) = random_linear_terms(stream, &shape, d_x)?;
    QuadraticProblem::new(
        shape,
        QuadraticHessian::Columnwise(h),
        g_basis,
        d,
        NoiseLevels { sigma_grad, sigma_op },
    )
}

/// Multilayer quadratic with a dense coupled SPD Hessian on the flattened
/// variable (nonzero cross-layer blocks).
pub fn make_quadratic_multilayer(
    stream: &RngStream,
    shape: BlockShape,
    d_x: usize,
    conditioning: f64,
    sigma_grad: f64,
    sigma_op: f64,
) -> Result<QuadraticProblem> {
    check_common(d_x, conditioning)?;
    let h = spd_with_conditioning(&stream.child(0), shape.dim(), conditioning)?;
    let (g_basis, d) = random_linear_terms(stream, &shape, d_x)?;
    QuadraticProblem::new(
        shape,
        QuadraticHessian::Dense(h),
        g_basis,
        d,
        NoiseLevels { sigma_grad, sigma_op },
    )
}

/// `g(x, y) = ½ yᵀ diag(1,2,3) y − x e₁ᵀ y`, `f(x, y) = ½x² + e₁ᵀ y`; noiseless.
pub fn make_counterexample() -> QuadraticProblem {
    let shape = BlockShape::single(3, 1).expect("static shape");
    let e1 = BlockVar::single(Matrix::column_vector(&[1.0, 0.0, 0.0]));
    QuadraticProblem::new(
        shape,
        QuadraticHessian::Columnwise(Matrix::diag(&[1.0, 2.0, 3.0])),
        vec![e1.clone()],
        e1,
        NoiseLevels::default(),
    )
    .expect("static counterexample is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{finite_difference_hypergradient, sample_projected_oracles};
    use crate::randsrc::sample_projector_set;

    fn e1() -> BlockVar {
        BlockVar::single(Matrix::column_vector(&[1.0, 0.0, 0.0]))
    }

    #[test]
    fn counterexample_closed_forms() {
        let p = make_counterexample();
        let y = p.lower_solution(&[2.5]).unwrap();
        assert_eq!(y, e1().scaled(2.5));
        assert_eq!(p.aux_solution(&[0.0]).unwrap(), e1());
        assert_eq!(p.exact_hypergradient(&[-1.0]).unwrap(), vec![0.0]);
        let xbar = -20.0 / 39.0;
        let g = p.exact_hypergradient(&[xbar]).unwrap()[0];
        assert!((g - 19.0 / 39.0).abs() < 1e-15);
        assert_eq!(p.exact_hypergradient(&[0.3]).unwrap(), vec![1.3]);
        assert!(p.columnwise_hessian().is_some());
    }

    #[test]
    fn identity_conditioning_gives_identity_hessian() {
        let p = make_quadratic(&RngStream::new(1), 4, 3, 2, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(p.hessian().matrix(), &Matrix::identity(4));
        let x = [0.7, -1.2];
        let y = p.lower_solution(&x).unwrap();
        assert!(y.sub_norm(&p.g_of_x(&x)) < 1e-14);
        assert!(p.aux_solution(&x).unwrap().sub_norm(p.upper_linear_term()) < 1e-14);
    }

    impl BlockVar {
        fn sub_norm(&self, other: &BlockVar) -> f64 {
            BlockVar::axpy(-1.0, other, self).unwrap().norm()
        }
    }

    #[test]
    fn aux_residual_and_finite_differences() {
        let p = make_quadratic(&RngStream::new(2), 6, 3, 3, 20.0, 0.0, 0.0).unwrap();
        let x = [0.3, -0.4, 1.1];
        let y = p.lower_solution(&x).unwrap();
        assert!(p.grad_y_lower(&x, &y).norm() < 1e-10);
        let z = p.aux_solution(&x).unwrap();
        let resid = BlockVar::axpy(-1.0, &p.grad_y_upper(&x, &y), &p.hvp(&x, &y, &z)).unwrap();
        assert!(resid.norm() < 1e-10);
        // The closed form agrees with the generic CG route.
        let cg = BilevelProblem::aux_solution_at(&CgOnly(&p), &x, &y).unwrap();
        assert!(cg.sub_norm(&z) < 1e-9);

        let g = p.exact_hypergradient(&x).unwrap();
        let fd = finite_difference_hypergradient(&p, &x, 1e-5).unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    // Delegates everything but the auxiliary solve, which falls back to CG.
    struct CgOnly<'a>(&'a QuadraticProblem);

    impl BilevelProblem for CgOnly<'_> {
        fn upper_dim(&self) -> usize {
            self.0.upper_dim()
        }
        fn lower_shape(&self) -> &BlockShape {
            self.0.lower_shape()
        }
        fn noise(&self) -> NoiseLevels {
            self.0.noise()
        }
        fn strong_convexity(&self) -> f64 {
            self.0.strong_convexity()
        }
        fn upper_objective(&self, x: &[f64], y: &BlockVar) -> f64 {
            self.0.upper_objective(x, y)
        }
        fn lower_objective(&self, x: &[f64], y: &BlockVar) -> f64 {
            self.0.lower_objective(x, y)
        }
        fn grad_x_upper(&self, x: &[f64], y: &BlockVar) -> Vec<f64> {
            self.0.grad_x_upper(x, y)
        }
        fn grad_y_upper(&self, x: &[f64], y: &BlockVar) -> BlockVar {
            self.0.grad_y_upper(x, y)
        }
        fn grad_x_lower(&self, x: &[f64], y: &BlockVar) -> Vec<f64> {
            self.0.grad_x_lower(x, y)
        }
        fn grad_y_lower(&self, x: &[f64], y: &BlockVar) -> BlockVar {
            self.0.grad_y_lower(x, y)
        }
        fn hvp(&self, x: &[f64], y: &BlockVar, w: &BlockVar) -> BlockVar {
            self.0.hvp(x, y, w)
        }
        fn jvp(&self, x: &[f64], y: &BlockVar, w: &BlockVar) -> Vec<f64> {
            self.0.jvp(x, y, w)
        }
        fn lower_solution(&self, x: &[f64]) -> Result<BlockVar> {
            self.0.lower_solution(x)
        }
        fn draw_oracle<'a>(&'a self, stream: &RngStream, x: &'a [f64], y: &'a BlockVar) -> Result<FullOracle<'a>> {
            self.0.draw_oracle(stream, x, y)
        }
    }

    #[test]
    fn strong_convexity_and_self_adjointness() {
        let shape = BlockShape::new(vec![(4, 2), (3, 2)]).unwrap();
        let p = make_quadratic_multilayer(&RngStream::new(3), shape.clone(), 2, 8.0, 0.0, 0.0).unwrap();
        assert!((p.strong_convexity() - 1.0).abs() < 1e-10);
        let s = RngStream::new(33);
        let w1 = sample_gaussian_blockvar(&s.child(0), &shape, 1.0).unwrap();
        let w2 = sample_gaussian_blockvar(&s.child(1), &shape, 1.0).unwrap();
        let x = [0.0, 0.0];
        let y = BlockVar::zeros(&shape);
        let a = w1.dot(&p.hvp(&x, &y, &w2));
        let b = w2.dot(&p.hvp(&x, &y, &w1));
        assert!((a - b).abs() < 1e-8);
        assert!(p.columnwise_hessian().is_none());
    }

    #[test]
    fn jvp_matches_directional_derivative_of_grad_x_lower() {
        let p = make_quadratic(&RngStream::new(4), 5, 2, 3, 5.0, 0.0, 0.0).unwrap();
        let s = RngStream::new(44);
        let y = sample_gaussian_blockvar(&s.child(0), p.lower_shape(), 1.0).unwrap();
        let w = sample_gaussian_blockvar(&s.child(1), p.lower_shape(), 1.0).unwrap();
        let x = [0.1, 0.2, 0.3];
        let h = 1e-6;
        let yp = BlockVar::axpy(h, &w, &y).unwrap();
        let ym = BlockVar::axpy(-h, &w, &y).unwrap();
        let gp = p.grad_x_lower(&x, &yp);
        let gm = p.grad_x_lower(&x, &ym);
        let j = p.jvp(&x, &y, &w);
        for i in 0..3 {
            assert!(((gp[i] - gm[i]) / (2.0 * h) - j[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_projected_oracle_composes_with_projector() {
        let p = make_quadratic(&RngStream::new(5), 6, 3, 2, 4.0, 0.0, 0.0).unwrap();
        let shape = p.lower_shape().clone();
        let s = RngStream::new(55);
        let proj = sample_projector_set(&s.child(0), &shape, &[3]).unwrap();
        let x = [0.5, -0.5];
        let y = sample_gaussian_blockvar(&s.child(1), &shape, 1.0).unwrap();
        let sample = sample_projected_oracles(&p, &s.child(2), &x, &y, &proj).unwrap();
        let rshape = shape.reduced(&[3]).unwrap();
        let w = ReducedVar::from_flat(
            &rshape,
            &sample_gaussian_blockvar(&s.child(3), &rshape, 1.0).unwrap().to_flat(),
        )
        .unwrap();
        let got = sample.hvp(&w);
        let want = project_down(&proj, &p.apply_hessian(&crate::blockmat::lift_up(&proj, &w).unwrap())).unwrap();
        assert!(ReducedVar::axpy(-1.0, &got, &want).unwrap().norm() < 1e-10);
        let v_want = project_down(&proj, &p.grad_y_lower(&x, &y)).unwrap();
        assert!(ReducedVar::axpy(-1.0, &sample.v, &v_want).unwrap().norm() < 1e-12);
    }

    #[test]
    fn frozen_realization_and_native_path_agree() {
        let p = make_quadratic(&RngStream::new(6), 5, 2, 2, 3.0, 0.2, 0.3).unwrap();
        let shape = p.lower_shape().clone();
        let s = RngStream::new(66);
        let proj = sample_projector_set(&s.child(0), &shape, &[2]).unwrap();
        let x = [0.1, 0.9];
        let y = sample_gaussian_blockvar(&s.child(1), &shape, 1.0).unwrap();
        let rshape = shape.reduced(&[2]).unwrap();
        let w = ReducedVar::from_flat(
            &rshape,
            &sample_gaussian_blockvar(&s.child(2), &rshape, 1.0).unwrap().to_flat(),
        )
        .unwrap();
        let composed = sample_projected_oracles(&p, &s.child(3), &x, &y, &proj).unwrap();
        let first = composed.hvp(&w);
        assert_eq!(first, composed.hvp(&w));
        assert_eq!(composed.jvp(&w), composed.jvp(&w));
        assert_eq!(composed.hvp_queries(), 2);

        let native = p.sample_projected_oracles_native(&s.child(3), &x, &y, &proj).unwrap();
        assert!(ReducedVar::axpy(-1.0, &native.hvp(&w), &first).unwrap().norm() < 1e-10);
        let (a, b) = (native.jvp(&w), composed.jvp(&w));
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-10);
        }
        assert_eq!(native.v, composed.v);
        assert_eq!(native.ux, composed.ux);

        let dense = make_quadratic_multilayer(&RngStream::new(7), shape, 2, 3.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            dense.sample_projected_oracles_native(&s, &x, &y, &proj),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn invalid_inputs() {
        let s = RngStream::new(0);
        assert!(make_quadratic(&s, 3, 2, 0, 2.0, 0.0, 0.0).is_err());
        assert!(make_quadratic(&s, 3, 2, 1, 0.5, 0.0, 0.0).is_err());
        let shape = BlockShape::new(vec![(3, 2), (2, 3)]).unwrap();
        let bad = QuadraticProblem::new(
            shape.clone(),
            QuadraticHessian::Columnwise(Matrix::identity(5)),
            vec![BlockVar::zeros(&shape)],
            BlockVar::zeros(&shape),
            NoiseLevels::default(),
        );
        assert!(bad.is_err());
    }
}
