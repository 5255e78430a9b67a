//! Stochastic direction estimators built from one projected oracle sample.
//!
//! The naive sketch-then-lift HVP `P H̃[PᵀZ]` is biased for self-layer
//! blocks: its mean is `a H Z + b tr(H) Z` (plus a partial-transpose term for
//! non-columnwise Hessians). The corrected estimator spends one extra `H̃`
//! query on a Rademacher bi-probe `ΔB_ℓ = ξ_ℓ u_ℓᵀ` and recombines
//!
//! ```text
//! Ĥ_ℓℓ[Z_ℓ] = main·A − trace·Ĉ + sharp·(A − B♯)
//! A  = P_ℓ (H̃[E_ℓ(Z̃_ℓ)])_ℓ,  Z̃ = PᵀZ
//! Ĉ  = Z_ℓ (M_ℓᵀ ξ_ℓ) u_ℓᵀ,    B♯ = (P_ℓ ξ_ℓ)(M_ℓᵀ Z̃_ℓ u_ℓ)ᵀ,   M = H̃[ΔB]
//! ```

use alloc::format;
use alloc::vec::Vec;

use num_rational::Ratio;

use crate::blockmat::{lift_up, project_down, BlockVar, ReducedVar};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Matrix};
use crate::moments::{check_dims, weingarten_constants};
use crate::problems::OracleSample;
use crate::randsrc::{ProbeSet, ProjectorSet};

pub type WideRational = Ratio<i128>;

fn wide_to_f64(q: WideRational) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// Recombination coefficients of the corrected self-layer HVP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionCoefficients {
    pub m: usize,
    pub r: usize,
    /// `r(m−1)(m+2) / (m(mr+m−2))`
    pub main: WideRational,
    /// `(m−r) / (mr+m−2)`
    pub trace: WideRational,
    /// `r(m−1)(m−r) / (m(r−1)(mr+m−2))`
    pub sharp: WideRational,
    pub main_f64: f64,
    pub trace_f64: f64,
    pub sharp_f64: f64,
}

/// `(c_A, c_B, c_C) = ((a−b)/(a(a−2b)), b/(a(a−2b)), b/a)` from the sandwich
/// constants.
pub fn sandwich_coefficients(m: usize, r: usize) -> Result<(WideRational, WideRational, WideRational)> {
    let w = weingarten_constants(m, r)?;
    let a = Ratio::new(*w.a.numer() as i128, *w.a.denom() as i128);
    let b = Ratio::new(*w.b.numer() as i128, *w.b.denom() as i128);
    let a2b = a - b * 2;
    Ok(((a - b) / (a * a2b), b / (a * a2b), b / a))
}

impl CorrectionCoefficients {
    pub fn new(m: usize, r: usize) -> Result<Self> {
        check_dims(m, r)?;
        let (mi, ri) = (m as i128, r as i128);
        let q = mi * ri + mi - 2;
        let main = Ratio::new(ri * (mi - 1) * (mi + 2), mi * q);
        let trace = Ratio::new(mi - ri, q);
        let sharp = Ratio::new(ri * (mi - 1) * (mi - ri), mi * (ri - 1) * q);
        Ok(CorrectionCoefficients {
            m,
            r,
            main,
            trace,
            sharp,
            main_f64: wide_to_f64(main),
            trace_f64: wide_to_f64(trace),
            sharp_f64: wide_to_f64(sharp),
        })
    }

    /// Coefficient of `A` once `main·A + sharp·A` is collected.
    pub fn c_a(&self) -> WideRational {
        self.main + self.sharp
    }
}

fn coefficients_for(p_l: &Matrix) -> Result<CorrectionCoefficients> {
    let (m, r) = p_l.shape();
    if r < 2 {
        return Err(Error::InvalidRank { m, r });
    }
    CorrectionCoefficients::new(m, r)
}

fn check_layers(op: &'static str, p: &ProjectorSet, z: &BlockVar) -> Result<()> {
    if p.num_layers() != z.num_layers() {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{} layers", p.num_layers()),
            found: format!("{}", z.num_layers()),
        });
    }
    Ok(())
}

/// `S_t = H̃[E_t(Z̃_t)]` for every source layer `t`.
fn single_block_queries(sample: &OracleSample, zt: &ReducedVar) -> Vec<ReducedVar> {
    (0..zt.num_layers())
        .map(|t| sample.hvp(&ReducedVar::insert(sample.reduced_shape(), t, zt.block(t).clone())))
        .collect()
}

/// `M = H̃[ΔB]` with every layer's `ξ_ℓ u_ℓᵀ` inserted at once.
fn probe_query(sample: &OracleSample, probes: &ProbeSet) -> Result<ReducedVar> {
    let shape = sample.reduced_shape();
    if probes.num_layers() != shape.num_layers() {
        return Err(Error::ShapeMismatch {
            op: "probe_query",
            expected: format!("{} probe layers", shape.num_layers()),
            found: format!("{}", probes.num_layers()),
        });
    }
    let blocks = shape
        .layers()
        .iter()
        .zip(probes.xi.iter().zip(&probes.u))
        .map(|(&(r, n), (xi, u))| {
            if xi.len() != r || u.len() != n {
                return Err(invalid("probes", "probe length differs from reduced shape"));
            }
            Ok(Matrix::outer(xi, u))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sample.hvp(&ReducedVar::from_blocks(blocks)?))
}

/// Corrected diagonal term from already-issued queries: `a_red` is
/// `(H̃[E_ℓ(Z̃_ℓ)])_ℓ` and `m_l` is `(H̃[ΔB])_ℓ`.
#[allow(clippy::too_many_arguments)]
fn corrected_from_queries(
    coef: &CorrectionCoefficients,
    p_l: &Matrix,
    z_l: &Matrix,
    zt_l: &Matrix,
    a_red: &Matrix,
    m_l: &Matrix,
    u: &[f64],
    xi: &[f64],
) -> Matrix {
    let a = p_l.matmul(a_red);
    // Ĉ = Z (Mᵀξ) uᵀ
    let mt_xi = m_l.t_matvec(xi);
    let c_hat = Matrix::outer(&z_l.matvec(&mt_xi), u);
    // B♯ = (Pξ)(Mᵀ Z̃ u)ᵀ
    let zu = zt_l.matvec(u);
    let b_sharp = Matrix::outer(&p_l.matvec(xi), &m_l.t_matvec(&zu));
    let mut out = a.scaled(coef.main_f64 + coef.sharp_f64);
    out.add_scaled(-coef.trace_f64, &c_hat);
    out.add_scaled(-coef.sharp_f64, &b_sharp);
    out
}

/// Vanilla sketch-then-lift `P H̃[PᵀZ]`, assembled from one single-block
/// query per layer.
pub fn naive_lifted_hvp(p: &ProjectorSet, z: &BlockVar, sample: &OracleSample) -> Result<BlockVar> {
    check_layers("naive_lifted_hvp", p, z)?;
    let zt = project_down(p, z)?;
    let queries = single_block_queries(sample, &zt);
    let mut acc = ReducedVar::zeros(sample.reduced_shape());
    for s in &queries {
        acc.add_scaled(1.0, s);
    }
    lift_up(p, &acc)
}

/// Corrected estimate of `𝓗_ℓℓ[Z_ℓ]` for one layer. Issues one
/// single-block query and one global probe query on `sample`.
pub fn corr_hvp_single_layer(
    p_l: &Matrix,
    z_l: &Matrix,
    sample: &OracleSample,
    probes: &ProbeSet,
    layer: usize,
) -> Result<Matrix> {
    let coef = coefficients_for(p_l)?;
    let shape = sample.reduced_shape();
    if layer >= shape.num_layers() || shape.layers()[layer].0 != p_l.cols() || p_l.rows() != z_l.rows() {
        return Err(Error::ShapeMismatch {
            op: "corr_hvp_single_layer",
            expected: format!("layer {layer} consistent with projector {:?}", p_l.shape()),
            found: format!("Z {:?}", z_l.shape()),
        });
    }
    let zt_l = p_l.t_matmul(z_l);
    let s = sample.hvp(&ReducedVar::insert(shape, layer, zt_l.clone()));
    let m = probe_query(sample, probes)?;
    Ok(corrected_from_queries(
        &coef,
        p_l,
        z_l,
        &zt_l,
        s.block(layer),
        m.block(layer),
        &probes.u[layer],
        &probes.xi[layer],
    ))
}

/// Corrected diagonal blocks plus lifted off-diagonal blocks. Issues `L`
/// single-block queries and one shared probe query.
pub fn assemble_multilayer_hvp(
    p: &ProjectorSet,
    z: &BlockVar,
    sample: &OracleSample,
    probes: &ProbeSet,
) -> Result<BlockVar> {
    check_layers("assemble_multilayer_hvp", p, z)?;
    let coefs = p.matrices().iter().map(coefficients_for).collect::<Result<Vec<_>>>()?;
    let zt = project_down(p, z)?;
    let queries = single_block_queries(sample, &zt);
    let m = probe_query(sample, probes)?;
    let num_layers = z.num_layers();
    let mut blocks = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let p_l = &p.matrices()[l];
        let mut out = corrected_from_queries(
            &coefs[l],
            p_l,
            z.block(l),
            zt.block(l),
            queries[l].block(l),
            m.block(l),
            &probes.u[l],
            &probes.xi[l],
        );
        for (t, s) in queries.iter().enumerate() {
            if t != l {
                out.add_scaled(1.0, &p_l.matmul(s.block(l)));
            }
        }
        blocks.push(out);
    }
    Ok(BlockVar::from_blocks_unchecked(blocks))
}

/// `V̂ = P Ṽ`.
pub fn build_lower_direction(p: &ProjectorSet, sample: &OracleSample) -> Result<BlockVar> {
    lift_up(p, &sample.v)
}

/// `Ŝ = Ĥ[Z] − P Ũ_Y` with the corrected HVP.
pub fn build_aux_direction(
    p: &ProjectorSet,
    z: &BlockVar,
    sample: &OracleSample,
    probes: &ProbeSet,
) -> Result<BlockVar> {
    let mut s = assemble_multilayer_hvp(p, z, sample, probes)?;
    s.add_scaled(-1.0, &lift_up(p, &sample.uy)?);
    Ok(s)
}

/// `Ŝ` with the uncorrected sketch-then-lift HVP.
pub fn build_naive_aux_direction(p: &ProjectorSet, z: &BlockVar, sample: &OracleSample) -> Result<BlockVar> {
    let mut s = naive_lifted_hvp(p, z, sample)?;
    s.add_scaled(-1.0, &lift_up(p, &sample.uy)?);
    Ok(s)
}

/// `Ŵ = Ũ_x − J̃[PᵀZ]`.
pub fn build_hypergrad_sample(p: &ProjectorSet, z: &BlockVar, sample: &OracleSample) -> Result<Vec<f64>> {
    check_layers("build_hypergrad_sample", p, z)?;
    let j = sample.jvp(&project_down(p, z)?);
    let mut out = sample.ux.clone();
    linalg::axpy_slice(-1.0, &j, &mut out);
    Ok(out)
}

/// Conditional mean of the corrected estimator for a columnwise symmetric
/// `H` and rank `r`: `main·H̄Z − trace·tr(H)Z + sharp·(H̄Z − H̄Z)`, which
/// collapses to `HZ` up to rounding.
pub fn mean_field_corrected_hvp(h: &Matrix, z: &Matrix, r: usize) -> Result<Matrix> {
    let coef = CorrectionCoefficients::new(h.rows(), r)?;
    let hbar_z = crate::moments::mean_field_lifted_hessian(h, r)?.try_matmul(z)?;
    let mut out = hbar_z.scaled(coef.main_f64);
    out.add_scaled(-coef.trace_f64 * h.trace(), z);
    out.add_scaled(coef.sharp_f64, &hbar_z.sub(&hbar_z));
    Ok(out)
}
