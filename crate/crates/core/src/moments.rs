//! Second-moment identities of scaled Haar projectors.
//!
//! For `Q = P Pᵀ` with `P = √(m/r)·O_r` and any fixed `A ∈ R^{m×m}`,
//!
//! ```text
//! E[Q A Q] = (a − b) A + b Aᵀ + b tr(A) I
//! a = m(mr + m − 2) / (r(m − 1)(m + 2)),   b = m(m − r) / (r(m − 1)(m + 2))
//! ```
//!
//! and for independent `Q_ℓ`, `Q_t`: `E[Q_ℓ A Q_t] = A`.

use alloc::format;

use num_rational::Ratio;
use num_traits::ToPrimitive;

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::randsrc::{purpose, sample_haar_projector, RngStream};

pub type Rational = Ratio<i64>;

pub(crate) fn to_f64(q: Rational) -> f64 {
    // Numerators and denominators stay far below 2^53 on supported sizes.
    q.to_f64().expect("rational to f64")
}

/// Sandwich constants `(a, b)` for one `(m, r)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeingartenConstants {
    pub m: usize,
    pub r: usize,
    pub a: Rational,
    pub b: Rational,
    pub a_f64: f64,
    pub b_f64: f64,
}

impl WeingartenConstants {
    /// `a − 2b = m(r − 1) / (r(m − 1))`.
    pub fn a_minus_2b(&self) -> Rational {
        self.a - self.b * 2
    }
}

pub(crate) fn check_dims(m: usize, r: usize) -> Result<()> {
    if m < 2 || r < 2 || r > m {
        return Err(Error::InvalidRank { m, r });
    }
    if m > 1 << 20 {
        return Err(invalid("m", "too large for exact rational constants"));
    }
    Ok(())
}

pub fn weingarten_constants(m: usize, r: usize) -> Result<WeingartenConstants> {
    check_dims(m, r)?;
    let (mi, ri) = (m as i64, r as i64);
    let den = ri * (mi - 1) * (mi + 2);
    let a = Ratio::new(mi * (mi * ri + mi - 2), den);
    let b = Ratio::new(mi * (mi - ri), den);
    Ok(WeingartenConstants {
        m,
        r,
        a,
        b,
        a_f64: to_f64(a),
        b_f64: to_f64(b),
    })
}

/// Closed form of `E[Q A Q]` for a square `A`.
pub fn expected_self_sandwich(a_mat: &Matrix, r: usize) -> Result<Matrix> {
    if !a_mat.is_square() {
        return Err(Error::ShapeMismatch {
            op: "expected_self_sandwich",
            expected: "square matrix".into(),
            found: format!("{}x{}", a_mat.rows(), a_mat.cols()),
        });
    }
    let m = a_mat.rows();
    let c = weingarten_constants(m, r)?;
    let mut out = a_mat.scaled(c.a_f64 - c.b_f64);
    out.add_scaled(c.b_f64, &a_mat.transpose());
    let t = c.b_f64 * a_mat.trace();
    for i in 0..m {
        out[(i, i)] += t;
    }
    Ok(out)
}

/// Empirical mean of `Q A Q` over `trials` independent projectors; trial `i`
/// uses `stream.child(TRIAL).child(i)`.
pub fn monte_carlo_self_sandwich(stream: &RngStream, a_mat: &Matrix, r: usize, trials: usize) -> Result<Matrix> {
    if !a_mat.is_square() {
        return Err(Error::ShapeMismatch {
            op: "monte_carlo_self_sandwich",
            expected: "square matrix".into(),
            found: format!("{}x{}", a_mat.rows(), a_mat.cols()),
        });
    }
    if trials == 0 {
        return Err(invalid("trials", "must be >= 1"));
    }
    let m = a_mat.rows();
    let base = stream.child(purpose::TRIAL);
    let mut acc = Matrix::zeros(m, m);
    for i in 0..trials {
        let p = sample_haar_projector(&base.child(i as u64), m, r)?;
        // Q A Q = P (Pᵀ A P) Pᵀ
        let inner = p.t_matmul(&a_mat.matmul(&p));
        let qaq = p.matmul(&inner).matmul(&p.transpose());
        acc.add_scaled(1.0, &qaq);
    }
    acc.scale_mut(1.0 / trials as f64);
    Ok(acc)
}

/// Empirical mean of `Q_ℓ A Q_t` with independent projectors of ranks
/// `(r_left, r_right)` and a rectangular `A ∈ R^{m_ℓ × m_t}`.
pub fn monte_carlo_cross_sandwich(
    stream: &RngStream,
    a_mat: &Matrix,
    r_left: usize,
    r_right: usize,
    trials: usize,
) -> Result<Matrix> {
    if trials == 0 {
        return Err(invalid("trials", "must be >= 1"));
    }
    let (ml, mt) = a_mat.shape();
    let base = stream.child(purpose::TRIAL);
    let mut acc = Matrix::zeros(ml, mt);
    for i in 0..trials {
        let s = base.child(i as u64);
        let pl = sample_haar_projector(&s.child(0), ml, r_left)?;
        let pt = sample_haar_projector(&s.child(1), mt, r_right)?;
        let ql = pl.matmul(&pl.transpose());
        let qt = pt.matmul(&pt.transpose());
        acc.add_scaled(1.0, &ql.matmul(a_mat).matmul(&qt));
    }
    acc.scale_mut(1.0 / trials as f64);
    Ok(acc)
}

/// `H̄ = E[Q H Q] = a H + b tr(H) I` for symmetric `H` acting columnwise.
pub fn mean_field_lifted_hessian(h: &Matrix, r: usize) -> Result<Matrix> {
    if !h.is_square() {
        return Err(Error::ShapeMismatch {
            op: "mean_field_lifted_hessian",
            expected: "square matrix".into(),
            found: format!("{}x{}", h.rows(), h.cols()),
        });
    }
    if !h.is_symmetric(1e-12 * (1.0 + h.max_abs())) {
        return Err(invalid("H", "mean-field mode needs a symmetric Hessian"));
    }
    let m = h.rows();
    let c = weingarten_constants(m, r)?;
    let mut out = h.scaled(c.a_f64);
    let t = c.b_f64 * h.trace();
    for i in 0..m {
        out[(i, i)] += t;
    }
    Ok(out)
}
