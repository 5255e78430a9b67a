//! Multilayer block variables and the product Frobenius space.
//!
//! A [`BlockVar`] holds one dense matrix per layer (`m_ℓ × n_ℓ`); a
//! [`ReducedVar`] holds the projected counterpart (`r_ℓ × n_ℓ`). Products
//! with a [`ProjectorSet`] act blockwise: `(P B)_ℓ = P_ℓ B_ℓ` and
//! `(Pᵀ U)_ℓ = P_ℓᵀ U_ℓ`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::randsrc::ProjectorSet;

/// Per-layer `(rows, cols)` of a multilayer variable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockShape {
    layers: Vec<(usize, usize)>,
}

impl BlockShape {
    pub fn new(layers: Vec<(usize, usize)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(crate::error::invalid("BlockShape", "no layers"));
        }
        if layers.iter().any(|&(m, n)| m == 0 || n == 0) {
            return Err(crate::error::invalid("BlockShape", "zero dimension"));
        }
        Ok(BlockShape { layers })
    }

    pub fn single(m: usize, n: usize) -> Result<Self> {
        Self::new(alloc::vec![(m, n)])
    }

    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total number of scalar entries.
    pub fn dim(&self) -> usize {
        self.layers.iter().map(|(m, n)| m * n).sum()
    }

    /// Shape of the reduced space for the given ranks.
    pub fn reduced(&self, ranks: &[usize]) -> Result<BlockShape> {
        if ranks.len() != self.layers.len() {
            return Err(Error::ShapeMismatch {
                op: "BlockShape::reduced",
                expected: format!("{} ranks", self.layers.len()),
                found: format!("{} ranks", ranks.len()),
            });
        }
        Ok(BlockShape {
            layers: self.layers.iter().zip(ranks).map(|(&(_, n), &r)| (r, n)).collect(),
        })
    }
}

fn describe(blocks: &[Matrix]) -> String {
    let dims: Vec<String> = blocks.iter().map(|b| format!("{}x{}", b.rows(), b.cols())).collect();
    format!("[{}]", dims.join(", "))
}

fn same_shapes(op: &'static str, a: &[Matrix], b: &[Matrix]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::ShapeMismatch {
            op,
            expected: describe(a),
            found: describe(b),
        });
    }
    Ok(())
}

macro_rules! block_algebra {
    ($ty:ident) => {
        impl $ty {
            pub fn from_blocks(blocks: Vec<Matrix>) -> Result<Self> {
                if blocks.is_empty() {
                    return Err(crate::error::invalid(stringify!($ty), "no blocks"));
                }
                if blocks.iter().any(|b| !b.is_finite()) {
                    return Err(crate::error::invalid(stringify!($ty), "non-finite entry"));
                }
                Ok($ty { blocks })
            }

            /// Skips the finiteness check; for internal arithmetic whose
            /// inputs were already validated.
            pub(crate) fn from_blocks_unchecked(blocks: Vec<Matrix>) -> Self {
                debug_assert!(!blocks.is_empty());
                $ty { blocks }
            }

            pub fn zeros(shape: &BlockShape) -> Self {
                $ty {
                    blocks: shape.layers().iter().map(|&(m, n)| Matrix::zeros(m, n)).collect(),
                }
            }

            pub fn shape(&self) -> BlockShape {
                BlockShape {
                    layers: self.blocks.iter().map(|b| b.shape()).collect(),
                }
            }

            pub fn blocks(&self) -> &[Matrix] {
                &self.blocks
            }

            pub fn blocks_mut(&mut self) -> &mut [Matrix] {
                &mut self.blocks
            }

            pub fn block(&self, l: usize) -> &Matrix {
                &self.blocks[l]
            }

            pub fn block_mut(&mut self, l: usize) -> &mut Matrix {
                &mut self.blocks[l]
            }

            pub fn into_blocks(self) -> Vec<Matrix> {
                self.blocks
            }

            pub fn num_layers(&self) -> usize {
                self.blocks.len()
            }

            /// Product Frobenius inner product `Σ_ℓ ⟨U_ℓ, V_ℓ⟩`.
            pub fn inner(&self, other: &Self) -> Result<f64> {
                same_shapes("inner", &self.blocks, &other.blocks)?;
                Ok(self.dot(other))
            }

            /// Unchecked inner product for internal use on same-shape operands.
            pub(crate) fn dot(&self, other: &Self) -> f64 {
                self.blocks
                    .iter()
                    .zip(&other.blocks)
                    .map(|(a, b)| a.frobenius_dot(b))
                    .sum()
            }

            pub fn norm(&self) -> f64 {
                math::sqrt(self.dot(self))
            }

            /// `a · self + other`, blockwise.
            pub fn axpy(a: f64, u: &Self, v: &Self) -> Result<Self> {
                same_shapes("axpy", &u.blocks, &v.blocks)?;
                let mut out = v.clone();
                out.add_scaled(a, u);
                Ok(out)
            }

            /// In-place `self += a · other` for same-shape operands.
            pub(crate) fn add_scaled(&mut self, a: f64, other: &Self) {
                debug_assert_eq!(self.blocks.len(), other.blocks.len());
                for (x, y) in self.blocks.iter_mut().zip(&other.blocks) {
                    x.add_scaled(a, y);
                }
            }

            pub fn scaled(&self, a: f64) -> Self {
                $ty {
                    blocks: self.blocks.iter().map(|b| b.scaled(a)).collect(),
                }
            }

            pub fn is_finite(&self) -> bool {
                self.blocks.iter().all(|b| b.is_finite())
            }

            /// Concatenation of the row-major entries of every block.
            pub fn to_flat(&self) -> Vec<f64> {
                let mut out = Vec::new();
                for b in &self.blocks {
                    out.extend_from_slice(b.as_slice());
                }
                out
            }

            pub fn from_flat(shape: &BlockShape, flat: &[f64]) -> Result<Self> {
                if flat.len() != shape.dim() {
                    return Err(Error::ShapeMismatch {
                        op: "from_flat",
                        expected: format!("{} entries", shape.dim()),
                        found: format!("{} entries", flat.len()),
                    });
                }
                let mut blocks = Vec::with_capacity(shape.num_layers());
                let mut off = 0;
                for &(m, n) in shape.layers() {
                    blocks.push(Matrix::from_vec(m, n, flat[off..off + m * n].to_vec())?);
                    off += m * n;
                }
                Ok($ty { blocks })
            }
        }
    };
}

/// Multilayer matrix variable (`Y`, `Z`, gradients, directions).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVar {
    blocks: Vec<Matrix>,
}

/// Multilayer variable in the projected coordinates of a [`ProjectorSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedVar {
    blocks: Vec<Matrix>,
}

block_algebra!(BlockVar);
block_algebra!(ReducedVar);

impl BlockVar {
    pub fn single(block: Matrix) -> Self {
        BlockVar {
            blocks: alloc::vec![block],
        }
    }
}

impl ReducedVar {
    /// `E_t(W)`: inserts `w` into block `t` of a zero reduced variable.
    pub fn insert(shape: &BlockShape, t: usize, w: Matrix) -> Self {
        let mut out = Self::zeros(shape);
        debug_assert_eq!(out.blocks[t].shape(), w.shape());
        out.blocks[t] = w;
        out
    }
}

/// Product Frobenius inner product; free-function form of [`BlockVar::inner`].
pub fn inner(u: &BlockVar, v: &BlockVar) -> Result<f64> {
    u.inner(v)
}

pub fn norm(u: &BlockVar) -> f64 {
    u.norm()
}

/// Blockwise `a · U + V`.
pub fn axpy(a: f64, u: &BlockVar, v: &BlockVar) -> Result<BlockVar> {
    BlockVar::axpy(a, u, v)
}

fn check_projector_layers(op: &'static str, p: &ProjectorSet, layers: usize) -> Result<()> {
    if p.num_layers() != layers {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{} projector layers", layers),
            found: format!("{}", p.num_layers()),
        });
    }
    Ok(())
}

/// `Pᵀ U`, blockwise.
pub fn project_down(p: &ProjectorSet, u: &BlockVar) -> Result<ReducedVar> {
    check_projector_layers("project_down", p, u.num_layers())?;
    let mut blocks = Vec::with_capacity(u.num_layers());
    for (l, (pl, ul)) in p.matrices().iter().zip(u.blocks()).enumerate() {
        if pl.rows() != ul.rows() {
            return Err(Error::ShapeMismatch {
                op: "project_down",
                expected: format!("layer {l} with {} rows", pl.rows()),
                found: format!("{}x{}", ul.rows(), ul.cols()),
            });
        }
        blocks.push(pl.t_matmul(ul));
    }
    Ok(ReducedVar { blocks })
}

/// `P B`, blockwise.
pub fn lift_up(p: &ProjectorSet, b: &ReducedVar) -> Result<BlockVar> {
    check_projector_layers("lift_up", p, b.num_layers())?;
    let mut blocks = Vec::with_capacity(b.num_layers());
    for (l, (pl, bl)) in p.matrices().iter().zip(b.blocks()).enumerate() {
        if pl.cols() != bl.rows() {
            return Err(Error::ShapeMismatch {
                op: "lift_up",
                expected: format!("layer {l} with {} rows", pl.cols()),
                found: format!("{}x{}", bl.rows(), bl.cols()),
            });
        }
        blocks.push(pl.matmul(bl));
    }
    Ok(BlockVar { blocks })
}

/// Absolute-or-relative closeness: `|a − b| ≤ max(atol, rtol · scale)`.
pub fn close(a: f64, b: f64, atol: f64, rtol: f64) -> bool {
    let scale = math::abs(a).max(math::abs(b));
    math::abs(a - b) <= atol.max(rtol * scale)
}

/// Default tolerances for deterministic algebra.
pub const ATOL: f64 = 1e-10;
pub const RTOL: f64 = 1e-8;
