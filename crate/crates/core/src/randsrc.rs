//! Deterministic seeded randomness.
//!
//! Every random draw is addressed by a [`RngStream`]: a root seed plus a path
//! of integers (iteration index, purpose tag, layer, trial, ...). The path is
//! hashed into a 256-bit ChaCha12 key, so the draws under one address never
//! depend on what was drawn under any other address or in what order.
//!
//! Gaussian variates come from the ziggurat sampler of `rand_distr`
//! (`StandardNormal`); Rademacher signs from single random bits.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blockmat::{BlockShape, BlockVar};
use crate::error::{invalid, Error, Result};
use crate::linalg::{householder_qr, Matrix};
use crate::math;

/// Purpose tags for stream derivation.
pub mod purpose {
    pub const PROJECTOR: u64 = 0x5052_4f4a;
    pub const PROBE: u64 = 0x5052_4f42;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const PROBLEM: u64 = 0x5052_4f42_4c4d;
    pub const TRIAL: u64 = 0x5452_4941;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Address of an independent random stream: `(seed, path)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, path: Vec::new() }
    }

    /// Sub-stream with `tag` appended to the path.
    pub fn child(&self, tag: u64) -> Self {
        let mut path = self.path.clone();
        path.push(tag);
        RngStream { seed: self.seed, path }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        // Length-prefixed so that paths of different depth never collide.
        let mut h = splitmix64(self.seed ^ 0x6272_6f73_5f72_6e67);
        h = splitmix64(h ^ self.path.len() as u64);
        for &p in &self.path {
            h = splitmix64(h ^ splitmix64(p));
        }
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_mut(8).enumerate() {
            h = splitmix64(h.wrapping_add(i as u64));
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha12Rng::from_seed(key)
    }
}

pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub(crate) fn rademacher<R: Rng>(rng: &mut R) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

pub(crate) fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, sigma: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| sigma * standard_normal(rng))
}

fn check_rank(m: usize, r: usize) -> Result<()> {
    if r < 2 || r > m {
        return Err(Error::InvalidRank { m, r });
    }
    Ok(())
}

/// Haar-distributed `m × r` matrix with orthonormal columns.
///
/// Thin Householder QR of an i.i.d. Gaussian matrix, with the sign of each
/// column of `Q` flipped so that `diag(R) > 0`.
pub fn sample_haar_orthonormal<R: Rng>(rng: &mut R, m: usize, r: usize) -> Result<Matrix> {
    if r == 0 || r > m {
        return Err(Error::InvalidRank { m, r });
    }
    let g = gaussian_matrix(rng, m, r, 1.0);
    let (mut q, rmat) = householder_qr(&g)?;
    for j in 0..r {
        if rmat[(j, j)] < 0.0 {
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// Scaled Haar projector `√(m/r) · Q_r` with `PᵀP = (m/r) I`.
pub fn sample_haar_projector(stream: &RngStream, m: usize, r: usize) -> Result<Matrix> {
    check_rank(m, r)?;
    let mut rng = stream.rng();
    let q = sample_haar_orthonormal(&mut rng, m, r)?;
    Ok(q.scaled(math::sqrt(m as f64 / r as f64)))
}

/// Per-layer scaled semi-orthogonal projectors `P_ℓ ∈ R^{m_ℓ × r_ℓ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorSet {
    mats: Vec<Matrix>,
    ranks: Vec<usize>,
}

impl ProjectorSet {
    /// Wraps explicit projector matrices after checking `PᵀP = (m/r) I`.
    pub fn from_matrices(mats: Vec<Matrix>) -> Result<Self> {
        let mut ranks = Vec::with_capacity(mats.len());
        for p in &mats {
            let (m, r) = p.shape();
            check_rank(m, r)?;
            let gram = p.t_matmul(p);
            let target = Matrix::identity(r).scaled(m as f64 / r as f64);
            if gram.sub(&target).max_abs() > 1e-10 * (m as f64 / r as f64) {
                return Err(invalid("projector", "PᵀP is not (m/r)·I"));
            }
            ranks.push(r);
        }
        Ok(ProjectorSet { mats, ranks })
    }

    /// Identity projectors (`r_ℓ = m_ℓ`, `P_ℓ = I`).
    pub fn identity(shape: &BlockShape) -> Self {
        ProjectorSet {
            mats: shape.layers().iter().map(|&(m, _)| Matrix::identity(m)).collect(),
            ranks: shape.layers().iter().map(|&(m, _)| m).collect(),
        }
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn num_layers(&self) -> usize {
        self.mats.len()
    }

    /// `ω_P = max_ℓ m_ℓ / r_ℓ`.
    pub fn omega(&self) -> f64 {
        self.mats
            .iter()
            .map(|p| p.rows() as f64 / p.cols() as f64)
            .fold(1.0, f64::max)
    }
}

fn check_ranks(shape: &BlockShape, ranks: &[usize]) -> Result<()> {
    if ranks.len() != shape.num_layers() {
        return Err(Error::ShapeMismatch {
            op: "ranks",
            expected: format!("{} ranks", shape.num_layers()),
            found: format!("{} ranks", ranks.len()),
        });
    }
    for (&(m, _), &r) in shape.layers().iter().zip(ranks) {
        check_rank(m, r)?;
    }
    Ok(())
}

/// Independent scaled Haar projectors, one per layer; layer `ℓ` draws from
/// `stream.child(ℓ)`.
pub fn sample_projector_set(stream: &RngStream, shape: &BlockShape, ranks: &[usize]) -> Result<ProjectorSet> {
    check_ranks(shape, ranks)?;
    let mats = shape
        .layers()
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(l, (&(m, _), &r))| sample_haar_projector(&stream.child(l as u64), m, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProjectorSet {
        mats,
        ranks: ranks.to_vec(),
    })
}

/// Rademacher probes `u_ℓ ∈ {±1}^{n_ℓ}`, `ξ_ℓ ∈ {±1}^{r_ℓ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    pub u: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

impl ProbeSet {
    pub fn num_layers(&self) -> usize {
        self.u.len()
    }
}

pub fn sample_probe_set(stream: &RngStream, shape: &BlockShape, ranks: &[usize]) -> Result<ProbeSet> {
    check_ranks(shape, ranks)?;
    let mut u = Vec::with_capacity(ranks.len());
    let mut xi = Vec::with_capacity(ranks.len());
    for (l, (&(_, n), &r)) in shape.layers().iter().zip(ranks).enumerate() {
        let mut rng = stream.child(l as u64).rng();
        u.push((0..n).map(|_| rademacher(&mut rng)).collect());
        xi.push((0..r).map(|_| rademacher(&mut rng)).collect());
    }
    Ok(ProbeSet { u, xi })
}

/// I.i.d. `N(0, σ²)` entries in every block.
pub fn sample_gaussian_blockvar(stream: &RngStream, shape: &BlockShape, sigma: f64) -> Result<BlockVar> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(BlockVar::zeros(shape));
    }
    let mut rng = stream.rng();
    let blocks = shape
        .layers()
        .iter()
        .map(|&(m, n)| gaussian_matrix(&mut rng, m, n, sigma))
        .collect();
    BlockVar::from_blocks(blocks)
}

pub fn sample_gaussian_vec(stream: &RngStream, len: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(alloc::vec![0.0; len]);
    }
    let mut rng = stream.rng();
    Ok((0..len).map(|_| sigma * standard_normal(&mut rng)).collect())
}
