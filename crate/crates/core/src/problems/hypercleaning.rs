//! Data hyper-cleaning: per-sample weights `σ(x_i)` on a noisy training set
//! are tuned so that a ridge-regularized softmax classifier fits a clean
//! validation set.
//!
//! The lower variable is one block `W ∈ R^{d × c}` (features × classes):
//!
//! ```text
//! g(x, W) = (1/N) Σ_i σ(x_i) CE(Wᵀ a_i, ỹ_i) + (λ/2)‖W‖²
//! f(x, W) = (1/N_val) Σ_j CE(Wᵀ v_j, y_j)
//! ```
//!
//! Stochastic oracles draw minibatches (with replacement) from the training
//! and validation sets; the minibatch indices are the oracle noise.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{BilevelProblem, FullOracle, NoiseLevels};
use crate::blockmat::{BlockShape, BlockVar};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, conjugate_gradient, Matrix};
use crate::math;
use crate::randsrc::{standard_normal, RngStream};

/// Raw labeled data for [`HyperCleaning::from_data`].
#[derive(Debug, Clone)]
pub struct HyperCleaningData {
    /// `N × d` training features.
    pub train_features: Matrix,
    /// Possibly corrupted training labels in `0..classes`.
    pub train_labels: Vec<usize>,
    pub val_features: Matrix,
    pub val_labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct HyperCleaning {
    data: HyperCleaningData,
    ridge: f64,
    shape: BlockShape,
    corrupted: Vec<bool>,
    train_batch: Option<usize>,
    val_batch: Option<usize>,
}

/// Per-sample softmax statistics at a fixed `W`.
struct SampleStats {
    probs: Vec<f64>,
    loss: f64,
}

fn softmax_stats(w: &Matrix, a: &[f64], label: usize) -> SampleStats {
    let logits = w.t_matvec(a);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| math::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + math::ln(sum);
    SampleStats {
        probs: exps.iter().map(|e| e / sum).collect(),
        loss: lse - logits[label],
    }
}

/// `W ← W + s · a rᵀ`
fn add_outer(w: &mut Matrix, s: f64, a: &[f64], r: &[f64]) {
    for (i, &ai) in a.iter().enumerate() {
        let f = s * ai;
        if f == 0.0 {
            continue;
        }
        for (j, &rj) in r.iter().enumerate() {
            w[(i, j)] += f * rj;
        }
    }
}

/// `(diag p − p pᵀ) q`
fn softmax_jacobian_apply(p: &[f64], q: &[f64]) -> Vec<f64> {
    let pq = linalg::dot(p, q);
    p.iter().zip(q).map(|(pi, qi)| pi * (qi - pq)).collect()
}

fn residual(p: &[f64], label: usize) -> Vec<f64> {
    let mut r = p.to_vec();
    r[label] -= 1.0;
    r
}

impl HyperCleaning {
    pub fn from_data(data: HyperCleaningData, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(invalid("ridge", "must be > 0"));
        }
        if data.classes < 2 {
            return Err(invalid("classes", "need at least two classes"));
        }
        let (n_train, d) = data.train_features.shape();
        if n_train == 0 || data.val_features.rows() == 0 || d == 0 {
            return Err(invalid("data", "empty train or validation set"));
        }
        if data.val_features.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "HyperCleaning::from_data",
                expected: format!("{d} validation features"),
                found: format!("{}", data.val_features.cols()),
            });
        }
        if data.train_labels.len() != n_train || data.val_labels.len() != data.val_features.rows() {
            return Err(invalid("labels", "label count differs from sample count"));
        }
        if data
            .train_labels
            .iter()
            .chain(&data.val_labels)
            .any(|&y| y >= data.classes)
        {
            return Err(invalid("labels", "label out of range"));
        }
        if !data.train_features.is_finite() || !data.val_features.is_finite() {
            return Err(invalid("data", "non-finite feature"));
        }
        let shape = BlockShape::single(d, data.classes)?;
        Ok(HyperCleaning {
            corrupted: vec![false; n_train],
            data,
            ridge,
            shape,
            train_batch: None,
            val_batch: None,
        })
    }

    /// Minibatch sizes for the stochastic oracle; `None` means full batch.
    pub fn with_batches(mut self, train: Option<usize>, val: Option<usize>) -> Result<Self> {
        if train == Some(0) || val == Some(0) {
            return Err(invalid("batch", "must be >= 1"));
        }
        self.train_batch = train;
        self.val_batch = val;
        Ok(self)
    }

    pub fn n_train(&self) -> usize {
        self.data.train_features.rows()
    }

    pub fn n_val(&self) -> usize {
        self.data.val_features.rows()
    }

    pub fn data(&self) -> &HyperCleaningData {
        &self.data
    }

    /// Which training labels were flipped by the generator.
    pub fn corrupted(&self) -> &[bool] {
        &self.corrupted
    }

    fn train_row(&self, i: usize) -> &[f64] {
        self.data.train_features.row(i)
    }

    fn val_row(&self, j: usize) -> &[f64] {
        self.data.val_features.row(j)
    }

    /// Weighted training loss over `(index, multiplicity)` pairs with scale `s`.
    fn lower_loss_on(&self, x: &[f64], w: &Matrix, idx: &[(usize, f64)]) -> f64 {
        idx.iter()
            .map(|&(i, s)| {
                s * math::sigmoid(x[i]) * softmax_stats(w, self.train_row(i), self.data.train_labels[i]).loss
            })
            .sum::<f64>()
            + 0.5 * self.ridge * w.frobenius_dot(w)
    }

    fn lower_grad_on(&self, x: &[f64], w: &Matrix, idx: &[(usize, f64)]) -> Matrix {
        let mut out = w.scaled(self.ridge);
        for &(i, s) in idx {
            let a = self.train_row(i);
            let st = softmax_stats(w, a, self.data.train_labels[i]);
            add_outer(
                &mut out,
                s * math::sigmoid(x[i]),
                a,
                &residual(&st.probs, self.data.train_labels[i]),
            );
        }
        out
    }

    fn upper_grad_on(&self, w: &Matrix, idx: &[(usize, f64)]) -> Matrix {
        let mut out = Matrix::zeros(w.rows(), w.cols());
        for &(j, s) in idx {
            let v = self.val_row(j);
            let st = softmax_stats(w, v, self.data.val_labels[j]);
            add_outer(&mut out, s, v, &residual(&st.probs, self.data.val_labels[j]));
        }
        out
    }

    fn full_train(&self) -> Vec<(usize, f64)> {
        let s = 1.0 / self.n_train() as f64;
        (0..self.n_train()).map(|i| (i, s)).collect()
    }

    fn full_val(&self) -> Vec<(usize, f64)> {
        let s = 1.0 / self.n_val() as f64;
        (0..self.n_val()).map(|j| (j, s)).collect()
    }

    fn minibatch(stream: &RngStream, n: usize, batch: Option<usize>) -> Vec<(usize, f64)> {
        match batch {
            None => {
                let s = 1.0 / n as f64;
                (0..n).map(|i| (i, s)).collect()
            }
            Some(b) => {
                let mut rng = stream.rng();
                let s = 1.0 / b as f64;
                (0..b).map(|_| (rng.random_range(0..n), s)).collect()
            }
        }
    }

    fn lower_hvp_on(&self, x: &[f64], stats: &[(usize, f64, Vec<f64>)], v: &Matrix) -> Matrix {
        let mut out = v.scaled(self.ridge);
        for (i, s, probs) in stats {
            let a = self.train_row(*i);
            let q = v.t_matvec(a);
            add_outer(
                &mut out,
                s * math::sigmoid(x[*i]),
                a,
                &softmax_jacobian_apply(probs, &q),
            );
        }
        out
    }

    fn jvp_on(&self, x: &[f64], stats: &[(usize, f64, Vec<f64>)], v: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; self.n_train()];
        for (i, s, probs) in stats {
            let sig = math::sigmoid(x[*i]);
            let r = residual(probs, self.data.train_labels[*i]);
            out[*i] += s * sig * (1.0 - sig) * linalg::dot(&r, &v.t_matvec(self.train_row(*i)));
        }
        out
    }

    fn stats_on(&self, w: &Matrix, idx: &[(usize, f64)]) -> Vec<(usize, f64, Vec<f64>)> {
        idx.iter()
            .map(|&(i, s)| {
                (
                    i,
                    s,
                    softmax_stats(w, self.train_row(i), self.data.train_labels[i]).probs,
                )
            })
            .collect()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_train() {
            return Err(Error::ShapeMismatch {
                op: "HyperCleaning",
                expected: format!("x of length {}", self.n_train()),
                found: format!("{}", x.len()),
            });
        }
        Ok(())
    }

    /// Newton–CG on the strongly convex lower problem, starting from `w0`.
    pub fn solve_lower_from(&self, x: &[f64], w0: Matrix, tol: f64) -> Result<BlockVar> {
        self.check_x(x)?;
        let idx = self.full_train();
        let mut w = w0;
        let mut gnorm = f64::INFINITY;
        for _ in 0..100 {
            let grad = self.lower_grad_on(x, &w, &idx);
            gnorm = grad.frobenius_norm();
            if gnorm <= tol {
                return Ok(BlockVar::single(w));
            }
            let stats = self.stats_on(&w, &idx);
            let (d, c) = w.shape();
            let rhs: Vec<f64> = grad.as_slice().iter().map(|g| -g).collect();
            let cg_tol = (0.5f64).min(math::sqrt(gnorm)) * gnorm;
            let step = conjugate_gradient(
                |v| {
                    let vm = Matrix::from_vec(d, c, v.to_vec()).expect("shape");
                    self.lower_hvp_on(x, &stats, &vm).into_vec()
                },
                &rhs,
                None,
                cg_tol.max(1e-16),
                10 * d * c + 50,
            )?;
            let dir = Matrix::from_vec(d, c, step.x)?;
            let f0 = self.lower_loss_on(x, &w, &idx);
            let slope = grad.frobenius_dot(&dir);
            let mut t = 1.0;
            loop {
                let mut cand = w.clone();
                cand.add_scaled(t, &dir);
                let f1 = self.lower_loss_on(x, &cand, &idx);
                // The slack absorbs rounding in f once the decrease is below machine precision.
                if f1 <= f0 + 1e-4 * t * slope + 1e-14 * f0.abs() || t < 1e-10 {
                    w = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        if gnorm <= tol {
            return Ok(BlockVar::single(w));
        }
        Err(Error::NonConvergence {
            solver: "Newton-CG lower solve",
            iterations: 100,
            residual: gnorm,
        })
    }
}

impl BilevelProblem for HyperCleaning {
    fn upper_dim(&self) -> usize {
        self.n_train()
    }

    fn lower_shape(&self) -> &BlockShape {
        &self.shape
    }

    fn noise(&self) -> NoiseLevels {
        NoiseLevels::default()
    }

    fn strong_convexity(&self) -> f64 {
        self.ridge
    }

    fn upper_objective(&self, _x: &[f64], y: &BlockVar) -> f64 {
        let w = y.block(0);
        let s = 1.0 / self.n_val() as f64;
        (0..self.n_val())
            .map(|j| s * softmax_stats(w, self.val_row(j), self.data.val_labels[j]).loss)
            .sum()
    }

    fn lower_objective(&self, x: &[f64], y: &BlockVar) -> f64 {
        self.lower_loss_on(x, y.block(0), &self.full_train())
    }

    fn grad_x_upper(&self, _x: &[f64], _y: &BlockVar) -> Vec<f64> {
        vec![0.0; self.n_train()]
    }

    fn grad_y_upper(&self, _x: &[f64], y: &BlockVar) -> BlockVar {
        BlockVar::single(self.upper_grad_on(y.block(0), &self.full_val()))
    }

    fn grad_x_lower(&self, x: &[f64], y: &BlockVar) -> Vec<f64> {
        let w = y.block(0);
        let s = 1.0 / self.n_train() as f64;
        (0..self.n_train())
            .map(|i| {
                let sig = math::sigmoid(x[i]);
                s * sig * (1.0 - sig) * softmax_stats(w, self.train_row(i), self.data.train_labels[i]).loss
            })
            .collect()
    }

    fn grad_y_lower(&self, x: &[f64], y: &BlockVar) -> BlockVar {
        BlockVar::single(self.lower_grad_on(x, y.block(0), &self.full_train()))
    }

    fn hvp(&self, x: &[f64], y: &BlockVar, w: &BlockVar) -> BlockVar {
        let stats = self.stats_on(y.block(0), &self.full_train());
        BlockVar::single(self.lower_hvp_on(x, &stats, w.block(0)))
    }

    fn jvp(&self, x: &[f64], y: &BlockVar, w: &BlockVar) -> Vec<f64> {
        let stats = self.stats_on(y.block(0), &self.full_train());
        self.jvp_on(x, &stats, w.block(0))
    }

    fn lower_solution(&self, x: &[f64]) -> Result<BlockVar> {
        let (d, c) = self.shape.layers()[0];
        self.solve_lower_from(x, Matrix::zeros(d, c), 1e-10)
    }

    fn draw_oracle<'a>(&'a self, stream: &RngStream, x: &'a [f64], y: &'a BlockVar) -> Result<FullOracle<'a>> {
        self.check_x(x)?;
        let w = y.block(0);
        let train = Self::minibatch(&stream.child(0), self.n_train(), self.train_batch);
        let val = Self::minibatch(&stream.child(1), self.n_val(), self.val_batch);
        let grad_y_lower = BlockVar::single(self.lower_grad_on(x, w, &train));
        let grad_y_upper = BlockVar::single(self.upper_grad_on(w, &val));
        let stats = self.stats_on(w, &train);
        let stats_j = stats.clone();
        let hvp = Box::new(move |v: &BlockVar| BlockVar::single(self.lower_hvp_on(x, &stats, v.block(0))));
        let jvp = Box::new(move |v: &BlockVar| self.jvp_on(x, &stats_j, v.block(0)));
        Ok(FullOracle::new(
            vec![0.0; self.n_train()],
            grad_y_upper,
            grad_y_lower,
            hvp,
            jvp,
        ))
    }
}

/// Synthetic Gaussian-cluster classification data with a fraction of the
/// training labels reassigned uniformly to a different class.
#[allow(clippy::too_many_arguments)]
pub fn make_hypercleaning(
    stream: &RngStream,
    n_train: usize,
    n_val: usize,
    d_feat: usize,
    classes: usize,
    noise_rate: f64,
    ridge: f64,
) -> Result<HyperCleaning> {
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(invalid("noise_rate", "must lie in [0, 1)"));
    }
    if classes < 2 {
        return Err(invalid("classes", "need at least two classes"));
    }
    if n_train < classes || n_val == 0 || d_feat == 0 {
        return Err(invalid("sizes", "need n_train >= classes, n_val >= 1, d_feat >= 1"));
    }
    let mut rng = stream.child(0).rng();
    let centers = Matrix::from_fn(classes, d_feat, |_, _| standard_normal(&mut rng));
    let center_scale = 3.0 / math::sqrt(d_feat as f64);
    let draw = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| {
        let mut feats = Matrix::zeros(n, d_feat);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            // Balanced classes, order shuffled by the stream.
            let y = if i < classes { i } else { rng.random_range(0..classes) };
            labels.push(y);
            for k in 0..d_feat {
                feats[(i, k)] = center_scale * centers[(y, k)] + standard_normal(rng);
            }
        }
        (feats, labels)
    };
    let mut rng_t = stream.child(1).rng();
    let (train_features, clean_labels) = draw(&mut rng_t, n_train);
    let mut rng_v = stream.child(2).rng();
    let (val_features, val_labels) = draw(&mut rng_v, n_val);

    let mut rng_n = stream.child(3).rng();
    let mut corrupted = vec![false; n_train];
    let mut train_labels = clean_labels.clone();
    for i in 0..n_train {
        if rng_n.random::<f64>() < noise_rate {
            let shift = rng_n.random_range(1..classes);
            train_labels[i] = (clean_labels[i] + shift) % classes;
            corrupted[i] = true;
        }
    }
    for c in 0..classes {
        if !train_labels.contains(&c) {
            return Err(invalid("classes", format!("class {c} has no training samples")));
        }
    }
    let mut problem = HyperCleaning::from_data(
        HyperCleaningData {
            train_features,
            train_labels,
            val_features,
            val_labels,
            classes,
        },
        ridge,
    )?;
    problem.corrupted = corrupted;
    Ok(problem)
}
