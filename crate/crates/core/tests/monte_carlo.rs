//! Statistical checks of samplers, moment identities and estimator means.

use bros_core::blockmat::{BlockShape, BlockVar};
use bros_core::estimators::{
    assemble_multilayer_hvp, build_aux_direction, build_hypergrad_sample, build_lower_direction, corr_hvp_single_layer,
    naive_lifted_hvp,
};
use bros_core::linalg::{self, Matrix};
use bros_core::moments::{expected_self_sandwich, mean_field_lifted_hessian, monte_carlo_self_sandwich};
use bros_core::problems::{
    make_counterexample, make_quadratic, make_quadratic_multilayer, BilevelProblem, NoiseLevels, QuadraticHessian,
    QuadraticProblem,
};
use bros_core::randsrc::{
    purpose, sample_gaussian_blockvar, sample_haar_orthonormal, sample_haar_projector, sample_probe_set,
    sample_projector_set, RngStream,
};

fn rel(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm()
}

fn rel_block(a: &BlockVar, b: &BlockVar) -> f64 {
    BlockVar::axpy(-1.0, b, a).unwrap().norm() / b.norm()
}

fn random_symmetric(stream: &RngStream, m: usize) -> Matrix {
    let g = sample_gaussian_blockvar(stream, &BlockShape::single(m, m).unwrap(), 1.0).unwrap();
    let g = g.block(0);
    g.add(&g.transpose()).scaled(0.5)
}

#[test]
fn projector_outer_product_has_identity_mean() {
    let s = RngStream::new(1);
    let mut acc = Matrix::zeros(4, 4);
    let n = 100_000;
    for i in 0..n {
        let p = sample_haar_projector(&s.child(i), 4, 2).unwrap();
        acc.add_scaled(1.0, &p.matmul(&p.transpose()));
    }
    let mean = acc.scaled(1.0 / n as f64);
    assert!(mean.sub(&Matrix::identity(4)).max_abs() < 0.01, "{mean:?}");
}

#[test]
fn layers_are_independent() {
    let shape = BlockShape::new(vec![(3, 1), (3, 1)]).unwrap();
    let s = RngStream::new(2);
    let n = 10_000;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let p = sample_projector_set(&s.child(i), &shape, &[2, 2]).unwrap();
        let a = p.matrices()[0][(0, 0)];
        let b = p.matrices()[1][(0, 0)];
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    let corr = sab / (saa * sbb).sqrt();
    assert!(corr.abs() < 0.02, "cross-correlation {corr}");
}

#[test]
fn probes_and_gaussians_have_expected_moments() {
    let shape = BlockShape::single(3, 5).unwrap();
    let s = RngStream::new(3);
    let n = 100_000;
    let mut sum_u = 0.0;
    for i in 0..n {
        let probes = sample_probe_set(&s.child(i), &shape, &[2]).unwrap();
        sum_u += probes.u[0][0];
        assert_eq!(linalg::dot(&probes.xi[0], &probes.xi[0]), 2.0);
    }
    assert!((sum_u / n as f64).abs() < 0.01);

    let g = sample_gaussian_blockvar(&s.child(u64::MAX), &BlockShape::single(1000, 100).unwrap(), 0.5).unwrap();
    let flat = g.to_flat();
    let mean = flat.iter().sum::<f64>() / flat.len() as f64;
    let var = flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / flat.len() as f64;
    assert!((var - 0.25).abs() < 0.02 * 0.25, "variance {var}");
}

#[test]
fn haar_distribution_is_rotation_invariant() {
    // V is a fixed rotation; compare first two moments of entries of Q and VQ.
    let v = {
        let mut rng = RngStream::new(99).rng();
        sample_haar_orthonormal(&mut rng, 4, 4).unwrap()
    };
    let s = RngStream::new(4);
    let n = 100_000;
    let mut m2_q = Matrix::zeros(4, 2);
    let mut m2_vq = Matrix::zeros(4, 2);
    let mut m1_q = Matrix::zeros(4, 2);
    let mut m1_vq = Matrix::zeros(4, 2);
    for i in 0..n {
        let mut rng = s.child(i).rng();
        let q = sample_haar_orthonormal(&mut rng, 4, 2).unwrap();
        let vq = v.matmul(&q);
        for a in 0..4 {
            for b in 0..2 {
                m1_q[(a, b)] += q[(a, b)];
                m1_vq[(a, b)] += vq[(a, b)];
                m2_q[(a, b)] += q[(a, b)] * q[(a, b)];
                m2_vq[(a, b)] += vq[(a, b)] * vq[(a, b)];
            }
        }
    }
    let k = 1.0 / n as f64;
    // E[q_ab] = 0, E[q_ab²] = 1/4.
    assert!(m1_q.scaled(k).max_abs() < 0.01 && m1_vq.scaled(k).max_abs() < 0.01);
    let quarter = Matrix::from_fn(4, 2, |_, _| 0.25);
    assert!(m2_q.scaled(k).sub(&quarter).max_abs() < 0.02 * 0.25);
    assert!(m2_vq.scaled(k).sub(&quarter).max_abs() < 0.02 * 0.25);
}

#[test]
fn sandwich_matches_closed_form_on_random_matrices() {
    let s = RngStream::new(5);
    let a = random_symmetric(&s.child(0), 5);
    let mc = monte_carlo_self_sandwich(&s.child(1), &a, 3, 200_000).unwrap();
    assert!(rel(&mc, &expected_self_sandwich(&a, 3).unwrap()) < 0.01);

    let b = random_symmetric(&s.child(2), 4);
    let spd = b.matmul(&b).add(&Matrix::identity(4));
    let mc = monte_carlo_self_sandwich(&s.child(3), &spd, 2, 200_000).unwrap();
    assert!(rel(&mc, &mean_field_lifted_hessian(&spd, 2).unwrap()) < 0.01);

    // (6, 3): fit (a − b, b) from a non-symmetric A and compare with 11/10, 3/20.
    let nonsym = Matrix::from_fn(6, 6, |i, j| if j == (i + 1) % 6 { 1.0 } else { 0.0 });
    let mc = monte_carlo_self_sandwich(&s.child(4), &nonsym, 3, 200_000).unwrap();
    let (mut amb, mut bt) = (0.0, 0.0);
    for i in 0..6 {
        amb += mc[(i, (i + 1) % 6)];
        bt += mc[((i + 1) % 6, i)];
    }
    let (amb, b_fit) = (amb / 6.0, bt / 6.0);
    assert!((amb - (1.1 - 0.15)).abs() < 0.02, "a - b = {amb}");
    assert!((b_fit - 0.15).abs() < 0.02, "b = {b_fit}");
}

fn counterexample_z() -> BlockVar {
    BlockVar::single(Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]]))
}

#[test]
fn counterexample_naive_bias_and_corrected_mean() {
    let p = make_counterexample();
    let shape = p.lower_shape().clone();
    let x = [0.0];
    let y = p.lower_solution(&x).unwrap();
    let z = counterexample_z();
    let s = RngStream::new(6);
    let n = 200_000;
    let mut naive = Matrix::zeros(3, 1);
    let mut corr = Matrix::zeros(3, 1);
    for i in 0..n {
        let t = s.child(i);
        let proj = sample_projector_set(&t.child(purpose::PROJECTOR), &shape, &[2]).unwrap();
        let probes = sample_probe_set(&t.child(purpose::PROBE), &shape, &[2]).unwrap();
        let sample = p.projected_oracles(&t.child(purpose::NOISE), &x, &y, &proj).unwrap();
        naive.add_scaled(1.0, naive_lifted_hvp(&proj, &z, &sample).unwrap().block(0));
        corr.add_scaled(
            1.0,
            &corr_hvp_single_layer(&proj.matrices()[0], z.block(0), &sample, &probes, 0).unwrap(),
        );
    }
    let naive = naive.scaled(1.0 / n as f64);
    let corr = corr.scaled(1.0 / n as f64);
    assert!((naive[(0, 0)] - 39.0 / 20.0).abs() < 0.01 * 39.0 / 20.0, "{naive:?}");
    assert!(naive[(1, 0)].abs() < 0.02 && naive[(2, 0)].abs() < 0.02);
    let want = [1.0, 0.0, 0.0];
    for (i, w) in want.iter().enumerate() {
        assert!((corr[(i, 0)] - w).abs() < 0.015, "entry {i}: {}", corr[(i, 0)]);
    }
}

#[test]
fn counterexample_directions_at_fixed_point() {
    let p = make_counterexample();
    let shape = p.lower_shape().clone();
    let x = [0.3];
    let y = p.lower_solution(&x).unwrap();
    let z = p.aux_solution(&x).unwrap();
    let s = RngStream::new(7);
    let n = 200_000;
    let mut aux = BlockVar::zeros(&shape);
    let mut w = 0.0;
    for i in 0..n {
        let t = s.child(i);
        let proj = sample_projector_set(&t.child(purpose::PROJECTOR), &shape, &[2]).unwrap();
        let probes = sample_probe_set(&t.child(purpose::PROBE), &shape, &[2]).unwrap();
        let sample = p.projected_oracles(&t.child(purpose::NOISE), &x, &y, &proj).unwrap();
        aux = BlockVar::axpy(1.0, &build_aux_direction(&proj, &z, &sample, &probes).unwrap(), &aux).unwrap();
        w += build_hypergrad_sample(&proj, &z, &sample).unwrap()[0];
        let v = build_lower_direction(&proj, &sample).unwrap();
        assert_eq!(v.norm(), 0.0);
    }
    let aux = aux.scaled(1.0 / n as f64);
    let grad_f = p.grad_y_upper(&x, &y).norm();
    assert!(aux.norm() < 0.02 * grad_f, "{aux:?}");
    let w = w / n as f64;
    assert!((w - 1.3).abs() < 0.01 * 1.3, "{w}");
}

fn noisy_quadratic() -> QuadraticProblem {
    make_quadratic(&RngStream::new(8), 6, 3, 2, 3.0, 0.1, 0.1).unwrap()
}

#[test]
fn direction_triad_is_unbiased() {
    let p = noisy_quadratic();
    let shape = p.lower_shape().clone();
    let s = RngStream::new(9);
    let x = [0.7, -0.4];
    let y = sample_gaussian_blockvar(&s.child(1), &shape, 1.0).unwrap();
    let z = sample_gaussian_blockvar(&s.child(2), &shape, 1.0).unwrap();
    let d_y = p.grad_y_lower(&x, &y);
    let d_z = BlockVar::axpy(-1.0, &p.grad_y_upper(&x, &y), &p.hvp(&x, &y, &z)).unwrap();
    let mut d_x = p.grad_x_upper(&x, &y);
    linalg::axpy_slice(-1.0, &p.jvp(&x, &y, &z), &mut d_x);

    let ranks = [3];
    let n = 200_000;
    let mut v_sum = BlockVar::zeros(&shape);
    let mut s_sum = BlockVar::zeros(&shape);
    let mut w_sum = vec![0.0; 2];
    let base = s.child(purpose::TRIAL);
    for i in 0..n {
        let t = base.child(i);
        let proj = sample_projector_set(&t.child(purpose::PROJECTOR), &shape, &ranks).unwrap();
        let probes = sample_probe_set(&t.child(purpose::PROBE), &shape, &ranks).unwrap();
        let sample = p.projected_oracles(&t.child(purpose::NOISE), &x, &y, &proj).unwrap();
        v_sum = BlockVar::axpy(1.0, &build_lower_direction(&proj, &sample).unwrap(), &v_sum).unwrap();
        s_sum = BlockVar::axpy(1.0, &build_aux_direction(&proj, &z, &sample, &probes).unwrap(), &s_sum).unwrap();
        linalg::axpy_slice(1.0, &build_hypergrad_sample(&proj, &z, &sample).unwrap(), &mut w_sum);
    }
    let k = 1.0 / n as f64;
    assert!(rel_block(&v_sum.scaled(k), &d_y) < 0.015);
    assert!(rel_block(&s_sum.scaled(k), &d_z) < 0.015);
    let w_mean: Vec<f64> = w_sum.iter().map(|v| v * k).collect();
    let diff: Vec<f64> = w_mean.iter().zip(&d_x).map(|(a, b)| a - b).collect();
    assert!(linalg::norm(&diff) < 0.015 * linalg::norm(&d_x));
}

#[test]
fn block_diagonal_two_layer_mean() {
    // Block-diagonal Hessian assembled from two independent SPD blocks.
    let s = RngStream::new(10);
    let shape = BlockShape::new(vec![(4, 2), (3, 2)]).unwrap();
    let dense = make_quadratic_multilayer(&s.child(0), shape.clone(), 1, 2.0, 0.0, 0.0).unwrap();
    let full = match dense.hessian() {
        QuadraticHessian::Dense(h) => h.clone(),
        QuadraticHessian::Columnwise(_) => unreachable!(),
    };
    let mut blockdiag = Matrix::zeros(14, 14);
    blockdiag.set_block(0, 0, &full.block(0, 0, 8, 8));
    blockdiag.set_block(8, 8, &full.block(8, 8, 6, 6));
    let p = QuadraticProblem::new(
        shape.clone(),
        QuadraticHessian::Dense(blockdiag),
        dense.g_basis().to_vec(),
        dense.upper_linear_term().clone(),
        NoiseLevels::default(),
    )
    .unwrap();
    let x = [0.2];
    let y = p.lower_solution(&x).unwrap();
    let z = sample_gaussian_blockvar(&s.child(1), &shape, 1.0).unwrap();
    let want = p.hvp(&x, &y, &z);
    let ranks = [2, 2];
    let n = 200_000;
    let mut sum = BlockVar::zeros(&shape);
    for i in 0..n {
        let t = s.child(2).child(i);
        let proj = sample_projector_set(&t.child(purpose::PROJECTOR), &shape, &ranks).unwrap();
        let probes = sample_probe_set(&t.child(purpose::PROBE), &shape, &ranks).unwrap();
        let sample = p.projected_oracles(&t.child(purpose::NOISE), &x, &y, &proj).unwrap();
        sum = BlockVar::axpy(
            1.0,
            &assemble_multilayer_hvp(&proj, &z, &sample, &probes).unwrap(),
            &sum,
        )
        .unwrap();
    }
    let mean = sum.scaled(1.0 / n as f64);
    for l in 0..2 {
        assert!(rel(mean.block(l), want.block(l)) < 0.015, "layer {l}");
    }
}
