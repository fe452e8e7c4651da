//! Dense-matrix oracle: the spectral formulas must agree with the full
//! matrix computation after rotating into an arbitrary orthonormal basis.

use nalgebra::{DMatrix, DVector};
use spdelab::{
    compute_map, exact_posterior, synthesize_data, DiagonalOperator, NoiseMode, NormalStream, SpectralVector,
};
use spdelab::rng::Domain;

fn random_orthogonal(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut s = NormalStream::new(seed, Domain::Sample, 99, dim * dim);
    let g = DMatrix::from_fn(dim, dim, |_, _| s.next_normal());
    g.qr().q()
}

fn check(dim: usize, n: u64, seed: u64) {
    let q = DiagonalOperator::power(1.0, 1.5, dim).unwrap();
    let a = DiagonalOperator::explicit((1..=dim).map(|m| 0.3 + (m as f64).powf(1.2)).collect()).unwrap();
    let ts = SpectralVector::new((1..=dim).map(|m| (-1f64).powi(m as i32) / m as f64).collect()).unwrap();
    let model = synthesize_data(&q, &a, &ts, n, seed, NoiseMode::Sampled).unwrap();
    let post = exact_posterior(&model).unwrap();

    let u = random_orthogonal(dim, seed);
    let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
    let q_dense = &u * diag(q.eigs()) * u.transpose();
    let a_dense = &u * diag(a.eigs()) * u.transpose();
    let d_dense = &u * DVector::from_column_slice(model.data_coeffs().coeffs());

    let precision = q_dense.clone().try_inverse().unwrap() + a_dense * n as f64;
    let cov_dense = precision.try_inverse().unwrap();
    let mean_dense = &cov_dense * d_dense * n as f64;

    let mean_rot = &u * DVector::from_column_slice(post.mean().coeffs());
    let cov_rot = &u * diag(post.cov().eigs()) * u.transpose();
    let map_rot = &u * DVector::from_column_slice(compute_map(&model).unwrap().coeffs());

    let scale = cov_dense.amax();
    assert!((&cov_rot - &cov_dense).amax() <= 1e-12 * scale.max(1.0), "cov dim {dim}");
    let mscale = mean_dense.amax().max(1.0);
    assert!((&mean_rot - &mean_dense).amax() <= 1e-12 * mscale, "mean dim {dim}");
    assert!((&map_rot - &mean_dense).amax() <= 1e-12 * mscale, "map dim {dim}");
}

#[test]
fn posterior_matches_dense_computation_in_rotated_basis() {
    for (dim, n, seed) in [(4, 10, 1), (16, 100, 2), (32, 1000, 3)] {
        check(dim, n, seed);
    }
}
