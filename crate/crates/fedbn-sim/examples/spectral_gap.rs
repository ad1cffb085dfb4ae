//! Estimates the auxiliary kernel matrices over two feature-shift clients and
//! compares their least eigenvalues: restricting the kernel to same-client
//! blocks (what local normalization induces) can only raise the least
//! eigenvalue, and with it the convergence rate.
//!
//! Run with: cargo run --release --example spectral_gap

use fedbn_sim::datagen::{make_gaussian_pair_client, make_offdiag_cov};
use fedbn_sim::ntk::{gram_aux_mc, min_eig_compare, pool_samples, GramVariant};
use fedbn_sim::numerics::{DenseMatrix, Rng};

fn main() {
    let (seed, d, per_client, alpha, k_draws) = (0u64, 10usize, 5usize, 1.0f64, 200_000usize);

    let mut datasets = Vec::new();
    for i in 0..2usize {
        let cov = if i == 0 {
            DenseMatrix::identity(d)
        } else {
            make_offdiag_cov(d, 0.08).expect("covariance")
        };
        let mut rng = Rng::for_stream(seed, 2000 + i as u64);
        let ds = make_gaussian_pair_client(i, &cov, 2 * per_client, &mut rng).expect("dataset");
        datasets.push(ds.centered());
    }
    let samples = pool_samples(&datasets);
    println!("{} pooled samples, {} Monte-Carlo draws, alpha = {alpha}", samples.len(), k_draws);

    let full = gram_aux_mc(&samples, alpha, k_draws, &mut Rng::for_stream(seed, 4000), GramVariant::GAvg)
        .expect("full kernel");
    let blocked = gram_aux_mc(&samples, alpha, k_draws, &mut Rng::for_stream(seed, 4000), GramVariant::GBn)
        .expect("blocked kernel");
    let report = min_eig_compare(&full, &blocked).expect("comparison");

    println!("lambda_min(full kernel)    = {:.6}", report.mu0);
    println!("lambda_min(blocked kernel) = {:.6}", report.mu0_star);
    println!("per-client block minima    = {:?}", report.per_block_minima);
    println!("block identity gap         = {:.3e}", report.block_identity_gap);
    println!(
        "ordering_holds = {} (blocked >= full, so local normalization converges at least as fast)",
        report.ordering_holds
    );
}
