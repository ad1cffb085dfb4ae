//! Trains the two-client feature-shift classification task under all four
//! strategies and prints the final metrics side by side.
//!
//! Run with: cargo run --release --example synthetic_federation

use fedbn_sim::cli::{build_synthetic_clients, run_synthetic_strategy, SyntheticConfig};
use fedbn_sim::federation::Strategy;

fn main() {
    let cfg = SyntheticConfig::default();
    println!(
        "two clients, d={}, {} samples each, {} hidden neurons, lr={:e}, {} full-batch steps",
        cfg.d, cfg.samples_per_client, cfg.hidden, cfg.lr, cfg.total_epochs
    );
    let (clients, tests) = build_synthetic_clients(&cfg).expect("client construction");

    println!(
        "{:<10} {:>12} {:>11} {:>12} {:>11}",
        "strategy", "train_loss", "train_acc", "test_loss", "test_acc"
    );
    for strategy in [
        Strategy::FedAvg,
        Strategy::FedProx { mu: cfg.fedprox_mu },
        Strategy::FedBn,
        Strategy::SingleSet,
    ] {
        let (_, summary) =
            run_synthetic_strategy(&cfg, &clients, &tests, strategy).expect("federated run");
        println!(
            "{:<10} {:>12.6} {:>11.4} {:>12.6} {:>11.4}",
            summary.strategy,
            summary.final_train_loss,
            summary.final_train_acc,
            summary.final_test_loss,
            summary.final_test_acc
        );
    }
}
