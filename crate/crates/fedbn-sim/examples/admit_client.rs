//! Trains a two-client federation with local batch norm, then admits a third
//! client: it receives the shared dense layers, the average of the existing
//! BN scales and shifts, and computes running statistics on its own data.
//!
//! Run with: cargo run --release --example admit_client

use fedbn_sim::cli::{build_synthetic_clients, SyntheticConfig};
use fedbn_sim::datagen::{make_gaussian_pair_client, make_offdiag_cov};
use fedbn_sim::federation::{
    admit_new_client, aggregate, run_federation, FederationConfig, ModelParams, Strategy,
};
use fedbn_sim::model::{mlp_forward_eval, LossKind};
use fedbn_sim::numerics::Rng;

fn main() {
    let mut cfg = SyntheticConfig::default();
    cfg.total_epochs = 100;
    cfg.samples_per_client = 64;
    cfg.test_samples_per_client = 64;
    let (mut clients, tests) = build_synthetic_clients(&cfg).expect("clients");

    let fed_cfg = FederationConfig {
        n_clients: cfg.n_clients,
        local_epochs: cfg.local_epochs,
        total_epochs: cfg.total_epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        strategy: Strategy::FedBn,
        seed: cfg.seed,
        loss: cfg.loss,
        model_kind: cfg.model_kind,
    };
    run_federation(&fed_cfg, &mut clients, &tests).expect("training");
    println!("trained {} clients for {} epochs with local batch norm", cfg.n_clients, cfg.total_epochs);

    // a third client with yet another covariance joins after training
    let cov = make_offdiag_cov(cfg.d, -0.05).expect("covariance");
    let new_data = make_gaussian_pair_client(2, &cov, 64, &mut Rng::for_stream(cfg.seed, 5000))
        .expect("new client data");
    let global = aggregate(&clients).expect("aggregate");
    let admitted = admit_new_client(&global, &clients, new_data, 2, Rng::for_client(cfg.seed, 2))
        .expect("admission");

    let ModelParams::Mlp(params) = &admitted.params else {
        unreachable!()
    };
    let logits = mlp_forward_eval(params, &admitted.dataset.features).expect("eval");
    let acc = fedbn_sim::model::accuracy(&logits, &admitted.dataset.labels);
    assert_eq!(fed_cfg.loss, LossKind::CrossEntropy);
    println!("admitted client {} with {} samples", admitted.client_id, admitted.dataset.num_samples());
    println!("eval accuracy on its own data without any local training: {acc:.4}");
}
