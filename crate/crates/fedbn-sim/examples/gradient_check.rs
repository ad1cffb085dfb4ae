//! Central finite differences against the analytic gradients of both models.
//!
//! Run with: cargo run --release --example gradient_check

use fedbn_sim::model::{
    init_theory, mlp_backward, mlp_loss, new_classifier, theory_grads, theory_loss, GammaMode,
    Layer, LayerGrads, LossKind, LossNorm, TheorySample,
};
use fedbn_sim::numerics::{DenseMatrix, Rng};

const H: f64 = 1e-5;

fn rel_gap(analytic: f64, fd: f64) -> f64 {
    let scale = analytic.abs().max(fd.abs());
    if scale < 1e-7 {
        (analytic - fd).abs() * 1e-3
    } else {
        (analytic - fd).abs() / scale
    }
}

fn theory_worst(rng: &mut Rng) -> f64 {
    let (m, d, n) = (4, 3, 2);
    let params = init_theory(m, d, n, 1.0, rng);
    let s_list: Vec<DenseMatrix> = (0..n).map(|_| DenseMatrix::identity(d)).collect();
    let samples: Vec<TheorySample> = (0..4)
        .map(|q| TheorySample {
            x: (0..d).map(|_| rng.standard_normal()).collect(),
            y: rng.standard_normal(),
            client: q % n,
        })
        .collect();
    let grads = theory_grads(&params, &samples, &s_list, LossNorm::Mean, GammaMode::PerClient)
        .expect("gradients");
    let mut worst: f64 = 0.0;
    for k in 0..m {
        for c in 0..d {
            let mut plus = params.clone();
            plus.v.set(k, c, plus.v.get(k, c) + H);
            let mut minus = params.clone();
            minus.v.set(k, c, minus.v.get(k, c) - H);
            let fd = (theory_loss(&plus, &samples, &s_list, LossNorm::Mean).unwrap()
                - theory_loss(&minus, &samples, &s_list, LossNorm::Mean).unwrap())
                / (2.0 * H);
            worst = worst.max(rel_gap(grads.d_v.get(k, c), fd));
        }
    }
    worst
}

fn mlp_worst(rng: &mut Rng) -> f64 {
    let mut params = new_classifier(3, 5, 2, 1.0, rng);
    // randomize the output layer so upstream gradients reach every tensor
    if let Layer::Dense { w, b } = &mut params.layers[2] {
        for v in &mut w.entries {
            *v = 0.3 * rng.standard_normal();
        }
        for v in b.iter_mut() {
            *v = 0.1 * rng.standard_normal();
        }
    }
    let x = DenseMatrix::from_fn(4, 3, |_, _| rng.standard_normal());
    let labels: Vec<f64> = (0..4).map(|_| rng.below(2) as f64).collect();
    let back = mlp_backward(&params, &x, &labels, LossKind::CrossEntropy).expect("backward");
    let mut worst: f64 = 0.0;
    for (li, layer) in params.layers.iter().enumerate() {
        let n_params = match layer {
            Layer::Dense { w, b } => w.entries.len() + b.len(),
            Layer::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
        };
        for idx in 0..n_params {
            let mut plus = params.clone();
            let mut minus = params.clone();
            nudge(&mut plus, li, idx, H);
            nudge(&mut minus, li, idx, -H);
            let fd = (mlp_loss(&plus, &x, &labels, LossKind::CrossEntropy).unwrap()
                - mlp_loss(&minus, &x, &labels, LossKind::CrossEntropy).unwrap())
                / (2.0 * H);
            worst = worst.max(rel_gap(read(&back.grads.layers[li], idx), fd));
        }
    }
    worst
}

fn nudge(params: &mut fedbn_sim::model::MlpParams, layer: usize, idx: usize, h: f64) {
    match &mut params.layers[layer] {
        Layer::Dense { w, b } => {
            if idx < w.entries.len() {
                w.entries[idx] += h;
            } else {
                b[idx - w.entries.len()] += h;
            }
        }
        Layer::BatchNorm { gamma, beta, .. } => {
            if idx < gamma.len() {
                gamma[idx] += h;
            } else {
                beta[idx - gamma.len()] += h;
            }
        }
    }
}

fn read(grads: &LayerGrads, idx: usize) -> f64 {
    match grads {
        LayerGrads::Dense { d_w, d_b } => {
            if idx < d_w.entries.len() {
                d_w.entries[idx]
            } else {
                d_b[idx - d_w.entries.len()]
            }
        }
        LayerGrads::BatchNorm { d_gamma, d_beta } => {
            if idx < d_gamma.len() {
                d_gamma[idx]
            } else {
                d_beta[idx - d_gamma.len()]
            }
        }
    }
}

fn main() {
    let mut rng = Rng::new(2024);
    let mut worst_theory: f64 = 0.0;
    let mut worst_mlp: f64 = 0.0;
    for _ in 0..20 {
        worst_theory = worst_theory.max(theory_worst(&mut rng));
        worst_mlp = worst_mlp.max(mlp_worst(&mut rng));
    }
    println!("worst relative gap over 20 configurations each (central differences, h = {H:e}):");
    println!("  normalized two-layer network: {worst_theory:.3e}");
    println!("  dense/batch-norm classifier:  {worst_mlp:.3e}");
    assert!(worst_theory < 1e-4 && worst_mlp < 1e-4);
    println!("both inside the 1e-4 relative tolerance");
}
