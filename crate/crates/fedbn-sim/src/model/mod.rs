//! Differentiable models: the analytically differentiated normalized network,
//! the practical dense/batch-norm MLP, and the scalar cosine toy.

pub mod mlp;
pub mod theory;
pub mod toy;

pub use mlp::{
    accuracy, add_proximal_term, apply_running_stat_update, mlp_backward, mlp_forward,
    mlp_forward_eval, mlp_loss, new_classifier, recompute_running_stats, scale_grads, sgd_step,
    Layer, LayerGrads, LossKind, MlpBackward, MlpGrads, MlpParams, Mode, BN_EPSILON, BN_MOMENTUM,
};
pub use theory::{
    assemble_theory_params, init_theory, projected_feature, theory_forward, theory_forward_all,
    theory_grads, theory_loss, GammaMode, LossNorm, TheoryClientParams, TheoryGrads, TheoryParams,
    TheorySample,
};
pub use toy::{toy_mse_surface, ToyModel};
