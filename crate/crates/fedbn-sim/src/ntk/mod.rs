//! Kernel Gram matrices of the gradient-descent dynamics and the numerical
//! checks comparing shared versus local normalization spectra.

pub mod checks;
pub mod gram;

pub use checks::{
    gd_residual_trace, lambda_matrix, linear_decay_fit, min_eig_compare, one_step_ntk_check,
    DecayFit, OneStepReport, SpectralComparison,
};
pub use gram::{gram_aux_mc, gram_finite, pool_samples, GramMatrix, GramVariant, SampleRef};
