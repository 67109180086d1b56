//! The one/two-layer attention + MLP transformer on `a b =` inputs:
//! parameters, batched forward pass with interventions, and a hand-written
//! backward pass.

mod backward;
mod forward;
mod params;

pub use backward::{apply_l1, grads, GradOutput, Regularizer};
pub use forward::{
    batch_loss, batch_loss_with_hook, forward, logits, logits_with_hook, score_logits,
    sweep_all_inputs, ActivationCache, Example, FullSweep, Hook, HookCtx, LayerActivations,
    NoHook, CHUNK,
};
pub use params::{
    init_params, is_prime, l2_sq, Block, Gradients, ModelConfig, ModelParams, TensorView,
    TensorViewMut, N_CTX,
};
