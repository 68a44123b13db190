//! Minimal reverse-mode autodiff, layers, optimisers and distribution math.

pub mod dist;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use dist::{
    argmax, categorical_entropy, categorical_sample, kl_diag_gaussian, reparameterize,
    CategoricalDist, LatentGaussian,
};
pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use layers::{gru_cell, mlp_forward, Activation, Embedding, GruCell, Linear, Mlp};
pub use optim::{adam_step, clip_grad_norm, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tape::{Mat, Tape, Var};
pub use tensor::Tensor;
