//! Randomly initialized networks: the two-layer MLP used in the toy
//! experiments and a small decoder-only transformer with its initialization
//! variants.

mod mlp;
mod net;
mod transformer;

pub use mlp::{init_mlp, init_mlp_with, mlp_forward, InitScheme, MlpParams, HIDDEN_MULTIPLIER};
pub use net::{
    checkpoint_stats, init_step0, rerandomize, tensor_stats, CheckpointStats, NetParams, NetSpec, TensorStats, Variant,
    EMBED, UNEMBED,
};
pub use transformer::{
    next_token_cross_entropy, ForwardOptions, ForwardOutput, IdentityReconstructor, Reconstructor, ResidualCapture,
    Substitution, SubstitutionMode, Transformer, ZeroReconstructor,
};
