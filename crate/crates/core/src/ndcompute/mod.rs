//! Minimal differentiable computation: parameters, a recording tape, the
//! layer vocabulary, losses, optimizers, finite-difference checks and
//! checkpoints.

mod checkpoint;
mod gradcheck;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{load_params, save_params, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    linear_forward, recurrent_step, Activation, Layer, LayerKind, LayerSpec, LstmCell, Mlp, RecurrentState, LEAKY_SLOPE,
};
pub use optim::{sgd_step, AdamHyper, Optimizer, OptimizerKind};
pub use tape::{bce_floor, bce_loss, ce_loss, sigmoid, sigmoid_scalar, softmax, Grads, Tape, Var, PROB_CLAMP};
pub use tensor::{ParamRef, ParamStore, ParamTensor};

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a [`Rng`] from a base seed and a stream label.
pub fn rng_for(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(mix_seed(seed, stream))
}

/// SplitMix64-style combination of two 64-bit values.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
