//! Dense `f64` tensors, a small reverse-mode tape, partial experts, a
//! pre-layer-norm transformer block and a finite-difference checker.

pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use init::{lecun_normal_init, seeded, SeededRng};
pub use layers::{
    apply_expert, transformer_block_forward, transformer_layer_multiplies, ConstantExpertParams,
    ExpertParams, TransformerBlock, TransformerBlockParams, TwoLayerExpertParams,
};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
