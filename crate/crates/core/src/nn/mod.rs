//! Small reverse-mode tensor engine: layers with hand-written backward
//! passes, losses, Glorot initialization, momentum SGD, checkpoints and a
//! finite-difference gradient checker.

mod checkpoint;
mod gradcheck;
mod init;
pub(crate) mod layers;
mod ops;
mod scalar;
mod sgd;
mod tensor;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use init::{fans, mix, param_seed, xavier_init};
pub use layers::{Conv2d, Flatten, Layer, Linear, MaxPool2d, Parameterized, Relu, Sequential};
pub use ops::{
    concat, cross_entropy_index, log_softmax, smooth_l1, smooth_l1_grad, softmax, softmax_cross_entropy,
    split, squared_error,
};
pub use scalar::Scalar;
pub use sgd::{Sgd, SgdConfig};
pub use tensor::Tensor;

/// Hash of the discrete decisions made by the last forward pass.
pub fn signature_of<T: Scalar, M: Parameterized<T> + ?Sized>(model: &M) -> u64 {
    use std::hash::Hasher;
    let mut h = std::hash::DefaultHasher::new();
    model.kink_signature(&mut h);
    h.finish()
}
