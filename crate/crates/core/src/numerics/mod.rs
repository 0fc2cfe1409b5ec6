//! Dense tensors, seeded random streams and the handful of differentiable
//! primitives the quantization head and loss are built from.

mod io;
mod ops;
mod rng;
mod tensor;

pub use io::{read_tensor, read_tensor_from, write_tensor, write_tensor_to, DType, SPQT_MAGIC};
pub use ops::{cosine_similarity, dot, log_sum_exp, norm, softmax, softmax_in_place, squared_euclidean};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
