pub mod arith;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod resize;
pub mod shape;

pub use arith::{broadcast_zip, sum_to_shape};
pub use conv::{conv_backward, conv_forward, conv_out_size, ConvOpts};
pub use norm::{normalize, normalize_fixed, NormGroups, NormStats};
pub use resize::{resize_bilinear, resize_bilinear_adjoint};
pub use shape::{bmm_forward, softmax};
