//! Dense tensor math, a small reverse-mode autodiff tape, feed-forward
//! networks, Adam, and image/embedding metrics.

mod adam;
mod graph;
pub mod gradcheck;
mod metrics;
mod mlp;
mod real;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::sigmoid;
pub use metrics::{cosine, mse, psnr, psnr_from_mse, ssim, ssim_with_grad, PSNR_CAP_DB, SSIM_WINDOW};
pub use mlp::{Activation, Linear, Mlp, MlpBinding, MlpSpec};
pub use real::{Precision, Real};
pub use rng::Rng;

/// Row-major 2-D array. Batches are rows, features are columns; images
/// are flattened row-major into a single row.
pub type Tensor<T> = ndarray::Array2<T>;
