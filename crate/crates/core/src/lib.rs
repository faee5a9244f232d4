//! PCA-bottlenecked Probabilistic U-Net for ambiguous segmentation.
//!
//! The prior and posterior networks emit diagonal Gaussians in a native
//! D-dimensional latent space. A frozen PCA projection maps both onto the
//! top-k principal subspace, where the KL term is computed and latents are
//! sampled; compact samples are mapped back to R^D before a 1×1 adapter
//! fuses them with the U-Net decoder features.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod pca;
pub mod ptnsr;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
