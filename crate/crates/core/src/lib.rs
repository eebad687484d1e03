//! Sparse binary neural networks: weights in a two-value domain `{alpha, beta}`
//! stored as `{0, 1}` bits, trained under an entropy budget on the number of
//! ones, and executed with bit-packed popcount kernels that skip zero weights.

pub mod binquant;
pub mod dataio;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod model_io;
pub mod nn;
pub mod sparsity;
