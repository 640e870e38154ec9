//! Learned gridification of point clouds.
//!
//! A point cloud is mapped onto a compact regular grid by a message-passing
//! layer over a bilateral k-nearest-neighbor graph, processed there by
//! lattice convolutions whose kernels are rendered once per forward pass, and
//! optionally mapped back onto the original points.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, timing and the
//! command-line tool live in the companion `gridify` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod cloud;
pub mod connectivity;
pub mod data;
mod error;
pub mod gridify;
pub mod gridnet;
pub mod nn;
mod tensor;
pub mod train;

pub use cloud::{make_grid_coords, normalize_cloud, CloudMeta, Grid, GridSpec, PointCloud};
pub use connectivity::{bilateral_knn, invert_edges, knn, knn_exhaustive, Direction, EdgeSet};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Seedable generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;
