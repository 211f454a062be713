//! Variational noise-contrastive estimation for latent-variable models.
//!
//! The crate provides the objectives (NCE, VNCE and the f-divergence
//! diagnostics of the bound), the models and variational families used to
//! exercise them, noise distributions, a Gibbs sampler for truncated
//! Gaussians, estimation loops and the experiment drivers that produce CSV
//! reports.
//!
//! Work that is a sum over rows runs on rayon when the `parallel` feature is
//! on (the default). Reductions are chunked and merged in a fixed order, so
//! results are bit-identical with or without it and for any thread count.

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read closer to the matrix formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod dataset;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod models;
pub mod noise;
pub mod objectives;
pub mod par;
pub mod rng;
pub mod samplers;
pub mod special_math;
pub mod variational;

pub use dataset::{MaskedDataset, RowView};
pub use error::{Error, Result};
