//! Dynamic deep graph convolution over unordered sets of posts.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod dgcn;
pub mod error;
pub mod exec;
pub mod harness;
pub mod l2c;
pub mod model;

pub use error::{Error, Result};
