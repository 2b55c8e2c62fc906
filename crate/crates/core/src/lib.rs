//! GAN inversion with a latent-token windowed-attention encoder and a
//! softmax-free multi-scale refiner over generator feature maps.

pub mod autodiff;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod image_io;
pub mod kernels;
pub mod latent_spaces;
pub mod models;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod smart;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
