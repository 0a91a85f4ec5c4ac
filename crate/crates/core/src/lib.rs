pub mod augmentation;
pub mod classification;
pub mod dataio;
pub mod autodiff;
pub mod error;
pub mod image;
pub mod pipeline;
pub mod seed;
pub mod segmentation;
pub mod tensor;
pub mod xai;

pub use error::{Error, Result};
pub use image::{BinaryMask, BoundingBox, Image};
pub use tensor::{Real, Tensor};
