//! Example-based video stylization: a feed-forward image operator trained on
//! a few stylized keyframes, kept faithful to each target frame's structure
//! by distilling a frozen conditioned denoiser.

pub mod autodiff;
pub mod backends;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distillation;
pub mod error;
pub mod image;
pub mod operator;
pub mod perceptual;
pub mod rng;
pub mod scalar;
pub mod stream;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImagePlane;
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type ImagePlaneF32 = ImagePlane<f32>;
pub type ImagePlaneF64 = ImagePlane<f64>;
pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type FrameDatasetF32 = dataset::FrameDataset<f32>;
pub type FrameDatasetF64 = dataset::FrameDataset<f64>;
pub type OperatorParamsF32 = operator::OperatorParams<f32>;
pub type OperatorParamsF64 = operator::OperatorParams<f64>;
pub type TrainerF32 = trainer::Trainer<f32>;
pub type TrainerF64 = trainer::Trainer<f64>;
pub type BackendRegistryF32 = backends::BackendRegistry<f32>;
pub type BackendRegistryF64 = backends::BackendRegistry<f64>;
