//! Noise2Noise denoising: paired-slice dataset construction, a small
//! convolutional encoder-decoder with explicit parameters and analytic
//! gradients, L1/Adam training on noisy targets, and slicewise volume
//! inference.

mod dataset;
mod model_io;
mod net;
mod train;

pub use dataset::{build_pairs, pair_count, PairedSliceDataset};
pub use model_io::{load_model, save_model};
pub use net::{DenoiserNet, NetDescriptor};
pub use train::{denoise_volume, train, TrainConfig};
