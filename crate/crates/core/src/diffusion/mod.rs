//! Noise schedule, toy data, denoiser training, and DDIM sampling.

pub mod dataset;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use dataset::{make_toy_dataset, ToyDataset};
pub use model::{
    denoise, denoise_with_activations, embed_inputs, forward_nodes, layer_nodes, time_embedding,
    Architecture, DenoiserParams, LinearLayer, QuantContext,
};
pub use sampler::{ddim_sample, ddim_sample_until, RecordedLatents};
pub use schedule::{default_schedule, forward_noise, make_schedule, NoiseSchedule};
pub use train::{pretrain, PretrainConfig};
