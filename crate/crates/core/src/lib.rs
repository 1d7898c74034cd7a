//! Mask-piloted training for a masked-attention transformer segmentation
//! decoder, with layer-wise consistency diagnostics.

pub mod gradcheck;
pub mod kernels;
pub mod maskops;
pub mod tensor;
pub mod data;
pub mod decoder;
pub mod seeds;
pub mod mp;
pub mod matching;
pub mod metrics;
pub mod config;
pub mod train;
pub mod eval;
pub mod checkpoint;
pub mod report;
pub mod gradsuite;
pub mod study;
pub mod cli;
