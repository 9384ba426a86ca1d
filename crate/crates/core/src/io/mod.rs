//! Datasets on disk, checkpoints, image metrics and the synthetic scene
//! generator.

pub mod checkpoint;
pub mod dataset;
pub mod metrics;
pub mod synth;

pub use checkpoint::{
    checkpoint_precision, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, CHECKPOINT_VERSION,
};
pub use dataset::{
    dequantize, load_dataset, load_mask, load_rgb, load_rgba, quantize, save_dataset, save_png,
    BoxState, Dataset, Image, NodeObservation,
};
pub use metrics::{format_db, psnr, ssim};
pub use synth::{ground_truth_layers, synth_scene, SynthSpec};
