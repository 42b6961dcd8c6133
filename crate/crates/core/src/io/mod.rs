//! File formats, dataset manifests, resizing and the synthetic generator.

mod image;
mod manifest;
mod resize;
mod synth;
mod weights;

pub use image::{
    decode_image, decode_pgm, encode_mask_pgm, encode_mask_png, encode_pgm, encode_png, read_image, read_mask,
    write_image, write_mask, write_overlay_ppm, GrayImage,
};
pub use manifest::{load_manifest, parse_manifest, write_manifest, Class, DatasetRecord, Split};
pub use resize::{resize, resize_mask};
pub use synth::{synth_dataset, synth_generate, synth_sample, SynthSample};
pub use weights::{decode_weights, encode_weights, load_weights, load_weights_into, peek_weights, save_weights, WeightsHeader, WEIGHTS_MAGIC, WEIGHTS_VERSION};
