//! Synthetic scenes with phrase annotations, their on-disk layout, and the
//! stand-in encoders feeding the decoder.

pub mod encoders;
mod io;
mod synth;

pub use encoders::{
    image_var, sinusoid_2d, EncoderConfig, FeaturePyramid, Level, PerPixelFuse, PhraseEncoder, PixelDecoder, PixelDecoderConfig,
    PixelEncoder,
};
pub use io::{phrases_txt, read_pgm, read_scene, write_pgm, write_scene, PhraseRecord, StoredScene};
pub use synth::{
    class_color, descriptor, generate_scene, phrase_mask, PhraseSpec, SceneConfig, Segment, SyntheticScene, CELL, PLURAL_ATTRIBUTE,
    VARIANTS,
};
