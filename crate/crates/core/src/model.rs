//! The full grounding model: image and phrase encoders, pixel decoder, and
//! the phrase/object token decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{Decoder, DecoderConfig, DecoderOutput};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::matching::{total_loss, GroundTruth, LossConfig, LossOutput};
use crate::numcore::{Bound, ParamStore, Tape};
use crate::scene::{
    image_var, EncoderConfig, PerPixelFuse, PhraseEncoder, PhraseSpec, PixelDecoder, PixelDecoderConfig, PixelEncoder, SceneConfig,
    SyntheticScene,
};

/// Parameter name prefixes of the modules held fixed by `freeze_backbone`.
pub const BACKBONE_PREFIXES: [&str; 4] = ["encoder.", "pixel_decoder.", "fuse.", "phrase_encoder."];

pub fn is_backbone(name: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub scene: SceneConfig,
    pub encoder: EncoderConfig,
    pub pixel_decoder: PixelDecoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let decoder = DecoderConfig {
            num_layers: 3,
            ..DecoderConfig::default()
        };
        ModelConfig {
            scene: SceneConfig::default(),
            encoder: EncoderConfig::default(),
            pixel_decoder: PixelDecoderConfig {
                hidden: decoder.hidden,
                rounds: 2,
                init_std: 0.02,
            },
            decoder,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.decoder.validate()?;
        let d = &self.decoder;
        if self.pixel_decoder.hidden != d.hidden {
            return Err(Error::Invalid("pixel decoder and token decoder widths differ".into()));
        }
        if !d.hidden.is_multiple_of(4) {
            return Err(Error::Invalid(format!("hidden width {} must be divisible by 4", d.hidden)));
        }
        if d.num_classes != self.scene.num_classes {
            return Err(Error::Invalid("decoder and scene class counts differ".into()));
        }
        if d.max_phrases != self.scene.max_phrases {
            return Err(Error::Invalid("decoder and scene phrase limits differ".into()));
        }
        if d.num_tokens < self.scene.max_segments() {
            return Err(Error::Invalid(format!(
                "{} object tokens cannot cover up to {} segments",
                d.num_tokens,
                self.scene.max_segments()
            )));
        }
        Ok(())
    }

    /// `(h, w)` of the refined levels at strides 8, 16, 32.
    pub fn level_extents(&self) -> [(usize, usize); 3] {
        let (h, w) = (self.scene.height, self.scene.width);
        [(h / 8, w / 8), (h / 16, w / 16), (h / 32, w / 32)]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: PixelEncoder,
    pub pixel_decoder: PixelDecoder,
    pub fuse: PerPixelFuse,
    pub phrase_encoder: PhraseEncoder,
    /// `C_r -> C_h`.
    pub phrase_proj: Linear,
    pub decoder: Decoder,
}

impl Model {
    /// Builds the model with parameters drawn from `init_seed`.
    pub fn new(cfg: &ModelConfig, init_seed: u64) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut store = ParamStore::new();
        let widths = cfg.encoder.widths;
        let encoder = PixelEncoder::new(&mut store, &cfg.encoder, &mut rng);
        let pixel_decoder = PixelDecoder::new(&mut store, &cfg.pixel_decoder, [widths[2], widths[3], widths[4]], &mut rng);
        let fuse = PerPixelFuse::new(&mut store, widths[1], cfg.decoder.hidden, &mut rng);
        let phrase_encoder = PhraseEncoder::new(&mut store, cfg.scene.phrase_dim, cfg.scene.max_phrases, &mut rng);
        let phrase_proj = Linear::new(&mut store, "phrase_proj", cfg.scene.phrase_dim, cfg.decoder.hidden, 1.0, &mut rng);
        let decoder = Decoder::new(&mut store, &cfg.decoder, cfg.level_extents(), &mut rng)?;
        let model = Model {
            cfg: cfg.clone(),
            encoder,
            pixel_decoder,
            fuse,
            phrase_encoder,
            phrase_proj,
            decoder,
        };
        Ok((model, store))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, scene: &SyntheticScene, phrases: &[PhraseSpec]) -> Result<DecoderOutput> {
        let image = image_var(tape, scene);
        let pyramid = self.encoder.forward(tape, p, image)?;
        let [f2, f3, f4, f5] = pyramid.raw;
        let refined = self.pixel_decoder.forward(tape, p, [f3, f4, f5])?;
        let per_pixel = self.fuse.forward(tape, p, f2, refined[0])?;
        let r = self.phrase_encoder.forward(tape, p, phrases)?;
        let r = self.phrase_proj.forward(tape, p, r)?;
        self.decoder.forward(tape, p, r, refined, per_pixel)
    }

    /// Forward pass plus the training objective for one scene.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        scene: &SyntheticScene,
        phrases: &[PhraseSpec],
        cfg: &LossConfig,
    ) -> Result<(DecoderOutput, LossOutput)> {
        let out = self.forward(tape, p, scene, phrases)?;
        let gt = GroundTruth::new(scene, phrases)?;
        let loss = total_loss(tape, &out, &gt, cfg)?;
        Ok((out, loss))
    }
}
