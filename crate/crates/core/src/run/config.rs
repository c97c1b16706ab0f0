//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::{DecoderConfig, MaskMode};
use crate::error::{Error, Result};
use crate::matching::{GSquash, LossConfig};
use crate::model::ModelConfig;
use crate::numcore::AdamWConfig;
use crate::scene::{EncoderConfig, PixelDecoderConfig, SceneConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_stuff_classes: usize,
    pub min_stuff: usize,
    pub max_stuff: usize,
    pub min_things: usize,
    pub max_things: usize,
    pub min_cells: usize,
    pub max_cells: usize,
    pub plural_prob: f64,
    pub noise_std: f64,
    pub phrase_dim: usize,
    pub max_phrases: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub num_tokens: usize,
    pub num_layers: usize,
    pub pixel_rounds: usize,
    pub bare_inner_product: bool,
    pub all_visible: bool,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub iterations: usize,
    pub seed: u64,
    pub pocl_weight: f64,
    pub use_dice: bool,
    pub g_squash: GSquash,
    pub freeze_backbone: bool,
    /// Step from which the backbone is frozen when `freeze_backbone` is set.
    pub freeze_after: usize,
    pub eval_threads: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SceneConfig::default();
        RunConfig {
            height: s.height,
            width: s.width,
            num_classes: s.num_classes,
            num_stuff_classes: s.num_stuff_classes,
            min_stuff: s.min_stuff,
            max_stuff: s.max_stuff,
            min_things: s.min_things,
            max_things: s.max_things,
            min_cells: s.min_cells,
            max_cells: s.max_cells,
            plural_prob: s.plural_prob,
            noise_std: s.noise_std,
            phrase_dim: s.phrase_dim,
            max_phrases: s.max_phrases,
            hidden_dim: 32,
            heads: 4,
            num_tokens: 8,
            num_layers: 3,
            pixel_rounds: 2,
            bare_inner_product: false,
            all_visible: false,
            learning_rate: 2e-3,
            min_learning_rate: 1e-4,
            warmup_steps: 50,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            iterations: 2000,
            seed: 0,
            pocl_weight: 1.0,
            use_dice: false,
            g_squash: GSquash::Sigmoid,
            freeze_backbone: false,
            freeze_after: 0,
            eval_threads: 1,
            out_dir: "runs/default".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Every key in serialization order.
    pub const KEYS: [&'static str; 35] = [
        "height",
        "width",
        "num_classes",
        "num_stuff_classes",
        "min_stuff",
        "max_stuff",
        "min_things",
        "max_things",
        "min_cells",
        "max_cells",
        "plural_prob",
        "noise_std",
        "phrase_dim",
        "max_phrases",
        "hidden_dim",
        "heads",
        "num_tokens",
        "num_layers",
        "pixel_rounds",
        "bare_inner_product",
        "all_visible",
        "learning_rate",
        "min_learning_rate",
        "warmup_steps",
        "weight_decay",
        "grad_clip",
        "iterations",
        "seed",
        "pocl_weight",
        "use_dice",
        "g_squash",
        "freeze_backbone",
        "freeze_after",
        "eval_threads",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "height" => self.height = parse_num(key, v)?,
            "width" => self.width = parse_num(key, v)?,
            "num_classes" => self.num_classes = parse_num(key, v)?,
            "num_stuff_classes" => self.num_stuff_classes = parse_num(key, v)?,
            "min_stuff" => self.min_stuff = parse_num(key, v)?,
            "max_stuff" => self.max_stuff = parse_num(key, v)?,
            "min_things" => self.min_things = parse_num(key, v)?,
            "max_things" => self.max_things = parse_num(key, v)?,
            "min_cells" => self.min_cells = parse_num(key, v)?,
            "max_cells" => self.max_cells = parse_num(key, v)?,
            "plural_prob" => self.plural_prob = parse_num(key, v)?,
            "noise_std" => self.noise_std = parse_num(key, v)?,
            "phrase_dim" => self.phrase_dim = parse_num(key, v)?,
            "max_phrases" => self.max_phrases = parse_num(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "num_tokens" => self.num_tokens = parse_num(key, v)?,
            "num_layers" => self.num_layers = parse_num(key, v)?,
            "pixel_rounds" => self.pixel_rounds = parse_num(key, v)?,
            "bare_inner_product" => self.bare_inner_product = parse_bool(key, v)?,
            "all_visible" => self.all_visible = parse_bool(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "min_learning_rate" => self.min_learning_rate = parse_num(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "grad_clip" => self.grad_clip = parse_num(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "pocl_weight" => self.pocl_weight = parse_num(key, v)?,
            "use_dice" => self.use_dice = parse_bool(key, v)?,
            "g_squash" => self.g_squash = GSquash::parse(v)?,
            "freeze_backbone" => self.freeze_backbone = parse_bool(key, v)?,
            "freeze_after" => self.freeze_after = parse_num(key, v)?,
            "eval_threads" => self.eval_threads = parse_num(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            _ => return Err(Error::UnknownKeys(vec![key.to_string()])),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "num_stuff_classes" => self.num_stuff_classes.to_string(),
            "min_stuff" => self.min_stuff.to_string(),
            "max_stuff" => self.max_stuff.to_string(),
            "min_things" => self.min_things.to_string(),
            "max_things" => self.max_things.to_string(),
            "min_cells" => self.min_cells.to_string(),
            "max_cells" => self.max_cells.to_string(),
            "plural_prob" => format!("{:?}", self.plural_prob),
            "noise_std" => format!("{:?}", self.noise_std),
            "phrase_dim" => self.phrase_dim.to_string(),
            "max_phrases" => self.max_phrases.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "heads" => self.heads.to_string(),
            "num_tokens" => self.num_tokens.to_string(),
            "num_layers" => self.num_layers.to_string(),
            "pixel_rounds" => self.pixel_rounds.to_string(),
            "bare_inner_product" => self.bare_inner_product.to_string(),
            "all_visible" => self.all_visible.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "min_learning_rate" => format!("{:?}", self.min_learning_rate),
            "warmup_steps" => self.warmup_steps.to_string(),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "iterations" => self.iterations.to_string(),
            "seed" => self.seed.to_string(),
            "pocl_weight" => format!("{:?}", self.pocl_weight),
            "use_dice" => self.use_dice.to_string(),
            "g_squash" => self.g_squash.name().to_string(),
            "freeze_backbone" => self.freeze_backbone.to_string(),
            "freeze_after" => self.freeze_after.to_string(),
            "eval_threads" => self.eval_threads.to_string(),
            "out_dir" => self.out_dir.clone(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        let mut unknown = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !Self::KEYS.contains(&key) {
                unknown.push(key.to_string());
                continue;
            }
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
            seen.push(key);
            cfg.set(key, value)?;
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in fixed order; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key} = {}", self.get(key)).expect("string write");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    /// Honors a `SEED` value, as taken from the environment.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = parse_num("SEED", v.trim())?;
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            num_stuff_classes: self.num_stuff_classes,
            min_stuff: self.min_stuff,
            max_stuff: self.max_stuff,
            min_things: self.min_things,
            max_things: self.max_things,
            min_cells: self.min_cells,
            max_cells: self.max_cells,
            plural_prob: self.plural_prob,
            noise_std: self.noise_std,
            phrase_dim: self.phrase_dim,
            max_phrases: self.max_phrases,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            scene: self.scene(),
            encoder: EncoderConfig::default(),
            pixel_decoder: PixelDecoderConfig {
                hidden: self.hidden_dim,
                rounds: self.pixel_rounds,
                init_std: 0.02,
            },
            decoder: DecoderConfig {
                hidden: self.hidden_dim,
                heads: self.heads,
                num_layers: self.num_layers,
                num_tokens: self.num_tokens,
                max_phrases: self.max_phrases,
                num_classes: self.num_classes,
                mask_mode: if self.all_visible { MaskMode::AllVisible } else { MaskMode::Masked },
                bare_inner_product: self.bare_inner_product,
                pos_std: 0.02,
            },
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            pocl_weight: self.pocl_weight,
            use_dice: self.use_dice,
            g_squash: self.g_squash,
            temperature: None,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Linear warm-up, then cosine decay to `min_learning_rate`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.iterations.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.min_learning_rate + (self.learning_rate - self.min_learning_rate) * cos
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let rates_ok =
            self.learning_rate.is_finite() && self.learning_rate > 0.0 && (0.0..=self.learning_rate).contains(&self.min_learning_rate);
        if !rates_ok {
            return Err(Error::Config(
                "need 0 <= min_learning_rate <= learning_rate, learning_rate > 0".into(),
            ));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.pocl_weight < 0.0 {
            return Err(Error::Config("weight_decay, grad_clip and pocl_weight must be non-negative".into()));
        }
        if self.iterations == 0 || self.iterations >= 1 << 31 {
            return Err(Error::Config(format!("iterations must lie in 1..2^31, got {}", self.iterations)));
        }
        if self.eval_threads == 0 {
            return Err(Error::Config("eval_threads must be at least 1".into()));
        }
        Ok(())
    }
}
