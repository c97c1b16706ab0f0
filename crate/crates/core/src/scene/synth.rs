//! Procedural panoptic scenes with grounded phrases.
//!
//! Stuff segments are horizontal background bands; things are rectangles and
//! ellipses painted over them. Every shape is rasterized on a lattice of
//! 4×4-pixel cells, the resolution of the per-pixel embedding. Colors depend
//! on (class, variant) and phrases describe (class, variant) or (class,
//! plural), so every phrase is resolvable from the image alone.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::numcore::Tensor;

/// Pixel size of one lattice cell.
pub const CELL: usize = 4;

/// Color variants available per class.
pub const VARIANTS: usize = 3;

/// Attribute index used by plural phrases.
pub const PLURAL_ATTRIBUTE: usize = VARIANTS;

const COLOR_SEED: u64 = 0x0c01_0be5;
const DESCRIPTOR_SEED: u64 = 0xde5c_417e;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Classes `0..num_stuff_classes` are stuff, the rest are things.
    pub num_stuff_classes: usize,
    pub min_stuff: usize,
    pub max_stuff: usize,
    /// Range of thing entities; a plural group counts as one entity.
    pub min_things: usize,
    pub max_things: usize,
    /// Thing side length range, in lattice cells.
    pub min_cells: usize,
    pub max_cells: usize,
    pub plural_prob: f64,
    pub noise_std: f64,
    pub phrase_dim: usize,
    pub max_phrases: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            num_classes: 6,
            num_stuff_classes: 2,
            min_stuff: 1,
            max_stuff: 2,
            min_things: 1,
            max_things: 3,
            min_cells: 2,
            max_cells: 4,
            plural_prob: 0.3,
            noise_std: 0.03,
            phrase_dim: 48,
            max_phrases: 8,
        }
    }
}

impl SceneConfig {
    /// Largest number of segments a scene can contain.
    pub fn max_segments(&self) -> usize {
        let plural_extra = if self.plural_prob > 0.0 { 2 } else { 0 };
        self.max_stuff + self.max_things + plural_extra
    }

    pub fn num_thing_classes(&self) -> usize {
        self.num_classes - self.num_stuff_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Unsatisfiable(msg));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return bad(format!("extents {}x{} must be positive multiples of 32", self.height, self.width));
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.num_stuff_classes == 0 || self.num_stuff_classes >= self.num_classes {
            return bad("need at least one stuff and one thing class".into());
        }
        if self.min_stuff == 0 || self.min_stuff > self.max_stuff {
            return bad("stuff range must be non-empty and start at 1 or more".into());
        }
        if self.max_stuff > self.num_stuff_classes || self.max_stuff > self.height / CELL {
            return bad(format!("{} stuff bands cannot get distinct classes and rows", self.max_stuff));
        }
        if self.min_things > self.max_things {
            return bad("empty thing range".into());
        }
        if self.max_things > self.num_thing_classes() * VARIANTS {
            return bad("more singular things than distinguishable (class, variant) pairs".into());
        }
        if self.min_cells == 0 || self.min_cells > self.max_cells {
            return bad("empty thing size range".into());
        }
        let (gh, gw) = (self.height / CELL, self.width / CELL);
        if self.max_cells > gh.min(gw) {
            return bad("things larger than the image".into());
        }
        let worst_area = self.max_segments().saturating_sub(self.max_stuff) * self.min_cells * self.min_cells;
        if worst_area + self.max_stuff > gh * gw {
            return bad("more segment cells than the image holds".into());
        }
        if !(0.0..=1.0).contains(&self.plural_prob) {
            return bad(format!("plural probability {} outside [0,1]", self.plural_prob));
        }
        if self.max_stuff + self.max_things > self.max_phrases {
            return bad(format!(
                "up to {} phrases per scene exceed max_phrases {}",
                self.max_stuff + self.max_things,
                self.max_phrases
            ));
        }
        if self.phrase_dim == 0 {
            return bad("phrase_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: usize,
    pub class: usize,
    pub is_thing: bool,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `H×W×3` RGB in roughly `[0, 1]`.
    pub image: Tensor,
    pub segments: Vec<Segment>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn segment(&self, id: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseSpec {
    pub id: usize,
    pub segment_ids: Vec<usize>,
    pub is_plural: bool,
    pub class: usize,
    pub is_thing: bool,
    /// Color variant, or [`PLURAL_ATTRIBUTE`].
    pub attribute: usize,
    pub descriptor: Vec<f64>,
}

/// RGB color for a (class, variant) pair. The table is fixed across scenes.
pub fn class_color(class: usize, variant: usize) -> [f64; 3] {
    static TABLE: OnceLock<Vec<[f64; 3]>> = OnceLock::new();
    const MAX_CLASSES: usize = 16;
    let table = TABLE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(COLOR_SEED);
        let mut colors: Vec<[f64; 3]> = Vec::new();
        let mut min_dist: f64 = 0.35;
        while colors.len() < MAX_CLASSES * VARIANTS {
            let mut placed = false;
            for _ in 0..10_000 {
                let c = [
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                ];
                let ok = colors.iter().all(|o| {
                    let d: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                    d.sqrt() >= min_dist
                });
                if ok {
                    colors.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                min_dist *= 0.9;
            }
        }
        colors
    });
    assert!(class < MAX_CLASSES && variant < VARIANTS, "no color for ({class}, {variant})");
    table[class * VARIANTS + variant]
}

/// Fixed embedding of a (class, attribute) description.
pub fn descriptor(class: usize, attribute: usize, dim: usize) -> Vec<f64> {
    let key = DESCRIPTOR_SEED ^ ((class as u64) << 32 | attribute as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

struct Thing {
    class: usize,
    variant: usize,
    group: usize,
    cells: Vec<(usize, usize)>,
}

/// Generates one scene and its phrases; a pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<(SyntheticScene, Vec<PhraseSpec>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        if let Some(out) = try_generate(seed, cfg, &mut rng)? {
            return Ok(out);
        }
    }
    Err(Error::Unsatisfiable(format!("no valid layout found for seed {seed}")))
}

fn try_generate(seed: u64, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Option<(SyntheticScene, Vec<PhraseSpec>)>> {
    let (h, w) = (cfg.height, cfg.width);
    let (gh, gw) = (h / CELL, w / CELL);

    // Stuff bands: distinct classes, cut rows on the lattice.
    let n_stuff = rng.random_range(cfg.min_stuff..=cfg.max_stuff);
    let mut stuff_classes: Vec<usize> = (0..cfg.num_stuff_classes).collect();
    shuffle(&mut stuff_classes, rng);
    stuff_classes.truncate(n_stuff);
    let mut cut_rows: Vec<usize> = (1..gh).collect();
    shuffle(&mut cut_rows, rng);
    cut_rows.truncate(n_stuff - 1);
    cut_rows.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cut_rows);
    bounds.push(gh);

    // Thing entities; entity 0 may be a plural group.
    let n_entities = rng.random_range(cfg.min_things..=cfg.max_things);
    let thing_classes: Vec<usize> = (cfg.num_stuff_classes..cfg.num_classes).collect();
    let mut things: Vec<Thing> = Vec::new();
    let mut plural_class = None;
    let mut used_variants: Vec<Vec<bool>> = vec![vec![false; VARIANTS]; cfg.num_classes];
    for entity in 0..n_entities {
        if entity == 0 && rng.random_bool(cfg.plural_prob) {
            let class = thing_classes[rng.random_range(0..thing_classes.len())];
            plural_class = Some(class);
            let size = rng.random_range(2..=3);
            for _ in 0..size {
                let variant = rng.random_range(0..VARIANTS);
                things.push(Thing {
                    class,
                    variant,
                    group: 0,
                    cells: Vec::new(),
                });
            }
            continue;
        }
        let options: Vec<(usize, usize)> = thing_classes
            .iter()
            .filter(|&&c| Some(c) != plural_class)
            .flat_map(|&c| (0..VARIANTS).map(move |v| (c, v)))
            .filter(|&(c, v)| !used_variants[c][v])
            .collect();
        if options.is_empty() {
            return Ok(None);
        }
        let (class, variant) = options[rng.random_range(0..options.len())];
        used_variants[class][variant] = true;
        things.push(Thing {
            class,
            variant,
            group: entity,
            cells: Vec::new(),
        });
    }

    // Non-overlapping placement on the lattice.
    let mut occupied = vec![false; gh * gw];
    for thing in &mut things {
        let mut placed = false;
        for _ in 0..100 {
            let th = rng.random_range(cfg.min_cells..=cfg.max_cells);
            let tw = rng.random_range(cfg.min_cells..=cfg.max_cells);
            let y0 = rng.random_range(0..=gh - th);
            let x0 = rng.random_range(0..=gw - tw);
            let ellipse = rng.random_bool(0.5);
            let cells = shape_cells(y0, x0, th, tw, ellipse);
            if cells.iter().all(|&(y, x)| !occupied[y * gw + x]) {
                for &(y, x) in &cells {
                    occupied[y * gw + x] = true;
                }
                thing.cells = cells;
                placed = true;
                break;
            }
        }
        if !placed {
            return Ok(None);
        }
    }

    // Rasterize.
    let mut segments = Vec::new();
    for (i, &class) in stuff_classes.iter().enumerate() {
        let mut mask = BinaryMask::empty(h, w);
        for gy in bounds[i]..bounds[i + 1] {
            for gx in 0..gw {
                if !occupied[gy * gw + gx] {
                    fill_cell(&mut mask, gy, gx);
                }
            }
        }
        if mask.is_empty() {
            return Ok(None);
        }
        segments.push(Segment {
            id: segments.len(),
            class,
            is_thing: false,
            mask,
        });
    }
    let first_thing = segments.len();
    for thing in &things {
        let mut mask = BinaryMask::empty(h, w);
        for &(gy, gx) in &thing.cells {
            fill_cell(&mut mask, gy, gx);
        }
        segments.push(Segment {
            id: segments.len(),
            class: thing.class,
            is_thing: true,
            mask,
        });
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite noise");
    let mut image = vec![0.0; h * w * 3];
    let stuff_band = |gy: usize| (0..n_stuff).find(|&i| gy >= bounds[i] && gy < bounds[i + 1]).unwrap();
    let mut pixel_color = vec![[0.0; 3]; h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let color = class_color(stuff_classes[stuff_band(gy)], 0);
            for y in gy * CELL..(gy + 1) * CELL {
                for x in gx * CELL..(gx + 1) * CELL {
                    pixel_color[y * w + x] = color;
                }
            }
        }
    }
    for thing in &things {
        let color = class_color(thing.class, thing.variant);
        for &(gy, gx) in &thing.cells {
            for y in gy * CELL..(gy + 1) * CELL {
                for x in gx * CELL..(gx + 1) * CELL {
                    pixel_color[y * w + x] = color;
                }
            }
        }
    }
    for (p, color) in pixel_color.iter().enumerate() {
        for c in 0..3 {
            let n = if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            image[p * 3 + c] = color[c] + n;
        }
    }

    // Phrases: one per stuff band, singular thing and plural group.
    let mut phrases = Vec::new();
    for (i, &class) in stuff_classes.iter().enumerate() {
        phrases.push((class, false, 0, vec![i]));
    }
    let mut groups: Vec<usize> = things.iter().map(|t| t.group).collect();
    groups.dedup();
    for g in groups {
        let members: Vec<usize> = (0..things.len()).filter(|&i| things[i].group == g).collect();
        let t0 = &things[members[0]];
        let plural = members.len() > 1;
        let attribute = if plural { PLURAL_ATTRIBUTE } else { t0.variant };
        let seg_ids = members.iter().map(|m| first_thing + m).collect();
        phrases.push((t0.class, true, attribute, seg_ids));
    }
    if phrases.len() > cfg.max_phrases {
        return Err(Error::TooManyPhrases {
            count: phrases.len(),
            limit: cfg.max_phrases,
        });
    }
    shuffle(&mut phrases, rng);
    let phrases = phrases
        .into_iter()
        .enumerate()
        .map(|(id, (class, is_thing, attribute, segment_ids))| PhraseSpec {
            id,
            is_plural: segment_ids.len() > 1,
            segment_ids,
            class,
            is_thing,
            attribute,
            descriptor: descriptor(class, attribute, cfg.phrase_dim),
        })
        .collect();

    let scene = SyntheticScene {
        image: Tensor::new(vec![h, w, 3], image)?,
        segments,
        seed,
    };
    Ok(Some((scene, phrases)))
}

fn shape_cells(y0: usize, x0: usize, th: usize, tw: usize, ellipse: bool) -> Vec<(usize, usize)> {
    let (cy, cx) = (th as f64 / 2.0, tw as f64 / 2.0);
    let mut cells = Vec::new();
    for dy in 0..th {
        for dx in 0..tw {
            let inside = !ellipse || {
                let ny = (dy as f64 + 0.5 - cy) / cy;
                let nx = (dx as f64 + 0.5 - cx) / cx;
                ny * ny + nx * nx <= 1.0
            };
            if inside {
                cells.push((y0 + dy, x0 + dx));
            }
        }
    }
    cells
}

fn fill_cell(mask: &mut BinaryMask, gy: usize, gx: usize) {
    for y in gy * CELL..(gy + 1) * CELL {
        for x in gx * CELL..(gx + 1) * CELL {
            mask.set(y, x, true);
        }
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}

/// Union of the masks a phrase refers to.
pub fn phrase_mask(scene: &SyntheticScene, phrase: &PhraseSpec) -> Result<BinaryMask> {
    let masks = phrase
        .segment_ids
        .iter()
        .map(|&id| {
            scene
                .segment(id)
                .map(|s| s.mask.clone())
                .ok_or_else(|| Error::Invalid(format!("phrase {} refers to missing segment {id}", phrase.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    crate::metrics::aggregate_plural(&masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_invariants(scene: &SyntheticScene, phrases: &[PhraseSpec], cfg: &SceneConfig) {
        assert!(!phrases.is_empty());
        assert!(phrases.len() <= cfg.max_phrases);
        for (i, a) in scene.segments.iter().enumerate() {
            assert!(!a.mask.is_empty(), "segment {i} empty");
            for b in &scene.segments[i + 1..] {
                assert!(!a.mask.intersects(&b.mask), "segments overlap");
            }
        }
        let covered = scene.segments.iter().map(|s| s.mask.area()).sum::<usize>();
        assert_eq!(covered, cfg.height * cfg.width);
        for p in phrases {
            assert!(!p.segment_ids.is_empty());
            assert_eq!(p.is_plural, p.segment_ids.len() > 1);
            for &s in &p.segment_ids {
                let seg = scene.segment(s).unwrap();
                assert_eq!(seg.class, p.class);
                assert_eq!(seg.is_thing, p.is_thing);
            }
            if p.is_plural {
                assert!((2..=3).contains(&p.segment_ids.len()));
            }
        }
        assert!(scene.segments.len() <= cfg.max_segments());
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SceneConfig::default();
        let a = generate_scene(0, &cfg).unwrap();
        let b = generate_scene(0, &cfg).unwrap();
        assert_eq!(a, b);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.0.image), bits(&b.0.image));
        let c = generate_scene(1, &cfg).unwrap();
        assert_ne!(a.0.image, c.0.image);
    }

    #[test]
    fn no_plurals_when_probability_zero() {
        let cfg = SceneConfig {
            plural_prob: 0.0,
            ..Default::default()
        };
        for seed in 0..200 {
            let (_, phrases) = generate_scene(seed, &cfg).unwrap();
            assert!(phrases.iter().all(|p| p.segment_ids.len() == 1));
        }
    }

    #[test]
    fn invariants_hold_over_1000_scenes() {
        let cfg = SceneConfig::default();
        let mut plurals = 0;
        for seed in 0..1000 {
            let (scene, phrases) = generate_scene(seed, &cfg).unwrap();
            check_invariants(&scene, &phrases, &cfg);
            plurals += phrases.iter().filter(|p| p.is_plural).count();
        }
        assert!(plurals > 100, "plural phrases too rare: {plurals}");
    }

    #[test]
    fn singular_phrases_are_unambiguous() {
        let cfg = SceneConfig::default();
        for seed in 0..300 {
            let (_, phrases) = generate_scene(seed, &cfg).unwrap();
            for (i, a) in phrases.iter().enumerate() {
                for b in &phrases[i + 1..] {
                    assert!((a.class, a.attribute) != (b.class, b.attribute));
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_configs_error() {
        let cfg = SceneConfig {
            height: 30,
            ..Default::default()
        };
        assert!(matches!(generate_scene(0, &cfg), Err(Error::Unsatisfiable(_))));
        let cfg = SceneConfig {
            min_things: 20,
            max_things: 20,
            max_phrases: 30,
            ..Default::default()
        };
        assert!(generate_scene(0, &cfg).is_err());
    }

    #[test]
    fn colors_are_distinct() {
        for c1 in 0..6 {
            for v1 in 0..VARIANTS {
                for c2 in 0..6 {
                    for v2 in 0..VARIANTS {
                        if (c1, v1) < (c2, v2) {
                            assert_ne!(class_color(c1, v1), class_color(c2, v2));
                        }
                    }
                }
            }
        }
    }
}
