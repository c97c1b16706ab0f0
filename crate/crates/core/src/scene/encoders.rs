//! Stand-in vision and language encoders plus the multi-scale pixel decoder.
//!
//! The vision encoder is a stride-2 convolution stack producing features at
//! 1/4 .. 1/32 of the input. The pixel decoder refines the three coarsest
//! scales by mixing a 3×3 neighbourhood at each scale with bilinearly
//! aligned features from the other two scales, then fuses the finest refined
//! scale back into the 1/4-scale per-pixel embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{flatten_hw, param_row, Conv, Linear};
use crate::numcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

use super::{PhraseSpec, SyntheticScene};

/// One pyramid level: an `h×w×c` tensor on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Level {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Level {
    fn of(tape: &Tape, var: Var) -> Self {
        let s = tape.shape(var);
        Level {
            var,
            height: s[0],
            width: s[1],
            channels: s[2],
        }
    }
}

/// Backbone levels `F2..F5` followed by the refined `F̄3..F̄5` and the
/// per-pixel embedding `F̄2`, once computed.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// Raw levels at strides 4, 8, 16, 32.
    pub raw: [Level; 4],
    /// Refined levels at strides 8, 16, 32 (width `C_h`).
    pub refined: Option<[Level; 3]>,
    /// Per-pixel embedding at stride 4 (width `C_h`).
    pub per_pixel: Option<Level>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Channel widths: stem (stride 2), then F2..F5.
    pub widths: [usize; 5],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: [16, 24, 32, 32, 32],
        }
    }
}

#[derive(Clone, Debug)]
pub struct PixelEncoder {
    convs: Vec<Conv>,
}

impl PixelEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut c_in = 3;
        let convs = cfg
            .widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(store, &format!("encoder.conv{i}"), 3, 2, c_in, c, rng);
                c_in = c;
                conv
            })
            .collect();
        PixelEncoder { convs }
    }

    /// Raw pyramid `F2..F5` of an `H×W×3` image.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let mut x = image;
        let mut levels = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, p, x)?;
            x = tape.gelu(x);
            if i > 0 {
                levels.push(Level::of(tape, x));
            }
        }
        Ok(FeaturePyramid {
            raw: [levels[0], levels[1], levels[2], levels[3]],
            refined: None,
            per_pixel: None,
        })
    }
}

/// Fixed 2-D sinusoidal embedding, `(h*w)×c` with `c` divisible by 4.
///
/// The first half of the channels encodes the row, the second half the
/// column; each half interleaves `sin`/`cos` at frequencies spaced
/// geometrically between 1 and 1e-4.
pub fn sinusoid_2d(h: usize, w: usize, c: usize) -> Tensor {
    assert!(c.is_multiple_of(4) && c >= 4, "sinusoid width {c} must be a positive multiple of 4");
    let half = c / 2;
    let nf = half / 2;
    let freq = |k: usize| {
        if nf == 1 {
            1.0
        } else {
            1e4f64.powf(-(k as f64) / (nf - 1) as f64)
        }
    };
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for (pos, _) in [(y as f64, 0), (x as f64, 1)] {
                for k in 0..nf {
                    let a = pos * freq(k);
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
    }
    Tensor::new(vec![h * w, c], data).expect("sinusoid shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelDecoderConfig {
    pub hidden: usize,
    pub rounds: usize,
    pub init_std: f64,
}

#[derive(Clone, Debug)]
struct Round {
    /// Per scale: 3×3 neighbourhood mixing, `(9*C_h)×C_h`.
    local: [ParamId; 3],
    /// Per (target, source) scale pair, `C_h×C_h`; index `target*3 + source`.
    cross: [Option<ParamId>; 9],
    bias: [ParamId; 3],
    ffn_in: [Linear; 3],
    ffn_out: [Linear; 3],
}

#[derive(Clone, Debug)]
pub struct PixelDecoder {
    hidden: usize,
    /// 1×1 projections of F3..F5 to `C_h`.
    proj: [Linear; 3],
    /// Learnable scale-level embedding, `3×C_h`.
    pub scale_embed: ParamId,
    rounds: Vec<Round>,
}

impl PixelDecoder {
    pub fn new(store: &mut ParamStore, cfg: &PixelDecoderConfig, in_widths: [usize; 3], rng: &mut impl Rng) -> Self {
        let c = cfg.hidden;
        let proj = std::array::from_fn(|i| Linear::new(store, &format!("pixel_decoder.proj{}", i + 3), in_widths[i], c, 1.0, rng));
        let scale_embed = store.add("pixel_decoder.scale_embed", Tensor::randn(&[3, c], cfg.init_std, rng));
        let rounds = (0..cfg.rounds)
            .map(|r| {
                let local = std::array::from_fn(|s| {
                    let mut w = Tensor::randn(&[9 * c, c], cfg.init_std, rng);
                    // centre tap starts as identity
                    for i in 0..c {
                        w.data_mut()[(4 * c + i) * c + i] += 1.0;
                    }
                    store.add(format!("pixel_decoder.round{r}.local{}", s + 3), w)
                });
                let cross = std::array::from_fn(|k| {
                    let (t, s) = (k / 3, k % 3);
                    (t != s).then(|| {
                        store.add(
                            format!("pixel_decoder.round{r}.cross{}_{}", t + 3, s + 3),
                            Tensor::randn(&[c, c], cfg.init_std, rng),
                        )
                    })
                });
                let bias = std::array::from_fn(|s| store.add(format!("pixel_decoder.round{r}.bias{}", s + 3), Tensor::zeros(&[c])));
                let ffn_in =
                    std::array::from_fn(|s| Linear::new(store, &format!("pixel_decoder.round{r}.ffn_in{}", s + 3), c, 2 * c, 1.0, rng));
                let ffn_out = std::array::from_fn(|s| {
                    Linear::new(
                        store,
                        &format!("pixel_decoder.round{r}.ffn_out{}", s + 3),
                        2 * c,
                        c,
                        cfg.init_std * (2.0 * c as f64).sqrt(),
                        rng,
                    )
                });
                Round {
                    local,
                    cross,
                    bias,
                    ffn_in,
                    ffn_out,
                }
            })
            .collect();
        PixelDecoder {
            hidden: c,
            proj,
            scale_embed,
            rounds,
        }
    }

    /// Parameters of the cross-scale terms, for tests that switch them off.
    pub fn cross_params(&self) -> Vec<ParamId> {
        self.rounds.iter().flat_map(|r| r.cross.iter().flatten().copied()).collect()
    }

    pub fn local_params(&self) -> Vec<ParamId> {
        self.rounds.iter().flat_map(|r| r.local).collect()
    }

    pub fn ffn_out_params(&self) -> Vec<ParamId> {
        self.rounds
            .iter()
            .flat_map(|r| r.ffn_out.iter().flat_map(|l| [l.weight, l.bias]))
            .collect()
    }

    /// Refines `F3..F5` into `F̄3..F̄5`, each `h×w×C_h`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, inputs: [Level; 3]) -> Result<[Level; 3]> {
        let c = self.hidden;
        let mut xs = Vec::with_capacity(3);
        for (s, level) in inputs.iter().enumerate() {
            let flat = flatten_hw(tape, level.var)?;
            let projected = self.proj[s].forward(tape, p, flat)?;
            let pos = tape.constant(sinusoid_2d(level.height, level.width, c));
            let with_pos = tape.add(projected, pos)?;
            let scale = param_row(tape, p.var(self.scale_embed), s)?;
            let x = tape.add_row(with_pos, scale)?;
            xs.push(tape.reshape(x, &[level.height, level.width, c])?);
        }
        for round in &self.rounds {
            let mut next = Vec::with_capacity(3);
            for t in 0..3 {
                let (h, w) = (inputs[t].height, inputs[t].width);
                let cols = tape.im2col(xs[t], 3, 1, 1)?;
                let mut y = tape.matmul(cols, p.var(round.local[t]))?;
                for (s, &x) in xs.iter().enumerate() {
                    let Some(id) = round.cross[t * 3 + s] else { continue };
                    let aligned = tape.bilinear_resize(x, h, w)?;
                    let aligned = flatten_hw(tape, aligned)?;
                    let mixed = tape.matmul(aligned, p.var(id))?;
                    y = tape.add(y, mixed)?;
                }
                let y = tape.add_row(y, p.var(round.bias[t]))?;
                let hidden = round.ffn_in[t].forward(tape, p, y)?;
                let hidden = tape.gelu(hidden);
                let delta = round.ffn_out[t].forward(tape, p, hidden)?;
                let out = tape.add(y, delta)?;
                next.push(tape.reshape(out, &[h, w, c])?);
            }
            xs = next;
        }
        Ok([Level::of(tape, xs[0]), Level::of(tape, xs[1]), Level::of(tape, xs[2])])
    }
}

/// `F̄2 = Conv3x3(Conv1x1(F2) + Upsample2x(F̄3))`.
#[derive(Clone, Debug)]
pub struct PerPixelFuse {
    lateral: Linear,
    output: Conv,
    hidden: usize,
}

impl PerPixelFuse {
    pub fn new(store: &mut ParamStore, f2_width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        PerPixelFuse {
            lateral: Linear::new(store, "fuse.lateral", f2_width, hidden, 1.0, rng),
            output: Conv::new(store, "fuse.output", 3, 1, hidden, hidden, rng),
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, f2: Level, f3_refined: Level) -> Result<Level> {
        if f2.height != 2 * f3_refined.height || f2.width != 2 * f3_refined.width {
            return Err(Error::shape(
                "fuse_perpixel",
                &[f2.height, f2.width],
                &[f3_refined.height, f3_refined.width],
            ));
        }
        let flat = flatten_hw(tape, f2.var)?;
        let lateral = self.lateral.forward(tape, p, flat)?;
        let lateral = tape.reshape(lateral, &[f2.height, f2.width, self.hidden])?;
        let up = tape.bilinear_resize(f3_refined.var, f2.height, f2.width)?;
        let sum = tape.add(lateral, up)?;
        let out = self.output.forward(tape, p, sum)?;
        Ok(Level::of(tape, out))
    }
}

/// Descriptor rows through one trainable linear layer.
#[derive(Clone, Debug)]
pub struct PhraseEncoder {
    linear: Linear,
    max_phrases: usize,
    pub dim: usize,
}

impl PhraseEncoder {
    pub fn new(store: &mut ParamStore, dim: usize, max_phrases: usize, rng: &mut impl Rng) -> Self {
        PhraseEncoder {
            linear: Linear::new(store, "phrase_encoder.linear", dim, dim, 1.0, rng),
            max_phrases,
            dim,
        }
    }

    pub fn linear(&self) -> &Linear {
        &self.linear
    }

    /// `N×C_r` phrase features in the given order.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, phrases: &[PhraseSpec]) -> Result<Var> {
        if phrases.len() > self.max_phrases {
            return Err(Error::TooManyPhrases {
                count: phrases.len(),
                limit: self.max_phrases,
            });
        }
        if phrases.is_empty() {
            return Err(Error::Invalid("no phrases to encode".into()));
        }
        let rows = phrases.iter().map(|ph| ph.descriptor.clone()).collect::<Vec<_>>();
        let desc = Tensor::from_rows(&rows)?;
        if desc.cols() != self.dim {
            return Err(Error::shape("encode_phrases", desc.shape(), &[self.dim]));
        }
        let desc = tape.constant(desc);
        self.linear.forward(tape, p, desc)
    }
}

/// Places an image on the tape as a constant.
pub fn image_var(tape: &mut Tape, scene: &SyntheticScene) -> Var {
    tape.constant(scene.image.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_check, GradCheckOptions};
    use crate::scene::{generate_scene, SceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn decoder_cfg() -> PixelDecoderConfig {
        PixelDecoderConfig {
            hidden: 8,
            rounds: 2,
            init_std: 0.1,
        }
    }

    fn const_bound(tape: &mut Tape, values: &[Tensor]) -> Bound {
        ParamStore::bind_vars(values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    #[test]
    fn zero_image_gives_zero_pyramid() {
        let mut store = ParamStore::new();
        let enc = PixelEncoder::new(&mut store, &EncoderConfig::default(), &mut rng());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let img = tape.constant(Tensor::zeros(&[32, 32, 3]));
        let pyr = enc.forward(&mut tape, &p, img).unwrap();
        for level in pyr.raw {
            assert!(tape.value(level.var).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pyramid_extents_halve() {
        let mut store = ParamStore::new();
        let enc = PixelEncoder::new(&mut store, &EncoderConfig::default(), &mut rng());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let img = tape.constant(Tensor::randn(&[64, 32, 3], 1.0, &mut rng()));
        let pyr = enc.forward(&mut tape, &p, img).unwrap();
        let ext: Vec<_> = pyr.raw.iter().map(|l| (l.height, l.width)).collect();
        assert_eq!(ext, vec![(16, 8), (8, 4), (4, 2), (2, 1)]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { widths: [4, 4, 4, 4, 4] };
        let enc = PixelEncoder::new(&mut store, &cfg, &mut rng());
        let image = Tensor::randn(&[32, 32, 3], 1.0, &mut rng());
        let report = finite_diff_check(
            |tape, vars| {
                let p = ParamStore::bind_vars(vars.to_vec());
                let img = tape.constant(image.clone());
                let pyr = enc.forward(tape, &p, img)?;
                let parts: Vec<Var> = pyr.raw.iter().map(|l| tape.mean(l.var)).collect();
                tape.add_all(&parts)
            },
            store.values(),
            &GradCheckOptions {
                max_coords_per_param: Some(4),
                min_magnitude: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sinusoid_layout() {
        let pe = sinusoid_2d(2, 3, 8);
        assert_eq!(pe.shape(), &[6, 8]);
        // position (y=1, x=2): row channels then column channels, sin/cos pairs
        let r = pe.row(5);
        assert_eq!(r[0], 1f64.sin());
        assert_eq!(r[1], 1f64.cos());
        assert_eq!(r[4], 2f64.sin());
        assert_eq!(r[5], 2f64.cos());
        assert!((r[2] - (1e-4f64).sin()).abs() < 1e-15);
    }

    fn pixel_inputs(c: [usize; 3]) -> [Tensor; 3] {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        [
            Tensor::randn(&[4, 4, c[0]], 1.0, &mut r),
            Tensor::randn(&[2, 2, c[1]], 1.0, &mut r),
            Tensor::randn(&[1, 1, c[2]], 1.0, &mut r),
        ]
    }

    #[test]
    fn identity_mixing_reduces_to_projection_plus_embeddings() {
        let widths = [5, 6, 7];
        let mut store = ParamStore::new();
        let dec = PixelDecoder::new(&mut store, &decoder_cfg(), widths, &mut rng());
        let c = 8;
        for id in dec.local_params() {
            let w = store.get_mut(id);
            w.data_mut().fill(0.0);
            for i in 0..c {
                w.data_mut()[(4 * c + i) * c + i] = 1.0;
            }
        }
        for id in dec.cross_params().into_iter().chain(dec.ffn_out_params()) {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let inputs = pixel_inputs(widths);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let levels = std::array::from_fn(|i| const_level(&mut tape, &inputs[i]));
        let out = dec.forward(&mut tape, &p, levels).unwrap();
        let scale = store.get(dec.scale_embed);
        for s in 0..3 {
            let (h, w) = (inputs[s].shape()[0], inputs[s].shape()[1]);
            let flat = inputs[s].reshaped(&[h * w, widths[s]]).unwrap();
            let proj = crate::numcore::kernels::matmul(&flat, store.get(dec.proj[s].weight)).unwrap();
            let pe = sinusoid_2d(h, w, c);
            let got = tape.value(out[s].var);
            assert_eq!(got.shape(), &[h, w, c]);
            for i in 0..h * w {
                for k in 0..c {
                    let want = proj.at2(i, k) + pe.at2(i, k) + scale.at2(s, k);
                    assert!((got.data()[i * c + k] - want).abs() < 1e-12);
                }
            }
        }
    }

    fn const_level(tape: &mut Tape, t: &Tensor) -> Level {
        let v = tape.constant(t.clone());
        Level::of(tape, v)
    }

    #[test]
    fn pixel_decoder_gradients_reach_every_scale() {
        let widths = [3, 4, 5];
        let mut store = ParamStore::new();
        let dec = PixelDecoder::new(&mut store, &decoder_cfg(), widths, &mut rng());
        let inputs = pixel_inputs(widths);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let probes: Vec<Tensor> = [(4, 4), (2, 2), (1, 1)]
            .iter()
            .map(|&(h, w)| Tensor::randn(&[h, w, 8], 1.0, &mut r))
            .collect();
        let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let p = const_bound(tape, store.values());
            let levels = std::array::from_fn(|i| Level::of(tape, vars[i]));
            let out = dec.forward(tape, &p, levels)?;
            let mut terms = Vec::new();
            for (o, probe) in out.iter().zip(&probes) {
                let probe = tape.constant(probe.clone());
                let prod = tape.mul(o.var, probe)?;
                terms.push(tape.sum(prod));
            }
            tape.add_all(&terms)
        };
        // Only the finest output, so sensitivity to F4 and F5 must come through cross-scale mixing.
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let p = const_bound(&mut tape, store.values());
        let levels = std::array::from_fn(|i| Level::of(&tape, vars[i]));
        let out = dec.forward(&mut tape, &p, levels).unwrap();
        let loss = tape.sum(out[0].var);
        tape.backward(loss).unwrap();
        for v in &vars {
            assert!(tape.grad(*v).unwrap().data().iter().any(|g| g.abs() > 1e-8));
        }

        let report = finite_diff_check(objective, &inputs, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn pixel_decoder_parameter_gradients() {
        let widths = [3, 4, 5];
        let mut store = ParamStore::new();
        let dec = PixelDecoder::new(&mut store, &decoder_cfg(), widths, &mut rng());
        let inputs = pixel_inputs(widths);
        let report = finite_diff_check(
            |tape, vars| {
                let p = ParamStore::bind_vars(vars.to_vec());
                let levels = std::array::from_fn(|i| const_level(tape, &inputs[i]));
                let out = dec.forward(tape, &p, levels)?;
                let mut terms = Vec::new();
                for o in out {
                    let sq = tape.mul(o.var, o.var)?;
                    terms.push(tape.mean(sq));
                }
                tape.add_all(&terms)
            },
            store.values(),
            &GradCheckOptions {
                max_coords_per_param: Some(3),
                min_magnitude: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn fuse_zero_inputs_give_zero() {
        let mut store = ParamStore::new();
        let fuse = PerPixelFuse::new(&mut store, 4, 8, &mut rng());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let f2 = const_level(&mut tape, &Tensor::zeros(&[8, 8, 4]));
        let f3 = const_level(&mut tape, &Tensor::zeros(&[4, 4, 8]));
        let out = fuse.forward(&mut tape, &p, f2, f3).unwrap();
        assert_eq!((out.height, out.width, out.channels), (8, 8, 8));
        assert!(tape.value(out.var).data().iter().all(|&v| v == 0.0));

        let bad = const_level(&mut tape, &Tensor::zeros(&[3, 4, 8]));
        assert!(matches!(fuse.forward(&mut tape, &p, f2, bad), Err(Error::Shape { .. })));
    }

    /// Half-pixel 2x upsample written out directly.
    fn upsample2(x: &Tensor) -> Tensor {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let at = |y: usize, xx: usize, k: usize| x.data()[(y * w + xx) * c + k];
        let taps = |i: usize, n: usize| {
            let s = (i as f64 + 0.5) / 2.0 - 0.5;
            let s = s.max(0.0);
            let i0 = (s.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            let (y0, y1, fy) = taps(y, h);
            for xx in 0..2 * w {
                let (x0, x1, fx) = taps(xx, w);
                for k in 0..c {
                    let top = at(y0, x0, k) * (1.0 - fx) + at(y0, x1, k) * fx;
                    let bot = at(y1, x0, k) * (1.0 - fx) + at(y1, x1, k) * fx;
                    out[((y * 2 * w) + xx) * c + k] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Tensor::new(vec![2 * h, 2 * w, c], out).unwrap()
    }

    #[test]
    fn fuse_matches_hand_composed_oracle() {
        let (c2, ch) = (3, 4);
        let mut store = ParamStore::new();
        let fuse = PerPixelFuse::new(&mut store, c2, ch, &mut rng());
        for id in [fuse.lateral.bias, fuse.output.bias] {
            for v in store.get_mut(id).data_mut() {
                *v = 0.3;
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let f2 = Tensor::randn(&[4, 4, c2], 1.0, &mut r);
        let f3 = Tensor::randn(&[2, 2, ch], 1.0, &mut r);

        let lw = store.get(fuse.lateral.weight);
        let lb = store.get(fuse.lateral.bias);
        let up = upsample2(&f3);
        let mut sum = vec![0.0; 16 * ch];
        for px in 0..16 {
            for o in 0..ch {
                let mut acc = lb.data()[o];
                for i in 0..c2 {
                    acc += f2.data()[px * c2 + i] * lw.at2(i, o);
                }
                sum[px * ch + o] = acc + up.data()[px * ch + o];
            }
        }
        let cw = store.get(fuse.output.weight);
        let cb = store.get(fuse.output.bias);
        let mut want = vec![0.0; 16 * ch];
        for y in 0..4i64 {
            for x in 0..4i64 {
                for o in 0..ch {
                    let mut acc = cb.data()[o];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, x + kx - 1);
                            if !(0..4).contains(&sy) || !(0..4).contains(&sx) {
                                continue;
                            }
                            for i in 0..ch {
                                let row = ((ky * 3 + kx) as usize) * ch + i;
                                acc += sum[(sy * 4 + sx) as usize * ch + i] * cw.at2(row, o);
                            }
                        }
                    }
                    want[(y * 4 + x) as usize * ch + o] = acc;
                }
            }
        }

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let l2 = const_level(&mut tape, &f2);
        let l3 = const_level(&mut tape, &f3);
        let out = fuse.forward(&mut tape, &p, l2, l3).unwrap();
        let got = tape.value(out.var).data();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn phrase_encoder_examples() {
        let cfg = SceneConfig::default();
        let mut store = ParamStore::new();
        let enc = PhraseEncoder::new(&mut store, cfg.phrase_dim, cfg.max_phrases, &mut rng());
        let (_, phrases) = generate_scene(3, &cfg).unwrap();
        let twice = vec![phrases[0].clone(), phrases[0].clone()];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let r = enc.forward(&mut tape, &p, &twice).unwrap();
        assert_eq!(tape.value(r).row(0), tape.value(r).row(1));

        let too_many = vec![phrases[0].clone(); cfg.max_phrases + 1];
        assert!(matches!(enc.forward(&mut tape, &p, &too_many), Err(Error::TooManyPhrases { .. })));

        store.get_mut(enc.linear.weight).data_mut().fill(0.0);
        store
            .get_mut(enc.linear.bias)
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |_| false);
        let r = enc.forward(&mut tape, &p, &phrases).unwrap();
        for i in 0..phrases.len() {
            assert_eq!(tape.value(r).row(i), store.get(enc.linear.bias).data());
        }
    }

    #[test]
    fn distinct_classes_give_distinct_rows() {
        let cfg = SceneConfig::default();
        for draw in 0..1000u64 {
            let mut store = ParamStore::new();
            let enc = PhraseEncoder::new(&mut store, cfg.phrase_dim, cfg.max_phrases, &mut ChaCha8Rng::seed_from_u64(draw));
            let specs: Vec<PhraseSpec> = (0..cfg.num_classes)
                .map(|class| PhraseSpec {
                    id: class,
                    segment_ids: vec![class],
                    is_plural: false,
                    class,
                    is_thing: class >= cfg.num_stuff_classes,
                    attribute: 0,
                    descriptor: crate::scene::descriptor(class, 0, cfg.phrase_dim),
                })
                .collect();
            let specs = &specs[..cfg.max_phrases.min(specs.len())];
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, |_| false);
            let r = enc.forward(&mut tape, &p, specs).unwrap();
            let v = tape.value(r);
            for i in 0..specs.len() {
                for j in i + 1..specs.len() {
                    assert_ne!(v.row(i), v.row(j), "draw {draw}: classes {i} and {j} collide");
                }
            }
        }
    }
}
