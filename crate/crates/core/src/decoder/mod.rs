//! Phrase and object-token transformer decoder.
//!
//! Phrase features and learnable object tokens are stacked into one query
//! set (phrases first). Each layer cross-attends to one refined pixel scale
//! under a binary attention mask derived from the previous layer's mask
//! predictions, then runs self-attention over all queries and an FFN.
//! Every layer, plus the initial query set, emits mask and class logits.

mod reference;
#[cfg(test)]
mod tests;

pub use reference::{reference_forward, ReferenceLayer};

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{flatten_hw, LayerNorm, Linear, Mlp};
use crate::numcore::kernels::{self, ResizePlan, MASKED};
use crate::numcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scene::Level;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Attention restricted to the previous layer's foreground.
    Masked,
    /// Every pixel visible (the mask is all zeros).
    AllVisible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub num_layers: usize,
    /// Object tokens `M`.
    pub num_tokens: usize,
    pub max_phrases: usize,
    pub num_classes: usize,
    pub mask_mode: MaskMode,
    pub bare_inner_product: bool,
    pub pos_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 32,
            heads: 4,
            num_layers: 9,
            num_tokens: 8,
            max_phrases: 8,
            num_classes: 6,
            mask_mode: MaskMode::Masked,
            bare_inner_product: false,
            pos_std: 0.02,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || !self.num_layers.is_multiple_of(3) {
            return Err(Error::Invalid(format!(
                "num_layers must be a positive multiple of 3, got {}",
                self.num_layers
            )));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.num_tokens == 0 || self.max_phrases == 0 || self.num_classes < 2 {
            return Err(Error::Invalid("decoder needs tokens, phrases and at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Index into the refined levels `[F̄3, F̄4, F̄5]` visited by 1-based layer
/// `l`: coarse to fine, repeating every three layers.
pub fn scale_for_layer(l: usize) -> usize {
    2 - (l - 1) % 3
}

/// Multi-head attention projections.
#[derive(Clone, Debug)]
struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub cross_out: Linear,
    pub cross_norm: LayerNorm,
    self_attn: SelfAttention,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn self_out(&self) -> &Linear {
        &self.self_attn.out
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub object_init: ParamId,
    pub phrase_pos: ParamId,
    pub object_pos: ParamId,
    /// Learnable per-pixel positional embedding for `F̄3, F̄4, F̄5`.
    pub level_pos: [ParamId; 3],
    /// Scale-level embedding, one row per refined level.
    pub level_embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub out_norm: LayerNorm,
    pub mask_embed: Mlp,
    pub phrase_head: Linear,
    pub object_head: Linear,
}

/// Attention bookkeeping for one decoder layer.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// Index into `[F̄3, F̄4, F̄5]`.
    pub scale: usize,
    /// `(N+M)×(h·w)`, entries `0` or [`MASKED`].
    pub mask: Tensor,
    /// Per-head attention weights, `(N+M)×(h·w)` each.
    pub probs: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct LayerPrediction {
    /// `X_l`, `(N+M)×C_h`.
    pub features: Var,
    /// `(N+M)×(h2·w2)` at the per-pixel resolution.
    pub mask_logits: Var,
    /// `N×K`.
    pub phrase_logits: Var,
    /// `M×(K+1)`, last column is no-object.
    pub object_logits: Var,
    /// `None` for the initial queries.
    pub attention: Option<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub num_phrases: usize,
    /// Per-pixel extents the mask logits live on.
    pub mask_extents: (usize, usize),
    /// Initial queries first, then one entry per layer.
    pub layers: Vec<LayerPrediction>,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerPrediction {
        self.layers.last().expect("decoder output has layer 0")
    }

    /// Hash of every attention mask; changes iff some threshold decision did.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for rec in self.layers.iter().filter_map(|l| l.attention.as_ref()) {
            for &v in rec.mask.data() {
                (v == 0.0).hash(&mut h);
            }
        }
        h.finish()
    }
}

impl Decoder {
    /// `level_extents` are the `(h, w)` of `F̄3, F̄4, F̄5`.
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, level_extents: [(usize, usize); 3], rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.hidden;
        let k = cfg.num_classes;
        let unit = 1.0 / (c as f64).sqrt();
        let object_init = store.add("decoder.object_init", Tensor::randn(&[cfg.num_tokens, c], 1.0, rng));
        let phrase_pos = store.add("decoder.phrase_pos", Tensor::randn(&[cfg.max_phrases, c], cfg.pos_std, rng));
        let object_pos = store.add("decoder.object_pos", Tensor::randn(&[cfg.num_tokens, c], cfg.pos_std, rng));
        let level_pos = std::array::from_fn(|s| {
            let (h, w) = level_extents[s];
            store.add(format!("decoder.level_pos{}", s + 3), Tensor::randn(&[h * w, c], cfg.pos_std, rng))
        });
        let level_embed = store.add("decoder.level_embed", Tensor::randn(&[3, c], cfg.pos_std, rng));
        let layers = (1..=cfg.num_layers)
            .map(|l| {
                let n = |s: &str| format!("decoder.layer{l}.{s}");
                DecoderLayer {
                    w_q: store.add(n("cross.w_q"), Tensor::randn(&[c, c], unit, rng)),
                    w_k: store.add(n("cross.w_k"), Tensor::randn(&[c, c], unit, rng)),
                    w_v: store.add(n("cross.w_v"), Tensor::randn(&[c, c], unit, rng)),
                    cross_out: Linear::new(store, &n("cross.out"), c, c, 1.0, rng),
                    cross_norm: LayerNorm::new(store, &n("cross.norm"), c),
                    self_attn: SelfAttention {
                        q: Linear::new(store, &n("self.q"), c, c, 1.0, rng),
                        k: Linear::new(store, &n("self.k"), c, c, 1.0, rng),
                        v: Linear::new(store, &n("self.v"), c, c, 1.0, rng),
                        out: Linear::new(store, &n("self.out"), c, c, 1.0, rng),
                        norm: LayerNorm::new(store, &n("self.norm"), c),
                    },
                    ffn_in: Linear::new(store, &n("ffn.in"), c, 4 * c, 1.0, rng),
                    ffn_out: Linear::new(store, &n("ffn.out"), 4 * c, c, 1.0, rng),
                    ffn_norm: LayerNorm::new(store, &n("ffn.norm"), c),
                }
            })
            .collect();
        Ok(Decoder {
            cfg: cfg.clone(),
            object_init,
            phrase_pos,
            object_pos,
            level_pos,
            level_embed,
            layers,
            out_norm: LayerNorm::new(store, "decoder.out_norm", c),
            mask_embed: Mlp::new(store, "decoder.mask_embed", &[c, c, c, c], rng),
            phrase_head: Linear::new(store, "decoder.phrase_head", c, k, 1.0, rng),
            object_head: Linear::new(store, "decoder.object_head", c, k + 1, 1.0, rng),
        })
    }

    /// Runs all layers. `phrases` is `N×C_h`; `levels` are `F̄3..F̄5`;
    /// `per_pixel` is `F̄2`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, phrases: Var, levels: [Level; 3], per_pixel: Level) -> Result<DecoderOutput> {
        let c = self.cfg.hidden;
        let n = tape.shape(phrases)[0];
        if n == 0 {
            return Err(Error::Invalid("decoder needs at least one phrase".into()));
        }
        if n > self.cfg.max_phrases {
            return Err(Error::TooManyPhrases {
                count: n,
                limit: self.cfg.max_phrases,
            });
        }
        if tape.shape(phrases)[1] != c {
            return Err(Error::shape("decoder_forward", tape.shape(phrases), &[n, c]));
        }
        for (s, level) in levels.iter().enumerate() {
            let pos_rows = tape.shape(p.var(self.level_pos[s]))[0];
            if level.height * level.width != pos_rows || level.channels != c {
                return Err(Error::shape(
                    "decoder_forward",
                    &[level.height, level.width, level.channels],
                    &[pos_rows, c],
                ));
            }
        }

        let pixel = flatten_hw(tape, per_pixel.var)?;
        let pixel_t = tape.transpose(pixel)?;
        let phrase_pos = tape.slice_rows(p.var(self.phrase_pos), 0, n)?;
        let object_init = p.var(self.object_init);
        let object_pos = p.var(self.object_pos);
        let query_pos = tape.concat_rows(&[phrase_pos, object_pos])?;

        let mut x = tape.concat_rows(&[phrases, object_init])?;
        let mut layers = vec![self.predict(tape, p, x, pixel_t, n, None)?];

        for (li, layer) in self.layers.iter().enumerate() {
            let l = li + 1;
            let s = scale_for_layer(l);
            let level = levels[s];
            let prev_logits = tape.value(layers[li].mask_logits).clone();
            let mask = match self.cfg.mask_mode {
                MaskMode::Masked => {
                    attention_mask_from_logits(&prev_logits, (per_pixel.height, per_pixel.width), (level.height, level.width))?
                }
                MaskMode::AllVisible => Tensor::zeros(&[n + self.cfg.num_tokens, level.height * level.width]),
            };

            let rows = tape.slice_rows(x, 0, n)?;
            let objs = tape.slice_rows(x, n, n + self.cfg.num_tokens)?;
            let q = build_queries(tape, rows, objs, phrase_pos, object_pos, p.var(layer.w_q))?;
            let flat = flatten_hw(tape, level.var)?;
            let scale_row = crate::layers::param_row(tape, p.var(self.level_embed), s)?;
            let (k, v) = build_kv(tape, flat, p.var(self.level_pos[s]), scale_row, p.var(layer.w_k), p.var(layer.w_v))?;
            let (cross, probs) = masked_cross_attention(
                tape,
                p,
                q,
                k,
                v,
                Some(&mask),
                x,
                &layer.cross_out,
                &layer.cross_norm,
                self.cfg.heads,
            )?;
            x = self.tail_block(tape, p, layer, cross, query_pos)?;

            let mut pred = self.predict(tape, p, x, pixel_t, n, None)?;
            pred.attention = Some(AttentionRecord { scale: s, mask, probs });
            layers.push(pred);
        }
        Ok(DecoderOutput {
            num_phrases: n,
            mask_extents: (per_pixel.height, per_pixel.width),
            layers,
        })
    }

    /// Self-attention over all queries, then the FFN, each with a residual
    /// and a post layer norm.
    pub fn tail_block(&self, tape: &mut Tape, p: &Bound, layer: &DecoderLayer, x: Var, query_pos: Var) -> Result<Var> {
        let sa = &layer.self_attn;
        let with_pos = tape.add(x, query_pos)?;
        let q = sa.q.forward(tape, p, with_pos)?;
        let k = sa.k.forward(tape, p, with_pos)?;
        let v = sa.v.forward(tape, p, x)?;
        let (x, _) = masked_cross_attention(tape, p, q, k, v, None, x, &sa.out, &sa.norm, self.cfg.heads)?;
        let h = layer.ffn_in.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let h = layer.ffn_out.forward(tape, p, h)?;
        let y = tape.add(x, h)?;
        layer.ffn_norm.forward(tape, p, y)
    }

    fn predict(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        pixel_t: Var,
        n: usize,
        attention: Option<AttentionRecord>,
    ) -> Result<LayerPrediction> {
        let normed = self.out_norm.forward(tape, p, x)?;
        let mask_logits = self.predict_masks(tape, p, normed, pixel_t)?;
        let (phrase_logits, object_logits) = self.classify_heads(tape, p, normed, n)?;
        Ok(LayerPrediction {
            features: x,
            mask_logits,
            phrase_logits,
            object_logits,
            attention,
        })
    }

    /// `MaskEmbed(X)·F̄2ᵀ` with `pixel_t` the transposed `(h2·w2)×C_h` embedding.
    pub fn predict_masks(&self, tape: &mut Tape, p: &Bound, x: Var, pixel_t: Var) -> Result<Var> {
        let embed = if self.cfg.bare_inner_product {
            x
        } else {
            self.mask_embed.forward(tape, p, x)?
        };
        tape.matmul(embed, pixel_t)
    }

    pub fn classify_heads(&self, tape: &mut Tape, p: &Bound, x: Var, n: usize) -> Result<(Var, Var)> {
        let rows = tape.slice_rows(x, 0, n)?;
        let objs = tape.slice_rows(x, n, tape.shape(x)[0])?;
        Ok((self.phrase_head.forward(tape, p, rows)?, self.object_head.forward(tape, p, objs)?))
    }
}

/// `[R + P_r ; O + P_o] W_q`.
pub fn build_queries(tape: &mut Tape, phrases: Var, objects: Var, phrase_pos: Var, object_pos: Var, w_q: Var) -> Result<Var> {
    if tape.shape(phrases)[0] == 0 {
        return Err(Error::Invalid("query set has no phrases".into()));
    }
    let r = tape.add(phrases, phrase_pos)?;
    let o = tape.add(objects, object_pos)?;
    let x = tape.concat_rows(&[r, o])?;
    tape.matmul(x, w_q)
}

/// `K = (F + P + S) W_k`, `V = (F + P + S) W_v`; `scale_row` broadcasts over pixels.
pub fn build_kv(tape: &mut Tape, pixels: Var, pos: Var, scale_row: Var, w_k: Var, w_v: Var) -> Result<(Var, Var)> {
    let f = tape.add(pixels, pos)?;
    let f = tape.add_row(f, scale_row)?;
    Ok((tape.matmul(f, w_k)?, tape.matmul(f, w_v)?))
}

/// Binarizes mask logits on `src` extents into an additive attention mask on
/// `dst` extents: resize, sigmoid, foreground above 0.5 maps to 0, the rest
/// to [`MASKED`]. A row with no foreground becomes all zeros.
pub fn attention_mask_from_logits(logits: &Tensor, src: (usize, usize), dst: (usize, usize)) -> Result<Tensor> {
    if logits.rank() != 2 || logits.cols() != src.0 * src.1 {
        return Err(Error::shape("attention_mask_from_logits", logits.shape(), &[src.0 * src.1]));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("attention mask logits".into()));
    }
    let plan = ResizePlan::new(src, dst);
    let dst_len = dst.0 * dst.1;
    let mut out = Vec::with_capacity(logits.rows() * dst_len);
    for r in 0..logits.rows() {
        let resized = plan.apply(logits.row(r), 1);
        let row: Vec<f64> = resized
            .iter()
            .map(|&z| if kernels::sigmoid(z) > 0.5 { 0.0 } else { MASKED })
            .collect();
        if row.iter().all(|&v| v == MASKED) {
            out.extend(std::iter::repeat_n(0.0, dst_len));
        } else {
            out.extend(row);
        }
    }
    Tensor::new(vec![logits.rows(), dst_len], out)
}

/// Multi-head `Softmax(Q Kᵀ/√d + A) V`, output projection, residual to
/// `x_prev` and layer norm. Returns the per-head attention weights too.
#[allow(clippy::too_many_arguments)]
pub fn masked_cross_attention(
    tape: &mut Tape,
    p: &Bound,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
    x_prev: Var,
    out: &Linear,
    norm: &LayerNorm,
    heads: usize,
) -> Result<(Var, Vec<Tensor>)> {
    let c = tape.shape(q)[1];
    if tape.shape(k)[1] != c || tape.shape(v)[1] != c || tape.shape(k)[0] != tape.shape(v)[0] {
        return Err(Error::shape("masked_cross_attention", tape.shape(q), tape.shape(k)));
    }
    let d = c / heads;
    let mask = match mask {
        Some(m) => {
            if m.shape() != [tape.shape(q)[0], tape.shape(k)[0]] {
                return Err(Error::shape(
                    "masked_cross_attention",
                    m.shape(),
                    &[tape.shape(q)[0], tape.shape(k)[0]],
                ));
            }
            Some(tape.constant(m.clone()))
        }
        None => None,
    };
    let mut parts = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d, (h + 1) * d)?;
        let kh = tape.slice_cols(k, h * d, (h + 1) * d)?;
        let vh = tape.slice_cols(v, h * d, (h + 1) * d)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let weights = tape.softmax_lastdim(scores)?;
        probs.push(tape.value(weights).clone());
        parts.push(tape.matmul(weights, vh)?);
    }
    let joined = tape.concat_cols(&parts)?;
    let projected = out.forward(tape, p, joined)?;
    let sum = tape.add(projected, x_prev)?;
    Ok((norm.forward(tape, p, sum)?, probs))
}
