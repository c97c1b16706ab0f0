//! Mask-classification losses for phrases and object tokens, the
//! phrase-object contrastive loss, and the combined training objective.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use super::hungarian::{hungarian, Assignment};
use crate::decoder::DecoderOutput;
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::numcore::kernels::{self, bilinear_resize, BCE_CLAMP_EPS};
use crate::numcore::{Tape, Tensor, Var};
use crate::scene::{phrase_mask, PhraseSpec, SyntheticScene};

/// Down-weight on the no-object class for unmatched tokens.
pub const NO_OBJECT_WEIGHT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GtSegment {
    pub id: usize,
    pub class: usize,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtPhrase {
    pub class: usize,
    /// Indices into [`GroundTruth::segments`].
    pub segments: Vec<usize>,
    /// Union of the referred segment masks.
    pub mask: BinaryMask,
    pub is_thing: bool,
    pub is_plural: bool,
}

/// Targets for one scene at full image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub extents: (usize, usize),
    pub segments: Vec<GtSegment>,
    pub phrases: Vec<GtPhrase>,
}

impl GroundTruth {
    pub fn new(scene: &SyntheticScene, phrases: &[PhraseSpec]) -> Result<Self> {
        let index: HashMap<usize, usize> = scene.segments.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let segments = scene
            .segments
            .iter()
            .map(|s| GtSegment {
                id: s.id,
                class: s.class,
                mask: s.mask.clone(),
            })
            .collect();
        let phrases = phrases
            .iter()
            .map(|p| {
                let segs = p
                    .segment_ids
                    .iter()
                    .map(|id| {
                        index
                            .get(id)
                            .copied()
                            .ok_or_else(|| Error::Invalid(format!("phrase {} refers to missing segment {id}", p.id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GtPhrase {
                    class: p.class,
                    segments: segs,
                    mask: phrase_mask(scene, p)?,
                    is_thing: p.is_thing,
                    is_plural: p.is_plural,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GroundTruth {
            extents: (scene.height(), scene.width()),
            segments,
            phrases,
        })
    }
}

/// `M×S` matching cost: `-log p_k(c_s) + BCE(sigmoid(mask_k), m_s)`, with
/// masks compared on the mask-logit grid. A segment that vanishes when
/// downsampled is compared at full resolution.
pub fn match_cost(object_logits: &Tensor, mask_logits: &Tensor, mask_extents: (usize, usize), gt: &GroundTruth) -> Result<Tensor> {
    let (m, k1) = (object_logits.rows(), object_logits.cols());
    let (h, w) = mask_extents;
    if mask_logits.rows() != m || mask_logits.cols() != h * w {
        return Err(Error::shape("match_cost", mask_logits.shape(), &[m, h * w]));
    }
    if gt.segments.is_empty() {
        return Err(Error::Invalid("match_cost needs at least one segment".into()));
    }
    let (fh, fw) = gt.extents;
    if fh % h != 0 || fw % w != 0 || fh / h != fw / w {
        return Err(Error::shape("match_cost", &[fh, fw], &[h, w]));
    }
    let factor = fh / h;
    let probs = mask_logits.map(kernels::sigmoid);
    let mut full_probs: Option<Tensor> = None;
    let mut cost = vec![0.0; m * gt.segments.len()];
    let s_count = gt.segments.len();
    for (s, seg) in gt.segments.iter().enumerate() {
        if seg.class + 1 >= k1 {
            return Err(Error::LabelOutOfRange {
                label: seg.class,
                classes: k1 - 1,
            });
        }
        let small = seg.mask.downsample(factor);
        let (target, use_full) = if small.is_empty() {
            (seg.mask.to_f64(), true)
        } else {
            (small.to_f64(), false)
        };
        if use_full && full_probs.is_none() {
            let maps = kernels::transpose(mask_logits)?.reshaped(&[h, w, m])?;
            let up = bilinear_resize(&maps, fh, fw)?.reshaped(&[fh * fw, m])?;
            full_probs = Some(kernels::transpose(&up)?.map(kernels::sigmoid));
        }
        let p = if use_full {
            full_probs.as_ref().expect("computed above")
        } else {
            &probs
        };
        for k in 0..m {
            let row = object_logits.row(k);
            let ce = kernels::logsumexp(row) - row[seg.class];
            let bce = kernels::binary_cross_entropy(p.row(k), &target, BCE_CLAMP_EPS);
            cost[k * s_count + s] = ce + bce;
        }
    }
    Tensor::new(vec![m, s_count], cost)
}

/// `N×M` indicator: phrase `j` links to token `k` when `k` is matched to a
/// segment phrase `j` refers to.
pub fn ground_truth_matching(assignment: &Assignment, gt: &GroundTruth, num_tokens: usize) -> Result<Tensor> {
    let n = gt.phrases.len();
    let mut g = vec![0.0; n * num_tokens];
    for (j, phrase) in gt.phrases.iter().enumerate() {
        for &s in &phrase.segments {
            let k = assignment.token_for(s).ok_or(Error::UnmatchedSegment {
                phrase: j,
                segment: gt.segments[s].id,
            })?;
            g[j * num_tokens + k] = 1.0;
        }
    }
    Tensor::new(vec![n, num_tokens], g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GSquash {
    Sigmoid,
    /// Softmax over tokens within each phrase row.
    SoftmaxRow,
}

impl GSquash {
    pub fn name(self) -> &'static str {
        match self {
            GSquash::Sigmoid => "sigmoid",
            GSquash::SoftmaxRow => "softmax_row",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(GSquash::Sigmoid),
            "softmax_row" => Ok(GSquash::SoftmaxRow),
            other => Err(Error::Config(format!("g_squash must be sigmoid or softmax_row, got {other:?}"))),
        }
    }
}

/// `G = squash(R Oᵀ / tau)`, `N×M`.
pub fn matching_predictions(tape: &mut Tape, phrases: Var, objects: Var, tau: f64, squash: GSquash) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let ot = tape.transpose(objects)?;
    let sim = tape.matmul(phrases, ot)?;
    let sim = tape.scale(sim, 1.0 / tau);
    Ok(match squash {
        GSquash::Sigmoid => tape.sigmoid(sim),
        GSquash::SoftmaxRow => tape.softmax_lastdim(sim)?,
    })
}

/// Mean clamped BCE between `G` and `G*` over all `N·M` pairs.
pub fn pocl(tape: &mut Tape, g: Var, g_star: &Tensor) -> Result<Var> {
    if tape.shape(g) != g_star.shape() {
        return Err(Error::shape("pocl", tape.shape(g), g_star.shape()));
    }
    let t = tape.constant(g_star.clone());
    tape.binary_cross_entropy(g, t, BCE_CLAMP_EPS)
}

fn pair_bce(g: f64, t: f64) -> f64 {
    kernels::binary_cross_entropy(&[g], &[t], BCE_CLAMP_EPS)
}

fn check_pair(g: &Tensor, g_star: &Tensor) -> Result<(usize, usize)> {
    if g.rank() != 2 || g.shape() != g_star.shape() {
        return Err(Error::shape("pocl", g.shape(), g_star.shape()));
    }
    Ok((g.rows(), g.cols()))
}

/// `(1/N) Σ_j (1/M) Σ_k BCE`: per-phrase multi-label losses, averaged.
pub fn pocl_row_form(g: &Tensor, g_star: &Tensor) -> Result<f64> {
    let (n, m) = check_pair(g, g_star)?;
    let per_row = (0..n).map(|j| (0..m).map(|k| pair_bce(g.at2(j, k), g_star.at2(j, k))).sum::<f64>() / m as f64);
    Ok(per_row.sum::<f64>() / n as f64)
}

/// `(1/M) Σ_k (1/N) Σ_j BCE`: per-token multi-label losses, averaged.
pub fn pocl_col_form(g: &Tensor, g_star: &Tensor) -> Result<f64> {
    let (n, m) = check_pair(g, g_star)?;
    let per_col = (0..m).map(|k| (0..n).map(|j| pair_bce(g.at2(j, k), g_star.at2(j, k))).sum::<f64>() / n as f64);
    Ok(per_col.sum::<f64>() / m as f64)
}

/// Supervision for one query row.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTarget {
    pub class: usize,
    /// Flattened target mask on the logit grid; `None` skips the mask term.
    pub mask: Option<Vec<f64>>,
    pub class_weight: f64,
}

/// `Σ_q w_q CE_q + Σ_{q with mask} BCE_q` (plus dice when enabled). BCE is
/// the per-pixel mean for each query.
pub fn mask_cls_loss(tape: &mut Tape, mask_logits: Var, class_logits: Var, targets: &[QueryTarget], use_dice: bool) -> Result<Var> {
    let q = tape.shape(class_logits)[0];
    if targets.len() != q || tape.shape(mask_logits)[0] != q {
        return Err(Error::shape("mask_cls_loss", tape.shape(mask_logits), &[targets.len()]));
    }
    let labels: Vec<usize> = targets.iter().map(|t| t.class).collect();
    let weights: Vec<f64> = targets.iter().map(|t| t.class_weight).collect();
    let mut terms = vec![tape.weighted_cross_entropy(class_logits, &labels, &weights, 1.0)?];

    let with_mask: Vec<usize> = (0..q).filter(|&i| targets[i].mask.is_some()).collect();
    if !with_mask.is_empty() {
        let p = tape.shape(mask_logits)[1];
        let rows = if with_mask.len() == q {
            mask_logits
        } else {
            let parts = with_mask
                .iter()
                .map(|&i| tape.slice_rows(mask_logits, i, i + 1))
                .collect::<Result<Vec<_>>>()?;
            tape.concat_rows(&parts)?
        };
        let mut target = Vec::with_capacity(with_mask.len() * p);
        for &i in &with_mask {
            let m = targets[i].mask.as_ref().expect("filtered");
            if m.len() != p {
                return Err(Error::shape("mask_cls_loss", &[m.len()], &[p]));
            }
            target.extend_from_slice(m);
        }
        let target = tape.constant(Tensor::new(vec![with_mask.len(), p], target)?);
        let bce = tape.bce_with_logits(rows, target)?;
        terms.push(tape.scale(bce, with_mask.len() as f64));
        if use_dice {
            terms.push(dice_loss(tape, rows, target)?);
        }
    }
    tape.add_all(&terms)
}

/// `Σ_rows 1 - (2 Σ p t + 1) / (Σ p + Σ t + 1)` with `p = sigmoid(logits)`.
fn dice_loss(tape: &mut Tape, logits: Var, target: Var) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    let probs = tape.sigmoid(logits);
    let one = tape.constant(Tensor::scalar(1.0));
    let mut terms = Vec::with_capacity(rows);
    for r in 0..rows {
        let p = tape.slice_rows(probs, r, r + 1)?;
        let t = tape.slice_rows(target, r, r + 1)?;
        let pt = tape.mul(p, t)?;
        let inter = tape.sum(pt);
        let num = tape.scale(inter, 2.0);
        let num = tape.add(num, one)?;
        let sp = tape.sum(p);
        let st = tape.sum(t);
        let den = tape.add_all(&[sp, st, one])?;
        let ratio = tape.div(num, den)?;
        terms.push(tape.sub(one, ratio)?);
    }
    tape.add_all(&terms)
}

/// Upsamples `T×(h·w)` mask logits to `T×(H·W)`.
pub fn upsample_mask_logits(tape: &mut Tape, logits: Var, from: (usize, usize), to: (usize, usize)) -> Result<Var> {
    let t = tape.shape(logits)[0];
    let maps = tape.transpose(logits)?;
    let maps = tape.reshape(maps, &[from.0, from.1, t])?;
    let up = tape.bilinear_resize(maps, to.0, to.1)?;
    let up = tape.reshape(up, &[to.0 * to.1, t])?;
    tape.transpose(up)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub pocl_weight: f64,
    pub use_dice: bool,
    pub g_squash: GSquash,
    /// `None` means `sqrt(C_h)`.
    pub temperature: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            pocl_weight: 1.0,
            use_dice: false,
            g_squash: GSquash::Sigmoid,
            temperature: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    /// Sums over layers of the phrase and object mask-classification terms.
    pub phrase: f64,
    pub object: f64,
    /// Unweighted contrastive term.
    pub pocl: f64,
    /// One per decoder output, initial queries first.
    pub assignments: Vec<Assignment>,
    pub g: Var,
    pub g_star: Tensor,
}

impl LossOutput {
    /// Hash of every matching decision.
    pub fn signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for a in &self.assignments {
            a.pairs.hash(&mut h);
        }
        h.finish()
    }
}

/// Per-layer phrase and object mask-classification losses (fresh match per
/// layer) plus the weighted contrastive loss on final-layer features.
pub fn total_loss(tape: &mut Tape, out: &DecoderOutput, gt: &GroundTruth, cfg: &LossConfig) -> Result<LossOutput> {
    let n = out.num_phrases;
    if gt.phrases.len() != n {
        return Err(Error::Invalid(format!(
            "{} phrases decoded but {} have ground truth",
            n,
            gt.phrases.len()
        )));
    }
    let full = gt.extents;
    let phrase_targets: Vec<QueryTarget> = gt
        .phrases
        .iter()
        .map(|p| QueryTarget {
            class: p.class,
            mask: Some(p.mask.to_f64()),
            class_weight: 1.0,
        })
        .collect();
    let segment_masks: Vec<Vec<f64>> = gt.segments.iter().map(|s| s.mask.to_f64()).collect();

    let mut terms = Vec::new();
    let (mut phrase_sum, mut object_sum) = (0.0, 0.0);
    let mut assignments = Vec::with_capacity(out.layers.len());
    for layer in &out.layers {
        let t = tape.shape(layer.mask_logits)[0];
        let m = t - n;
        let up = upsample_mask_logits(tape, layer.mask_logits, out.mask_extents, full)?;
        let phrase_masks = tape.slice_rows(up, 0, n)?;
        let phr = mask_cls_loss(tape, phrase_masks, layer.phrase_logits, &phrase_targets, cfg.use_dice)?;

        let object_values = tape.value(layer.object_logits).clone();
        let all_masks = tape.value(layer.mask_logits);
        let object_masks = Tensor::from_rows(&(n..t).map(|r| all_masks.row(r).to_vec()).collect::<Vec<_>>())?;
        let cost = match_cost(&object_values, &object_masks, out.mask_extents, gt)?;
        let assignment = hungarian(&cost)?;
        let no_object = object_values.cols() - 1;
        let object_targets: Vec<QueryTarget> = (0..m)
            .map(|k| match assignment.segment_for(k) {
                Some(s) => QueryTarget {
                    class: gt.segments[s].class,
                    mask: Some(segment_masks[s].clone()),
                    class_weight: 1.0,
                },
                None => QueryTarget {
                    class: no_object,
                    mask: None,
                    class_weight: NO_OBJECT_WEIGHT,
                },
            })
            .collect();
        let object_up = tape.slice_rows(up, n, t)?;
        let obj = mask_cls_loss(tape, object_up, layer.object_logits, &object_targets, cfg.use_dice)?;

        phrase_sum += tape.value(phr).item();
        object_sum += tape.value(obj).item();
        terms.push(phr);
        terms.push(obj);
        assignments.push(assignment);
    }

    let last = out.last();
    let t = tape.shape(last.features)[0];
    let c = tape.shape(last.features)[1];
    let r = tape.slice_rows(last.features, 0, n)?;
    let o = tape.slice_rows(last.features, n, t)?;
    let tau = cfg.temperature.unwrap_or((c as f64).sqrt());
    let g = matching_predictions(tape, r, o, tau, cfg.g_squash)?;
    let g_star = ground_truth_matching(assignments.last().expect("at least one layer"), gt, t - n)?;
    let poc = pocl(tape, g, &g_star)?;
    let pocl_value = tape.value(poc).item();
    if cfg.pocl_weight != 0.0 {
        terms.push(tape.scale(poc, cfg.pocl_weight));
    }
    let total = tape.add_all(&terms)?;
    Ok(LossOutput {
        total,
        phrase: phrase_sum,
        object: object_sum,
        pocl: pocl_value,
        assignments,
        g,
        g_star,
    })
}
