//! Held-out evaluation: final-layer phrase masks only.

use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint;
use super::train::{eval_scene_seed, init_model};
use super::RunConfig;
use crate::error::{Error, Result};
use crate::matching::{total_loss, GroundTruth, LossConfig};
use crate::metrics::{aggregate_plural, iou, render_curve, split_report, write_curve_csv, BinaryMask, PhraseEvalRecord, SplitReport};
use crate::model::Model;
use crate::numcore::{kernels, ParamStore, Tape, Tensor};
use crate::scene::{generate_scene, write_pgm, PhraseSpec, SyntheticScene};

/// Scenes whose predicted phrase masks are written as images.
pub const MASK_DUMP_SCENES: usize = 8;

#[derive(Clone, Debug)]
pub struct SceneEval {
    pub scene_index: usize,
    pub records: Vec<PhraseEvalRecord>,
    pub classes: Vec<usize>,
    pub phrase_masks: Vec<BinaryMask>,
    /// Final-layer `G` entries split by the ground-truth match matrix.
    pub matched_g: Vec<f64>,
    pub unmatched_g: Vec<f64>,
}

/// Binarized phrase masks at image resolution from `N+M` rows of mask
/// logits on an `h×w` grid; only the first `n` rows are used.
pub fn phrase_masks(mask_logits: &Tensor, grid: (usize, usize), n: usize, full: (usize, usize)) -> Result<Vec<BinaryMask>> {
    let rows = Tensor::from_rows(&(0..n).map(|r| mask_logits.row(r).to_vec()).collect::<Vec<_>>())?;
    let maps = kernels::transpose(&rows)?.reshaped(&[grid.0, grid.1, n])?;
    let up = kernels::bilinear_resize(&maps, full.0, full.1)?;
    (0..n)
        .map(|q| {
            let probs: Vec<f64> = (0..full.0 * full.1).map(|px| kernels::sigmoid(up.data()[px * n + q])).collect();
            BinaryMask::from_probs(full.0, full.1, &probs)
        })
        .collect()
}

pub fn evaluate_scene(
    model: &Model,
    store: &ParamStore,
    scene: &SyntheticScene,
    phrases: &[PhraseSpec],
    loss_cfg: &LossConfig,
    scene_index: usize,
) -> Result<SceneEval> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let out = model.forward(&mut tape, &p, scene, phrases)?;
    let n = phrases.len();
    let full = (scene.height(), scene.width());
    let masks = phrase_masks(tape.value(out.last().mask_logits), out.mask_extents, n, full)?;

    let mut records = Vec::with_capacity(n);
    for (ph, pred) in phrases.iter().zip(&masks) {
        let instances = ph
            .segment_ids
            .iter()
            .map(|&id| {
                scene
                    .segment(id)
                    .map(|s| s.mask.clone())
                    .ok_or_else(|| Error::Invalid(format!("phrase {} names missing segment {id}", ph.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let gt = aggregate_plural(&instances)?;
        records.push(PhraseEvalRecord {
            phrase_id: ph.id,
            iou: iou(pred, &gt)?,
            is_thing: ph.is_thing,
            is_plural: ph.is_plural,
        });
    }

    let gt = GroundTruth::new(scene, phrases)?;
    let loss = total_loss(&mut tape, &out, &gt, loss_cfg)?;
    let g = tape.value(loss.g);
    let (mut matched_g, mut unmatched_g) = (Vec::new(), Vec::new());
    for (&gv, &sv) in g.data().iter().zip(loss.g_star.data()) {
        if sv > 0.5 {
            matched_g.push(gv);
        } else {
            unmatched_g.push(gv);
        }
    }
    Ok(SceneEval {
        scene_index,
        records,
        classes: phrases.iter().map(|ph| ph.class).collect(),
        phrase_masks: masks,
        matched_g,
        unmatched_g,
    })
}

#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub report: SplitReport,
    pub scenes: Vec<SceneEval>,
    pub matched_g_mean: f64,
    pub unmatched_g_mean: f64,
}

impl EvalSummary {
    /// Mean `G` over matched phrase-token pairs minus the mean over
    /// unmatched pairs.
    pub fn g_margin(&self) -> f64 {
        self.matched_g_mean - self.unmatched_g_mean
    }

    pub fn records(&self) -> Vec<PhraseEvalRecord> {
        self.scenes.iter().flat_map(|s| s.records.iter().cloned()).collect()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Evaluates `n_scenes` held-out scenes, fanned out over
/// `cfg.eval_threads` workers; results are merged in scene order.
pub fn evaluate(cfg: &RunConfig, model: &Model, store: &ParamStore, n_scenes: usize) -> Result<EvalSummary> {
    if n_scenes == 0 {
        return Err(Error::Invalid("evaluation needs at least one scene".into()));
    }
    let scene_cfg = cfg.scene();
    let loss_cfg = cfg.loss();
    let threads = cfg.eval_threads.clamp(1, n_scenes);
    let run = |worker: usize| -> Result<Vec<SceneEval>> {
        (worker..n_scenes)
            .step_by(threads)
            .map(|i| {
                let (scene, phrases) = generate_scene(eval_scene_seed(cfg.seed, i), &scene_cfg)?;
                evaluate_scene(model, store, &scene, &phrases, &loss_cfg, i)
            })
            .collect()
    };
    let mut scenes = if threads == 1 {
        run(0)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads).map(|w| s.spawn(move || run(w))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    scenes.sort_by_key(|s| s.scene_index);
    let records: Vec<PhraseEvalRecord> = scenes.iter().flat_map(|s| s.records.iter().cloned()).collect();
    Ok(EvalSummary {
        report: split_report(&records)?,
        matched_g_mean: mean(scenes.iter().flat_map(|s| s.matched_g.iter().copied())),
        unmatched_g_mean: mean(scenes.iter().flat_map(|s| s.unmatched_g.iter().copied())),
        scenes,
    })
}

pub fn summary_text(summary: &EvalSummary, n_scenes: usize) -> String {
    let mut out = summary.report.table();
    writeln!(out, "# scenes {n_scenes}").unwrap();
    writeln!(out, "# mean G matched {:.6}", summary.matched_g_mean).unwrap();
    writeln!(out, "# mean G unmatched {:.6}", summary.unmatched_g_mean).unwrap();
    writeln!(out, "# G margin {:.6}", summary.g_margin()).unwrap();
    out
}

/// Writes the AR table (`report.txt`), per-phrase records, per-split
/// curves as CSV and SVG, and phrase masks of the first scenes.
pub fn write_outputs(summary: &EvalSummary, n_scenes: usize, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = out.join("report.txt");
    std::fs::write(&report, summary_text(summary, n_scenes)).map_err(|e| Error::io(&report, e))?;

    let mut rows = String::from("scene,phrase_id,class,is_thing,is_plural,iou\n");
    for s in &summary.scenes {
        for (r, class) in s.records.iter().zip(&s.classes) {
            writeln!(
                rows,
                "{},{},{},{},{},{:?}",
                s.scene_index, r.phrase_id, class, r.is_thing as u8, r.is_plural as u8, r.iou
            )
            .unwrap();
        }
    }
    let records = out.join("records.csv");
    std::fs::write(&records, rows).map_err(|e| Error::io(&records, e))?;

    for split in &summary.report.splits {
        let name = split.split.name();
        write_curve_csv(&split.curve, &out.join(format!("curve_{name}.csv")))?;
        render_curve(
            &split.curve,
            &format!("Recall vs IoU, {name}"),
            &out.join(format!("curve_{name}.svg")),
        )?;
    }

    let masks = out.join("masks");
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for s in summary.scenes.iter().take(MASK_DUMP_SCENES) {
        for (r, m) in s.records.iter().zip(&s.phrase_masks) {
            write_pgm(&masks.join(format!("scene{}_phrase{}.pgm", s.scene_index, r.phrase_id)), m)?;
        }
    }
    Ok(())
}

pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Model, ParamStore)> {
    let (model, mut store) = init_model(cfg)?;
    checkpoint::load_into(&mut store, ckpt)?;
    Ok((model, store))
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, n_scenes: usize, out: &Path) -> Result<EvalSummary> {
    let (model, store) = load_model(cfg, ckpt)?;
    let summary = evaluate(cfg, &model, &store, n_scenes)?;
    write_outputs(&summary, n_scenes, out)?;
    Ok(summary)
}
