//! One freshly generated scene per optimizer step.

use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint;
use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::{is_backbone, Model};
use crate::numcore::{AdamW, ParamStore, Tape, Tensor};
use crate::scene::generate_scene;

/// Scene seed for training step `step` (0-based).
pub fn train_scene_seed(run_seed: u64, step: usize) -> u64 {
    (run_seed << 32).wrapping_add(step as u64)
}

/// Scene seed for held-out scene `i`; disjoint from every training seed
/// since training is capped below 2^31 steps.
pub fn eval_scene_seed(run_seed: u64, i: usize) -> u64 {
    (run_seed << 32).wrapping_add(1 << 31).wrapping_add(i as u64)
}

pub fn init_seed(run_seed: u64) -> u64 {
    run_seed ^ 0x1417_5eed_0000_0000
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    /// 1-based.
    pub step: usize,
    pub total: f64,
    pub phrase: f64,
    pub object: f64,
    pub pocl: f64,
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub trace: Vec<LossRow>,
}

pub fn loss_csv(trace: &[LossRow]) -> String {
    let mut out = String::from("step,total,phrase,object,pocl\n");
    for r in trace {
        writeln!(out, "{},{:?},{:?},{:?},{:?}", r.step, r.total, r.phrase, r.object, r.pocl).expect("string write");
    }
    out
}

/// Untrained model and parameters for a run.
pub fn init_model(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    cfg.validate()?;
    Model::new(&cfg.model(), init_seed(cfg.seed))
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

pub fn train(cfg: &RunConfig, mut on_step: impl FnMut(&LossRow)) -> Result<Trained> {
    let (model, mut store) = init_model(cfg)?;
    let scene_cfg = cfg.scene();
    let loss_cfg = cfg.loss();
    let mut opt = AdamW::new(cfg.optimizer(), &store);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let (scene, phrases) = generate_scene(train_scene_seed(cfg.seed, step), &scene_cfg)?;
        let frozen = cfg.freeze_backbone && step >= cfg.freeze_after;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, |name| !(frozen && is_backbone(name)));
        let (_, loss) = model.loss(&mut tape, &p, &scene, &phrases, &loss_cfg)?;
        let row = LossRow {
            step: step + 1,
            total: tape.value(loss.total).item(),
            phrase: loss.phrase,
            object: loss.object,
            pocl: loss.pocl,
        };
        if ![row.total, row.phrase, row.object, row.pocl].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: step + 1 });
        }
        tape.backward(loss.total)?;
        let mut grads: Vec<Option<Tensor>> = p
            .vars()
            .iter()
            .map(|&v| if tape.requires_grad(v) { tape.grad(v).cloned() } else { None })
            .collect();
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.set_lr(cfg.learning_rate_at(step));
        opt.step(&mut store, &grads);
        on_step(&row);
        trace.push(row);
    }
    Ok(Trained { model, store, trace })
}

/// Trains and writes `loss.csv`, `model.ckpt` and `config.txt` into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, mut log: impl FnMut(&LossRow)) -> Result<Trained> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let trained = train(cfg, &mut log)?;
    let csv = out.join("loss.csv");
    std::fs::write(&csv, loss_csv(&trained.trace)).map_err(|e| Error::io(&csv, e))?;
    checkpoint::save(&trained.store, &out.join("model.ckpt"))?;
    cfg.save(&out.join("config.txt"))?;
    Ok(trained)
}
