//! Finite-difference suite over every differentiable op and the composed
//! three-layer training loss.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{masked_cross_attention, DecoderConfig, MaskMode};
use crate::error::Result;
use crate::layers::{LayerNorm, Linear};
use crate::matching::{matching_predictions, pocl, GSquash, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::numcore::kernels::MASKED;
use crate::numcore::{finite_diff_check_guarded, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::scene::generate_scene;

/// A check fails at or above this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const OPS: [&str; 31] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "scale",
    "sigmoid",
    "gelu",
    "softmax_lastdim",
    "masked_softmax",
    "layer_norm",
    "binary_cross_entropy",
    "bce_with_logits",
    "cross_entropy_logits",
    "weighted_cross_entropy",
    "bilinear_resize",
    "im2col",
    "reshape",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "sum",
    "mean",
    "linear",
    "add_all",
    "masked_cross_attention",
    "pocl",
    "decoder_loss_l3",
];

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `sum(out ⊙ W)` for a fixed random `W`, so every output entry carries a
/// distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(out), seed ^ 0xfeed));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Objective = Box<dyn FnMut(&mut Tape, &[Var]) -> Result<(Var, u64)>>;

fn plain(f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Objective {
    Box::new(move |tape, v| Ok((f(tape, v)?, 0)))
}

fn projected(seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Objective {
    Box::new(move |tape, v| {
        let out = f(tape, v)?;
        Ok((project(tape, out, seed)?, 0))
    })
}

/// Inputs, objective and options for one named check.
fn case(op: &str) -> (Vec<Tensor>, Objective, GradCheckOptions) {
    let opts = GradCheckOptions::default();
    let s = op.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let r = |shape: &[usize], k: u64| randn(shape, s.wrapping_add(k));
    match op {
        "matmul" => (vec![r(&[3, 4], 1), r(&[4, 2], 2)], projected(s, |t, v| t.matmul(v[0], v[1])), opts),
        "transpose" => (vec![r(&[3, 4], 1)], projected(s, |t, v| t.transpose(v[0])), opts),
        "add" => (vec![r(&[3, 4], 1), r(&[3, 4], 2)], projected(s, |t, v| t.add(v[0], v[1])), opts),
        "sub" => (vec![r(&[3, 4], 1), r(&[3, 4], 2)], projected(s, |t, v| t.sub(v[0], v[1])), opts),
        "mul" => (vec![r(&[3, 4], 1), r(&[3, 4], 2)], projected(s, |t, v| t.mul(v[0], v[1])), opts),
        "div" => {
            let den = r(&[3, 4], 2).map(|x| 1.0 + x.abs());
            (vec![r(&[3, 4], 1), den], projected(s, |t, v| t.div(v[0], v[1])), opts)
        }
        "add_row" => (vec![r(&[3, 4], 1), r(&[4], 2)], projected(s, |t, v| t.add_row(v[0], v[1])), opts),
        "scale" => (vec![r(&[3, 4], 1)], projected(s, |t, v| Ok(t.scale(v[0], -1.7))), opts),
        "sigmoid" => (vec![r(&[3, 4], 1)], projected(s, |t, v| Ok(t.sigmoid(v[0]))), opts),
        "gelu" => (vec![r(&[3, 4], 1)], projected(s, |t, v| Ok(t.gelu(v[0]))), opts),
        "softmax_lastdim" => (vec![r(&[3, 5], 1)], projected(s, |t, v| t.softmax_lastdim(v[0])), opts),
        "masked_softmax" => {
            let mut mask = Tensor::zeros(&[3, 5]);
            for (i, j) in [(0, 1), (1, 0), (1, 4), (2, 2)] {
                mask.data_mut()[i * 5 + j] = MASKED;
            }
            (
                vec![r(&[3, 5], 1)],
                projected(s, move |t, v| {
                    let m = t.constant(mask.clone());
                    let x = t.add(v[0], m)?;
                    t.softmax_lastdim(x)
                }),
                opts,
            )
        }
        "layer_norm" => (
            vec![r(&[3, 6], 1), r(&[6], 2), r(&[6], 3)],
            projected(s, |t, v| t.layer_norm(v[0], v[1], v[2])),
            opts,
        ),
        "binary_cross_entropy" => {
            let target = r(&[3, 4], 2).map(|x| (x > 0.0) as u8 as f64 * 0.8 + 0.1);
            (
                vec![r(&[3, 4], 1)],
                plain(move |t, v| {
                    let p = t.sigmoid(v[0]);
                    let tt = t.constant(target.clone());
                    t.binary_cross_entropy(p, tt, 1e-7)
                }),
                opts,
            )
        }
        "bce_with_logits" => {
            let target = r(&[3, 4], 2).map(|x| (x > 0.0) as u8 as f64);
            (
                vec![r(&[3, 4], 1).map(|x| 3.0 * x)],
                plain(move |t, v| {
                    let tt = t.constant(target.clone());
                    t.bce_with_logits(v[0], tt)
                }),
                opts,
            )
        }
        "cross_entropy_logits" => (vec![r(&[4, 5], 1)], plain(|t, v| t.cross_entropy_logits(v[0], &[0, 4, 2, 2])), opts),
        "weighted_cross_entropy" => (
            vec![r(&[4, 5], 1)],
            plain(|t, v| t.weighted_cross_entropy(v[0], &[1, 3, 4, 0], &[1.0, 0.1, 2.0, 0.5], 3.0)),
            opts,
        ),
        "bilinear_resize" => (vec![r(&[3, 2, 2], 1)], projected(s, |t, v| t.bilinear_resize(v[0], 5, 3)), opts),
        "im2col" => (vec![r(&[4, 5, 2], 1)], projected(s, |t, v| t.im2col(v[0], 3, 2, 1)), opts),
        "reshape" => (vec![r(&[3, 4], 1)], projected(s, |t, v| t.reshape(v[0], &[2, 3, 2])), opts),
        "concat_rows" => (
            vec![r(&[2, 3], 1), r(&[3, 3], 2)],
            projected(s, |t, v| t.concat_rows(&[v[0], v[1]])),
            opts,
        ),
        "concat_cols" => (
            vec![r(&[3, 2], 1), r(&[3, 4], 2)],
            projected(s, |t, v| t.concat_cols(&[v[0], v[1]])),
            opts,
        ),
        "slice_rows" => (vec![r(&[5, 3], 1)], projected(s, |t, v| t.slice_rows(v[0], 1, 4)), opts),
        "slice_cols" => (vec![r(&[3, 5], 1)], projected(s, |t, v| t.slice_cols(v[0], 2, 5)), opts),
        "sum" => (
            vec![r(&[3, 4], 1)],
            plain(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            }),
            opts,
        ),
        "mean" => (
            vec![r(&[3, 4], 1)],
            plain(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.mean(sq))
            }),
            opts,
        ),
        "linear" => (
            vec![r(&[3, 4], 1), r(&[4, 2], 2), r(&[2], 3)],
            projected(s, |t, v| t.linear(v[0], v[1], v[2])),
            opts,
        ),
        "add_all" => (
            vec![r(&[2, 2], 1), r(&[2, 2], 2), r(&[2, 2], 3)],
            projected(s, |t, v| t.add_all(&[v[0], v[1], v[2]])),
            opts,
        ),
        "masked_cross_attention" => masked_cross_attention_case(s),
        "pocl" => {
            let g_star = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).expect("rows");
            (
                vec![r(&[3, 6], 1), r(&[4, 6], 2)],
                plain(move |t, v| {
                    let g = matching_predictions(t, v[0], v[1], 6f64.sqrt(), GSquash::Sigmoid)?;
                    pocl(t, g, &g_star)
                }),
                opts,
            )
        }
        "decoder_loss_l3" => decoder_loss_case(),
        other => panic!("no gradient check named {other}"),
    }
}

fn masked_cross_attention_case(seed: u64) -> (Vec<Tensor>, Objective, GradCheckOptions) {
    let (t_q, hw, c, heads) = (4, 6, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let out = Linear::new(&mut store, "out", c, c, 1.0, &mut rng);
    let norm = LayerNorm::new(&mut store, "norm", c);
    let mut mask = Tensor::zeros(&[t_q, hw]);
    for (i, j) in [(0, 0), (0, 5), (2, 1), (2, 2), (2, 3), (3, 4)] {
        mask.data_mut()[i * hw + j] = MASKED;
    }
    let n_store = store.len();
    let mut params: Vec<Tensor> = store.values().to_vec();
    params.extend([
        randn(&[t_q, c], seed + 1),
        randn(&[hw, c], seed + 2),
        randn(&[hw, c], seed + 3),
        randn(&[t_q, c], seed + 4),
    ]);
    let f = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let p = ParamStore::bind_vars(v[..n_store].to_vec());
        let [q, k, val, x] = [v[n_store], v[n_store + 1], v[n_store + 2], v[n_store + 3]];
        let (y, _) = masked_cross_attention(tape, &p, q, k, val, Some(&mask), x, &out, &norm, heads)?;
        Ok(y)
    };
    (params, projected(seed, f), GradCheckOptions::default())
}

/// Full model, three decoder layers, every loss term including the dice
/// term, on one generated scene. Perturbations that flip an attention mask
/// bit or a matching decision are skipped.
fn decoder_loss_case() -> (Vec<Tensor>, Objective, GradCheckOptions) {
    let mut cfg = ModelConfig::default();
    cfg.decoder = DecoderConfig {
        num_layers: 3,
        mask_mode: MaskMode::Masked,
        ..cfg.decoder
    };
    let (model, store) = Model::new(&cfg, 11).expect("default model");
    let (scene, phrases) = generate_scene(5, &cfg.scene).expect("default scene");
    let loss_cfg = LossConfig {
        use_dice: true,
        ..LossConfig::default()
    };
    let f = move |tape: &mut Tape, v: &[Var]| -> Result<(Var, u64)> {
        let p = ParamStore::bind_vars(v.to_vec());
        let (out, loss) = model.loss(tape, &p, &scene, &phrases, &loss_cfg)?;
        Ok((loss.total, out.signature() ^ loss.signature().rotate_left(1)))
    };
    let opts = GradCheckOptions {
        max_coords_per_param: Some(2),
        min_magnitude: 1e-4,
        ..GradCheckOptions::default()
    };
    (store.values().to_vec(), Box::new(f), opts)
}

/// Runs one named check; `corrupt` scales its analytic gradient.
pub fn check_op(op: &'static str, corrupt: bool) -> Result<OpCheck> {
    let (params, mut f, mut opts) = case(op);
    if corrupt {
        opts.corrupt_scale = 1.01;
    }
    let report = finite_diff_check_guarded(|t, v| f(t, v), &params, &opts)?;
    Ok(OpCheck { op, report })
}

/// Every check in [`OPS`]; the one named `corrupt` gets a deliberately
/// wrong analytic gradient.
pub fn run_gradcheck(corrupt: Option<&str>) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|&op| check_op(op, corrupt == Some(op))).collect()
}

pub fn gradcheck_csv(rows: &[OpCheck]) -> String {
    let mut out = String::from("op,max_rel_error,checked,skipped,status\n");
    for r in rows {
        let status = if r.passed() { "pass" } else { "FAIL" };
        writeln!(
            out,
            "{},{:.3e},{},{},{status}",
            r.op, r.report.max_rel_error, r.report.checked, r.report.skipped
        )
        .unwrap();
    }
    out
}
