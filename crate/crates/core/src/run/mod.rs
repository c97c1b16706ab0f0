//! Run configuration, checkpoints, training, evaluation and the
//! verification harnesses.

pub mod checkpoint;
mod config;
mod eval;
mod gradcheck;
mod plot;
mod selftest;
mod train;

pub use config::RunConfig;
pub use eval::{
    cmd_eval, evaluate, evaluate_scene, load_model, phrase_masks, summary_text, write_outputs, EvalSummary, SceneEval, MASK_DUMP_SCENES,
};
pub use gradcheck::{check_op, gradcheck_csv, run_gradcheck, OpCheck, GRADCHECK_TOLERANCE, OPS};
pub use plot::{cmd_plot, render_trace_svg};
pub use selftest::{
    ar_oracle, dense_ar, hungarian_vs_brute_force, masked_attention_no_op, masked_attention_zero_weight, persistence_round_trips,
    pocl_forms, run_selftest, selftest_csv, SelfCheck,
};
pub use train::{clip_global_norm, cmd_train, eval_scene_seed, init_model, init_seed, loss_csv, train, train_scene_seed, LossRow, Trained};
