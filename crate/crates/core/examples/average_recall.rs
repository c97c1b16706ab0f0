//! Recall curves and Average Recall per split from hand-written IoUs, with
//! the overall curve rendered to SVG.
//!
//! Usage: `cargo run --example average_recall -- [out.svg]`

use ppotd::metrics::{default_thresholds, recall_curve, render_curve, split_report, PhraseEvalRecord};

fn main() -> ppotd::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "recall_overall.svg".into());
    let grid = default_thresholds();
    for ious in [vec![1.0], vec![0.5], vec![0.0, 1.0], vec![0.2, 0.4, 0.6, 0.8]] {
        println!("IoUs {ious:?}: AR {:.4}", recall_curve(&ious, &grid)?.ar);
    }

    let records: Vec<PhraseEvalRecord> = [
        (0.92, true, false),
        (0.35, true, true),
        (0.71, false, false),
        (0.88, false, false),
        (0.10, true, false),
    ]
    .iter()
    .enumerate()
    .map(|(i, &(iou, is_thing, is_plural))| PhraseEvalRecord {
        phrase_id: i,
        iou,
        is_thing,
        is_plural,
    })
    .collect();
    let report = split_report(&records)?;
    print!("{}", report.table());
    let overall = recall_curve(&records.iter().map(|r| r.iou).collect::<Vec<_>>(), &grid)?;
    render_curve(&overall, "overall", std::path::Path::new(&out))?;
    println!("wrote {out}");
    Ok(())
}
