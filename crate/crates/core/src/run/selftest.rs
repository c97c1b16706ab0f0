//! Bundled invariant suites: contrastive-loss form equality, Hungarian
//! against brute force, masked-attention degeneration, the AR oracle, and
//! persistence round trips.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{checkpoint, init_model, RunConfig};
use crate::decoder::{reference_forward, Decoder, DecoderConfig, MaskMode};
use crate::error::Result;
use crate::matching::{brute_force_assignment, hungarian, pocl, pocl_col_form, pocl_row_form, tie_tolerance};
use crate::metrics::{default_thresholds, recall_curve, RecallCurve};
use crate::numcore::kernels::MASKED;
use crate::numcore::{ParamStore, Tape, Tensor};
use crate::scene::Level;

#[derive(Clone, Debug)]
pub struct SelfCheck {
    pub name: &'static str,
    pub cases: usize,
    /// Worst observed deviation, or a mismatch count.
    pub value: f64,
    /// Passing requires `value < threshold`.
    pub threshold: f64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.value < self.threshold
    }
}

fn random_match(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=16);
    let g: Vec<f64> = (0..n * m).map(|_| rng.random_range(0.0..1.0)).collect();
    let star: Vec<f64> = (0..n * m).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
    (
        Tensor::new(vec![n, m], g).expect("shape"),
        Tensor::new(vec![n, m], star).expect("shape"),
    )
}

/// Max deviation between the mean, row-sum and column-sum forms of the
/// contrastive loss over `cases` random instances with `N <= 8`, `M <= 16`.
pub fn pocl_forms(cases: usize, seed: u64) -> Result<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (g, star) = random_match(&mut rng);
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let l = pocl(&mut tape, gv, &star)?;
        let mean = tape.value(l).item();
        let row = pocl_row_form(&g, &star)?;
        let col = pocl_col_form(&g, &star)?;
        worst = worst.max((mean - row).abs()).max((mean - col).abs()).max((row - col).abs());
    }
    Ok(SelfCheck {
        name: "pocl_three_forms",
        cases,
        value: worst,
        threshold: 1e-12,
    })
}

/// Matrices with min side <= 7, square and rectangular, some with
/// integer entries to force ties. Counts cost or assignment mismatches.
pub fn hungarian_vs_brute_force(cases: usize, seed: u64) -> Result<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for i in 0..cases {
        let rows = rng.random_range(1..=7);
        let cols = if i % 2 == 0 { rows } else { rng.random_range(1..=9) };
        let data: Vec<f64> = if i % 5 == 0 {
            (0..rows * cols).map(|_| rng.random_range(0..4) as f64).collect()
        } else {
            (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect()
        };
        let cost = Tensor::new(vec![rows, cols], data)?;
        let fast = hungarian(&cost)?;
        let slow = brute_force_assignment(&cost)?;
        if (fast.cost - slow.cost).abs() > tie_tolerance(slow.cost) || fast.pairs != slow.pairs {
            mismatches += 1;
        }
    }
    Ok(SelfCheck {
        name: "hungarian_vs_brute_force",
        cases,
        value: mismatches as f64,
        threshold: 0.5,
    })
}

struct DecoderFixture {
    store: ParamStore,
    decoder: Decoder,
    phrases: Tensor,
    levels: [Tensor; 3],
    per_pixel: Tensor,
}

fn decoder_fixture(mode: MaskMode, seed: u64) -> Result<DecoderFixture> {
    const EXTENTS: [(usize, usize); 3] = [(4, 4), (2, 2), (1, 1)];
    let c = 8;
    let cfg = DecoderConfig {
        hidden: c,
        heads: 2,
        num_layers: 6,
        num_tokens: 4,
        max_phrases: 5,
        num_classes: 4,
        mask_mode: mode,
        bare_inner_product: false,
        pos_std: 0.02,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut store, &cfg, EXTENTS, &mut rng)?;
    Ok(DecoderFixture {
        store,
        decoder,
        phrases: Tensor::randn(&[3, c], 1.0, &mut rng),
        levels: std::array::from_fn(|s| Tensor::randn(&[EXTENTS[s].0, EXTENTS[s].1, c], 1.0, &mut rng)),
        per_pixel: Tensor::randn(&[8, 8, c], 1.0, &mut rng),
    })
}

/// Worst deviation of the taped decoder from the plain-loop reference, and
/// the largest attention weight found on a masked position.
fn decoder_against_reference(mode: MaskMode, seed: u64) -> Result<(f64, f64, usize)> {
    let f = decoder_fixture(mode, seed)?;
    let mut tape = Tape::new();
    let p = f.store.bind(&mut tape, |_| false);
    let level = |tape: &mut Tape, t: &Tensor| {
        let s = t.shape();
        Level {
            var: tape.constant(t.clone()),
            height: s[0],
            width: s[1],
            channels: s[2],
        }
    };
    let r = tape.constant(f.phrases.clone());
    let levels = [
        level(&mut tape, &f.levels[0]),
        level(&mut tape, &f.levels[1]),
        level(&mut tape, &f.levels[2]),
    ];
    let pp = level(&mut tape, &f.per_pixel);
    let out = f.decoder.forward(&mut tape, &p, r, levels, pp)?;
    let refs = reference_forward(
        &f.decoder,
        &f.store,
        &f.phrases,
        [&f.levels[0], &f.levels[1], &f.levels[2]],
        &f.per_pixel,
    )?;
    let mut dev: f64 = 0.0;
    let mut masked_weight: f64 = 0.0;
    let mut masked_entries = 0;
    for (got, want) in out.layers.iter().zip(&refs) {
        dev = dev
            .max(tape.value(got.features).max_abs_diff(&want.features))
            .max(tape.value(got.mask_logits).max_abs_diff(&want.mask_logits))
            .max(tape.value(got.phrase_logits).max_abs_diff(&want.phrase_logits))
            .max(tape.value(got.object_logits).max_abs_diff(&want.object_logits));
        if let Some(rec) = &got.attention {
            for (j, &m) in rec.mask.data().iter().enumerate() {
                if m == MASKED {
                    masked_entries += 1;
                    for h in &rec.probs {
                        masked_weight = masked_weight.max(h.data()[j].abs());
                    }
                }
            }
        }
    }
    Ok((dev, masked_weight, masked_entries))
}

pub fn masked_attention_no_op(seeds: usize) -> Result<SelfCheck> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds {
        worst = worst.max(decoder_against_reference(MaskMode::AllVisible, 100 + s as u64)?.0);
    }
    Ok(SelfCheck {
        name: "all_visible_matches_reference",
        cases: seeds,
        value: worst,
        threshold: 1e-12,
    })
}

/// Largest weight on a masked key; exactly zero is required. Also fails if
/// the fixtures never mask anything.
pub fn masked_attention_zero_weight(seeds: usize) -> Result<SelfCheck> {
    let (mut weight, mut dev, mut entries): (f64, f64, usize) = (0.0, 0.0, 0);
    for s in 0..seeds {
        let (d, w, e) = decoder_against_reference(MaskMode::Masked, 200 + s as u64)?;
        weight = weight.max(w);
        dev = dev.max(d);
        entries += e;
    }
    let value = if entries == 0 || dev > 1e-12 { f64::INFINITY } else { weight };
    Ok(SelfCheck {
        name: "masked_positions_zero_weight",
        cases: seeds,
        value,
        threshold: f64::MIN_POSITIVE,
    })
}

/// Left-Riemann sum of the recall step curve over 10^4 uniform points of
/// `[0, 1]`.
pub fn dense_ar(curve: &RecallCurve) -> f64 {
    const STEPS: usize = 10_000;
    (0..STEPS).map(|k| curve.step_value(k as f64 / STEPS as f64)).sum::<f64>() / STEPS as f64
}

pub fn ar_oracle(cases: usize, seed: u64) -> Result<SelfCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = default_thresholds();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = rng.random_range(1..=50);
        let ious: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..=1.0),
            })
            .collect();
        let curve = recall_curve(&ious, &grid)?;
        if curve.recall.windows(2).any(|w| w[1] > w[0]) {
            worst = f64::INFINITY;
        }
        worst = worst.max((curve.ar - dense_ar(&curve)).abs());
    }
    Ok(SelfCheck {
        name: "closed_form_ar_vs_dense",
        cases,
        value: worst,
        threshold: 1e-3,
    })
}

/// Mismatched bytes after checkpoint save/load and config
/// serialize/parse.
pub fn persistence_round_trips() -> Result<SelfCheck> {
    let cfg = RunConfig::default();
    let (_, store) = init_model(&cfg)?;
    let bytes = checkpoint::encode(&store);
    let (_, mut fresh) = init_model(&RunConfig { seed: 99, ..cfg.clone() })?;
    checkpoint::restore(&mut fresh, checkpoint::decode(&bytes)?)?;
    let mut bad = store
        .values()
        .iter()
        .zip(fresh.values())
        .flat_map(|(a, b)| a.data().iter().zip(b.data()))
        .filter(|(x, y)| x.to_bits() != y.to_bits())
        .count();
    let text = cfg.serialize();
    let again = RunConfig::parse(&text)?.serialize();
    bad += (again != text) as usize;
    Ok(SelfCheck {
        name: "checkpoint_and_config_round_trip",
        cases: store.len(),
        value: bad as f64,
        threshold: 0.5,
    })
}

pub fn run_selftest() -> Result<Vec<SelfCheck>> {
    Ok(vec![
        pocl_forms(1000, 1)?,
        hungarian_vs_brute_force(500, 2)?,
        masked_attention_no_op(5)?,
        masked_attention_zero_weight(5)?,
        ar_oracle(100, 3)?,
        persistence_round_trips()?,
    ])
}

pub fn selftest_csv(rows: &[SelfCheck]) -> String {
    let mut out = String::from("check,cases,value,threshold,status\n");
    for r in rows {
        let status = if r.passed() { "pass" } else { "FAIL" };
        writeln!(out, "{},{},{:.3e},{:.3e},{status}", r.name, r.cases, r.value, r.threshold).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_oracle_examples() {
        let grid = default_thresholds();
        let dense = |ious: &[f64]| dense_ar(&recall_curve(ious, &grid).unwrap());
        assert!((dense(&[1.0]) - 1.0).abs() < 1e-9);
        assert!((dense(&[0.5]) - 0.5).abs() < 1e-3);
        assert!((dense(&[0.0, 1.0]) - 0.5).abs() < 1e-3);
    }

    #[test]
    fn every_suite_passes() {
        for r in run_selftest().unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn masked_fixtures_do_mask() {
        let (_, w, entries) = decoder_against_reference(MaskMode::Masked, 200).unwrap();
        assert!(entries > 0);
        assert_eq!(w, 0.0);
    }
}
