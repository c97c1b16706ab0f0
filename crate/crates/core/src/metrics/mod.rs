//! Grounding evaluation: per-phrase IoU with plural aggregation, recall
//! over IoU thresholds and Average Recall, split by thing/stuff and
//! singular/plural phrases.

mod export;
mod mask;

pub use export::{read_curve_csv, render_curve, render_curve_svg, write_curve_csv};
pub use mask::BinaryMask;

use crate::error::{Error, Result};

/// Number of thresholds on the default grid `0.01, 0.02, ..., 1.00`.
pub const GRID_POINTS: usize = 100;

pub fn default_thresholds() -> Vec<f64> {
    (1..=GRID_POINTS).map(|t| t as f64 / GRID_POINTS as f64).collect()
}

/// Intersection over union. An empty prediction scores 0.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.check_extents(gt)?;
    if gt.is_empty() {
        return Err(Error::Invalid("IoU against an empty ground-truth mask".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(inter as f64 / union as f64)
}

/// Pixelwise union of instance masks; a plural phrase is evaluated once on
/// the aggregate.
pub fn aggregate_plural(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let (first, rest) = masks.split_first().ok_or_else(|| Error::Invalid("aggregate of no masks".into()))?;
    rest.iter().try_fold(first.clone(), |acc, m| acc.union(m))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
    pub ar: f64,
}

impl RecallCurve {
    /// Value of the step curve at `t`: recall at the smallest grid threshold
    /// not below `t` (0 past the last threshold).
    pub fn step_value(&self, t: f64) -> f64 {
        let k = self.thresholds.partition_point(|&x| x < t);
        self.recall.get(k).copied().unwrap_or(0.0)
    }

    /// Exact area under the step curve on `[0, t_last]`.
    pub fn step_integral(&self) -> f64 {
        let mut prev = 0.0;
        let mut area = 0.0;
        for (&t, &r) in self.thresholds.iter().zip(&self.recall) {
            area += r * (t - prev);
            prev = t;
        }
        area
    }
}

/// Fraction of IoUs at or above `t`.
pub fn recall_at(ious: &[f64], t: f64) -> f64 {
    ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64
}

/// Recall at each threshold and the Average Recall.
///
/// AR is the mean over phrases of each IoU quantized to the grid, i.e.
/// `sum_k (t_k - t_{k-1}) [iou >= t_k]`; on the default grid this is
/// `floor(100 iou) / 100`.
pub fn recall_curve(ious: &[f64], thresholds: &[f64]) -> Result<RecallCurve> {
    if ious.is_empty() {
        return Err(Error::Invalid("recall curve of no IoUs".into()));
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("thresholds must be non-empty and increasing".into()));
    }
    if let Some(bad) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!("IoU {bad} outside [0, 1]")));
    }
    let recall = thresholds.iter().map(|&t| recall_at(ious, t)).collect();
    let quantized: f64 = ious
        .iter()
        .map(|&v| {
            let mut prev = 0.0;
            let mut q = 0.0;
            for &t in thresholds {
                if v >= t {
                    q += t - prev;
                }
                prev = t;
            }
            q
        })
        .sum();
    Ok(RecallCurve {
        thresholds: thresholds.to_vec(),
        recall,
        ar: quantized / ious.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseEvalRecord {
    pub phrase_id: usize,
    pub iou: f64,
    pub is_thing: bool,
    pub is_plural: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Overall,
    Things,
    Stuff,
    Singulars,
    Plurals,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Overall, Split::Things, Split::Stuff, Split::Singulars, Split::Plurals];

    pub fn name(self) -> &'static str {
        match self {
            Split::Overall => "overall",
            Split::Things => "things",
            Split::Stuff => "stuff",
            Split::Singulars => "singulars",
            Split::Plurals => "plurals",
        }
    }

    pub fn contains(self, r: &PhraseEvalRecord) -> bool {
        match self {
            Split::Overall => true,
            Split::Things => r.is_thing,
            Split::Stuff => !r.is_thing,
            Split::Singulars => !r.is_plural,
            Split::Plurals => r.is_plural,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitResult {
    pub split: Split,
    pub count: usize,
    pub curve: RecallCurve,
}

/// Per-split curves; splits without records are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitReport {
    pub splits: Vec<SplitResult>,
}

impl SplitReport {
    pub fn get(&self, split: Split) -> Option<&SplitResult> {
        self.splits.iter().find(|s| s.split == split)
    }

    pub fn ar(&self, split: Split) -> Option<f64> {
        self.get(split).map(|s| s.curve.ar)
    }

    /// Plain-text table, one split per line; absent splits print `-`.
    pub fn table(&self) -> String {
        let mut out = String::from("# AR over IoU thresholds 0.01..1.00 step 0.01\nsplit,count,ar\n");
        for split in Split::ALL {
            match self.get(split) {
                Some(s) => out.push_str(&format!("{},{},{:.6}\n", split.name(), s.count, s.curve.ar)),
                None => out.push_str(&format!("{},0,-\n", split.name())),
            }
        }
        out
    }
}

pub fn split_report(records: &[PhraseEvalRecord]) -> Result<SplitReport> {
    if records.is_empty() {
        return Err(Error::Invalid("split report of no records".into()));
    }
    let grid = default_thresholds();
    let mut splits = Vec::new();
    for split in Split::ALL {
        let ious: Vec<f64> = records.iter().filter(|r| split.contains(r)).map(|r| r.iou).collect();
        if ious.is_empty() {
            continue;
        }
        splits.push(SplitResult {
            split,
            count: ious.len(),
            curve: recall_curve(&ious, &grid)?,
        });
    }
    Ok(SplitReport { splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = mask(&[1, 1, 0]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&mask(&[1, 0, 0]), &mask(&[0, 0, 1])).unwrap(), 0.0);
        assert!((iou(&mask(&[1, 1, 0]), &mask(&[0, 1, 1])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&mask(&[0, 0, 0]), &mask(&[0, 1, 1])).unwrap(), 0.0);
        assert!(iou(&mask(&[1, 0]), &mask(&[0, 0])).is_err());
        assert!(iou(&mask(&[1, 0]), &mask(&[0, 0, 1])).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = mask(&[1, 1, 0, 0]);
        assert_eq!(aggregate_plural(std::slice::from_ref(&a)).unwrap(), a);
        let b = mask(&[0, 0, 1, 0]);
        assert_eq!(aggregate_plural(&[a.clone(), b.clone()]).unwrap().area(), a.area() + b.area());
        let c = mask(&[0, 1, 1, 0]);
        assert!(aggregate_plural(&[a.clone(), c.clone()]).unwrap().area() < a.area() + c.area());
        assert!(aggregate_plural(&[]).is_err());
    }

    #[test]
    fn ar_examples() {
        let grid = default_thresholds();
        assert_eq!(recall_curve(&[1.0], &grid).unwrap().ar, 1.0);
        assert!((recall_curve(&[0.5], &grid).unwrap().ar - 0.5).abs() < 1e-12);
        assert!((recall_curve(&[0.0, 1.0], &grid).unwrap().ar - 0.5).abs() < 1e-12);
        assert!(recall_curve(&[], &grid).is_err());
    }

    #[test]
    fn ar_quantizes_to_grid() {
        let grid = default_thresholds();
        let c = recall_curve(&[0.456], &grid).unwrap();
        assert!((c.ar - 0.45).abs() < 1e-12);
        assert!((c.step_integral() - c.ar).abs() < 1e-12);
    }

    #[test]
    fn split_report_examples() {
        let things: Vec<_> = (0..4)
            .map(|i| PhraseEvalRecord {
                phrase_id: i,
                iou: 0.6,
                is_thing: true,
                is_plural: false,
            })
            .collect();
        let r = split_report(&things).unwrap();
        assert!(r.get(Split::Stuff).is_none());
        assert!(r.get(Split::Plurals).is_none());
        assert_eq!(r.ar(Split::Overall), r.ar(Split::Things));
        assert!(r.table().contains("stuff,0,-"));

        let mixed = vec![
            PhraseEvalRecord {
                phrase_id: 0,
                iou: 0.7,
                is_thing: true,
                is_plural: true,
            },
            PhraseEvalRecord {
                phrase_id: 1,
                iou: 0.7,
                is_thing: false,
                is_plural: false,
            },
        ];
        let r = split_report(&mixed).unwrap();
        for s in Split::ALL {
            assert_eq!(r.ar(s), r.ar(Split::Overall));
        }
        assert!(split_report(&[]).is_err());
    }
}
