//! Dice soft loss and mean IoU over binary road masks.
//!
//! Conventions:
//! - Dice uses the soft relaxation `Σ pred·gt` / `Σ pred`, which equals the
//!   set form on binary inputs.
//! - A class whose union is empty scores IoU 1, so a perfect prediction of a
//!   single-class mask has mIoU 1.
//! - Thresholding is `value >= t` (ties count as road).
//!
//! Sums run over fixed row chunks in parallel and are combined in chunk
//! order, so results do not depend on the thread count.

use ndarray::{s, Array2, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SMOOTH: f64 = 1.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

const CHUNK_ROWS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    Shape { pred: Vec<usize>, gt: Vec<usize> },
    #[error("non-binary value {value} at ({row}, {col})")]
    NonBinary { row: usize, col: usize, value: u8 },
    #[error("smooth factor must be positive, got {0}")]
    Smooth(f64),
}

/// A soft prediction paired with its binary ground truth.
#[derive(Debug, Clone, Copy)]
pub struct SoftMaskPair<'a> {
    pub pred: ArrayView2<'a, f64>,
    pub gt: ArrayView2<'a, u8>,
    pub smooth: f64,
}

impl<'a> SoftMaskPair<'a> {
    pub fn new(pred: ArrayView2<'a, f64>, gt: ArrayView2<'a, u8>) -> Result<Self, MetricError> {
        Self::with_smooth(pred, gt, DEFAULT_SMOOTH)
    }

    pub fn with_smooth(
        pred: ArrayView2<'a, f64>,
        gt: ArrayView2<'a, u8>,
        smooth: f64,
    ) -> Result<Self, MetricError> {
        check_shape(pred.shape(), gt.shape())?;
        if !(smooth > 0.0) {
            return Err(MetricError::Smooth(smooth));
        }
        Ok(Self { pred, gt, smooth })
    }
}

fn check_shape(a: &[usize], b: &[usize]) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::Shape {
            pred: a.to_vec(),
            gt: b.to_vec(),
        });
    }
    Ok(())
}

fn row_chunks(rows: usize) -> Vec<(usize, usize)> {
    (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|r| (r, (r + CHUNK_ROWS).min(rows)))
        .collect()
}

/// Pairwise summation keeps the per-chunk error at O(log n) ulps.
fn pairwise(xs: &[f64]) -> f64 {
    if xs.len() <= 64 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise(a) + pairwise(b)
}

/// `(Σ pred·gt, Σ pred, Σ gt)`.
fn dice_sums(pair: &SoftMaskPair<'_>) -> (f64, f64, f64) {
    let chunks: Vec<(f64, f64, f64)> = row_chunks(pair.pred.nrows())
        .into_par_iter()
        .map(|(r0, r1)| {
            let (p, g) = (
                pair.pred.slice(s![r0..r1, ..]),
                pair.gt.slice(s![r0..r1, ..]),
            );
            let mut inter = Vec::with_capacity(p.len());
            let mut mass = Vec::with_capacity(p.len());
            let mut gsum = 0u64;
            Zip::from(&p).and(&g).for_each(|&pv, &gv| {
                inter.push(if gv != 0 { pv } else { 0.0 });
                mass.push(pv);
                gsum += u64::from(gv != 0);
            });
            (pairwise(&inter), pairwise(&mass), gsum as f64)
        })
        .collect();
    let i: Vec<f64> = chunks.iter().map(|c| c.0).collect();
    let p: Vec<f64> = chunks.iter().map(|c| c.1).collect();
    let g: Vec<f64> = chunks.iter().map(|c| c.2).collect();
    (pairwise(&i), pairwise(&p), pairwise(&g))
}

/// `1 - (2|P∩G| + s) / (|P| + |G| + s)`.
pub fn dice_loss(pair: &SoftMaskPair<'_>) -> f64 {
    let (inter, pred, gt) = dice_sums(pair);
    1.0 - (2.0 * inter + pair.smooth) / (pred + gt + pair.smooth)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassCounts {
    /// `TP / (TP + FP + FN)`, or 1 for an empty union.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub background: ClassCounts,
    pub road: ClassCounts,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        // every pixel is a road TP, background TP, or one road error
        self.road.tp + self.background.tp + self.road.fp + self.road.fn_
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        let add = |a: ClassCounts, b: ClassCounts| ClassCounts {
            tp: a.tp + b.tp,
            fp: a.fp + b.fp,
            fn_: a.fn_ + b.fn_,
        };
        ConfusionCounts {
            background: add(self.background, other.background),
            road: add(self.road, other.road),
        }
    }
}

/// Per-class confusion counts of two binary masks.
pub fn confusion(
    pred: ArrayView2<'_, u8>,
    gt: ArrayView2<'_, u8>,
) -> Result<ConfusionCounts, MetricError> {
    check_shape(pred.shape(), gt.shape())?;
    for arr in [pred.view(), gt.view()] {
        if let Some(((row, col), &value)) = arr.indexed_iter().find(|(_, &v)| v > 1) {
            return Err(MetricError::NonBinary { row, col, value });
        }
    }
    // [pred][gt]
    let cells = row_chunks(pred.nrows())
        .into_par_iter()
        .map(|(r0, r1)| {
            let (p, g) = (pred.slice(s![r0..r1, ..]), gt.slice(s![r0..r1, ..]));
            let mut m = [[0u64; 2]; 2];
            Zip::from(&p)
                .and(&g)
                .for_each(|&a, &b| m[a as usize][b as usize] += 1);
            m
        })
        .reduce(
            || [[0u64; 2]; 2],
            |a, b| {
                [
                    [a[0][0] + b[0][0], a[0][1] + b[0][1]],
                    [a[1][0] + b[1][0], a[1][1] + b[1][1]],
                ]
            },
        );
    Ok(ConfusionCounts {
        road: ClassCounts {
            tp: cells[1][1],
            fp: cells[1][0],
            fn_: cells[0][1],
        },
        background: ClassCounts {
            tp: cells[0][0],
            fp: cells[0][1],
            fn_: cells[1][0],
        },
    })
}

/// Mean of background and road IoU.
pub fn miou(counts: &ConfusionCounts) -> f64 {
    (counts.background.iou() + counts.road.iou()) / 2.0
}

/// Binarises a soft prediction: 1 where `value >= t`.
pub fn threshold(pred: ArrayView2<'_, f64>, t: f64) -> Array2<u8> {
    pred.mapv(|v| u8::from(v >= t))
}
