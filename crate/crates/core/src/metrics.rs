//! Confusion-matrix segmentation metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::label::{LabelMap, CLASS_NAMES, NUM_CLASSES};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_maps(pred: &LabelMap, truth: &LabelMap) -> Result<Self> {
        let mut cm = Self::new();
        cm.add_maps(pred, truth)?;
        Ok(cm)
    }

    pub fn add_maps(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::ShapeMsg(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        pred.validate()?;
        truth.validate()?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.counts[t as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::new();
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t.counts[j][i] = v;
            }
        }
        t
    }

    pub fn true_positive(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Pixels of class `c` in the ground truth.
    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    /// Pixels predicted as class `c`.
    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// `TP + FP + FN` for class `c`.
    pub fn union(&self, c: usize) -> u64 {
        self.row_sum(c) + self.col_sum(c) - self.true_positive(c)
    }

    fn require_pixels(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Contract(
                "metrics of an empty confusion matrix".into(),
            ));
        }
        Ok(())
    }

    /// IoU of class `c`, or `None` when the class appears in neither map.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let u = self.union(c);
        (u > 0).then(|| self.true_positive(c) as f64 / u as f64)
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        self.require_pixels()?;
        let ious: Vec<f64> = (0..NUM_CLASSES).filter_map(|c| self.iou(c)).collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        self.require_pixels()?;
        let trace: u64 = (0..NUM_CLASSES).map(|c| self.true_positive(c)).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    /// Mean per-class recall over classes present in the ground truth.
    pub fn mean_accuracy(&self) -> Result<f64> {
        self.require_pixels()?;
        let recalls: Vec<f64> = (0..NUM_CLASSES)
            .filter(|&c| self.row_sum(c) > 0)
            .map(|c| self.true_positive(c) as f64 / self.row_sum(c) as f64)
            .collect();
        Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }

    /// Pooled per-class IoU and Dice. Classes absent from both maps score 1.
    pub fn per_class_scores(&self) -> Result<[ClassScores; NUM_CLASSES]> {
        self.require_pixels()?;
        Ok(std::array::from_fn(|c| {
            let u = self.union(c);
            if u == 0 {
                return ClassScores {
                    iou: 1.0,
                    dice: 1.0,
                    jaccard: 1.0,
                    present: false,
                };
            }
            let tp = self.true_positive(c) as f64;
            let iou = tp / u as f64;
            let dice = 2.0 * tp / (u as f64 + tp);
            ClassScores {
                iou,
                dice,
                jaccard: iou,
                present: true,
            }
        }))
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ClassScores {
    /// Dataset-pooled IoU.
    pub iou: f64,
    /// Dataset-pooled Dice, `2TP / (2TP + FP + FN)`.
    pub dice: f64,
    /// Per-image IoU averaged over the images where the class appears.
    pub jaccard: f64,
    /// Whether the class appeared in any prediction or ground truth.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    pub per_class: [ClassScores; NUM_CLASSES],
    pub pixel_total: u64,
    pub images: usize,
}

/// Accumulates a pooled confusion matrix plus per-image IoU means.
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    pooled: ConfusionMatrix,
    iou_sum: [f64; NUM_CLASSES],
    iou_images: [usize; NUM_CLASSES],
    images: usize,
}

impl Evaluator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one image and returns its own confusion matrix.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<ConfusionMatrix> {
        let cm = ConfusionMatrix::from_maps(pred, truth)?;
        self.add_matrix(&cm);
        Ok(cm)
    }

    /// Adds one image given as its confusion matrix.
    pub fn add_matrix(&mut self, cm: &ConfusionMatrix) {
        for c in 0..NUM_CLASSES {
            if let Some(iou) = cm.iou(c) {
                self.iou_sum[c] += iou;
                self.iou_images[c] += 1;
            }
        }
        self.pooled.merge(cm);
        self.images += 1;
    }

    pub fn pooled(&self) -> &ConfusionMatrix {
        &self.pooled
    }

    pub fn report(&self) -> Result<MetricReport> {
        let cm = &self.pooled;
        let mut per_class = cm.per_class_scores()?;
        for (c, s) in per_class.iter_mut().enumerate() {
            if self.iou_images[c] > 0 {
                s.jaccard = self.iou_sum[c] / self.iou_images[c] as f64;
            }
        }
        Ok(MetricReport {
            miou: cm.miou()?,
            pixel_accuracy: cm.pixel_accuracy()?,
            mean_accuracy: cm.mean_accuracy()?,
            per_class,
            pixel_total: cm.total(),
            images: self.images,
        })
    }
}

impl MetricReport {
    /// One `key=value` pair per line.
    pub fn to_key_value(&self) -> String {
        let mut out = format!(
            "images={}\npixels={}\nmiou={:.6}\npixel_accuracy={:.6}\nmean_accuracy={:.6}\n",
            self.images, self.pixel_total, self.miou, self.pixel_accuracy, self.mean_accuracy
        );
        for (name, s) in CLASS_NAMES.iter().zip(&self.per_class) {
            out += &format!(
                "{name}.iou={:.6}\n{name}.dice={:.6}\n{name}.jaccard={:.6}\n",
                s.iou, s.dice, s.jaccard
            );
        }
        out
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images {}  pixels {}", self.images, self.pixel_total)?;
        writeln!(
            f,
            "MIOU {:.4}  PA {:.4}  MA {:.4}",
            self.miou, self.pixel_accuracy, self.mean_accuracy
        )?;
        writeln!(
            f,
            "{:<12}{:>8}{:>9}{:>8}",
            "class", "Dice", "Jaccard", "IOU"
        )?;
        for (name, s) in CLASS_NAMES.iter().zip(&self.per_class) {
            writeln!(
                f,
                "{:<12}{:>8.4}{:>9.4}{:>8.4}",
                name, s.dice, s.jaccard, s.iou
            )?;
        }
        Ok(())
    }
}
