//! Confusion matrices, per-class IoU and mean IoU.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::types::{LabelMask, IGNORE};

/// Night-time image/event benchmark classes.
pub const DSEC_NIGHT_18: [&str; 18] = [
    "Road",
    "Sidewalk",
    "Building",
    "Wall",
    "Fence",
    "Pole",
    "Traffic Light",
    "Traffic Sign",
    "Vegetation",
    "Terrain",
    "Sky",
    "Person",
    "Rider",
    "Car",
    "Bus",
    "Train",
    "Motorcycle",
    "Bicycle",
];

/// The 18 classes above plus Truck, in Cityscapes order.
pub const CITYSCAPES_19: [&str; 19] = [
    "Road",
    "Sidewalk",
    "Building",
    "Wall",
    "Fence",
    "Pole",
    "Traffic Light",
    "Traffic Sign",
    "Vegetation",
    "Terrain",
    "Sky",
    "Person",
    "Rider",
    "Car",
    "Truck",
    "Bus",
    "Train",
    "Motorcycle",
    "Bicycle",
];

/// Looks up a class list by schema name.
pub fn class_schema(name: &str) -> Option<Vec<String>> {
    let names: &[&str] = match name {
        "dsec-night-18" | "dsec18" => &DSEC_NIGHT_18,
        "cityscapes-19" | "cityscapes19" => &CITYSCAPES_19,
        _ => {
            // "synthetic-N": generic names for N classes.
            let n: usize = name.strip_prefix("synthetic-")?.parse().ok()?;
            if n == 0 || n >= IGNORE as usize {
                return None;
            }
            return Some((0..n).map(|c| format!("class{c}")).collect());
        }
    };
    Some(names.iter().map(|s| s.to_string()).collect())
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not IGNORE. A prediction of
    /// IGNORE at such a pixel is rejected.
    pub fn accumulate(&mut self, gt: &LabelMask, pred: &LabelMask) -> Result<()> {
        if gt.width() != pred.width() || gt.height() != pred.height() {
            return Err(Error::dims(format!(
                "ground truth {}x{} vs prediction {}x{}",
                gt.width(),
                gt.height(),
                pred.width(),
                pred.height()
            )));
        }
        if gt.classes() != self.classes || pred.classes() != self.classes {
            return Err(Error::ClassCountMismatch(
                gt.classes(),
                pred.classes().max(self.classes),
            ));
        }
        for (i, (&g, &p)) in gt.labels().iter().zip(pred.labels()).enumerate() {
            if g == IGNORE {
                continue;
            }
            if p == IGNORE {
                return Err(Error::InvalidParams(format!(
                    "prediction is IGNORE at labeled pixel {i}"
                )));
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ClassCountMismatch(self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// One matrix per `(gt, pred)` pair in parallel, merged in input order.
    pub fn from_pairs(classes: usize, pairs: &[(LabelMask, LabelMask)]) -> Result<Self> {
        let parts = par::map_slice(pairs, |(gt, pred)| {
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate(gt, pred).map(|_| cm)
        });
        let mut cm = ConfusionMatrix::new(classes);
        for part in parts {
            cm.merge(&part?)?;
        }
        Ok(cm)
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither ground truth nor prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean over classes with a defined IoU, summed as exact fractions and
    /// rounded once.
    pub fn miou(&self) -> Result<f64> {
        let c = self.classes;
        let mut sum = BigRational::zero();
        let mut defined = 0u64;
        for k in 0..c {
            let tp = self.get(k, k);
            let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
            let denom = row + col - tp;
            if denom > 0 {
                sum += BigRational::new(BigInt::from(tp), BigInt::from(denom));
                defined += 1;
            }
        }
        if defined == 0 {
            return Err(Error::NoDefinedClasses);
        }
        let mean = sum / BigRational::from_integer(BigInt::from(defined));
        Ok(mean.to_f64().expect("finite ratio"))
    }
}

pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    cm.iou_per_class()
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.miou()
}

/// Fraction to a one-decimal percentage, e.g. `0.601 -> "60.1"`.
pub fn format_percent(v: f64) -> String {
    format!("{:.1}", (v * 1000.0).round() / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub name: String,
    /// Percent; `None` when undefined.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub pixels: u64,
    pub classes: Vec<ClassIou>,
    pub miou: f64,
}

impl EvalReport {
    pub fn new(schema: &str, names: &[String], cm: &ConfusionMatrix) -> Result<Self> {
        if names.len() != cm.classes() {
            return Err(Error::ClassCountMismatch(names.len(), cm.classes()));
        }
        let classes = names
            .iter()
            .zip(cm.iou_per_class())
            .map(|(n, iou)| ClassIou {
                name: n.clone(),
                iou: iou.map(|v| v * 100.0),
            })
            .collect();
        Ok(Self {
            schema: schema.to_string(),
            pixels: cm.total(),
            classes,
            miou: cm.miou()? * 100.0,
        })
    }

    /// Plain-text table: one `class  IoU%` line per class, then MIoU.
    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  IoU%\n", "class");
        for c in &self.classes {
            let v = c.iou.map_or_else(|| "-".to_string(), |v| format_percent(v / 100.0));
            out.push_str(&format!("{:<width$}  {v}\n", c.name));
        }
        out.push_str(&format!("{:<width$}  {}\n", "MIoU", format_percent(self.miou / 100.0)));
        out
    }
}
