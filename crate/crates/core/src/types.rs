//! Raster, event and label containers shared by every stage of the pipeline.
//!
//! All containers validate on construction and are immutable afterwards, so
//! they can be shared freely between threads.

use crate::error::{Error, Result};

/// Read access to a dense row-major raster of reals.
pub trait Raster {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn data(&self) -> &[f64];

    fn len(&self) -> usize {
        self.width() * self.height()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data()[y * self.width() + x]
    }
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width.checked_mul(height) != Some(len) {
        return Err(Error::dims(format!(
            "{width}x{height} raster needs {} values, got {len}",
            width.saturating_mul(height)
        )));
    }
    Ok(())
}

fn check_range(data: &[f64], lo: f64, hi: f64) -> Result<()> {
    for (index, &value) in data.iter().enumerate() {
        if !value.is_finite() || value < lo || value > hi {
            return Err(Error::ValueOutOfRange { index, value, lo, hi });
        }
    }
    Ok(())
}

macro_rules! impl_raster {
    ($t:ty) => {
        impl Raster for $t {
            fn width(&self) -> usize {
                self.width
            }
            fn height(&self) -> usize {
                self.height
            }
            fn data(&self) -> &[f64] {
                &self.data
            }
        }
    };
}

/// Grayscale intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        check_range(&data, 0.0, 1.0)?;
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// 8-bit samples are divided by 255.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        check_len(width, height, bytes.len())?;
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Self { width, height, data })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

impl_raster!(GrayImage);

/// Signed unit-range map: pseudo-events, content maps, collapsed voxel grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SignedMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        check_range(&data, -1.0, 1.0)?;
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// 8-bit visualization: `v` renders as `round(127.5 * (v + 1))`.
    pub fn to_visual_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (127.5 * (v + 1.0)).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

impl_raster!(SignedMap);

/// Unbounded finite real raster (intermediate results such as log differences).
#[derive(Debug, Clone, PartialEq)]
pub struct RealMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RealMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
        Ok(Self { width, height, data })
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(width * height, data.len());
        Self { width, height, data }
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

impl_raster!(RealMap);

/// Interleaved RGB raster, channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

/// ITU-R BT.601 luma, arranged so that gray input maps to itself exactly.
pub fn to_grayscale(rgb: &RgbImage) -> Result<GrayImage> {
    check_len(rgb.width, rgb.height, rgb.data.len())?;
    let data = rgb
        .data
        .iter()
        .map(|&[r, g, b]| g + 0.299 * (r - g) + 0.114 * (b - g))
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    GrayImage::new(rgb.width, rgb.height, data)
}

/// A single event: timestamp in microseconds, pixel position and polarity (±1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: i64,
    pub x: u32,
    pub y: u32,
    pub p: i8,
}

/// Time-ordered events from one sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: usize, height: usize) -> Result<Self> {
        for (index, ev) in events.iter().enumerate() {
            if ev.p != 1 && ev.p != -1 {
                return Err(Error::InvalidPolarity(ev.p));
            }
            if ev.x as usize >= width || ev.y as usize >= height {
                return Err(Error::EventOutOfBounds {
                    index,
                    x: ev.x,
                    y: ev.y,
                    width,
                    height,
                });
            }
        }
        if let Some(w) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::UnsortedTimestamps {
                index: w + 1,
                prev: events[w].t,
                next: events[w + 1].t,
            });
        }
        Ok(Self { events, width, height })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| i64::from(e.p)).sum()
    }
}

/// Reserved label id excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Per-pixel class ids in `0..classes`, or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        check_len(width, height, labels.len())?;
        if classes == 0 || classes >= IGNORE as usize {
            return Err(Error::InvalidParams(format!("class count {classes}")));
        }
        for (index, &label) in labels.iter().enumerate() {
            if label != IGNORE && label as usize >= classes {
                return Err(Error::InvalidLabel { index, label, classes });
            }
        }
        Ok(Self {
            width,
            height,
            classes,
            labels,
        })
    }

    pub fn all_ignored(width: usize, height: usize, classes: usize) -> Result<Self> {
        Self::new(width, height, classes, vec![IGNORE; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }
}

/// Per-pixel class distributions, pixel-major (`probs[pixel * classes + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl ProbMap {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(width: usize, height: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if width * height * classes != probs.len() || classes == 0 {
            return Err(Error::dims(format!(
                "{width}x{height}x{classes} probability map, got {} values",
                probs.len()
            )));
        }
        for (px, row) in probs.chunks_exact(classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > Self::TOLERANCE {
                return Err(Error::InvalidParams(format!("pixel {px} probabilities sum to {sum}")));
            }
        }
        Ok(Self {
            width,
            height,
            classes,
            probs,
        })
    }

    /// Row-wise softmax of pixel-major logits.
    pub fn from_logits(width: usize, height: usize, classes: usize, logits: &[f64]) -> Result<Self> {
        if width * height * classes != logits.len() || classes == 0 {
            return Err(Error::dims("logit raster size"));
        }
        let mut probs = logits.to_vec();
        for row in probs.chunks_exact_mut(classes) {
            softmax_in_place(row);
        }
        Self::new(width, height, classes, probs)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.probs[index * self.classes..(index + 1) * self.classes]
    }

    /// Per-pixel argmax; ties go to the lowest class id. Pixels whose top
    /// probability is below `threshold` become [`IGNORE`].
    pub fn argmax(&self, threshold: f64) -> LabelMask {
        let labels = self
            .probs
            .chunks_exact(self.classes)
            .map(|row| {
                let (best, p) = argmax_lowest(row);
                if p < threshold {
                    IGNORE
                } else {
                    best as u8
                }
            })
            .collect();
        LabelMask {
            width: self.width,
            height: self.height,
            classes: self.classes,
            labels,
        }
    }
}

pub(crate) fn argmax_lowest(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    (best, row[best])
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
