//! Event windows and their dense temporal voxel-grid encoding.

use crate::error::{Error, Result};
use crate::motion::min_max_norm_slice;
use crate::types::{Event, EventStream, SignedMap};

pub const DEFAULT_BINS: usize = 5;
pub const DEFAULT_WINDOW_US: i64 = 50_000;

/// Half-open window `[anchor_ts - duration, anchor_ts)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub anchor_ts: i64,
    pub duration: i64,
}

impl WindowSpec {
    pub fn new(anchor_ts: i64, duration: i64) -> Result<Self> {
        if duration <= 0 {
            return Err(Error::InvalidParams(format!("window duration {duration}")));
        }
        Ok(Self { anchor_ts, duration })
    }

    pub fn before(anchor_ts: i64) -> Self {
        Self {
            anchor_ts,
            duration: DEFAULT_WINDOW_US,
        }
    }
}

pub fn select_window(stream: &EventStream, spec: &WindowSpec) -> EventStream {
    let start = spec.anchor_ts - spec.duration;
    let events = stream.events();
    // Sorted input: binary search both ends.
    let lo = events.partition_point(|e| e.t < start);
    let hi = events.partition_point(|e| e.t < spec.anchor_ts);
    EventStream::new(events[lo..hi.max(lo)].to_vec(), stream.width(), stream.height())
        .expect("sub-slice of a valid stream")
}

/// `bins x height x width` grid, bin-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    bins: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(bins: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if bins == 0 || bins * width * height != data.len() {
            return Err(Error::dims(format!(
                "{bins}x{height}x{width} grid with {} values",
                data.len()
            )));
        }
        Ok(Self {
            bins,
            width,
            height,
            data,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn bin(&self, b: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn at(&self, b: usize, x: usize, y: usize) -> f64 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum over bins, then min-max normalize: the single-channel model input.
    pub fn collapse(&self) -> SignedMap {
        let n = self.width * self.height;
        let mut acc = vec![0.0; n];
        for b in 0..self.bins {
            for (a, v) in acc.iter_mut().zip(&self.data[b * n..(b + 1) * n]) {
                *a += v;
            }
        }
        SignedMap::new(self.width, self.height, min_max_norm_slice(&acc)).expect("normalized to [-1, 1]")
    }
}

pub fn voxelize(stream: &EventStream, bins: usize, width: usize, height: usize) -> Result<VoxelGrid> {
    voxelize_events(stream.events(), bins, width, height)
}

/// Bilinear temporal voxelization. Event order does not matter.
///
/// Deposits are accumulated as integers scaled by the window span, so the
/// result is independent of event order and the grid sums to the polarity
/// total exactly (up to the final division).
pub fn voxelize_events(events: &[Event], bins: usize, width: usize, height: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::InvalidParams("bins must be >= 1".into()));
    }
    let n = width * height;
    for (index, e) in events.iter().enumerate() {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(Error::EventOutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width,
                height,
            });
        }
    }
    let mut acc = vec![0i128; bins * n];
    let (t_min, t_max) = events
        .iter()
        .fold((i64::MAX, i64::MIN), |(lo, hi), e| (lo.min(e.t), hi.max(e.t)));
    let span = if events.is_empty() {
        1
    } else {
        (t_max - t_min).max(0) as i128
    };
    let scale = span.max(1);
    for e in events {
        let pix = e.y as usize * width + e.x as usize;
        let p = i128::from(e.p);
        if span == 0 {
            acc[pix] += p * scale;
            continue;
        }
        // t* = (t - t_min) * (bins - 1) / span = lower + frac / span
        let num = (e.t - t_min) as i128 * (bins as i128 - 1);
        let lower = (num / span) as usize;
        let frac = num % span;
        acc[lower * n + pix] += p * (span - frac);
        if frac != 0 {
            acc[(lower + 1) * n + pix] += p * frac;
        }
    }
    let s = scale as f64;
    let data = acc.into_iter().map(|v| v as f64 / s).collect();
    VoxelGrid::new(bins, width, height, data)
}

/// Min-max scale the whole grid to `[-1, 1]`; a constant grid becomes zeros.
pub fn normalize_voxels(grid: &VoxelGrid) -> VoxelGrid {
    VoxelGrid {
        data: min_max_norm_slice(&grid.data),
        ..grid.clone()
    }
}
