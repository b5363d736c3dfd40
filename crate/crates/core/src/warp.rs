//! Depth-based reprojection of frame-camera rasters into the event camera.
//!
//! Source pixels with valid depth are back-projected, moved by the rigid
//! transform and projected into the target camera, then forward-splatted to
//! the nearest target pixel. A z-buffer keeps the closest surface. Target
//! pixels that receive nothing are reported invalid; nothing is inpainted.

use crate::error::{Error, Result};
use crate::par;
use crate::types::{GrayImage, LabelMask, Raster, IGNORE};

pub const DEFAULT_OUT_WIDTH: usize = 640;
pub const DEFAULT_OUT_HEIGHT: usize = 480;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "intrinsics fx {fx}, fy {fy}, cx {cx}, cy {cy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth]
    }

    /// `None` for points at or behind the camera plane.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] <= 0.0 {
            return None;
        }
        Some((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }
}

/// `p' = R p + t`, with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl RigidTransform {
    const ORTHO_TOL: f64 = 1e-9;

    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let r = rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > Self::ORTHO_TOL {
                    return Err(Error::InvalidParams(format!(
                        "rotation not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > Self::ORTHO_TOL {
            return Err(Error::InvalidParams(format!("rotation determinant {det}")));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Result<Self> {
        Self::new(Self::identity().rotation, t)
    }

    /// From a row-major 3x4 `[R | t]` matrix.
    pub fn from_row_major(m: &[f64; 12]) -> Result<Self> {
        Self::new(
            [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            [m[3], m[7], m[11]],
        )
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation_vec(&self) -> [f64; 3] {
        self.translation
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[j][i];
            }
        }
        let t = self.translation;
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self {
            rotation: rt,
            translation: ti,
        }
    }
}

/// Metric depth per source pixel; `0`, NaN and infinities mark invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if width * height != depth.len() {
            return Err(Error::dims(format!(
                "{width}x{height} depth map with {} values",
                depth.len()
            )));
        }
        if let Some((index, &value)) = depth.iter().enumerate().find(|(_, d)| **d < 0.0) {
            return Err(Error::ValueOutOfRange {
                index,
                value,
                lo: 0.0,
                hi: f64::INFINITY,
            });
        }
        Ok(Self { width, height, depth })
    }

    pub fn constant(width: usize, height: usize, d: f64) -> Result<Self> {
        Self::new(width, height, vec![d; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    #[inline]
    pub fn valid_at(&self, index: usize) -> Option<f64> {
        let d = self.depth[index];
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

/// Source/target camera pair and the output raster size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpGeometry {
    pub src: CameraIntrinsics,
    pub dst: CameraIntrinsics,
    pub transform: RigidTransform,
    pub out_width: usize,
    pub out_height: usize,
}

/// Warped raster plus the per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Warped<T> {
    pub output: T,
    pub valid: Vec<bool>,
}

impl<T> Warped<T> {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// For every target pixel, the source pixel that won the z-test.
pub fn splat_sources(depth: &DepthMap, geo: &WarpGeometry) -> Vec<Option<usize>> {
    let (w, h) = (depth.width, depth.height);
    let (ow, oh) = (geo.out_width, geo.out_height);
    // Projection is independent per row; the z-buffer pass stays sequential so
    // equal-depth collisions resolve in a fixed (row-major) order.
    let landings: Vec<Vec<(usize, usize, f64)>> = par::map_range(h, |v| {
        let mut row = Vec::new();
        for u in 0..w {
            let idx = v * w + u;
            let Some(d) = depth.valid_at(idx) else { continue };
            let p = geo.transform.apply(geo.src.back_project(u as f64, v as f64, d));
            let Some((tu, tv)) = geo.dst.project(p) else { continue };
            let (tu, tv) = (tu.round(), tv.round());
            if tu < 0.0 || tv < 0.0 || tu >= ow as f64 || tv >= oh as f64 {
                continue;
            }
            row.push((idx, tv as usize * ow + tu as usize, p[2]));
        }
        row
    });
    let mut zbuf = vec![f64::INFINITY; ow * oh];
    let mut src = vec![None; ow * oh];
    for (idx, target, z) in landings.into_iter().flatten() {
        if z < zbuf[target] {
            zbuf[target] = z;
            src[target] = Some(idx);
        }
    }
    src
}

fn check_depth<R: Raster>(img: &R, depth: &DepthMap) -> Result<()> {
    if img.width() != depth.width || img.height() != depth.height {
        return Err(Error::dims(format!(
            "raster {}x{} vs depth {}x{}",
            img.width(),
            img.height(),
            depth.width,
            depth.height
        )));
    }
    Ok(())
}

/// Invalid target pixels are set to 0.
pub fn warp_to_event_frame(img: &GrayImage, depth: &DepthMap, geo: &WarpGeometry) -> Result<Warped<GrayImage>> {
    check_depth(img, depth)?;
    let src = splat_sources(depth, geo);
    let data = src.iter().map(|s| s.map_or(0.0, |i| img.data()[i])).collect();
    Ok(Warped {
        output: GrayImage::new(geo.out_width, geo.out_height, data)?,
        valid: src.iter().map(Option::is_some).collect(),
    })
}

/// Nearest-neighbour label transfer; unwritten pixels become [`IGNORE`].
pub fn warp_labels(mask: &LabelMask, depth: &DepthMap, geo: &WarpGeometry) -> Result<Warped<LabelMask>> {
    if mask.width() != depth.width || mask.height() != depth.height {
        return Err(Error::dims(format!(
            "labels {}x{} vs depth {}x{}",
            mask.width(),
            mask.height(),
            depth.width,
            depth.height
        )));
    }
    let src = splat_sources(depth, geo);
    let labels = src.iter().map(|s| s.map_or(IGNORE, |i| mask.labels()[i])).collect();
    Ok(Warped {
        output: LabelMask::new(geo.out_width, geo.out_height, mask.classes(), labels)?,
        valid: src.iter().map(Option::is_some).collect(),
    })
}
