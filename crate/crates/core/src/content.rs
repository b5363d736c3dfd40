//! Content maps: an image differenced against copies of itself shifted by
//! `gamma` pixels horizontally and vertically. Flat regions cancel and only
//! structure survives, independent of the day or night appearance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::motion::{filter, FilterParams};
use crate::types::{GrayImage, Raster, SignedMap};

/// Direction of the horizontal and vertical shifts, each `+1` or `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftSigns {
    pub x: i8,
    pub y: i8,
}

impl ShiftSigns {
    pub fn new(x: i8, y: i8) -> Result<Self> {
        if x.abs() != 1 || y.abs() != 1 {
            return Err(Error::InvalidParams(format!("shift signs ({x}, {y})")));
        }
        Ok(Self { x, y })
    }

    pub fn flipped(self) -> Self {
        Self { x: -self.x, y: -self.y }
    }

    /// Fair coin per axis from the seed.
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = if rng.random::<bool>() { 1 } else { -1 };
        let y = if rng.random::<bool>() { 1 } else { -1 };
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentParams {
    /// Shift magnitude in pixels.
    pub gamma: usize,
    pub filter: FilterParams,
    pub seed: u64,
    /// Overrides the seeded draw when set.
    pub fixed_shift: Option<ShiftSigns>,
}

impl Default for ContentParams {
    fn default() -> Self {
        Self {
            gamma: 1,
            filter: FilterParams::default(),
            seed: 0,
            fixed_shift: None,
        }
    }
}

impl ContentParams {
    pub fn signs(&self) -> ShiftSigns {
        self.fixed_shift.unwrap_or_else(|| ShiftSigns::draw(self.seed))
    }
}

/// Translate by `(dx, dy)`: `out(x, y) = img(x - dx, y - dy)`, with vacated
/// pixels replicated from the nearest valid one.
pub fn shift_image(img: &GrayImage, dx: i64, dy: i64) -> Result<GrayImage> {
    let (w, h) = (img.width(), img.height());
    if dx.unsigned_abs() as usize >= w.max(1) || dy.unsigned_abs() as usize >= h.max(1) {
        return Err(Error::ShiftTooLarge {
            dx,
            dy,
            width: w,
            height: h,
        });
    }
    let src = img.data();
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        for x in 0..w {
            let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
            data.push(src[sy * w + sx]);
        }
    }
    GrayImage::new(w, h, data)
}

/// The two filter terms before averaging, for inspection and testing.
pub fn content_terms(
    img: &GrayImage,
    gamma: usize,
    signs: ShiftSigns,
    params: &FilterParams,
) -> Result<(SignedMap, SignedMap)> {
    if gamma == 0 {
        return Err(Error::InvalidParams("gamma must be >= 1".into()));
    }
    let g = gamma as i64;
    let sx = shift_image(img, i64::from(signs.x) * g, 0)?;
    let sy = shift_image(img, 0, i64::from(signs.y) * g)?;
    Ok((filter(img, &sx, params)?, filter(img, &sy, params)?))
}

pub fn extract_content_with_signs(
    img: &GrayImage,
    gamma: usize,
    signs: ShiftSigns,
    params: &FilterParams,
) -> Result<SignedMap> {
    let (tx, ty) = content_terms(img, gamma, signs, params)?;
    let data = tx
        .data()
        .iter()
        .zip(ty.data())
        .map(|(a, b)| 0.5 * a + 0.5 * b)
        .collect();
    SignedMap::new(img.width(), img.height(), data)
}

pub fn extract_content(img: &GrayImage, params: &ContentParams) -> Result<SignedMap> {
    extract_content_with_signs(img, params.gamma, params.signs(), &params.filter)
}
