//! Procedural day/night scenes for end-to-end checks.
//!
//! Every scene is a flat background with overlapping shapes. Each class has
//! its own intensity and horizontal shading gradient, and frame pairs differ
//! by a small horizontal pan. Source frames are day renders at a random
//! exposure; target frames are the same kind of scene pushed through a
//! gamma crush, sensor noise and 8-bit quantization, while the target event
//! map is computed from the clean frames, so it keeps the contrast the night
//! image loses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::content::{extract_content, ContentParams};
use crate::error::{Error, Result};
use crate::io::sample_seed;
use crate::motion::{extract_motion, night_style_hook, FilterParams, StyleHook};
use crate::trainer::{EvalSample, SourceSample, TargetSample};
use crate::types::{GrayImage, LabelMask, Raster};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassLook {
    /// Intensity at the shape's center column.
    pub intensity: f64,
    /// Horizontal log-intensity gradient, per pixel.
    pub slope: f64,
    /// Half-range of the per-pixel log-intensity texture.
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    /// Class 0 is the background.
    pub looks: Vec<ClassLook>,
    /// Extra shapes beyond one per foreground class.
    pub extra_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Largest horizontal pan between consecutive frames, in pixels.
    pub max_shift: i64,
    /// Per-frame exposure range for day renders, applied as a global gain.
    pub day_gain: (f64, f64),
    pub night_gain: f64,
    pub night_gamma: f64,
    /// Standard deviation of additive sensor noise, in intensity units.
    pub night_noise: f64,
    pub filter: FilterParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            looks: vec![
                ClassLook {
                    intensity: 0.55,
                    slope: 0.0,
                    texture: 0.0,
                },
                ClassLook {
                    intensity: 0.8,
                    slope: 0.015,
                    texture: 0.0,
                },
                ClassLook {
                    intensity: 0.4,
                    slope: -0.015,
                    texture: 0.0,
                },
                ClassLook {
                    intensity: 0.65,
                    slope: 0.045,
                    texture: 0.0,
                },
            ],
            extra_shapes: 2,
            min_size: 7,
            max_size: 14,
            max_shift: 3,
            day_gain: (0.3, 1.0),
            night_gain: 0.6,
            night_gamma: 1.5,
            night_noise: 0.01,
            filter: FilterParams::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn classes(&self) -> usize {
        self.looks.len()
    }

    fn validate(&self) -> Result<()> {
        if self.looks.len() < 2 || self.looks.len() > 254 {
            return Err(Error::InvalidParams(format!("{} classes", self.looks.len())));
        }
        if self.width == 0 || self.height == 0 || self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::InvalidParams("scene geometry".into()));
        }
        if self.max_shift < 1 || self.max_shift as usize >= self.width {
            return Err(Error::InvalidParams("max_shift must be >= 1".into()));
        }
        Ok(())
    }
}

/// A labeled frame pair before any modality extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub prev: GrayImage,
    pub curr: GrayImage,
    /// Labels of `curr`.
    pub labels: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub classes: usize,
    pub source_frames: Vec<FramePair>,
    pub source: Vec<SourceSample>,
    /// Clean target frames (the night image is in `target`).
    pub target_frames: Vec<FramePair>,
    pub target: Vec<TargetSample>,
    /// Held-out labeled target samples.
    pub eval: Vec<EvalSample>,
}

struct Shape {
    class: u8,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    ellipse: bool,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        if self.ellipse {
            u * u + v * v <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a scene on a canvas padded by `pad` on every side, then crops two
/// frames offset by the motion `(dx, dy)`.
fn render_pair<R: Rng>(cfg: &ScenarioConfig, rng: &mut R, gain: f64) -> Result<FramePair> {
    let pad = cfg.max_shift as usize;
    let (cw, ch) = (cfg.width + 2 * pad, cfg.height + 2 * pad);
    let classes = cfg.classes();

    let mut fg: Vec<u8> = (1..classes as u8).collect();
    for _ in 0..cfg.extra_shapes {
        fg.push(rng.random_range(1..classes as u8));
    }
    let shapes: Vec<Shape> = fg
        .into_iter()
        .map(|class| {
            let sx = rng.random_range(cfg.min_size..=cfg.max_size) as f64 / 2.0;
            let sy = rng.random_range(cfg.min_size..=cfg.max_size) as f64 / 2.0;
            Shape {
                class,
                cx: rng.random_range(0.0..cfg.width as f64) + pad as f64,
                cy: rng.random_range(0.0..cfg.height as f64) + pad as f64,
                rx: sx,
                ry: sy,
                ellipse: rng.random::<bool>(),
            }
        })
        .collect();

    let mut canvas = vec![0.0; cw * ch];
    let mut labels = vec![0u8; cw * ch];
    for y in 0..ch {
        for x in 0..cw {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            // Later shapes are drawn on top.
            let hit = shapes.iter().rev().find(|s| s.contains(px, py));
            let (class, cx) = hit.map_or((0, cw as f64 / 2.0), |s| (s.class, s.cx));
            let look = cfg.looks[class as usize];
            let tex = if look.texture > 0.0 {
                rng.random_range(-look.texture..=look.texture)
            } else {
                0.0
            };
            let log_i = look.slope * (px - cx) + tex;
            canvas[y * cw + x] = quantize(gain * look.intensity * log_i.exp());
            labels[y * cw + x] = class;
        }
    }

    // Horizontal pan, as from a camera turning at a steady rate.
    let dx = rng.random_range(1..=cfg.max_shift);
    let dy = 0;
    let crop = |ox: i64, oy: i64| -> (Vec<f64>, Vec<u8>) {
        let mut img = Vec::with_capacity(cfg.width * cfg.height);
        let mut lab = Vec::with_capacity(cfg.width * cfg.height);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let i = (y as i64 + oy) as usize * cw + (x as i64 + ox) as usize;
                img.push(canvas[i]);
                lab.push(labels[i]);
            }
        }
        (img, lab)
    };
    let p = pad as i64;
    let (prev, _) = crop(p, p);
    let (curr, curr_labels) = crop(p + dx, p + dy);
    Ok(FramePair {
        prev: GrayImage::new(cfg.width, cfg.height, prev)?,
        curr: GrayImage::new(cfg.width, cfg.height, curr)?,
        labels: LabelMask::new(cfg.width, cfg.height, classes, curr_labels)?,
    })
}

/// Dark, noisy, 8-bit camera response.
pub fn night_render<R: Rng>(img: &GrayImage, cfg: &ScenarioConfig, rng: &mut R) -> Result<GrayImage> {
    let data = img
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            quantize(cfg.night_gain * v.powf(cfg.night_gamma) + cfg.night_noise * n)
        })
        .collect();
    GrayImage::new(img.width(), img.height(), data)
}

pub fn source_sample(
    pair: &FramePair,
    filter: &FilterParams,
    content_seed: u64,
    hook: &dyn StyleHook,
) -> Result<SourceSample> {
    let e_me = extract_motion(&pair.prev, &pair.curr, filter)?;
    let content = extract_content(
        &pair.curr,
        &ContentParams {
            filter: *filter,
            seed: content_seed,
            ..Default::default()
        },
    )?;
    Ok(SourceSample {
        image: pair.curr.clone(),
        pseudo_events: night_style_hook(&e_me, hook),
        content,
        labels: pair.labels.clone(),
    })
}

fn target_sample<R: Rng>(
    pair: &FramePair,
    cfg: &ScenarioConfig,
    content_seed: u64,
    rng: &mut R,
) -> Result<TargetSample> {
    let night = night_render(&pair.curr, cfg, rng)?;
    let events = extract_motion(&pair.prev, &pair.curr, &cfg.filter)?;
    let content = extract_content(
        &night,
        &ContentParams {
            filter: cfg.filter,
            seed: content_seed,
            ..Default::default()
        },
    )?;
    Ok(TargetSample {
        image: night,
        events,
        content,
    })
}

/// Scenario with the default configuration and the identity style hook. The
/// held-out evaluation split has a quarter as many samples as the target
/// split (at least one).
pub fn make_synthetic_scenario(seed: u64, n_source: usize, n_target: usize) -> Result<Scenario> {
    let n_eval = (n_target / 4).max(1);
    generate(
        &ScenarioConfig::default(),
        seed,
        n_source,
        n_target,
        n_eval,
        &crate::motion::IdentityHook,
    )
}

/// Source, target and held-out evaluation splits use independent RNG streams.
pub fn generate(
    cfg: &ScenarioConfig,
    seed: u64,
    n_source: usize,
    n_target: usize,
    n_eval: usize,
    hook: &dyn StyleHook,
) -> Result<Scenario> {
    cfg.validate()?;
    let mut src_rng = ChaCha8Rng::seed_from_u64(seed);
    src_rng.set_stream(1);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(seed);
    tgt_rng.set_stream(2);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(3);

    let source_frames = (0..n_source)
        .map(|_| {
            let (lo, hi) = cfg.day_gain;
            let gain = if hi > lo { src_rng.random_range(lo..=hi) } else { hi };
            render_pair(cfg, &mut src_rng, gain)
        })
        .collect::<Result<Vec<_>>>()?;
    let source = source_frames
        .iter()
        .enumerate()
        .map(|(i, p)| source_sample(p, &cfg.filter, sample_seed(seed, 1, i), hook))
        .collect::<Result<Vec<_>>>()?;

    let mut target_frames = Vec::with_capacity(n_target);
    let mut target = Vec::with_capacity(n_target);
    for i in 0..n_target {
        let pair = render_pair(cfg, &mut tgt_rng, 1.0)?;
        target.push(target_sample(&pair, cfg, sample_seed(seed, 2, i), &mut tgt_rng)?);
        target_frames.push(pair);
    }

    let mut eval = Vec::with_capacity(n_eval);
    for i in 0..n_eval {
        let pair = render_pair(cfg, &mut eval_rng, 1.0)?;
        let sample = target_sample(&pair, cfg, sample_seed(seed, 3, i), &mut eval_rng)?;
        eval.push(EvalSample {
            sample,
            labels: pair.labels,
        });
    }

    Ok(Scenario {
        classes: cfg.classes(),
        source_frames,
        source,
        target_frames,
        target,
        eval,
    })
}
