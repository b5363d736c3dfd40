//! File formats, dataset manifests and run configuration.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::content::{extract_content, ContentParams};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::motion::{extract_motion, night_style_hook, FilterParams, IdentityHook, SaltPepperHook, StyleHook};
use crate::trainer::{EvalSample, Modalities, SourceSample, TargetSample, TrainConfig};
use crate::types::{Event, EventStream, GrayImage, LabelMask, Raster, SignedMap, IGNORE};
use crate::voxel::{select_window, voxelize, VoxelGrid, WindowSpec, DEFAULT_BINS};
use crate::warp::{CameraIntrinsics, DepthMap, RigidTransform, WarpGeometry, DEFAULT_OUT_HEIGHT, DEFAULT_OUT_WIDTH};

pub const FORMAT_VERSION: u16 = 1;
const SIGNED_MAGIC: &[u8; 4] = b"CMDA";
const DEPTH_MAGIC: &[u8; 4] = b"CMDD";
const VOXEL_MAGIC: &[u8; 4] = b"CMDV";
const EVENTS_MAGIC: &[u8; 4] = b"CMDE";

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn expect_header(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("not a {what} file")));
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{what} file version {version}")));
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut b = [0u8; 1];
    if r.read(&mut b)? != 0 {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(BufReader::new(File::open(path)?))
}

/// `CMDA`, version, width, height, then 32-bit reals row-major.
pub fn write_signed_map<W: Write>(map: &SignedMap, mut w: W) -> Result<()> {
    w.write_all(SIGNED_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(map.width() as u32).to_le_bytes())?;
    w.write_all(&(map.height() as u32).to_le_bytes())?;
    write_f32s(&mut w, map.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_signed_map<R: Read>(mut r: R) -> Result<SignedMap> {
    expect_header(&mut r, SIGNED_MAGIC, "signed map")?;
    let w = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let data = read_f32s(&mut r, w * h)?;
    expect_eof(&mut r)?;
    SignedMap::new(w, h, data)
}

pub fn save_signed_map(map: &SignedMap, path: &Path) -> Result<()> {
    write_signed_map(map, create(path)?)
}

pub fn load_signed_map(path: &Path) -> Result<SignedMap> {
    read_signed_map(open(path)?)
}

/// `CMDD` depth raster of 64-bit reals; zero and non-finite values mark
/// missing depth.
pub fn write_depth_map<W: Write>(depth: &DepthMap, mut w: W) -> Result<()> {
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(depth.width() as u32).to_le_bytes())?;
    w.write_all(&(depth.height() as u32).to_le_bytes())?;
    write_f64s(&mut w, depth.depth())?;
    w.flush()?;
    Ok(())
}

pub fn read_depth_map<R: Read>(mut r: R) -> Result<DepthMap> {
    expect_header(&mut r, DEPTH_MAGIC, "depth")?;
    let w = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let data = read_f64s(&mut r, w * h)?;
    expect_eof(&mut r)?;
    DepthMap::new(w, h, data)
}

pub fn load_depth_map(path: &Path) -> Result<DepthMap> {
    read_depth_map(open(path)?)
}

/// `CMDV`, version, bins, width, height, then 64-bit reals bin-major.
pub fn write_voxel_grid<W: Write>(grid: &VoxelGrid, mut w: W) -> Result<()> {
    w.write_all(VOXEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [grid.bins(), grid.width(), grid.height()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    write_f64s(&mut w, grid.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_voxel_grid<R: Read>(mut r: R) -> Result<VoxelGrid> {
    expect_header(&mut r, VOXEL_MAGIC, "voxel grid")?;
    let b = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let data = read_f64s(&mut r, b * w * h)?;
    expect_eof(&mut r)?;
    VoxelGrid::new(b, w, h, data)
}

/// 8-bit PNG or PGM, scaled to `[0, 1]`.
pub fn load_gray_image(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    GrayImage::from_u8(w as usize, h as usize, img.as_raw())
}

fn save_luma(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::dims("raster buffer size"))?;
    buf.save(path)?;
    Ok(())
}

/// Format follows the extension (`.png` or `.pgm`).
pub fn save_gray_image(img: &GrayImage, path: &Path) -> Result<()> {
    save_luma(path, img.width(), img.height(), img.to_u8())
}

/// `round(127.5 (v + 1))` per pixel.
pub fn save_signed_map_visual(map: &SignedMap, path: &Path) -> Result<()> {
    save_luma(path, map.width(), map.height(), map.to_visual_u8())
}

/// Label ids stored directly as 8-bit gray; 255 is IGNORE.
pub fn load_label_mask(path: &Path, classes: usize) -> Result<LabelMask> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    LabelMask::new(w as usize, h as usize, classes, img.into_raw())
}

pub fn save_label_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    save_luma(path, mask.width(), mask.height(), mask.labels().to_vec())
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    params.write_checkpoint(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    ModelParams::read_checkpoint(open(path)?)
}

/// CSV `t_us,x,y,p` (p in {0, 1}) or the binary `CMDE` record stream,
/// detected by the magic bytes.
pub fn load_events(path: &Path, width: usize, height: usize) -> Result<EventStream> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(EVENTS_MAGIC) {
        return read_events_binary(&bytes[..], width, height);
    }
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, 0, "not UTF-8 text"))?;
    parse_events_csv(&text, path, width, height)
}

pub fn parse_events_csv(text: &str, path: &Path, width: usize, height: usize) -> Result<EventStream> {
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("t_us")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<i64> {
            s.parse::<i64>()
                .map_err(|_| parse_err(path, i + 1, format!("bad {what} {s:?}")))
        };
        let t = num(fields[0], "timestamp")?;
        let x = num(fields[1], "x")?;
        let y = num(fields[2], "y")?;
        let p = match fields[3] {
            "1" => 1,
            "0" => -1,
            other => return Err(parse_err(path, i + 1, format!("polarity {other:?} not 0 or 1"))),
        };
        let coord = |v: i64, what: &str| {
            u32::try_from(v).map_err(|_| parse_err(path, i + 1, format!("{what} {v} out of range")))
        };
        events.push(Event {
            t,
            x: coord(x, "x")?,
            y: coord(y, "y")?,
            p,
        });
    }
    EventStream::new(events, width, height)
}

pub fn write_events_csv<W: Write>(stream: &EventStream, mut w: W) -> Result<()> {
    writeln!(w, "t_us,x,y,p")?;
    for e in stream.events() {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, u8::from(e.p > 0))?;
    }
    w.flush()?;
    Ok(())
}

/// `CMDE`, version, count u64, then per event: t i64, x u32, y u32, p i8.
pub fn write_events_binary<W: Write>(stream: &EventStream, mut w: W) -> Result<()> {
    w.write_all(EVENTS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(stream.len() as u64).to_le_bytes())?;
    for e in stream.events() {
        w.write_all(&e.t.to_le_bytes())?;
        w.write_all(&e.x.to_le_bytes())?;
        w.write_all(&e.y.to_le_bytes())?;
        w.write_all(&e.p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events_binary<R: Read>(mut r: R, width: usize, height: usize) -> Result<EventStream> {
    expect_header(&mut r, EVENTS_MAGIC, "event")?;
    let n = read_u64(&mut r)? as usize;
    let mut events = Vec::with_capacity(n.min(1 << 24));
    let mut rec = [0u8; 17];
    for _ in 0..n {
        r.read_exact(&mut rec)?;
        events.push(Event {
            t: i64::from_le_bytes(rec[0..8].try_into().unwrap()),
            x: u32::from_le_bytes(rec[8..12].try_into().unwrap()),
            y: u32::from_le_bytes(rec[12..16].try_into().unwrap()),
            p: rec[16] as i8,
        });
    }
    expect_eof(&mut r)?;
    EventStream::new(events, width, height)
}

/// Plain-text `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, i + 1, "expected key=value"))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Camera intrinsics for both views plus the rigid transform between them.
///
/// Keys: `src.fx src.fy src.cx src.cy dst.fx dst.fy dst.cx dst.cy`, `T` with
/// twelve numbers (row-major `R|t`), and optional `out_width`/`out_height`.
pub fn parse_calibration(text: &str, path: &Path) -> Result<WarpGeometry> {
    let mut map = BTreeMap::new();
    for (line, k, v) in parse_key_values(text, path)? {
        if map.insert(k.clone(), (line, v)).is_some() {
            return Err(parse_err(path, line, format!("duplicate key {k}")));
        }
    }
    type Fields = BTreeMap<String, (usize, String)>;
    let take = |map: &mut Fields, key: &str| -> Result<Option<f64>> {
        map.remove(key)
            .map(|(line, v)| {
                v.parse()
                    .map_err(|_| parse_err(path, line, format!("{key}: bad number {v:?}")))
            })
            .transpose()
    };
    let mut get = |key: &str| -> Result<f64> {
        take(&mut map, key)?.ok_or_else(|| parse_err(path, 0, format!("missing key {key}")))
    };
    let src = CameraIntrinsics::new(get("src.fx")?, get("src.fy")?, get("src.cx")?, get("src.cy")?)?;
    let dst = CameraIntrinsics::new(get("dst.fx")?, get("dst.fy")?, get("dst.cx")?, get("dst.cy")?)?;
    let out_width = take(&mut map, "out_width")?.map_or(DEFAULT_OUT_WIDTH, |v| v as usize);
    let out_height = take(&mut map, "out_height")?.map_or(DEFAULT_OUT_HEIGHT, |v| v as usize);
    let (line, t) = map.remove("T").ok_or_else(|| parse_err(path, 0, "missing key T"))?;
    let nums = t
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| parse_err(path, line, "T: bad number"))?;
    let m: [f64; 12] = nums
        .try_into()
        .map_err(|v: Vec<f64>| parse_err(path, line, format!("T needs 12 numbers, got {}", v.len())))?;
    if let Some((k, (line, _))) = map.into_iter().next() {
        return Err(parse_err(path, line, format!("unknown key {k}")));
    }
    Ok(WarpGeometry {
        src,
        dst,
        transform: RigidTransform::from_row_major(&m)?,
        out_width,
        out_height,
    })
}

pub fn load_calibration(path: &Path) -> Result<WarpGeometry> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    parse_calibration(&text, path)
}

/// Training run configuration: everything in [`TrainConfig`] plus the
/// extractor parameters used to build samples from files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub filter: FilterParams,
    pub gamma: usize,
    /// Salt-and-pepper density for pseudo-events; 0 keeps them unchanged.
    pub style_noise: f64,
    pub bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            filter: FilterParams::default(),
            gamma: 1,
            style_noise: 0.0,
            bins: DEFAULT_BINS,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "iterations",
        "batch_size",
        "lambda_image",
        "lambda_events",
        "lambda_content",
        "lambda_fusion",
        "sigma",
        "lr",
        "seed",
        "pseudo_label_conf_threshold",
        "use_events",
        "use_content",
        "self_training",
        "eval_interval",
        "patch",
        "features",
        "attention",
        "classes",
        "alpha",
        "beta",
        "epsilon",
        "gamma",
        "style_noise",
        "bins",
    ];

    /// Sets one field by its config key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: bad value {v:?}"))
        }
        let t = &mut self.train;
        match key {
            "iterations" => t.iterations = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lambda_image" => t.weights.image = num(key, value)?,
            "lambda_events" => t.weights.events = num(key, value)?,
            "lambda_content" => t.weights.content = num(key, value)?,
            "lambda_fusion" => t.weights.fusion = num(key, value)?,
            "sigma" => t.sigma = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "pseudo_label_conf_threshold" => t.pseudo_label_conf_threshold = num(key, value)?,
            "use_events" | "use_content" | "self_training" => {
                let b = parse_bool(value).ok_or_else(|| format!("{key}: expected true or false"))?;
                match key {
                    "use_events" => t.modalities.events = b,
                    "use_content" => t.modalities.content = b,
                    _ => t.self_training = b,
                }
            }
            "eval_interval" => t.eval_interval = num(key, value)?,
            "patch" => t.model.patch = num(key, value)?,
            "features" => t.model.features = num(key, value)?,
            "attention" => t.model.attention = num(key, value)?,
            "classes" => t.model.classes = num(key, value)?,
            "alpha" => self.filter.alpha = num(key, value)?,
            "beta" => self.filter.beta = num(key, value)?,
            "epsilon" => self.filter.epsilon = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "style_noise" => self.style_noise = num(key, value)?,
            "bins" => self.bins = num(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_key_values(text, path)? {
            cfg.set(&k, &v).map_err(|msg| parse_err(path, line, msg))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.filter.validate()?;
        if self.gamma == 0 {
            return Err(Error::InvalidParams("gamma must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.style_noise) {
            return Err(Error::InvalidParams(format!("style_noise {}", self.style_noise)));
        }
        if self.bins == 0 {
            return Err(Error::InvalidParams("bins must be >= 1".into()));
        }
        Ok(())
    }

    /// Every key, one per line, in the order of [`Self::KEYS`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let values: [String; 24] = [
            t.iterations.to_string(),
            t.batch_size.to_string(),
            t.weights.image.to_string(),
            t.weights.events.to_string(),
            t.weights.content.to_string(),
            t.weights.fusion.to_string(),
            t.sigma.to_string(),
            t.lr.to_string(),
            t.seed.to_string(),
            t.pseudo_label_conf_threshold.to_string(),
            t.modalities.events.to_string(),
            t.modalities.content.to_string(),
            t.self_training.to_string(),
            t.eval_interval.to_string(),
            t.model.patch.to_string(),
            t.model.features.to_string(),
            t.model.attention.to_string(),
            t.model.classes.to_string(),
            self.filter.alpha.to_string(),
            self.filter.beta.to_string(),
            self.filter.epsilon.to_string(),
            self.gamma.to_string(),
            self.style_noise.to_string(),
            self.bins.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn modalities(&self) -> Modalities {
        self.train.modalities
    }

    pub fn model(&self) -> ModelConfig {
        self.train.model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestKind {
    /// Needs `image`, `prev_image`, `labels`.
    Source,
    /// Needs `image` and one of `events`/`event_map`.
    Target,
    /// Target fields plus `labels`.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub prev_image: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Raw event file (CSV or binary).
    pub events: Option<PathBuf>,
    /// Precomputed event map (`CMDA`).
    pub event_map: Option<PathBuf>,
    /// End of the event window; defaults to just after the last event.
    pub anchor_ts: Option<i64>,
}

/// One record per line as whitespace-separated `key=value` tokens. Relative
/// paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub kind: ManifestKind,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, path: &Path, kind: ManifestKind) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut ids = HashSet::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let mut fields = BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| parse_err(path, lineno, format!("token {tok:?} is not key=value")))?;
                if fields.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(parse_err(path, lineno, format!("duplicate key {k}")));
                }
            }
            let mut take_path = |k: &str| fields.remove(k).map(|v| base.join(v));
            let image = take_path("image");
            let prev_image = take_path("prev_image");
            let labels = take_path("labels");
            let events = take_path("events");
            let event_map = take_path("event_map");
            let id = fields
                .remove("id")
                .ok_or_else(|| parse_err(path, lineno, "missing id"))?;
            let anchor_ts = fields
                .remove("anchor_ts")
                .map(|v| {
                    v.parse::<i64>()
                        .map_err(|_| parse_err(path, lineno, format!("bad anchor_ts {v:?}")))
                })
                .transpose()?;
            if let Some(k) = fields.keys().next() {
                return Err(parse_err(path, lineno, format!("unknown key {k}")));
            }
            if !ids.insert(id.clone()) {
                return Err(parse_err(path, lineno, format!("duplicate id {id}")));
            }
            let image = image.ok_or_else(|| parse_err(path, lineno, "missing image"))?;
            let need = |p: &Option<PathBuf>, k: &str| {
                if p.is_none() {
                    Err(parse_err(path, lineno, format!("missing {k}")))
                } else {
                    Ok(())
                }
            };
            match kind {
                ManifestKind::Source => {
                    need(&prev_image, "prev_image")?;
                    need(&labels, "labels")?;
                }
                ManifestKind::Target | ManifestKind::Eval => {
                    if events.is_none() && event_map.is_none() {
                        return Err(parse_err(path, lineno, "missing events or event_map"));
                    }
                    if kind == ManifestKind::Eval {
                        need(&labels, "labels")?;
                    }
                }
            }
            let entry = ManifestEntry {
                id,
                image,
                prev_image,
                labels,
                events,
                event_map,
                anchor_ts,
            };
            for p in entry.paths() {
                if !p.exists() {
                    return Err(Error::MissingFile(p.to_path_buf()));
                }
            }
            entries.push(entry);
        }
        Ok(Self { kind, entries })
    }

    pub fn load(path: &Path, kind: ManifestKind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        Self::parse(&text, path, kind)
    }

    /// Writes paths relative to `base` when possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("id={} image={}", e.id, rel(&e.image)));
            for (k, p) in [
                ("prev_image", &e.prev_image),
                ("labels", &e.labels),
                ("events", &e.events),
                ("event_map", &e.event_map),
            ] {
                if let Some(p) = p {
                    out.push_str(&format!(" {k}={}", rel(p)));
                }
            }
            if let Some(t) = e.anchor_ts {
                out.push_str(&format!(" anchor_ts={t}"));
            }
            out.push('\n');
        }
        out
    }
}

impl ManifestEntry {
    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        std::iter::once(self.image.as_path()).chain(
            [&self.prev_image, &self.labels, &self.events, &self.event_map]
                .into_iter()
                .filter_map(|p| p.as_deref()),
        )
    }
}

/// Content-map seed for the `index`-th sample of a split.
pub fn sample_seed(base: u64, split: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (split << 48) ^ index as u64
}

fn content_map(img: &GrayImage, cfg: &RunConfig, seed: u64) -> Result<SignedMap> {
    extract_content(
        img,
        &ContentParams {
            gamma: cfg.gamma,
            filter: cfg.filter,
            seed,
            fixed_shift: None,
        },
    )
}

fn event_map(entry: &ManifestEntry, img: &GrayImage, cfg: &RunConfig) -> Result<SignedMap> {
    let map = if let Some(p) = &entry.event_map {
        load_signed_map(p)?
    } else {
        let p = entry.events.as_ref().expect("checked at manifest load");
        let stream = load_events(p, img.width(), img.height())?;
        let anchor = entry
            .anchor_ts
            .unwrap_or_else(|| stream.events().last().map_or(0, |e| e.t + 1));
        let window = select_window(&stream, &WindowSpec::before(anchor));
        voxelize(&window, cfg.bins, img.width(), img.height())?.collapse()
    };
    if map.width() != img.width() || map.height() != img.height() {
        return Err(Error::dims(format!(
            "event map for sample {} differs from its image",
            entry.id
        )));
    }
    Ok(map)
}

pub fn load_source_samples(m: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<SourceSample>> {
    let classes = cfg.train.model.classes;
    let hook: Box<dyn StyleHook> = if cfg.style_noise > 0.0 {
        Box::new(SaltPepperHook {
            density: cfg.style_noise,
            seed: cfg.train.seed,
        })
    } else {
        Box::new(IdentityHook)
    };
    let parts = crate::par::map_slice(&m.entries, |e| -> Result<SourceSample> {
        let image = load_gray_image(&e.image)?;
        let prev = load_gray_image(e.prev_image.as_ref().expect("checked at manifest load"))?;
        let labels = load_label_mask(e.labels.as_ref().expect("checked at manifest load"), classes)?;
        if labels.width() != image.width() || labels.height() != image.height() {
            return Err(Error::dims(format!("labels for sample {} differ from its image", e.id)));
        }
        let e_me = extract_motion(&prev, &image, &cfg.filter)?;
        Ok(SourceSample {
            pseudo_events: night_style_hook(&e_me, hook.as_ref()),
            content: SignedMap::zeros(0, 0),
            image,
            labels,
        })
    });
    parts
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s?;
            s.content = content_map(&s.image, cfg, sample_seed(cfg.train.seed, 1, i))?;
            Ok(s)
        })
        .collect()
}

pub fn load_target_samples(m: &DatasetManifest, cfg: &RunConfig, split: u64) -> Result<Vec<TargetSample>> {
    let parts = crate::par::map_slice(&m.entries, |e| -> Result<TargetSample> {
        let image = load_gray_image(&e.image)?;
        let events = event_map(e, &image, cfg)?;
        Ok(TargetSample {
            events,
            content: SignedMap::zeros(0, 0),
            image,
        })
    });
    parts
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut s = s?;
            s.content = content_map(&s.image, cfg, sample_seed(cfg.train.seed, split, i))?;
            Ok(s)
        })
        .collect()
}

pub fn load_eval_samples(m: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<EvalSample>> {
    let samples = load_target_samples(m, cfg, 3)?;
    m.entries
        .iter()
        .zip(samples)
        .map(|(e, sample)| {
            let labels = load_label_mask(
                e.labels.as_ref().expect("checked at manifest load"),
                cfg.train.model.classes,
            )?;
            if labels.width() != sample.image.width() || labels.height() != sample.image.height() {
                return Err(Error::dims(format!("labels for sample {} differ from its image", e.id)));
            }
            Ok(EvalSample { sample, labels })
        })
        .collect()
}

/// Label masks in a directory keyed by file stem (`.png`/`.pgm`), sorted.
pub fn list_label_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        if p.is_file() && matches!(ext, "png" | "pgm") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes a generated scenario as image files, event maps and manifests.
pub fn write_scenario(s: &crate::synthetic::Scenario, dir: &Path) -> Result<()> {
    for sub in ["source", "target", "eval"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut src = String::new();
    for (i, pair) in s.source_frames.iter().enumerate() {
        let id = format!("s{i:05}");
        save_gray_image(&pair.prev, &dir.join(format!("source/{id}_prev.png")))?;
        save_gray_image(&pair.curr, &dir.join(format!("source/{id}.png")))?;
        save_label_mask(&pair.labels, &dir.join(format!("source/{id}_labels.png")))?;
        src.push_str(&format!(
            "id={id} image=source/{id}.png prev_image=source/{id}_prev.png labels=source/{id}_labels.png\n"
        ));
    }
    fs::write(dir.join("source.manifest"), src)?;

    let mut tgt = String::new();
    for (i, t) in s.target.iter().enumerate() {
        let id = format!("t{i:05}");
        save_gray_image(&t.image, &dir.join(format!("target/{id}.png")))?;
        save_signed_map(&t.events, &dir.join(format!("target/{id}_events.cmda")))?;
        tgt.push_str(&format!(
            "id={id} image=target/{id}.png event_map=target/{id}_events.cmda\n"
        ));
    }
    fs::write(dir.join("target.manifest"), tgt)?;

    fs::create_dir_all(dir.join("eval/labels"))?;
    let mut ev = String::new();
    for (i, e) in s.eval.iter().enumerate() {
        let id = format!("e{i:05}");
        save_gray_image(&e.sample.image, &dir.join(format!("eval/{id}.png")))?;
        save_signed_map(&e.sample.events, &dir.join(format!("eval/{id}_events.cmda")))?;
        save_label_mask(&e.labels, &dir.join(format!("eval/labels/{id}.png")))?;
        ev.push_str(&format!(
            "id={id} image=eval/{id}.png labels=eval/labels/{id}.png event_map=eval/{id}_events.cmda\n"
        ));
    }
    fs::write(dir.join("eval.manifest"), ev)?;
    Ok(())
}

/// Checks that a label file's values fit the class count.
pub fn label_range_ok(mask: &[u8], classes: usize) -> bool {
    mask.iter().all(|&l| l == IGNORE || (l as usize) < classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_single_event() {
        let s = parse_events_csv("1000,5,7,1\n", Path::new("e.csv"), 10, 10).unwrap();
        assert_eq!(
            s.events(),
            &[Event {
                t: 1000,
                x: 5,
                y: 7,
                p: 1
            }]
        );
        assert!(parse_events_csv("", Path::new("e.csv"), 10, 10).unwrap().is_empty());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = parse_events_csv("t_us,x,y,p\n1,0,0,1\n2,0,0,7\n", Path::new("e.csv"), 4, 4).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_events_csv("5,0,0,1\n4,0,0,0\n", Path::new("e.csv"), 4, 4).unwrap_err();
        assert!(matches!(err, Error::UnsortedTimestamps { .. }));
    }

    #[test]
    fn signed_map_round_trip() {
        let m = SignedMap::new(3, 1, vec![-1.0, 0.25, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_signed_map(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CMDA");
        assert_eq!(buf.len(), 4 + 2 + 8 + 12);
        assert_eq!(read_signed_map(&buf[..]).unwrap(), m);
        buf.push(0);
        assert!(read_signed_map(&buf[..]).is_err());
    }

    #[test]
    fn config_keys_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("sigma", "0.99").unwrap();
        cfg.set("use_content", "false").unwrap();
        cfg.set("beta", "0.01").unwrap();
        let text = cfg.to_text();
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        assert_eq!(RunConfig::parse(&text, Path::new("c")).unwrap(), cfg);
        assert!(cfg.set("nope", "1").is_err());
        assert!(RunConfig::parse("sigma=2\n", Path::new("c")).is_err());
    }

    #[test]
    fn calibration_parse() {
        let text = "src.fx=100\nsrc.fy=100\nsrc.cx=2\nsrc.cy=2\n\
                    dst.fx=100\ndst.fy=100\ndst.cx=2\ndst.cy=2\n\
                    T=1 0 0 0.1 0 1 0 0 0 0 1 0\nout_width=5\nout_height=5\n";
        let g = parse_calibration(text, Path::new("calib")).unwrap();
        assert_eq!((g.out_width, g.out_height), (5, 5));
        assert_eq!(g.transform.translation_vec(), [0.1, 0.0, 0.0]);
        assert!(parse_calibration("src.fx=1\n", Path::new("calib")).is_err());
    }
}
