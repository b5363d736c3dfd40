//! Reference per-pixel segmenter with exact analytic gradients.
//!
//! Two encoders map a replicate-padded `k x k` patch around each pixel to a
//! `tanh` feature vector: one for the image, one shared by events and content
//! maps. A two-token attention gate mixes the image and auxiliary features,
//! and a single linear decoder produces logits for the image, auxiliary and
//! fused heads.
//!
//! Parameters live in one flat `Vec<f64>` laid out as
//! `[W_img, b_img, W_evt, b_evt, Q, K, V, c]`, all row-major.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::types::{softmax_in_place, LabelMask, ProbMap, Raster, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Patch side `k` (odd); input dimension is `k * k`.
    pub patch: usize,
    /// Feature width `D_f`.
    pub features: usize,
    /// Attention width `D_a`.
    pub attention: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 5,
            features: 16,
            attention: 8,
            classes: 18,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!("patch size {} must be odd", self.patch)));
        }
        if self.features == 0 || self.attention == 0 || self.classes == 0 || self.classes >= IGNORE as usize {
            return Err(Error::InvalidParams(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn layout(&self) -> Layout {
        let din = self.input_dim();
        let df = self.features;
        let da = self.attention;
        let c = self.classes;
        let w_img = 0;
        let b_img = w_img + df * din;
        let w_evt = b_img + df;
        let b_evt = w_evt + df * din;
        let q = b_evt + df;
        let k = q + da * df;
        let v = k + da * df;
        let c_off = v + c * df;
        Layout {
            w_img,
            b_img,
            w_evt,
            b_evt,
            q,
            k,
            v,
            c: c_off,
            len: c_off + c,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

/// Offsets of each block in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub w_img: usize,
    pub b_img: usize,
    pub w_evt: usize,
    pub b_evt: usize,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub c: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    seed: u64,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            seed: 0,
            data: vec![0.0; config.param_count()],
        })
    }

    /// Uniform in `[-s, s]` with `s = 1 / sqrt(fan_in)` per block.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let l = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = 1.0 / (config.input_dim() as f64).sqrt();
        let feat = 1.0 / (config.features as f64).sqrt();
        let data = (0..l.len)
            .map(|i| {
                let s = if i < l.q { enc } else { feat };
                rng.random_range(-s..=s)
            })
            .collect();
        Ok(Self { config, seed, data })
    }

    pub fn from_flat(config: ModelConfig, seed: u64, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if data.len() != config.param_count() {
            return Err(Error::dims(format!(
                "{} parameters for {config:?}, expected {}",
                data.len(),
                config.param_count()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput(i));
        }
        Ok(Self { config, seed, data })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.config == other.config
    }

    /// `self -= lr * grad`.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) {
        debug_assert_eq!(grad.len(), self.data.len());
        for (p, g) in self.data.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    /// Exponential moving average toward `student`: `self = s * self + (1 - s) * student`.
    pub fn ema_update(&mut self, student: &ModelParams, sigma: f64) {
        debug_assert!(self.same_shape(student));
        for (t, s) in self.data.iter_mut().zip(&student.data) {
            *t = sigma * *t + (1.0 - sigma) * s;
        }
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    const MAGIC: &'static [u8; 4] = b"CMDW";
    const VERSION: u16 = 1;

    /// Header `CMDW`, version u16, patch/features/attention/classes u32,
    /// seed u64, count u64, then `count` little-endian f64 values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        for v in [
            self.config.patch,
            self.config.features,
            self.config.attention,
            self.config.classes,
        ] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.data.len() as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not a parameter checkpoint".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != Self::VERSION {
            return Err(Error::Format(format!("checkpoint version {version}")));
        }
        let mut dims = [0usize; 4];
        let mut b4 = [0u8; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut b4)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let config = ModelConfig {
            patch: dims[0],
            features: dims[1],
            attention: dims[2],
            classes: dims[3],
        };
        config.validate()?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        if count != config.param_count() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} values, config needs {}",
                config.param_count()
            )));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Self::from_flat(config, seed, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    Image,
    /// Shared by event maps and content maps.
    Events,
}

/// Per-pixel feature vectors, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// Pre-softmax class scores, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn softmax(&self) -> ProbMap {
        ProbMap::from_logits(self.width, self.height, self.classes, &self.data)
            .expect("softmax of finite logits is normalized")
    }
}

/// Loss weights for the three heads evaluated in one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadWeights {
    pub image: f64,
    pub aux: f64,
    pub fused: f64,
}

impl HeadWeights {
    pub fn needs_aux(&self) -> bool {
        self.aux != 0.0 || self.fused != 0.0
    }
}

/// Softmax outputs of every head.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub image: ProbMap,
    pub aux: ProbMap,
    pub fused: ProbMap,
}

/// Loss value per head (unweighted), the weighted total, and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub total: f64,
    pub image: f64,
    pub aux: f64,
    pub fused: f64,
    pub grad: Vec<f64>,
}

#[inline]
fn extract_patch(src: &[f64], w: usize, h: usize, x: usize, y: usize, k: usize, out: &mut [f64]) {
    let r = (k / 2) as isize;
    let mut j = 0;
    for dy in -r..=r {
        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let row = &src[yy * w..(yy + 1) * w];
        for dx in -r..=r {
            let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            out[j] = row[xx];
            j += 1;
        }
    }
}

/// `out = tanh(W x + b)`; `W` is `out.len() x x.len()` row-major.
#[inline]
fn dense_tanh(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (f, o) in out.iter_mut().enumerate() {
        let row = &w[f * n..(f + 1) * n];
        let mut s = b[f];
        for (a, v) in row.iter().zip(x) {
            s += a * v;
        }
        *o = s.tanh();
    }
}

/// `out = M x` (+ `bias` when given); `M` is `out.len() x x.len()`.
#[inline]
fn matvec(m: &[f64], x: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * n..(r + 1) * n];
        let mut s = bias.map_or(0.0, |b| b[r]);
        for (a, v) in row.iter().zip(x) {
            s += a * v;
        }
        *o = s;
    }
}

/// `out += M^T g`; `M` is `g.len() x out.len()`.
#[inline]
fn matvec_t_acc(m: &[f64], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &m[r * n..(r + 1) * n];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * gr;
        }
    }
}

/// `G += g x^T`; `G` is `g.len() x x.len()`.
#[inline]
fn outer_acc(g: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &mut out[r * n..(r + 1) * n];
        for (o, v) in row.iter_mut().zip(x) {
            *o += gr * v;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-token attention weights `(w_img, w_aux)` from the gate scores.
#[inline]
fn gate(q: &[f64], k_img: &[f64], k_aux: &[f64]) -> (f64, f64) {
    let scale = (q.len() as f64).sqrt();
    let s_i = dot(q, k_img) / scale;
    let s_a = dot(q, k_aux) / scale;
    let m = s_i.max(s_a);
    let (e_i, e_a) = ((s_i - m).exp(), (s_a - m).exp());
    let z = e_i + e_a;
    (e_i / z, e_a / z)
}

fn check_input<R: Raster + ?Sized>(input: &R) -> Result<()> {
    if let Some(i) = input.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    Ok(())
}

fn check_same<A: Raster + ?Sized, B: Raster + ?Sized>(a: &A, b: &B) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dims(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `tanh(W patch + b)` per pixel with the selected encoder.
pub fn encode<R: Raster + ?Sized>(input: &R, which: Encoder, params: &ModelParams) -> Result<FeatureMap> {
    check_input(input)?;
    let cfg = params.config;
    let l = cfg.layout();
    let (din, df, k) = (cfg.input_dim(), cfg.features, cfg.patch);
    let (wo, bo) = match which {
        Encoder::Image => (l.w_img, l.b_img),
        Encoder::Events => (l.w_evt, l.b_evt),
    };
    let p = params.flat();
    let (wm, b) = (&p[wo..wo + df * din], &p[bo..bo + df]);
    let (w, h) = (input.width(), input.height());
    let src = input.data();
    let mut data = vec![0.0; w * h * df];
    par::for_each_row(&mut data, w * df, |y, row| {
        let mut patch = vec![0.0; din];
        for x in 0..w {
            extract_patch(src, w, h, x, y, k, &mut patch);
            dense_tanh(wm, b, &patch, &mut row[x * df..(x + 1) * df]);
        }
    });
    Ok(FeatureMap {
        width: w,
        height: h,
        channels: df,
        data,
    })
}

/// Attention-gated convex combination of image and auxiliary features.
pub fn fuse(f_img: &FeatureMap, f_aux: &FeatureMap, params: &ModelParams) -> Result<FeatureMap> {
    let cfg = params.config;
    if f_img.width != f_aux.width
        || f_img.height != f_aux.height
        || f_img.channels != cfg.features
        || f_aux.channels != cfg.features
    {
        return Err(Error::dims("feature maps differ in shape"));
    }
    let l = cfg.layout();
    let (df, da) = (cfg.features, cfg.attention);
    let p = params.flat();
    let (qm, km) = (&p[l.q..l.q + da * df], &p[l.k..l.k + da * df]);
    let n = f_img.width * f_img.height;
    let mut data = vec![0.0; n * df];
    let (mut q, mut ki, mut ka) = (vec![0.0; da], vec![0.0; da], vec![0.0; da]);
    for i in 0..n {
        let (hi, ha) = (f_img.pixel(i), f_aux.pixel(i));
        matvec(qm, hi, None, &mut q);
        matvec(km, hi, None, &mut ki);
        matvec(km, ha, None, &mut ka);
        let (wi, wa) = gate(&q, &ki, &ka);
        for (o, (a, b)) in data[i * df..(i + 1) * df].iter_mut().zip(hi.iter().zip(ha)) {
            *o = wi * a + wa * b;
        }
    }
    Ok(FeatureMap {
        width: f_img.width,
        height: f_img.height,
        channels: df,
        data,
    })
}

/// `V f + c` per pixel.
pub fn decode(f: &FeatureMap, params: &ModelParams) -> Result<Logits> {
    let cfg = params.config;
    if f.channels != cfg.features {
        return Err(Error::dims("feature width"));
    }
    let l = cfg.layout();
    let (df, c) = (cfg.features, cfg.classes);
    let p = params.flat();
    let (vm, cb) = (&p[l.v..l.v + c * df], &p[l.c..l.c + c]);
    let n = f.width * f.height;
    let mut data = vec![0.0; n * c];
    for i in 0..n {
        matvec(vm, f.pixel(i), Some(cb), &mut data[i * c..(i + 1) * c]);
    }
    Ok(Logits {
        width: f.width,
        height: f.height,
        classes: c,
        data,
    })
}

/// Logits of all three heads.
pub fn forward_logits<A, B>(image: &A, aux: &B, params: &ModelParams) -> Result<(Logits, Logits, Logits)>
where
    A: Raster + ?Sized,
    B: Raster + ?Sized,
{
    check_same(image, aux)?;
    let fi = encode(image, Encoder::Image, params)?;
    let fa = encode(aux, Encoder::Events, params)?;
    let ff = fuse(&fi, &fa, params)?;
    Ok((decode(&fi, params)?, decode(&fa, params)?, decode(&ff, params)?))
}

pub fn forward<A, B>(image: &A, aux: &B, params: &ModelParams) -> Result<Heads>
where
    A: Raster + ?Sized,
    B: Raster + ?Sized,
{
    let (zi, za, zf) = forward_logits(image, aux, params)?;
    Ok(Heads {
        image: zi.softmax(),
        aux: za.softmax(),
        fused: zf.softmax(),
    })
}

/// Image head only, for image-only inference.
pub fn forward_image<A: Raster + ?Sized>(image: &A, params: &ModelParams) -> Result<ProbMap> {
    let fi = encode(image, Encoder::Image, params)?;
    Ok(decode(&fi, params)?.softmax())
}

/// Mean negative log-likelihood over labeled pixels, and its gradient with
/// respect to the logits: `(softmax - onehot) / count`.
pub fn ce_loss(logits: &Logits, labels: &LabelMask) -> Result<(f64, Vec<f64>)> {
    if logits.width != labels.width() || logits.height != labels.height() {
        return Err(Error::dims("logits vs labels"));
    }
    if logits.classes != labels.classes() {
        return Err(Error::ClassCountMismatch(logits.classes, labels.classes()));
    }
    let count = labels.labeled_count();
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    let c = logits.classes;
    let inv = 1.0 / count as f64;
    let mut grad = vec![0.0; logits.data.len()];
    let mut loss = 0.0;
    for (i, &y) in labels.labels().iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let z = &logits.data[i * c..(i + 1) * c];
        let g = &mut grad[i * c..(i + 1) * c];
        loss += softmax_nll(z, y as usize, g);
        for v in g.iter_mut() {
            *v *= inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Writes `softmax(z) - onehot(y)` into `g` and returns `-log softmax(z)[y]`.
#[inline]
fn softmax_nll(z: &[f64], y: usize, g: &mut [f64]) -> f64 {
    g.copy_from_slice(z);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    softmax_in_place(g);
    g[y] -= 1.0;
    lse - z[y]
}

/// Per-row working buffers for the fused forward/backward pass.
struct Scratch {
    p_i: Vec<f64>,
    p_a: Vec<f64>,
    h_i: Vec<f64>,
    h_a: Vec<f64>,
    h_f: Vec<f64>,
    q: Vec<f64>,
    k_i: Vec<f64>,
    k_a: Vec<f64>,
    z: Vec<f64>,
    gz: Vec<f64>,
    gh_i: Vec<f64>,
    gh_a: Vec<f64>,
    gh_f: Vec<f64>,
    gq: Vec<f64>,
    gk_i: Vec<f64>,
    gk_a: Vec<f64>,
}

impl Scratch {
    fn new(cfg: &ModelConfig) -> Self {
        let (din, df, da, c) = (cfg.input_dim(), cfg.features, cfg.attention, cfg.classes);
        Self {
            p_i: vec![0.0; din],
            p_a: vec![0.0; din],
            h_i: vec![0.0; df],
            h_a: vec![0.0; df],
            h_f: vec![0.0; df],
            q: vec![0.0; da],
            k_i: vec![0.0; da],
            k_a: vec![0.0; da],
            z: vec![0.0; c],
            gz: vec![0.0; c],
            gh_i: vec![0.0; df],
            gh_a: vec![0.0; df],
            gh_f: vec![0.0; df],
            gq: vec![0.0; da],
            gk_i: vec![0.0; da],
            gk_a: vec![0.0; da],
        }
    }
}

/// Weighted sum of the three head losses against `labels`, with the exact
/// gradient over the flat parameter vector.
///
/// Heads with zero weight contribute nothing; when both the auxiliary and the
/// fused weights are zero the auxiliary branch is skipped entirely.
pub fn weighted_loss<A, B>(
    image: &A,
    aux: &B,
    labels: &LabelMask,
    weights: HeadWeights,
    params: &ModelParams,
) -> Result<LossGrad>
where
    A: Raster + ?Sized,
    B: Raster + ?Sized,
{
    check_same(image, aux)?;
    check_input(image)?;
    check_input(aux)?;
    let cfg = *params.config();
    if labels.width() != image.width() || labels.height() != image.height() {
        return Err(Error::dims("labels vs image"));
    }
    if labels.classes() != cfg.classes {
        return Err(Error::ClassCountMismatch(labels.classes(), cfg.classes));
    }
    if [weights.image, weights.aux, weights.fused]
        .iter()
        .any(|w| !w.is_finite() || *w < 0.0)
    {
        return Err(Error::InvalidParams(format!("head weights {weights:?}")));
    }
    let count = labels.labeled_count();
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    let inv = 1.0 / count as f64;
    let (w, h) = (image.width(), image.height());
    let (img, auxd, lab) = (image.data(), aux.data(), labels.labels());
    let use_aux = weights.needs_aux();
    let p = params.flat();

    let rows = par::map_range(h, |y| {
        let mut grad = vec![0.0; p.len()];
        let mut sums = [0.0f64; 3];
        let mut s = Scratch::new(&cfg);
        for x in 0..w {
            let i = y * w + x;
            if lab[i] == IGNORE {
                continue;
            }
            sums = add3(
                sums,
                pixel_loss_grad(
                    &cfg,
                    p,
                    img,
                    auxd,
                    w,
                    h,
                    x,
                    y,
                    lab[i] as usize,
                    weights,
                    use_aux,
                    inv,
                    &mut s,
                    &mut grad,
                ),
            );
        }
        (sums, grad)
    });

    let mut grad = vec![0.0; p.len()];
    let mut sums = [0.0f64; 3];
    for (row_sums, row_grad) in rows {
        sums = add3(sums, row_sums);
        for (g, r) in grad.iter_mut().zip(&row_grad) {
            *g += r;
        }
    }
    let [li, la, lf] = sums.map(|v| v * inv);
    Ok(LossGrad {
        total: weights.image * li + weights.aux * la + weights.fused * lf,
        image: li,
        aux: la,
        fused: lf,
        grad,
    })
}

#[inline]
fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Forward and backward for one labeled pixel. Accumulates the gradient
/// (already scaled by `inv = 1 / count`) into `grad` and returns the
/// unscaled per-head NLL values.
#[allow(clippy::too_many_arguments)]
#[inline]
fn pixel_loss_grad(
    cfg: &ModelConfig,
    p: &[f64],
    img: &[f64],
    aux: &[f64],
    w: usize,
    h: usize,
    x: usize,
    y: usize,
    label: usize,
    weights: HeadWeights,
    use_aux: bool,
    inv: f64,
    s: &mut Scratch,
    grad: &mut [f64],
) -> [f64; 3] {
    let l = cfg.layout();
    let (din, df, da, c) = (cfg.input_dim(), cfg.features, cfg.attention, cfg.classes);
    let w_img = &p[l.w_img..l.w_img + df * din];
    let b_img = &p[l.b_img..l.b_img + df];
    let w_evt = &p[l.w_evt..l.w_evt + df * din];
    let b_evt = &p[l.b_evt..l.b_evt + df];
    let qm = &p[l.q..l.q + da * df];
    let km = &p[l.k..l.k + da * df];
    let vm = &p[l.v..l.v + c * df];
    let cb = &p[l.c..l.c + c];

    extract_patch(img, w, h, x, y, cfg.patch, &mut s.p_i);
    dense_tanh(w_img, b_img, &s.p_i, &mut s.h_i);
    s.gh_i.fill(0.0);

    let mut out = [0.0; 3];

    // Image head.
    matvec(vm, &s.h_i, Some(cb), &mut s.z);
    out[0] = softmax_nll(&s.z, label, &mut s.gz);
    if weights.image != 0.0 {
        let scale = weights.image * inv;
        s.gz.iter_mut().for_each(|g| *g *= scale);
        accumulate_decoder(&s.gz, &s.h_i, &mut grad[l.v..l.v + c * df]);
        add_into(&mut grad[l.c..l.c + c], &s.gz);
        matvec_t_acc(vm, &s.gz, &mut s.gh_i);
    }

    if use_aux {
        extract_patch(aux, w, h, x, y, cfg.patch, &mut s.p_a);
        dense_tanh(w_evt, b_evt, &s.p_a, &mut s.h_a);
        s.gh_a.fill(0.0);

        // Auxiliary head.
        matvec(vm, &s.h_a, Some(cb), &mut s.z);
        out[1] = softmax_nll(&s.z, label, &mut s.gz);
        if weights.aux != 0.0 {
            let scale = weights.aux * inv;
            s.gz.iter_mut().for_each(|g| *g *= scale);
            accumulate_decoder(&s.gz, &s.h_a, &mut grad[l.v..l.v + c * df]);
            add_into(&mut grad[l.c..l.c + c], &s.gz);
            matvec_t_acc(vm, &s.gz, &mut s.gh_a);
        }

        // Fused head.
        matvec(qm, &s.h_i, None, &mut s.q);
        matvec(km, &s.h_i, None, &mut s.k_i);
        matvec(km, &s.h_a, None, &mut s.k_a);
        let (wi, wa) = gate(&s.q, &s.k_i, &s.k_a);
        for f in 0..df {
            s.h_f[f] = wi * s.h_i[f] + wa * s.h_a[f];
        }
        matvec(vm, &s.h_f, Some(cb), &mut s.z);
        out[2] = softmax_nll(&s.z, label, &mut s.gz);
        if weights.fused != 0.0 {
            let scale = weights.fused * inv;
            s.gz.iter_mut().for_each(|g| *g *= scale);
            accumulate_decoder(&s.gz, &s.h_f, &mut grad[l.v..l.v + c * df]);
            add_into(&mut grad[l.c..l.c + c], &s.gz);
            s.gh_f.fill(0.0);
            matvec_t_acc(vm, &s.gz, &mut s.gh_f);

            // Through the convex combination.
            let g_wi = dot(&s.gh_f, &s.h_i);
            let g_wa = dot(&s.gh_f, &s.h_a);
            for f in 0..df {
                s.gh_i[f] += wi * s.gh_f[f];
                s.gh_a[f] += wa * s.gh_f[f];
            }
            // Two-way softmax: ds_j = w_j (dw_j - sum_k w_k dw_k).
            let mean = wi * g_wi + wa * g_wa;
            let scale = 1.0 / (da as f64).sqrt();
            let gs_i = wi * (g_wi - mean) * scale;
            let gs_a = wa * (g_wa - mean) * scale;
            for a in 0..da {
                s.gq[a] = gs_i * s.k_i[a] + gs_a * s.k_a[a];
                s.gk_i[a] = gs_i * s.q[a];
                s.gk_a[a] = gs_a * s.q[a];
            }
            outer_acc(&s.gq, &s.h_i, &mut grad[l.q..l.q + da * df]);
            outer_acc(&s.gk_i, &s.h_i, &mut grad[l.k..l.k + da * df]);
            outer_acc(&s.gk_a, &s.h_a, &mut grad[l.k..l.k + da * df]);
            matvec_t_acc(qm, &s.gq, &mut s.gh_i);
            matvec_t_acc(km, &s.gk_i, &mut s.gh_i);
            matvec_t_acc(km, &s.gk_a, &mut s.gh_a);
        }

        // Events encoder.
        for f in 0..df {
            s.gh_a[f] *= 1.0 - s.h_a[f] * s.h_a[f];
        }
        outer_acc(&s.gh_a, &s.p_a, &mut grad[l.w_evt..l.w_evt + df * din]);
        add_into(&mut grad[l.b_evt..l.b_evt + df], &s.gh_a);
    }

    // Image encoder.
    for f in 0..df {
        s.gh_i[f] *= 1.0 - s.h_i[f] * s.h_i[f];
    }
    outer_acc(&s.gh_i, &s.p_i, &mut grad[l.w_img..l.w_img + df * din]);
    add_into(&mut grad[l.b_img..l.b_img + df], &s.gh_i);

    out
}

#[inline]
fn accumulate_decoder(gz: &[f64], h: &[f64], gv: &mut [f64]) {
    outer_acc(gz, h, gv);
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GrayImage, SignedMap};

    fn small() -> ModelConfig {
        ModelConfig {
            patch: 3,
            features: 4,
            attention: 2,
            classes: 3,
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig::default();
        let l = cfg.layout();
        assert_eq!(l.w_img, 0);
        assert_eq!(l.len, 2 * (16 * 25 + 16) + 2 * 8 * 16 + 18 * 16 + 18);
        assert!(ModelConfig { patch: 4, ..cfg }.validate().is_err());
    }

    #[test]
    fn zero_weights_zero_features() {
        let params = ModelParams::zeros(small()).unwrap();
        let img = GrayImage::new(3, 2, vec![0.1, 0.9, 0.4, 0.3, 0.2, 1.0]).unwrap();
        let f = encode(&img, Encoder::Image, &params).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_gives_tanh_bias() {
        let cfg = small();
        let mut params = ModelParams::zeros(cfg).unwrap();
        let l = cfg.layout();
        let bias = [0.3, -0.7, 1.2, 0.0];
        params.flat_mut()[l.b_evt..l.b_evt + 4].copy_from_slice(&bias);
        let f = encode(&SignedMap::zeros(2, 2), Encoder::Events, &params).unwrap();
        for px in 0..4 {
            for (v, b) in f.pixel(px).iter().zip(&bias) {
                assert_eq!(*v, b.tanh());
            }
        }
    }

    #[test]
    fn fuse_of_equal_features_is_identity() {
        let params = ModelParams::init(small(), 3).unwrap();
        let f = FeatureMap {
            width: 2,
            height: 1,
            channels: 4,
            data: vec![0.1, -0.2, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8],
        };
        let out = fuse(&f, &f, &params).unwrap();
        for (a, b) in out.data.iter().zip(&f.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_query_averages() {
        let cfg = small();
        let mut params = ModelParams::init(cfg, 3).unwrap();
        let l = cfg.layout();
        params.flat_mut()[l.q..l.k].fill(0.0);
        let a = FeatureMap {
            width: 1,
            height: 1,
            channels: 4,
            data: vec![1.0, 0.0, -1.0, 0.5],
        };
        let b = FeatureMap {
            width: 1,
            height: 1,
            channels: 4,
            data: vec![0.0, 1.0, 0.0, -0.5],
        };
        let out = fuse(&a, &b, &params).unwrap();
        assert_eq!(out.data, vec![0.5, 0.5, -0.5, 0.0]);
    }

    #[test]
    fn decoder_bias_only() {
        let cfg = small();
        let mut params = ModelParams::zeros(cfg).unwrap();
        let l = cfg.layout();
        params.flat_mut()[l.c..l.c + 3].copy_from_slice(&[0.0, 5.0, 1.0]);
        let f = FeatureMap {
            width: 2,
            height: 1,
            channels: 4,
            data: vec![0.3; 8],
        };
        let z = decode(&f, &params).unwrap();
        assert_eq!(z.data, vec![0.0, 5.0, 1.0, 0.0, 5.0, 1.0]);
        assert!(z.softmax().argmax(0.0).labels().iter().all(|&c| c == 1));
    }

    #[test]
    fn zero_params_give_uniform_heads() {
        let params = ModelParams::zeros(small()).unwrap();
        let img = GrayImage::filled(3, 3, 0.5).unwrap();
        let aux = SignedMap::zeros(3, 3);
        let heads = forward(&img, &aux, &params).unwrap();
        for pm in [&heads.image, &heads.aux, &heads.fused] {
            assert!(pm.probs().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn ce_of_uniform_logits_is_ln_c() {
        let logits = Logits {
            width: 2,
            height: 1,
            classes: 4,
            data: vec![0.7; 8],
        };
        let labels = LabelMask::new(2, 1, 4, vec![1, 3]).unwrap();
        let (loss, grad) = ce_loss(&logits, &labels).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad[1] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((grad[0] - 0.25 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ce_saturates() {
        let logits = Logits {
            width: 1,
            height: 1,
            classes: 3,
            data: vec![-30.0, 30.0, -30.0],
        };
        let labels = LabelMask::new(1, 1, 3, vec![1]).unwrap();
        assert!(ce_loss(&logits, &labels).unwrap().0 < 1e-9);
    }

    #[test]
    fn ce_rejects_fully_ignored() {
        let logits = Logits {
            width: 1,
            height: 1,
            classes: 3,
            data: vec![0.0; 3],
        };
        let labels = LabelMask::all_ignored(1, 1, 3).unwrap();
        assert!(matches!(ce_loss(&logits, &labels), Err(Error::AllIgnored)));
    }

    #[test]
    fn ce_shift_invariant() {
        let labels = LabelMask::new(2, 1, 3, vec![0, 2]).unwrap();
        let a = Logits {
            width: 2,
            height: 1,
            classes: 3,
            data: vec![0.1, -1.0, 2.0, 0.5, 0.5, -3.0],
        };
        let mut b = a.clone();
        for v in &mut b.data[..3] {
            *v += 17.0;
        }
        let (la, _) = ce_loss(&a, &labels).unwrap();
        let (lb, _) = ce_loss(&b, &labels).unwrap();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_loss() {
        let params = ModelParams::init(small(), 9).unwrap();
        let img = GrayImage::filled(3, 3, 0.2).unwrap();
        let aux = SignedMap::zeros(3, 3);
        let labels = LabelMask::new(3, 3, 3, vec![0; 9]).unwrap();
        let w = HeadWeights {
            image: 0.0,
            aux: 0.0,
            fused: 0.0,
        };
        let lg = weighted_loss(&img, &aux, &labels, w, &params).unwrap();
        assert_eq!(lg.total, 0.0);
        assert!(lg.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn image_only_weight_equals_ce_of_image_head() {
        let params = ModelParams::init(small(), 5).unwrap();
        let img = GrayImage::new(3, 2, vec![0.1, 0.9, 0.4, 0.3, 0.2, 1.0]).unwrap();
        let aux = SignedMap::new(3, 2, vec![0.0, 1.0, -1.0, 0.5, 0.2, -0.3]).unwrap();
        let labels = LabelMask::new(3, 2, 3, vec![0, 1, 2, IGNORE, 1, 0]).unwrap();
        let w = HeadWeights {
            image: 1.0,
            aux: 0.0,
            fused: 0.0,
        };
        let lg = weighted_loss(&img, &aux, &labels, w, &params).unwrap();
        let (zi, _, _) = forward_logits(&img, &aux, &params).unwrap();
        let (ce, _) = ce_loss(&zi, &labels).unwrap();
        assert!((lg.total - ce).abs() < 1e-14);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = ModelParams::init(small(), 77).unwrap();
        let mut buf = Vec::new();
        params.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 2 + 16 + 8 + 8 + 8 * params.flat().len());
        let back = ModelParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, params);
        buf.push(0);
        assert!(ModelParams::read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn ema_fixed_points() {
        let s = ModelParams::init(small(), 1).unwrap();
        let mut t = ModelParams::init(small(), 2).unwrap();
        let t0 = t.clone();
        t.ema_update(&s, 1.0);
        assert_eq!(t, t0);
        t.ema_update(&s, 0.0);
        assert_eq!(t.flat(), s.flat());
    }
}
