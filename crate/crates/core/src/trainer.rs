//! Teacher/student self-training across modalities.
//!
//! Each step draws one auxiliary modality (events or content map), computes
//! the supervised source loss and the pseudo-labeled target loss on the
//! student, applies one SGD step, then moves the teacher toward the student
//! by exponential moving average.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{forward_logits, weighted_loss, HeadWeights, LossGrad, ModelConfig, ModelParams};
use crate::par;
use crate::types::{GrayImage, LabelMask, Raster, SignedMap};

/// Per-head loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub image: f64,
    pub events: f64,
    pub content: f64,
    pub fusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image: 0.5,
            events: 0.25,
            content: 0.25,
            fusion: 0.5,
        }
    }
}

impl LossWeights {
    pub fn heads(&self, choice: Option<AuxChoice>) -> HeadWeights {
        match choice {
            Some(AuxChoice::Events) => HeadWeights {
                image: self.image,
                aux: self.events,
                fused: self.fusion,
            },
            Some(AuxChoice::Content) => HeadWeights {
                image: self.image,
                aux: self.content,
                fused: self.fusion,
            },
            None => HeadWeights {
                image: self.image,
                aux: 0.0,
                fused: 0.0,
            },
        }
    }
}

/// Which auxiliary inputs take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modalities {
    pub events: bool,
    pub content: bool,
}

impl Modalities {
    pub const ALL: Self = Self {
        events: true,
        content: true,
    };
    pub const IMAGE_ONLY: Self = Self {
        events: false,
        content: false,
    };
    pub const CONTENT_ONLY: Self = Self {
        events: false,
        content: true,
    };
    pub const EVENTS_ONLY: Self = Self {
        events: true,
        content: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxChoice {
    Events,
    Content,
}

impl AuxChoice {
    pub fn name(choice: Option<Self>) -> &'static str {
        match choice {
            Some(AuxChoice::Events) => "E",
            Some(AuxChoice::Content) => "I_CE",
            None => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// EMA momentum of the teacher.
    pub sigma: f64,
    pub lr: f64,
    pub seed: u64,
    /// Pseudo-labels below this teacher confidence become IGNORE; 0 disables.
    pub pseudo_label_conf_threshold: f64,
    pub modalities: Modalities,
    /// Disables the target (pseudo-label) loss when false.
    pub self_training: bool,
    /// Evaluate every this many steps (and at the end); 0 evaluates only at the end.
    pub eval_interval: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            weights: LossWeights::default(),
            sigma: 0.999,
            lr: 0.05,
            seed: 0,
            pseudo_label_conf_threshold: 0.0,
            modalities: Modalities::ALL,
            self_training: true,
            eval_interval: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Short-run settings for small synthetic datasets: a larger step size
    /// and confidence-filtered pseudo-labels.
    pub fn desk(classes: usize, seed: u64) -> Self {
        Self {
            iterations: 2000,
            lr: 0.3,
            pseudo_label_conf_threshold: 0.9,
            seed,
            model: ModelConfig {
                classes,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let w = &self.weights;
        if [w.image, w.events, w.content, w.fusion]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidParams(format!("loss weights {w:?}")));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidParams(format!("sigma {}", self.sigma)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch size must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidParams(format!("learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.pseudo_label_conf_threshold) {
            return Err(Error::InvalidParams(format!(
                "confidence threshold {}",
                self.pseudo_label_conf_threshold
            )));
        }
        Ok(())
    }
}

/// Labeled day-time sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSample {
    pub image: GrayImage,
    /// Styled pseudo-events from the motion extractor.
    pub pseudo_events: SignedMap,
    pub content: SignedMap,
    pub labels: LabelMask,
}

/// Unlabeled night-time image/event pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSample {
    pub image: GrayImage,
    /// Collapsed event voxel grid.
    pub events: SignedMap,
    pub content: SignedMap,
}

impl SourceSample {
    pub fn aux(&self, choice: Option<AuxChoice>) -> &SignedMap {
        match choice {
            Some(AuxChoice::Events) => &self.pseudo_events,
            _ => &self.content,
        }
    }
}

impl TargetSample {
    pub fn aux(&self, choice: Option<AuxChoice>) -> &SignedMap {
        match choice {
            Some(AuxChoice::Events) => &self.events,
            _ => &self.content,
        }
    }
}

/// Target sample with ground truth kept aside for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub sample: TargetSample,
    pub labels: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub source_loss: f64,
    pub target_loss: f64,
    pub choice: Option<AuxChoice>,
    /// Pseudo-labeled pixels that entered the target loss.
    pub pseudo_labeled: usize,
}

/// Teacher argmax on the fused head (image head when `choice` is `None`).
/// Ties go to the lowest class id.
pub fn pseudo_label(
    teacher: &ModelParams,
    sample: &TargetSample,
    choice: Option<AuxChoice>,
    threshold: f64,
) -> Result<LabelMask> {
    let (zi, _, zf) = forward_logits(&sample.image, sample.aux(choice), teacher)?;
    let probs = match choice {
        Some(_) => zf.softmax(),
        None => zi.softmax(),
    };
    Ok(probs.argmax(threshold))
}

/// Fair coin between the enabled auxiliary modalities.
pub fn draw_choice<R: Rng>(rng: &mut R, modalities: Modalities) -> Option<AuxChoice> {
    match (modalities.events, modalities.content) {
        (true, true) => Some(if rng.random::<bool>() {
            AuxChoice::Events
        } else {
            AuxChoice::Content
        }),
        (true, false) => Some(AuxChoice::Events),
        (false, true) => Some(AuxChoice::Content),
        (false, false) => None,
    }
}

/// Mean loss and gradient over a batch; entries of `None` are skipped.
fn batch_loss(parts: Vec<Option<LossGrad>>, n_params: usize) -> (f64, Vec<f64>, usize) {
    let mut grad = vec![0.0; n_params];
    let mut total = 0.0;
    let mut used = 0;
    for lg in parts.into_iter().flatten() {
        total += lg.total;
        for (g, v) in grad.iter_mut().zip(&lg.grad) {
            *g += v;
        }
        used += 1;
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        total *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
    }
    (total, grad, used)
}

/// One iteration: source loss, pseudo-labels, target loss, SGD, EMA.
pub fn train_step(
    student: &mut ModelParams,
    teacher: &mut ModelParams,
    src: &[&SourceSample],
    tgt: &[&TargetSample],
    choice: Option<AuxChoice>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepReport> {
    if !student.same_shape(teacher) {
        return Err(Error::dims("student and teacher differ in shape"));
    }
    if src.is_empty() {
        return Err(Error::EmptyDataset("source batch"));
    }
    let heads = cfg.weights.heads(choice);
    let n = student.flat().len();

    let src_parts = par::map_slice(src, |s| {
        weighted_loss(&s.image, s.aux(choice), &s.labels, heads, student).map(Some)
    });
    let src_parts: Vec<_> = src_parts.into_iter().collect::<Result<_>>()?;
    let (source_loss, mut grad, _) = batch_loss(src_parts, n);

    let mut target_loss = 0.0;
    let mut pseudo_labeled = 0;
    if cfg.self_training && !tgt.is_empty() {
        let teacher_ref = &*teacher;
        let student_ref = &*student;
        let tgt_parts = par::map_slice(tgt, |t| -> Result<(usize, Option<LossGrad>)> {
            let labels = pseudo_label(teacher_ref, t, choice, cfg.pseudo_label_conf_threshold)?;
            let count = labels.labeled_count();
            if count == 0 {
                return Ok((0, None));
            }
            let lg = weighted_loss(&t.image, t.aux(choice), &labels, heads, student_ref)?;
            Ok((count, Some(lg)))
        });
        let mut parts = Vec::with_capacity(tgt.len());
        for part in tgt_parts {
            let (count, lg) = part?;
            pseudo_labeled += count;
            parts.push(lg);
        }
        let (lt, gt, used) = batch_loss(parts, n);
        if used > 0 {
            target_loss = lt;
            for (g, v) in grad.iter_mut().zip(&gt) {
                *g += v;
            }
        }
    }

    if !source_loss.is_finite() || !target_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            source_loss,
            target_loss,
        });
    }

    student.sgd_step(&grad, cfg.lr);
    teacher.ema_update(student, cfg.sigma);

    Ok(StepReport {
        step,
        source_loss,
        target_loss,
        choice,
        pseudo_labeled,
    })
}

/// MIoU of the student on held-out labeled target samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalScores {
    /// Image head.
    pub image: f64,
    /// Fused head with events.
    pub fused_events: f64,
    /// Fused head with the content map.
    pub fused_content: f64,
    /// Events head alone.
    pub events: f64,
}

pub fn evaluate(params: &ModelParams, eval: &[EvalSample]) -> Result<EvalScores> {
    let classes = params.config().classes;
    let preds = par::map_slice(eval, |e| -> Result<[LabelMask; 4]> {
        let s = &e.sample;
        let (zi, ze, zfe) = forward_logits(&s.image, &s.events, params)?;
        let (_, _, zfc) = forward_logits(&s.image, &s.content, params)?;
        Ok([zi, zfe, zfc, ze].map(|z| z.softmax().argmax(0.0)))
    });
    let mut cms = [(); 4].map(|_| ConfusionMatrix::new(classes));
    for (e, p) in eval.iter().zip(preds) {
        for (cm, pred) in cms.iter_mut().zip(p?.iter()) {
            cm.accumulate(&e.labels, pred)?;
        }
    }
    Ok(EvalScores {
        image: cms[0].miou()?,
        fused_events: cms[1].miou()?,
        fused_content: cms[2].miou()?,
        events: cms[3].miou()?,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub steps: Vec<StepReport>,
    /// `(step, scores)` after the given number of completed steps.
    pub evals: Vec<(usize, EvalScores)>,
}

impl TrainingLog {
    /// Tab-separated lines: step, source loss, target loss, modality choice,
    /// fused-with-events MIoU (empty when not evaluated at that step).
    pub fn to_lines(&self) -> String {
        let mut out = String::from("step\tL_s\tL_t\tchoice\teval_miou\n");
        let mut evals = self.evals.iter().peekable();
        for s in &self.steps {
            let miou = match evals.peek() {
                Some((at, scores)) if *at == s.step + 1 => {
                    let v = scores.fused_events;
                    evals.next();
                    format!("{v}")
                }
                _ => String::new(),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                s.step + 1,
                s.source_loss,
                s.target_loss,
                AuxChoice::name(s.choice),
                miou
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub log: TrainingLog,
}

/// Cycles through seeded shuffles of `0..n`.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Runs the full loop from a shared seeded initialization.
pub fn train(
    cfg: &TrainConfig,
    source: &[SourceSample],
    target: &[TargetSample],
    eval: Option<&[EvalSample]>,
) -> Result<TrainOutcome> {
    let init = ModelParams::init(cfg.model, cfg.seed)?;
    train_from(cfg, init.clone(), init, source, target, eval)
}

pub fn train_from(
    cfg: &TrainConfig,
    mut student: ModelParams,
    mut teacher: ModelParams,
    source: &[SourceSample],
    target: &[TargetSample],
    eval: Option<&[EvalSample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset("source"));
    }
    if cfg.self_training && target.is_empty() {
        return Err(Error::EmptyDataset("target"));
    }
    check_samples(cfg, source, target)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_cafe_f00d_0001);
    let mut src_sampler = EpochSampler::new(source.len());
    let mut tgt_sampler = EpochSampler::new(target.len());
    let mut log = TrainingLog::default();

    for step in 0..cfg.iterations {
        let choice = draw_choice(&mut rng, cfg.modalities);
        let src: Vec<&SourceSample> = (0..cfg.batch_size)
            .map(|_| &source[src_sampler.next(&mut rng)])
            .collect();
        let tgt: Vec<&TargetSample> = if cfg.self_training {
            (0..cfg.batch_size)
                .map(|_| &target[tgt_sampler.next(&mut rng)])
                .collect()
        } else {
            Vec::new()
        };
        let report = train_step(&mut student, &mut teacher, &src, &tgt, choice, cfg, step)?;
        log.steps.push(report);

        let done = step + 1;
        if let Some(ev) = eval {
            let periodic = cfg.eval_interval > 0 && done % cfg.eval_interval == 0;
            if periodic || done == cfg.iterations {
                log.evals.push((done, evaluate(&student, ev)?));
            }
        }
    }
    Ok(TrainOutcome { student, teacher, log })
}

fn check_samples(cfg: &TrainConfig, source: &[SourceSample], target: &[TargetSample]) -> Result<()> {
    for s in source {
        if s.labels.classes() != cfg.model.classes {
            return Err(Error::ClassCountMismatch(s.labels.classes(), cfg.model.classes));
        }
        let (w, h) = (s.image.width(), s.image.height());
        if s.pseudo_events.width() != w
            || s.pseudo_events.height() != h
            || s.content.width() != w
            || s.content.height() != h
        {
            return Err(Error::dims("source sample rasters differ in size"));
        }
    }
    for t in target {
        let (w, h) = (t.image.width(), t.image.height());
        if t.events.width() != w || t.events.height() != h || t.content.width() != w || t.content.height() != h {
            return Err(Error::dims("target sample rasters differ in size"));
        }
    }
    Ok(())
}
