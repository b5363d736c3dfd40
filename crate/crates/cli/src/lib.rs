//! Command-line front end: one subcommand per pipeline stage.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cmda_core::content::{extract_content, ContentParams, ShiftSigns};
use cmda_core::io::{self, DatasetManifest, ManifestKind, RunConfig};
use cmda_core::metrics::{class_schema, ConfusionMatrix, EvalReport};
use cmda_core::model::forward_logits;
use cmda_core::motion::IdentityHook;
use cmda_core::motion::{extract_motion, FilterParams};
use cmda_core::synthetic::{generate, ScenarioConfig};
use cmda_core::trainer::train;
use cmda_core::voxel::{select_window, voxelize, WindowSpec, DEFAULT_BINS, DEFAULT_WINDOW_US};
use cmda_core::warp::{warp_labels, warp_to_event_frame};

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (raster/event file format v1, checkpoint format v1)"
);

#[derive(Debug, Parser)]
#[command(name = "cmda", version = VERSION, about = "Image + event domain adaptation toolkit")]
struct Cli {
    /// Seed for every randomized step; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct FilterArgs {
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 0.005)]
    beta: f64,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
}

impl FilterArgs {
    fn params(&self) -> Result<FilterParams> {
        Ok(FilterParams::new(self.alpha, self.beta, self.epsilon)?)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pseudo-event map from two consecutive frames.
    ExtractMotion {
        #[arg(long)]
        prev: PathBuf,
        #[arg(long)]
        curr: PathBuf,
        #[command(flatten)]
        filter: FilterArgs,
        /// Signed map output (binary).
        #[arg(long)]
        out: PathBuf,
        /// Optional 8-bit visualization.
        #[arg(long)]
        visual: Option<PathBuf>,
    },
    /// Content map from a single image.
    ExtractContent {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        gamma: usize,
        /// Shift signs such as `+1,-1`; drawn from the seed when absent.
        #[arg(long)]
        fixed_shift: Option<String>,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        visual: Option<PathBuf>,
    },
    /// Voxel grid of the event window ending at the anchor.
    Voxelize {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        anchor_ts: i64,
        #[arg(long, default_value_t = DEFAULT_WINDOW_US)]
        duration_us: i64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value_t = 640)]
        width: usize,
        #[arg(long, default_value_t = 480)]
        height: usize,
        /// Voxel grid output (binary).
        #[arg(long)]
        out: PathBuf,
        /// Also write the collapsed single-channel map.
        #[arg(long)]
        collapsed: Option<PathBuf>,
    },
    /// Reproject an image (and optionally labels) into the event camera.
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "labels_out")]
        labels: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        labels_out: Option<PathBuf>,
        #[arg(long, default_value_t = 255)]
        classes: usize,
    },
    /// Self-training run driven by dataset manifests.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one config key, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        source_manifest: PathBuf,
        #[arg(long)]
        target_manifest: PathBuf,
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-class IoU and MIoU of prediction masks against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Schema name: dsec-night-18, cityscapes-19 or synthetic-N.
        #[arg(long)]
        classes: String,
        /// JSON record; defaults to `eval.json` next to the predictions.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Write a procedural day/night dataset with manifests.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_source: usize,
        #[arg(long, default_value_t = 200)]
        n_target: usize,
        #[arg(long, default_value_t = 50)]
        n_eval: usize,
    },
}

fn parse_shift(s: &str) -> Result<ShiftSigns> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let sign = |p: &str| -> Result<i8> {
        match p {
            "+1" | "1" | "+" => Ok(1),
            "-1" | "-" => Ok(-1),
            _ => bail!("shift sign {p:?} is not +1 or -1"),
        }
    };
    if parts.len() != 2 {
        bail!("--fixed-shift expects two signs like +1,-1");
    }
    Ok(ShiftSigns::new(sign(parts[0])?, sign(parts[1])?)?)
}

fn execute(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::ExtractMotion {
            prev,
            curr,
            filter,
            out,
            visual,
        } => {
            let p = io::load_gray_image(&prev)?;
            let c = io::load_gray_image(&curr)?;
            let map = extract_motion(&p, &c, &filter.params()?)?;
            io::save_signed_map(&map, &out)?;
            if let Some(v) = visual {
                io::save_signed_map_visual(&map, &v)?;
            }
        }
        Command::ExtractContent {
            input,
            gamma,
            fixed_shift,
            filter,
            out,
            visual,
        } => {
            let img = io::load_gray_image(&input)?;
            let params = ContentParams {
                gamma,
                filter: filter.params()?,
                seed,
                fixed_shift: fixed_shift.as_deref().map(parse_shift).transpose()?,
            };
            let map = extract_content(&img, &params)?;
            io::save_signed_map(&map, &out)?;
            if let Some(v) = visual {
                io::save_signed_map_visual(&map, &v)?;
            }
        }
        Command::Voxelize {
            events,
            anchor_ts,
            duration_us,
            bins,
            width,
            height,
            out,
            collapsed,
        } => {
            let stream = io::load_events(&events, width, height)?;
            let window = select_window(&stream, &WindowSpec::new(anchor_ts, duration_us)?);
            let grid = voxelize(&window, bins, width, height)?;
            io::write_voxel_grid(&grid, fs::File::create(&out)?)?;
            if let Some(c) = collapsed {
                io::save_signed_map(&grid.collapse(), &c)?;
            }
        }
        Command::Warp {
            image,
            depth,
            calib,
            out,
            labels,
            labels_out,
            classes,
        } => {
            let img = io::load_gray_image(&image)?;
            let depth = io::load_depth_map(&depth)?;
            let geo = io::load_calibration(&calib)?;
            let warped = warp_to_event_frame(&img, &depth, &geo)?;
            io::save_gray_image(&warped.output, &out)?;
            if let (Some(l), Some(lo)) = (labels, labels_out) {
                let mask = io::load_label_mask(&l, classes)?;
                io::save_label_mask(&warp_labels(&mask, &depth, &geo)?.output, &lo)?;
            }
        }
        Command::Train {
            config,
            overrides,
            source_manifest,
            target_manifest,
            eval_manifest,
            out_dir,
        } => run_train(
            config.as_deref(),
            &overrides,
            cli.seed,
            &source_manifest,
            &target_manifest,
            eval_manifest.as_deref(),
            &out_dir,
        )?,
        Command::Eval {
            pred_dir,
            gt_dir,
            classes,
            record,
        } => {
            let record = record.unwrap_or_else(|| pred_dir.join("eval.json"));
            let report = run_eval(&pred_dir, &gt_dir, &classes, &record)?;
            print!("{}", report.to_table());
        }
        Command::MakeSynthetic {
            out,
            n_source,
            n_target,
            n_eval,
        } => {
            let s = generate(
                &ScenarioConfig::default(),
                seed,
                n_source,
                n_target,
                n_eval,
                &IdentityHook,
            )?;
            fs::create_dir_all(&out)?;
            io::write_scenario(&s, &out)?;
        }
    }
    Ok(())
}

fn run_train(
    config: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    source: &Path,
    target: &Path,
    eval: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got {o:?}"))?;
        cfg.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;

    // Every manifest is checked before any sample is loaded.
    let src_m = DatasetManifest::load(source, ManifestKind::Source)?;
    let tgt_m = DatasetManifest::load(target, ManifestKind::Target)?;
    let eval_m = eval.map(|p| DatasetManifest::load(p, ManifestKind::Eval)).transpose()?;

    let src = io::load_source_samples(&src_m, &cfg)?;
    let tgt = io::load_target_samples(&tgt_m, &cfg, 2)?;
    let ev = eval_m.as_ref().map(|m| io::load_eval_samples(m, &cfg)).transpose()?;

    let outcome = train(&cfg.train, &src, &tgt, ev.as_deref())?;

    let ckpt = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    fs::write(out_dir.join("metrics.log"), outcome.log.to_lines())?;
    io::save_checkpoint(&outcome.student, &ckpt.join("student.cmdw"))?;
    io::save_checkpoint(&outcome.teacher, &ckpt.join("teacher.cmdw"))?;

    if let (Some(m), Some(ev)) = (eval_m, ev) {
        let pred_dir = out_dir.join("predictions");
        fs::create_dir_all(&pred_dir)?;
        for (entry, e) in m.entries.iter().zip(&ev) {
            let (_, _, fused) = forward_logits(&e.sample.image, &e.sample.events, &outcome.student)?;
            let pred = fused.softmax().argmax(0.0);
            io::save_label_mask(&pred, &pred_dir.join(format!("{}.png", entry.id)))?;
        }
        let schema = format!("synthetic-{}", cfg.train.model.classes);
        let mut cm = ConfusionMatrix::new(cfg.train.model.classes);
        for (entry, e) in m.entries.iter().zip(&ev) {
            let pred = io::load_label_mask(&pred_dir.join(format!("{}.png", entry.id)), cm.classes())?;
            cm.accumulate(&e.labels, &pred)?;
        }
        let names = class_schema(&schema).context("class schema")?;
        let report = EvalReport::new(&schema, &names, &cm)?;
        fs::write(out_dir.join("eval.txt"), report.to_table())?;
        fs::write(out_dir.join("eval.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run_eval(pred_dir: &Path, gt_dir: &Path, schema: &str, record: &Path) -> Result<EvalReport> {
    let names = class_schema(schema).with_context(|| format!("unknown class schema {schema:?}"))?;
    let gts = io::list_label_files(gt_dir)?;
    if gts.is_empty() {
        bail!("no label files in {}", gt_dir.display());
    }
    let preds = io::list_label_files(pred_dir)?;
    let mut cm = ConfusionMatrix::new(names.len());
    for (id, gt_path) in &gts {
        let pred_path = preds
            .iter()
            .find(|(p, _)| p == id)
            .map(|(_, p)| p)
            .with_context(|| format!("no prediction for {id}"))?;
        let gt = io::load_label_mask(gt_path, names.len())?;
        let pred = io::load_label_mask(pred_path, names.len())?;
        if gt.width() != pred.width() || gt.height() != pred.height() {
            bail!("{id}: prediction and ground truth differ in size");
        }
        cm.accumulate(&gt, &pred)?;
    }
    let report = EvalReport::new(schema, &names, &cm)?;
    fs::write(record, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Runs the CLI and returns the process exit status: 0 on success, 2 on
/// usage errors, 1 on data errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
