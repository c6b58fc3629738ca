//! The five subcommands.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use difflane_core::evalmetrics::{culane_f1, culane_width, tusimple_accuracy, EvalReport};
use difflane_core::geometry::{GridLane, Polyline, ScoredLane};
use difflane_core::synthdata::{
    generate_scene, lanes_path_for, read_culane, read_lanes, read_list, render_mask, write_lanes, write_list,
    CulaneWriter, Image, LaneScene,
};
use difflane_model::checkpoint::{self, Manifest};
use difflane_model::pipeline::{image_rng, infer, InferTrace};
use difflane_model::{DiffusionLane, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::draw;

/// Writes `count` scenes under `out` in CULane layout; `list.txt` is the
/// manifest.
pub fn gen(cfg: &RunConfig, out: &Path, count: usize) -> Result<Vec<PathBuf>> {
    let mut writer = CulaneWriter::create(out)?;
    for i in 0..count {
        writer.add(&generate_scene(&cfg.scene, i as u64))?;
    }
    Ok(writer.finish()?)
}

/// Loads a generated dataset back into scenes, re-rendering the masks.
pub fn load_scenes(cfg: &RunConfig, root: &Path) -> Result<Vec<LaneScene>> {
    let entries = read_culane(root).with_context(|| format!("reading dataset {}", root.display()))?;
    entries
        .into_iter()
        .map(|e| {
            let image = Image::load_png(&root.join(&e.image))?;
            if (image.width, image.height) != (cfg.model.img_w, cfg.model.img_h) {
                bail!(
                    "{} is {}x{}, config expects {}x{}",
                    e.image.display(),
                    image.width,
                    image.height,
                    cfg.model.img_w,
                    cfg.model.img_h
                );
            }
            let seg_mask = render_mask(&e.lanes, &cfg.scene);
            Ok(LaneScene { image, lanes: e.lanes, seg_mask })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    /// Loss CSV; defaults to the checkpoint path with `.loss.csv`.
    pub log: Option<PathBuf>,
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs_done: u64,
    pub last_total: f64,
}

const LOSS_HEADER: &str = "step,epoch,lr,cls,liou,smooth_l1,angle,seg,aux,total";

pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let scenes = load_scenes(cfg, &opts.data)?;
    if scenes.is_empty() {
        bail!("dataset {} has no images", opts.data.display());
    }
    let (model, start_step, start_epoch) = match &opts.resume {
        Some(path) => {
            let (model, m) = checkpoint::load(path, Some(&cfg.compat_key()))?;
            let epochs = m.run.get("epochs_done").and_then(|v| v.as_u64()).unwrap_or(0);
            (model, m.step, epochs)
        }
        None => (DiffusionLane::new(cfg.model.clone())?, 0, 0),
    };
    let tcfg = cfg.train_config();
    let per_epoch = scenes.len().div_ceil(tcfg.batch_size) as u64;
    let total = start_step + per_epoch * tcfg.epochs as u64;
    let mut trainer = Trainer::new(model, tcfg.clone(), total)?;
    trainer.set_step(start_step);

    let log_path = opts.log.clone().unwrap_or_else(|| opts.out.with_extension("loss.csv"));
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let appending = opts.resume.is_some() && log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(appending)
        .write(true)
        .truncate(!appending)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if !appending {
        writeln!(log, "{LOSS_HEADER}")?;
    }

    let started = Instant::now();
    let every = (total / 20).max(1);
    let mut last_total = f64::NAN;
    for epoch in start_epoch..start_epoch + tcfg.epochs as u64 {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe90c);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&LaneScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let lr = trainer.learning_rate();
            let step = trainer.step();
            let r = trainer.train_step(&batch).with_context(|| format!("training step {step}"))?;
            writeln!(
                log,
                "{step},{epoch},{lr:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.cls, r.liou, r.smooth_l1, r.angle, r.seg, r.aux, r.total
            )?;
            last_total = r.total;
            if !opts.quiet && (step + 1) % every == 0 {
                eprintln!(
                    "step {}/{} epoch {} loss {:.4} ({:.0}s)",
                    step + 1,
                    total,
                    epoch,
                    r.total,
                    started.elapsed().as_secs_f64()
                );
            }
        }
        let run = json!({ "epochs_done": epoch + 1, "seed": cfg.seed, "train": cfg.train });
        let manifest = Manifest::new(&trainer.model, cfg.t_max, cfg.noise_scale, trainer.step(), run);
        checkpoint::save(&opts.out, &trainer.model, &manifest)?;
    }
    log.flush()?;
    Ok(TrainSummary { steps: trainer.step(), epochs_done: start_epoch + tcfg.epochs as u64, last_total })
}

pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<DiffusionLane> {
    let (model, _) = checkpoint::load(ckpt, Some(&cfg.compat_key()))?;
    Ok(model)
}

/// Detections for image `index`, with the sampling trace.
pub fn detect(
    cfg: &RunConfig,
    model: &DiffusionLane,
    image: &Image,
    index: u64,
) -> Result<(Vec<ScoredLane>, InferTrace)> {
    Ok(infer(model, image, &cfg.infer_config(), &mut image_rng(cfg.seed, index))?)
}

pub fn scores_path_for(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}.scores.txt"))
}

fn polylines(cfg: &RunConfig, lanes: &[ScoredLane]) -> Result<(Vec<Polyline>, Vec<f64>)> {
    let grid = cfg.grid()?;
    Ok(lanes.iter().filter_map(|l| l.anchor.to_polyline(&grid).map(|p| (p, l.fg_prob))).unzip())
}

/// Runs sampling on every listed image of `data`, writing one lane file and
/// one score file per image plus `list.txt` under `out`. Returns the image
/// count.
pub fn infer_dir(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<usize> {
    let model = load_model(cfg, ckpt)?;
    let images = read_list(data).with_context(|| format!("reading {}", data.display()))?;
    for (i, rel) in images.iter().enumerate() {
        let image = Image::load_png(&data.join(rel))?;
        let (lanes, _) = detect(cfg, &model, &image, i as u64)?;
        let (lines, scores) = polylines(cfg, &lanes)?;
        let lane_file = out.join(lanes_path_for(rel));
        if let Some(dir) = lane_file.parent() {
            fs::create_dir_all(dir)?;
        }
        write_lanes(&lane_file, &lines)?;
        let text: String = scores.iter().map(|s| format!("{s:.6}\n")).collect();
        fs::write(out.join(scores_path_for(rel)), text)?;
    }
    fs::create_dir_all(out)?;
    write_list(out, &images)?;
    Ok(images.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalMode {
    Culane,
    Tusimple,
}

impl EvalMode {
    fn name(self) -> &'static str {
        match self {
            EvalMode::Culane => "culane",
            EvalMode::Tusimple => "tusimple",
        }
    }
}

fn lane_files(root: &Path) -> Result<BTreeSet<PathBuf>> {
    let mut found = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.to_string_lossy().ends_with(".lines.txt") {
                found.insert(path.strip_prefix(root)?.to_path_buf());
            }
        }
    }
    Ok(found)
}

pub const CULANE_IOU: f64 = 0.5;

/// Compares prediction lane files under `pred` with the dataset under `gt`.
/// Writes `eval_<mode>.txt` and `eval_<mode>_matches.csv` into `out`.
pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, mode: EvalMode, out: &Path) -> Result<EvalReport> {
    let images = read_list(gt).with_context(|| format!("reading {}", gt.display()))?;
    let expected: BTreeSet<PathBuf> = images.iter().map(|i| lanes_path_for(i)).collect();
    let present = lane_files(pred)?;
    let missing: Vec<String> = expected.difference(&present).map(|p| p.display().to_string()).collect();
    let extra: Vec<String> = present.difference(&expected).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() || !extra.is_empty() {
        let mut msg = String::from("prediction and ground-truth file sets differ");
        if !missing.is_empty() {
            msg.push_str(&format!("\n  missing predictions: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            msg.push_str(&format!("\n  predictions without ground truth: {}", extra.join(", ")));
        }
        bail!(msg);
    }
    let grid = cfg.grid()?;
    let to_grid = |root: &Path| -> Result<Vec<Vec<GridLane>>> {
        images
            .iter()
            .map(|i| Ok(read_lanes(&root.join(lanes_path_for(i)))?.iter().map(|l| l.to_grid_lane(&grid)).collect()))
            .collect()
    };
    let (p, g) = (to_grid(pred)?, to_grid(gt)?);
    let report = match mode {
        EvalMode::Culane => culane_f1(&p, &g, CULANE_IOU, culane_width(grid.img_w())),
        EvalMode::Tusimple => tusimple_accuracy(&p, &g, &grid),
    };
    fs::create_dir_all(out)?;
    let name = mode.name();
    fs::write(
        out.join(format!("eval_{name}.txt")),
        format!("mode={name}\nimages={}\n{}", images.len(), report.to_key_values()),
    )?;
    let names: Vec<String> = images.iter().map(|i| i.display().to_string()).collect();
    fs::write(out.join(format!("eval_{name}_matches.csv")), report.matches_csv(&names))?;
    Ok(report)
}

pub fn summary_line(mode: EvalMode, r: &EvalReport) -> String {
    match mode {
        EvalMode::Culane => format!(
            "culane f1={:.4} precision={:.4} recall={:.4} tp={} fp={} fn={}",
            r.f1, r.precision, r.recall, r.tp, r.fp, r.fn_
        ),
        EvalMode::Tusimple => format!(
            "tusimple accuracy={:.4} fp_rate={:.4} fn_rate={:.4} f1={:.4}",
            r.accuracy, r.fp_rate, r.fn_rate, r.f1
        ),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSummary {
    pub files: Vec<PathBuf>,
    /// Anchors drawn on each overlay.
    pub drawn: Vec<usize>,
    pub detections: usize,
}

/// One overlay for the initial noise and one per sampling step; the last
/// also shows the final detections, which are written to
/// `detections.lines.txt`.
pub fn plot(cfg: &RunConfig, ckpt: &Path, image_path: &Path, index: u64, out: &Path) -> Result<PlotSummary> {
    let model = load_model(cfg, ckpt)?;
    let image = Image::load_png(image_path)?;
    let (lanes, trace) = detect(cfg, &model, &image, index)?;
    let grid = cfg.grid()?;
    let thr = cfg.infer.fg_threshold;
    fs::create_dir_all(out)?;
    let mut summary = PlotSummary { files: Vec::new(), drawn: Vec::new(), detections: lanes.len() };
    for k in 0..=trace.steps.len() {
        let mut canvas = image.clone();
        let mut drawn = 0;
        if k == 0 {
            for a in &trace.steps[0].input {
                draw::grid_lane(&mut canvas, &a.to_grid_lane(&grid), &grid, 0.0, draw::NOISE);
                drawn += 1;
            }
        } else {
            for p in trace.steps[k - 1].predictions.iter().filter(|p| p.fg_prob >= thr) {
                draw::grid_lane(&mut canvas, &p.anchor.to_grid_lane(&grid), &grid, 0.0, draw::SURVIVOR);
                drawn += 1;
            }
        }
        if k == trace.steps.len() {
            for l in &lanes {
                draw::grid_lane(&mut canvas, &l.anchor.to_grid_lane(&grid), &grid, 1.5, draw::DETECTION);
            }
        }
        let path = out.join(format!("step_{k}.png"));
        canvas.save_png(&path)?;
        summary.files.push(path);
        summary.drawn.push(drawn);
    }
    let (lines, _) = polylines(cfg, &lanes)?;
    write_lanes(&out.join("detections.lines.txt"), &lines)?;
    Ok(summary)
}
