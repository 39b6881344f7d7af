//! Train, evaluate, visualize and grad-check entry points.
//!
//! Each command writes fixed file names under its output directory:
//! `loss.csv` and `ckpt-{iter}.bin` for training, `report.csv` and
//! `summary.txt` for evaluation, `heatmap-l{j}.ppm` and `overlay.ppm` for
//! visualization.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{build_eval_set, write_ppm, Episode, EpisodeSampler, Image, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{format_table, registered_cases, run_cases, GradRow};
use crate::loss::LossBreakdown;
use crate::metrics::{evaluate, EvalReport};
use crate::model::Model;
use crate::tensor::{Graph, ParamStore, Scalar, Sgd, Tensor};

/// Environment variable selecting the precision of `gradcheck` (`f64` or `f32`).
pub const FLOAT_ENV: &str = "SAFT_FLOAT";

/// Batch-mean loss terms of one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterLog {
    pub iter: usize,
    pub loss: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub log: Vec<IterLog>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOSS_CSV_HEADER: &str = "iter,cls,reg,ctn,total";

pub fn loss_csv_row(l: &IterLog) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6}",
        l.iter, l.loss.cls, l.loss.reg, l.loss.ctn, l.loss.total
    )
}

fn batch_episodes(sampler: &EpisodeSampler, iter: usize, batch: usize) -> Result<Vec<Episode>> {
    (0..batch)
        .map(|b| sampler.sample((iter * batch + b) as u64))
        .collect()
}

/// Forward, backward and one SGD update on a batch; returns the mean terms.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore<f32>,
    sgd: &mut Sgd<f32>,
    cfg: &RunConfig,
    batch: &[Episode],
) -> Result<LossBreakdown> {
    let mut acc = store.zero_grads();
    let mut parts = Vec::with_capacity(batch.len());
    for ep in batch {
        let mut g = Graph::new(store);
        let (loss, breakdown) = model.episode_loss(&mut g, ep, &cfg.ranges, &cfg.loss)?;
        if let Some(term) = breakdown.non_finite_term() {
            return Err(Error::NonFinite(format!("loss term {term}")));
        }
        g.backward(loss)?.accumulate_params(&mut acc);
        parts.push(breakdown);
    }
    sgd.step(store, &acc, 1.0 / batch.len() as f64);
    Ok(LossBreakdown::mean(&parts))
}

/// Runs the full schedule, writing `loss.csv` and checkpoints to `out`.
///
/// With `train.prefetch > 0` a second thread prepares upcoming batches; the
/// episode stream is a pure function of the seed either way.
pub fn train(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&IterLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let (model, mut store) = Model::new::<f32>(&cfg.model, cfg.seed)?;
    let mut sampler = EpisodeSampler::new(cfg.seed, Split::Base, cfg.scene.clone());
    sampler.negative_fraction = cfg.train.negative_fraction;
    let t = &cfg.train;
    let mut sgd = Sgd::new(t.lr, t.momentum, t.weight_decay);
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    let mut log = Vec::with_capacity(t.iterations);
    let mut checkpoints = Vec::new();

    let mut step = |iter: usize, batch: Result<Vec<Episode>>| -> Result<()> {
        let batch = batch?;
        let loss = train_step(&model, &mut store, &mut sgd, cfg, &batch).map_err(|e| match e {
            Error::NonFinite(what) => Error::NonFinite(format!("{what} at iteration {iter}")),
            other => other,
        })?;
        let entry = IterLog { iter, loss };
        writeln!(csv, "{}", loss_csv_row(&entry)).expect("writing to a String");
        progress(&entry);
        log.push(entry);
        let done = iter + 1;
        if done % t.checkpoint_every == 0 || done == t.iterations {
            let path = out.join(checkpoint::file_name(done));
            checkpoint::save(&path, &store)?;
            checkpoints.push(path);
        }
        Ok(())
    };

    if t.prefetch == 0 {
        for iter in 0..t.iterations {
            step(iter, batch_episodes(&sampler, iter, t.batch))?;
        }
    } else {
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(t.prefetch);
            let sampler = &sampler;
            s.spawn(move || {
                for iter in 0..t.iterations {
                    if tx.send(batch_episodes(sampler, iter, t.batch)).is_err() {
                        break;
                    }
                }
            });
            for iter in 0..t.iterations {
                let batch = rx.recv().map_err(|_| Error::Invalid("episode producer stopped".into()))?;
                step(iter, batch)?;
            }
            Ok(())
        })?;
    }
    drop(step);
    fs::write(out.join("loss.csv"), csv)?;
    Ok(TrainOutcome {
        model,
        store,
        log,
        checkpoints,
    })
}

/// Builds the model described by `cfg` and loads `path` into it.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::new::<f32>(&cfg.model, cfg.seed)?;
    let saved = checkpoint::load(path)?;
    store
        .load_from(&saved)
        .map_err(|e| Error::Checkpoint(format!("{} does not fit the configured model: {e}", path.display())))?;
    Ok((model, store))
}

/// `eval.checkpoint` if set, else the newest checkpoint in `out`.
pub fn resolve_checkpoint(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    if !cfg.eval.checkpoint.is_empty() {
        let p = PathBuf::from(&cfg.eval.checkpoint);
        if !p.is_file() {
            return Err(Error::Checkpoint(format!("{} not found", p.display())));
        }
        return Ok(p);
    }
    checkpoint::latest(out)?
        .map(|(_, p)| p)
        .ok_or_else(|| Error::Checkpoint(format!("no ckpt-*.bin in {}", out.display())))
}

/// The configured eval set for `split`.
pub fn eval_episodes(cfg: &RunConfig, split: Split) -> Result<Vec<Episode>> {
    build_eval_set(split, cfg.eval.scenes, cfg.eval.seed, cfg.eval.support_seed, &cfg.scene)
}

pub fn evaluate_model(model: &Model, store: &ParamStore<f32>, cfg: &RunConfig, episodes: &[Episode]) -> Result<EvalReport> {
    let decode = cfg.eval.decode;
    let mut detector = |ep: &Episode| model.detect(store, ep, &decode);
    evaluate(&mut detector, episodes)
}

/// Evaluates the resolved checkpoint on `cfg.eval.split`; writes `report.csv`
/// and `summary.txt`.
pub fn eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let ckpt = resolve_checkpoint(cfg, out)?;
    let (model, store) = load_model(cfg, &ckpt)?;
    let episodes = eval_episodes(cfg, cfg.eval.split)?;
    let report = evaluate_model(&model, &store, cfg, &episodes)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    let mut summary = format!("checkpoint: {}\n", ckpt.display());
    summary.push_str(&report.summary(cfg.eval.split.name()));
    fs::write(out.join("summary.txt"), summary)?;
    Ok(report)
}

/// Grayscale image of the channel mean of a `[C, h, w]` map, min-max
/// normalised (a constant map becomes mid-gray) and nearest-upsampled.
pub fn heatmap<T: Scalar>(map: &Tensor<T>, width: usize, height: usize) -> Result<Image> {
    let (c, h, w) = map.chw()?;
    let plane = h * w;
    let data = map.to_f64_vec();
    let mean: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|k| data[k * plane + i]).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let gray: Vec<u8> = mean.iter().map(|&v| (norm(v) * 255.0).round() as u8).collect();
    let mut small = Image::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let v = gray[y * w + x];
            small.set(x, y, [v, v, v]);
        }
    }
    Ok(small.resize_nearest(width, height))
}

pub struct VizOutput {
    pub episode: Episode,
    pub heatmaps: Vec<(u32, PathBuf)>,
    pub overlay: PathBuf,
    pub detections: usize,
}

const GT_COLOR: [u8; 3] = [40, 220, 60];
const DET_COLOR: [u8; 3] = [235, 40, 40];

/// Heatmaps of every fused query level and the query with detections drawn.
///
/// The episode is scene `episode_seed` of the configured eval split, with
/// that split's fixed support for the first class present.
pub fn visualize(cfg: &RunConfig, out: &Path) -> Result<VizOutput> {
    cfg.validate()?;
    let ckpt = resolve_checkpoint(cfg, out)?;
    let (model, store) = load_model(cfg, &ckpt)?;
    let mut sampler = EpisodeSampler::new(cfg.eval.seed, cfg.eval.split, cfg.scene.clone());
    sampler.negative_fraction = 0.0;
    let mut episode = sampler.sample(cfg.eval.episode_seed)?;
    let supports = crate::data::fixed_seed_supports(&[episode.class_id], cfg.eval.support_seed, &cfg.scene)?;
    episode.support = supports[&episode.class_id].clone();
    visualize_episode(&model, &store, cfg, &episode, out)
}

pub fn visualize_episode(
    model: &Model,
    store: &ParamStore<f32>,
    cfg: &RunConfig,
    episode: &Episode,
    out: &Path,
) -> Result<VizOutput> {
    fs::create_dir_all(out)?;
    let img = &episode.query.image;
    let mut g = Graph::inference(store);
    let output = model.forward(&mut g, &img.to_tensor(), &episode.support.to_tensor())?;
    let mut heatmaps = Vec::new();
    for &(level, v) in &output.fused.levels {
        let path = out.join(format!("heatmap-l{level}.ppm"));
        write_ppm(&path, &heatmap(g.value(v), img.width, img.height)?)?;
        heatmaps.push((level, path));
    }
    let decode = crate::head::DecodeConfig {
        score_thresh: cfg.eval.viz_score_thresh,
        ..cfg.eval.decode
    };
    let values = output.head.values(&g);
    let dets = crate::head::decode_detections(&values, &decode, episode.class_id);
    let mut overlay = img.clone();
    for b in &episode.gts {
        overlay.draw_rect(b, GT_COLOR);
    }
    for d in &dets {
        overlay.draw_rect(&d.bbox, DET_COLOR);
    }
    let overlay_path = out.join("overlay.ppm");
    write_ppm(&overlay_path, &overlay)?;
    let lines: String = dets.iter().map(|d| d.to_line() + "\n").collect();
    fs::write(out.join("detections.txt"), lines)?;
    Ok(VizOutput {
        episode: episode.clone(),
        heatmaps,
        overlay: overlay_path,
        detections: dets.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FloatMode {
    F32,
    F64,
}

impl FloatMode {
    /// Reads [`FLOAT_ENV`]; unset means 64-bit.
    pub fn from_env() -> Result<Self> {
        match std::env::var(FLOAT_ENV) {
            Err(_) => Ok(Self::F64),
            Ok(v) => match v.as_str() {
                "f64" | "64" => Ok(Self::F64),
                "f32" | "32" => Ok(Self::F32),
                _ => Err(Error::Config(format!("{FLOAT_ENV} must be f32 or f64, got {v:?}"))),
            },
        }
    }
}

/// Runs every registered gradient case; writes the table to `gradcheck.txt`.
pub fn gradcheck(mode: FloatMode, out: &Path, progress: impl FnMut(&GradRow)) -> Result<Vec<GradRow>> {
    let rows = match mode {
        FloatMode::F64 => run_cases(&registered_cases::<f64>(), progress)?,
        FloatMode::F32 => run_cases(&registered_cases::<f32>(), progress)?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("gradcheck.txt"), format_table(&rows))?;
    Ok(rows)
}
