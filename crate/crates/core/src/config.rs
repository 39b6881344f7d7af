//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid configuration. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{SceneConfig, Split};
use crate::error::{Error, Result};
use crate::head::{DecodeConfig, LevelRanges, ScoreMode};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::neck::{NeckConfig, NeckKind, ScaleStrategy};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch: usize,
    /// Write a checkpoint every this many iterations (and always after the last).
    pub checkpoint_every: usize,
    /// Depth of the prepared-episode queue; 0 generates episodes inline.
    pub prefetch: usize,
    pub negative_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            iterations: 2000,
            batch: 4,
            checkpoint_every: 500,
            prefetch: 2,
            negative_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub split: Split,
    pub scenes: usize,
    pub seed: u64,
    pub support_seed: u64,
    pub decode: DecodeConfig,
    /// Score threshold for the overlay image.
    pub viz_score_thresh: f64,
    /// Training-stream index of the episode the visualizer renders.
    pub episode_seed: u64,
    /// Checkpoint to load; empty picks the newest in the output directory.
    pub checkpoint: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Novel,
            scenes: 200,
            seed: 1000,
            support_seed: 7,
            decode: DecodeConfig {
                score_thresh: 0.05,
                ..DecodeConfig::default()
            },
            viz_score_thresh: 0.2,
            episode_seed: 0,
            checkpoint: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub loss: LossConfig,
    pub ranges: LevelRanges,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            loss: LossConfig::default(),
            ranges: LevelRanges::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Every recognised key, in serialisation order.
pub const KEYS: &[&str] = &[
    "seed",
    "neck",
    "scale",
    "blocks",
    "dim",
    "heads",
    "ffn_hidden",
    "query_levels",
    "support_levels",
    "joint_levels",
    "backbone_widths",
    "lr",
    "momentum",
    "weight_decay",
    "iterations",
    "batch",
    "checkpoint_every",
    "prefetch",
    "negative_fraction",
    "lambda_cls",
    "lambda_reg",
    "lambda_ctn",
    "focal_alpha",
    "focal_gamma",
    "level_ranges",
    "image_size",
    "support_size",
    "min_objects",
    "max_objects",
    "min_object_size",
    "max_object_size",
    "max_overlap",
    "placement_retries",
    "split",
    "eval_scenes",
    "eval_seed",
    "support_seed",
    "score_thresh",
    "viz_score_thresh",
    "nms_iou",
    "max_detections",
    "score_mode",
    "episode_seed",
    "checkpoint",
    "out",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<V: ToString>(items: &[V]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_ranges(value: &str) -> Result<LevelRanges> {
    let mut map = BTreeMap::new();
    for item in value.split(',') {
        let parts: Vec<&str> = item.trim().split(':').collect();
        let [level, lo, hi] = parts[..] else {
            return Err(Error::Config(format!("level_ranges: expected level:lo:hi, got {item:?}")));
        };
        let level: u32 = parse("level_ranges", level)?;
        if map.insert(level, (parse("level_ranges", lo)?, parse("level_ranges", hi)?)).is_some() {
            return Err(Error::Config(format!("level_ranges: level {level} listed twice")));
        }
    }
    Ok(LevelRanges(map))
}

fn format_ranges(r: &LevelRanges) -> String {
    r.0.iter()
        .map(|(l, (lo, hi))| format!("{l}:{lo}:{hi}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_score_mode(value: &str) -> Result<ScoreMode> {
    match value {
        "geometric" => Ok(ScoreMode::Geometric),
        "product" => Ok(ScoreMode::Product),
        _ => Err(Error::Config(format!("score_mode: expected geometric or product, got {value:?}"))),
    }
}

fn score_mode_name(m: ScoreMode) -> &'static str {
    match m {
        ScoreMode::Geometric => "geometric",
        ScoreMode::Product => "product",
    }
}

impl RunConfig {
    /// Reads a file, applies `overrides` in order, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Self::parse_unchecked(&text)?
            }
            None => Self::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse_unchecked(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_unchecked(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let neck = &mut self.model.neck;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "neck" => neck.kind = value.parse::<NeckKind>().map_err(|e| Error::Config(e.to_string()))?,
            "scale" => neck.scale = value.parse::<ScaleStrategy>().map_err(|e| Error::Config(e.to_string()))?,
            "blocks" => neck.blocks = parse(key, value)?,
            "dim" => neck.attention.dim = parse(key, value)?,
            "heads" => neck.attention.heads = parse(key, value)?,
            "ffn_hidden" => neck.attention.ffn_hidden = parse(key, value)?,
            "query_levels" => neck.query_levels = parse_list(key, value)?,
            "support_levels" => neck.support_levels = parse_list(key, value)?,
            "joint_levels" => neck.joint_levels = parse(key, value)?,
            "backbone_widths" => self.model.backbone_widths = parse_list(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "momentum" => self.train.momentum = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "iterations" => self.train.iterations = parse(key, value)?,
            "batch" => self.train.batch = parse(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "prefetch" => self.train.prefetch = parse(key, value)?,
            "negative_fraction" => self.train.negative_fraction = parse(key, value)?,
            "lambda_cls" => self.loss.weights.cls = parse(key, value)?,
            "lambda_reg" => self.loss.weights.reg = parse(key, value)?,
            "lambda_ctn" => self.loss.weights.ctn = parse(key, value)?,
            "focal_alpha" => self.loss.focal_alpha = parse(key, value)?,
            "focal_gamma" => self.loss.focal_gamma = parse(key, value)?,
            "level_ranges" => self.ranges = parse_ranges(value)?,
            "image_size" => self.scene.image_size = parse(key, value)?,
            "support_size" => self.scene.support_size = parse(key, value)?,
            "min_objects" => self.scene.min_objects = parse(key, value)?,
            "max_objects" => self.scene.max_objects = parse(key, value)?,
            "min_object_size" => self.scene.min_object_size = parse(key, value)?,
            "max_object_size" => self.scene.max_object_size = parse(key, value)?,
            "max_overlap" => self.scene.max_overlap = parse(key, value)?,
            "placement_retries" => self.scene.placement_retries = parse(key, value)?,
            "split" => self.eval.split = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "eval_scenes" => self.eval.scenes = parse(key, value)?,
            "eval_seed" => self.eval.seed = parse(key, value)?,
            "support_seed" => self.eval.support_seed = parse(key, value)?,
            "score_thresh" => self.eval.decode.score_thresh = parse(key, value)?,
            "viz_score_thresh" => self.eval.viz_score_thresh = parse(key, value)?,
            "nms_iou" => self.eval.decode.nms_iou = parse(key, value)?,
            "max_detections" => self.eval.decode.max_detections = parse(key, value)?,
            "score_mode" => self.eval.decode.score_mode = parse_score_mode(value)?,
            "episode_seed" => self.eval.episode_seed = parse(key, value)?,
            "checkpoint" => self.eval.checkpoint = value.to_string(),
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Value of `key` in file syntax.
    pub fn get(&self, key: &str) -> Result<String> {
        let neck = &self.model.neck;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "neck" => neck.kind.to_string(),
            "scale" => neck.scale.to_string(),
            "blocks" => neck.blocks.to_string(),
            "dim" => neck.attention.dim.to_string(),
            "heads" => neck.attention.heads.to_string(),
            "ffn_hidden" => neck.attention.ffn_hidden.to_string(),
            "query_levels" => join(&neck.query_levels),
            "support_levels" => join(&neck.support_levels),
            "joint_levels" => neck.joint_levels.to_string(),
            "backbone_widths" => join(&self.model.backbone_widths),
            "lr" => self.train.lr.to_string(),
            "momentum" => self.train.momentum.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "iterations" => self.train.iterations.to_string(),
            "batch" => self.train.batch.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "prefetch" => self.train.prefetch.to_string(),
            "negative_fraction" => self.train.negative_fraction.to_string(),
            "lambda_cls" => self.loss.weights.cls.to_string(),
            "lambda_reg" => self.loss.weights.reg.to_string(),
            "lambda_ctn" => self.loss.weights.ctn.to_string(),
            "focal_alpha" => self.loss.focal_alpha.to_string(),
            "focal_gamma" => self.loss.focal_gamma.to_string(),
            "level_ranges" => format_ranges(&self.ranges),
            "image_size" => self.scene.image_size.to_string(),
            "support_size" => self.scene.support_size.to_string(),
            "min_objects" => self.scene.min_objects.to_string(),
            "max_objects" => self.scene.max_objects.to_string(),
            "min_object_size" => self.scene.min_object_size.to_string(),
            "max_object_size" => self.scene.max_object_size.to_string(),
            "max_overlap" => self.scene.max_overlap.to_string(),
            "placement_retries" => self.scene.placement_retries.to_string(),
            "split" => self.eval.split.name().to_string(),
            "eval_scenes" => self.eval.scenes.to_string(),
            "eval_seed" => self.eval.seed.to_string(),
            "support_seed" => self.eval.support_seed.to_string(),
            "score_thresh" => self.eval.decode.score_thresh.to_string(),
            "viz_score_thresh" => self.eval.viz_score_thresh.to_string(),
            "nms_iou" => self.eval.decode.nms_iou.to_string(),
            "max_detections" => self.eval.decode.max_detections.to_string(),
            "score_mode" => score_mode_name(self.eval.decode.score_mode).to_string(),
            "episode_seed" => self.eval.episode_seed.to_string(),
            "checkpoint" => self.eval.checkpoint.clone(),
            "out" => self.out.display().to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Every key with its value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let v = self.get(k).expect("KEYS lists known keys");
            writeln!(s, "{k} = {v}").expect("writing to a String");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scene.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return cfg_err(format!("lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return cfg_err(format!("momentum must lie in [0, 1), got {}", t.momentum));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return cfg_err(format!("weight_decay must be nonnegative, got {}", t.weight_decay));
        }
        if t.batch == 0 || t.checkpoint_every == 0 {
            return cfg_err("batch and checkpoint_every must be positive".into());
        }
        if !(0.0..=1.0).contains(&t.negative_fraction) {
            return cfg_err("negative_fraction must lie in [0, 1]".into());
        }
        let w = &self.loss.weights;
        if [w.cls, w.reg, w.ctn, self.loss.focal_gamma].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return cfg_err("loss weights and focal_gamma must be finite and nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.loss.focal_alpha) {
            return cfg_err("focal_alpha must lie in [0, 1]".into());
        }
        for &level in &self.model.neck.query_levels {
            match self.ranges.get(level) {
                Some((lo, hi)) if lo >= 0.0 && lo < hi => {}
                Some((lo, hi)) => return cfg_err(format!("level {level} range ({lo}, {hi}] is empty")),
                None => return cfg_err(format!("level_ranges lacks query level {level}")),
            }
        }
        let d = &self.eval.decode;
        for (name, v) in [
            ("score_thresh", d.score_thresh),
            ("viz_score_thresh", self.eval.viz_score_thresh),
            ("nms_iou", d.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return cfg_err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.eval.scenes == 0 {
            return cfg_err("eval_scenes must be positive".into());
        }
        Ok(())
    }

    pub fn neck(&self) -> &NeckConfig {
        &self.model.neck
    }
}
