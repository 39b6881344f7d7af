//! Synthetic one-shot detection benchmark: textured shapes on cluttered
//! backgrounds, a base/novel class split and episode sampling.

mod io;
mod render;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BoxXYXY;
use crate::error::{invalid, Result};
use crate::metrics::iou_unchecked;

pub use io::{
    load_eval_set, read_annotations, read_ppm, save_eval_set, write_annotations, write_ppm, EvalSetManifest,
};
pub use render::{covers, footprint, hsv_to_rgb, paint_background, paint_object, BarAxis, Image, Placement};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Geometry {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Texture {
    Solid,
    Striped,
    Dotted,
}

pub const GEOMETRIES: [Geometry; 6] = [
    Geometry::Circle,
    Geometry::Square,
    Geometry::Triangle,
    Geometry::Cross,
    Geometry::Ring,
    Geometry::Bar,
];
pub const TEXTURES: [Texture; 3] = [Texture::Solid, Texture::Striped, Texture::Dotted];
pub const NUM_CLASSES: usize = 18;
pub const HUE_BUCKETS: usize = 3;

/// Held out from training: every ring plus the dotted cross.
pub const NOVEL_CLASSES: [usize; 4] = [11, 12, 13, 14];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeClass {
    pub id: usize,
    pub geometry: Geometry,
    pub texture: Texture,
    pub hue_bucket: usize,
}

impl ShapeClass {
    /// Class `id = 3·geometry + texture`. Hue buckets are shared so colour
    /// alone never identifies a class.
    pub fn get(id: usize) -> Result<Self> {
        if id >= NUM_CLASSES {
            return invalid(format!("class id {id} out of range"));
        }
        let (gi, ti) = (id / 3, id % 3);
        Ok(Self {
            id,
            geometry: GEOMETRIES[gi],
            texture: TEXTURES[ti],
            hue_bucket: (gi + ti) % HUE_BUCKETS,
        })
    }

    pub fn all() -> Vec<Self> {
        (0..NUM_CLASSES).map(|i| Self::get(i).expect("id in range")).collect()
    }

    /// Instance colour: bucket hue with jitter, saturated and bright.
    pub fn sample_color(&self, rng: &mut ChaCha8Rng) -> [u8; 3] {
        let hue = self.hue_bucket as f64 / HUE_BUCKETS as f64 + rng.gen_range(-0.05..0.05);
        hsv_to_rgb(hue, rng.gen_range(0.6..0.9), rng.gen_range(0.75..1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    pub fn classes(self) -> Vec<usize> {
        (0..NUM_CLASSES)
            .filter(|c| NOVEL_CLASSES.contains(c) == (self == Split::Novel))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Novel => "novel",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            _ => Err(crate::Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Mixes a base seed with a stream tag and an index (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_QUERY: u64 = 1;
const STREAM_SUPPORT: u64 = 2;
const STREAM_EPISODE: u64 = 3;
const STREAM_EVAL: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub support_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    pub max_overlap: f64,
    pub placement_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            support_size: 64,
            min_objects: 1,
            max_objects: 5,
            min_object_size: 12.0,
            max_object_size: 96.0,
            max_overlap: 0.3,
            placement_retries: 50,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return invalid("object count range must satisfy 1 <= min <= max");
        }
        if !(self.min_object_size > 0.0 && self.min_object_size <= self.max_object_size) {
            return invalid("object size range must satisfy 0 < min <= max");
        }
        if self.max_object_size > self.image_size as f64 {
            return invalid("objects cannot exceed the image");
        }
        if self.image_size == 0 || self.support_size == 0 {
            return invalid("image sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BoxXYXY,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub seed: u64,
}

impl Scene {
    pub fn classes_present(&self) -> BTreeSet<usize> {
        self.annotations.iter().map(|a| a.class_id).collect()
    }

    pub fn boxes_of(&self, class_id: usize) -> Vec<BoxXYXY> {
        self.annotations
            .iter()
            .filter(|a| a.class_id == class_id)
            .map(|a| a.bbox)
            .collect()
    }
}

/// Renders up to `max_objects` shapes drawn from `pool`. The first object is
/// `first` when given. Objects overlapping an earlier one by more than
/// `max_overlap` IoU are re-placed, and dropped after bounded retries.
pub fn generate_scene_with(seed: u64, pool: &[usize], first: Option<usize>, cfg: &SceneConfig) -> Result<Scene> {
    if pool.is_empty() {
        return invalid("empty class pool");
    }
    let classes = pool.iter().map(|&c| ShapeClass::get(c)).collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let mut image = Image::filled(size, size, [0, 0, 0]);
    paint_background(&mut image, &mut rng);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(n);
    for k in 0..n {
        let class = match (k, first) {
            (0, Some(c)) => ShapeClass::get(c)?,
            _ => *classes.choose(&mut rng).expect("pool is nonempty"),
        };
        let color = class.sample_color(&mut rng);
        for _ in 0..cfg.placement_retries {
            let (lo, hi) = (cfg.min_object_size.ln(), cfg.max_object_size.ln());
            let s = rng.gen_range(lo..=hi).exp().round();
            let axis = if rng.gen_bool(0.5) {
                BarAxis::Horizontal
            } else {
                BarAxis::Vertical
            };
            let probe = Placement::for_geometry(class.geometry, s, axis, 0.0, 0.0);
            let x0 = rng.gen_range(0.0..=(size as f64 - probe.w)).round();
            let y0 = rng.gen_range(0.0..=(size as f64 - probe.h)).round();
            let p = Placement::for_geometry(class.geometry, s, axis, x0, y0);
            let Some(bbox) = footprint(class.geometry, &p, size, size) else {
                continue;
            };
            if annotations.iter().any(|a| iou_unchecked(&a.bbox, &bbox) > cfg.max_overlap) {
                continue;
            }
            paint_object(&mut image, &class, &p, color);
            annotations.push(Annotation {
                class_id: class.id,
                bbox,
            });
            break;
        }
    }
    if annotations.is_empty() {
        return invalid(format!("scene {seed} placed no objects"));
    }
    Ok(Scene {
        image,
        annotations,
        seed,
    })
}

pub fn generate_scene(seed: u64, pool: &[usize], cfg: &SceneConfig) -> Result<Scene> {
    generate_scene_with(seed, pool, None, cfg)
}

/// A support patch: one instance of `class_id` on its own background, cropped
/// square with a jittered margin and resized to `support_size`.
pub fn render_support(class_id: usize, seed: u64, cfg: &SceneConfig) -> Result<Image> {
    let single = SceneConfig {
        min_objects: 1,
        max_objects: 1,
        ..cfg.clone()
    };
    let scene = generate_scene_with(seed, &[class_id], Some(class_id), &single)?;
    let b = scene.annotations[0].bbox;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SUPPORT, 0));
    let margin: f64 = rng.gen_range(0.1..0.3);
    let side = b.width().max(b.height()) * (1.0 + 2.0 * margin);
    let cx = (b.x1 + b.x2) / 2.0 + rng.gen_range(-0.05..0.05) * side;
    let cy = (b.y1 + b.y2) / 2.0 + rng.gen_range(-0.05..0.05) * side;
    let fill = scene.image.get(0, 0);
    Ok(scene
        .image
        .crop_square(cx, cy, side, fill)
        .resize_nearest(cfg.support_size, cfg.support_size))
}

/// One query/support task. `gts` holds the query boxes of the target class.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub query: Scene,
    pub support: Image,
    pub class_id: usize,
    pub gts: Vec<BoxXYXY>,
}

#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    pub seed: u64,
    pub classes: Vec<usize>,
    pub scene: SceneConfig,
    /// Fraction of episodes whose target class is absent from the query.
    pub negative_fraction: f64,
}

impl EpisodeSampler {
    pub fn new(seed: u64, split: Split, scene: SceneConfig) -> Self {
        Self {
            seed,
            classes: split.classes(),
            scene,
            negative_fraction: 0.0,
        }
    }

    /// Episode `index` of the stream; a pure function of `(seed, index)`.
    pub fn sample(&self, index: u64) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_EPISODE, index));
        let query = generate_scene(derive_seed(self.seed, STREAM_QUERY, index), &self.classes, &self.scene)?;
        let present: Vec<usize> = query.classes_present().into_iter().collect();
        let absent: Vec<usize> = self.classes.iter().copied().filter(|c| !present.contains(c)).collect();
        let negative = self.negative_fraction > 0.0 && !absent.is_empty() && rng.gen_bool(self.negative_fraction);
        let class_id = if negative {
            *absent.choose(&mut rng).expect("nonempty")
        } else {
            *present.choose(&mut rng).expect("scenes have objects")
        };
        let support = render_support(class_id, derive_seed(self.seed, STREAM_SUPPORT, index), &self.scene)?;
        let gts = query.boxes_of(class_id);
        Ok(Episode {
            query,
            support,
            class_id,
            gts,
        })
    }
}

/// One support patch per class, fixed by `seed`.
pub fn fixed_seed_supports(classes: &[usize], seed: u64, cfg: &SceneConfig) -> Result<BTreeMap<usize, Image>> {
    classes
        .iter()
        .map(|&c| Ok((c, render_support(c, derive_seed(seed, STREAM_SUPPORT, c as u64), cfg)?)))
        .collect()
}

/// Scenes drawn from the split's classes; one episode per class present in
/// each scene, all sharing the fixed per-class supports.
pub fn build_eval_set(split: Split, n_scenes: usize, seed: u64, support_seed: u64, cfg: &SceneConfig) -> Result<Vec<Episode>> {
    let classes = split.classes();
    let supports = fixed_seed_supports(&classes, support_seed, cfg)?;
    let mut episodes = Vec::new();
    for i in 0..n_scenes {
        let scene = generate_scene(derive_seed(seed, STREAM_EVAL, i as u64), &classes, cfg)?;
        for c in scene.classes_present() {
            episodes.push(Episode {
                query: scene.clone(),
                support: supports[&c].clone(),
                class_id: c,
                gts: scene.boxes_of(c),
            });
        }
    }
    Ok(episodes)
}
