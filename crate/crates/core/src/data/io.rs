use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{fixed_seed_supports, Annotation, Episode, Image, Scene, SceneConfig, Split};
use crate::boxes::BoxXYXY;
use crate::error::{Error, Result};

/// Binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    Ok(())
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Invalid("truncated PPM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    if header_token(&bytes, &mut pos)? != "P6" {
        return Err(Error::Invalid(format!("{} is not a binary PPM", path.display())));
    }
    let mut num = || -> Result<usize> {
        let t = header_token(&bytes, &mut pos)?;
        t.parse().map_err(|_| Error::Invalid(format!("bad PPM header field {t:?}")))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(Error::Invalid(format!("unsupported PPM maxval {maxval}")));
    }
    let data = &bytes[pos + 1..];
    if data.len() < w * h * 3 {
        return Err(Error::Invalid("truncated PPM pixel data".into()));
    }
    Image::from_pixels(w, h, data[..w * h * 3].to_vec())
}

/// One line per object: `class_id x1 y1 x2 y2`.
pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for a in annotations {
        writeln!(f, "{} {} {} {} {}", a.class_id, a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2)?;
    }
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(Error::Invalid(format!("annotation line needs 5 fields: {line:?}")));
        }
        let bad = || Error::Invalid(format!("bad annotation line {line:?}"));
        let class_id = fields[0].parse().map_err(|_| bad())?;
        let mut v = [0.0; 4];
        for (slot, s) in v.iter_mut().zip(&fields[1..]) {
            *slot = s.parse().map_err(|_| bad())?;
        }
        out.push(Annotation {
            class_id,
            bbox: BoxXYXY::new(v[0], v[1], v[2], v[3])?,
        });
    }
    Ok(out)
}

/// Contents of an eval-set manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSetManifest {
    pub split: Split,
    pub support_seed: u64,
    /// `(scene path relative to the manifest, scene seed, class id)`.
    pub episodes: Vec<(String, u64, usize)>,
}

/// Writes every distinct scene as `scenes/scene-NNNN.{ppm,txt}` plus `manifest.txt`.
pub fn save_eval_set(dir: &Path, split: Split, support_seed: u64, episodes: &[Episode]) -> Result<EvalSetManifest> {
    fs::create_dir_all(dir.join("scenes"))?;
    let mut by_seed: BTreeMap<u64, String> = BTreeMap::new();
    let mut manifest = EvalSetManifest {
        split,
        support_seed,
        episodes: Vec::with_capacity(episodes.len()),
    };
    for ep in episodes {
        let next = by_seed.len();
        let rel = match by_seed.get(&ep.query.seed) {
            Some(r) => r.clone(),
            None => {
                let rel = format!("scenes/scene-{next:04}.ppm");
                write_ppm(&dir.join(&rel), &ep.query.image)?;
                write_annotations(&dir.join(rel.replace(".ppm", ".txt")), &ep.query.annotations)?;
                by_seed.insert(ep.query.seed, rel.clone());
                rel
            }
        };
        manifest.episodes.push((rel, ep.query.seed, ep.class_id));
    }
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    writeln!(f, "split {}", split.name())?;
    writeln!(f, "support_seed {support_seed}")?;
    for (rel, seed, class) in &manifest.episodes {
        writeln!(f, "episode {rel} {seed} {class}")?;
    }
    Ok(manifest)
}

fn parse_manifest(text: &str) -> Result<EvalSetManifest> {
    let mut split = None;
    let mut support_seed = None;
    let mut episodes = Vec::new();
    for line in text.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Invalid(format!("bad manifest line {line:?}"));
        match f.as_slice() {
            [] => {}
            ["split", s] => split = Some(s.parse()?),
            ["support_seed", s] => support_seed = Some(s.parse().map_err(|_| bad())?),
            ["episode", path, seed, class] => episodes.push((
                path.to_string(),
                seed.parse().map_err(|_| bad())?,
                class.parse().map_err(|_| bad())?,
            )),
            _ => return Err(bad()),
        }
    }
    Ok(EvalSetManifest {
        split: split.ok_or_else(|| Error::Invalid("manifest lacks a split".into()))?,
        support_seed: support_seed.ok_or_else(|| Error::Invalid("manifest lacks a support seed".into()))?,
        episodes,
    })
}

/// Reloads a saved eval set; supports are regenerated from the support seed.
pub fn load_eval_set(dir: &Path, cfg: &SceneConfig) -> Result<(EvalSetManifest, Vec<Episode>)> {
    let manifest = parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let supports = fixed_seed_supports(&manifest.split.classes(), manifest.support_seed, cfg)?;
    let mut scenes: BTreeMap<String, Scene> = BTreeMap::new();
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for (rel, seed, class) in &manifest.episodes {
        if !scenes.contains_key(rel) {
            let image = read_ppm(&dir.join(rel))?;
            let annotations = read_annotations(&dir.join(rel.replace(".ppm", ".txt")))?;
            scenes.insert(
                rel.clone(),
                Scene {
                    image,
                    annotations,
                    seed: *seed,
                },
            );
        }
        let scene = &scenes[rel];
        let support = supports
            .get(class)
            .ok_or_else(|| Error::Invalid(format!("class {class} is not in the {} split", manifest.split.name())))?;
        episodes.push(Episode {
            query: scene.clone(),
            support: support.clone(),
            class_id: *class,
            gts: scene.boxes_of(*class),
        });
    }
    Ok((manifest, episodes))
}
