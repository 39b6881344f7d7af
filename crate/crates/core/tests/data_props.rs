use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saft::data::{
    build_eval_set, fixed_seed_supports, generate_scene, load_eval_set, paint_background, save_eval_set,
    EpisodeSampler, Image, SceneConfig, Split, NOVEL_CLASSES, NUM_CLASSES,
};
use saft::head::LevelRanges;

fn all_classes() -> Vec<usize> {
    (0..NUM_CLASSES).collect()
}

#[test]
fn same_seed_gives_identical_scenes_within_bounds() {
    let cfg = SceneConfig::default();
    for seed in 0..30 {
        let a = generate_scene(seed, &all_classes(), &cfg).unwrap();
        let b = generate_scene(seed, &all_classes(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!((1..=5).contains(&a.annotations.len()));
        for ann in &a.annotations {
            let r = ann.bbox;
            assert!(r.x1 >= 0.0 && r.y1 >= 0.0 && r.x2 <= 128.0 && r.y2 <= 128.0);
            assert!(r.x1 < r.x2 && r.y1 < r.y2);
        }
    }
    assert_ne!(
        generate_scene(1, &all_classes(), &cfg).unwrap().image,
        generate_scene(2, &all_classes(), &cfg).unwrap().image
    );
}

/// The scene's background depends only on the seed, so diffing against a
/// freshly painted background isolates the object pixels.
fn changed_pixel_box(seed: u64, img: &Image) -> Option<(usize, usize, usize, usize)> {
    let mut bg = Image::filled(img.width, img.height, [0, 0, 0]);
    paint_background(&mut bg, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut tight: Option<(usize, usize, usize, usize)> = None;
    for y in 0..img.height {
        for x in 0..img.width {
            if img.get(x, y) != bg.get(x, y) {
                tight = Some(match tight {
                    None => (x, y, x + 1, y + 1),
                    Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x + 1), d.max(y + 1)),
                });
            }
        }
    }
    tight
}

#[test]
fn single_object_boxes_tightly_bound_painted_pixels() {
    let cfg = SceneConfig {
        min_objects: 1,
        max_objects: 1,
        ..SceneConfig::default()
    };
    for seed in 0..200u64 {
        let class = (seed as usize) % NUM_CLASSES;
        let scene = generate_scene(seed, &[class], &cfg).unwrap();
        let b = scene.annotations[0].bbox;
        let (x1, y1, x2, y2) = changed_pixel_box(seed, &scene.image).expect("object painted");
        for (got, want) in [(x1, b.x1), (y1, b.y1), (x2, b.x2), (y2, b.y2)] {
            assert!((got as f64 - want).abs() <= 1.0, "seed {seed} class {class}: {:?} vs {b:?}", (x1, y1, x2, y2));
        }
    }
}

#[test]
fn painted_pixels_stay_inside_annotated_boxes() {
    let cfg = SceneConfig::default();
    for seed in 0..60u64 {
        let scene = generate_scene(seed, &all_classes(), &cfg).unwrap();
        let mut bg = Image::filled(128, 128, [0, 0, 0]);
        paint_background(&mut bg, &mut ChaCha8Rng::seed_from_u64(seed));
        for y in 0..128 {
            for x in 0..128 {
                if scene.image.get(x, y) != bg.get(x, y) {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    assert!(scene.annotations.iter().any(|a| a.bbox.contains_strictly(cx, cy)));
                }
            }
        }
    }
}

#[test]
fn every_level_receives_a_tenth_of_objects() {
    let cfg = SceneConfig::default();
    let ranges = LevelRanges::default();
    let mut total = 0usize;
    let mut per_level = [0usize; 3];
    for seed in 0..500u64 {
        for a in generate_scene(seed, &all_classes(), &cfg).unwrap().annotations {
            total += 1;
            let reach = a.bbox.width().max(a.bbox.height()) / 2.0;
            for (slot, j) in per_level.iter_mut().zip(4..=6) {
                let (lo, hi) = ranges.get(j).unwrap();
                if reach > lo && reach <= hi {
                    *slot += 1;
                }
            }
        }
    }
    for (j, n) in (4..=6).zip(per_level) {
        assert!(n as f64 >= 0.1 * total as f64, "level {j}: {n} of {total}");
    }
}

#[test]
fn training_episodes_are_positive_base_episodes() {
    let sampler = EpisodeSampler::new(5, Split::Base, SceneConfig::default());
    let base: BTreeSet<usize> = Split::Base.classes().into_iter().collect();
    let mut seen = BTreeSet::new();
    for i in 0..1000 {
        let ep = sampler.sample(i).unwrap();
        assert!(base.contains(&ep.class_id));
        assert!(!ep.gts.is_empty());
        let of_class: Vec<_> = ep.query.annotations.iter().filter(|a| a.class_id == ep.class_id).map(|a| a.bbox).collect();
        assert_eq!(of_class, ep.gts);
        for a in &ep.query.annotations {
            assert!(!NOVEL_CLASSES.contains(&a.class_id), "novel object in training scene {i}");
        }
        assert_eq!((ep.support.width, ep.support.height), (64, 64));
        seen.insert(ep.class_id);
    }
    assert_eq!(seen, base);
}

#[test]
fn sampling_is_a_pure_function_of_seed_and_index() {
    let a = EpisodeSampler::new(3, Split::Base, SceneConfig::default());
    let b = EpisodeSampler::new(3, Split::Base, SceneConfig::default());
    for i in [0, 7, 123] {
        assert_eq!(a.sample(i).unwrap(), b.sample(i).unwrap());
    }
    assert_ne!(a.sample(0).unwrap(), a.sample(1).unwrap());
}

#[test]
fn negative_episodes_have_no_ground_truth() {
    let mut s = EpisodeSampler::new(8, Split::Base, SceneConfig::default());
    s.negative_fraction = 1.0;
    for i in 0..20 {
        let ep = s.sample(i).unwrap();
        assert!(ep.gts.is_empty());
        assert!(!ep.query.classes_present().contains(&ep.class_id));
    }
}

#[test]
fn fixed_supports_are_one_per_class_and_seeded() {
    let cfg = SceneConfig::default();
    let classes = Split::Novel.classes();
    let a = fixed_seed_supports(&classes, 11, &cfg).unwrap();
    let b = fixed_seed_supports(&classes, 11, &cfg).unwrap();
    let c = fixed_seed_supports(&classes, 12, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.keys().copied().collect::<Vec<_>>(), classes);
    assert!(a.iter().any(|(k, v)| c[k] != *v));
}

#[test]
fn eval_sets_respect_their_split_and_counts() {
    let cfg = SceneConfig::default();
    for split in [Split::Novel, Split::Base] {
        let eps = build_eval_set(split, 40, 21, 3, &cfg).unwrap();
        let allowed = split.classes();
        let mut expected = 0;
        let mut last_seed = None;
        for ep in &eps {
            assert!(allowed.contains(&ep.class_id));
            assert!(ep.query.annotations.iter().all(|a| allowed.contains(&a.class_id)));
            if last_seed != Some(ep.query.seed) {
                expected += ep.query.classes_present().len();
                last_seed = Some(ep.query.seed);
            }
        }
        assert_eq!(eps.len(), expected);
        let scenes: BTreeSet<u64> = eps.iter().map(|e| e.query.seed).collect();
        assert_eq!(scenes.len(), 40);
    }
}

#[test]
fn eval_set_survives_save_and_load() {
    let cfg = SceneConfig::default();
    let eps = build_eval_set(Split::Novel, 6, 2, 9, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_eval_set(dir.path(), Split::Novel, 9, &eps).unwrap();
    let (manifest, loaded) = load_eval_set(dir.path(), &cfg).unwrap();
    assert_eq!(manifest.split, Split::Novel);
    assert_eq!(manifest.episodes.len(), eps.len());
    assert_eq!(loaded, eps);
}
