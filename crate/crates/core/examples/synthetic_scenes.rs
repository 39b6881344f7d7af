//! Renders a few query scenes, a training episode and a saved novel eval set.
//!
//! `cargo run --release --example synthetic_scenes -- [OUT_DIR]`

use std::path::PathBuf;

use anyhow::Result;
use saft::data::{
    build_eval_set, generate_scene, save_eval_set, write_annotations, write_ppm, EpisodeSampler, SceneConfig,
    ShapeClass, Split,
};

fn main() -> Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/scenes".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = SceneConfig::default();

    let base = Split::Base.classes();
    for seed in 0..4 {
        let scene = generate_scene(seed, &base, &cfg)?;
        write_ppm(&out.join(format!("scene-{seed}.ppm")), &scene.image)?;
        write_annotations(&out.join(format!("scene-{seed}.txt")), &scene.annotations)?;
        let names: Vec<String> = scene
            .annotations
            .iter()
            .map(|a| {
                let c = ShapeClass::get(a.class_id).expect("valid class");
                format!("{:?}/{:?}", c.geometry, c.texture)
            })
            .collect();
        println!("scene {seed}: {}", names.join(", "));
    }

    let ep = EpisodeSampler::new(0, Split::Base, cfg.clone()).sample(0)?;
    write_ppm(&out.join("episode-query.ppm"), &ep.query.image)?;
    write_ppm(&out.join("episode-support.ppm"), &ep.support)?;
    println!("episode 0: target class {} with {} boxes", ep.class_id, ep.gts.len());

    let eval = build_eval_set(Split::Novel, 10, 1000, 7, &cfg)?;
    let manifest = save_eval_set(&out.join("novel-eval"), Split::Novel, 7, &eval)?;
    println!(
        "novel eval set: {} episodes over 10 scenes in {}",
        manifest.episodes.len(),
        out.join("novel-eval").display()
    );
    Ok(())
}
