//! Trains briefly, then writes fused-feature heatmaps and a detection overlay
//! for one novel episode.
//!
//! `cargo run --release --example feature_heatmaps -- [key=value ...]`

use anyhow::Result;
use saft::config::RunConfig;
use saft::run;

fn main() -> Result<()> {
    let mut sets = vec!["iterations=200".to_string(), "out=runs/heatmaps".to_string()];
    sets.extend(std::env::args().skip(1));
    let cfg = RunConfig::load(None, &sets)?;
    run::train(&cfg, &cfg.out, |_| {})?;
    let v = run::visualize(&cfg, &cfg.out)?;
    for (level, path) in &v.heatmaps {
        println!("level {level}: {}", path.display());
    }
    println!(
        "overlay: {} (class {}, {} ground-truth boxes in green, {} detections in red)",
        v.overlay.display(),
        v.episode.class_id,
        v.episode.gts.len(),
        v.detections
    );
    Ok(())
}
