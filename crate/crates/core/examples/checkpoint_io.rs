//! Saves a freshly initialised detector, reloads it and checks that both
//! produce identical detections.

use anyhow::{ensure, Result};
use saft::checkpoint;
use saft::config::RunConfig;
use saft::data::Split;
use saft::model::Model;
use saft::run::{eval_episodes, load_model};

fn main() -> Result<()> {
    let cfg = RunConfig::load(None, &["eval_scenes=3".to_string()])?;
    let (model, store) = Model::new::<f32>(&cfg.model, 11)?;
    let dir = std::env::temp_dir().join("saft-checkpoint-io");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(checkpoint::file_name(0));
    checkpoint::save(&path, &store)?;
    println!(
        "wrote {} tensors, {} values, {} bytes",
        store.len(),
        store.numel(),
        std::fs::metadata(&path)?.len()
    );

    let (_, reloaded) = load_model(&RunConfig { seed: 99, ..cfg.clone() }, &path)?;
    let mut decode = cfg.eval.decode;
    decode.score_thresh = 0.0;
    for ep in eval_episodes(&cfg, Split::Novel)?.iter().take(3) {
        let a = model.detect(&store, ep, &decode)?;
        let b = model.detect(&reloaded, ep, &decode)?;
        ensure!(a == b, "reloaded detector disagrees");
        println!("class {}: {} identical detections", ep.class_id, a.len());
    }
    Ok(())
}
