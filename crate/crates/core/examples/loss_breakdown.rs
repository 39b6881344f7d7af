//! Target assignment and the combined loss of an untrained detector on one
//! training episode.

use anyhow::Result;
use saft::data::{EpisodeSampler, SceneConfig, Split};
use saft::head::{assign_targets, LevelRanges};
use saft::loss::LossConfig;
use saft::model::{Model, ModelConfig};
use saft::tensor::Graph;

fn main() -> Result<()> {
    let ep = EpisodeSampler::new(3, Split::Base, SceneConfig::default()).sample(0)?;
    let (model, store) = Model::new::<f64>(&ModelConfig::default(), 0)?;
    let ranges = LevelRanges::default();

    let mut g = Graph::new(&store);
    let out = model.forward(&mut g, &ep.query.image.to_tensor(), &ep.support.to_tensor())?;
    let targets = assign_targets(&out.head.grid(&g), &ep.gts, &ranges, 128.0)?;
    for (j, h, w) in out.head.grid(&g) {
        let n = targets.positives().filter(|&i| targets.levels[i] == j).count();
        println!("level {j}: {h}x{w} locations, {n} positive");
    }
    for i in targets.positives() {
        let d = targets.distances[i];
        println!(
            "  at {:?}: l,t,r,b = {:.0},{:.0},{:.0},{:.0}  centerness {:.3}",
            targets.locations[i], d[0], d[1], d[2], d[3], targets.centerness[i]
        );
    }

    let mut g = Graph::new(&store);
    let (_, b) = model.episode_loss(&mut g, &ep, &ranges, &LossConfig::default())?;
    println!(
        "cls {:.4}  reg {:.4}  ctn {:.4}  total {:.4}  ({} locations, {} positive)",
        b.cls, b.reg, b.ctn, b.total, b.n, b.n_pos
    );
    Ok(())
}
