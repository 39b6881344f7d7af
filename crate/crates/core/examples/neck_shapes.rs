//! Builds the detector with every neck kind and prints the fused pyramid
//! shapes and parameter counts on one episode.

use anyhow::Result;
use saft::data::{EpisodeSampler, SceneConfig, Split};
use saft::model::{Model, ModelConfig};
use saft::neck::{NeckConfig, ScaleStrategy};
use saft::tensor::Graph;

fn main() -> Result<()> {
    let ep = EpisodeSampler::new(0, Split::Base, SceneConfig::default()).sample(0)?;
    let kinds = ["reweighting", "correlation", "fpn+reweighting", "vfm+correlation", "fpn+hfm", "vfm+hfm"];
    for kind in kinds {
        for scale in [ScaleStrategy::OneToAll, ScaleStrategy::Corresponding] {
            if scale == ScaleStrategy::Corresponding && !kind.ends_with("hfm") {
                continue;
            }
            let neck = NeckConfig {
                kind: kind.parse()?,
                scale,
                support_levels: if scale == ScaleStrategy::OneToAll { vec![5] } else { vec![4, 5, 6] },
                ..NeckConfig::default()
            };
            let cfg = ModelConfig { neck, ..ModelConfig::default() };
            let (model, store) = Model::new::<f32>(&cfg, 0)?;
            let mut g = Graph::inference(&store);
            let out = model.forward(&mut g, &ep.query.image.to_tensor(), &ep.support.to_tensor())?;
            let shapes: Vec<String> = out
                .fused
                .shapes(&g)
                .iter()
                .map(|(j, s)| format!("P{j} {}x{}x{}", s[0], s[1], s[2]))
                .collect();
            println!("{kind:<16} {scale:<13} {:>7} params  {}", store.numel(), shapes.join("  "));
        }
    }
    Ok(())
}
