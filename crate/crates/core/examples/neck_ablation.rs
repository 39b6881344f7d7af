//! Trains and evaluates each neck over several seeds and prints seed-mean
//! novel AP50, in the order of the fusion-neck ablation.
//!
//! `cargo run --release --example neck_ablation -- [iterations=N] [seeds=0,1,2] [key=value ...]`

use anyhow::Result;
use saft::config::RunConfig;
use saft::run;

const VARIANTS: [(&str, &[&str]); 5] = [
    ("VFM+HFM", &["neck=vfm+hfm"]),
    ("FPN+HFM", &["neck=fpn+hfm"]),
    ("VFM+correlation", &["neck=vfm+correlation"]),
    ("VFM+reweighting", &["neck=vfm+reweighting"]),
    ("VFM+HFM, N=2", &["neck=vfm+hfm", "blocks=2"]),
];

fn main() -> Result<()> {
    let mut seeds = vec![0u64, 1, 2];
    let mut sets = Vec::new();
    for a in std::env::args().skip(1) {
        match a.strip_prefix("seeds=") {
            Some(list) => seeds = list.split(',').map(str::parse).collect::<Result<_, _>>()?,
            None => sets.push(a),
        }
    }
    let root = std::env::temp_dir().join("saft-ablation");
    for (name, variant) in VARIANTS {
        let mut aps = Vec::new();
        for &seed in &seeds {
            let mut all = sets.clone();
            all.extend(variant.iter().map(|s| s.to_string()));
            all.push(format!("seed={seed}"));
            let cfg = RunConfig::load(None, &all)?;
            let out = root.join(format!("{}-{seed}", name.replace([' ', ',', '='], "_")));
            run::train(&cfg, &out, |_| {})?;
            aps.push(run::eval(&cfg, &out)?.mean_ap50() * 100.0);
        }
        let mean = aps.iter().sum::<f64>() / aps.len() as f64;
        let per: Vec<String> = aps.iter().map(|a| format!("{a:.1}")).collect();
        println!("{name:<16} novel AP50 {mean:5.1}  (seeds: {})", per.join(", "));
    }
    Ok(())
}
