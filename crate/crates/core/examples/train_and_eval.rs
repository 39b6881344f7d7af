//! Meta-trains on base-class episodes, then evaluates novel and base AP50.
//!
//! Arguments are `key=value` overrides, for example
//! `cargo run --release --example train_and_eval -- iterations=300 neck=fpn+hfm out=runs/short`.

use anyhow::Result;
use saft::config::RunConfig;
use saft::data::Split;
use saft::run::{self, eval_episodes, evaluate_model};

fn main() -> Result<()> {
    let sets: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::load(None, &sets)?;
    println!("{} for {} iterations, batch {}", cfg.get("neck")?, cfg.train.iterations, cfg.train.batch);
    let outcome = run::train(&cfg, &cfg.out, |l| {
        if l.iter % 100 == 0 {
            println!("iter {:>5}  total {:.4}", l.iter, l.loss.total);
        }
    })?;
    let window = outcome.log.len().min(100);
    let head: f64 = outcome.log[..window].iter().map(|l| l.loss.total).sum::<f64>() / window as f64;
    let tail: f64 = outcome.log[outcome.log.len() - window..].iter().map(|l| l.loss.total).sum::<f64>() / window as f64;
    println!("mean loss over {window} iterations: first {head:.4}, last {tail:.4}");

    for split in [Split::Novel, Split::Base] {
        let episodes = eval_episodes(&cfg, split)?;
        let report = evaluate_model(&outcome.model, &outcome.store, &cfg, &episodes)?;
        print!("{}", report.summary(split.name()));
    }
    Ok(())
}
