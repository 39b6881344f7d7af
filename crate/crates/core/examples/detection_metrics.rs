//! Non-maximum suppression, greedy matching and all-points AP on a toy case.

use anyhow::Result;
use saft::boxes::BoxXYXY;
use saft::head::nms;
use saft::metrics::{average_precision, match_detections};

fn main() -> Result<()> {
    let gts = [BoxXYXY::new(10.0, 10.0, 40.0, 40.0)?, BoxXYXY::new(60.0, 60.0, 90.0, 100.0)?];
    let boxes = [
        BoxXYXY::new(11.0, 9.0, 41.0, 40.0)?,
        BoxXYXY::new(12.0, 12.0, 40.0, 42.0)?,
        BoxXYXY::new(100.0, 5.0, 120.0, 30.0)?,
        BoxXYXY::new(58.0, 62.0, 91.0, 99.0)?,
    ];
    let scores = [0.9, 0.8, 0.7, 0.6];

    let kept = nms(&boxes, &scores, 0.5);
    println!("kept after NMS: {kept:?}");
    let ranked: Vec<BoxXYXY> = kept.iter().map(|&i| boxes[i]).collect();
    let flags = match_detections(&ranked, &gts, 0.5);
    println!("true positives: {flags:?}");
    println!("AP50 = {:.4}", average_precision(&flags, gts.len()).unwrap_or(0.0));

    let no_nms = match_detections(&boxes, &gts, 0.5);
    println!(
        "without NMS: {no_nms:?}, AP50 = {:.4}",
        average_precision(&no_nms, gts.len()).unwrap_or(0.0)
    );
    Ok(())
}
