//! Central-difference check of every primitive, attention block, neck kind and
//! the full model. Set `SAFT_FLOAT=f32` to run in single precision.

use anyhow::Result;
use saft::gradcheck::{format_row, registered_cases, run_cases, GRAD_TOLERANCE};
use saft::run::FloatMode;

fn main() -> Result<()> {
    let start = std::time::Instant::now();
    let print = |r: &saft::gradcheck::GradRow| println!("{}", format_row(r));
    let rows = match FloatMode::from_env()? {
        FloatMode::F64 => run_cases(&registered_cases::<f64>(), print)?,
        FloatMode::F32 => run_cases(&registered_cases::<f32>(), print)?,
    };
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!(
        "{} cases, {failed} above {GRAD_TOLERANCE:e}, {:.1}s",
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
