//! Fits planted models over a few seeds, with and without the nonnegativity
//! constraint, and prints how well the ground truth comes back.
//!
//! cargo run --release -p partsplit-core --example planted

use std::time::Instant;

use partsplit::analysis::part_sparsity;
use partsplit::factorization::fit;
use partsplit::synthetic::{plant, recovery_score, PlantDims};
use partsplit::FitConfig;

fn main() -> partsplit::Result<()> {
    let dims = PlantDims {
        samples: 20,
        channels: 16,
        height: 8,
        width: 8,
    };
    println!("seed  nonneg  iters  rel_error  angle      mean_iou  sparsity  time");
    for seed in 0..5u64 {
        let (batch, truth) = plant(dims, (4, 4), 0.0, seed)?;
        for nonneg in [true, false] {
            let mut cfg = FitConfig::new(4, 4);
            cfg.seed = seed;
            cfg.nonneg = nonneg;
            let start = Instant::now();
            let model = fit(&batch, &cfg)?;
            let rel = (model.stats().final_loss / batch.squared_norm()).sqrt();
            let score = recovery_score(&model, &truth)?;
            let sparsity = part_sparsity(model.parts());
            println!(
                "{seed:<5} {nonneg:<7} {:<6} {rel:<10.2e} {:<10.2e} {:<9.3} {:<9.3} {:.2?}",
                model.stats().iterations,
                score.appearance_angle,
                score.mean_part_iou(),
                sparsity.iter().sum::<f64>() / sparsity.len() as f64,
                start.elapsed()
            );
        }
    }
    Ok(())
}
