//! Train the tiny WRN on a toy three-class patch problem with the
//! class-balanced loader, Nesterov momentum and the plateau schedule.
//!
//! cargo run --release --example train_toy

use gaitflow::nets::{train, NetworkSpec, TrainConfig, TrainSet};
use gaitflow::posepatch::PATCH_LEN;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Class 0: horizontal stripes, 1: vertical stripes, 2: checkerboard. The
/// training stream jitters the phase.
fn render(item: usize, rng: Option<&mut ChaCha8Rng>) -> gaitflow::Result<Vec<f32>> {
    let class = item % 3;
    let shift = rng.map_or(0, |r| r.random_range(0..8));
    let side = 48;
    Ok((0..PATCH_LEN)
        .map(|i| {
            let (x, y) = ((i % side + shift) / 4, (i / side % side + shift) / 4);
            let on = match class {
                0 => y % 2 == 0,
                1 => x % 2 == 0,
                _ => (x + y) % 2 == 0,
            };
            if on { 0.8 } else { 0.2 }
        })
        .collect())
}

fn main() -> gaitflow::Result<()> {
    let by_class: Vec<Vec<usize>> = (0..3).map(|c| (0..60).map(|k| 3 * k + c).collect()).collect();
    let cfg = TrainConfig {
        batch_size: 12,
        batches_per_epoch: Some(10),
        max_epochs: 6,
        plateau_patience: 2,
        learning_rate: 0.05,
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train(&NetworkSpec::tiny_wrn(3), &TrainSet { by_class, render: &render }, &cfg)?;
    print!("{}", out.log_text());
    Ok(())
}
