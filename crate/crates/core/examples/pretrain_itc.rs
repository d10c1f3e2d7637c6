//! First training phase: a cell resampler and a text projection learn a
//! shared space with the symmetric contrastive loss, backbone frozen.

use pbskit::train::{caption_accuracy, run_phase, DataSource, ModelState, PhasePlan, Schedule, TOY_BASE_LR};

pub fn run_example() -> anyhow::Result<(f64, f64)> {
    let seed = 5;
    let data = DataSource::SynthCaptions {
        classes: 8,
        per_class: 8,
        tokens: 6,
        dim: 16,
        noise: 0.3,
    };
    let captions = data.captions(seed).expect("caption source");
    let mut state = ModelState::new(16, 4, seed);
    let before = caption_accuracy(&state, &captions)?;
    let trace = run_phase(&PhasePlan::repr_learning(data), &mut state, &Schedule::new(400).with_base_lr(TOY_BASE_LR), seed)?;
    let after = caption_accuracy(&state, &captions)?;
    let head = trace.rows.iter().take(20).filter_map(|r| r.loss_total).sum::<f64>() / 20.0;
    let tail = trace.rows.iter().rev().take(20).filter_map(|r| r.loss_total).sum::<f64>() / 20.0;
    println!("ITC loss (20-step mean) {head:.3} -> {tail:.3}");
    println!("image-to-text top-1 {:.0}% -> {:.0}%", 100.0 * before, 100.0 * after);
    Ok((before, after))
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
