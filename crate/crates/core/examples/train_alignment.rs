//! Phase-2 alignment on synthetic patch/cell token pairs, with and without
//! the alignment losses.
//!
//! Run with `cargo run --release --example train_alignment`.

use pbskit::train::{
    alignment_losses, retrieval_accuracy, run_phase, DataSource, ModelState, PhasePlan, Schedule, TOY_BASE_LR,
};

pub fn run_example() -> anyhow::Result<(f64, f64, f64)> {
    let seed = 7;
    let (tokens, dim) = (8, 16);
    let data = DataSource::SynthPaired {
        pairs: 256,
        tokens,
        dim,
        noise: 0.0,
        cell_free: 0,
    };
    let plan = PhasePlan::cell_patch_align(data);
    let schedule = Schedule::new(500).with_base_lr(TOY_BASE_LR);
    let dataset = data.paired(seed).expect("paired source");

    let mut state = ModelState::new(dim, tokens, seed);
    let (_, _, before) = alignment_losses(&state, &dataset, plan.loss.lambda_local)?;
    let trace = run_phase(&plan, &mut state, &schedule, seed)?;
    let (g, l, after) = alignment_losses(&state, &dataset, plan.loss.lambda_local)?;
    let acc = retrieval_accuracy(&state, &dataset)?;
    println!("combined loss {before:.4} -> {after:.4} (global {g:.4}, local {l:.4})");
    println!("top-1 cell-token retrieval {:.1}%", 100.0 * acc);
    println!("trace rows: {}", trace.rows.len());

    let mut ablated = ModelState::new(dim, tokens, seed);
    let ab = run_phase(&plan.clone().without_alignment(), &mut ablated, &schedule, seed)?;
    println!(
        "without alignment: {} steps, losses recorded: {}",
        ab.rows.len(),
        ab.rows.iter().any(|r| r.loss_total.is_some())
    );
    Ok((before, after, acc))
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
