//! Tile a synthetic smear, score each tile, and pick slide-context patches.
//!
//! The synthetic slide has a sparse band on the left, a usable monolayer in
//! the middle, and an overcrowded band on the right, so QC keeps the middle.

use pbskit::slide::{
    sample_slide_context, score_tiles, tile_grid, HeuristicScorer, SlideImage, TilePixels, CONTEXT_PATCHES,
    QC_THRESHOLD, TILE_SIZE,
};
use pbskit::synth::{SynthConfig, SyntheticSlide};

pub fn run_example() -> anyhow::Result<(usize, usize)> {
    let slide = SyntheticSlide::generate(&SynthConfig::new(2048, 1024, 7));
    let tiles = tile_grid(&slide, TILE_SIZE)?;
    let scorer = HeuristicScorer::default();
    let scored = score_tiles(&slide, &tiles, &scorer, QC_THRESHOLD)?;

    println!("{} is {}x{}, {} tiles", slide.id(), slide.width(), slide.height(), tiles.len());
    for t in &scored {
        let b = scorer.breakdown(&TilePixels::from_slide(&slide, &t.address)?);
        println!(
            "  {:<28} fg {:.2} sharp {:.2} quality {:.3} {}",
            t.address.to_string(),
            b.foreground_fraction,
            b.sharpness,
            t.quality,
            if t.kept { "keep" } else { "drop" }
        );
    }
    let kept: Vec<_> = scored.iter().filter(|t| t.kept).map(|t| t.address.clone()).collect();
    let context = sample_slide_context(&kept, CONTEXT_PATCHES, 7);
    println!("slide context: {} of {} kept tiles", context.len(), kept.len());
    Ok((tiles.len(), kept.len()))
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
