//! Masks to cell crops: write 16-bit instance masks, read them back, extract
//! centered crops, and check the color classifier against the generator's
//! ground truth.

use std::collections::HashMap;

use pbskit::cells::{extract_cells, read_mask_png, write_mask_png, Annotations, ColorClassifier, Subtype};
use pbskit::slide::{score_tiles, tile_grid, HeuristicScorer, TilePixels, QC_THRESHOLD, TILE_SIZE};
use pbskit::synth::{CellKind, SynthConfig, SyntheticSlide};

pub fn run_example() -> anyhow::Result<f64> {
    let slide = SyntheticSlide::generate(&SynthConfig::new(2048, 1024, 11));
    let tiles = tile_grid(&slide, TILE_SIZE)?;
    let kept: Vec<_> = score_tiles(&slide, &tiles, &HeuristicScorer::default(), QC_THRESHOLD)?
        .into_iter()
        .filter(|t| t.kept)
        .map(|t| t.address)
        .collect();

    let dir = std::env::temp_dir().join(format!("pbskit-extract-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let classifier = ColorClassifier::default();
    let (mut right, mut total) = (0usize, 0usize);
    let mut confusion: HashMap<(Subtype, Subtype), usize> = HashMap::new();
    for tile in &kept {
        let (mask, globals) = slide.tile_mask(tile);
        let path = dir.join(format!("{}.png", tile.key()));
        write_mask_png(&path, &mask)?;
        let mask = read_mask_png(&path, tile.clone())?;
        let notes: Annotations = slide.tile_annotations(tile, &globals).into_iter().collect();
        let pixels = TilePixels::from_slide(&slide, tile)?;
        let cells = extract_cells(&pixels, &mask, &classifier, &notes, 2.0);
        for c in &cells {
            let local: usize = c.id.rsplit("__i").next().unwrap_or("0").parse()?;
            if let CellKind::Wbc(truth) = slide.cells[globals[local - 1] as usize - 1].kind {
                total += 1;
                right += usize::from(truth == c.subtype);
                *confusion.entry((truth, c.subtype)).or_default() += 1;
            }
        }
        println!("{tile}: {} white cells", cells.len());
        if let Some(c) = cells.first() {
            println!("  e.g. {} {:?} conf {:.2} crop {:?}", c.id, c.subtype, c.confidence, c.crop_box);
        }
    }
    std::fs::remove_dir_all(&dir)?;
    let acc = right as f64 / total.max(1) as f64;
    println!("classifier agrees with ground truth on {right}/{total} white cells ({:.1}%)", 100.0 * acc);
    let mut errors: Vec<_> = confusion.into_iter().filter(|((a, b), _)| a != b).collect();
    errors.sort();
    for ((truth, got), n) in errors {
        println!("  {truth} read as {got}: {n}");
    }
    Ok(acc)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
