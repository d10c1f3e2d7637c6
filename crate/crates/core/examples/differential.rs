//! Label normalization across source datasets and the WBC differential.

use pbskit::cells::{differential, normalize_label, CellRecord, CropBox, LabelMap, Subtype};
use pbskit::slide::TileAddress;

fn cell(i: usize, subtype: Subtype, confidence: f64) -> CellRecord {
    CellRecord {
        id: format!("demo__i{i}"),
        tile: TileAddress {
            slide_id: "demo".into(),
            row: 0,
            col: 0,
            size: 512,
        },
        crop_box: CropBox { x0: 0, y0: 0, side: 64 },
        subtype,
        confidence,
        keywords: Vec::new(),
    }
}

pub fn run_example() -> anyhow::Result<f64> {
    for (dataset, raw) in [("AML-LMU", "BAS"), ("AML-LMU", "EBO"), ("APL-kaggle", "Lymphocyte (variant)")] {
        println!("{dataset:>10} {raw:<22} -> {}", normalize_label(dataset, raw)?);
    }
    match normalize_label("AML-LMU", "not-a-label") {
        Err(e) => println!("unknown label: {e}"),
        Ok(s) => anyhow::bail!("unexpected mapping to {s}"),
    }
    println!("bundled table has {} rows", LabelMap::bundled().len());

    // 6 neutrophils, 3 lymphocytes, 1 monocyte, 2 Others, 1 low-confidence basophil
    let mut cells: Vec<CellRecord> = (0..6).map(|i| cell(i, Subtype::Neutrophil, 0.9)).collect();
    cells.extend((6..9).map(|i| cell(i, Subtype::Lymphocyte, 0.8)));
    cells.push(cell(9, Subtype::Monocyte, 0.7));
    cells.extend((10..12).map(|i| cell(i, Subtype::Others, 0.9)));
    cells.push(cell(12, Subtype::Basophil, 0.3));
    let diff = differential(&cells, 0.5);
    for (s, p) in &diff.percentages {
        println!("{s:<11} {p:5.1}%");
    }
    println!("counted {} cells, {} Others excluded", diff.n_cells, diff.others_count);
    Ok(diff.percent(Subtype::Neutrophil))
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
