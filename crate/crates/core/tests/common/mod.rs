#![allow(dead_code)]

use pbskit::cells::{CellRecord, CropBox, Differential, Subtype};
use pbskit::qa::{Diagnosis, SlideSummary};
use pbskit::slide::TileAddress;

pub const KEYWORDS: [&str; 6] = [
    "hypogranular cytoplasm",
    "hypolobated nuclei",
    "enlarged size",
    "vacuolated cytoplasm",
    "atypical chromatin",
    "binucleated",
];

pub fn cell(id: &str, subtype: Subtype, keywords: &[&str]) -> CellRecord {
    CellRecord {
        id: id.to_string(),
        tile: TileAddress {
            slide_id: "s".into(),
            row: 0,
            col: 0,
            size: 512,
        },
        crop_box: CropBox { x0: 10, y0: 10, side: 80 },
        subtype,
        confidence: 0.9,
        keywords: keywords.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn summary(id: &str, diagnosis: Diagnosis, dominant: Subtype, findings: &[&str]) -> SlideSummary {
    let rest: Vec<(Subtype, f64)> = Subtype::CANONICAL
        .iter()
        .filter(|&&s| s != dominant)
        .map(|&s| (s, 10.0))
        .collect();
    let mut pairs = vec![(dominant, 60.0)];
    pairs.extend(rest);
    SlideSummary {
        slide_id: id.to_string(),
        diagnosis,
        differential: Differential::from_percentages(&pairs, 100),
        findings: findings.iter().map(|s| s.to_string()).collect(),
    }
}
