//! Cell crops from instance masks, label normalization, and slide-level
//! WBC differentials.

mod classify;
mod labels;
mod maskio;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::slide::TileAddress;

pub use classify::{extract_cells, Annotation, Annotations, CellClassifier, ColorClassifier};
pub use labels::{normalize_label, LabelMap, Subtype, NATIVE_DATASET};
pub use maskio::{read_mask_png, write_mask_png};

/// Crop side relative to the instance's larger bounding-box edge.
pub const DEFAULT_CONTEXT_FACTOR: f64 = 2.0;
/// Classifier confidence required for a cell to count in the differential.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum CellError {
    #[error("mask for {tile}: expected {expected} labels, got {actual}")]
    MaskSize {
        tile: TileAddress,
        expected: usize,
        actual: usize,
    },
    #[error("mask for {tile}: negative label {label} at ({x}, {y})")]
    NegativeLabel { tile: TileAddress, label: i64, x: u32, y: u32 },
    #[error("no label mapping for ({dataset:?}, {label:?})")]
    MappingMiss { dataset: String, label: String },
    #[error("label table line {line}: {message}")]
    LabelTable { line: usize, message: String },
    #[error("mask file {path}: {message}")]
    MaskFile { path: String, message: String },
    #[error("mask image: {0}")]
    Image(#[from] image::ImageError),
}

/// Per-pixel instance labels for one tile: 0 is background, `k ≥ 1` is instance `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub tile: TileAddress,
    labels: Vec<i64>,
}

impl InstanceMask {
    /// Checks that there is one label per tile pixel and none is negative.
    pub fn new(tile: TileAddress, labels: Vec<i64>) -> Result<Self, CellError> {
        let expected = (tile.size as usize).pow(2);
        if labels.len() != expected {
            return Err(CellError::MaskSize {
                tile,
                expected,
                actual: labels.len(),
            });
        }
        if let Some(pos) = labels.iter().position(|&l| l < 0) {
            let size = tile.size as usize;
            return Err(CellError::NegativeLabel {
                label: labels[pos],
                x: (pos % size) as u32,
                y: (pos / size) as u32,
                tile,
            });
        }
        Ok(Self { tile, labels })
    }

    pub fn size(&self) -> u32 {
        self.tile.size
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn get(&self, x: u32, y: u32) -> i64 {
        self.labels[(y * self.tile.size + x) as usize]
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }
}

/// One segmented instance that lies fully inside its tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: i64,
    /// Mean `(x, y)` of the instance's pixel indices.
    pub centroid: (f64, f64),
    pub bbox: BBox,
    pub area: usize,
}

/// Instances whose bounding box does not touch the tile edge, in ascending id order.
pub fn extract_instances(mask: &InstanceMask) -> Vec<Instance> {
    struct Acc {
        sx: f64,
        sy: f64,
        n: usize,
        bbox: BBox,
    }
    let size = mask.size();
    let mut accs: BTreeMap<i64, Acc> = BTreeMap::new();
    for y in 0..size {
        for x in 0..size {
            let id = mask.get(x, y);
            if id == 0 {
                continue;
            }
            let acc = accs.entry(id).or_insert(Acc {
                sx: 0.0,
                sy: 0.0,
                n: 0,
                bbox: BBox { x0: x, y0: y, x1: x, y1: y },
            });
            acc.sx += f64::from(x);
            acc.sy += f64::from(y);
            acc.n += 1;
            acc.bbox.x0 = acc.bbox.x0.min(x);
            acc.bbox.y0 = acc.bbox.y0.min(y);
            acc.bbox.x1 = acc.bbox.x1.max(x);
            acc.bbox.y1 = acc.bbox.y1.max(y);
        }
    }
    let last = size.saturating_sub(1);
    accs.into_iter()
        .filter(|(_, a)| a.bbox.x0 > 0 && a.bbox.y0 > 0 && a.bbox.x1 < last && a.bbox.y1 < last)
        .map(|(id, a)| Instance {
            id,
            centroid: (a.sx / a.n as f64, a.sy / a.n as f64),
            bbox: a.bbox,
            area: a.n,
        })
        .collect()
}

/// Square crop window in tile pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: u32,
    pub y0: u32,
    pub side: u32,
}

impl CropBox {
    pub fn fits(&self, tile_size: u32) -> bool {
        self.side <= tile_size && self.x0 + self.side <= tile_size && self.y0 + self.side <= tile_size
    }
}

/// Square crop centered on `centroid` with side `ceil(max(w, h) · factor)`,
/// capped at the tile size and shifted as little as needed to stay inside.
pub fn crop_square(bbox: &BBox, centroid: (f64, f64), context_factor: f64, tile_size: u32) -> CropBox {
    let factor = context_factor.max(1.0);
    let longest = f64::from(bbox.width().max(bbox.height()));
    let side = ((longest * factor).ceil() as u32).clamp(1, tile_size.max(1));
    let place = |c: f64| -> u32 {
        // pixel i spans [i, i+1), so its center sits at i + 0.5
        let start = (c + 0.5 - f64::from(side) / 2.0).round();
        start.clamp(0.0, f64::from(tile_size - side)) as u32
    };
    CropBox {
        x0: place(centroid.0),
        y0: place(centroid.1),
        side,
    }
}

/// An extracted, labeled cell crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: String,
    pub tile: TileAddress,
    pub crop_box: CropBox,
    pub subtype: Subtype,
    pub confidence: f64,
    pub keywords: Vec<String>,
}

/// WBC differential over the five canonical subtypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Differential {
    pub percentages: BTreeMap<Subtype, f64>,
    pub n_cells: usize,
    pub others_count: usize,
}

impl Differential {
    pub fn percent(&self, s: Subtype) -> f64 {
        self.percentages.get(&s).copied().unwrap_or(0.0)
    }

    /// Most frequent canonical subtype; ties go to the earlier subtype in canonical order.
    pub fn dominant(&self) -> Option<Subtype> {
        if self.n_cells == 0 {
            return None;
        }
        let mut best = Subtype::CANONICAL[0];
        for s in Subtype::CANONICAL {
            if self.percent(s) > self.percent(best) {
                best = s;
            }
        }
        Some(best)
    }

    /// Builds a differential from explicit percentages (missing subtypes are 0).
    pub fn from_percentages(pairs: &[(Subtype, f64)], n_cells: usize) -> Self {
        let mut percentages: BTreeMap<Subtype, f64> = Subtype::CANONICAL.iter().map(|&s| (s, 0.0)).collect();
        for &(s, p) in pairs {
            if s.is_canonical() {
                percentages.insert(s, p);
            }
        }
        Self {
            percentages,
            n_cells,
            others_count: 0,
        }
    }
}

/// Percentages of canonical subtypes among cells with `confidence >= min_confidence`.
/// `Others` is counted separately and excluded from the denominator.
pub fn differential(cells: &[CellRecord], min_confidence: f64) -> Differential {
    let mut counts: BTreeMap<Subtype, usize> = Subtype::CANONICAL.iter().map(|&s| (s, 0)).collect();
    let mut others = 0;
    for cell in cells.iter().filter(|c| c.confidence >= min_confidence) {
        match cell.subtype {
            Subtype::Others => others += 1,
            s => *counts.entry(s).or_default() += 1,
        }
    }
    let n: usize = counts.values().sum();
    let percentages = counts
        .into_iter()
        .map(|(s, c)| (s, if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 }))
        .collect();
    Differential {
        percentages,
        n_cells: n,
        others_count: others,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile() -> TileAddress {
        TileAddress {
            slide_id: "s".into(),
            row: 0,
            col: 0,
            size: 512,
        }
    }

    fn mask_with(blobs: &[(i64, u32, u32, u32, u32)]) -> InstanceMask {
        let mut labels = vec![0i64; 512 * 512];
        for &(id, x0, y0, x1, y1) in blobs {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    labels[(y * 512 + x) as usize] = id;
                }
            }
        }
        InstanceMask::new(tile(), labels).unwrap()
    }

    fn record(subtype: Subtype, confidence: f64) -> CellRecord {
        CellRecord {
            id: "c".into(),
            tile: tile(),
            crop_box: CropBox { x0: 0, y0: 0, side: 10 },
            subtype,
            confidence,
            keywords: vec![],
        }
    }

    #[test]
    fn symmetric_blob_centroid() {
        let inst = extract_instances(&mask_with(&[(1, 251, 251, 260, 260)]));
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].centroid, (255.5, 255.5));
        assert_eq!(inst[0].area, 100);
    }

    #[test]
    fn border_blobs_are_dropped() {
        let inst = extract_instances(&mask_with(&[(1, 0, 40, 5, 45), (2, 100, 100, 110, 110), (3, 500, 500, 511, 505)]));
        assert_eq!(inst.iter().map(|i| i.id).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn ids_ascend() {
        let inst = extract_instances(&mask_with(&[(7, 300, 300, 310, 310), (2, 100, 100, 110, 110)]));
        assert_eq!(inst.iter().map(|i| i.id).collect::<Vec<_>>(), vec![2, 7]);
    }

    #[test]
    fn negative_labels_rejected() {
        let mut labels = vec![0i64; 512 * 512];
        labels[513] = -1;
        let err = InstanceMask::new(tile(), labels).unwrap_err();
        assert!(matches!(err, CellError::NegativeLabel { x: 1, y: 1, .. }));
        assert!(InstanceMask::new(tile(), vec![0; 10]).is_err());
    }

    #[test]
    fn crop_centered_without_clamp() {
        let bbox = BBox { x0: 246, y0: 241, x1: 265, y1: 270 };
        let c = crop_square(&bbox, (255.5, 255.5), 2.0, 512);
        assert_eq!(c.side, 60);
        assert_eq!((c.x0, c.y0), (226, 226));
    }

    #[test]
    fn crop_translated_near_corner() {
        let bbox = BBox { x0: 1, y0: 2, x1: 20, y1: 21 };
        let c = crop_square(&bbox, (10.5, 11.5), 2.0, 512);
        assert_eq!(c.side, 40);
        assert_eq!((c.x0, c.y0), (0, 0));
        let bbox = BBox { x0: 490, y0: 495, x1: 509, y1: 510 };
        let c = crop_square(&bbox, (499.5, 502.5), 2.0, 512);
        assert_eq!(c.side, 40);
        assert_eq!((c.x0, c.y0), (472, 472));
        assert!(c.fits(512));
    }

    #[test]
    fn crop_clamped_to_tile() {
        let bbox = BBox { x0: 100, y0: 100, x1: 399, y1: 399 };
        let c = crop_square(&bbox, (249.5, 249.5), 2.0, 512);
        assert_eq!(c, CropBox { x0: 0, y0: 0, side: 512 });
    }

    #[test]
    fn differential_examples() {
        let mut cells = vec![record(Subtype::Neutrophil, 1.0); 3];
        cells.push(record(Subtype::Lymphocyte, 1.0));
        let d = differential(&cells, 0.5);
        assert_eq!(d.percent(Subtype::Neutrophil), 75.0);
        assert_eq!(d.percent(Subtype::Lymphocyte), 25.0);
        assert_eq!(d.percent(Subtype::Monocyte), 0.0);
        assert_eq!(d.n_cells, 4);
        assert_eq!(d.dominant(), Some(Subtype::Neutrophil));

        let d = differential(&vec![record(Subtype::Others, 1.0); 4], 0.5);
        assert_eq!((d.n_cells, d.others_count), (0, 4));
        assert!(d.percentages.values().all(|&p| p == 0.0));
        assert_eq!(d.dominant(), None);

        let d = differential(&vec![record(Subtype::Monocyte, 0.4); 2], 0.5);
        assert_eq!(d.n_cells, 0);
    }
}
