//! Procedural smear slides with ground-truth instance labels.
//!
//! The slide is split into three bands along x: a sparse feathered edge, a
//! monolayer, and a crowded thick region, so tile quality control has
//! something to reject on both sides.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{Annotation, InstanceMask, Subtype};
use crate::qa::Diagnosis;
use crate::seed;
use crate::slide::{SlideImage, TileAddress};

pub const BACKGROUND: [u8; 3] = [236, 226, 232];

/// What a synthetic cell is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Rbc,
    Wbc(Subtype),
}

struct Palette {
    body: [u8; 3],
    core: [u8; 3],
    /// Core radius relative to the cell radius.
    core_frac: f64,
}

fn palette(kind: CellKind) -> Palette {
    let (body, core, core_frac) = match kind {
        CellKind::Rbc => ([222, 134, 140], [234, 178, 182], 0.45),
        CellKind::Wbc(Subtype::Neutrophil) => ([226, 196, 214], [118, 64, 150], 0.6),
        CellKind::Wbc(Subtype::Eosinophil) => ([228, 128, 96], [110, 60, 140], 0.55),
        CellKind::Wbc(Subtype::Basophil) => ([150, 90, 170], [62, 26, 92], 0.8),
        CellKind::Wbc(Subtype::Lymphocyte) => ([170, 170, 220], [72, 44, 128], 0.85),
        CellKind::Wbc(Subtype::Monocyte) => ([200, 185, 215], [140, 104, 178], 0.7),
        CellKind::Wbc(Subtype::Others) => ([120, 170, 150], [60, 110, 90], 0.75),
    };
    Palette { body, core, core_frac }
}

/// Area-weighted mean color of an un-jittered cell of this kind.
pub fn reference_color(kind: CellKind) -> [f64; 3] {
    let p = palette(kind);
    let w = p.core_frac * p.core_frac;
    std::array::from_fn(|c| w * f64::from(p.core[c]) + (1.0 - w) * f64::from(p.body[c]))
}

fn keyword_pool(s: Subtype) -> &'static [&'static str] {
    match s {
        Subtype::Neutrophil => &[
            "hypolobated nuclei",
            "hypersegmented nucleus",
            "hypogranular cytoplasm",
            "toxic granulation",
        ],
        Subtype::Eosinophil => &["hypogranular cytoplasm", "vacuolated cytoplasm"],
        Subtype::Basophil => &["degranulated cytoplasm"],
        Subtype::Lymphocyte => &["reactive morphology", "enlarged size"],
        Subtype::Monocyte => &["vacuolated cytoplasm", "enlarged size"],
        Subtype::Others => &["atypical nuclear contour", "enlarged size"],
    }
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub diagnosis: Diagnosis,
    /// RBCs per WBC in the monolayer.
    pub rbc_per_wbc: usize,
}

impl SynthConfig {
    pub fn new(width: u32, height: u32, seed: u64) -> Self {
        Self {
            width,
            height,
            seed,
            diagnosis: Diagnosis::Mds,
            rbc_per_wbc: 8,
        }
    }

    pub fn with_diagnosis(mut self, diagnosis: Diagnosis) -> Self {
        self.diagnosis = diagnosis;
        self
    }

    pub fn slide_id(&self) -> String {
        format!("synthetic-{}x{}-{}", self.width, self.height, self.seed)
    }
}

/// One painted cell with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCell {
    pub center: (f64, f64),
    pub radius: f64,
    pub kind: CellKind,
    pub keywords: Vec<String>,
}

/// A generated slide: RGB raster, a global instance map, and the cell list.
/// Instance id `k ≥ 1` in the map refers to `cells[k - 1]`.
#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    id: String,
    width: u32,
    height: u32,
    pub diagnosis: Diagnosis,
    pixels: Vec<[u8; 3]>,
    instances: Vec<u32>,
    pub cells: Vec<SyntheticCell>,
}

impl SlideImage for SyntheticSlide {
    fn id(&self) -> &str {
        &self.id
    }
    fn width(&self) -> u32 {
        self.width
    }
    fn height(&self) -> u32 {
        self.height
    }
    fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[(y as usize) * self.width as usize + x as usize]
    }
}

struct Occupancy {
    cell: f64,
    cols: usize,
    buckets: Vec<Vec<(f64, f64, f64)>>,
}

impl Occupancy {
    fn new(w: u32, h: u32) -> Self {
        let cell = 64.0;
        let cols = (f64::from(w) / cell).ceil() as usize + 1;
        let rows = (f64::from(h) / cell).ceil() as usize + 1;
        Self {
            cell,
            cols,
            buckets: vec![Vec::new(); cols * rows],
        }
    }

    fn bucket(&self, x: f64, y: f64) -> (usize, usize) {
        ((x / self.cell) as usize, (y / self.cell) as usize)
    }

    fn free(&self, x: f64, y: f64, r: f64) -> bool {
        let (bx, by) = self.bucket(x, y);
        let rows = self.buckets.len() / self.cols;
        for yy in by.saturating_sub(1)..=(by + 1).min(rows - 1) {
            for xx in bx.saturating_sub(1)..=(bx + 1).min(self.cols - 1) {
                for &(cx, cy, cr) in &self.buckets[yy * self.cols + xx] {
                    if (cx - x).hypot(cy - y) < cr + r + 1.0 {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn add(&mut self, x: f64, y: f64, r: f64) {
        let (bx, by) = self.bucket(x, y);
        self.buckets[by * self.cols + bx].push((x, y, r));
    }
}

fn wbc_mix(d: Diagnosis) -> [(Subtype, f64); 6] {
    match d {
        Diagnosis::Control => [
            (Subtype::Neutrophil, 0.60),
            (Subtype::Lymphocyte, 0.28),
            (Subtype::Monocyte, 0.06),
            (Subtype::Eosinophil, 0.03),
            (Subtype::Basophil, 0.01),
            (Subtype::Others, 0.02),
        ],
        Diagnosis::Anemia => [
            (Subtype::Neutrophil, 0.55),
            (Subtype::Lymphocyte, 0.32),
            (Subtype::Monocyte, 0.07),
            (Subtype::Eosinophil, 0.03),
            (Subtype::Basophil, 0.01),
            (Subtype::Others, 0.02),
        ],
        Diagnosis::Mds => [
            (Subtype::Neutrophil, 0.45),
            (Subtype::Lymphocyte, 0.30),
            (Subtype::Monocyte, 0.12),
            (Subtype::Eosinophil, 0.03),
            (Subtype::Basophil, 0.02),
            (Subtype::Others, 0.08),
        ],
    }
}

fn keyword_rate(d: Diagnosis) -> f64 {
    match d {
        Diagnosis::Mds => 0.4,
        Diagnosis::Anemia => 0.15,
        Diagnosis::Control => 0.05,
    }
}

impl SyntheticSlide {
    pub fn generate(cfg: &SynthConfig) -> Self {
        let (w, h) = (cfg.width, cfg.height);
        let mut rng = seed::scoped_rng(cfg.seed, "synthetic-slide");
        let mut cells = Vec::new();
        let mut occ = Occupancy::new(w, h);
        let (wf, hf) = (f64::from(w), f64::from(h));
        let rbc_area = std::f64::consts::PI * 14.0 * 14.0;

        // (x range as width fraction, cell area as a fraction of band area, overlap allowed).
        // Overlapping placement covers about 1 - exp(-3) of the crowded band.
        let bands = [(0.0, 0.25, 0.01, false), (0.25, 0.75, 0.30, false), (0.75, 1.0, 3.0, true)];
        for &(lo, hi, coverage, overlap) in &bands {
            let (x0, x1) = (lo * wf, hi * wf);
            let area = (x1 - x0) * hf;
            let n_rbc = (coverage * area / rbc_area).round() as usize;
            let n_wbc = if overlap { 0 } else { n_rbc / cfg.rbc_per_wbc.max(1) };
            let mix = wbc_mix(cfg.diagnosis);
            let mut place = |kind: CellKind, r_lo: f64, r_hi: f64, rng: &mut rand_chacha::ChaCha8Rng| {
                for _ in 0..40 {
                    let r = rng.random_range(r_lo..r_hi);
                    let x = rng.random_range(x0..x1.max(x0 + 1.0));
                    let y = rng.random_range(0.0..hf);
                    if overlap || occ.free(x, y, r) {
                        occ.add(x.min(wf - 1.0), y.min(hf - 1.0), r);
                        cells.push(SyntheticCell {
                            center: (x, y),
                            radius: r,
                            kind,
                            keywords: Vec::new(),
                        });
                        return;
                    }
                }
            };
            for _ in 0..n_wbc {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut subtype = Subtype::Neutrophil;
                for (s, p) in mix {
                    acc += p;
                    if u < acc {
                        subtype = s;
                        break;
                    }
                }
                place(CellKind::Wbc(subtype), 20.0, 28.0, &mut rng);
            }
            for _ in 0..n_rbc {
                place(CellKind::Rbc, 12.0, 16.0, &mut rng);
            }
        }

        let rate = keyword_rate(cfg.diagnosis);
        for cell in &mut cells {
            if let CellKind::Wbc(s) = cell.kind {
                if rng.random_bool(rate) {
                    let pool = keyword_pool(s);
                    cell.keywords.push(pool[rng.random_range(0..pool.len())].to_string());
                }
            }
        }

        let mut pixels: Vec<[u8; 3]> = (0..(w as usize * h as usize))
            .map(|_| jitter(BACKGROUND, 3, &mut rng))
            .collect();
        let mut instances = vec![0u32; pixels.len()];
        for (idx, cell) in cells.iter().enumerate() {
            let p = palette(cell.kind);
            let shift: [i32; 3] = std::array::from_fn(|_| rng.random_range(-6..=6));
            let body = offset(p.body, shift);
            let core = offset(p.core, shift);
            let (cx, cy, r) = (cell.center.0, cell.center.1, cell.radius);
            let ys = ((cy - r).floor().max(0.0) as u32)..=((cy + r).ceil().min(hf - 1.0) as u32);
            for y in ys {
                let xs = ((cx - r).floor().max(0.0) as u32)..=((cx + r).ceil().min(wf - 1.0) as u32);
                for x in xs {
                    let d = (f64::from(x) + 0.5 - cx).hypot(f64::from(y) + 0.5 - cy);
                    if d > r {
                        continue;
                    }
                    let i = y as usize * w as usize + x as usize;
                    let base = if d <= p.core_frac * r { core } else { body };
                    pixels[i] = jitter(base, 3, &mut rng);
                    instances[i] = idx as u32 + 1;
                }
            }
        }

        Self {
            id: cfg.slide_id(),
            width: w,
            height: h,
            diagnosis: cfg.diagnosis,
            pixels,
            instances,
            cells,
        }
    }

    /// Global instance id at a pixel (0 = background).
    pub fn instance_at(&self, x: u32, y: u32) -> u32 {
        self.instances[y as usize * self.width as usize + x as usize]
    }

    /// Tile-local mask with ids compacted to `1..=k` in ascending global-id order,
    /// plus the global id of each local id.
    pub fn tile_mask(&self, tile: &TileAddress) -> (InstanceMask, Vec<u32>) {
        let (x0, y0) = tile.origin();
        let mut globals: Vec<u32> = Vec::new();
        for y in y0..y0 + tile.size {
            for x in x0..x0 + tile.size {
                let g = self.instance_at(x, y);
                if g != 0 {
                    globals.push(g);
                }
            }
        }
        globals.sort_unstable();
        globals.dedup();
        let mut labels = Vec::with_capacity((tile.size * tile.size) as usize);
        for y in y0..y0 + tile.size {
            for x in x0..x0 + tile.size {
                let g = self.instance_at(x, y);
                labels.push(if g == 0 {
                    0
                } else {
                    globals.binary_search(&g).expect("collected above") as i64 + 1
                });
            }
        }
        let mask = InstanceMask::new(tile.clone(), labels).expect("tile-sized, non-negative");
        (mask, globals)
    }

    /// Keyword annotations for the white cells in a tile, keyed by local ids
    /// from [`SyntheticSlide::tile_mask`].
    pub fn tile_annotations(&self, tile: &TileAddress, globals: &[u32]) -> Vec<Annotation> {
        globals
            .iter()
            .enumerate()
            .filter_map(|(local, &g)| {
                let cell = &self.cells[g as usize - 1];
                match cell.kind {
                    CellKind::Wbc(_) if !cell.keywords.is_empty() => Some(Annotation {
                        tile: tile.key(),
                        instance: local as i64 + 1,
                        subtype: None,
                        confidence: None,
                        keywords: cell.keywords.clone(),
                    }),
                    _ => None,
                }
            })
            .collect()
    }
}

fn offset(c: [u8; 3], shift: [i32; 3]) -> [u8; 3] {
    std::array::from_fn(|i| (i32::from(c[i]) + shift[i]).clamp(0, 255) as u8)
}

fn jitter<R: Rng>(c: [u8; 3], amp: i32, rng: &mut R) -> [u8; 3] {
    let shift = std::array::from_fn(|_| rng.random_range(-amp..=amp));
    offset(c, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::{score_tiles, tile_grid, HeuristicScorer};

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::new(600, 520, 3);
        let a = SyntheticSlide::generate(&cfg);
        let b = SyntheticSlide::generate(&cfg);
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.cells, b.cells);
        assert_ne!(a.pixels, SyntheticSlide::generate(&SynthConfig::new(600, 520, 4)).pixels);
    }

    #[test]
    fn qc_rejects_sparse_and_crowded_bands() {
        let slide = SyntheticSlide::generate(&SynthConfig::new(2048, 1024, 7));
        let tiles = tile_grid(&slide, 512).unwrap();
        let scored = score_tiles(&slide, &tiles, &HeuristicScorer::default(), 0.5).unwrap();
        for t in &scored {
            let expect_kept = t.address.col == 1 || t.address.col == 2;
            assert_eq!(t.kept, expect_kept, "{} quality {}", t.address, t.quality);
        }
    }

    #[test]
    fn tile_masks_compact_ids() {
        let slide = SyntheticSlide::generate(&SynthConfig::new(1024, 512, 1));
        let tile = TileAddress {
            slide_id: slide.id().into(),
            row: 0,
            col: 1,
            size: 512,
        };
        let (mask, globals) = slide.tile_mask(&tile);
        let max = *mask.labels().iter().max().unwrap();
        assert_eq!(max as usize, globals.len());
    }
}
