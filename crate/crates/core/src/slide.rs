//! Slide tiling, tile quality control, and slide-context sampling.

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::synth::{SynthConfig, SyntheticSlide};

/// Default patch edge in pixels.
pub const TILE_SIZE: u32 = 512;
/// Default quality threshold; tiles scoring at or above it are kept.
pub const QC_THRESHOLD: f64 = 0.5;
/// Nominal scan magnification.
pub const DEFAULT_MAGNIFICATION: f64 = 40.0;
/// Patches sampled per slide for slide-level context.
pub const CONTEXT_PATCHES: usize = 30;

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("slide {id:?} has invalid dimensions {width}x{height}")]
    InvalidDimensions { id: String, width: u32, height: u32 },
    #[error("tile {tile} lies outside slide bounds")]
    OutOfBounds { tile: TileAddress },
    #[error("quality scorer returned {score} for tile {tile}; scores must lie in [0, 1]")]
    ScoreOutOfRange { tile: TileAddress, score: f64 },
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("bad slide source {0:?}; expected a raster path or synthetic:WxH:seed")]
    Source(String),
    #[error("reading slide image: {0}")]
    Image(#[from] image::ImageError),
}

/// Read access to an RGB slide raster.
pub trait SlideImage: Sync {
    fn id(&self) -> &str;
    fn width(&self) -> u32;
    fn height(&self) -> u32;
    /// Pixel at `(x, y)`; defined for `x < width`, `y < height`.
    fn pixel(&self, x: u32, y: u32) -> [u8; 3];
    fn magnification(&self) -> f64 {
        DEFAULT_MAGNIFICATION
    }
}

/// A slide backed by a decoded raster file.
#[derive(Debug, Clone)]
pub struct RasterSlide {
    id: String,
    image: image::RgbImage,
    magnification: f64,
}

impl RasterSlide {
    pub fn new(id: impl Into<String>, image: image::RgbImage) -> Self {
        Self {
            id: id.into(),
            image,
            magnification: DEFAULT_MAGNIFICATION,
        }
    }

    pub fn open(path: &Path) -> Result<Self, SlideError> {
        let image = image::open(path)?.to_rgb8();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slide".into());
        Ok(Self::new(id, image))
    }

    pub fn with_magnification(mut self, magnification: f64) -> Self {
        self.magnification = magnification;
        self
    }

    pub fn image(&self) -> &image::RgbImage {
        &self.image
    }
}

impl SlideImage for RasterSlide {
    fn id(&self) -> &str {
        &self.id
    }
    fn width(&self) -> u32 {
        self.image.width()
    }
    fn height(&self) -> u32 {
        self.image.height()
    }
    fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.image.get_pixel(x, y).0
    }
    fn magnification(&self) -> f64 {
        self.magnification
    }
}

/// Where a slide comes from: a raster file or the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub enum SlideSource {
    Raster(std::path::PathBuf),
    Synthetic { width: u32, height: u32, seed: u64 },
}

impl std::str::FromStr for SlideSource {
    type Err = SlideError;

    /// `synthetic:2048x1024:7` or a file path.
    fn from_str(s: &str) -> Result<Self, SlideError> {
        let Some(rest) = s.strip_prefix("synthetic:") else {
            return Ok(Self::Raster(s.into()));
        };
        let bad = || SlideError::Source(s.to_string());
        let (dims, seed) = rest.split_once(':').ok_or_else(bad)?;
        let (w, h) = dims.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(Self::Synthetic {
            width: w.parse().map_err(|_| bad())?,
            height: h.parse().map_err(|_| bad())?,
            seed: seed.parse().map_err(|_| bad())?,
        })
    }
}

/// A loaded slide of either kind.
pub enum LoadedSlide {
    Raster(RasterSlide),
    Synthetic(SyntheticSlide),
}

impl SlideSource {
    pub fn load(&self) -> Result<LoadedSlide, SlideError> {
        match self {
            Self::Raster(p) => RasterSlide::open(p).map(LoadedSlide::Raster),
            Self::Synthetic { width, height, seed } => {
                if *width == 0 || *height == 0 {
                    return Err(SlideError::InvalidDimensions {
                        id: "synthetic".into(),
                        width: *width,
                        height: *height,
                    });
                }
                Ok(LoadedSlide::Synthetic(SyntheticSlide::generate(&SynthConfig::new(*width, *height, *seed))))
            }
        }
    }
}

impl LoadedSlide {
    pub fn as_slide(&self) -> &dyn SlideImage {
        match self {
            Self::Raster(s) => s,
            Self::Synthetic(s) => s,
        }
    }

    pub fn synthetic(&self) -> Option<&SyntheticSlide> {
        match self {
            Self::Synthetic(s) => Some(s),
            Self::Raster(_) => None,
        }
    }
}

/// A fixed-size, non-overlapping window of a slide.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileAddress {
    pub slide_id: String,
    pub row: u32,
    pub col: u32,
    pub size: u32,
}

impl TileAddress {
    /// Top-left pixel of the tile.
    pub fn origin(&self) -> (u32, u32) {
        (self.col * self.size, self.row * self.size)
    }

    /// File-name friendly key, `<slide>__r<row>_c<col>`.
    pub fn key(&self) -> String {
        format!("{}__r{}_c{}", self.slide_id, self.row, self.col)
    }

    fn within(&self, slide: &dyn SlideImage) -> bool {
        let (x, y) = self.origin();
        u64::from(x) + u64::from(self.size) <= u64::from(slide.width())
            && u64::from(y) + u64::from(self.size) <= u64::from(slide.height())
    }
}

impl std::fmt::Display for TileAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[r{},c{}]", self.slide_id, self.row, self.col)
    }
}

/// A tile with its quality score and keep decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTile {
    pub address: TileAddress,
    pub quality: f64,
    pub kept: bool,
}

/// Flat JSONL layout of a scored tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub slide_id: String,
    pub row: u32,
    pub col: u32,
    pub size: u32,
    pub quality: f64,
    pub kept: bool,
}

impl From<&ScoredTile> for TileRecord {
    fn from(t: &ScoredTile) -> Self {
        Self {
            slide_id: t.address.slide_id.clone(),
            row: t.address.row,
            col: t.address.col,
            size: t.address.size,
            quality: t.quality,
            kept: t.kept,
        }
    }
}

impl TileRecord {
    pub fn address(&self) -> TileAddress {
        TileAddress {
            slide_id: self.slide_id.clone(),
            row: self.row,
            col: self.col,
            size: self.size,
        }
    }
}

/// Row-major grid of every full tile that fits in the slide.
///
/// Partial strips on the right and bottom edges are dropped. `size == 0`
/// yields an empty grid.
pub fn tile_grid(slide: &dyn SlideImage, size: u32) -> Result<Vec<TileAddress>, SlideError> {
    if slide.width() == 0 || slide.height() == 0 {
        return Err(SlideError::InvalidDimensions {
            id: slide.id().to_string(),
            width: slide.width(),
            height: slide.height(),
        });
    }
    if size == 0 {
        return Ok(Vec::new());
    }
    let (cols, rows) = (slide.width() / size, slide.height() / size);
    let mut out = Vec::with_capacity((cols * rows) as usize);
    for row in 0..rows {
        for col in 0..cols {
            out.push(TileAddress {
                slide_id: slide.id().to_string(),
                row,
                col,
                size,
            });
        }
    }
    Ok(out)
}

/// Pixels of one tile, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePixels {
    pub size: u32,
    pub data: Vec<[u8; 3]>,
}

impl TilePixels {
    pub fn from_slide(slide: &dyn SlideImage, tile: &TileAddress) -> Result<Self, SlideError> {
        if !tile.within(slide) {
            return Err(SlideError::OutOfBounds { tile: tile.clone() });
        }
        let (x0, y0) = tile.origin();
        let mut data = Vec::with_capacity((tile.size * tile.size) as usize);
        for y in y0..y0 + tile.size {
            for x in x0..x0 + tile.size {
                data.push(slide.pixel(x, y));
            }
        }
        Ok(Self { size: tile.size, data })
    }

    pub fn uniform(size: u32, rgb: [u8; 3]) -> Self {
        Self {
            size,
            data: vec![rgb; (size * size) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.data[(y * self.size + x) as usize]
    }

    /// Rec. 601 luma in `[0, 1]`.
    pub fn luminance(&self) -> Vec<f64> {
        self.data.iter().map(|p| luma(*p)).collect()
    }
}

pub(crate) fn luma([r, g, b]: [u8; 3]) -> f64 {
    (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0
}

/// Tile quality model. Implementations must return scores in `[0, 1]`.
pub trait QualityScorer: Sync {
    fn score(&self, tile: &TilePixels) -> f64;
}

impl<F> QualityScorer for F
where
    F: Fn(&TilePixels) -> f64 + Sync,
{
    fn score(&self, tile: &TilePixels) -> f64 {
        self(tile)
    }
}

/// Scores every tile (in parallel) and applies the keep rule `quality >= threshold`.
/// Output order matches input order.
pub fn score_tiles(
    slide: &dyn SlideImage,
    tiles: &[TileAddress],
    scorer: &dyn QualityScorer,
    threshold: f64,
) -> Result<Vec<ScoredTile>, SlideError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SlideError::Threshold(threshold));
    }
    tiles
        .par_iter()
        .map(|tile| {
            let pixels = TilePixels::from_slide(slide, tile)?;
            let quality = scorer.score(&pixels);
            if !(0.0..=1.0).contains(&quality) {
                return Err(SlideError::ScoreOutOfRange {
                    tile: tile.clone(),
                    score: quality,
                });
            }
            Ok(ScoredTile {
                address: tile.clone(),
                quality,
                kept: quality >= threshold,
            })
        })
        .collect()
}

/// Foreground-band × sharpness heuristic standing in for a learned QC model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeuristicScorer {
    /// Pixels with luminance below this fraction of full scale count as foreground.
    pub foreground_luma: f64,
    /// Foreground fraction band that scores a full density sub-score.
    pub band: (f64, f64),
    /// Laplacian variance at which the sharpness sub-score reaches 0.5.
    pub sharpness_half: f64,
}

impl Default for HeuristicScorer {
    fn default() -> Self {
        Self {
            foreground_luma: 0.85,
            band: (0.05, 0.6),
            sharpness_half: 2e-3,
        }
    }
}

/// Sub-scores behind a heuristic quality value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityBreakdown {
    pub foreground_fraction: f64,
    pub density: f64,
    pub laplacian_variance: f64,
    pub sharpness: f64,
    pub score: f64,
}

impl HeuristicScorer {
    pub fn breakdown(&self, tile: &TilePixels) -> QualityBreakdown {
        let lum = tile.luminance();
        let fg = lum.iter().filter(|&&l| l < self.foreground_luma).count() as f64 / lum.len().max(1) as f64;
        let var = laplacian_variance(&lum, tile.size as usize);
        let density = self.density_score(fg);
        let sharpness = var / (var + self.sharpness_half);
        QualityBreakdown {
            foreground_fraction: fg,
            density,
            laplacian_variance: var,
            sharpness,
            score: (density * sharpness).sqrt().clamp(0.0, 1.0),
        }
    }

    /// 1 inside the band, falling linearly to 0 at fraction 0 and at fraction 1.
    pub fn density_score(&self, fraction: f64) -> f64 {
        let (lo, hi) = self.band;
        if fraction < lo {
            fraction / lo
        } else if fraction > hi {
            (1.0 - fraction) / (1.0 - hi)
        } else {
            1.0
        }
        .clamp(0.0, 1.0)
    }
}

impl QualityScorer for HeuristicScorer {
    fn score(&self, tile: &TilePixels) -> f64 {
        self.breakdown(tile).score
    }
}

/// Heuristic quality with default parameters.
pub fn heuristic_quality(tile: &TilePixels) -> f64 {
    HeuristicScorer::default().score(tile)
}

/// Variance of the 4-neighbour Laplacian over interior pixels.
fn laplacian_variance(lum: &[f64], size: usize) -> f64 {
    if size < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut n = 0.0;
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let c = lum[y * size + x];
            let lap = lum[(y - 1) * size + x] + lum[(y + 1) * size + x] + lum[y * size + x - 1] + lum[y * size + x + 1]
                - 4.0 * c;
            sum += lap;
            sum_sq += lap * lap;
            n += 1.0;
        }
    }
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

/// Uniform sample of `min(k, kept.len())` tiles without replacement, returned row-major.
pub fn sample_slide_context(kept: &[TileAddress], k: usize, seed: u64) -> Vec<TileAddress> {
    let amount = k.min(kept.len());
    let mut rng = seed::scoped_rng(seed, "slide-context");
    let mut out: Vec<TileAddress> = index::sample(&mut rng, kept.len(), amount)
        .into_iter()
        .map(|i| kept[i].clone())
        .collect();
    out.sort_by(|a, b| (&a.slide_id, a.row, a.col).cmp(&(&b.slide_id, b.row, b.col)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Blank {
        w: u32,
        h: u32,
    }

    impl SlideImage for Blank {
        fn id(&self) -> &str {
            "blank"
        }
        fn width(&self) -> u32 {
            self.w
        }
        fn height(&self) -> u32 {
            self.h
        }
        fn pixel(&self, _: u32, _: u32) -> [u8; 3] {
            [255, 255, 255]
        }
    }

    #[test]
    fn grid_counts() {
        let count = |w, h| tile_grid(&Blank { w, h }, 512).unwrap().len();
        assert_eq!(count(2048, 1024), 8);
        assert_eq!(count(2047, 1024), 6);
        assert_eq!(count(511, 511), 0);
        assert!(tile_grid(&Blank { w: 10, h: 10 }, 0).unwrap().is_empty());
        assert!(matches!(
            tile_grid(&Blank { w: 0, h: 10 }, 512),
            Err(SlideError::InvalidDimensions { .. })
        ));
    }

    #[test]
    fn grid_is_row_major() {
        let grid = tile_grid(&Blank { w: 2048, h: 1024 }, 512).unwrap();
        assert_eq!((grid[0].row, grid[0].col), (0, 0));
        assert_eq!((grid[3].row, grid[3].col), (0, 3));
        assert_eq!((grid[4].row, grid[4].col), (1, 0));
        assert_eq!(grid[5].origin(), (512, 512));
    }

    #[test]
    fn keep_rule_boundary_and_zero_threshold() {
        let slide = Blank { w: 1024, h: 512 };
        let tiles = tile_grid(&slide, 512).unwrap();
        let half = |_: &TilePixels| 0.5;
        let scored = score_tiles(&slide, &tiles, &half, 0.5).unwrap();
        assert!(scored.iter().all(|t| t.kept));
        let zero = |_: &TilePixels| 0.0;
        assert!(score_tiles(&slide, &tiles, &zero, 0.0).unwrap().iter().all(|t| t.kept));
    }

    #[test]
    fn out_of_range_score_names_tile() {
        let slide = Blank { w: 1024, h: 512 };
        let tiles = tile_grid(&slide, 512).unwrap();
        let bad = |_: &TilePixels| 1.5;
        let err = score_tiles(&slide, &tiles, &bad, 0.5).unwrap_err();
        assert!(err.to_string().contains("blank[r0,c0]"), "{err}");
    }

    #[test]
    fn white_tile_is_rejected() {
        let slide = Blank { w: 512, h: 512 };
        let tiles = tile_grid(&slide, 512).unwrap();
        let scored = score_tiles(&slide, &tiles, &HeuristicScorer::default(), QC_THRESHOLD).unwrap();
        assert!(scored[0].quality < 0.5);
        assert!(!scored[0].kept);
    }

    #[test]
    fn uniform_and_full_coverage_subscores() {
        let s = HeuristicScorer::default();
        let uniform = s.breakdown(&TilePixels::uniform(512, [120, 60, 140]));
        assert_eq!(uniform.sharpness, 0.0);
        assert!(uniform.score <= 0.5);
        assert_eq!(uniform.foreground_fraction, 1.0);
        assert_eq!(uniform.density, 0.0);
    }

    #[test]
    fn context_sample_clamps_and_repeats() {
        let slide = Blank { w: 512 * 10, h: 512 * 10 };
        let kept = tile_grid(&slide, 512).unwrap();
        let a = sample_slide_context(&kept, CONTEXT_PATCHES, 7);
        assert_eq!(a.len(), 30);
        assert_eq!(a, sample_slide_context(&kept, 30, 7));
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 30);
        assert!(sample_slide_context(&kept, 0, 7).is_empty());
        assert_eq!(sample_slide_context(&kept[..10], 30, 7).len(), 10);
    }

    #[test]
    fn parses_sources() {
        assert_eq!(
            "synthetic:2048x1024:7".parse::<SlideSource>().unwrap(),
            SlideSource::Synthetic { width: 2048, height: 1024, seed: 7 }
        );
        assert!("synthetic:20x:7".parse::<SlideSource>().is_err());
        assert_eq!(
            "a/b.png".parse::<SlideSource>().unwrap(),
            SlideSource::Raster("a/b.png".into())
        );
    }
}
