//! Stage functions, manifests, configuration, and the end-to-end run.
//!
//! Every stage reads and writes plain files so each CLI command can run on
//! its own. [`run_pipeline`] chains them in a fixed order and writes a
//! `summary.json` with per-stage counts and a hash of the settings.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cells::{
    self, differential, extract_cells, read_mask_png, write_mask_png, Annotation, Annotations, CellRecord,
    ColorClassifier, Differential,
};
use crate::jsonl::{read_json, read_jsonl, write_json, write_jsonl};
use crate::metrics::{self, join_predictions, MetricReport, Prediction};
use crate::qa::{self, Combo, Diagnosis, QAItem, QType, SlideSummary, TaskTypeMix};
use crate::slide::{self, score_tiles, tile_grid, HeuristicScorer, ScoredTile, SlideImage, SlideSource, TilePixels, TileRecord};
use crate::synth::{self, SyntheticSlide};

/// Environment variable holding the default seed for every command.
pub const SEED_ENV: &str = "PBSKIT_SEED";
pub const DEFAULT_SEED: u64 = 7;
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
/// How many keyword findings a slide summary keeps.
const MAX_FINDINGS: usize = 3;

/// Settings for a full run. Everything except `out_dir` feeds the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// `synthetic:WxH:seed` or an image path.
    pub slide: String,
    pub out_dir: PathBuf,
    /// Instance masks for raster slides; synthetic slides bring their own.
    pub masks: Option<PathBuf>,
    pub tile_size: u32,
    pub qc_threshold: f64,
    pub context_factor: f64,
    pub min_confidence: f64,
    pub mcq_options: usize,
    pub bootstrap: usize,
    pub dedupe_threshold: f64,
    /// Mix file; the default asks one question per supported combination.
    pub mix: Option<PathBuf>,
    /// Slide diagnosis for raster slides. Synthetic slides carry their own.
    pub diagnosis: Option<Diagnosis>,
    pub evaluate: bool,
}

impl RunConfig {
    pub fn new(slide: impl Into<String>, out_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            seed,
            slide: slide.into(),
            out_dir: out_dir.into(),
            masks: None,
            tile_size: slide::TILE_SIZE,
            qc_threshold: slide::QC_THRESHOLD,
            context_factor: cells::DEFAULT_CONTEXT_FACTOR,
            min_confidence: cells::DEFAULT_MIN_CONFIDENCE,
            mcq_options: qa::DEFAULT_MCQ_OPTIONS,
            bootstrap: metrics::DEFAULT_BOOTSTRAP,
            dedupe_threshold: qa::DEFAULT_DEDUPE_THRESHOLD,
            mix: None,
            diagnosis: None,
            evaluate: true,
        }
    }

    /// Range checks; runs before any stage touches the disk.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                bail!("{name} must be in [0, 1], got {v}");
            }
            Ok(())
        };
        in_unit("qc threshold", self.qc_threshold)?;
        in_unit("min confidence", self.min_confidence)?;
        in_unit("dedupe threshold", self.dedupe_threshold)?;
        if self.tile_size < 8 {
            bail!("tile size must be at least 8, got {}", self.tile_size);
        }
        if !(self.context_factor >= 1.0 && self.context_factor.is_finite()) {
            bail!("context factor must be >= 1, got {}", self.context_factor);
        }
        if self.mcq_options < 2 {
            bail!("mcq option count must be at least 2, got {}", self.mcq_options);
        }
        if self.bootstrap == 0 {
            bail!("bootstrap resample count must be positive");
        }
        let source: SlideSource = self.slide.parse()?;
        if matches!(source, SlideSource::Raster(_)) && self.masks.is_none() {
            bail!("raster slides need a masks directory");
        }
        if let Some(m) = &self.mix {
            if !m.is_file() {
                bail!("mix file {} not found", m.display());
            }
        }
        Ok(())
    }

    pub fn load_mix(&self) -> Result<TaskTypeMix> {
        let mix = match &self.mix {
            Some(p) => TaskTypeMix::parse(&std::fs::read_to_string(p)?)?,
            None => TaskTypeMix::one_of_each(),
        };
        Ok(mix.with_mcq_options(self.mcq_options)?)
    }

    /// SHA-256 over the settings that shape outputs. Paths are replaced by
    /// what they contribute (the mix text), so moving a run does not change it.
    pub fn hash(&self) -> Result<String> {
        let hashed = serde_json::json!({
            "seed": self.seed,
            "slide": self.slide,
            "tile_size": self.tile_size,
            "qc_threshold": self.qc_threshold,
            "context_factor": self.context_factor,
            "min_confidence": self.min_confidence,
            "mcq_options": self.mcq_options,
            "bootstrap": self.bootstrap,
            "dedupe_threshold": self.dedupe_threshold,
            "mix": self.load_mix()?.to_text(),
            "diagnosis": self.diagnosis,
            "evaluate": self.evaluate,
            "masks": self.masks.is_some(),
        });
        Ok(hex::encode(Sha256::digest(hashed.to_string().as_bytes())))
    }
}

/// Scores every full tile of a slide with the heuristic QC.
pub fn tile_stage(slide: &dyn SlideImage, size: u32, threshold: f64) -> Result<Vec<ScoredTile>> {
    let tiles = tile_grid(slide, size)?;
    Ok(score_tiles(slide, &tiles, &HeuristicScorer::default(), threshold)?)
}

/// Writes ground-truth masks (`<tile key>.png`) and keyword annotations for
/// the kept tiles of a synthetic slide.
pub fn write_synthetic_masks(slide: &SyntheticSlide, tiles: &[TileRecord], dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let kept: Vec<_> = tiles.iter().filter(|t| t.kept).map(TileRecord::address).collect();
    let notes: Vec<Vec<Annotation>> = kept
        .par_iter()
        .map(|tile| -> Result<Vec<Annotation>> {
            let (mask, globals) = slide.tile_mask(tile);
            write_mask_png(&dir.join(format!("{}.png", tile.key())), &mask)?;
            Ok(slide.tile_annotations(tile, &globals))
        })
        .collect::<Result<_>>()?;
    write_jsonl(&dir.join(ANNOTATIONS_FILE), &notes.concat())?;
    Ok(kept.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractCounts {
    pub tiles: usize,
    pub tiles_without_mask: usize,
    pub cells: usize,
}

/// Cell records for every kept tile with a mask in `masks_dir`.
///
/// With a slide, unannotated instances go through the color classifier.
/// Without one, only instances whose annotation names a subtype become cells.
pub fn extract_stage(
    slide: Option<&dyn SlideImage>,
    tiles: &[TileRecord],
    masks_dir: &Path,
    context_factor: f64,
) -> Result<(Vec<CellRecord>, ExtractCounts)> {
    let ann_path = masks_dir.join(ANNOTATIONS_FILE);
    let annotations: Annotations = if ann_path.is_file() {
        read_jsonl::<Annotation>(&ann_path)?.into_iter().collect()
    } else {
        Annotations::default()
    };
    let classifier = ColorClassifier::default();
    let no_pixels = ColorClassifier::new(Vec::new(), 1.0);
    let kept: Vec<_> = tiles.iter().filter(|t| t.kept).map(TileRecord::address).collect();
    let per_tile: Vec<Option<Vec<CellRecord>>> = kept
        .par_iter()
        .map(|tile| -> Result<Option<Vec<CellRecord>>> {
            let path = masks_dir.join(format!("{}.png", tile.key()));
            if !path.is_file() {
                return Ok(None);
            }
            let mask = read_mask_png(&path, tile.clone())?;
            let cells = match slide {
                Some(s) => {
                    let pixels = TilePixels::from_slide(s, tile)?;
                    extract_cells(&pixels, &mask, &classifier, &annotations, context_factor)
                }
                None => {
                    let pixels = TilePixels::uniform(tile.size, synth::BACKGROUND);
                    extract_cells(&pixels, &mask, &no_pixels, &annotations, context_factor)
                }
            };
            Ok(Some(cells))
        })
        .collect::<Result<_>>()?;
    let mut counts = ExtractCounts {
        tiles: kept.len(),
        ..Default::default()
    };
    let mut cells = Vec::new();
    for t in per_tile {
        match t {
            Some(c) => cells.extend(c),
            None => counts.tiles_without_mask += 1,
        }
    }
    counts.cells = cells.len();
    Ok((cells, counts))
}

/// Slide summary from its differential and the most frequent cell keywords.
pub fn slide_summary(slide_id: &str, diagnosis: Diagnosis, diff: Differential, cells: &[CellRecord]) -> SlideSummary {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for k in cells.iter().flat_map(|c| &c.keywords) {
        *freq.entry(k).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    SlideSummary {
        slide_id: slide_id.to_string(),
        diagnosis,
        differential: diff,
        findings: ranked.into_iter().take(MAX_FINDINGS).map(|(k, _)| k.to_string()).collect(),
    }
}

/// Generates cell and slide questions, then removes near-duplicates.
pub fn gen_qa_stage(
    cells: &[CellRecord],
    slides: &[SlideSummary],
    mix: &TaskTypeMix,
    seed: u64,
    dedupe_threshold: f64,
) -> Result<Vec<QAItem>> {
    let cell_items: Vec<Vec<QAItem>> = cells
        .par_iter()
        .map(|c| qa::generate_cell_qa(c, mix, seed))
        .collect::<Result<_, _>>()?;
    let slide_items: Vec<Vec<QAItem>> = slides
        .iter()
        .map(|s| qa::generate_slide_qa(s, mix, seed))
        .collect::<Result<_, _>>()?;
    let all: Vec<QAItem> = cell_items.into_iter().chain(slide_items).flatten().collect();
    Ok(qa::dedupe(&all, dedupe_threshold))
}

/// Fixed answers that ignore the image: "True", option A, the most common
/// subtype, and the question echoed back. A floor for the benchmark.
pub fn baseline_predictions(items: &[QAItem]) -> Vec<Prediction> {
    items
        .iter()
        .map(|q| Prediction {
            qa_id: q.id.clone(),
            prediction: match q.qtype {
                QType::TrueFalse => "True".into(),
                QType::Mcq => "A".into(),
                QType::FillBlank => "neutrophil".into(),
                QType::Open => q.question.clone(),
            },
        })
        .collect()
}

pub fn evaluate_stage(items: &[QAItem], preds: &[Prediction], bootstrap: usize, seed: u64) -> Result<MetricReport> {
    let records = join_predictions(items, preds)?;
    Ok(metrics::evaluate(&records, bootstrap, seed)?)
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Row key of [`ManifestStats`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ManifestKey {
    pub split: String,
    pub combo: Combo,
}

/// Item counts per `(split, level, task, qtype)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ManifestStats {
    pub counts: BTreeMap<ManifestKey, usize>,
}

impl ManifestStats {
    pub fn add(&mut self, split: &str, combo: Combo) {
        *self
            .counts
            .entry(ManifestKey {
                split: split.to_string(),
                combo,
            })
            .or_default() += 1;
    }

    pub fn get(&self, split: &str, combo: Combo) -> usize {
        self.counts
            .get(&ManifestKey {
                split: split.to_string(),
                combo,
            })
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn from_items(split: &str, items: &[QAItem]) -> Self {
        let mut s = Self::default();
        items.iter().for_each(|i| s.add(split, i.combo()));
        s
    }

    /// CSV with columns `split,level,task,qtype,count`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "split,level,task,qtype,count")?;
        for (k, n) in &self.counts {
            writeln!(w, "{},{},{},{},{n}", k.split, k.combo.level, k.combo.task, k.combo.qtype)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ManifestReport {
    pub stats: ManifestStats,
    pub errors: Vec<LineError>,
}

impl ManifestReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Parses every line of a QA manifest, checks item rules and id uniqueness,
/// and counts the valid items under `split`. Bad lines are listed, not fatal.
pub fn validate_manifest(path: &Path, split: &str) -> Result<ManifestReport> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut report = ManifestReport::default();
    let mut ids = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let outcome = serde_json::from_str::<QAItem>(&line)
            .map_err(|e| format!("parse error: {e}"))
            .and_then(|item| item.validate().map(|_| item))
            .and_then(|item| {
                if ids.insert(item.id.clone()) {
                    Ok(item)
                } else {
                    Err(format!("duplicate id {:?}", item.id))
                }
            });
        match outcome {
            Ok(item) => report.stats.add(split, item.combo()),
            Err(message) => report.errors.push(LineError { line: lineno, message }),
        }
    }
    Ok(report)
}

/// Contents of `summary.json`. No timestamps, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tool_version: String,
    pub template_bank: String,
    pub seed: u64,
    pub config_hash: String,
    pub slide_id: String,
    pub counts: BTreeMap<String, usize>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.with_context(|| format!("stage {name} failed"))
}

/// Runs tile, extract-cells, differential, gen-qa, and (optionally) evaluate
/// with a baseline predictor. Outputs of finished stages stay on disk when a
/// later stage fails.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate().context("invalid configuration")?;
    let mix = cfg.load_mix()?;
    let config_hash = cfg.hash()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let mut counts = BTreeMap::new();

    let loaded = stage("tile", cfg.slide.parse::<SlideSource>()?.load().map_err(Into::into))?;
    let slide = loaded.as_slide();
    let scored = stage("tile", tile_stage(slide, cfg.tile_size, cfg.qc_threshold))?;
    let tiles: Vec<TileRecord> = scored.iter().map(TileRecord::from).collect();
    stage("tile", write_jsonl(&out.join("tiles.jsonl"), &tiles))?;
    counts.insert("tiles".into(), tiles.len());
    counts.insert("tiles_kept".into(), tiles.iter().filter(|t| t.kept).count());

    let masks_dir = match (loaded.synthetic(), &cfg.masks) {
        (_, Some(m)) => m.clone(),
        (Some(s), None) => {
            let dir = out.join("masks");
            stage("extract-cells", write_synthetic_masks(s, &tiles, &dir))?;
            dir
        }
        (None, None) => unreachable!("validated above"),
    };
    let (cells, ec) = stage("extract-cells", extract_stage(Some(slide), &tiles, &masks_dir, cfg.context_factor))?;
    stage("extract-cells", write_jsonl(&out.join("cells.jsonl"), &cells))?;
    counts.insert("cells".into(), ec.cells);
    counts.insert("tiles_without_mask".into(), ec.tiles_without_mask);

    let diff = differential(&cells, cfg.min_confidence);
    stage("differential", write_json(&out.join("diff.json"), &diff))?;
    counts.insert("differential_cells".into(), diff.n_cells);

    let diagnosis = cfg.diagnosis.or(loaded.synthetic().map(|s| s.diagnosis));
    let slides: Vec<SlideSummary> = diagnosis
        .map(|d| slide_summary(slide.id(), d, diff.clone(), &cells))
        .into_iter()
        .collect();
    stage("gen-qa", write_jsonl(&out.join("slides.jsonl"), &slides))?;
    let items = stage("gen-qa", gen_qa_stage(&cells, &slides, &mix, cfg.seed, cfg.dedupe_threshold))?;
    stage("gen-qa", write_jsonl(&out.join("qa.jsonl"), &items))?;
    counts.insert("qa_items".into(), items.len());

    if cfg.evaluate {
        let preds = baseline_predictions(&items);
        stage("evaluate", write_jsonl(&out.join("preds.jsonl"), &preds))?;
        let report = stage("evaluate", evaluate_stage(&items, &preds, cfg.bootstrap, cfg.seed))?;
        stage("evaluate", write_report(&out.join("report.csv"), &report))?;
        counts.insert("report_rows".into(), report.cells.values().map(BTreeMap::len).sum());
    }

    let summary = RunSummary {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        template_bank: qa::TEMPLATE_BANK_VERSION.to_string(),
        seed: cfg.seed,
        config_hash,
        slide_id: slide.id().to_string(),
        counts,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Reads a `summary.json` written by [`run_pipeline`].
pub fn read_summary(path: &Path) -> Result<RunSummary> {
    read_json(path)
}
