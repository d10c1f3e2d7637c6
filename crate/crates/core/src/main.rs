use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pbskit::cells::{differential, CellRecord};
use pbskit::jsonl::{read_jsonl, write_json, write_jsonl};
use pbskit::metrics::Prediction;
use pbskit::pipeline::{self, RunConfig, DEFAULT_SEED, SEED_ENV};
use pbskit::qa::{Diagnosis, QAItem, SlideSummary, TaskTypeMix};
use pbskit::slide::{SlideSource, TileRecord};
use pbskit::train::{self, DataSource, ModelState, PhasePlan, Schedule};

/// Peripheral blood smear toolkit: tiling, cell extraction, QA synthesis,
/// benchmark scoring, and toy alignment training.
#[derive(Parser)]
#[command(name = "pbskit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tile a slide and score every tile with the quality heuristic.
    Tile {
        /// Image path or `synthetic:WxH:seed`.
        #[arg(long)]
        slide: String,
        #[arg(long, default_value_t = pbskit::slide::TILE_SIZE)]
        size: u32,
        /// Keep tiles with quality >= threshold.
        #[arg(long, default_value_t = pbskit::slide::QC_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = "tiles.jsonl")]
        out: PathBuf,
        /// For synthetic slides: also write ground-truth masks of kept tiles here.
        #[arg(long)]
        masks_out: Option<PathBuf>,
    },
    /// Turn instance masks of kept tiles into labeled cell crops.
    ExtractCells {
        #[arg(long, default_value = "tiles.jsonl")]
        tiles: PathBuf,
        /// Directory of `<tile key>.png` masks plus optional annotations.jsonl.
        #[arg(long)]
        masks: PathBuf,
        /// Crop side as a multiple of the larger bounding-box side.
        #[arg(long, default_value_t = pbskit::cells::DEFAULT_CONTEXT_FACTOR)]
        factor: f64,
        /// Slide pixels for the color classifier; without it only annotated subtypes are used.
        #[arg(long)]
        slide: Option<String>,
        #[arg(long, default_value = "cells.jsonl")]
        out: PathBuf,
    },
    /// WBC differential over extracted cells.
    Differential {
        #[arg(long, default_value = "cells.jsonl")]
        cells: PathBuf,
        #[arg(long, default_value_t = pbskit::cells::DEFAULT_MIN_CONFIDENCE)]
        min_conf: f64,
        #[arg(long, default_value = "diff.json")]
        out: PathBuf,
        /// Also write a slide summary line (needs the diagnosis: anemia, MDS, or control).
        #[arg(long, requires = "slides_out")]
        diagnosis: Option<Diagnosis>,
        #[arg(long, requires = "diagnosis")]
        slides_out: Option<PathBuf>,
    },
    /// Synthesize question-answer items from cells and slide summaries.
    GenQa {
        #[arg(long)]
        cells: Option<PathBuf>,
        #[arg(long)]
        slides: Option<PathBuf>,
        /// `level.task.qtype = count` lines; defaults to one item per supported combination.
        #[arg(long)]
        mix: Option<PathBuf>,
        /// Overrides `mcq_options` from the mix file.
        #[arg(long)]
        mcq_options: Option<usize>,
        #[arg(long, default_value_t = pbskit::qa::DEFAULT_DEDUPE_THRESHOLD)]
        dedupe: f64,
        #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value = "qa.jsonl")]
        out: PathBuf,
    },
    /// Score predictions against a QA manifest.
    Evaluate {
        #[arg(long, default_value = "qa.jsonl")]
        qa: PathBuf,
        /// JSONL of {qa_id, prediction}.
        #[arg(long)]
        pred: PathBuf,
        /// Bootstrap resamples per report cell.
        #[arg(long, default_value_t = pbskit::metrics::DEFAULT_BOOTSTRAP)]
        boot: usize,
        #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value = "report.csv")]
        out: PathBuf,
    },
    /// Train patch-to-cell token alignment on synthetic pairs.
    AlignTrain {
        #[arg(long, default_value_t = 256)]
        pairs: usize,
        /// Tokens per patch and per cell set.
        #[arg(long, default_value_t = 32)]
        tokens: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = train::DEFAULT_TOTAL_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = train::DEFAULT_BATCH_SIZE)]
        batch: usize,
        /// Peak learning rate of the warmup + cosine schedule.
        #[arg(long, default_value_t = train::TOY_BASE_LR)]
        lr: f64,
        /// Noise added to synthetic patch inputs.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Ablation: run forward passes only, no alignment losses or updates.
        #[arg(long)]
        no_align: bool,
        #[arg(long, default_value = "trace.csv")]
        trace: PathBuf,
        /// Write the trained model state here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Check a QA manifest and print counts per split, level, task, and question type.
    Validate {
        #[arg(long, default_value = "qa.jsonl")]
        manifest: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Write the count table as CSV instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run tile, extract-cells, differential, gen-qa, and evaluate in one go.
    Run {
        #[arg(long, default_value = "synthetic:2048x2048:7")]
        slide: String,
        #[arg(long, default_value = "pbskit-run")]
        out: PathBuf,
        #[arg(long, env = SEED_ENV, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Mask directory for raster slides.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = pbskit::slide::TILE_SIZE)]
        size: u32,
        #[arg(long, default_value_t = pbskit::slide::QC_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = pbskit::cells::DEFAULT_CONTEXT_FACTOR)]
        factor: f64,
        #[arg(long, default_value_t = pbskit::cells::DEFAULT_MIN_CONFIDENCE)]
        min_conf: f64,
        #[arg(long, default_value_t = pbskit::qa::DEFAULT_MCQ_OPTIONS)]
        mcq_options: usize,
        #[arg(long, default_value_t = pbskit::metrics::DEFAULT_BOOTSTRAP)]
        boot: usize,
        #[arg(long, default_value_t = pbskit::qa::DEFAULT_DEDUPE_THRESHOLD)]
        dedupe: f64,
        #[arg(long)]
        mix: Option<PathBuf>,
        /// Diagnosis for raster slides (anemia, MDS, or control).
        #[arg(long)]
        diagnosis: Option<Diagnosis>,
        /// Skip the baseline evaluation stage.
        #[arg(long)]
        no_eval: bool,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Tile {
            slide,
            size,
            threshold,
            out,
            masks_out,
        } => {
            let loaded = slide.parse::<SlideSource>()?.load()?;
            let scored = pipeline::tile_stage(loaded.as_slide(), size, threshold)?;
            let records: Vec<TileRecord> = scored.iter().map(TileRecord::from).collect();
            write_jsonl(&out, &records)?;
            let kept = records.iter().filter(|t| t.kept).count();
            println!("{} tiles, {kept} kept -> {}", records.len(), out.display());
            if let Some(dir) = masks_out {
                let Some(s) = loaded.synthetic() else {
                    bail!("--masks-out only works for synthetic slides");
                };
                let n = pipeline::write_synthetic_masks(s, &records, &dir)?;
                println!("{n} masks -> {}", dir.display());
            }
        }
        Command::ExtractCells {
            tiles,
            masks,
            factor,
            slide,
            out,
        } => {
            let tiles: Vec<TileRecord> = read_jsonl(&tiles)?;
            let loaded = slide.map(|s| s.parse::<SlideSource>()?.load()).transpose()?;
            let (cells, counts) = pipeline::extract_stage(loaded.as_ref().map(|l| l.as_slide()), &tiles, &masks, factor)?;
            write_jsonl(&out, &cells)?;
            println!(
                "{} cells from {} tiles ({} without mask) -> {}",
                counts.cells,
                counts.tiles,
                counts.tiles_without_mask,
                out.display()
            );
        }
        Command::Differential {
            cells,
            min_conf,
            out,
            diagnosis,
            slides_out,
        } => {
            if !(0.0..=1.0).contains(&min_conf) {
                bail!("--min-conf must be in [0, 1]");
            }
            let cells: Vec<CellRecord> = read_jsonl(&cells)?;
            let diff = differential(&cells, min_conf);
            write_json(&out, &diff)?;
            for (s, p) in &diff.percentages {
                println!("{s:<12} {p:6.2}%");
            }
            println!("n = {}, others = {}", diff.n_cells, diff.others_count);
            if let (Some(d), Some(path)) = (diagnosis, slides_out) {
                let ids: std::collections::BTreeSet<&str> = cells.iter().map(|c| c.tile.slide_id.as_str()).collect();
                if ids.len() != 1 {
                    bail!("a slide summary needs cells from exactly one slide, found {}", ids.len());
                }
                let id = ids.into_iter().next().unwrap_or_default().to_string();
                write_jsonl(&path, &[pipeline::slide_summary(&id, d, diff.clone(), &cells)])?;
            }
        }
        Command::GenQa {
            cells,
            slides,
            mix,
            mcq_options,
            dedupe,
            seed,
            out,
        } => {
            if cells.is_none() && slides.is_none() {
                bail!("give --cells, --slides, or both");
            }
            let mut m = match mix {
                Some(p) => TaskTypeMix::parse(&std::fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => TaskTypeMix::one_of_each(),
            };
            if let Some(n) = mcq_options {
                m = m.with_mcq_options(n)?;
            }
            let cells: Vec<CellRecord> = cells.map(|p| read_jsonl(&p)).transpose()?.unwrap_or_default();
            let slides: Vec<SlideSummary> = slides.map(|p| read_jsonl(&p)).transpose()?.unwrap_or_default();
            let items = pipeline::gen_qa_stage(&cells, &slides, &m, seed, dedupe)?;
            write_jsonl(&out, &items)?;
            println!("{} items -> {}", items.len(), out.display());
        }
        Command::Evaluate {
            qa,
            pred,
            boot,
            seed,
            out,
        } => {
            let items: Vec<QAItem> = read_jsonl(&qa)?;
            let preds: Vec<Prediction> = read_jsonl(&pred)?;
            let report = pipeline::evaluate_stage(&items, &preds, boot, seed)?;
            pipeline::write_report(&out, &report)?;
            report.write_csv(std::io::stdout().lock())?;
        }
        Command::AlignTrain {
            pairs,
            tokens,
            dim,
            steps,
            batch,
            lr,
            noise,
            seed,
            no_align,
            trace,
            checkpoint,
        } => {
            let source = DataSource::SynthPaired {
                pairs,
                tokens,
                dim,
                noise,
                cell_free: 0,
            };
            let mut plan = PhasePlan::cell_patch_align(source);
            plan.batch_size = batch;
            if no_align {
                plan = plan.without_alignment();
            }
            let schedule = Schedule::new(steps).with_base_lr(lr);
            let data = source.paired(seed).context("paired data")?;
            let mut state = ModelState::new(dim, tokens, seed);
            let t = train::run_phase(&plan, &mut state, &schedule, seed)?;
            let mut w = BufWriter::new(File::create(&trace).with_context(|| trace.display().to_string())?);
            t.write_csv(&mut w)?;
            w.flush()?;
            if no_align {
                println!("ablation: {} steps, no alignment losses recorded", t.rows.len());
            } else {
                let (g, l, total) = train::alignment_losses(&state, &data, plan.loss.lambda_local)?;
                let acc = train::retrieval_accuracy(&state, &data)?;
                println!(
                    "first batch loss {:.4}, final loss {total:.4} (global {g:.4}, local {l:.4}), retrieval {:.1}%",
                    t.first_total().unwrap_or(f64::NAN),
                    100.0 * acc
                );
            }
            if let Some(p) = checkpoint {
                let mut w = BufWriter::new(File::create(&p)?);
                state.write_checkpoint(&mut w)?;
                w.flush()?;
            }
        }
        Command::Validate { manifest, split, out } => {
            let report = pipeline::validate_manifest(&manifest, &split)?;
            match out {
                Some(p) => report.stats.write_csv(BufWriter::new(File::create(&p)?))?,
                None => report.stats.write_csv(std::io::stdout().lock())?,
            }
            for e in &report.errors {
                eprintln!("{}:{}: {}", manifest.display(), e.line, e.message);
            }
            println!("total {}", report.stats.total());
            if !report.is_valid() {
                bail!("{} invalid line(s)", report.errors.len());
            }
        }
        Command::Run {
            slide,
            out,
            seed,
            masks,
            size,
            threshold,
            factor,
            min_conf,
            mcq_options,
            boot,
            dedupe,
            mix,
            diagnosis,
            no_eval,
        } => {
            let mut cfg = RunConfig::new(slide, out, seed);
            cfg.masks = masks;
            cfg.tile_size = size;
            cfg.qc_threshold = threshold;
            cfg.context_factor = factor;
            cfg.min_confidence = min_conf;
            cfg.mcq_options = mcq_options;
            cfg.bootstrap = boot;
            cfg.dedupe_threshold = dedupe;
            cfg.mix = mix;
            cfg.diagnosis = diagnosis;
            cfg.evaluate = !no_eval;
            let summary = pipeline::run_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}
