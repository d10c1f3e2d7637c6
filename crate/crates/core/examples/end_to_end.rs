//! The whole pipeline on a synthetic slide: tiles, masks, cells,
//! differential, questions, baseline predictions, and a metric report.

use pbskit::pipeline::{run_pipeline, validate_manifest, RunConfig};

pub fn run_example() -> anyhow::Result<usize> {
    let out = std::env::temp_dir().join(format!("pbskit-e2e-{}", std::process::id()));
    let cfg = RunConfig::new("synthetic:2048x2048:7", &out, 7);
    let summary = run_pipeline(&cfg)?;
    println!("config {}", &summary.config_hash[..16]);
    for (k, v) in &summary.counts {
        println!("  {k:<20} {v}");
    }
    let stats = validate_manifest(&out.join("qa.jsonl"), "synthetic")?;
    println!("manifest: {} valid items, {} errors", stats.stats.total(), stats.errors.len());
    let report = std::fs::read_to_string(out.join("report.csv"))?;
    for line in report.lines().take(6) {
        println!("  {line}");
    }
    std::fs::remove_dir_all(&out)?;
    Ok(stats.stats.total())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
