//! Deterministic question synthesis for a cell and a slide, with the quality
//! filter and near-duplicate removal.

use pbskit::cells::{CellRecord, CropBox, Differential, Subtype};
use pbskit::qa::{
    dedupe, generate_cell_qa, generate_slide_qa, qa_quality_filter, Diagnosis, Level, QAItem, QType, SlideSummary,
    Task, TaskTypeMix,
};
use pbskit::slide::TileAddress;

pub fn run_example() -> anyhow::Result<usize> {
    let cell = CellRecord {
        id: "demo__r0_c0__i3".into(),
        tile: TileAddress {
            slide_id: "demo".into(),
            row: 0,
            col: 0,
            size: 512,
        },
        crop_box: CropBox { x0: 100, y0: 80, side: 96 },
        subtype: Subtype::Neutrophil,
        confidence: 0.93,
        keywords: vec!["hypogranular cytoplasm".into()],
    };
    let summary = SlideSummary {
        slide_id: "demo".into(),
        diagnosis: Diagnosis::Mds,
        differential: Differential::from_percentages(
            &[(Subtype::Neutrophil, 55.0), (Subtype::Lymphocyte, 30.0), (Subtype::Monocyte, 15.0)],
            120,
        ),
        findings: vec!["hypolobated nuclei".into()],
    };

    let mix = TaskTypeMix::parse(
        "mcq_options = 4\n\
         cell.subtyping.mcq = 1\n\
         cell.morphology.open = 2\n\
         cell.abnormality.true_false = 1\n\
         slide.diagnosis.mcq = 1\n\
         slide.differential.fill_blank = 1\n",
    )?;
    let mut items = generate_cell_qa(&cell, &mix, 7)?;
    items.extend(generate_slide_qa(&summary, &mix, 7)?);
    for q in &items {
        println!("[{}] {}", q.combo(), q.question);
        if !q.options.is_empty() {
            println!("    options: {}", q.options.join(" | "));
        }
        println!("    answer: {}", q.answer);
    }

    let again = generate_cell_qa(&cell, &mix, 7)?;
    assert_eq!(again, items[..again.len()], "same seed, same items");

    let leak = QAItem {
        id: "leak".into(),
        level: Level::Cell,
        task: Task::Subtyping,
        qtype: QType::Open,
        image_ref: "demo".into(),
        question: "Is this neutrophil a mature neutrophil?".into(),
        options: vec![],
        answer: "neutrophil".into(),
        seed: 0,
    };
    println!("planted leak -> {:?}", qa_quality_filter(&leak));
    let doubled: Vec<QAItem> = items.iter().chain(items.iter()).cloned().collect();
    println!("dedupe: {} -> {}", doubled.len(), dedupe(&doubled, 0.9).len());
    Ok(items.len())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
