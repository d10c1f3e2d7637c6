//! Scoring predictions: per-item metrics, MCQ letter answers, and a report
//! with bootstrap spread per (level, task, question type) cell.

use pbskit::metrics::{bleu1, evaluate, exact_match, partial_match, rouge_l, semantic_sim, BagOfWords, EvalRecord};
use pbskit::qa::{Level, QType, Task};

fn record(id: &str, qtype: QType, task: Task, pred: &str, gold: &str, options: &[&str]) -> EvalRecord {
    EvalRecord {
        qa_id: id.into(),
        prediction: pred.into(),
        gold: gold.into(),
        qtype,
        task,
        level: Level::Cell,
        options: options.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn run_example() -> anyhow::Result<usize> {
    let (pred, gold) = ("The cell is a mature neutrophil.", "mature neutrophil with segmented nucleus");
    println!("EMatch {}", exact_match(pred, gold));
    println!("PMatch {}", partial_match(pred, "Neutrophil"));
    println!("BLEU-1 {:.4}", bleu1(pred, gold));
    println!("ROUGE-L {:.4}", rouge_l(pred, gold));
    println!("sim {:.4}", semantic_sim(pred, gold, &BagOfWords)?);

    let opts = ["Monocyte", "Neutrophil", "Basophil", "Eosinophil"];
    let records = vec![
        record("q1", QType::Mcq, Task::Subtyping, "B", "Neutrophil", &opts),
        record("q2", QType::Mcq, Task::Subtyping, "monocyte", "Neutrophil", &opts),
        record("q3", QType::TrueFalse, Task::Abnormality, "true", "True", &[]),
        record("q4", QType::FillBlank, Task::Subtyping, "a neutrophil", "neutrophil", &[]),
        record("q5", QType::Open, Task::Morphology, pred, gold, &[]),
    ];
    let report = evaluate(&records, 1000, 7)?;
    report.write_csv(std::io::stdout().lock())?;
    Ok(report.cells.len())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
