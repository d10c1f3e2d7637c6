//! Manifest validation against a cell-level training split with a known breakdown.

mod common;

use std::io::Write;

use pbskit::cells::Subtype;
use pbskit::jsonl::write_jsonl;
use pbskit::pipeline::{validate_manifest, ManifestStats};
use pbskit::qa::{generate_cell_qa, Combo, Level, QAItem, QType, Task, TaskTypeMix};

const BREAKDOWN: [(Task, [usize; 4]); 4] = [
    (Task::Morphology, [4972, 4481, 3263, 877]),
    (Task::Abnormality, [1702, 1729, 808, 3294]),
    (Task::Subtyping, [134, 647, 2360, 401]),
    (Task::Knowledge, [334, 1183, 397, 719]),
];
const QTYPES: [QType; 4] = [QType::TrueFalse, QType::Mcq, QType::FillBlank, QType::Open];

fn cell_train_split() -> Vec<QAItem> {
    let subtypes = Subtype::CANONICAL;
    let mut items = Vec::with_capacity(27_301);
    for (task, counts) in BREAKDOWN {
        for (qtype, n) in QTYPES.into_iter().zip(counts) {
            let combo = Combo::new(Level::Cell, task, qtype);
            let mix = TaskTypeMix::new().with(combo, 1).unwrap();
            for i in 0..n {
                let kw = [common::KEYWORDS[i % 6], common::KEYWORDS[(i / 6) % 6]];
                let c = common::cell(&format!("{combo}/{i}"), subtypes[i % subtypes.len()], &kw);
                let generated = generate_cell_qa(&c, &mix, i as u64).unwrap();
                assert_eq!(generated.len(), 1, "{combo} cell {i}");
                items.extend(generated);
            }
        }
    }
    items
}

#[test]
fn cell_training_split_matches_breakdown() {
    let items = cell_train_split();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cell_train.jsonl");
    write_jsonl(&path, &items).unwrap();

    let report = validate_manifest(&path, "train").unwrap();
    assert!(report.is_valid(), "{:?}", &report.errors[..report.errors.len().min(3)]);
    assert_eq!(report.stats.total(), 27_301);
    for (task, counts) in BREAKDOWN {
        for (qtype, n) in QTYPES.into_iter().zip(counts) {
            assert_eq!(report.stats.get("train", Combo::new(Level::Cell, task, qtype)), n, "{task} {qtype}");
        }
    }
    assert_eq!(report.stats, ManifestStats::from_items("train", &items));

    let mut csv = Vec::new();
    report.stats.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.contains("train,cell,abnormality,open,3294"), "{csv}");
}

#[test]
fn malformed_and_duplicate_lines_are_reported_with_line_numbers() {
    let c = common::cell("c1", Subtype::Monocyte, &["vacuolated cytoplasm"]);
    let items = generate_cell_qa(&c, &TaskTypeMix::one_of_each(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for q in &items {
        writeln!(f, "{}", serde_json::to_string(q).unwrap()).unwrap();
    }
    writeln!(f, "not json").unwrap();
    writeln!(f, "{}", serde_json::to_string(&items[0]).unwrap()).unwrap();
    let mut bad = items[1].clone();
    bad.id = "fresh".into();
    bad.answer.clear();
    writeln!(f, "{}", serde_json::to_string(&bad).unwrap()).unwrap();
    drop(f);

    let report = validate_manifest(&path, "train").unwrap();
    assert!(!report.is_valid());
    assert_eq!(report.stats.total(), items.len());
    let lines: Vec<usize> = report.errors.iter().map(|e| e.line).collect();
    let n = items.len();
    assert_eq!(lines, vec![n + 1, n + 2, n + 3]);
    assert!(report.errors[1].message.contains("duplicate"));
}

#[test]
fn empty_manifest_is_valid_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    let report = validate_manifest(&path, "test").unwrap();
    assert!(report.is_valid());
    assert_eq!(report.stats.total(), 0);
    assert!(validate_manifest(&dir.path().join("missing.jsonl"), "test").is_err());
}
