//! Every example runs to completion and reports sensible numbers.

#[path = "../examples/align_gradients.rs"]
mod align_gradients;
#[path = "../examples/differential.rs"]
mod differential;
#[path = "../examples/end_to_end.rs"]
mod end_to_end;
#[path = "../examples/evaluate_predictions.rs"]
mod evaluate_predictions;
#[path = "../examples/extract_cells.rs"]
mod extract_cells;
#[path = "../examples/generate_qa.rs"]
mod generate_qa;
#[path = "../examples/pretrain_itc.rs"]
mod pretrain_itc;
#[path = "../examples/tile_slide.rs"]
mod tile_slide;
#[path = "../examples/train_alignment.rs"]
mod train_alignment;

#[test]
fn tile_slide_keeps_only_the_readable_band() {
    let (tiles, kept) = tile_slide::run_example().unwrap();
    assert_eq!(tiles, 8);
    assert_eq!(kept, 4);
}

#[test]
fn extract_cells_matches_ground_truth() {
    let acc = extract_cells::run_example().unwrap();
    assert!(acc >= 0.9, "classifier agreement {acc}");
}

#[test]
fn differential_excludes_others_and_low_confidence() {
    let neutro = differential::run_example().unwrap();
    assert!((neutro - 60.0).abs() < 1e-9, "neutrophil share {neutro}");
}

#[test]
fn generate_qa_produces_items() {
    assert!(generate_qa::run_example().unwrap() > 0);
}

#[test]
fn evaluate_predictions_fills_the_report() {
    // four distinct (level, task, qtype) combinations among the records
    assert_eq!(evaluate_predictions::run_example().unwrap(), 4);
}

#[test]
fn align_gradients_agree_with_finite_differences() {
    let worst = align_gradients::run_example().unwrap();
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn pretrain_itc_learns_caption_matching() {
    let (before, after) = pretrain_itc::run_example().unwrap();
    assert!(after >= 0.9 && after > before, "caption accuracy {before} -> {after}");
}

#[test]
fn train_alignment_learns_the_pairing() {
    let (before, after, acc) = train_alignment::run_example().unwrap();
    assert!(after <= 0.1 * before, "{before} -> {after}");
    assert!(acc >= 0.95, "retrieval {acc}");
}

#[test]
fn end_to_end_writes_a_valid_manifest() {
    assert!(end_to_end::run_example().unwrap() > 100);
}
