//! Versioned template bank. Each `(level, task, qtype)` with templates maps
//! a record to a question, an answer, and (for MCQ) an unshuffled option list.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Combo, Diagnosis, Level, QType, SlideSummary, Task};
use crate::cells::{CellRecord, Subtype};
use crate::metrics::normalize;

/// Bumped whenever template wording or slot grammar changes.
pub const TEMPLATE_BANK_VERSION: &str = "pbs-templates-1";

pub(crate) enum Source<'a> {
    Cell(&'a CellRecord),
    Slide(&'a SlideSummary),
}

pub(crate) struct Draft {
    pub question: String,
    /// Answer first, then distractors; shuffled by the caller.
    pub options: Vec<String>,
    pub answer: String,
}

const ABNORMALITIES: &[&str] = &[
    "hypolobated nuclei",
    "hypersegmented nucleus",
    "hypogranular cytoplasm",
    "toxic granulation",
    "vacuolated cytoplasm",
    "degranulated cytoplasm",
    "reactive morphology",
    "enlarged size",
    "atypical nuclear contour",
    "Auer rods",
];

const EXTRA_DIAGNOSES: &[&str] = &[
    "acute myeloid leukemia",
    "chronic lymphocytic leukemia",
    "acute promyelocytic leukemia",
    "immune thrombocytopenia",
];

fn nucleus(s: Subtype) -> &'static str {
    match s {
        Subtype::Neutrophil => "segmented nucleus with three to five lobes",
        Subtype::Eosinophil => "bilobed nucleus",
        Subtype::Basophil => "nucleus obscured by granules",
        Subtype::Lymphocyte => "round dense nucleus",
        Subtype::Monocyte => "folded kidney-shaped nucleus",
        Subtype::Others => "irregular immature nucleus",
    }
}

fn cytoplasm(s: Subtype) -> &'static str {
    match s {
        Subtype::Neutrophil => "pale pink cytoplasm with fine granules",
        Subtype::Eosinophil => "large orange-red cytoplasmic granules",
        Subtype::Basophil => "coarse dark purple granules",
        Subtype::Lymphocyte => "scant pale blue cytoplasm",
        Subtype::Monocyte => "abundant gray-blue cytoplasm",
        Subtype::Others => "atypical cytoplasm",
    }
}

fn condition(s: Subtype) -> &'static str {
    match s {
        Subtype::Neutrophil => "bacterial infection",
        Subtype::Eosinophil => "parasitic infection",
        Subtype::Basophil => "chronic myeloid leukemia",
        Subtype::Lymphocyte => "viral infection",
        Subtype::Monocyte => "chronic inflammation",
        Subtype::Others => "a hematologic neoplasm",
    }
}

fn function(s: Subtype) -> &'static str {
    match s {
        Subtype::Neutrophil => "phagocytosis of bacteria",
        Subtype::Eosinophil => "defense against parasites",
        Subtype::Basophil => "histamine release in allergic reactions",
        Subtype::Lymphocyte => "adaptive immune responses",
        Subtype::Monocyte => "differentiation into tissue macrophages",
        Subtype::Others => "no single defined function",
    }
}

fn hallmark(d: Diagnosis) -> &'static str {
    match d {
        Diagnosis::Mds => "dysplastic neutrophils with hypolobated nuclei",
        Diagnosis::Anemia => "pale, small red blood cells",
        Diagnosis::Control => "normal blood cell morphology",
    }
}

fn follow_up(d: Diagnosis) -> &'static str {
    match d {
        Diagnosis::Mds => "Bone marrow examination with cytogenetic studies is recommended.",
        Diagnosis::Anemia => "Iron studies and a reticulocyte count are recommended.",
        Diagnosis::Control => "No specific follow-up is needed beyond routine care.",
    }
}

fn lower(s: Subtype) -> String {
    s.name().to_lowercase()
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    &xs[rng.random_range(0..xs.len())]
}

fn tf(truth: bool) -> String {
    if truth { "True" } else { "False" }.to_string()
}

/// Picks the true statement with probability 1/2, otherwise a random alternative.
fn tf_candidate(truth: &str, alternatives: &[String], rng: &mut ChaCha8Rng) -> (String, bool) {
    let alts: Vec<&String> = alternatives.iter().filter(|a| normalize(a) != normalize(truth)).collect();
    if alts.is_empty() || rng.random_bool(0.5) {
        (truth.to_string(), true)
    } else {
        ((*pick(rng, &alts)).clone(), false)
    }
}

/// `[answer, distractors…]` with up to `n - 1` distractors drawn from `pool`.
fn mcq_options(answer: &str, pool: &[String], n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<String>> {
    let mut seen = vec![normalize(answer)];
    let mut candidates = Vec::new();
    for p in pool {
        let key = normalize(p);
        if !seen.contains(&key) {
            seen.push(key);
            candidates.push(p.clone());
        }
    }
    let mut out = vec![answer.to_string()];
    out.extend(candidates.choose_multiple(rng, n.saturating_sub(1)).cloned());
    (out.len() >= 2).then_some(out)
}

fn strings(xs: impl IntoIterator<Item = impl Into<String>>) -> Vec<String> {
    xs.into_iter().map(Into::into).collect()
}

fn open(question: impl Into<String>, answer: impl Into<String>) -> Draft {
    Draft {
        question: question.into(),
        options: Vec::new(),
        answer: answer.into(),
    }
}

fn closed(question: impl Into<String>, answer: impl Into<String>, options: Vec<String>) -> Draft {
    Draft {
        question: question.into(),
        options,
        answer: answer.into(),
    }
}

/// Drafts one item, or `None` when the record cannot support the combination.
pub(crate) fn draft(source: &Source<'_>, combo: Combo, n_options: usize, rng: &mut ChaCha8Rng) -> Option<Draft> {
    match (source, combo.level) {
        (Source::Cell(c), Level::Cell) => cell_draft(c, combo.task, combo.qtype, n_options, rng),
        (Source::Slide(s), Level::Slide) => slide_draft(s, combo.task, combo.qtype, n_options, rng),
        _ => None,
    }
}

fn cell_draft(cell: &CellRecord, task: Task, qtype: QType, n: usize, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let s = cell.subtype;
    let all_types = Subtype::ALL;
    Some(match (task, qtype) {
        (Task::Subtyping, _) if !s.is_canonical() => return None,
        (Task::Subtyping, QType::TrueFalse) => {
            let alts = strings(Subtype::CANONICAL.iter().map(|t| lower(*t)));
            let (cand, truth) = tf_candidate(&lower(s), &alts, rng);
            let q = pick(rng, &["Is the cell in this image a {}?", "Does this crop show a {}?"]).replace("{}", &cand);
            open(q, tf(truth))
        }
        (Task::Subtyping, QType::Mcq) => {
            let pool = strings(Subtype::CANONICAL.iter().map(|t| t.name()));
            let q = pick(
                rng,
                &[
                    "Which type of white blood cell is shown in this image?",
                    "Identify the white blood cell type in this crop.",
                ],
            );
            closed(*q, s.name(), mcq_options(s.name(), &pool, n, rng)?)
        }
        (Task::Subtyping, QType::FillBlank) => open(
            *pick(
                rng,
                &["The white blood cell in this image is a ____.", "Fill in the cell type shown in this crop: ____."],
            ),
            s.name(),
        ),
        (Task::Subtyping, QType::Open) => open(
            "What type of white blood cell is this, and which features support it?",
            format!("This is a {} with a {} and {}.", lower(s), nucleus(s), cytoplasm(s)),
        ),

        (Task::Morphology, QType::TrueFalse) => {
            let alts = strings(all_types.iter().map(|t| nucleus(*t)));
            let (cand, truth) = tf_candidate(nucleus(s), &alts, rng);
            open(format!("Does this cell have a {cand}?"), tf(truth))
        }
        (Task::Morphology, QType::Mcq) => {
            let pool = strings(all_types.iter().map(|t| nucleus(*t)));
            closed(
                "Which nuclear feature best describes this cell?",
                nucleus(s),
                mcq_options(nucleus(s), &pool, n, rng)?,
            )
        }
        (Task::Morphology, QType::FillBlank) => {
            if rng.random_bool(0.5) {
                open("The nucleus of this cell appears as a ____.", nucleus(s))
            } else {
                open("The cytoplasm of this cell shows ____.", cytoplasm(s))
            }
        }
        (Task::Morphology, QType::Open) => open(
            *pick(rng, &["Describe the appearance of this cell.", "What morphological features does this cell show?"]),
            format!("The cell has a {} and {}.", nucleus(s), cytoplasm(s)),
        ),

        (Task::Abnormality, _) => cell_abnormality(cell, qtype, n, rng)?,

        (Task::Knowledge, QType::TrueFalse) => {
            let alts = strings(all_types.iter().map(|t| condition(*t)));
            let (cand, truth) = tf_candidate(condition(s), &alts, rng);
            open(
                format!("An increased count of this cell type is typically associated with {cand}."),
                tf(truth),
            )
        }
        (Task::Knowledge, QType::Mcq) => {
            let pool = strings(all_types.iter().map(|t| condition(*t)));
            closed(
                "An increased count of the cell type shown is most often associated with which condition?",
                condition(s),
                mcq_options(condition(s), &pool, n, rng)?,
            )
        }
        (Task::Knowledge, QType::FillBlank) => open("The main function of this cell type is ____.", function(s)),
        (Task::Knowledge, QType::Open) => open(
            "What is the clinical significance of an elevated count of this cell type?",
            format!("An elevated count of this cell type commonly suggests {}.", condition(s)),
        ),

        (Task::Differential | Task::Diagnosis, _) => return None,
    })
}

fn cell_abnormality(cell: &CellRecord, qtype: QType, n: usize, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let kws = &cell.keywords;
    let present = |a: &str| kws.iter().any(|k| normalize(k) == normalize(a));
    let absent = strings(ABNORMALITIES.iter().filter(|a| !present(a)).copied());
    let chosen = (!kws.is_empty()).then(|| pick(rng, kws).clone());
    Some(match qtype {
        QType::TrueFalse => {
            let (cand, truth) = match &chosen {
                Some(k) => tf_candidate(k, &absent, rng),
                None => (pick(rng, &absent).clone(), false),
            };
            open(format!("Does this cell show {cand}?"), tf(truth))
        }
        QType::Mcq => {
            let answer = chosen.unwrap_or_else(|| "no visible abnormality".into());
            let mut pool = absent;
            if !kws.is_empty() {
                pool.push("no visible abnormality".into());
            }
            closed(
                "Which morphological abnormality is present in this cell?",
                answer.clone(),
                mcq_options(&answer, &pool, n, rng)?,
            )
        }
        QType::FillBlank => open(
            "Name the morphological abnormality seen in this cell: ____.",
            chosen.unwrap_or_else(|| "none".into()),
        ),
        QType::Open => {
            let answer = if kws.is_empty() {
                "No morphological abnormality is visible.".to_string()
            } else {
                format!("The cell shows {}.", kws.join(" and "))
            };
            open("What abnormality, if any, is visible in this cell?", answer)
        }
    })
}

fn slide_draft(s: &SlideSummary, task: Task, qtype: QType, n: usize, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let dx = s.diagnosis;
    let diff = &s.differential;
    Some(match (task, qtype) {
        (Task::Diagnosis, QType::TrueFalse) => {
            let alts = strings(Diagnosis::ALL.iter().map(|d| d.label()));
            let (cand, truth) = tf_candidate(dx.label(), &alts, rng);
            open(format!("Are the findings on this slide consistent with {cand}?"), tf(truth))
        }
        (Task::Diagnosis, QType::Mcq) => {
            // cohort labels first, then the extra lexicon only if more options are needed
            let cohort = strings(Diagnosis::ALL.iter().filter(|d| **d != dx).map(|d| d.label()));
            let mut options = mcq_options(dx.label(), &cohort, n, rng)?;
            if options.len() < n {
                let extra = strings(EXTRA_DIAGNOSES.iter().copied());
                let more = mcq_options(dx.label(), &extra, n - options.len() + 1, rng)?;
                options.extend(more.into_iter().skip(1));
            }
            closed(
                "What is the most likely diagnosis for this patient based on the whole slide?",
                dx.label(),
                options,
            )
        }
        (Task::Diagnosis, QType::FillBlank) => open("The most likely diagnosis suggested by this slide is ____.", dx.label()),
        (Task::Diagnosis, QType::Open) => open(
            "What diagnosis do the slide findings suggest, and why?",
            if s.findings.is_empty() {
                format!("The slide is most consistent with {}, with no notable abnormality.", dx.label())
            } else {
                format!("The slide is most consistent with {}, given {}.", dx.label(), s.findings.join(" and "))
            },
        ),

        (Task::Differential, _) if diff.n_cells == 0 => return None,
        (Task::Differential, QType::TrueFalse) => {
            let present: Vec<Subtype> = Subtype::CANONICAL.into_iter().filter(|t| diff.percent(*t) > 0.0).collect();
            let t = *pick(rng, &present);
            let actual = diff.percent(t).round() as i64;
            let (shown, truth) = if rng.random_bool(0.5) {
                (actual, true)
            } else {
                let delta = rng.random_range(10..=30) * if rng.random_bool(0.5) { 1 } else { -1 };
                let shifted = (actual + delta).clamp(0, 100);
                let shifted = if shifted == actual { (actual - delta).clamp(0, 100) } else { shifted };
                (shifted, false)
            };
            open(
                format!("Do {}s make up about {shown}% of the white blood cells on this slide?", lower(t)),
                tf(truth),
            )
        }
        (Task::Differential, QType::Mcq) => {
            let present: Vec<Subtype> = Subtype::CANONICAL.into_iter().filter(|t| diff.percent(*t) > 0.0).collect();
            let t = *pick(rng, &present);
            let actual = diff.percent(t).round() as i64;
            let pool: Vec<String> = [-30i64, -20, -10, 10, 20, 30]
                .iter()
                .map(|d| actual + d)
                .filter(|p| (0..=100).contains(p))
                .map(|p| format!("{p}%"))
                .collect();
            closed(
                format!("Approximately what percentage of white blood cells on this slide are {}s?", lower(t)),
                format!("{actual}%"),
                mcq_options(&format!("{actual}%"), &pool, n, rng)?,
            )
        }
        (Task::Differential, QType::FillBlank) => open(
            "The most abundant white blood cell type on this slide is the ____.",
            diff.dominant()?.name(),
        ),
        (Task::Differential, QType::Open) => return None,

        (Task::Morphology, _) => {
            let dom = diff.dominant()?;
            let pct = diff.percent(dom).round() as i64;
            match qtype {
                QType::TrueFalse => {
                    let alts = strings(Subtype::CANONICAL.iter().map(|t| nucleus(*t)));
                    let (cand, truth) = tf_candidate(nucleus(dom), &alts, rng);
                    open(
                        format!("Are most white blood cells on this slide cells with a {cand}?"),
                        tf(truth),
                    )
                }
                QType::Mcq => {
                    let pool = strings(Subtype::CANONICAL.iter().map(|t| nucleus(*t)));
                    closed(
                        "Which nuclear morphology predominates among the white blood cells on this slide?",
                        nucleus(dom),
                        mcq_options(nucleus(dom), &pool, n, rng)?,
                    )
                }
                QType::FillBlank => open("Most white blood cells on this slide have a ____.", nucleus(dom)),
                QType::Open => open(
                    "Describe the overall white blood cell morphology on this slide.",
                    format!(
                        "Most white blood cells are {}s with a {}, about {pct}% of the differential.",
                        lower(dom),
                        nucleus(dom)
                    ),
                ),
            }
        }

        (Task::Abnormality, _) => {
            let present = |a: &str| s.findings.iter().any(|f| normalize(f) == normalize(a));
            let absent = strings(ABNORMALITIES.iter().filter(|a| !present(a)).copied());
            let chosen = (!s.findings.is_empty()).then(|| pick(rng, &s.findings).clone());
            match qtype {
                QType::TrueFalse => {
                    let (cand, truth) = match &chosen {
                        Some(f) => tf_candidate(f, &absent, rng),
                        None => (pick(rng, &absent).clone(), false),
                    };
                    open(format!("Is {cand} observed among the cells on this slide?"), tf(truth))
                }
                QType::Mcq => {
                    let answer = chosen.unwrap_or_else(|| "no notable abnormality".into());
                    let mut pool = absent;
                    if !s.findings.is_empty() {
                        pool.push("no notable abnormality".into());
                    }
                    closed(
                        "Which abnormality is observed on this slide?",
                        answer.clone(),
                        mcq_options(&answer, &pool, n, rng)?,
                    )
                }
                QType::FillBlank => open(
                    "A notable abnormality observed on this slide is ____.",
                    chosen.unwrap_or_else(|| "none".into()),
                ),
                QType::Open => open(
                    "Summarize the abnormal findings on this slide.",
                    if s.findings.is_empty() {
                        "No notable abnormality is seen.".to_string()
                    } else {
                        format!("The slide shows {}.", s.findings.join(" and "))
                    },
                ),
            }
        }

        (Task::Knowledge, QType::Mcq) => {
            let pool = strings(
                Diagnosis::ALL
                    .iter()
                    .map(|d| hallmark(*d))
                    .chain(["circulating blasts with Auer rods", "target cells with basophilic stippling"]),
            );
            closed(
                "Which finding is most characteristic of the condition suggested by this slide?",
                hallmark(dx),
                mcq_options(hallmark(dx), &pool, n, rng)?,
            )
        }
        (Task::Knowledge, QType::Open) => open(
            "What follow-up is typically recommended for the condition suggested by this slide?",
            follow_up(dx),
        ),
        (Task::Knowledge, _) | (Task::Subtyping, _) => return None,
    })
}
