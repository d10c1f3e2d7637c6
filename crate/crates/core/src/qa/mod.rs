//! Template-based question synthesis over cell records and slide summaries.
//!
//! Generation is a pure function of `(record, mix, seed)`: every item draws
//! from its own ChaCha8 stream derived from the seed and the item's slot.

mod filter;
mod templates;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cells::{CellRecord, Differential};
use crate::seed;

pub use filter::{dedupe, qa_quality_filter, shuffle_options, RejectReason, Verdict};
pub use templates::TEMPLATE_BANK_VERSION;

/// Default number of options in multiple-choice questions.
pub const DEFAULT_MCQ_OPTIONS: usize = 4;
/// Default Jaccard threshold for near-duplicate question removal.
pub const DEFAULT_DEDUPE_THRESHOLD: f64 = 0.9;
/// Fill-in-the-blank answers must have fewer words than this.
pub const MAX_FILL_BLANK_WORDS: usize = 10;
/// Extra draws allowed when an item fails the quality filter.
pub const MAX_RETRIES: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QaError {
    #[error("no templates for {0}")]
    Unsupported(Combo),
    #[error("mix line {line}: {message}")]
    MixSyntax { line: usize, message: String },
    #[error("mcq option count must be at least 2, got {0}")]
    OptionCount(usize),
    #[error("unknown {kind} {value:?}")]
    UnknownName { kind: &'static str, value: String },
}

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident, $kind:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = QaError;

            fn from_str(s: &str) -> Result<Self, QaError> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(QaError::UnknownName { kind: $kind, value: other.to_string() }),
                }
            }
        }
    };
}

named_enum!(
    /// Image scale a question is asked about.
    Level, "level" { Cell => "cell", Slide => "slide" }
);

named_enum!(
    Task, "task" {
        Morphology => "morphology",
        Abnormality => "abnormality",
        Subtyping => "subtyping",
        Knowledge => "knowledge",
        Differential => "differential",
        Diagnosis => "diagnosis",
    }
);

named_enum!(
    QType, "question type" {
        TrueFalse => "true_false",
        Mcq => "mcq",
        FillBlank => "fill_blank",
        Open => "open",
    }
);

named_enum!(
    /// Patient condition of a source slide.
    Diagnosis, "diagnosis" { Anemia => "anemia", Mds => "MDS", Control => "control" }
);

impl Diagnosis {
    /// Answer text used in questions.
    pub fn label(self) -> &'static str {
        match self {
            Diagnosis::Anemia => "anemia",
            Diagnosis::Mds => "myelodysplastic syndrome (MDS)",
            Diagnosis::Control => "control (no hematologic disorder)",
        }
    }
}

/// A `(level, task, question type)` cell of the generation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Combo {
    pub level: Level,
    pub task: Task,
    pub qtype: QType,
}

impl Combo {
    pub fn new(level: Level, task: Task, qtype: QType) -> Self {
        Self { level, task, qtype }
    }

    /// Whether the template bank covers this combination.
    pub fn supported(&self) -> bool {
        use {Level::*, QType::*, Task::*};
        match (self.level, self.task) {
            (Cell, Morphology | Abnormality | Subtyping | Knowledge) => true,
            (Cell, Differential | Diagnosis) => false,
            (Slide, Subtyping) => false,
            (Slide, Morphology | Abnormality | Diagnosis) => true,
            (Slide, Differential) => self.qtype != Open,
            (Slide, Knowledge) => matches!(self.qtype, Mcq | Open),
        }
    }

    /// All supported combinations in a fixed order.
    pub fn all_supported() -> Vec<Combo> {
        let mut out = Vec::new();
        for &level in Level::ALL {
            for &task in Task::ALL {
                for &qtype in QType::ALL {
                    let c = Combo::new(level, task, qtype);
                    if c.supported() {
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}.{}", self.level, self.task, self.qtype)
    }
}

impl FromStr for Combo {
    type Err = QaError;

    fn from_str(s: &str) -> Result<Self, QaError> {
        let parts: Vec<&str> = s.trim().split('.').collect();
        let [level, task, qtype] = parts.as_slice() else {
            return Err(QaError::UnknownName {
                kind: "combination",
                value: s.to_string(),
            });
        };
        Ok(Combo::new(level.parse()?, task.parse()?, qtype.parse()?))
    }
}

/// One synthesized question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub level: Level,
    pub task: Task,
    pub qtype: QType,
    pub image_ref: String,
    pub question: String,
    pub options: Vec<String>,
    pub answer: String,
    pub seed: u64,
}

impl QAItem {
    pub fn combo(&self) -> Combo {
        Combo::new(self.level, self.task, self.qtype)
    }

    /// Checks the structural rules every item must satisfy.
    pub fn validate(&self) -> Result<(), String> {
        match self.qtype {
            QType::Mcq => {
                if self.options.len() < 2 {
                    return Err(format!("mcq needs at least 2 options, has {}", self.options.len()));
                }
                let hits = self.options.iter().filter(|o| **o == self.answer).count();
                if hits != 1 {
                    return Err(format!("mcq answer appears {hits} times among options"));
                }
            }
            _ if !self.options.is_empty() => return Err("options are only allowed on mcq items".into()),
            QType::FillBlank => {
                let words = self.answer.split_whitespace().count();
                if words >= MAX_FILL_BLANK_WORDS {
                    return Err(format!("fill-blank answer has {words} words"));
                }
            }
            QType::TrueFalse => {
                if self.answer != "True" && self.answer != "False" {
                    return Err(format!("true/false answer {:?}", self.answer));
                }
            }
            QType::Open => {}
        }
        match (self.task, self.level) {
            (Task::Differential | Task::Diagnosis, Level::Cell) => Err(format!("{} questions are slide-level", self.task)),
            (Task::Subtyping, Level::Slide) => Err("subtyping questions are cell-level".into()),
            _ if self.answer.trim().is_empty() => Err("empty answer".into()),
            _ => Ok(()),
        }
    }
}

/// Slide-level caption parts that drive slide questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideSummary {
    pub slide_id: String,
    pub diagnosis: Diagnosis,
    pub differential: Differential,
    pub findings: Vec<String>,
}

/// How many items to draw per combination, plus the MCQ option count.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTypeMix {
    counts: BTreeMap<Combo, usize>,
    pub mcq_options: usize,
}

impl Default for TaskTypeMix {
    fn default() -> Self {
        Self {
            counts: BTreeMap::new(),
            mcq_options: DEFAULT_MCQ_OPTIONS,
        }
    }
}

impl TaskTypeMix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a count; fails for combinations without templates.
    pub fn set(&mut self, combo: Combo, count: usize) -> Result<&mut Self, QaError> {
        if !combo.supported() {
            return Err(QaError::Unsupported(combo));
        }
        if count == 0 {
            self.counts.remove(&combo);
        } else {
            self.counts.insert(combo, count);
        }
        Ok(self)
    }

    pub fn with(mut self, combo: Combo, count: usize) -> Result<Self, QaError> {
        self.set(combo, count)?;
        Ok(self)
    }

    pub fn with_mcq_options(mut self, n: usize) -> Result<Self, QaError> {
        if n < 2 {
            return Err(QaError::OptionCount(n));
        }
        self.mcq_options = n;
        Ok(self)
    }

    /// One of each supported combination.
    pub fn one_of_each() -> Self {
        let mut mix = Self::default();
        for c in Combo::all_supported() {
            mix.counts.insert(c, 1);
        }
        mix
    }

    pub fn count(&self, combo: &Combo) -> usize {
        self.counts.get(combo).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (Combo, usize)> + '_ {
        self.counts.iter().map(|(c, n)| (*c, *n))
    }

    /// Parses `level.task.qtype = count` lines; `mcq_options = n` sets the option count.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, QaError> {
        let mut mix = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| QaError::MixSyntax { line: n + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = count`".into()))?;
            let value: usize = value
                .trim()
                .parse()
                .map_err(|_| err(format!("bad count {:?}", value.trim())))?;
            if key.trim() == "mcq_options" {
                if value < 2 {
                    return Err(QaError::OptionCount(value));
                }
                mix.mcq_options = value;
                continue;
            }
            let combo: Combo = key.parse().map_err(|e: QaError| err(e.to_string()))?;
            mix.set(combo, value)?;
        }
        Ok(mix)
    }

    /// Inverse of [`TaskTypeMix::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("mcq_options = {}\n", self.mcq_options);
        for (c, n) in &self.counts {
            out.push_str(&format!("{c} = {n}\n"));
        }
        out
    }
}

/// Generates questions about one cell crop.
///
/// Subtyping questions are not asked about cells labeled `Others`.
pub fn generate_cell_qa(cell: &CellRecord, mix: &TaskTypeMix, seed: u64) -> Result<Vec<QAItem>, QaError> {
    let source = templates::Source::Cell(cell);
    generate(&source, &cell.id, Level::Cell, mix, seed)
}

/// Generates questions about one slide.
pub fn generate_slide_qa(summary: &SlideSummary, mix: &TaskTypeMix, seed: u64) -> Result<Vec<QAItem>, QaError> {
    let source = templates::Source::Slide(summary);
    generate(&source, &summary.slide_id, Level::Slide, mix, seed)
}

fn generate(
    source: &templates::Source<'_>,
    image_ref: &str,
    level: Level,
    mix: &TaskTypeMix,
    seed: u64,
) -> Result<Vec<QAItem>, QaError> {
    if mix.mcq_options < 2 {
        return Err(QaError::OptionCount(mix.mcq_options));
    }
    let mut out: Vec<QAItem> = Vec::new();
    for (combo, count) in mix.entries() {
        if !combo.supported() {
            return Err(QaError::Unsupported(combo));
        }
        if combo.level != level {
            continue;
        }
        for k in 0..count {
            for attempt in 0..=MAX_RETRIES {
                let item_seed = seed::derive_seed(seed, &format!("{image_ref}|{combo}|{k}|{attempt}"));
                let mut rng = seed::rng(item_seed);
                let Some(draft) = templates::draft(source, combo, mix.mcq_options, &mut rng) else {
                    break;
                };
                let options = if combo.qtype == QType::Mcq {
                    shuffle_options(&draft.options, item_seed)
                } else {
                    Vec::new()
                };
                let item = QAItem {
                    id: format!("{image_ref}#{combo}#{k}"),
                    level,
                    task: combo.task,
                    qtype: combo.qtype,
                    image_ref: image_ref.to_string(),
                    question: draft.question,
                    options,
                    answer: draft.answer,
                    seed: item_seed,
                };
                let repeated = out.iter().any(|o| o.question == item.question && o.answer == item.answer);
                if !repeated && item.validate().is_ok() && qa_quality_filter(&item) == Verdict::Accept {
                    out.push(item);
                    break;
                }
            }
        }
    }
    Ok(out)
}
