//! Cell-type alphabet and normalization of external dataset labels.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::CellError;

/// Normalized cell type. The first five are the canonical WBC subtypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subtype {
    Basophil,
    Eosinophil,
    Lymphocyte,
    Monocyte,
    Neutrophil,
    Others,
}

impl Subtype {
    pub const CANONICAL: [Subtype; 5] = [
        Subtype::Basophil,
        Subtype::Eosinophil,
        Subtype::Lymphocyte,
        Subtype::Monocyte,
        Subtype::Neutrophil,
    ];

    pub const ALL: [Subtype; 6] = [
        Subtype::Basophil,
        Subtype::Eosinophil,
        Subtype::Lymphocyte,
        Subtype::Monocyte,
        Subtype::Neutrophil,
        Subtype::Others,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subtype::Basophil => "Basophil",
            Subtype::Eosinophil => "Eosinophil",
            Subtype::Lymphocyte => "Lymphocyte",
            Subtype::Monocyte => "Monocyte",
            Subtype::Neutrophil => "Neutrophil",
            Subtype::Others => "Others",
        }
    }

    pub fn is_canonical(self) -> bool {
        self != Subtype::Others
    }

    /// Parses a normalized type name, ignoring case.
    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name().eq_ignore_ascii_case(name.trim()))
    }
}

impl std::fmt::Display for Subtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// Dataset name whose labels are already normalized type names.
pub const NATIVE_DATASET: &str = "native";

const BUNDLED_TABLE: &str = include_str!("../../data/cell_type_map.txt");

/// `(dataset, raw label) → subtype` lookup parsed from a sectioned two-column table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelMap {
    entries: BTreeMap<(String, String), Subtype>,
    order: Vec<(String, String)>,
}

impl LabelMap {
    /// Parses `[dataset]` section headers followed by `raw<TAB>normalized` rows.
    /// `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, CellError> {
        let mut map = Self::default();
        let mut section: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            if let Some(name) = line.trim().strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let bad = |msg: &str| CellError::LabelTable {
                line: n + 1,
                message: msg.to_string(),
            };
            let dataset = section.clone().ok_or_else(|| bad("row before any [dataset] header"))?;
            let (raw, norm) = line.split_once('\t').ok_or_else(|| bad("expected a tab-separated pair"))?;
            let subtype = Subtype::parse(norm).ok_or_else(|| bad("unknown normalized type"))?;
            let key = (dataset, raw.trim().to_string());
            if map.entries.insert(key.clone(), subtype).is_some() {
                return Err(bad("duplicate row"));
            }
            map.order.push(key);
        }
        Ok(map)
    }

    /// The table shipped with the crate.
    pub fn bundled() -> &'static LabelMap {
        static MAP: OnceLock<LabelMap> = OnceLock::new();
        MAP.get_or_init(|| LabelMap::parse(BUNDLED_TABLE).expect("bundled label table parses"))
    }

    pub fn get(&self, dataset: &str, raw: &str) -> Option<Subtype> {
        self.entries.get(&(dataset.to_string(), raw.trim().to_string())).copied()
    }

    /// Rows in file order as `(dataset, raw label, subtype)`.
    pub fn rows(&self) -> impl Iterator<Item = (&str, &str, Subtype)> + '_ {
        self.order
            .iter()
            .map(|k| (k.0.as_str(), k.1.as_str(), self.entries[k]))
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn normalize(&self, dataset: &str, raw: &str) -> Result<Subtype, CellError> {
        if dataset == NATIVE_DATASET {
            if let Some(s) = Subtype::parse(raw) {
                return Ok(s);
            }
        }
        self.get(dataset, raw).ok_or_else(|| CellError::MappingMiss {
            dataset: dataset.to_string(),
            label: raw.to_string(),
        })
    }
}

/// Normalizes a source-dataset label with the bundled table. Unmapped pairs are errors.
pub fn normalize_label(dataset: &str, raw: &str) -> Result<Subtype, CellError> {
    LabelMap::bundled().normalize(dataset, raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_rows() {
        assert_eq!(normalize_label("AML-LMU", "BAS").unwrap(), Subtype::Basophil);
        assert_eq!(normalize_label("AML-LMU", "MYB").unwrap(), Subtype::Others);
        assert_eq!(normalize_label("AML-LMU", "EBO").unwrap(), Subtype::Others);
        assert_eq!(
            normalize_label("APL-kaggle", "Lymphocyte (variant)").unwrap(),
            Subtype::Lymphocyte
        );
        assert_eq!(normalize_label("native", "neutrophil").unwrap(), Subtype::Neutrophil);
    }

    #[test]
    fn misses_carry_the_pair() {
        match normalize_label("AML-LMU", "XYZ") {
            Err(CellError::MappingMiss { dataset, label }) => {
                assert_eq!(dataset, "AML-LMU");
                assert_eq!(label, "XYZ");
            }
            other => panic!("unexpected {other:?}"),
        }
        // labels are not guessed across datasets
        assert!(normalize_label("AML-LMU", "Lymphocyte (variant)").is_err());
    }

    #[test]
    fn table_shape() {
        let map = LabelMap::bundled();
        assert_eq!(map.rows().filter(|r| r.0 == "AML-LMU").count(), 15);
        assert_eq!(map.rows().filter(|r| r.0 == "APL-kaggle").count(), 21);
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(LabelMap::parse("BAS\tBasophil\n").is_err());
        assert!(LabelMap::parse("[x]\nBAS Basophil\n").is_err());
        assert!(LabelMap::parse("[x]\nBAS\tGranulocyte\n").is_err());
        assert!(LabelMap::parse("[x]\nBAS\tBasophil\nBAS\tOthers\n").is_err());
    }
}
