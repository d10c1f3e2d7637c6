use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{crop_square, extract_instances, CellRecord, InstanceMask, Subtype};
use crate::slide::TilePixels;
use crate::synth::{self, CellKind};

/// Labels a segmented instance from its pixels. `None` means "not a white cell".
pub trait CellClassifier: Sync {
    fn classify(&self, pixels: &[[u8; 3]]) -> Option<(Subtype, f64)>;
}

/// Nearest-prototype classifier on mean instance color.
///
/// Confidence is the softmax weight of the winning prototype under a
/// Gaussian kernel of width `sigma` (RGB units).
#[derive(Debug, Clone)]
pub struct ColorClassifier {
    prototypes: Vec<(CellKind, [f64; 3])>,
    sigma: f64,
}

impl ColorClassifier {
    pub fn new(prototypes: Vec<(CellKind, [f64; 3])>, sigma: f64) -> Self {
        Self { prototypes, sigma }
    }
}

impl Default for ColorClassifier {
    /// Prototypes matching the synthetic slide palette.
    fn default() -> Self {
        let kinds = std::iter::once(CellKind::Rbc).chain(Subtype::ALL.into_iter().map(CellKind::Wbc));
        Self::new(kinds.map(|k| (k, synth::reference_color(k))).collect(), 12.0)
    }
}

impl CellClassifier for ColorClassifier {
    fn classify(&self, pixels: &[[u8; 3]]) -> Option<(Subtype, f64)> {
        if pixels.is_empty() || self.prototypes.is_empty() {
            return None;
        }
        let mut mean = [0.0; 3];
        for p in pixels {
            for c in 0..3 {
                mean[c] += f64::from(p[c]);
            }
        }
        mean.iter_mut().for_each(|m| *m /= pixels.len() as f64);

        let logits: Vec<f64> = self
            .prototypes
            .iter()
            .map(|(_, proto)| {
                let d2: f64 = proto.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
                -d2 / (2.0 * self.sigma * self.sigma)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let (best, w) = weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty prototypes");
        match self.prototypes[best].0 {
            CellKind::Rbc => None,
            CellKind::Wbc(s) => Some((s, w / total)),
        }
    }
}

/// Per-instance side information: morphology keywords and optional label overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub tile: String,
    pub instance: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype: Option<Subtype>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub keywords: Vec<String>,
}

/// Annotations keyed by `(tile key, instance id)`.
#[derive(Debug, Clone, Default)]
pub struct Annotations(HashMap<(String, i64), Annotation>);

impl Annotations {
    pub fn insert(&mut self, a: Annotation) {
        self.0.insert((a.tile.clone(), a.instance), a);
    }

    pub fn get(&self, tile_key: &str, instance: i64) -> Option<&Annotation> {
        self.0.get(&(tile_key.to_string(), instance))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<Annotation> for Annotations {
    fn from_iter<I: IntoIterator<Item = Annotation>>(iter: I) -> Self {
        let mut out = Self::default();
        iter.into_iter().for_each(|a| out.insert(a));
        out
    }
}

/// Turns one tile's mask into labeled cell records.
///
/// An annotation's subtype wins over the classifier; instances the
/// classifier rejects (non-white cells) are skipped.
pub fn extract_cells(
    pixels: &TilePixels,
    mask: &InstanceMask,
    classifier: &dyn CellClassifier,
    annotations: &Annotations,
    context_factor: f64,
) -> Vec<CellRecord> {
    let tile_key = mask.tile.key();
    let instances = extract_instances(mask);
    let mut members: HashMap<i64, Vec<[u8; 3]>> = instances.iter().map(|i| (i.id, Vec::new())).collect();
    for (idx, &label) in mask.labels().iter().enumerate() {
        if let Some(v) = members.get_mut(&label) {
            v.push(pixels.data[idx]);
        }
    }

    instances
        .iter()
        .filter_map(|inst| {
            let note = annotations.get(&tile_key, inst.id);
            let (subtype, confidence) = match note.and_then(|n| n.subtype) {
                Some(s) => (s, note.and_then(|n| n.confidence).unwrap_or(1.0)),
                None => classifier.classify(&members[&inst.id])?,
            };
            Some(CellRecord {
                id: format!("{tile_key}__i{}", inst.id),
                tile: mask.tile.clone(),
                crop_box: crop_square(&inst.bbox, inst.centroid, context_factor, mask.size()),
                subtype,
                confidence,
                keywords: note.map(|n| n.keywords.clone()).unwrap_or_default(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_colors_classify_to_themselves() {
        let clf = ColorClassifier::default();
        for s in Subtype::ALL {
            let c = synth::reference_color(CellKind::Wbc(s)).map(|v| v.round() as u8);
            let (got, conf) = clf.classify(&[c; 4]).unwrap();
            assert_eq!(got, s);
            assert!(conf > 0.5);
        }
        let rbc = synth::reference_color(CellKind::Rbc).map(|v| v.round() as u8);
        assert_eq!(clf.classify(&[rbc]), None);
        assert_eq!(clf.classify(&[]), None);
    }
}
