//! Rare-class consolidation and the bundled modification-name table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NO_MODIFICATION: &str = "No modification";
pub const RARE_SITES: &str = "rare sites";
pub const DEFAULT_RARE_THRESHOLD: u64 = 100;

const ABBREVIATIONS: &str = include_str!("../../resources/ptm_abbreviations.tsv");

/// `(abbreviation, full name)` pairs of the 24 modification types.
pub fn ptm_abbreviations() -> Vec<(&'static str, &'static str)> {
    ABBREVIATIONS.lines().filter_map(|l| l.split_once('\t')).collect()
}

/// Class names used by the synthetic generator: no modification, the 24
/// abbreviations, then the rare bucket.
pub fn default_class_names() -> Vec<String> {
    std::iter::once(NO_MODIFICATION.to_string())
        .chain(ptm_abbreviations().into_iter().map(|(a, _)| a.to_string()))
        .chain(std::iter::once(RARE_SITES.to_string()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    /// Original class name → reduced class id.
    pub to_id: BTreeMap<String, usize>,
    /// Reduced class id → name.
    pub names: Vec<String>,
}

impl ClassMap {
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn id(&self, original: &str) -> Option<usize> {
        self.to_id.get(original).copied()
    }

    /// Counts re-expressed over the reduced classes.
    pub fn reduce_counts(&self, counts: &BTreeMap<String, u64>) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for (name, &c) in counts {
            if let Some(id) = self.id(name) {
                *out.entry(self.names[id].clone()).or_insert(0) += c;
            }
        }
        out
    }
}

/// Folds classes with fewer than `threshold` samples into [`RARE_SITES`].
///
/// Class 0 is always [`NO_MODIFICATION`]; kept classes follow by descending
/// count (then name); the rare bucket, when present, is last. An input class
/// already named [`RARE_SITES`] joins the bucket regardless of its count.
pub fn reduce_classes(counts: &BTreeMap<String, u64>, threshold: u64) -> Result<ClassMap> {
    if counts.is_empty() {
        return Err(Error::Dataset("reduce_classes: empty count table".into()));
    }
    let mut kept: Vec<(&String, u64)> = counts
        .iter()
        .filter(|(n, &c)| n.as_str() != NO_MODIFICATION && n.as_str() != RARE_SITES && c >= threshold)
        .map(|(n, &c)| (n, c))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut names = vec![NO_MODIFICATION.to_string()];
    names.extend(kept.iter().map(|(n, _)| (*n).clone()));
    let has_rare = counts
        .iter()
        .any(|(n, &c)| n.as_str() == RARE_SITES || (n.as_str() != NO_MODIFICATION && c < threshold));
    let rare_id = names.len();
    if has_rare {
        names.push(RARE_SITES.to_string());
    }
    let mut to_id = BTreeMap::new();
    to_id.insert(NO_MODIFICATION.to_string(), 0);
    for (i, (n, _)) in kept.iter().enumerate() {
        to_id.insert((*n).clone(), i + 1);
    }
    for n in counts.keys() {
        to_id.entry(n.clone()).or_insert(rare_id);
    }
    Ok(ClassMap { to_id, names })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(entries: &[(&str, u64)]) -> BTreeMap<String, u64> {
        entries.iter().map(|(n, c)| (n.to_string(), *c)).collect()
    }

    #[test]
    fn threshold_rule() {
        let t = table(&[
            ("Phosphorylation", 500_000),
            ("Tiny", 99),
            ("Edge", 100),
            (NO_MODIFICATION, 1_000_000),
        ]);
        let m = reduce_classes(&t, 100).unwrap();
        assert_eq!(m.names, vec![NO_MODIFICATION, "Phosphorylation", "Edge", RARE_SITES]);
        assert_eq!(m.id("Tiny"), Some(3));
        assert_eq!(m.id("Edge"), Some(2));
        assert_eq!(m.id(NO_MODIFICATION), Some(0));
    }

    #[test]
    fn seventy_three_to_twenty_six() {
        let mut t = table(&[(NO_MODIFICATION, 5_000_000)]);
        for i in 0..24 {
            t.insert(format!("common{i:02}"), 100 + 1000 * i as u64);
        }
        for i in 0..48 {
            t.insert(format!("rare{i:02}"), i as u64 + 1);
        }
        assert_eq!(t.len(), 73);
        let m = reduce_classes(&t, 100).unwrap();
        assert_eq!(m.num_classes(), 26);
        assert_eq!(m.to_id.len(), 73);
        let again = reduce_classes(&m.reduce_counts(&t), 100).unwrap();
        assert_eq!(again.names, m.names);
    }

    #[test]
    fn name_table() {
        let t = ptm_abbreviations();
        assert_eq!(t.len(), 24);
        assert!(t.contains(&("Phos", "Phosphorylation")));
        assert_eq!(default_class_names().len(), 26);
    }

    #[test]
    fn empty_table() {
        assert!(reduce_classes(&BTreeMap::new(), 100).is_err());
    }
}
