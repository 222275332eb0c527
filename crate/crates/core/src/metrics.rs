//! Sample-quality metrics: valence-based stability, a graph validity proxy,
//! uniqueness over canonical hashes, and ring-class accuracy.
//!
//! All metrics are graph-based, so they are invariant under atom reindexing
//! and rigid motion.  Fractions over an empty denominator are reported as
//! absent, never as zero.

use std::collections::{BTreeMap, BTreeSet};

use crate::molgraph::{canonical_hash, detect_rings, Molecule};

/// Class label meaning used throughout training and evaluation.
pub const CLASS_ACYCLIC: u32 = 0;
pub const CLASS_CYCLIC: u32 = 1;

/// Summed bond orders equal the element's expected valence exactly.
pub fn atom_is_stable(m: &Molecule, i: usize) -> bool {
    m.valence_sum(i) == m.atoms[i].element.max_valence() as u32
}

/// Fraction of atoms (across all molecules) with exactly correct valence.
pub fn atom_stability(mols: &[Molecule]) -> Option<f64> {
    let total: usize = mols.iter().map(|m| m.atoms.len()).sum();
    if total == 0 {
        return None;
    }
    let stable: usize = mols
        .iter()
        .map(|m| (0..m.atoms.len()).filter(|&i| atom_is_stable(m, i)).count())
        .sum();
    Some(stable as f64 / total as f64)
}

/// Fraction of molecules whose atoms are all stable.
pub fn mol_stability(mols: &[Molecule]) -> Option<f64> {
    if mols.is_empty() {
        return None;
    }
    let good = mols
        .iter()
        .filter(|m| (0..m.atoms.len()).all(|i| atom_is_stable(m, i)))
        .count();
    Some(good as f64 / mols.len() as f64)
}

/// Graph validity proxy: the molecule is reduced to its largest connected
/// component, which must be non-empty with no atom over its maximum
/// valence.  Smaller fragments are ignored entirely.
pub fn is_valid(m: &Molecule) -> bool {
    if m.atoms.is_empty() {
        return false;
    }
    let frag = m.subgraph(&m.largest_component());
    (0..frag.atoms.len()).all(|i| frag.valence_sum(i) <= frag.atoms[i].element.max_valence() as u32)
}

pub fn validity(mols: &[Molecule]) -> Option<f64> {
    if mols.is_empty() {
        return None;
    }
    let good = mols.iter().filter(|m| is_valid(m)).count();
    Some(good as f64 / mols.len() as f64)
}

fn valid_fragment_hashes(mols: &[Molecule]) -> Vec<String> {
    mols.iter()
        .filter(|m| is_valid(m))
        .map(|m| canonical_hash(&m.subgraph(&m.largest_component())))
        .collect()
}

/// Distinct canonical hashes among valid molecules, over the valid count.
/// Hashing happens after the largest-fragment reduction.
pub fn uniqueness(mols: &[Molecule]) -> Option<f64> {
    let hashes = valid_fragment_hashes(mols);
    if hashes.is_empty() {
        return None;
    }
    let n = hashes.len();
    let distinct: BTreeSet<&String> = hashes.iter().collect();
    Some(distinct.len() as f64 / n as f64)
}

/// Fraction of molecules whose ring detection matches the requested class.
pub fn class_accuracy(mols: &[Molecule], cyclic: bool) -> Option<f64> {
    if mols.is_empty() {
        return None;
    }
    let hit = mols.iter().filter(|m| detect_rings(m) == cyclic).count();
    Some(hit as f64 / mols.len() as f64)
}

/// Aggregated evaluation results.
///
/// `val_uniq` is the fraction of all samples that are both valid and
/// distinct (validity times uniqueness), so it never exceeds `valid`.
/// `class_acc` holds one entry per ring class label present in the input.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub n: usize,
    pub atom_stable: Option<f64>,
    pub mol_stable: Option<f64>,
    pub valid: Option<f64>,
    pub val_uniq: Option<f64>,
    pub class_acc: BTreeMap<u32, f64>,
}

pub fn evaluate(mols: &[Molecule]) -> MetricReport {
    let val_uniq = if mols.is_empty() {
        None
    } else {
        let hashes = valid_fragment_hashes(mols);
        let distinct: BTreeSet<&String> = hashes.iter().collect();
        Some(distinct.len() as f64 / mols.len() as f64)
    };
    let mut class_acc = BTreeMap::new();
    for class in [CLASS_ACYCLIC, CLASS_CYCLIC] {
        let of_class: Vec<Molecule> = mols
            .iter()
            .filter(|m| m.class_label == Some(class))
            .cloned()
            .collect();
        if let Some(acc) = class_accuracy(&of_class, class == CLASS_CYCLIC) {
            class_acc.insert(class, acc);
        }
    }
    MetricReport {
        n: mols.len(),
        atom_stable: atom_stability(mols),
        mol_stable: mol_stability(mols),
        valid: validity(mols),
        val_uniq,
        class_acc,
    }
}

impl MetricReport {
    fn fields(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![
            ("atom_stable".to_string(), self.atom_stable),
            ("mol_stable".to_string(), self.mol_stable),
            ("valid".to_string(), self.valid),
            ("val_uniq".to_string(), self.val_uniq),
        ];
        for (&class, &acc) in &self.class_acc {
            out.push((format!("class_acc_{class}"), Some(acc)));
        }
        out
    }

    /// Flat `key value` lines; absent metrics are omitted.
    pub fn key_value_text(&self) -> String {
        let mut s = format!("n {}\n", self.n);
        for (name, value) in self.fields() {
            if let Some(v) = value {
                s.push_str(&format!("{name} {v}\n"));
            }
        }
        s
    }

    /// Two-line CSV (header then values); absent metrics are empty cells.
    pub fn csv(&self) -> String {
        let fields = self.fields();
        let mut header = "n".to_string();
        let mut row = self.n.to_string();
        for (name, value) in fields {
            header.push(',');
            header.push_str(&name);
            row.push(',');
            if let Some(v) = value {
                row.push_str(&format!("{v}"));
            }
        }
        format!("{header}\n{row}\n")
    }
}
