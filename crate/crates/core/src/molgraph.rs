//! Molecular data model: elements, atoms, bonds, file ingestion, hydrogen
//! handling, geometric bond inference, and graph utilities.
//!
//! Element properties and reference bond lengths live in
//! `data/elements.txt`, embedded at compile time and parsed once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MolError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported element '{symbol}' at line {line}")]
    UnsupportedElement { symbol: String, line: usize },
    #[error("invalid bond {i}-{j} (order {order}): {msg}")]
    InvalidBond {
        i: usize,
        j: usize,
        order: u8,
        msg: String,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub enum Element {
    H,
    C,
    N,
    O,
    F,
}

impl Element {
    pub const ALL: [Element; 5] = [Element::H, Element::C, Element::N, Element::O, Element::F];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        ["H", "C", "N", "O", "F"][self.index()]
    }

    pub fn from_symbol(s: &str) -> Option<Element> {
        Element::ALL.iter().copied().find(|e| e.symbol() == s)
    }

    pub fn covalent_radius(self) -> f64 {
        tables().radius[self.index()]
    }

    pub fn max_valence(self) -> u8 {
        tables().valence[self.index()]
    }
}

struct Tables {
    radius: [f64; 5],
    valence: [u8; 5],
    // bond_len[order-1][a][b], symmetric, NAN where the pair has no entry.
    bond_len: [[[f64; 5]; 5]; 3],
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let raw = include_str!("../data/elements.txt");
        let mut t = Tables {
            radius: [0.0; 5],
            valence: [0; 5],
            bond_len: [[[f64::NAN; 5]; 5]; 3],
        };
        for line in raw.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            match f[0] {
                "element" => {
                    let e = Element::from_symbol(f[1]).expect("element table symbol");
                    t.radius[e.index()] = f[2].parse().expect("element radius");
                    t.valence[e.index()] = f[3].parse().expect("element valence");
                }
                "bond" => {
                    let order: usize = f[1].parse().expect("bond order");
                    let a = Element::from_symbol(f[2]).expect("bond symbol").index();
                    let b = Element::from_symbol(f[3]).expect("bond symbol").index();
                    let len: f64 = f[4].parse().expect("bond length");
                    t.bond_len[order - 1][a][b] = len;
                    t.bond_len[order - 1][b][a] = len;
                }
                other => panic!("unknown table record '{other}'"),
            }
        }
        t
    })
}

/// Reference length for a bond of `order` between two elements, if tabulated.
pub fn reference_bond_length(order: u8, a: Element, b: Element) -> Option<f64> {
    let v = tables().bond_len[order as usize - 1][a.index()][b.index()];
    if v.is_nan() {
        None
    } else {
        Some(v)
    }
}

/// Distance margins added to reference lengths when accepting orders 1, 2, 3.
pub const BOND_MARGINS: [f64; 3] = [0.10, 0.05, 0.03];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub position: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Molecule {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub class_label: Option<u32>,
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

impl Molecule {
    pub fn new(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Molecule {
        Molecule {
            atoms,
            bonds,
            class_label: None,
        }
    }

    /// Enforces the structural invariants: valid endpoints, no self bonds, no
    /// duplicate pairs, orders in 1..=3.
    pub fn check(&self) -> Result<(), MolError> {
        let mut seen = std::collections::HashSet::new();
        for b in &self.bonds {
            let bad = |msg: &str| MolError::InvalidBond {
                i: b.i,
                j: b.j,
                order: b.order,
                msg: msg.to_string(),
            };
            if b.i >= self.atoms.len() || b.j >= self.atoms.len() {
                return Err(bad("endpoint out of range"));
            }
            if b.i == b.j {
                return Err(bad("self bond"));
            }
            if !(1..=3).contains(&b.order) {
                return Err(bad("order outside 1..=3"));
            }
            if !seen.insert((b.i.min(b.j), b.i.max(b.j))) {
                return Err(bad("duplicate bond pair"));
            }
        }
        Ok(())
    }

    pub fn heavy_atom_count(&self) -> usize {
        self.atoms
            .iter()
            .filter(|a| a.element != Element::H)
            .count()
    }

    /// Sum of bond orders incident to atom `i`.
    pub fn valence_sum(&self, i: usize) -> u32 {
        self.bonds
            .iter()
            .filter(|b| b.i == i || b.j == i)
            .map(|b| b.order as u32)
            .sum()
    }

    /// Neighbor list as (other atom, order) pairs.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, u8)> {
        let mut out = Vec::new();
        for b in &self.bonds {
            if b.i == i {
                out.push((b.j, b.order));
            } else if b.j == i {
                out.push((b.i, b.order));
            }
        }
        out
    }

    /// Atom indices of the largest connected component (by atom count, ties
    /// broken toward the component with the smallest index).
    pub fn largest_component(&self) -> Vec<usize> {
        let n = self.atoms.len();
        let mut comp = vec![usize::MAX; n];
        let mut count = 0usize;
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            comp[start] = count;
            while let Some(v) = stack.pop() {
                for (w, _) in self.neighbors(v) {
                    if comp[w] == usize::MAX {
                        comp[w] = count;
                        stack.push(w);
                    }
                }
            }
            count += 1;
        }
        let mut sizes = vec![0usize; count];
        for &c in &comp {
            sizes[c] += 1;
        }
        let best = (0..count)
            .max_by_key(|&c| (sizes[c], std::cmp::Reverse(c)))
            .unwrap_or(0);
        (0..n).filter(|&i| comp[i] == best).collect()
    }

    /// New molecule restricted to `keep` (indices remapped densely, in the
    /// order given).
    pub fn subgraph(&self, keep: &[usize]) -> Molecule {
        let mut remap = vec![usize::MAX; self.atoms.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let atoms = keep.iter().map(|&i| self.atoms[i]).collect();
        let bonds = self
            .bonds
            .iter()
            .filter(|b| remap[b.i] != usize::MAX && remap[b.j] != usize::MAX)
            .map(|b| Bond {
                i: remap[b.i],
                j: remap[b.j],
                order: b.order,
            })
            .collect();
        Molecule {
            atoms,
            bonds,
            class_label: self.class_label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructureFormat {
    Xyz,
    Sdf,
}

/// Parses an XYZ or SDF file into molecules.  XYZ accepts the standard
/// count-header multi-frame layout or a headerless single molecule; SDF is
/// V2000 with `$$$$` record separators.
pub fn parse_structure(path: &Path, format: StructureFormat) -> Result<Vec<Molecule>, MolError> {
    let text = std::fs::read_to_string(path)?;
    match format {
        StructureFormat::Xyz => parse_xyz_str(&text),
        StructureFormat::Sdf => parse_sdf_str(&text),
    }
}

fn parse_atom_line(line: &str, lineno: usize) -> Result<Atom, MolError> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() < 4 {
        return Err(MolError::Parse {
            line: lineno,
            msg: format!("expected 'element x y z', got '{line}'"),
        });
    }
    let element = Element::from_symbol(f[0]).ok_or_else(|| MolError::UnsupportedElement {
        symbol: f[0].to_string(),
        line: lineno,
    })?;
    let mut position = [0.0; 3];
    for (k, slot) in position.iter_mut().enumerate() {
        *slot = f[k + 1].parse().map_err(|_| MolError::Parse {
            line: lineno,
            msg: format!("bad coordinate '{}'", f[k + 1]),
        })?;
    }
    Ok(Atom { element, position })
}

pub fn parse_xyz_str(text: &str) -> Result<Vec<Molecule>, MolError> {
    let lines: Vec<&str> = text.lines().collect();
    // Headerless fallback: first nonblank line is already an atom record.
    let first = lines.iter().position(|l| !l.trim().is_empty());
    let Some(first) = first else {
        return Ok(vec![]);
    };
    if lines[first].trim().parse::<usize>().is_err() {
        let mut atoms = Vec::new();
        for (idx, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            atoms.push(parse_atom_line(line, idx + 1)?);
        }
        return Ok(vec![Molecule::new(atoms, vec![])]);
    }
    let mut mols = Vec::new();
    let mut i = first;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count: usize = lines[i].trim().parse().map_err(|_| MolError::Parse {
            line: i + 1,
            msg: format!("expected atom count, got '{}'", lines[i]),
        })?;
        i += 2; // skip comment line
        let mut atoms = Vec::with_capacity(count);
        for k in 0..count {
            let lineno = i + k;
            if lineno >= lines.len() {
                return Err(MolError::Parse {
                    line: lines.len(),
                    msg: format!("file ends mid-molecule ({count} atoms declared)"),
                });
            }
            atoms.push(parse_atom_line(lines[lineno], lineno + 1)?);
        }
        i += count;
        mols.push(Molecule::new(atoms, vec![]));
    }
    Ok(mols)
}

fn fixed_field(line: &str, range: std::ops::Range<usize>) -> &str {
    let chars: Vec<(usize, char)> = line.char_indices().collect();
    if range.start >= chars.len() {
        return "";
    }
    let start = chars[range.start].0;
    let end = chars.get(range.end).map_or(line.len(), |c| c.0);
    &line[start..end]
}

pub fn parse_sdf_str(text: &str) -> Result<Vec<Molecule>, MolError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut mols = Vec::new();
    let mut i = 0usize;
    while i < lines.len() {
        // Skip blank padding between records.
        if lines[i].trim().is_empty() && lines[i..].iter().all(|l| l.trim().is_empty()) {
            break;
        }
        if i + 3 >= lines.len() {
            return Err(MolError::Parse {
                line: i + 1,
                msg: "truncated SDF header".to_string(),
            });
        }
        let counts = lines[i + 3];
        let natoms: usize =
            fixed_field(counts, 0..3)
                .trim()
                .parse()
                .map_err(|_| MolError::Parse {
                    line: i + 4,
                    msg: format!("bad atom count in '{counts}'"),
                })?;
        let nbonds: usize =
            fixed_field(counts, 3..6)
                .trim()
                .parse()
                .map_err(|_| MolError::Parse {
                    line: i + 4,
                    msg: format!("bad bond count in '{counts}'"),
                })?;
        let mut atoms = Vec::with_capacity(natoms);
        for k in 0..natoms {
            let lineno = i + 4 + k;
            let line = lines.get(lineno).ok_or(MolError::Parse {
                line: lines.len(),
                msg: "truncated atom block".to_string(),
            })?;
            let mut position = [0.0; 3];
            for (c, slot) in position.iter_mut().enumerate() {
                *slot = fixed_field(line, c * 10..(c + 1) * 10)
                    .trim()
                    .parse()
                    .map_err(|_| MolError::Parse {
                        line: lineno + 1,
                        msg: format!("bad coordinate in '{line}'"),
                    })?;
            }
            let symbol = fixed_field(line, 31..34).trim();
            let element =
                Element::from_symbol(symbol).ok_or_else(|| MolError::UnsupportedElement {
                    symbol: symbol.to_string(),
                    line: lineno + 1,
                })?;
            atoms.push(Atom { element, position });
        }
        let mut bonds = Vec::with_capacity(nbonds);
        for k in 0..nbonds {
            let lineno = i + 4 + natoms + k;
            let line = lines.get(lineno).ok_or(MolError::Parse {
                line: lines.len(),
                msg: "truncated bond block".to_string(),
            })?;
            let parse3 = |r: std::ops::Range<usize>| -> Result<usize, MolError> {
                fixed_field(line, r)
                    .trim()
                    .parse()
                    .map_err(|_| MolError::Parse {
                        line: lineno + 1,
                        msg: format!("bad bond field in '{line}'"),
                    })
            };
            let a = parse3(0..3)?;
            let b = parse3(3..6)?;
            let order = parse3(6..9)? as u8;
            if a == 0 || b == 0 || a > natoms || b > natoms {
                return Err(MolError::Parse {
                    line: lineno + 1,
                    msg: format!("bond endpoint out of range in '{line}'"),
                });
            }
            bonds.push(Bond {
                i: a - 1,
                j: b - 1,
                order,
            });
        }
        let mol = Molecule::new(atoms, bonds);
        mol.check()?;
        mols.push(mol);
        // Advance past M END / data items to the record separator.
        let mut j = i + 4 + natoms + nbonds;
        while j < lines.len() && lines[j].trim() != "$$$$" {
            j += 1;
        }
        i = j + 1;
    }
    Ok(mols)
}

/// One molecule as an SDF V2000 record (including the `$$$$` terminator).
pub fn sdf_record(m: &Molecule, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "  moldiff");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>3}{:>3}  0  0  0  0  0  0  0  0999 V2000",
        m.atoms.len(),
        m.bonds.len()
    );
    for a in &m.atoms {
        let _ = writeln!(
            s,
            "{:>10.4}{:>10.4}{:>10.4} {:<3} 0  0  0  0  0  0  0  0  0  0  0  0",
            a.position[0],
            a.position[1],
            a.position[2],
            a.element.symbol()
        );
    }
    for b in &m.bonds {
        let _ = writeln!(s, "{:>3}{:>3}{:>3}  0  0  0  0", b.i + 1, b.j + 1, b.order);
    }
    let _ = writeln!(s, "M  END");
    let _ = writeln!(s, "$$$$");
    s
}

pub fn write_sdf(path: &Path, mols: &[Molecule]) -> Result<(), MolError> {
    let mut out = String::new();
    for (idx, m) in mols.iter().enumerate() {
        out.push_str(&sdf_record(m, &format!("mol{idx}")));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Drops all hydrogens and their bonds; heavy-atom indices are remapped
/// densely in their original order.
pub fn strip_hydrogens(m: &Molecule) -> Molecule {
    let keep: Vec<usize> = (0..m.atoms.len())
        .filter(|&i| m.atoms[i].element != Element::H)
        .collect();
    m.subgraph(&keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BondMode {
    /// Assign bonds from interatomic distances and the reference tables.
    Geometry,
    /// Keep the rounded bond records already present (from tensor decoding).
    Channel,
}

/// Geometry mode compares each pair's distance against tabulated reference
/// lengths plus per-order margins, taking the highest qualifying order.
/// Channel mode passes existing records through (orders clamped to 1..=3,
/// zero-order records dropped).
pub fn infer_bonds(m: &Molecule, mode: BondMode) -> Molecule {
    let mut out = m.clone();
    match mode {
        BondMode::Channel => {
            out.bonds.retain(|b| b.order >= 1 && b.i != b.j);
            for b in &mut out.bonds {
                b.order = b.order.min(3);
            }
            let mut seen = std::collections::HashSet::new();
            out.bonds
                .retain(|b| seen.insert((b.i.min(b.j), b.i.max(b.j))));
        }
        BondMode::Geometry => {
            out.bonds.clear();
            for i in 0..m.atoms.len() {
                for j in i + 1..m.atoms.len() {
                    let d = distance(&m.atoms[i].position, &m.atoms[j].position);
                    let (ei, ej) = (m.atoms[i].element, m.atoms[j].element);
                    for order in (1..=3u8).rev() {
                        let Some(reference) = reference_bond_length(order, ei, ej) else {
                            continue;
                        };
                        if d <= reference + BOND_MARGINS[order as usize - 1] {
                            out.bonds.push(Bond { i, j, order });
                            break;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Evenly spread seed directions used when an atom has no existing neighbors.
const SEED_DIRS: [[f64; 3]; 4] = [
    [
        0.577_350_269_189_625_8,
        0.577_350_269_189_625_8,
        0.577_350_269_189_625_8,
    ],
    [
        0.577_350_269_189_625_8,
        -0.577_350_269_189_625_8,
        -0.577_350_269_189_625_8,
    ],
    [
        -0.577_350_269_189_625_8,
        0.577_350_269_189_625_8,
        -0.577_350_269_189_625_8,
    ],
    [
        -0.577_350_269_189_625_8,
        -0.577_350_269_189_625_8,
        0.577_350_269_189_625_8,
    ],
];

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        [1.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Directions for `count` new substituents around an atom whose existing
/// neighbors sit along `fixed`.  Deterministic repulsion relaxation on the
/// unit sphere; `fixed` directions do not move.
fn placement_directions(fixed: &[[f64; 3]], count: usize) -> Vec<[f64; 3]> {
    if count == 0 {
        return vec![];
    }
    // Seed greedily from a fixed candidate set, maximizing the minimum angle
    // to everything chosen so far.
    let mut candidates: Vec<[f64; 3]> = SEED_DIRS.to_vec();
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut v = [0.0; 3];
            v[axis] = sign;
            candidates.push(v);
        }
    }
    let mut chosen: Vec<[f64; 3]> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut best = candidates[0];
        let mut best_score = f64::NEG_INFINITY;
        for &c in &candidates {
            let score = fixed
                .iter()
                .chain(chosen.iter())
                .map(|o| {
                    let dot = c[0] * o[0] + c[1] * o[1] + c[2] * o[2];
                    -dot.clamp(-1.0, 1.0) // larger when further apart
                })
                .fold(f64::INFINITY, f64::min);
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        chosen.push(best);
    }
    // Relax: each movable direction is pushed away from all others.
    for _ in 0..300 {
        let snapshot = chosen.clone();
        for (idx, dir) in chosen.iter_mut().enumerate() {
            let mut force = [0.0; 3];
            for (odx, other) in fixed.iter().chain(snapshot.iter()).enumerate() {
                if odx == fixed.len() + idx {
                    continue;
                }
                let diff = [dir[0] - other[0], dir[1] - other[1], dir[2] - other[2]];
                let d2 = diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
                let w = 1.0 / (d2 * d2.sqrt()).max(1e-6);
                force[0] += diff[0] * w;
                force[1] += diff[1] * w;
                force[2] += diff[2] * w;
            }
            *dir = normalize([
                dir[0] + 0.05 * force[0],
                dir[1] + 0.05 * force[1],
                dir[2] + 0.05 * force[2],
            ]);
        }
    }
    chosen
}

/// Adds hydrogens to every under-valent heavy atom: deficit = max valence
/// minus current bond-order sum.  Over-valent atoms are left alone.  New
/// hydrogens sit at the tabulated X-H bond length along directions spread
/// away from existing neighbors; placement is deterministic.
pub fn add_hydrogens(m: &Molecule) -> Molecule {
    let mut out = m.clone();
    for i in 0..m.atoms.len() {
        let atom = m.atoms[i];
        if atom.element == Element::H {
            continue;
        }
        let have = m.valence_sum(i);
        let deficit = (atom.element.max_valence() as i64) - have as i64;
        if deficit <= 0 {
            continue;
        }
        let fixed: Vec<[f64; 3]> = m
            .neighbors(i)
            .iter()
            .map(|&(j, _)| {
                normalize([
                    m.atoms[j].position[0] - atom.position[0],
                    m.atoms[j].position[1] - atom.position[1],
                    m.atoms[j].position[2] - atom.position[2],
                ])
            })
            .collect();
        let length = reference_bond_length(1, atom.element, Element::H)
            .expect("every heavy element has a tabulated X-H length");
        for dir in placement_directions(&fixed, deficit as usize) {
            let h = Atom {
                element: Element::H,
                position: [
                    atom.position[0] + length * dir[0],
                    atom.position[1] + length * dir[1],
                    atom.position[2] + length * dir[2],
                ],
            };
            let idx = out.atoms.len();
            out.atoms.push(h);
            out.bonds.push(Bond {
                i,
                j: idx,
                order: 1,
            });
        }
    }
    out
}

/// True iff the bond graph contains a cycle: edges - vertices + components > 0.
pub fn detect_rings(m: &Molecule) -> bool {
    let n = m.atoms.len();
    if n == 0 {
        return false;
    }
    let mut seen = std::collections::HashSet::new();
    for b in &m.bonds {
        seen.insert((b.i.min(b.j), b.i.max(b.j)));
    }
    let edges = seen.len();
    let mut visited = vec![false; n];
    let mut components = 0usize;
    for start in 0..n {
        if visited[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        visited[start] = true;
        while let Some(v) = stack.pop() {
            for (w, _) in m.neighbors(v) {
                if !visited[w] {
                    visited[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    edges + components > n
}

/// Canonical string for the element-labeled, bond-order-labeled graph.
/// Identical for isomorphic molecules, invariant to atom reordering.
/// Iterative neighborhood refinement with individualization at ties.
pub fn canonical_hash(m: &Molecule) -> String {
    let n = m.atoms.len();
    if n == 0 {
        return "empty".to_string();
    }
    let adj: Vec<Vec<(usize, u8)>> = (0..n).map(|i| m.neighbors(i)).collect();
    let init: Vec<usize> = m.atoms.iter().map(|a| a.element.index()).collect();
    let mut best: Option<String> = None;
    canon_search(&adj, &init, m, &mut best);
    best.unwrap()
}

fn refine(adj: &[Vec<(usize, u8)>], colors: &[usize]) -> Vec<usize> {
    let n = colors.len();
    let mut colors = colors.to_vec();
    loop {
        let mut sigs: Vec<(usize, Vec<(u8, usize)>)> = Vec::with_capacity(n);
        for i in 0..n {
            let mut nb: Vec<(u8, usize)> = adj[i].iter().map(|&(j, o)| (o, colors[j])).collect();
            nb.sort_unstable();
            sigs.push((colors[i], nb));
        }
        let mut distinct: Vec<&(usize, Vec<(u8, usize)>)> = sigs.iter().collect();
        distinct.sort_unstable();
        distinct.dedup();
        let next: Vec<usize> = sigs
            .iter()
            .map(|s| distinct.binary_search(&s).unwrap())
            .collect();
        if next == colors {
            return next;
        }
        colors = next;
    }
}

fn canon_search(
    adj: &[Vec<(usize, u8)>],
    colors: &[usize],
    m: &Molecule,
    best: &mut Option<String>,
) {
    let colors = refine(adj, colors);
    let n = colors.len();
    // Group members by color, find the smallest non-singleton class.
    let mut by_color: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in colors.iter().enumerate() {
        by_color.entry(c).or_default().push(i);
    }
    if let Some((_, members)) = by_color.iter().find(|(_, v)| v.len() > 1) {
        for &pick in members {
            let mut next = colors.clone();
            next[pick] = n; // fresh color, refine() renormalizes
            canon_search(adj, &next, m, best);
        }
        return;
    }
    // Discrete coloring: order atoms by color and serialize.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by_key(|&i| colors[i]);
    let mut pos = vec![0usize; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let mut s = String::new();
    for &i in &order {
        s.push_str(m.atoms[i].element.symbol());
    }
    let mut edges: Vec<(usize, usize, u8)> = m
        .bonds
        .iter()
        .map(|b| {
            let (a, c) = (pos[b.i].min(pos[b.j]), pos[b.i].max(pos[b.j]));
            (a, c, b.order)
        })
        .collect();
    edges.sort_unstable();
    for (a, c, o) in edges {
        let _ = write!(s, ";{a}-{c}:{o}");
    }
    match best {
        Some(b) if *b <= s => {}
        _ => *best = Some(s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn atom(e: Element, p: [f64; 3]) -> Atom {
        Atom {
            element: e,
            position: p,
        }
    }

    fn methane() -> Molecule {
        let c = atom(Element::C, [0.0, 0.0, 0.0]);
        let l = 1.09 / 3f64.sqrt();
        let hs = [[l, l, l], [l, -l, -l], [-l, l, -l], [-l, -l, l]];
        let mut atoms = vec![c];
        let mut bonds = vec![];
        for (k, h) in hs.iter().enumerate() {
            atoms.push(atom(Element::H, *h));
            bonds.push(Bond {
                i: 0,
                j: k + 1,
                order: 1,
            });
        }
        Molecule::new(atoms, bonds)
    }

    #[test]
    fn element_table_matches_expected_valences() {
        assert_eq!(Element::H.max_valence(), 1);
        assert_eq!(Element::C.max_valence(), 4);
        assert_eq!(Element::N.max_valence(), 3);
        assert_eq!(Element::O.max_valence(), 2);
        assert_eq!(Element::F.max_valence(), 1);
        for e in Element::ALL {
            assert!(e.covalent_radius() > 0.0);
        }
    }

    #[test]
    fn strip_hydrogens_removes_all_h() {
        let m = methane();
        let s = strip_hydrogens(&m);
        assert_eq!(s.atoms.len(), 1);
        assert_eq!(s.bonds.len(), 0);
        assert_eq!(s.atoms[0].element, Element::C);

        // Ethanol heavy skeleton from the hydrogenated graph.
        let mut ethanol = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::C, [1.54, 0.0, 0.0]),
                atom(Element::O, [2.2, 1.2, 0.0]),
            ],
            vec![
                Bond {
                    i: 0,
                    j: 1,
                    order: 1,
                },
                Bond {
                    i: 1,
                    j: 2,
                    order: 1,
                },
            ],
        );
        ethanol = add_hydrogens(&ethanol);
        assert_eq!(ethanol.atoms.len(), 9); // C2H6O
        let s = strip_hydrogens(&ethanol);
        assert_eq!(s.atoms.len(), 3);
        assert_eq!(s.bonds.len(), 2);

        // H2 strips to nothing.
        let h2 = Molecule::new(
            vec![
                atom(Element::H, [0.0, 0.0, 0.0]),
                atom(Element::H, [0.74, 0.0, 0.0]),
            ],
            vec![Bond {
                i: 0,
                j: 1,
                order: 1,
            }],
        );
        assert_eq!(strip_hydrogens(&h2).atoms.len(), 0);
    }

    #[test]
    fn geometry_bond_inference_matches_reference_lengths() {
        let cc = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::C, [1.54, 0.0, 0.0]),
            ],
            vec![],
        );
        let b = infer_bonds(&cc, BondMode::Geometry);
        assert_eq!(
            b.bonds,
            vec![Bond {
                i: 0,
                j: 1,
                order: 1
            }]
        );

        let far = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::C, [5.0, 0.0, 0.0]),
            ],
            vec![],
        );
        assert!(infer_bonds(&far, BondMode::Geometry).bonds.is_empty());

        let co = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::O, [1.21, 0.0, 0.0]),
            ],
            vec![],
        );
        let b = infer_bonds(&co, BondMode::Geometry);
        assert_eq!(
            b.bonds,
            vec![Bond {
                i: 0,
                j: 1,
                order: 2
            }]
        );

        let triple = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::C, [1.20, 0.0, 0.0]),
            ],
            vec![],
        );
        let b = infer_bonds(&triple, BondMode::Geometry);
        assert_eq!(
            b.bonds,
            vec![Bond {
                i: 0,
                j: 1,
                order: 3
            }]
        );
    }

    #[test]
    fn geometry_inference_is_rigid_motion_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::C, [1.50, 0.1, 0.0]),
                atom(Element::O, [2.6, 0.9, 0.3]),
                atom(Element::N, [-1.4, 0.2, -0.2]),
            ],
            vec![],
        );
        let want = infer_bonds(&m, BondMode::Geometry).bonds;
        for _ in 0..20 {
            let r = crate::so3::random_rotation(&mut rng);
            let t = [
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ];
            let mut moved = m.clone();
            for a in &mut moved.atoms {
                let p = a.position;
                for row in 0..3 {
                    a.position[row] =
                        r[[row, 0]] * p[0] + r[[row, 1]] * p[1] + r[[row, 2]] * p[2] + t[row];
                }
            }
            assert_eq!(infer_bonds(&moved, BondMode::Geometry).bonds, want);
        }
    }

    #[test]
    fn channel_mode_passes_rounded_orders_through() {
        let m = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::C, [5.0, 0.0, 0.0]),
            ],
            vec![Bond {
                i: 0,
                j: 1,
                order: 2,
            }],
        );
        // Distance says "no bond" but channel mode trusts the record.
        let b = infer_bonds(&m, BondMode::Channel);
        assert_eq!(
            b.bonds,
            vec![Bond {
                i: 0,
                j: 1,
                order: 2
            }]
        );
    }

    #[test]
    fn hydrogen_addition_fills_valence_deficits() {
        let lone_c = Molecule::new(vec![atom(Element::C, [0.0, 0.0, 0.0])], vec![]);
        let ch4 = add_hydrogens(&lone_c);
        assert_eq!(ch4.atoms.len(), 5);
        assert_eq!(ch4.bonds.len(), 4);
        assert!(ch4.atoms[1..].iter().all(|a| a.element == Element::H));
        // Bond lengths are the tabulated C-H distance.
        for b in &ch4.bonds {
            let d = distance(&ch4.atoms[b.i].position, &ch4.atoms[b.j].position);
            assert!((d - 1.09).abs() < 1e-9);
        }
        // Angular spread close to tetrahedral: every pairwise angle > 100 deg.
        for i in 1..5 {
            for j in i + 1..5 {
                let u = ch4.atoms[i].position;
                let v = ch4.atoms[j].position;
                let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                let cos = dot / (1.09 * 1.09);
                assert!(cos < -0.17, "H-C-H too narrow: cos = {cos}");
            }
        }

        let mut o_single = Molecule::new(
            vec![
                atom(Element::O, [0.0, 0.0, 0.0]),
                atom(Element::C, [1.43, 0.0, 0.0]),
            ],
            vec![Bond {
                i: 0,
                j: 1,
                order: 1,
            }],
        );
        o_single = add_hydrogens(&o_single);
        let o_h: Vec<_> = o_single
            .bonds
            .iter()
            .filter(|b| {
                (b.i == 0 && o_single.atoms[b.j].element == Element::H)
                    || (b.j == 0 && o_single.atoms[b.i].element == Element::H)
            })
            .collect();
        assert_eq!(o_h.len(), 1);

        // Saturated N gains nothing; over-valent C gains nothing.
        let n_sat = Molecule::new(
            vec![
                atom(Element::N, [0.0, 0.0, 0.0]),
                atom(Element::C, [1.47, 0.0, 0.0]),
                atom(Element::C, [-1.47, 0.0, 0.0]),
                atom(Element::C, [0.0, 1.47, 0.0]),
            ],
            vec![
                Bond {
                    i: 0,
                    j: 1,
                    order: 1,
                },
                Bond {
                    i: 0,
                    j: 2,
                    order: 1,
                },
                Bond {
                    i: 0,
                    j: 3,
                    order: 1,
                },
            ],
        );
        let with_h = add_hydrogens(&n_sat);
        let n_bonds: Vec<_> = with_h
            .bonds
            .iter()
            .filter(|b| b.i == 0 || b.j == 0)
            .collect();
        assert_eq!(n_bonds.len(), 3);
    }

    #[test]
    fn hydrogen_addition_never_overbonds_h() {
        let mut m = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::N, [1.47, 0.0, 0.0]),
                atom(Element::O, [-1.43, 0.0, 0.0]),
            ],
            vec![
                Bond {
                    i: 0,
                    j: 1,
                    order: 1,
                },
                Bond {
                    i: 0,
                    j: 2,
                    order: 1,
                },
            ],
        );
        m = add_hydrogens(&m);
        for (i, a) in m.atoms.iter().enumerate() {
            if a.element == Element::H {
                assert!(m.valence_sum(i) <= 1);
            }
        }
        // Idempotence on the heavy skeleton.
        let s1 = strip_hydrogens(&m);
        let s2 = strip_hydrogens(&add_hydrogens(&s1));
        assert_eq!(s1, s2);
    }

    #[test]
    fn ring_detection_counts_independent_cycles() {
        let benzene = Molecule::new(
            (0..6)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::PI / 3.0;
                    atom(Element::C, [1.39 * a.cos(), 1.39 * a.sin(), 0.0])
                })
                .collect(),
            (0..6)
                .map(|k| Bond {
                    i: k,
                    j: (k + 1) % 6,
                    order: if k % 2 == 0 { 2 } else { 1 },
                })
                .collect(),
        );
        assert!(detect_rings(&benzene));

        let propane = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::C, [1.5, 0.0, 0.0]),
                atom(Element::C, [3.0, 0.0, 0.0]),
            ],
            vec![
                Bond {
                    i: 0,
                    j: 1,
                    order: 1,
                },
                Bond {
                    i: 1,
                    j: 2,
                    order: 1,
                },
            ],
        );
        assert!(!detect_rings(&propane));
        assert!(!detect_rings(&Molecule::default()));

        // Two components, one cyclic: still true.
        let mut mixed = benzene.clone();
        mixed.atoms.push(atom(Element::O, [5.0, 5.0, 5.0]));
        assert!(detect_rings(&mixed));
    }

    /// DFS back-edge oracle for cycle detection.
    fn has_cycle_dfs(m: &Molecule) -> bool {
        let n = m.atoms.len();
        let mut visited = vec![false; n];
        for start in 0..n {
            if visited[start] {
                continue;
            }
            let mut stack = vec![(start, usize::MAX)];
            visited[start] = true;
            while let Some((v, parent)) = stack.pop() {
                for (w, _) in m.neighbors(v) {
                    if w == parent {
                        continue;
                    }
                    if visited[w] {
                        return true;
                    }
                    visited[w] = true;
                    stack.push((w, v));
                }
            }
        }
        false
    }

    #[test]
    fn ring_detection_agrees_with_dfs_oracle_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(0..9usize);
            let mut atoms = Vec::new();
            for _ in 0..n {
                atoms.push(atom(Element::C, [0.0, 0.0, 0.0]));
            }
            let mut bonds = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.gen_bool(0.25) {
                        bonds.push(Bond { i, j, order: 1 });
                    }
                }
            }
            let m = Molecule::new(atoms, bonds);
            assert_eq!(detect_rings(&m), has_cycle_dfs(&m));
        }
    }

    fn permuted(m: &Molecule, perm: &[usize]) -> Molecule {
        // perm[new] = old
        let mut inv = vec![0usize; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        Molecule::new(
            perm.iter().map(|&old| m.atoms[old]).collect(),
            m.bonds
                .iter()
                .map(|b| Bond {
                    i: inv[b.i],
                    j: inv[b.j],
                    order: b.order,
                })
                .collect(),
        )
    }

    #[test]
    fn canonical_hash_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mols = [
            methane(),
            add_hydrogens(&Molecule::new(
                vec![
                    atom(Element::C, [0.0, 0.0, 0.0]),
                    atom(Element::C, [1.54, 0.0, 0.0]),
                    atom(Element::O, [2.6, 1.0, 0.0]),
                    atom(Element::N, [-1.2, 0.8, 0.3]),
                ],
                vec![
                    Bond {
                        i: 0,
                        j: 1,
                        order: 1,
                    },
                    Bond {
                        i: 1,
                        j: 2,
                        order: 1,
                    },
                    Bond {
                        i: 0,
                        j: 3,
                        order: 1,
                    },
                ],
            )),
            // C9 ring, highly symmetric: stresses individualization.
            Molecule::new(
                (0..9).map(|_| atom(Element::C, [0.0, 0.0, 0.0])).collect(),
                (0..9)
                    .map(|k| Bond {
                        i: k,
                        j: (k + 1) % 9,
                        order: 1,
                    })
                    .collect(),
            ),
        ];
        for m in &mols {
            let want = canonical_hash(m);
            for _ in 0..100 {
                let mut perm: Vec<usize> = (0..m.atoms.len()).collect();
                perm.shuffle(&mut rng);
                assert_eq!(canonical_hash(&permuted(m, &perm)), want);
            }
        }
    }

    #[test]
    fn canonical_hash_separates_distinct_graphs() {
        let ch4 = methane();
        let nh3 = add_hydrogens(&Molecule::new(
            vec![atom(Element::N, [0.0, 0.0, 0.0])],
            vec![],
        ));
        assert_ne!(canonical_hash(&ch4), canonical_hash(&nh3));

        let chain = Molecule::new(
            (0..4).map(|_| atom(Element::C, [0.0, 0.0, 0.0])).collect(),
            (0..3)
                .map(|k| Bond {
                    i: k,
                    j: k + 1,
                    order: 1,
                })
                .collect(),
        );
        let ring = Molecule::new(
            (0..4).map(|_| atom(Element::C, [0.0, 0.0, 0.0])).collect(),
            (0..4)
                .map(|k| Bond {
                    i: k,
                    j: (k + 1) % 4,
                    order: 1,
                })
                .collect(),
        );
        assert_ne!(canonical_hash(&chain), canonical_hash(&ring));

        // Same skeleton, different bond order.
        let double = Molecule::new(
            chain.atoms.clone(),
            vec![
                Bond {
                    i: 0,
                    j: 1,
                    order: 2,
                },
                Bond {
                    i: 1,
                    j: 2,
                    order: 1,
                },
                Bond {
                    i: 2,
                    j: 3,
                    order: 1,
                },
            ],
        );
        assert_ne!(canonical_hash(&chain), canonical_hash(&double));
    }

    #[test]
    fn xyz_parsing_handles_headers_and_headerless_files() {
        let head = "3\ncomment\nC 0.0 0.0 0.0\nO 1.2 0.0 0.0\nN -1.4 0.1 0.0\n";
        let mols = parse_xyz_str(head).unwrap();
        assert_eq!(mols.len(), 1);
        assert_eq!(mols[0].atoms.len(), 3);
        assert!(mols[0].bonds.is_empty());

        let bare = "C 0 0 0\n";
        let mols = parse_xyz_str(bare).unwrap();
        assert_eq!(mols.len(), 1);
        assert_eq!(mols[0].atoms[0].element, Element::C);
        assert_eq!(mols[0].atoms[0].position, [0.0, 0.0, 0.0]);

        let multi = "1\na\nC 0 0 0\n2\nb\nO 0 0 0\nO 1.2 0 0\n";
        assert_eq!(parse_xyz_str(multi).unwrap().len(), 2);

        let bad = "1\ncomment\nXx 0 0 0\n";
        match parse_xyz_str(bad) {
            Err(MolError::UnsupportedElement { symbol, line }) => {
                assert_eq!(symbol, "Xx");
                assert_eq!(line, 3);
            }
            other => panic!("expected unsupported element, got {other:?}"),
        }

        let malformed = "2\ncomment\nC 0 0\n";
        assert!(matches!(
            parse_xyz_str(malformed),
            Err(MolError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn sdf_round_trips_through_writer_and_parser() {
        let m = methane();
        let text = sdf_record(&m, "methane");
        let parsed = parse_sdf_str(&text).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].atoms.len(), 5);
        assert_eq!(parsed[0].bonds.len(), 4);
        for (a, b) in parsed[0].atoms.iter().zip(m.atoms.iter()) {
            assert_eq!(a.element, b.element);
            for k in 0..3 {
                assert!((a.position[k] - b.position[k]).abs() < 1e-4);
            }
        }
        assert_eq!(parsed[0].bonds, m.bonds);

        // Multi-record files parse record by record.
        let two = format!(
            "{}{}",
            sdf_record(&m, "a"),
            sdf_record(&strip_hydrogens(&m), "b")
        );
        let parsed = parse_sdf_str(&two).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].atoms.len(), 1);
    }

    #[test]
    fn sdf_parser_reports_unknown_elements_with_line_numbers() {
        let text = "t\n p\n\n  1  0  0  0  0  0  0  0  0  0999 V2000\n    0.0000    0.0000    0.0000 Xx  0  0  0  0  0  0  0  0  0  0  0  0\nM  END\n$$$$\n";
        match parse_sdf_str(text) {
            Err(MolError::UnsupportedElement { symbol, line }) => {
                assert_eq!(symbol, "Xx");
                assert_eq!(line, 5);
            }
            other => panic!("expected unsupported element, got {other:?}"),
        }
    }

    #[test]
    fn molecule_invariant_checks_reject_bad_bonds() {
        let atoms = vec![
            atom(Element::C, [0.0, 0.0, 0.0]),
            atom(Element::C, [1.5, 0.0, 0.0]),
        ];
        let self_bond = Molecule::new(
            atoms.clone(),
            vec![Bond {
                i: 0,
                j: 0,
                order: 1,
            }],
        );
        assert!(self_bond.check().is_err());
        let dup = Molecule::new(
            atoms.clone(),
            vec![
                Bond {
                    i: 0,
                    j: 1,
                    order: 1,
                },
                Bond {
                    i: 1,
                    j: 0,
                    order: 2,
                },
            ],
        );
        assert!(dup.check().is_err());
        let oob = Molecule::new(
            atoms.clone(),
            vec![Bond {
                i: 0,
                j: 5,
                order: 1,
            }],
        );
        assert!(oob.check().is_err());
        let bad_order = Molecule::new(
            atoms,
            vec![Bond {
                i: 0,
                j: 1,
                order: 4,
            }],
        );
        assert!(bad_order.check().is_err());
    }

    #[test]
    fn largest_component_prefers_size_then_first_index() {
        let m = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::C, [1.5, 0.0, 0.0]),
                atom(Element::O, [9.0, 0.0, 0.0]),
            ],
            vec![Bond {
                i: 0,
                j: 1,
                order: 1,
            }],
        );
        assert_eq!(m.largest_component(), vec![0, 1]);
        let tie = Molecule::new(
            vec![
                atom(Element::C, [0.0, 0.0, 0.0]),
                atom(Element::O, [9.0, 0.0, 0.0]),
            ],
            vec![],
        );
        assert_eq!(tie.largest_component(), vec![0]);
    }
}
