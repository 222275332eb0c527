//! Molecule <-> 3-channel tensor conversion and the patch tokenizer.
//!
//! Channel 0 row i: atom i's centered (x, y, z) in columns 0..3.
//! Channel 1 row i: one-hot element vector in columns 0..vocab.
//! Channel 2 entry (i, j): bond order between atoms i and j.
//! Rows at or beyond `n_atoms` are zero; the mask marks real rows.

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::molgraph::{Atom, Bond, Element, Molecule};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("molecule has {n} heavy atoms, capacity is {n_max}")]
    Capacity { n: usize, n_max: usize },
    #[error("element {0} is outside the configured vocabulary")]
    Vocabulary(&'static str),
    #[error("grid side {n_max} too small: need max(vocabulary {vocab}, 3)")]
    GridTooSmall { n_max: usize, vocab: usize },
    #[error("patch size {p} does not divide grid side {h}")]
    PatchShape { p: usize, h: usize },
    #[error("token dimension {d} inconsistent with patch size {p} (want {want})")]
    TokenShape { d: usize, p: usize, want: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor record parse error: {0}")]
    Record(String),
}

/// One molecule as a 3 x H x H tensor plus row mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTensor {
    pub data: Array3<f64>,
    /// True for rows holding real atoms.  Absent on tensors reconstructed
    /// from raw tokens; decoding then falls back to a presence threshold.
    pub mask: Option<Vec<bool>>,
    pub n_atoms: usize,
}

impl ChannelTensor {
    pub fn grid_side(&self) -> usize {
        self.data.shape()[1]
    }

    /// All-zero tensor with the first `n_atoms` rows marked real.
    pub fn zeros(n_max: usize, n_atoms: usize) -> ChannelTensor {
        ChannelTensor {
            data: Array3::zeros((3, n_max, n_max)),
            mask: Some((0..n_max).map(|i| i < n_atoms).collect()),
            n_atoms,
        }
    }
}

/// Token matrix produced by [`patchify`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

/// Centers heavy-atom positions and writes the three channels.  The grid side
/// `n_max` must cover the atom count, the vocabulary width, and 3 coordinate
/// columns.
pub fn encode_molecule(
    m: &Molecule,
    n_max: usize,
    vocab: &[Element],
) -> Result<ChannelTensor, EncodeError> {
    if n_max < vocab.len().max(3) {
        return Err(EncodeError::GridTooSmall {
            n_max,
            vocab: vocab.len(),
        });
    }
    let n = m.atoms.len();
    if n > n_max {
        return Err(EncodeError::Capacity { n, n_max });
    }
    let mut t = ChannelTensor::zeros(n_max, n);
    if n == 0 {
        return Ok(t);
    }
    let mut center = [0.0; 3];
    for a in &m.atoms {
        for k in 0..3 {
            center[k] += a.position[k];
        }
    }
    for c in &mut center {
        *c /= n as f64;
    }
    for (i, a) in m.atoms.iter().enumerate() {
        let col = vocab
            .iter()
            .position(|&e| e == a.element)
            .ok_or(EncodeError::Vocabulary(a.element.symbol()))?;
        for k in 0..3 {
            t.data[[0, i, k]] = a.position[k] - center[k];
        }
        t.data[[1, i, col]] = 1.0;
    }
    for b in &m.bonds {
        t.data[[2, b.i, b.j]] = b.order as f64;
        t.data[[2, b.j, b.i]] = b.order as f64;
    }
    Ok(t)
}

/// Reads a molecule back out of a (possibly noisy) tensor.  Row presence
/// comes from the mask when available, otherwise from a 0.5 threshold on the
/// strongest channel-1 entry.  Ties in the element argmax break toward the
/// lowest vocabulary index.  Bond orders are the symmetrized channel-2
/// average, rounded and clamped to 0..=3.
pub fn decode_tensor(t: &ChannelTensor, vocab: &[Element]) -> Molecule {
    let h = t.grid_side();
    let rows: Vec<usize> = match &t.mask {
        Some(mask) => (0..h).filter(|&i| mask[i]).collect(),
        None => (0..h)
            .filter(|&i| {
                (0..vocab.len())
                    .map(|c| t.data[[1, i, c]])
                    .fold(f64::NEG_INFINITY, f64::max)
                    > 0.5
            })
            .collect(),
    };
    let mut atoms = Vec::with_capacity(rows.len());
    for &i in &rows {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (c, _) in vocab.iter().enumerate() {
            let v = t.data[[1, i, c]];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        atoms.push(Atom {
            element: vocab[best],
            position: [t.data[[0, i, 0]], t.data[[0, i, 1]], t.data[[0, i, 2]]],
        });
    }
    let mut bonds = Vec::new();
    for (ai, &i) in rows.iter().enumerate() {
        for (aj, &j) in rows.iter().enumerate().skip(ai + 1) {
            let avg = 0.5 * (t.data[[2, i, j]] + t.data[[2, j, i]]);
            let order = avg.round().clamp(0.0, 3.0) as u8;
            if order >= 1 {
                bonds.push(Bond {
                    i: ai,
                    j: aj,
                    order,
                });
            }
        }
    }
    Molecule::new(atoms, bonds)
}

/// Splits the grid into non-overlapping p x p patches, one token per patch.
/// Tokens run row-major over the patch grid; within a token, values are
/// ordered channel-major, then patch-row, then patch-column:
/// token[gr * gw + gc][c * p * p + r * p + q] = data[c, gr * p + r, gc * p + q].
pub fn patchify(t: &ChannelTensor, p: usize) -> Result<TokenSequence, EncodeError> {
    let (c, h, w) = t.data.dim();
    debug_assert_eq!(c, 3);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(EncodeError::PatchShape { p, h });
    }
    let (gh, gw) = (h / p, w / p);
    let d = 3 * p * p;
    let mut tokens = Array2::zeros((gh * gw, d));
    for gr in 0..gh {
        for gc in 0..gw {
            let tok = gr * gw + gc;
            for ch in 0..3 {
                for r in 0..p {
                    for q in 0..p {
                        tokens[[tok, ch * p * p + r * p + q]] =
                            t.data[[ch, gr * p + r, gc * p + q]];
                    }
                }
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        grid: (gh, gw),
        patch_size: p,
    })
}

/// Exact inverse of [`patchify`].  The result carries no mask; callers that
/// need one reattach it.
pub fn unpatchify(s: &TokenSequence) -> Result<ChannelTensor, EncodeError> {
    let p = s.patch_size;
    let (gh, gw) = s.grid;
    let (t, d) = s.tokens.dim();
    if t != gh * gw || d != 3 * p * p {
        return Err(EncodeError::TokenShape {
            d,
            p,
            want: 3 * p * p,
        });
    }
    let mut data = Array3::zeros((3, gh * p, gw * p));
    for gr in 0..gh {
        for gc in 0..gw {
            let tok = gr * gw + gc;
            for ch in 0..3 {
                for r in 0..p {
                    for q in 0..p {
                        data[[ch, gr * p + r, gc * p + q]] =
                            s.tokens[[tok, ch * p * p + r * p + q]];
                    }
                }
            }
        }
    }
    Ok(ChannelTensor {
        data,
        mask: None,
        n_atoms: 0,
    })
}

/// One entry of the on-disk tensor cache.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub tensor: ChannelTensor,
    pub class_label: Option<u32>,
}

/// Writes tensor records in the cache format: per record, an ASCII header
/// (`record` / `shape` / `mask` / optional `label` / `body` lines) followed by
/// exactly shape-product little-endian f32 values.  Deterministic: no
/// timestamps, insertion order preserved.
pub fn write_tensor_records(
    path: &std::path::Path,
    records: &[TensorRecord],
) -> Result<(), EncodeError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(format!("MOLTENSOR 1 {}\n", records.len()).as_bytes());
    for r in records {
        let (c, h, w) = r.tensor.data.dim();
        out.extend_from_slice(format!("record shape {c} {h} {w}\n").as_bytes());
        match &r.tensor.mask {
            Some(m) => {
                let bits: Vec<&str> = m.iter().map(|&b| if b { "1" } else { "0" }).collect();
                out.extend_from_slice(format!("mask {}\n", bits.join(" ")).as_bytes());
            }
            None => out.extend_from_slice(b"mask none\n"),
        }
        if let Some(l) = r.class_label {
            out.extend_from_slice(format!("label {l}\n").as_bytes());
        }
        out.extend_from_slice(b"body\n");
        for v in r.tensor.data.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_tensor_records(path: &std::path::Path) -> Result<Vec<TensorRecord>, EncodeError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let line = |bytes: &[u8], pos: &mut usize| -> Result<String, EncodeError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(EncodeError::Record("unexpected end of file".into()));
        }
        let s = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
        *pos += 1;
        Ok(s)
    };
    let header = line(&bytes, &mut pos)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "MOLTENSOR" || parts[1] != "1" {
        return Err(EncodeError::Record(format!("bad file header '{header}'")));
    }
    let count: usize = parts[2]
        .parse()
        .map_err(|_| EncodeError::Record("bad record count".into()))?;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let shape_line = line(&bytes, &mut pos)?;
        let f: Vec<&str> = shape_line.split_whitespace().collect();
        if f.len() != 5 || f[0] != "record" || f[1] != "shape" {
            return Err(EncodeError::Record(format!(
                "bad record header '{shape_line}'"
            )));
        }
        let dims: Vec<usize> = f[2..]
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| EncodeError::Record("bad shape".into()))
            })
            .collect::<Result<_, _>>()?;
        let mut mask: Option<Vec<bool>> = None;
        let mut label: Option<u32> = None;
        loop {
            let l = line(&bytes, &mut pos)?;
            if l == "body" {
                break;
            }
            if let Some(rest) = l.strip_prefix("mask ") {
                if rest != "none" {
                    mask = Some(rest.split_whitespace().map(|b| b == "1").collect());
                }
            } else if let Some(rest) = l.strip_prefix("label ") {
                label = Some(
                    rest.parse()
                        .map_err(|_| EncodeError::Record("bad label".into()))?,
                );
            } else {
                return Err(EncodeError::Record(format!("unknown header line '{l}'")));
            }
        }
        let n: usize = dims.iter().product();
        if pos + 4 * n + 1 > bytes.len() {
            return Err(EncodeError::Record("truncated body".into()));
        }
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let b = [
                bytes[pos + 4 * k],
                bytes[pos + 4 * k + 1],
                bytes[pos + 4 * k + 2],
                bytes[pos + 4 * k + 3],
            ];
            data.push(f32::from_le_bytes(b) as f64);
        }
        pos += 4 * n;
        if bytes[pos] != b'\n' {
            return Err(EncodeError::Record("missing body terminator".into()));
        }
        pos += 1;
        let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
            .map_err(|e| EncodeError::Record(e.to_string()))?;
        let n_atoms = mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count());
        records.push(TensorRecord {
            tensor: ChannelTensor {
                data: arr,
                mask,
                n_atoms,
            },
            class_label: label,
        });
    }
    Ok(records)
}
