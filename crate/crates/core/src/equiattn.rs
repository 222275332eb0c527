//! Rotation- and translation-equivariant multihead attention over atoms.
//!
//! Features are fibers with a type-0 block (scalars, invariant) and a type-1
//! block (3-vectors, rotating as v -> Rv).  Keys and values come from tensor
//! field network kernels: learned radial profiles times fixed angular maps
//! built from real spherical harmonics and Clebsch-Gordan coupling tables.
//! Queries are radial-free linear maps of the query atom's own features,
//! which forces them to be degree-preserving.  Attention logits q . k are
//! rotation invariant by construction, so the softmax weights are too.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, Ix2, Ix3};
use rand::Rng;
use thiserror::Error;

use crate::encoding::ChannelTensor;
use crate::params::{init_linear, init_normal, ParamStore, ParamVars};
use crate::so3::{allowed_j, intertwiner, radial_basis, sph1, sph2, RADIAL_BASIS, Y00};
use crate::tape::{Tape, Var};

/// Displacements shorter than this are treated as coincident atoms.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EquiAttnError {
    #[error("atoms {i} and {j} coincide; kernel direction undefined")]
    DegenerateGeometry { i: usize, j: usize },
    #[error("kernel evaluated at zero displacement")]
    ZeroDisplacement,
    #[error("neighborhood of atom {i} lists invalid neighbor {j}")]
    BadNeighbor { i: usize, j: usize },
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Per-atom features: `f0` is [n, c0] scalars, `f1` is [n, c1, 3] vectors.
/// Either channel count may be zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberFeature {
    pub f0: Array2<f64>,
    pub f1: Array3<f64>,
}

impl FiberFeature {
    pub fn new(f0: Array2<f64>, f1: Array3<f64>) -> Result<FiberFeature, EquiAttnError> {
        if f0.nrows() != f1.shape()[0] {
            return Err(EquiAttnError::Shape(format!(
                "f0 has {} atoms, f1 has {}",
                f0.nrows(),
                f1.shape()[0]
            )));
        }
        if f1.shape()[2] != 3 {
            return Err(EquiAttnError::Shape("f1 last axis must be 3".into()));
        }
        Ok(FiberFeature { f0, f1 })
    }

    pub fn scalars(f0: Array2<f64>) -> FiberFeature {
        let n = f0.nrows();
        FiberFeature {
            f0,
            f1: Array3::zeros((n, 0, 3)),
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.f0.nrows()
    }
}

/// Learned map from the radial basis (plus optional extra edge scalars) to
/// one value per output slot.  Weights are [n_out, RADIAL_BASIS + n_extra].
#[derive(Clone, Debug, PartialEq)]
pub struct RadialProfile {
    pub weights: Array2<f64>,
}

impl RadialProfile {
    pub fn n_extra(&self) -> usize {
        self.weights.ncols() - RADIAL_BASIS
    }

    pub fn eval(&self, r: f64, extra: &[f64]) -> Array1<f64> {
        assert_eq!(extra.len(), self.n_extra(), "extra feature width mismatch");
        let mut feats = Array1::zeros(self.weights.ncols());
        for (dst, src) in feats.iter_mut().zip(radial_basis(r).iter().chain(extra)) {
            *dst = *src;
        }
        self.weights.dot(&feats)
    }
}

/// Kernel block mapping type-`k` features to type-`l` features as a function
/// of a displacement vector.  One radial profile output per coupled degree J.
#[derive(Clone, Debug)]
pub struct TfnKernel {
    pub l: usize,
    pub k: usize,
    pub radial: RadialProfile,
}

/// Spherical harmonic vector of degree `j` in the component order used by
/// the coupling tables.
fn sph_vec(j: usize, u: [f64; 3]) -> Vec<f64> {
    match j {
        0 => vec![Y00],
        1 => sph1(u).to_vec(),
        2 => sph2(u).to_vec(),
        _ => unreachable!("degrees above 2 are never coupled"),
    }
}

impl TfnKernel {
    pub fn new(l: usize, k: usize, radial: RadialProfile) -> TfnKernel {
        let n_j = allowed_j(l, k).count();
        assert_eq!(radial.weights.nrows(), n_j, "one radial output per J");
        TfnKernel { l, k, radial }
    }

    /// W(x) = sum_J phi_J(|x|) sum_m Y_Jm(x/|x|) Q_Jm, a (2l+1) x (2k+1)
    /// matrix satisfying W(Rx) = D_l(R) W(x) D_k(R)^T.
    pub fn eval(&self, x: [f64; 3], extra: &[f64]) -> Result<Array2<f64>, EquiAttnError> {
        let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        if r < GEOM_EPS {
            return Err(EquiAttnError::ZeroDisplacement);
        }
        let u = [x[0] / r, x[1] / r, x[2] / r];
        let phi = self.radial.eval(r, extra);
        let mut w = Array2::zeros((2 * self.l + 1, 2 * self.k + 1));
        for (j_idx, j) in allowed_j(self.l, self.k).enumerate() {
            let y = sph_vec(j, u);
            let q = intertwiner(self.l, self.k, j);
            for (m, ym) in y.iter().enumerate() {
                w.scaled_add(phi[j_idx] * ym, &q.index_axis(ndarray::Axis(0), m));
            }
        }
        Ok(w)
    }
}

/// Directed edges grouped by query atom: edges of atom `i` occupy
/// `pairs[offsets[i]..offsets[i+1]]`, each pair being (query, source).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeList {
    pub pairs: Vec<(usize, usize)>,
    pub offsets: Vec<usize>,
}

impl EdgeList {
    /// Every ordered pair of distinct atoms.
    pub fn full(n: usize) -> EdgeList {
        let mut pairs = Vec::with_capacity(n.saturating_mul(n.saturating_sub(1)));
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pairs.push((i, j));
                }
            }
            offsets.push(pairs.len());
        }
        EdgeList { pairs, offsets }
    }

    /// Edges from explicit neighbor lists; self-loops and out-of-range
    /// neighbors are rejected.
    pub fn from_neighborhoods(neighbors: &[Vec<usize>]) -> Result<EdgeList, EquiAttnError> {
        let n = neighbors.len();
        let mut pairs = Vec::new();
        let mut offsets = vec![0];
        for (i, nbrs) in neighbors.iter().enumerate() {
            for &j in nbrs {
                if j == i || j >= n {
                    return Err(EquiAttnError::BadNeighbor { i, j });
                }
                pairs.push((i, j));
            }
            offsets.push(pairs.len());
        }
        Ok(EdgeList { pairs, offsets })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_atoms(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Channel layout of one attention layer.
///
/// `qk*` are per-head query/key widths by degree, `v*` per-head value widths.
/// `edge_extra` scalars are appended to the radial basis before the learned
/// radial maps of keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct EquiAttnConfig {
    pub c0_in: usize,
    pub c1_in: usize,
    pub c0_out: usize,
    pub c1_out: usize,
    pub heads: usize,
    pub qk0: usize,
    pub qk1: usize,
    pub v0: usize,
    pub v1: usize,
    pub edge_extra: usize,
}

impl Default for EquiAttnConfig {
    /// Layout of the encoder-front layer: one-hot element scalars in, one
    /// position-replacement vector out, bond order as the extra edge scalar.
    fn default() -> EquiAttnConfig {
        EquiAttnConfig {
            c0_in: 4,
            c1_in: 0,
            c0_out: 0,
            c1_out: 1,
            heads: 4,
            qk0: 8,
            qk1: 0,
            v0: 0,
            v1: 2,
            edge_extra: 1,
        }
    }
}

impl EquiAttnConfig {
    pub fn validate(&self) -> Result<(), EquiAttnError> {
        let bad = |msg: &str| Err(EquiAttnError::Config(msg.into()));
        if self.heads == 0 {
            return bad("heads must be >= 1");
        }
        if self.c0_in + self.c1_in == 0 {
            return bad("no input channels");
        }
        if self.qk0 + self.qk1 == 0 {
            return bad("no query/key channels");
        }
        // Queries are degree-preserving maps of self features, so a degree
        // can only carry queries if it carries input.
        if self.qk0 > 0 && self.c0_in == 0 {
            return bad("qk0 > 0 requires c0_in > 0");
        }
        if self.qk1 > 0 && self.c1_in == 0 {
            return bad("qk1 > 0 requires c1_in > 0");
        }
        if (self.v0 > 0) != (self.c0_out > 0) {
            return bad("v0 and c0_out must be zero or nonzero together");
        }
        if (self.v1 > 0) != (self.c1_out > 0) {
            return bad("v1 and c1_out must be zero or nonzero together");
        }
        if self.c0_out + self.c1_out == 0 {
            return bad("no output channels");
        }
        Ok(())
    }

    fn input_degrees(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.c0_in > 0 {
            out.push((0, self.c0_in));
        }
        if self.c1_in > 0 {
            out.push((1, self.c1_in));
        }
        out
    }

    /// (l, k) kernel blocks the layer needs, for keys and values together.
    pub fn degree_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (l, used) in [
            (0, self.qk0 > 0 || self.v0 > 0),
            (1, self.qk1 > 0 || self.v1 > 0),
        ] {
            if !used {
                continue;
            }
            for &(k, _) in &self.input_degrees() {
                out.push((l, k));
            }
        }
        out
    }

    fn basis_width(&self) -> usize {
        RADIAL_BASIS + self.edge_extra
    }

    /// Inserts freshly initialized parameters under `prefix`.
    pub fn init_into(&self, store: &mut ParamStore, rng: &mut impl Rng, prefix: &str) {
        self.validate().expect("invalid attention config");
        let b = self.basis_width();
        let radial_std = (1.0 / b as f64).sqrt();
        let mut radial = |name: String, n_j: usize, oc: usize, ic: usize| {
            store.insert(&name, init_normal(rng, &[b, n_j * oc * ic], radial_std));
        };
        for (l, qk) in [(0, self.qk0), (1, self.qk1)] {
            if qk == 0 {
                continue;
            }
            for &(k, ck) in &self.input_degrees() {
                let n_j = allowed_j(l, k).count();
                radial(format!("{prefix}wk{l}{k}"), n_j, self.heads * qk, ck);
            }
        }
        for (l, v) in [(0, self.v0), (1, self.v1)] {
            if v == 0 {
                continue;
            }
            for &(k, ck) in &self.input_degrees() {
                let n_j = allowed_j(l, k).count();
                radial(format!("{prefix}wv{l}{k}"), n_j, self.heads * v, ck);
            }
        }
        if self.qk0 > 0 {
            store.insert(
                &format!("{prefix}wq0"),
                init_linear(rng, self.heads * self.qk0, self.c0_in),
            );
        }
        if self.qk1 > 0 {
            store.insert(
                &format!("{prefix}wq1"),
                init_linear(rng, self.heads * self.qk1, self.c1_in),
            );
        }
        if self.v0 > 0 && self.c0_in > 0 {
            store.insert(
                &format!("{prefix}wvs0"),
                init_linear(rng, self.heads * self.v0, self.c0_in),
            );
        }
        if self.v1 > 0 && self.c1_in > 0 {
            store.insert(
                &format!("{prefix}wvs1"),
                init_linear(rng, self.heads * self.v1, self.c1_in),
            );
        }
        if self.c0_out > 0 {
            store.insert(
                &format!("{prefix}wm0"),
                init_linear(rng, self.c0_out, self.heads * self.v0),
            );
        }
        if self.c1_out > 0 {
            store.insert(
                &format!("{prefix}wm1"),
                init_linear(rng, self.c1_out, self.heads * self.v1),
            );
        }
    }
}

/// Fixed per-edge quantities: radial features and the angular kernel stacks.
/// `geom[(l,k)]` is [E, nJ * (2l+1), 2k+1], rows grouped by coupled degree J.
pub struct EdgeGeometry {
    pub radial: Array2<f64>,
    geom: BTreeMap<(usize, usize), Array3<f64>>,
}

impl EdgeGeometry {
    pub fn build(
        positions: &[[f64; 3]],
        edges: &EdgeList,
        extra: Option<&Array2<f64>>,
        pairs: &[(usize, usize)],
        edge_extra: usize,
    ) -> Result<EdgeGeometry, EquiAttnError> {
        let e = edges.len();
        if let Some(x) = extra {
            if x.nrows() != e || x.ncols() != edge_extra {
                return Err(EquiAttnError::Shape(format!(
                    "edge extras are {}x{}, expected {}x{}",
                    x.nrows(),
                    x.ncols(),
                    e,
                    edge_extra
                )));
            }
        } else if edge_extra != 0 {
            return Err(EquiAttnError::Shape(
                "edge extras required but missing".into(),
            ));
        }

        let mut radial = Array2::zeros((e, RADIAL_BASIS + edge_extra));
        let mut units = vec![[0.0; 3]; e];
        for (idx, &(i, j)) in edges.pairs.iter().enumerate() {
            let d = [
                positions[j][0] - positions[i][0],
                positions[j][1] - positions[i][1],
                positions[j][2] - positions[i][2],
            ];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if r < GEOM_EPS {
                return Err(EquiAttnError::DegenerateGeometry { i, j });
            }
            units[idx] = [d[0] / r, d[1] / r, d[2] / r];
            for (col, v) in radial_basis(r).iter().enumerate() {
                radial[[idx, col]] = *v;
            }
            if let Some(x) = extra {
                for col in 0..edge_extra {
                    radial[[idx, RADIAL_BASIS + col]] = x[[idx, col]];
                }
            }
        }

        let mut geom = BTreeMap::new();
        for &(l, k) in pairs {
            let js: Vec<usize> = allowed_j(l, k).collect();
            let qs: Vec<Array3<f64>> = js.iter().map(|&j| intertwiner(l, k, j)).collect();
            let mut g = Array3::zeros((e, js.len() * (2 * l + 1), 2 * k + 1));
            for (idx, u) in units.iter().enumerate() {
                for (j_idx, (&j, q)) in js.iter().zip(&qs).enumerate() {
                    let y = sph_vec(j, *u);
                    for (m, ym) in y.iter().enumerate() {
                        for ml in 0..2 * l + 1 {
                            for mk in 0..2 * k + 1 {
                                g[[idx, j_idx * (2 * l + 1) + ml, mk]] += ym * q[[m, ml, mk]];
                            }
                        }
                    }
                }
            }
            geom.insert((l, k), g);
        }
        Ok(EdgeGeometry { radial, geom })
    }
}

/// Attention outputs on the tape; `alpha` is [E, heads].
pub struct EquiOutput {
    pub f0: Option<Var>,
    pub f1: Option<Var>,
    pub alpha: Var,
}

/// Channel-mixing map for vector features: x [n, c, 3] with w [out, c]
/// gives [n, out, 3], acting on each spatial component independently.
fn mix_channels(x: &Var, w: &Var) -> Var {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    x.permute_axes(&[0, 2, 1])
        .reshape(&[n * 3, c])
        .matmul(&w.permute_axes(&[1, 0]))
        .reshape(&[n, 3, out])
        .permute_axes(&[0, 2, 1])
}

/// One attention layer on the tape.  `f0`/`f1` must be present exactly when
/// the config declares the corresponding input channels.
#[allow(clippy::too_many_arguments)]
pub fn equi_attention_var(
    tape: &Rc<Tape>,
    cfg: &EquiAttnConfig,
    p: &ParamVars,
    prefix: &str,
    f0: Option<&Var>,
    f1: Option<&Var>,
    geo: &EdgeGeometry,
    edges: &EdgeList,
) -> Result<EquiOutput, EquiAttnError> {
    cfg.validate()?;
    let n = edges.n_atoms();
    let e = edges.len();
    let h = cfg.heads;

    match (f0, cfg.c0_in) {
        (Some(f), c) if c > 0 => {
            if f.shape() != [n, c] {
                return Err(EquiAttnError::Shape(format!(
                    "f0 is {:?}, expected [{n}, {c}]",
                    f.shape()
                )));
            }
        }
        (None, 0) => {}
        _ => return Err(EquiAttnError::Shape("f0 presence mismatches c0_in".into())),
    }
    match (f1, cfg.c1_in) {
        (Some(f), c) if c > 0 => {
            if f.shape() != [n, c, 3] {
                return Err(EquiAttnError::Shape(format!(
                    "f1 is {:?}, expected [{n}, {c}, 3]",
                    f.shape()
                )));
            }
        }
        (None, 0) => {}
        _ => return Err(EquiAttnError::Shape("f1 presence mismatches c1_in".into())),
    }

    let offsets = Rc::new(edges.offsets.clone());
    let u = tape.constant(geo.radial.clone().into_dyn());

    // Source features gathered per edge, transposed to [E, 2k+1, ck] so the
    // kernel stack can act by batched matmul.
    let f0_t = f0.map(|f| {
        let c0 = cfg.c0_in;
        let mut map = Vec::with_capacity(e * c0);
        for &(_, j) in &edges.pairs {
            for c in 0..c0 {
                map.push(j * c0 + c);
            }
        }
        f.gather_flat(Rc::new(map), &[e, 1, c0])
    });
    let f1_t = f1.map(|f| {
        let c1 = cfg.c1_in;
        let mut map = Vec::with_capacity(e * 3 * c1);
        for &(_, j) in &edges.pairs {
            for x in 0..3 {
                for c in 0..c1 {
                    map.push(j * c1 * 3 + c * 3 + x);
                }
            }
        }
        f.gather_flat(Rc::new(map), &[e, 3, c1])
    });

    // Applies every input-degree kernel block of one kind ('k' or 'v') for
    // output degree l and sums them: result [E, oc, 2l+1].
    let kernel_sum = |kind: char, l: usize, oc: usize| -> Var {
        let mut acc: Option<Var> = None;
        for &(k, ck) in &cfg.input_degrees() {
            let f_t = match k {
                0 => f0_t.as_ref().unwrap(),
                _ => f1_t.as_ref().unwrap(),
            };
            let n_j = allowed_j(l, k).count();
            let two_l1 = 2 * l + 1;
            let g = tape.constant(geo.geom[&(l, k)].clone().into_dyn());
            let w = p.get(&format!("{prefix}w{kind}{l}{k}"));
            let phi = u
                .matmul(&w)
                .reshape(&[e, n_j, oc, ck])
                .permute_axes(&[0, 2, 1, 3])
                .reshape(&[e, oc, n_j * ck]);
            let t = g
                .batched_matmul(f_t)
                .reshape(&[e, n_j, two_l1, ck])
                .permute_axes(&[0, 1, 3, 2])
                .reshape(&[e, n_j * ck, two_l1]);
            let term = phi.batched_matmul(&t);
            acc = Some(match acc {
                Some(a) => a.add(&term),
                None => term,
            });
        }
        acc.expect("validated config has at least one input degree")
    };

    // Invariant logits: per-head dot products of self queries with kernel
    // keys, summed over degrees.  No magnitude normalization.
    let mut logits: Option<Var> = None;
    if cfg.qk0 > 0 {
        let wq0 = p.get(&format!("{prefix}wq0"));
        let q0 = f0.unwrap().matmul(&wq0.permute_axes(&[1, 0]));
        let mut map = Vec::with_capacity(e * h * cfg.qk0);
        for &(i, _) in &edges.pairs {
            for d in 0..h * cfg.qk0 {
                map.push(i * h * cfg.qk0 + d);
            }
        }
        let q0e = q0.gather_flat(Rc::new(map), &[e, h, cfg.qk0]);
        let k0 = kernel_sum('k', 0, h * cfg.qk0).reshape(&[e, h, cfg.qk0]);
        logits = Some(q0e.mul(&k0).sum_axis_keep(2).reshape(&[e, h]));
    }
    if cfg.qk1 > 0 {
        let wq1 = p.get(&format!("{prefix}wq1"));
        let q1 = mix_channels(f1.unwrap(), &wq1);
        let width = h * cfg.qk1 * 3;
        let mut map = Vec::with_capacity(e * width);
        for &(i, _) in &edges.pairs {
            for d in 0..width {
                map.push(i * width + d);
            }
        }
        let q1e = q1.gather_flat(Rc::new(map), &[e, h, cfg.qk1 * 3]);
        let k1 = kernel_sum('k', 1, h * cfg.qk1).reshape(&[e, h, cfg.qk1 * 3]);
        let dot = q1e.mul(&k1).sum_axis_keep(2).reshape(&[e, h]);
        logits = Some(match logits {
            Some(l0) => l0.add(&dot),
            None => dot,
        });
    }
    let alpha = logits
        .expect("validated config has query channels")
        .segment_softmax(offsets.clone());

    let out0 = if cfg.c0_out > 0 {
        let v0e = kernel_sum('v', 0, h * cfg.v0).reshape(&[e, h, cfg.v0]);
        let m0 = alpha
            .segment_weighted_sum(&v0e, offsets.clone())
            .reshape(&[n, h * cfg.v0]);
        let a0 = match f0 {
            Some(f) => {
                let wvs0 = p.get(&format!("{prefix}wvs0"));
                m0.add(&f.matmul(&wvs0.permute_axes(&[1, 0])))
            }
            None => m0,
        };
        let wm0 = p.get(&format!("{prefix}wm0"));
        Some(a0.matmul(&wm0.permute_axes(&[1, 0])))
    } else {
        None
    };

    let out1 = if cfg.c1_out > 0 {
        let v1e = kernel_sum('v', 1, h * cfg.v1).reshape(&[e, h, cfg.v1 * 3]);
        let m1 = alpha
            .segment_weighted_sum(&v1e, offsets)
            .reshape(&[n, h * cfg.v1, 3]);
        let a1 = match f1 {
            Some(f) => {
                let wvs1 = p.get(&format!("{prefix}wvs1"));
                m1.add(&mix_channels(f, &wvs1))
            }
            None => m1,
        };
        let wm1 = p.get(&format!("{prefix}wm1"));
        Some(mix_channels(&a1, &wm1))
    } else {
        None
    };

    Ok(EquiOutput {
        f0: out0,
        f1: out1,
        alpha,
    })
}

/// Single evaluation outside any training graph.  `extra` rows align with
/// `edges.pairs`.  Returns the output fiber and the [E, heads] weights.
pub fn equi_attention(
    cfg: &EquiAttnConfig,
    params: &ParamStore,
    prefix: &str,
    f: &FiberFeature,
    positions: &[[f64; 3]],
    edges: &EdgeList,
    extra: Option<&Array2<f64>>,
) -> Result<(FiberFeature, Array2<f64>), EquiAttnError> {
    cfg.validate()?;
    let n = edges.n_atoms();
    if positions.len() != n || f.n_atoms() != n {
        return Err(EquiAttnError::Shape(format!(
            "{} positions and {} feature rows for {} atoms",
            positions.len(),
            f.n_atoms(),
            n
        )));
    }
    let geo = EdgeGeometry::build(positions, edges, extra, &cfg.degree_pairs(), cfg.edge_extra)?;
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let f0 = (cfg.c0_in > 0).then(|| tape.constant(f.f0.clone().into_dyn()));
    let f1 = (cfg.c1_in > 0).then(|| tape.constant(f.f1.clone().into_dyn()));
    let out = equi_attention_var(
        &tape,
        cfg,
        &p,
        prefix,
        f0.as_ref(),
        f1.as_ref(),
        &geo,
        edges,
    )?;
    let f0_out = match out.f0 {
        Some(v) => v.value().clone().into_dimensionality::<Ix2>().unwrap(),
        None => Array2::zeros((n, 0)),
    };
    let f1_out = match out.f1 {
        Some(v) => v.value().clone().into_dimensionality::<Ix3>().unwrap(),
        None => Array3::zeros((n, 0, 3)),
    };
    let alpha = out
        .alpha
        .value()
        .clone()
        .into_dimensionality::<Ix2>()
        .unwrap();
    Ok((
        FiberFeature {
            f0: f0_out,
            f1: f1_out,
        },
        alpha,
    ))
}

/// How the attention output enters channel 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreprocessMode {
    /// Real rows of channel 0 are overwritten: output vector in columns
    /// 0..3, zeros elsewhere.
    Replace,
    /// Output vectors are added onto columns 0..3; the rest is untouched.
    Residual,
}

/// Graph view of an encoded molecule: real rows, their positions, scalar
/// features from channel 1, full edges, and symmetrized channel-2 values.
pub struct GraphInputs {
    pub rows: Vec<usize>,
    pub positions: Vec<[f64; 3]>,
    pub f0: Array2<f64>,
    pub edges: EdgeList,
    pub extra: Array2<f64>,
}

pub fn graph_inputs(t: &ChannelTensor, cfg: &EquiAttnConfig) -> Result<GraphInputs, EquiAttnError> {
    let side = t.grid_side();
    if cfg.c0_in > side {
        return Err(EquiAttnError::Shape(format!(
            "c0_in = {} exceeds grid side {}",
            cfg.c0_in, side
        )));
    }
    if cfg.edge_extra > 1 {
        return Err(EquiAttnError::Config(
            "tensor preprocessing provides at most one edge scalar".into(),
        ));
    }
    let rows: Vec<usize> = match &t.mask {
        Some(m) => m
            .iter()
            .enumerate()
            .filter_map(|(i, &real)| real.then_some(i))
            .collect(),
        None => (0..t.n_atoms.min(side)).collect(),
    };
    let n = rows.len();
    let mut positions = Vec::with_capacity(n);
    let mut f0 = Array2::zeros((n, cfg.c0_in));
    for (a, &row) in rows.iter().enumerate() {
        positions.push([
            t.data[[0, row, 0]],
            t.data[[0, row, 1]],
            t.data[[0, row, 2]],
        ]);
        for c in 0..cfg.c0_in {
            f0[[a, c]] = t.data[[1, row, c]];
        }
    }
    let edges = EdgeList::full(n);
    let mut extra = Array2::zeros((edges.len(), cfg.edge_extra));
    if cfg.edge_extra == 1 {
        for (idx, &(a, b)) in edges.pairs.iter().enumerate() {
            let (ra, rb) = (rows[a], rows[b]);
            extra[[idx, 0]] = 0.5 * (t.data[[2, ra, rb]] + t.data[[2, rb, ra]]);
        }
    }
    Ok(GraphInputs {
        rows,
        positions,
        f0,
        edges,
        extra,
    })
}

/// A layer can front the tensor pipeline only if it consumes scalars and
/// emits exactly one vector channel.
pub fn validate_preprocess_config(cfg: &EquiAttnConfig) -> Result<(), EquiAttnError> {
    if cfg.c1_in != 0 || cfg.c0_out != 0 || cfg.c1_out != 1 {
        return Err(EquiAttnError::Config(
            "tensor preprocessing needs scalar inputs and exactly one vector output".into(),
        ));
    }
    Ok(())
}

/// Attention front end on the tape.  Returns the processed [3, H, H] tensor
/// and the attention weights (absent when the molecule has < 1 real row).
pub fn preprocess_var(
    tape: &Rc<Tape>,
    cfg: &EquiAttnConfig,
    p: &ParamVars,
    prefix: &str,
    t: &ChannelTensor,
    mode: PreprocessMode,
) -> Result<(Var, Option<Var>), EquiAttnError> {
    validate_preprocess_config(cfg)?;
    let gi = graph_inputs(t, cfg)?;
    let side = t.grid_side();
    if gi.rows.is_empty() {
        return Ok((tape.constant(t.data.clone().into_dyn()), None));
    }
    let geo = EdgeGeometry::build(
        &gi.positions,
        &gi.edges,
        Some(&gi.extra),
        &cfg.degree_pairs(),
        cfg.edge_extra,
    )?;
    let n = gi.rows.len();
    let f0 = tape.constant(gi.f0.clone().into_dyn());
    let out = equi_attention_var(tape, cfg, p, prefix, Some(&f0), None, &geo, &gi.edges)?;
    let vectors = out.f1.expect("preprocess config has c1_out = 1");

    let mut base = t.data.clone();
    if mode == PreprocessMode::Replace {
        for &row in &gi.rows {
            for col in 0..side {
                base[[0, row, col]] = 0.0;
            }
        }
    }
    let base_v = tape.constant(base.into_dyn());
    let mut map = Vec::with_capacity(n * 3);
    for &row in &gi.rows {
        for x in 0..3 {
            map.push(row * side + x);
        }
    }
    let scattered = vectors
        .reshape(&[n * 3])
        .scatter_flat(Rc::new(map), &[3, side, side]);
    Ok((base_v.add(&scattered), Some(out.alpha)))
}

/// [`preprocess_var`] without a surrounding graph: plain tensors in and out.
pub fn attention_preprocess(
    cfg: &EquiAttnConfig,
    params: &ParamStore,
    prefix: &str,
    t: &ChannelTensor,
    mode: PreprocessMode,
) -> Result<ChannelTensor, EquiAttnError> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let (v, _) = preprocess_var(&tape, cfg, &p, prefix, t, mode)?;
    let data = v.value().clone().into_dimensionality::<Ix3>().unwrap();
    Ok(ChannelTensor {
        data,
        mask: t.mask.clone(),
        n_atoms: t.n_atoms,
    })
}
