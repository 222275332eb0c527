//! Transformer denoiser over patch tokens.
//!
//! The pipeline per molecule: equivariant attention front end, patchify,
//! learned token embedding plus sinusoidal position codes, a stack of
//! adaLN-Zero blocks conditioned on (timestep, class), a final layer norm,
//! and a zero-initialized decode back to per-patch noise and variance
//! channels.  Every block is the identity at initialization, so a fresh
//! model predicts zero noise and zero raw variance everywhere.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Ix2, Ix3, IxDyn};
use rand::Rng;
use thiserror::Error;

use crate::encoding::ChannelTensor;
use crate::equiattn::{
    preprocess_var, validate_preprocess_config, EquiAttnConfig, EquiAttnError, PreprocessMode,
};
use crate::params::{init_linear, init_normal, zeros, ParamStore, ParamVars};
use crate::tape::{softmax_array, Tape, Var};

#[derive(Debug, Error)]
pub enum DitError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Attn(#[from] EquiAttnError),
}

/// Transformer dimensions.  `classes` counts real class labels; the
/// embedding table gets one extra row for the null (unconditional) class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiTConfig {
    pub d: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub grid: usize,
    pub classes: usize,
    pub t_embed: usize,
}

impl Default for DiTConfig {
    fn default() -> DiTConfig {
        DiTConfig {
            d: 128,
            depth: 6,
            heads: 4,
            patch: 3,
            grid: 9,
            classes: 2,
            t_embed: 128,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<(), DitError> {
        let bad = |msg: String| Err(DitError::Config(msg));
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return bad(format!("hidden dim {} must be even and >= 2", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide dim {}", self.heads, self.d));
        }
        if self.patch == 0 || self.grid == 0 || !self.grid.is_multiple_of(self.patch) {
            return bad(format!(
                "patch {} does not tile grid {}",
                self.patch, self.grid
            ));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.t_embed < 2 || !self.t_embed.is_multiple_of(2) {
            return bad(format!("t_embed {} must be even and >= 2", self.t_embed));
        }
        if self.classes == 0 {
            return bad("need at least one class".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.grid / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// Complete denoiser layout: attention front end plus transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub attn: EquiAttnConfig,
    pub dit: DiTConfig,
    pub mode: PreprocessMode,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            attn: EquiAttnConfig::default(),
            dit: DiTConfig::default(),
            mode: PreprocessMode::Replace,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), DitError> {
        self.attn.validate()?;
        validate_preprocess_config(&self.attn)?;
        self.dit.validate()?;
        if self.attn.c0_in > self.dit.grid {
            return Err(DitError::Config(format!(
                "attention reads {} scalar columns from a grid of side {}",
                self.attn.c0_in, self.dit.grid
            )));
        }
        Ok(())
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        self.validate().expect("invalid model config");
        let mut s = ParamStore::new();
        self.attn.init_into(&mut s, rng, "pre.");
        let d = self.dit.d;
        let pdim = self.dit.patch_dim();
        s.insert("dit.embed_w", init_linear(rng, d, pdim));
        s.insert("dit.embed_b", zeros(&[d]));
        s.insert("dit.temb_w1", init_linear(rng, d, self.dit.t_embed));
        s.insert("dit.temb_b1", zeros(&[d]));
        s.insert("dit.temb_w2", init_linear(rng, d, d));
        s.insert("dit.temb_b2", zeros(&[d]));
        s.insert(
            "dit.class_embed",
            init_normal(rng, &[self.dit.classes + 1, d], 0.02),
        );
        for b in 0..self.dit.depth {
            let pre = format!("dit.block{b}.");
            for name in [
                "mod_scale1",
                "mod_shift1",
                "mod_gate1",
                "mod_scale2",
                "mod_shift2",
                "mod_gate2",
            ] {
                s.insert(&format!("{pre}{name}_w"), zeros(&[d, d]));
                s.insert(&format!("{pre}{name}_b"), zeros(&[d]));
            }
            for name in ["attn_q", "attn_k", "attn_v", "attn_o"] {
                s.insert(&format!("{pre}{name}_w"), init_linear(rng, d, d));
                s.insert(&format!("{pre}{name}_b"), zeros(&[d]));
            }
            s.insert(&format!("{pre}mlp_w1"), init_linear(rng, 4 * d, d));
            s.insert(&format!("{pre}mlp_b1"), zeros(&[4 * d]));
            s.insert(&format!("{pre}mlp_w2"), init_linear(rng, d, 4 * d));
            s.insert(&format!("{pre}mlp_b2"), zeros(&[d]));
        }
        s.insert("dit.decode_w", zeros(&[2 * pdim, d]));
        s.insert("dit.decode_b", zeros(&[2 * pdim]));
        s
    }
}

/// Position code with sin at even and cos at odd components, frequency
/// 10000^(-2i/d).  Injective over any practical index range.
pub fn sinusoidal_encoding(k: usize, d: usize) -> Result<Array1<f64>, DitError> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(DitError::Config(format!("encoding dim {d} must be even")));
    }
    let mut v = Array1::zeros(d);
    for i in 0..d / 2 {
        let angle = k as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        v[2 * i] = angle.sin();
        v[2 * i + 1] = angle.cos();
    }
    Ok(v)
}

/// Reference single-head attention: softmax(Q K^T / sqrt(d_k)) V.
pub fn scaled_dot_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    assert_eq!(q.ncols(), k.ncols(), "query/key width mismatch");
    assert_eq!(k.nrows(), v.nrows(), "key/value count mismatch");
    let scores = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    softmax_array(&scores.into_dyn(), 1)
        .into_dimensionality::<Ix2>()
        .unwrap()
        .dot(v)
}

fn linear_tok(x: &Var, w: &Var, b: Option<&Var>) -> Var {
    let sh = x.shape().to_vec();
    let (bsz, tt, din) = (sh[0], sh[1], sh[2]);
    let dout = w.shape()[0];
    let y = x.reshape(&[bsz * tt, din]).matmul(&w.permute_axes(&[1, 0]));
    let y = match b {
        Some(b) => y.add(b),
        None => y,
    };
    y.reshape(&[bsz, tt, dout])
}

/// Multihead scaled dot attention on [B, T, d] tokens.
fn multihead_attention_var(xq: &Var, xk: &Var, xv: &Var, heads: usize) -> Var {
    let sh = xq.shape().to_vec();
    let (bsz, tt, d) = (sh[0], sh[1], sh[2]);
    let dh = d / heads;
    let split = |x: &Var| {
        x.reshape(&[bsz, tt, heads, dh])
            .permute_axes(&[0, 2, 1, 3])
            .reshape(&[bsz * heads, tt, dh])
    };
    let q = split(xq);
    let k = split(xk);
    let v = split(xv);
    let scores = q
        .batched_matmul(&k.permute_axes(&[0, 2, 1]))
        .mul_scalar(1.0 / (dh as f64).sqrt());
    let a = scores.softmax(2);
    a.batched_matmul(&v)
        .reshape(&[bsz, heads, tt, dh])
        .permute_axes(&[0, 2, 1, 3])
        .reshape(&[bsz, tt, d])
}

/// Pre-norm transformer block whose layer-norm scale/shift and branch gates
/// are regressed from the condition vector; gate regressions start at zero,
/// making the block the identity map at initialization.
pub fn adaln_zero_block(
    tape: &Rc<Tape>,
    p: &ParamVars,
    prefix: &str,
    x: &Var,
    cond: &Var,
    heads: usize,
) -> Var {
    let _ = tape;
    let sh = x.shape().to_vec();
    let (bsz, d) = (sh[0], sh[2]);
    let c = cond.silu();
    let sig = |name: &str| -> Var {
        let w = p.get(&format!("{prefix}{name}_w"));
        let b = p.get(&format!("{prefix}{name}_b"));
        c.matmul(&w.permute_axes(&[1, 0]))
            .add(&b)
            .reshape(&[bsz, 1, d])
    };
    let scale1 = sig("mod_scale1");
    let shift1 = sig("mod_shift1");
    let gate1 = sig("mod_gate1");
    let scale2 = sig("mod_scale2");
    let shift2 = sig("mod_shift2");
    let gate2 = sig("mod_gate2");

    let m1 = x
        .layer_norm_last(1e-6)
        .mul(&scale1.add_scalar(1.0))
        .add(&shift1);
    let q = linear_tok(
        &m1,
        &p.get(&format!("{prefix}attn_q_w")),
        Some(&p.get(&format!("{prefix}attn_q_b"))),
    );
    let k = linear_tok(
        &m1,
        &p.get(&format!("{prefix}attn_k_w")),
        Some(&p.get(&format!("{prefix}attn_k_b"))),
    );
    let v = linear_tok(
        &m1,
        &p.get(&format!("{prefix}attn_v_w")),
        Some(&p.get(&format!("{prefix}attn_v_b"))),
    );
    let attn = multihead_attention_var(&q, &k, &v, heads);
    let attn = linear_tok(
        &attn,
        &p.get(&format!("{prefix}attn_o_w")),
        Some(&p.get(&format!("{prefix}attn_o_b"))),
    );
    let x = x.add(&gate1.mul(&attn));

    let m2 = x
        .layer_norm_last(1e-6)
        .mul(&scale2.add_scalar(1.0))
        .add(&shift2);
    let h = linear_tok(
        &m2,
        &p.get(&format!("{prefix}mlp_w1")),
        Some(&p.get(&format!("{prefix}mlp_b1"))),
    )
    .gelu();
    let h = linear_tok(
        &h,
        &p.get(&format!("{prefix}mlp_w2")),
        Some(&p.get(&format!("{prefix}mlp_b2"))),
    );
    x.add(&gate2.mul(&h))
}

/// Batched denoiser outputs: predicted noise and raw variance signal, both
/// [B, 3, H, H] with masked grid rows exactly zero.
pub struct DitOutput {
    pub eps: Var,
    pub vraw: Var,
}

/// Full forward pass for a batch of molecules in matching x_t states.
pub fn dit_forward_var(
    tape: &Rc<Tape>,
    cfg: &ModelConfig,
    p: &ParamVars,
    xs: &[ChannelTensor],
    steps: &[usize],
    labels: &[Option<u32>],
) -> Result<DitOutput, DitError> {
    cfg.validate()?;
    let bsz = xs.len();
    if bsz == 0 {
        return Err(DitError::Shape("empty batch".into()));
    }
    if steps.len() != bsz || labels.len() != bsz {
        return Err(DitError::Shape(format!(
            "{bsz} tensors with {} steps and {} labels",
            steps.len(),
            labels.len()
        )));
    }
    let hgrid = cfg.dit.grid;
    let pp = cfg.dit.patch;
    let d = cfg.dit.d;
    let g = hgrid / pp;
    let ttok = cfg.dit.tokens();
    let pdim = cfg.dit.patch_dim();
    for x in xs {
        if x.grid_side() != hgrid {
            return Err(DitError::Shape(format!(
                "tensor side {} does not match grid {}",
                x.grid_side(),
                hgrid
            )));
        }
    }
    for c in labels.iter().flatten() {
        if *c as usize >= cfg.dit.classes {
            return Err(DitError::Config(format!(
                "label {c} out of range for {} classes",
                cfg.dit.classes
            )));
        }
    }

    // Equivariant front end per molecule, stacked to [B, 3, H, H].
    let hw = 3 * hgrid * hgrid;
    let mut stacked: Option<Var> = None;
    for (b, x) in xs.iter().enumerate() {
        let (pre, _) = preprocess_var(tape, &cfg.attn, p, "pre.", x, cfg.mode)?;
        let map: Vec<usize> = (0..hw).map(|i| b * hw + i).collect();
        let s = pre
            .reshape(&[hw])
            .scatter_flat(Rc::new(map), &[bsz, 3, hgrid, hgrid]);
        stacked = Some(match stacked {
            Some(acc) => acc.add(&s),
            None => s,
        });
    }
    let full = stacked.unwrap();

    // Patch tokens: channel-major, then row-major inside the patch.
    let mut pmap = Vec::with_capacity(bsz * ttok * pdim);
    for b in 0..bsz {
        for tok in 0..ttok {
            let (gr, gc) = (tok / g, tok % g);
            for dim in 0..pdim {
                let ch = dim / (pp * pp);
                let rem = dim % (pp * pp);
                let (r, q) = (rem / pp, rem % pp);
                pmap.push(((b * 3 + ch) * hgrid + gr * pp + r) * hgrid + gc * pp + q);
            }
        }
    }
    let tokens_raw = full.gather_flat(Rc::new(pmap), &[bsz, ttok, pdim]);

    let x0 = linear_tok(
        &tokens_raw,
        &p.get("dit.embed_w"),
        Some(&p.get("dit.embed_b")),
    );
    let mut pos = Array2::zeros((ttok, d));
    for t in 0..ttok {
        pos.row_mut(t).assign(&sinusoidal_encoding(t, d)?);
    }
    let mut h = x0.add(&tape.constant(pos.into_dyn()));

    // Condition: learned map of the sinusoidal timestep code plus a class
    // embedding row (last row = null class).
    let mut sin_t = Array2::zeros((bsz, cfg.dit.t_embed));
    for (b, &s) in steps.iter().enumerate() {
        sin_t
            .row_mut(b)
            .assign(&sinusoidal_encoding(s, cfg.dit.t_embed)?);
    }
    let temb = tape
        .constant(sin_t.into_dyn())
        .matmul(&p.get("dit.temb_w1").permute_axes(&[1, 0]))
        .add(&p.get("dit.temb_b1"))
        .silu()
        .matmul(&p.get("dit.temb_w2").permute_axes(&[1, 0]))
        .add(&p.get("dit.temb_b2"));
    let mut cmap = Vec::with_capacity(bsz * d);
    for l in labels {
        let row = match l {
            Some(c) => *c as usize,
            None => cfg.dit.classes,
        };
        for j in 0..d {
            cmap.push(row * d + j);
        }
    }
    let cls = p
        .get("dit.class_embed")
        .gather_flat(Rc::new(cmap), &[bsz, d]);
    let cond = temb.add(&cls);

    for blk in 0..cfg.dit.depth {
        h = adaln_zero_block(
            tape,
            p,
            &format!("dit.block{blk}."),
            &h,
            &cond,
            cfg.dit.heads,
        );
    }
    let h = h.layer_norm_last(1e-6);
    let dec = linear_tok(&h, &p.get("dit.decode_w"), Some(&p.get("dit.decode_b")));

    // Undo the patch layout for each output half.
    let unmap = |ch_base: usize| -> Vec<usize> {
        let mut m = Vec::with_capacity(bsz * hw);
        for b in 0..bsz {
            for ch in 0..3 {
                for row in 0..hgrid {
                    for col in 0..hgrid {
                        let tok = (row / pp) * g + col / pp;
                        let dim = (ch_base + ch) * pp * pp + (row % pp) * pp + col % pp;
                        m.push((b * ttok + tok) * (2 * pdim) + dim);
                    }
                }
            }
        }
        m
    };
    let out_shape = [bsz, 3, hgrid, hgrid];
    let eps_raw = dec.gather_flat(Rc::new(unmap(0)), &out_shape);
    let var_raw = dec.gather_flat(Rc::new(unmap(3)), &out_shape);

    let mut mask = ArrayD::zeros(IxDyn(&[bsz, 1, hgrid, 1]));
    for (b, x) in xs.iter().enumerate() {
        for row in 0..hgrid {
            let real = match &x.mask {
                Some(m) => m[row],
                None => row < x.n_atoms,
            };
            if real {
                mask[[b, 0, row, 0]] = 1.0;
            }
        }
    }
    let mask = tape.constant(mask);
    Ok(DitOutput {
        eps: eps_raw.mul(&mask),
        vraw: var_raw.mul(&mask),
    })
}

/// One molecule outside any training graph: returns the noise prediction
/// and the raw variance signal as tensors carrying the input's mask.
pub fn dit_forward(
    cfg: &ModelConfig,
    params: &ParamStore,
    x: &ChannelTensor,
    step: usize,
    label: Option<u32>,
) -> Result<(ChannelTensor, ChannelTensor), DitError> {
    let tape = Tape::new();
    let p = params.bind(&tape, false);
    let out = dit_forward_var(&tape, cfg, &p, std::slice::from_ref(x), &[step], &[label])?;
    let side = cfg.dit.grid;
    let to_tensor = |v: &Var| -> ChannelTensor {
        let a = v
            .value()
            .clone()
            .into_shape_with_order(IxDyn(&[3, side, side]))
            .unwrap()
            .into_dimensionality::<Ix3>()
            .unwrap();
        ChannelTensor {
            data: a,
            mask: x.mask.clone(),
            n_atoms: x.n_atoms,
        }
    };
    Ok((to_tensor(&out.eps), to_tensor(&out.vraw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::encode_molecule;
    use crate::molgraph::{Atom, Bond, Element, Molecule};
    use crate::params::ParamStore;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const VOCAB: [Element; 4] = [Element::C, Element::N, Element::O, Element::F];

    fn sample_tensor(n_max: usize) -> ChannelTensor {
        let m = Molecule::new(
            vec![
                Atom {
                    element: Element::C,
                    position: [0.0, 0.0, 0.0],
                },
                Atom {
                    element: Element::O,
                    position: [1.43, 0.0, 0.0],
                },
                Atom {
                    element: Element::N,
                    position: [-0.7, 1.2, 0.3],
                },
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
        encode_molecule(&m, n_max, &VOCAB).unwrap()
    }

    fn micro_config() -> ModelConfig {
        ModelConfig {
            attn: EquiAttnConfig::default(),
            dit: DiTConfig {
                d: 16,
                depth: 1,
                heads: 2,
                patch: 3,
                grid: 6,
                classes: 2,
                t_embed: 16,
            },
            mode: PreprocessMode::Replace,
        }
    }

    #[test]
    fn sinusoidal_closed_forms_and_errors() {
        let v = sinusoidal_encoding(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(v[2 * i], 0.0);
            assert_eq!(v[2 * i + 1], 1.0);
        }
        let v = sinusoidal_encoding(1, 2).unwrap();
        assert!((v[0] - 1f64.sin()).abs() < 1e-15);
        assert!((v[1] - 1f64.cos()).abs() < 1e-15);
        assert!(sinusoidal_encoding(3, 7).is_err());
        assert!(sinusoidal_encoding(3, 0).is_err());
    }

    #[test]
    fn sinusoidal_is_injective_over_the_step_range() {
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..1000 {
            let v = sinusoidal_encoding(k, 16).unwrap();
            let bytes: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(bytes), "position code collision at {k}");
        }
    }

    #[test]
    fn attention_uniform_when_keys_coincide_and_passthrough_for_singleton() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let q = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let k = Array2::from_elem((5, 4), 0.37);
        let v = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
        let out = scaled_dot_attention(&q, &k, &v);
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let q1 = Array2::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0));
        let k1 = Array2::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0));
        let v1 = Array2::from_shape_fn((1, 6), |_| rng.gen_range(-1.0..1.0));
        let out1 = scaled_dot_attention(&q1, &k1, &v1);
        assert_eq!(out1, v1);
    }

    #[test]
    fn attention_matches_a_two_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let k = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let v = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let got = scaled_dot_attention(&q, &k, &v);

        let scale = 1.0 / (4f64).sqrt();
        for i in 0..3 {
            let mut weights = [0.0; 3];
            for j in 0..3 {
                let mut dot = 0.0;
                for t in 0..4 {
                    dot += q[[i, t]] * k[[j, t]];
                }
                weights[j] = (dot * scale).exp();
            }
            let z: f64 = weights.iter().sum();
            for c in 0..5 {
                let mut want = 0.0;
                for j in 0..3 {
                    want += weights[j] / z * v[[j, c]];
                }
                assert!((got[[i, c]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_multihead_matches_per_head_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (bsz, tt, d, heads) = (2, 3, 8, 2);
        let dh = d / heads;
        let mk = |rng: &mut ChaCha8Rng| {
            ArrayD::from_shape_fn(IxDyn(&[bsz, tt, d]), |_| rng.gen_range(-1.0..1.0))
        };
        let (qa, ka, va) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let tape = Tape::new();
        let out = multihead_attention_var(
            &tape.constant(qa.clone()),
            &tape.constant(ka.clone()),
            &tape.constant(va.clone()),
            heads,
        );
        for b in 0..bsz {
            for hidx in 0..heads {
                let slice = |a: &ArrayD<f64>| {
                    Array2::from_shape_fn((tt, dh), |(t, c)| a[[b, t, hidx * dh + c]])
                };
                let want = scaled_dot_attention(&slice(&qa), &slice(&ka), &slice(&va));
                for t in 0..tt {
                    for c in 0..dh {
                        let got = out.value()[[b, t, hidx * dh + c]];
                        assert!((got - want[[t, c]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn fresh_block_is_the_identity() {
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let store = cfg.init_params(&mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 4, 16]), |_| rng.gen_range(-1.0..1.0));
        let cond = ArrayD::from_shape_fn(IxDyn(&[2, 16]), |_| rng.gen_range(-1.0..1.0));
        let xv = tape.constant(x.clone());
        let cv = tape.constant(cond);
        let out = adaln_zero_block(&tape, &p, "dit.block0.", &xv, &cv, 2);
        assert_eq!(out.value(), &x);
    }

    #[test]
    fn conditioning_is_live_once_gates_open() {
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut store = cfg.init_params(&mut rng);
        for name in store.names().cloned().collect::<Vec<_>>() {
            if name.contains("mod_") {
                let a = store.get_mut(&name);
                *a = crate::params::init_normal(&mut rng, a.shape(), 0.1);
            }
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 4, 16]), |_| rng.gen_range(-1.0..1.0));
        let c1 = ArrayD::from_shape_fn(IxDyn(&[1, 16]), |_| rng.gen_range(-1.0..1.0));
        let c2 = ArrayD::from_shape_fn(IxDyn(&[1, 16]), |_| rng.gen_range(-1.0..1.0));
        let xv = tape.constant(x);
        let o1 = adaln_zero_block(&tape, &p, "dit.block0.", &xv, &tape.constant(c1), 2);
        let o2 = adaln_zero_block(&tape, &p, "dit.block0.", &xv, &tape.constant(c2), 2);
        let diff = o1
            .value()
            .iter()
            .zip(o2.value().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-8, "condition vector had no effect");
    }

    #[test]
    fn fresh_model_outputs_exact_zeros_with_correct_shapes() {
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let store = cfg.init_params(&mut rng);
        let x = sample_tensor(6);
        let (eps, vraw) = dit_forward(&cfg, &store, &x, 3, Some(1)).unwrap();
        assert_eq!(eps.data.shape(), [3, 6, 6]);
        assert_eq!(vraw.data.shape(), [3, 6, 6]);
        assert!(eps.data.iter().all(|&v| v == 0.0));
        assert!(vraw.data.iter().all(|&v| v == 0.0));
    }

    /// Copies with nonzero decode/modulation so outputs and conditioning
    /// actually move.
    fn livened_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = cfg.init_params(&mut rng);
        for name in store.names().cloned().collect::<Vec<_>>() {
            if name.contains("mod_") || name.starts_with("dit.decode") {
                let a = store.get_mut(&name);
                *a = crate::params::init_normal(&mut rng, a.shape(), 0.1);
            }
        }
        store
    }

    #[test]
    fn forward_is_deterministic_and_masks_output_rows() {
        let cfg = micro_config();
        let store = livened_params(&cfg, 47);
        let x = sample_tensor(6);
        let (eps1, v1) = dit_forward(&cfg, &store, &x, 2, None).unwrap();
        let (eps2, v2) = dit_forward(&cfg, &store, &x, 2, None).unwrap();
        assert_eq!(eps1.data, eps2.data);
        assert_eq!(v1.data, v2.data);

        // 3 real atoms in a 6-grid: rows 3.. must be exactly zero.
        for ch in 0..3 {
            for row in 3..6 {
                for col in 0..6 {
                    assert_eq!(eps1.data[[ch, row, col]], 0.0);
                    assert_eq!(v1.data[[ch, row, col]], 0.0);
                }
            }
        }
        let live: f64 = eps1
            .data
            .slice(ndarray::s![.., 0..3, ..])
            .iter()
            .map(|v| v.abs())
            .sum();
        assert!(live > 1e-9, "real rows unexpectedly all zero");
    }

    #[test]
    fn batch_rows_match_individual_forwards() {
        let cfg = micro_config();
        let store = livened_params(&cfg, 48);
        let xa = sample_tensor(6);
        let mut xb = sample_tensor(6);
        xb.data[[0, 1, 0]] += 0.4;
        xb.data[[2, 0, 1]] = 2.0;

        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let out = dit_forward_var(
            &tape,
            &cfg,
            &p,
            &[xa.clone(), xb.clone()],
            &[1, 5],
            &[Some(0), None],
        )
        .unwrap();
        let (ea, _) = dit_forward(&cfg, &store, &xa, 1, Some(0)).unwrap();
        let (eb, _) = dit_forward(&cfg, &store, &xb, 5, None).unwrap();
        for ch in 0..3 {
            for r in 0..6 {
                for c in 0..6 {
                    assert!((out.eps.value()[[0, ch, r, c]] - ea.data[[ch, r, c]]).abs() < 1e-12);
                    assert!((out.eps.value()[[1, ch, r, c]] - eb.data[[ch, r, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_and_labels_are_rejected() {
        let mut cfg = micro_config();
        cfg.dit.heads = 3; // does not divide 16
        assert!(cfg.validate().is_err());
        cfg = micro_config();
        cfg.dit.grid = 7; // patch 3 does not tile
        assert!(cfg.validate().is_err());
        cfg = micro_config();
        cfg.dit.d = 15;
        assert!(cfg.validate().is_err());

        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let store = cfg.init_params(&mut rng);
        let x = sample_tensor(6);
        assert!(matches!(
            dit_forward(&cfg, &store, &x, 0, Some(2)),
            Err(DitError::Config(_))
        ));
    }

    #[test]
    fn micro_end_to_end_gradients_match_finite_differences() {
        let cfg = micro_config();
        let store = livened_params(&cfg, 50);
        let x = sample_tensor(6);
        let steps = [4usize];
        let labels = [Some(1u32)];

        let names: Vec<String> = store.names().cloned().collect();
        let arrays: Vec<ArrayD<f64>> = names.iter().map(|n| store.get(n).clone()).collect();
        let loss_of = |arrs: &[ArrayD<f64>]| -> f64 {
            let mut s = ParamStore::new();
            for (n, a) in names.iter().zip(arrs) {
                s.insert(n, a.clone());
            }
            let tape = Tape::new();
            let p = s.bind(&tape, false);
            let out = dit_forward_var(&tape, &cfg, &p, std::slice::from_ref(&x), &steps, &labels)
                .unwrap();
            out.eps.square().sum_all().value()[[]] + out.vraw.square().sum_all().value()[[]]
        };

        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let out =
            dit_forward_var(&tape, &cfg, &p, std::slice::from_ref(&x), &steps, &labels).unwrap();
        let loss = out.eps.square().sum_all().add(&out.vraw.square().sum_all());
        let grads = tape.backward(&loss);

        // Probe a spread of coordinates across every parameter kind instead
        // of differencing all ~20k entries.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut worst = 0.0f64;
        for (pi, name) in names.iter().enumerate() {
            let g = grads.wrt(&p.get(name));
            let len = arrays[pi].len();
            for _ in 0..3.min(len) {
                let flat = rng.gen_range(0..len);
                let eps = 1e-5;
                let mut plus = arrays.clone();
                let mut minus = arrays.clone();
                plus[pi].as_slice_mut().unwrap()[flat] += eps;
                minus[pi].as_slice_mut().unwrap()[flat] -= eps;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let analytic = g.as_slice().unwrap()[flat];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                worst = worst.max(err);
                assert!(
                    err <= 1e-3,
                    "{name}[{flat}]: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
        assert!(worst < 1e-3);
    }
}
