//! Denoising diffusion over molecule tensors: the noise schedule, forward
//! noising, the hybrid training loss, and the ancestral sampler.
//!
//! Steps are zero-based: index t in [0, T) holds the coefficients usually
//! written with subscript t+1.  An entry of a tensor is "live" when its grid
//! row belongs to a real atom; everything else is pinned to zero through
//! training and sampling.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dit::{dit_forward, dit_forward_var, DitError, DitOutput, ModelConfig};
use crate::encoding::{decode_tensor, ChannelTensor};
use crate::molgraph::{add_hydrogens, infer_bonds, BondMode, Element, Molecule};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("bad schedule: {0}")]
    Config(String),
    #[error("step {step} outside schedule of length {t_max}")]
    StepRange { step: usize, t_max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no sizes to sample from")]
    EmptySizes,
    #[error("molecule size {size} exceeds grid side {grid}")]
    SizeExceedsGrid { size: usize, grid: usize },
    #[error(transparent)]
    Model(#[from] DitError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

/// Precomputed schedule coefficients, all of length T.
///
/// `posterior[0]` is identically zero (conditioning on x_0 leaves no
/// variance at the first step); `posterior_clipped` replaces that entry with
/// the next one so its logarithm is usable in the variance interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior: Vec<f64>,
    pub posterior_clipped: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_step(&self, step: usize) -> Result<(), DiffusionError> {
        if step >= self.len() {
            return Err(DiffusionError::StepRange {
                step,
                t_max: self.len(),
            });
        }
        Ok(())
    }
}

pub fn make_schedule(
    kind: ScheduleKind,
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule, DiffusionError> {
    let ScheduleKind::Linear = kind;
    if t_max == 0 {
        return Err(DiffusionError::Config("need at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|t| {
            if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let mut posterior = vec![0.0; t_max];
    for t in 1..t_max {
        posterior[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
    }
    let mut posterior_clipped = posterior.clone();
    posterior_clipped[0] = if t_max > 1 { posterior[1] } else { beta[0] };
    Ok(DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        posterior,
        posterior_clipped,
    })
}

/// True for grid rows holding real atoms.
pub fn live_rows(x: &ChannelTensor) -> Vec<bool> {
    let side = x.grid_side();
    match &x.mask {
        Some(m) => m.clone(),
        None => (0..side).map(|r| r < x.n_atoms).collect(),
    }
}

/// 1.0 on every entry of a live row, 0.0 elsewhere, all channels.
pub fn live_mask(x: &ChannelTensor) -> Array3<f64> {
    let side = x.grid_side();
    let rows = live_rows(x);
    Array3::from_shape_fn((3, side, side), |(_, r, _)| if rows[r] { 1.0 } else { 0.0 })
}

/// Standard normal on live entries (row-major draw order), zero elsewhere.
pub fn sample_noise<R: Rng>(x: &ChannelTensor, rng: &mut R) -> Array3<f64> {
    let side = x.grid_side();
    let rows = live_rows(x);
    let mut out = Array3::zeros((3, side, side));
    for c in 0..3 {
        for r in 0..side {
            if !rows[r] {
                continue;
            }
            for q in 0..side {
                out[[c, r, q]] = rng.sample(StandardNormal);
            }
        }
    }
    out
}

/// Closed-form forward marginal x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps.
pub fn q_sample(
    x0: &ChannelTensor,
    t: usize,
    eps: &Array3<f64>,
    s: &DiffusionSchedule,
) -> Result<ChannelTensor, DiffusionError> {
    s.check_step(t)?;
    if eps.shape() != x0.data.shape() {
        return Err(DiffusionError::Shape(format!(
            "noise shape {:?} vs tensor {:?}",
            eps.shape(),
            x0.data.shape()
        )));
    }
    let a = s.alpha_bar[t].sqrt();
    let b = (1.0 - s.alpha_bar[t]).sqrt();
    let mut data = &x0.data * a + eps * b;
    data *= &live_mask(x0);
    Ok(ChannelTensor {
        data,
        mask: x0.mask.clone(),
        n_atoms: x0.n_atoms,
    })
}

/// Loss value split into its two summands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// Per-molecule coefficients shared by both loss routes.
struct LossCoeffs {
    inv_sqrt_alpha: f64,
    eps_coeff: f64,
    log_beta: f64,
    log_clip: f64,
    /// Variance of the target distribution (posterior beta-tilde), zero for
    /// the t = 0 likelihood term.
    q_var: f64,
    /// Additive constant: -ln(beta-tilde) - 1 for the KL, ln(2 pi) for the
    /// t = 0 term.
    r_const: f64,
}

fn loss_coeffs(t: usize, s: &DiffusionSchedule) -> LossCoeffs {
    let bt = s.beta[t];
    let abar = s.alpha_bar[t];
    LossCoeffs {
        inv_sqrt_alpha: 1.0 / s.alpha[t].sqrt(),
        eps_coeff: bt / (1.0 - abar).sqrt(),
        log_beta: bt.ln(),
        log_clip: s.posterior_clipped[t].ln(),
        q_var: if t > 0 { s.posterior[t] } else { 0.0 },
        r_const: if t > 0 {
            -s.posterior[t].ln() - 1.0
        } else {
            (2.0 * std::f64::consts::PI).ln()
        },
    }
}

/// Mean of the true posterior q(x_{t-1} | x_t, x_0) for t > 0, or x_0
/// itself at t = 0 (the target of the decoder likelihood).
fn target_mean(x0: &Array3<f64>, xt: &Array3<f64>, t: usize, s: &DiffusionSchedule) -> Array3<f64> {
    if t == 0 {
        return x0.clone();
    }
    let bt = s.beta[t];
    let abar = s.alpha_bar[t];
    let abar_prev = s.alpha_bar[t - 1];
    let c0 = abar_prev.sqrt() * bt / (1.0 - abar);
    let ct = s.alpha[t].sqrt() * (1.0 - abar_prev) / (1.0 - abar);
    x0 * c0 + xt * ct
}

/// Training objective for one molecule: masked mean squared error on the
/// noise prediction plus the variance-fitting term (KL to the true
/// posterior for t > 0, Gaussian log-likelihood of x_0 at t = 0).  The
/// model mean inside the second term uses the detached noise prediction,
/// so that term only trains the variance output.
pub fn hybrid_loss(
    x0: &ChannelTensor,
    t: usize,
    eps: &Array3<f64>,
    eps_hat: &Array3<f64>,
    vraw: &Array3<f64>,
    s: &DiffusionSchedule,
) -> Result<LossParts, DiffusionError> {
    s.check_step(t)?;
    let xt = q_sample(x0, t, eps, s)?;
    let mask = live_mask(x0);
    let n_live: f64 = mask.sum();
    if n_live == 0.0 {
        return Err(DiffusionError::Shape("no live entries".into()));
    }
    let co = loss_coeffs(t, s);
    let mstar = target_mean(&x0.data, &xt.data, t, s);

    let mut mse = 0.0;
    let mut kl = 0.0;
    for (idx, &m) in mask.indexed_iter() {
        if m == 0.0 {
            continue;
        }
        let d = eps_hat[idx] - eps[idx];
        mse += d * d;
        let v = 1.0 / (1.0 + (-vraw[idx]).exp());
        let log_sig = v * co.log_beta + (1.0 - v) * co.log_clip;
        let sig = log_sig.exp();
        let mu = co.inv_sqrt_alpha * (xt.data[idx] - co.eps_coeff * eps_hat[idx]);
        let dm = mstar[idx] - mu;
        kl += 0.5 * (log_sig + (co.q_var + dm * dm) / sig + co.r_const);
    }
    mse /= n_live;
    kl /= n_live;
    Ok(LossParts {
        total: mse + kl,
        mse,
        kl,
    })
}

/// Batched tape loss: per-molecule means, averaged over the batch.
pub struct HybridLoss {
    pub total: Var,
    pub mse: f64,
    pub kl: f64,
}

pub fn hybrid_loss_var(
    tape: &Rc<Tape>,
    xs0: &[ChannelTensor],
    ts: &[usize],
    noises: &[Array3<f64>],
    out: &DitOutput,
    s: &DiffusionSchedule,
) -> Result<HybridLoss, DiffusionError> {
    let bsz = xs0.len();
    if bsz == 0 || ts.len() != bsz || noises.len() != bsz {
        return Err(DiffusionError::Shape("batch length mismatch".into()));
    }
    let side = xs0[0].grid_side();
    let full = [bsz, 3, side, side];
    let scal = [bsz, 1, 1, 1];
    let mut xt_a = ArrayD::zeros(IxDyn(&full));
    let mut eps_a = ArrayD::zeros(IxDyn(&full));
    let mut mstar_a = ArrayD::zeros(IxDyn(&full));
    let mut w_a = ArrayD::zeros(IxDyn(&full));
    let mut c1_a = ArrayD::zeros(IxDyn(&scal));
    let mut c2_a = ArrayD::zeros(IxDyn(&scal));
    let mut lb_a = ArrayD::zeros(IxDyn(&scal));
    let mut lc_a = ArrayD::zeros(IxDyn(&scal));
    let mut q_a = ArrayD::zeros(IxDyn(&scal));
    let mut r_a = ArrayD::zeros(IxDyn(&scal));

    for (b, x0) in xs0.iter().enumerate() {
        let t = ts[b];
        s.check_step(t)?;
        let xt = q_sample(x0, t, &noises[b], s)?;
        let mask = live_mask(x0);
        let n_live = mask.sum();
        if n_live == 0.0 {
            return Err(DiffusionError::Shape(format!(
                "molecule {b} has no live entries"
            )));
        }
        let co = loss_coeffs(t, s);
        let mstar = target_mean(&x0.data, &xt.data, t, s);
        for (idx, &m) in mask.indexed_iter() {
            let (c, r, q) = idx;
            xt_a[[b, c, r, q]] = xt.data[idx];
            eps_a[[b, c, r, q]] = noises[b][idx];
            mstar_a[[b, c, r, q]] = mstar[idx];
            w_a[[b, c, r, q]] = m / (n_live * bsz as f64);
        }
        c1_a[[b, 0, 0, 0]] = co.inv_sqrt_alpha;
        c2_a[[b, 0, 0, 0]] = co.eps_coeff;
        lb_a[[b, 0, 0, 0]] = co.log_beta;
        lc_a[[b, 0, 0, 0]] = co.log_clip;
        q_a[[b, 0, 0, 0]] = co.q_var;
        r_a[[b, 0, 0, 0]] = co.r_const;
    }

    let xt = tape.constant(xt_a);
    let eps = tape.constant(eps_a);
    let mstar = tape.constant(mstar_a);
    let w = tape.constant(w_a);
    let c1 = tape.constant(c1_a);
    let c2 = tape.constant(c2_a);
    let lb = tape.constant(lb_a);
    let lc = tape.constant(lc_a);
    let qv = tape.constant(q_a);
    let rc = tape.constant(r_a);

    let mse = out.eps.sub(&eps).square().mul(&w).sum_all();

    let v = out.vraw.sigmoid();
    let one_minus_v = v.neg().add_scalar(1.0);
    let log_sig = v.mul(&lb).add(&one_minus_v.mul(&lc));
    let sig = log_sig.exp();
    let mu = xt.sub(&c2.mul(&out.eps.stop_grad())).mul(&c1);
    let dm = mstar.sub(&mu).square();
    let kl = log_sig
        .add(&qv.add(&dm).div(&sig))
        .add(&rc)
        .mul_scalar(0.5)
        .mul(&w)
        .sum_all();

    let mse_val = mse.value()[[]];
    let kl_val = kl.value()[[]];
    Ok(HybridLoss {
        total: mse.add(&kl),
        mse: mse_val,
        kl: kl_val,
    })
}

/// Anything that can predict (noise, raw variance) for an x_t state.
pub trait DenoiseModel {
    fn predict(
        &self,
        x: &ChannelTensor,
        step: usize,
        label: Option<u32>,
    ) -> Result<(ChannelTensor, ChannelTensor), DitError>;

    /// Batch hook so lockstep sampling chains can share one forward pass.
    fn predict_batch(
        &self,
        xs: &[ChannelTensor],
        steps: &[usize],
        labels: &[Option<u32>],
    ) -> Result<Vec<(ChannelTensor, ChannelTensor)>, DitError> {
        xs.iter()
            .zip(steps)
            .zip(labels)
            .map(|((x, &t), &l)| self.predict(x, t, l))
            .collect()
    }
}

/// The transformer denoiser acting through frozen parameters.
pub struct DitModel<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
}

impl DenoiseModel for DitModel<'_> {
    fn predict(
        &self,
        x: &ChannelTensor,
        step: usize,
        label: Option<u32>,
    ) -> Result<(ChannelTensor, ChannelTensor), DitError> {
        dit_forward(self.cfg, self.params, x, step, label)
    }

    fn predict_batch(
        &self,
        xs: &[ChannelTensor],
        steps: &[usize],
        labels: &[Option<u32>],
    ) -> Result<Vec<(ChannelTensor, ChannelTensor)>, DitError> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = dit_forward_var(&tape, self.cfg, &p, xs, steps, labels)?;
        let side = self.cfg.dit.grid;
        let eps = out.eps.value();
        let vraw = out.vraw.value();
        let mut res = Vec::with_capacity(xs.len());
        for (b, x) in xs.iter().enumerate() {
            let pick = |src: &ArrayD<f64>| -> ChannelTensor {
                ChannelTensor {
                    data: Array3::from_shape_fn((3, side, side), |(c, r, q)| src[[b, c, r, q]]),
                    mask: x.mask.clone(),
                    n_atoms: x.n_atoms,
                }
            };
            res.push((pick(eps), pick(vraw)));
        }
        Ok(res)
    }
}

/// One reverse-process update given the model outputs.  Gauss noise is
/// drawn over live entries in row-major order; `step == 0` (the final
/// update) adds none.
pub fn posterior_step<R: Rng>(
    x: &ChannelTensor,
    step: usize,
    eps_hat: &Array3<f64>,
    vraw: &Array3<f64>,
    s: &DiffusionSchedule,
    rng: &mut R,
) -> Result<ChannelTensor, DiffusionError> {
    s.check_step(step)?;
    if eps_hat.shape() != x.data.shape() || vraw.shape() != x.data.shape() {
        return Err(DiffusionError::Shape("model output shape mismatch".into()));
    }
    let co = loss_coeffs(step, s);
    let side = x.grid_side();
    let rows = live_rows(x);
    let mut data = Array3::zeros((3, side, side));
    for c in 0..3 {
        for r in 0..side {
            if !rows[r] {
                continue;
            }
            for q in 0..side {
                let idx = (c, r, q);
                let mu = co.inv_sqrt_alpha * (x.data[idx] - co.eps_coeff * eps_hat[idx]);
                let out = if step > 0 {
                    let v = 1.0 / (1.0 + (-vraw[idx]).exp());
                    let log_sig = v * co.log_beta + (1.0 - v) * co.log_clip;
                    let xi: f64 = rng.sample(StandardNormal);
                    mu + (0.5 * log_sig).exp() * xi
                } else {
                    mu
                };
                data[idx] = out;
            }
        }
    }
    Ok(ChannelTensor {
        data,
        mask: x.mask.clone(),
        n_atoms: x.n_atoms,
    })
}

/// One reverse step through a model.
pub fn p_sample_step<M: DenoiseModel, R: Rng>(
    x: &ChannelTensor,
    step: usize,
    model: &M,
    s: &DiffusionSchedule,
    label: Option<u32>,
    rng: &mut R,
) -> Result<ChannelTensor, DiffusionError> {
    let (eps_hat, vraw) = model.predict(x, step, label)?;
    posterior_step(x, step, &eps_hat.data, &vraw.data, s, rng)
}

/// Empirical heavy-atom count distribution, kept per class with a pooled
/// fallback for unseen labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SizeSampler {
    by_class: BTreeMap<Option<u32>, BTreeMap<usize, usize>>,
    pooled: BTreeMap<usize, usize>,
}

impl SizeSampler {
    pub fn from_labeled_counts(
        items: &[(Option<u32>, usize)],
    ) -> Result<SizeSampler, DiffusionError> {
        let mut out = SizeSampler::default();
        for &(label, size) in items {
            if size == 0 {
                continue;
            }
            *out.by_class
                .entry(label)
                .or_default()
                .entry(size)
                .or_insert(0) += 1;
            *out.pooled.entry(size).or_insert(0) += 1;
        }
        if out.pooled.is_empty() {
            return Err(DiffusionError::EmptySizes);
        }
        Ok(out)
    }

    pub fn from_molecules(mols: &[Molecule]) -> Result<SizeSampler, DiffusionError> {
        let items: Vec<(Option<u32>, usize)> = mols
            .iter()
            .map(|m| (m.class_label, m.heavy_atom_count()))
            .collect();
        SizeSampler::from_labeled_counts(&items)
    }

    /// (label, size, count) rows in deterministic order, for persistence.
    pub fn entries(&self) -> Vec<(Option<u32>, usize, usize)> {
        self.by_class
            .iter()
            .flat_map(|(label, hist)| hist.iter().map(|(&s, &c)| (*label, s, c)))
            .collect()
    }

    pub fn from_entries(
        rows: &[(Option<u32>, usize, usize)],
    ) -> Result<SizeSampler, DiffusionError> {
        let mut items = Vec::new();
        for &(label, size, count) in rows {
            for _ in 0..count {
                items.push((label, size));
            }
        }
        SizeSampler::from_labeled_counts(&items)
    }

    pub fn max_size(&self) -> usize {
        self.pooled.keys().copied().max().unwrap_or(0)
    }

    pub fn sample<R: Rng>(&self, label: Option<u32>, rng: &mut R) -> usize {
        let hist = self
            .by_class
            .get(&label)
            .filter(|h| !h.is_empty())
            .unwrap_or(&self.pooled);
        let total: usize = hist.values().sum();
        let mut pick = rng.gen_range(0..total);
        for (&size, &count) in hist {
            if pick < count {
                return size;
            }
            pick -= count;
        }
        unreachable!("histogram totals are consistent")
    }
}

/// Decoding and backend choices for generation.
#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub grid: usize,
    pub vocab: Vec<Element>,
    pub bond_mode: BondMode,
    /// Chains advanced in lockstep per model call.
    pub batch: usize,
}

/// Runs `n` independent reverse chains and decodes each endpoint into a
/// hydrogenated molecule.  Each chain gets its own stream seeded from
/// `rng`, so results do not depend on the batch split.
pub fn generate<M: DenoiseModel>(
    n: usize,
    label: Option<u32>,
    sizes: &SizeSampler,
    model: &M,
    s: &DiffusionSchedule,
    opts: &GenerateOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Molecule>, DiffusionError> {
    let mut chains = Vec::with_capacity(n);
    for _ in 0..n {
        let size = sizes.sample(label, rng);
        if size > opts.grid {
            return Err(DiffusionError::SizeExceedsGrid {
                size,
                grid: opts.grid,
            });
        }
        let seed = rng.gen::<u64>();
        chains.push((size, ChaCha8Rng::seed_from_u64(seed)));
    }

    let mut out = Vec::with_capacity(n);
    let batch = opts.batch.max(1);
    for chunk in chains.chunks_mut(batch) {
        let mut xs: Vec<ChannelTensor> = chunk
            .iter_mut()
            .map(|(size, crng)| {
                let mut x = ChannelTensor::zeros(opts.grid, *size);
                x.data = sample_noise(&x, crng);
                x
            })
            .collect();
        for step in (0..s.len()).rev() {
            let steps = vec![step; xs.len()];
            let labels = vec![label; xs.len()];
            let preds = model.predict_batch(&xs, &steps, &labels)?;
            for ((x, (eps_hat, vraw)), (_, crng)) in xs.iter_mut().zip(preds).zip(chunk.iter_mut())
            {
                *x = posterior_step(x, step, &eps_hat.data, &vraw.data, s, crng)?;
            }
        }
        for x in &xs {
            let decoded = decode_tensor(x, &opts.vocab);
            let bonded = infer_bonds(&decoded, opts.bond_mode);
            let mut hydrogenated = add_hydrogens(&bonded);
            hydrogenated.class_label = label;
            out.push(hydrogenated);
        }
    }
    Ok(out)
}
