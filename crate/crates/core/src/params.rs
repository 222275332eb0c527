//! Named parameter arrays, initialization, the Adam optimizer, and the
//! optional exponential moving average.
//!
//! Parameters live in f64 for training but are snapped to f32-representable
//! values after every update, so checkpoints (f32 body) reload losslessly.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};

/// Ordered name -> array map.  Iteration order is the sorted name order,
/// which fixes the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    /// Rounds every value to the nearest f32, keeping storage in f64.
    pub fn snap_to_f32(&mut self) {
        for a in self.map.values_mut() {
            a.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Registers every parameter on a tape.  `trainable` chooses leaves
    /// (gradients tracked) versus constants (inference).
    pub fn bind(&self, tape: &Rc<Tape>, trainable: bool) -> ParamVars {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        ParamVars { map }
    }
}

/// Tape handles for every parameter of one forward/backward pass.
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
            .clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Kaiming-style normal init for a linear map stored as [out, in].
pub fn init_linear(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> ArrayD<f64> {
    let std = (1.0 / in_dim.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(&[out_dim, in_dim]), |_| dist.sample(rng))
}

pub fn init_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Adam with bias correction; state keyed by parameter name.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update from per-name gradients, then snaps parameters to
    /// f32 grid so checkpoints round-trip exactly.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        params.snap_to_f32();
    }
}

/// Exponential moving average of parameters, enabled by config flag.
pub struct Ema {
    pub decay: f64,
    shadow: ParamStore,
}

impl Ema {
    pub fn new(params: &ParamStore, decay: f64) -> Ema {
        Ema {
            decay,
            shadow: params.clone(),
        }
    }

    pub fn update(&mut self, params: &ParamStore) {
        for (name, value) in params.iter() {
            let s = self.shadow.get_mut(name);
            ndarray::Zip::from(s).and(value).for_each(|s, &v| {
                *s = self.decay * *s + (1.0 - self.decay) * v;
            });
        }
    }

    /// Snapshot for evaluation/checkpointing (snapped to the f32 grid like
    /// live parameters).
    pub fn snapshot(&self) -> ParamStore {
        let mut out = self.shadow.clone();
        out.snap_to_f32();
        out
    }
}
