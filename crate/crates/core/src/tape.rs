//! Reverse-mode automatic differentiation over dynamic-rank f64 arrays.
//!
//! A [`Tape`] records every operation as a node; [`Tape::backward`] replays
//! the nodes in reverse and accumulates adjoints.  Values are shared through
//! `Rc`, so cloning a [`Var`] or capturing values in backward closures is
//! cheap.  Nodes whose inputs carry no gradient skip the backward closure
//! entirely, which keeps inference-only passes light.
//!
//! Everything is single threaded; the training loop builds one tape per step
//! and drops it afterwards.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn};

type Value = Rc<ArrayD<f64>>;
type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Adjoint accumulator passed to backward closures.
pub struct GradSink {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradSink {
    fn accumulate(&mut self, id: usize, contrib: ArrayD<f64>) {
        match &mut self.grads[id] {
            Some(g) => *g += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }
}

/// Recorded computation graph.  Create variables with [`Tape::leaf`] (tracked)
/// or [`Tape::constant`] (untracked), combine them with the methods on
/// [`Var`], then call [`Tape::backward`] on a scalar node.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Rc<Tape>,
    id: usize,
    value: Value,
    needs_grad: bool,
}

/// Gradients of one scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, zeros if the variable never influenced the loss.
    pub fn wrt(&self, var: &Var) -> ArrayD<f64> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| ArrayD::zeros(var.value.shape()))
    }
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape::default())
    }

    fn push(
        self: &Rc<Self>,
        value: ArrayD<f64>,
        needs_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let value = Rc::new(value);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            needs_grad,
            backward: if needs_grad { backward } else { None },
        });
        Var {
            tape: self.clone(),
            id,
            value,
            needs_grad,
        }
    }

    /// Tracked input; gradients are available for it after `backward`.
    pub fn leaf(self: &Rc<Self>, value: ArrayD<f64>) -> Var {
        self.push(value, true, None)
    }

    /// Untracked input.
    pub fn constant(self: &Rc<Self>, value: ArrayD<f64>) -> Var {
        self.push(value, false, None)
    }

    /// Backpropagate from a scalar (single element) node.
    pub fn backward(self: &Rc<Self>, loss: &Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            loss.value.len(),
            1,
            "backward start node must hold a single element"
        );
        let mut sink = GradSink {
            grads: vec![None; nodes.len()],
        };
        sink.grads[loss.id] = Some(ArrayD::ones(loss.value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = sink.grads[id].take() else {
                continue;
            };
            if let Some(back) = &nodes[id].backward {
                back(&g, &mut sink);
            }
            if nodes[id].needs_grad {
                sink.grads[id] = Some(g);
            }
        }
        Gradients { grads: sink.grads }
    }
}

/// Broadcast result shape of two operand shapes, numpy alignment rules.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} and {b:?}"
        );
        out.push(da.max(db));
    }
    out
}

fn broadcast_to(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if a.shape() == shape {
        return a.clone();
    }
    let mut padded = a.shape().to_vec();
    while padded.len() < shape.len() {
        padded.insert(0, 1);
    }
    let view = a.view().into_shape_with_order(IxDyn(&padded)).unwrap();
    view.broadcast(IxDyn(shape)).unwrap().to_owned()
}

/// Sum `g` down to `shape` by collapsing axes that were broadcast up.
fn reduce_to_shape(g: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, (&have, &want)) in out.shape().to_vec().iter().zip(shape).enumerate() {
        if have != want {
            debug_assert_eq!(want, 1);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

impl Var {
    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// The single element of a scalar node.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.value.len(), 1);
        *self.value.iter().next().unwrap()
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape, &other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        &self,
        rhs: &Var,
        forward: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>, &Value, &Value) -> (ArrayD<f64>, ArrayD<f64>) + 'static,
    ) -> Var {
        self.same_tape(rhs);
        let out_shape = broadcast_shape(self.shape(), rhs.shape());
        let a = broadcast_to(&self.value, &out_shape);
        let b = broadcast_to(&rhs.value, &out_shape);
        let value = forward(&a, &b);
        let needs = self.needs_grad || rhs.needs_grad;
        let (la, lb) = (self.value.clone(), rhs.value.clone());
        let (ida, idb) = (self.id, rhs.id);
        let (na, nb) = (self.needs_grad, rhs.needs_grad);
        self.tape.push(
            value,
            needs,
            Some(Box::new(move |g, sink| {
                let (ga, gb) = backward(g, &la, &lb);
                if na {
                    sink.accumulate(ida, reduce_to_shape(&ga, la.shape()));
                }
                if nb {
                    sink.accumulate(idb, reduce_to_shape(&gb, lb.shape()));
                }
            })),
        )
    }

    fn unary(
        &self,
        value: ArrayD<f64>,
        backward: impl Fn(&ArrayD<f64>, &mut GradSink) + 'static,
    ) -> Var {
        self.tape
            .push(value, self.needs_grad, Some(Box::new(backward)))
    }

    pub fn add(&self, rhs: &Var) -> Var {
        self.binary(rhs, |a, b| a + b, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        self.binary(rhs, |a, b| a - b, |g, _, _| (g.clone(), -g))
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        self.binary(
            rhs,
            |a, b| a * b,
            |g, a, b| {
                let shape = g.shape();
                (g * &broadcast_to(b, shape), g * &broadcast_to(a, shape))
            },
        )
    }

    pub fn div(&self, rhs: &Var) -> Var {
        self.binary(
            rhs,
            |a, b| a / b,
            |g, a, b| {
                let shape = g.shape();
                let bb = broadcast_to(b, shape);
                let aa = broadcast_to(a, shape);
                (g / &bb, -(g * &aa) / (&bb * &bb))
            },
        )
    }

    pub fn neg(&self) -> Var {
        let id = self.id;
        self.unary((-&*self.value).into_dyn(), move |g, sink| {
            sink.accumulate(id, -g)
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let id = self.id;
        self.unary(&*self.value + c, move |g, sink| {
            sink.accumulate(id, g.clone())
        })
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let id = self.id;
        self.unary(&*self.value * c, move |g, sink| sink.accumulate(id, g * c))
    }

    fn map(&self, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64) -> f64 + 'static) -> Var {
        let id = self.id;
        let x = self.value.clone();
        self.unary(self.value.mapv(f), move |g, sink| {
            sink.accumulate(id, g * &x.mapv(&dfdx))
        })
    }

    pub fn exp(&self) -> Var {
        self.map(f64::exp, f64::exp)
    }

    pub fn ln(&self) -> Var {
        self.map(f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        self.map(f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn square(&self) -> Var {
        self.map(|x| x * x, |x| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Var {
        self.map(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn silu(&self) -> Var {
        self.map(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Tanh-approximation GELU, the variant standard in transformer blocks.
    pub fn gelu(&self) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.map(
            |x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()),
            |x| {
                let t = (C * (x + A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&self, rhs: &Var) -> Var {
        self.same_tape(rhs);
        let a = self
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be rank 2");
        let b = rhs
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be rank 2");
        let value = a.dot(&b).into_dyn();
        let (la, lb) = (self.value.clone(), rhs.value.clone());
        let (ida, idb) = (self.id, rhs.id);
        let (na, nb) = (self.needs_grad, rhs.needs_grad);
        self.tape.push(
            value,
            na || nb,
            Some(Box::new(move |g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = la.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = lb.view().into_dimensionality::<Ix2>().unwrap();
                if na {
                    sink.accumulate(ida, g2.dot(&b2.t()).into_dyn());
                }
                if nb {
                    sink.accumulate(idb, a2.t().dot(&g2).into_dyn());
                }
            })),
        )
    }

    /// Batched matrix product of rank-3 nodes: `[b, m, k] x [b, k, n]`.
    pub fn batched_matmul(&self, rhs: &Var) -> Var {
        self.same_tape(rhs);
        let (sa, sb) = (self.shape().to_vec(), rhs.shape().to_vec());
        assert_eq!(sa.len(), 3, "batched_matmul lhs must be rank 3");
        assert_eq!(sb.len(), 3, "batched_matmul rhs must be rank 3");
        assert_eq!(sa[0], sb[0], "batch sizes differ");
        assert_eq!(sa[2], sb[1], "inner dimensions differ");
        let (bsz, m, n) = (sa[0], sa[1], sb[2]);
        let mut value = ArrayD::zeros(IxDyn(&[bsz, m, n]));
        for i in 0..bsz {
            let a = self.value.index_axis(Axis(0), i);
            let b = rhs.value.index_axis(Axis(0), i);
            let a2 = a.into_dimensionality::<Ix2>().unwrap();
            let b2 = b.into_dimensionality::<Ix2>().unwrap();
            value
                .index_axis_mut(Axis(0), i)
                .assign(&a2.dot(&b2).into_dyn());
        }
        let (la, lb) = (self.value.clone(), rhs.value.clone());
        let (ida, idb) = (self.id, rhs.id);
        let (na, nb) = (self.needs_grad, rhs.needs_grad);
        self.tape.push(
            value,
            na || nb,
            Some(Box::new(move |g, sink| {
                let bsz = g.shape()[0];
                if na {
                    let mut ga = ArrayD::zeros(la.shape());
                    for i in 0..bsz {
                        let gi = g
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        let bi = lb
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        ga.index_axis_mut(Axis(0), i)
                            .assign(&gi.dot(&bi.t()).into_dyn());
                    }
                    sink.accumulate(ida, ga);
                }
                if nb {
                    let mut gb = ArrayD::zeros(lb.shape());
                    for i in 0..bsz {
                        let gi = g
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        let ai = la
                            .index_axis(Axis(0), i)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        gb.index_axis_mut(Axis(0), i)
                            .assign(&ai.t().dot(&gi).into_dyn());
                    }
                    sink.accumulate(idb, gb);
                }
            })),
        )
    }

    /// Numerically stable softmax along one axis.
    pub fn softmax(&self, axis: usize) -> Var {
        let value = softmax_array(&self.value, axis);
        let y = Rc::new(value.clone());
        let id = self.id;
        self.unary(value, move |g, sink| {
            let gy = g * &*y;
            let dot = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
            sink.accumulate(id, &gy - &(&*y * &dot));
        })
    }

    /// Layer normalization over the last axis, no affine parameters.
    pub fn layer_norm_last(&self, eps: f64) -> Var {
        let x = &*self.value;
        let last = x.ndim() - 1;
        let n = x.shape()[last] as f64;
        let mean = x.mean_axis(Axis(last)).unwrap().insert_axis(Axis(last));
        let centered = x - &mean;
        let var = centered
            .mapv(|v| v * v)
            .mean_axis(Axis(last))
            .unwrap()
            .insert_axis(Axis(last));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let xhat_rc = Rc::new(xhat.clone());
        let inv_std_rc = Rc::new(inv_std);
        let id = self.id;
        self.unary(xhat, move |g, sink| {
            let mean_g = g.sum_axis(Axis(last)).insert_axis(Axis(last)) / n;
            let mean_gx = (g * &*xhat_rc).sum_axis(Axis(last)).insert_axis(Axis(last)) / n;
            let dx = (&(g - &mean_g) - &(&*xhat_rc * &mean_gx)) * &*inv_std_rc;
            sink.accumulate(id, dx);
        })
    }

    pub fn sum_all(&self) -> Var {
        let total = self.value.sum();
        let shape = self.shape().to_vec();
        let id = self.id;
        self.unary(ArrayD::from_elem(IxDyn(&[]), total), move |g, sink| {
            let s = *g.iter().next().unwrap();
            sink.accumulate(id, ArrayD::from_elem(IxDyn(&shape), s));
        })
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, axis: usize) -> Var {
        let value = self.value.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let shape = self.shape().to_vec();
        let id = self.id;
        self.unary(value, move |g, sink| {
            sink.accumulate(id, broadcast_to(g, &shape));
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let new_len: usize = shape.iter().product();
        assert_eq!(new_len, self.value.len(), "reshape length mismatch");
        let value = self
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let old_shape = self.shape().to_vec();
        let id = self.id;
        self.unary(value, move |g, sink| {
            let back = g
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&old_shape))
                .unwrap();
            sink.accumulate(id, back);
        })
    }

    pub fn permute_axes(&self, perm: &[usize]) -> Var {
        let value = self
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let id = self.id;
        self.unary(value, move |g, sink| {
            let back = g
                .view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .to_owned();
            sink.accumulate(id, back);
        })
    }

    /// Output element `i` (row-major flat order) reads input flat element
    /// `map[i]`.  Adjoint scatter-adds, so maps may repeat indices.
    pub fn gather_flat(&self, map: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        assert_eq!(map.len(), out_shape.iter().product::<usize>());
        let flat = self.value.as_standard_layout();
        let src = flat.as_slice().unwrap();
        let data: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let value = ArrayD::from_shape_vec(IxDyn(out_shape), data).unwrap();
        let in_shape = self.shape().to_vec();
        let id = self.id;
        self.unary(value, move |g, sink| {
            let mut back = vec![0.0; in_shape.iter().product()];
            let gflat = g.as_standard_layout();
            let gs = gflat.as_slice().unwrap();
            for (o, &i) in map.iter().enumerate() {
                back[i] += gs[o];
            }
            sink.accumulate(id, ArrayD::from_shape_vec(IxDyn(&in_shape), back).unwrap());
        })
    }

    /// Input flat element `i` adds into output flat element `map[i]`; the rest
    /// of the output is zero.  Adjoint is a gather through the same map.
    pub fn scatter_flat(&self, map: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        assert_eq!(map.len(), self.value.len());
        let flat = self.value.as_standard_layout();
        let src = flat.as_slice().unwrap();
        let mut data = vec![0.0; out_shape.iter().product()];
        for (i, &o) in map.iter().enumerate() {
            data[o] += src[i];
        }
        let value = ArrayD::from_shape_vec(IxDyn(out_shape), data).unwrap();
        let in_shape = self.shape().to_vec();
        let id = self.id;
        self.unary(value, move |g, sink| {
            let gflat = g.as_standard_layout();
            let gs = gflat.as_slice().unwrap();
            let back: Vec<f64> = map.iter().map(|&o| gs[o]).collect();
            sink.accumulate(id, ArrayD::from_shape_vec(IxDyn(&in_shape), back).unwrap());
        })
    }

    /// Softmax over contiguous row segments of a `[rows, heads]` matrix.
    /// `offsets` has one more entry than there are segments; segment `s`
    /// covers rows `offsets[s]..offsets[s+1]`.  Empty segments are allowed.
    pub fn segment_softmax(&self, offsets: Rc<Vec<usize>>) -> Var {
        let x = self
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("segment_softmax input must be rank 2");
        let (_rows, heads) = x.dim();
        let mut value = x.to_owned();
        for s in 0..offsets.len() - 1 {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            for h in 0..heads {
                let mut max = f64::NEG_INFINITY;
                for r in lo..hi {
                    max = max.max(value[[r, h]]);
                }
                let mut sum = 0.0;
                for r in lo..hi {
                    let e = (value[[r, h]] - max).exp();
                    value[[r, h]] = e;
                    sum += e;
                }
                for r in lo..hi {
                    value[[r, h]] /= sum;
                }
            }
        }
        let y = Rc::new(value.clone());
        let id = self.id;
        self.unary(value.into_dyn(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = g2.to_owned();
            for s in 0..offsets.len() - 1 {
                let (lo, hi) = (offsets[s], offsets[s + 1]);
                for h in 0..heads {
                    let mut dot = 0.0;
                    for r in lo..hi {
                        dot += g2[[r, h]] * y[[r, h]];
                    }
                    for r in lo..hi {
                        dx[[r, h]] = y[[r, h]] * (g2[[r, h]] - dot);
                    }
                }
            }
            sink.accumulate(id, dx.into_dyn());
        })
    }

    /// Weighted sum of `values` rows within each segment.  `self` holds
    /// weights `[rows, heads]`, `values` is `[rows, heads, dim]`, the result
    /// is `[segments, heads, dim]`.
    pub fn segment_weighted_sum(&self, values: &Var, offsets: Rc<Vec<usize>>) -> Var {
        self.same_tape(values);
        let w = self
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("weights must be rank 2");
        let vshape = values.shape().to_vec();
        assert_eq!(vshape.len(), 3, "values must be rank 3");
        assert_eq!(w.dim().0, vshape[0], "row counts differ");
        assert_eq!(w.dim().1, vshape[1], "head counts differ");
        let (heads, dim) = (vshape[1], vshape[2]);
        let segs = offsets.len() - 1;
        let mut out = ArrayD::zeros(IxDyn(&[segs, heads, dim]));
        for s in 0..segs {
            for r in offsets[s]..offsets[s + 1] {
                for h in 0..heads {
                    let wv = w[[r, h]];
                    for d in 0..dim {
                        out[[s, h, d]] += wv * values.value[[r, h, d]];
                    }
                }
            }
        }
        let (lw, lv) = (self.value.clone(), values.value.clone());
        let (idw, idv) = (self.id, values.id);
        let (nw, nv) = (self.needs_grad, values.needs_grad);
        self.tape.push(
            out,
            nw || nv,
            Some(Box::new(move |g, sink| {
                let segs = offsets.len() - 1;
                if nw {
                    let mut gw = ArrayD::zeros(lw.shape());
                    for s in 0..segs {
                        for r in offsets[s]..offsets[s + 1] {
                            for h in 0..heads {
                                let mut acc = 0.0;
                                for d in 0..dim {
                                    acc += g[[s, h, d]] * lv[[r, h, d]];
                                }
                                gw[[r, h]] = acc;
                            }
                        }
                    }
                    sink.accumulate(idw, gw);
                }
                if nv {
                    let mut gv = ArrayD::zeros(lv.shape());
                    for s in 0..segs {
                        for r in offsets[s]..offsets[s + 1] {
                            for h in 0..heads {
                                let wv = lw[[r, h]];
                                for d in 0..dim {
                                    gv[[r, h, d]] = wv * g[[s, h, d]];
                                }
                            }
                        }
                    }
                    sink.accumulate(idv, gv);
                }
            })),
        )
    }

    /// Value passthrough that blocks gradient flow.
    pub fn stop_grad(&self) -> Var {
        self.tape.push((*self.value).clone(), false, None)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of a plain array along `axis`; shared by tape and inference paths.
pub fn softmax_array(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let max = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |a, &b| a.max(b));
    let shifted = x - &max.insert_axis(Axis(axis));
    let e = shifted.mapv(f64::exp);
    let sum = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
    e / &sum
}

/// Central-difference gradient of `f` with respect to each input array.
/// Rebuilds the computation from scratch per probe, so `f` must be pure.
pub fn finite_diff_grad(
    f: &dyn Fn(&[ArrayD<f64>]) -> f64,
    inputs: &[ArrayD<f64>],
    eps: f64,
) -> Vec<ArrayD<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = ArrayD::zeros(inputs[k].shape());
        let flat_len = inputs[k].len();
        for i in 0..flat_len {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let p = plus[k].as_slice_mut().unwrap();
                p[i] += eps;
                let m = minus[k].as_slice_mut().unwrap();
                m[i] -= eps;
            }
            let df = (f(&plus) - f(&minus)) / (2.0 * eps);
            g.as_slice_mut().unwrap()[i] = df;
        }
        grads.push(g);
    }
    grads
}

/// Largest relative mismatch between analytic and numeric gradients, using
/// `|a - n| / max(1, |a|, |n|)` per element.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                // Box-Muller keeps this independent of rand_distr.
                let u1: f64 = rng.gen_range(1e-10..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Checks one scalar-valued tape program against central differences.
    fn check(inputs: &[ArrayD<f64>], build: impl Fn(&std::rc::Rc<Tape>, &[Var]) -> Var, tol: f64) {
        let f = |xs: &[ArrayD<f64>]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            build(&tape, &vars).scalar()
        };
        let numeric = finite_diff_grad(&f, inputs, 1e-5);

        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(&loss);
        for (var, num) in vars.iter().zip(&numeric) {
            let ana = grads.wrt(var);
            let err = max_rel_err(&ana, num);
            assert!(err < tol, "gradient mismatch {err:e} (tol {tol:e})");
        }
    }

    #[test]
    fn elementwise_binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[3, 4]).mapv(|x| x + 3.0); // keep division well away from 0
        for op in 0..4 {
            check(
                &[a.clone(), b.clone()],
                move |_, v| {
                    let r = match op {
                        0 => v[0].add(&v[1]),
                        1 => v[0].sub(&v[1]),
                        2 => v[0].mul(&v[1]),
                        _ => v[0].div(&v[1]),
                    };
                    r.square().sum_all()
                },
                1e-7,
            );
        }
    }

    #[test]
    fn broadcasting_reduces_adjoints_to_operand_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[3, 1, 5]);
        let b = randn(&mut rng, &[4, 1]).mapv(|x| x + 2.5);
        check(
            &[a, b],
            |_, v| v[0].mul(&v[1]).add(&v[1]).square().sum_all(),
            1e-7,
        );
        // Scalar-vs-matrix broadcast in both argument orders.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = randn(&mut rng, &[1]);
        let m = randn(&mut rng, &[2, 3]);
        check(
            &[s, m],
            |_, v| v[1].div(&v[0].square().add_scalar(1.0)).sum_all(),
            1e-7,
        );
    }

    #[test]
    fn unary_maps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[4, 3]);
        let positive = x.mapv(|v| v.abs() + 0.5);
        check(std::slice::from_ref(&x), |_, v| v[0].exp().sum_all(), 1e-7);
        check(
            std::slice::from_ref(&positive),
            |_, v| v[0].ln().sum_all(),
            1e-7,
        );
        check(
            std::slice::from_ref(&positive),
            |_, v| v[0].sqrt().sum_all(),
            1e-7,
        );
        check(
            std::slice::from_ref(&x),
            |_, v| v[0].square().sum_all(),
            1e-7,
        );
        check(
            std::slice::from_ref(&x),
            |_, v| v[0].sigmoid().sum_all(),
            1e-7,
        );
        check(std::slice::from_ref(&x), |_, v| v[0].silu().sum_all(), 1e-7);
        check(std::slice::from_ref(&x), |_, v| v[0].gelu().sum_all(), 1e-6);
        check(
            std::slice::from_ref(&x),
            |_, v| v[0].neg().exp().sum_all(),
            1e-7,
        );
        check(
            &[x],
            |_, v| v[0].mul_scalar(-1.7).add_scalar(0.3).exp().sum_all(),
            1e-7,
        );
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        check(&[a, b], |_, v| v[0].matmul(&v[1]).square().sum_all(), 1e-6);
    }

    #[test]
    fn batched_matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 4, 2]);
        check(
            &[a, b],
            |_, v| v[0].batched_matmul(&v[1]).square().sum_all(),
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[3, 5]);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = v.softmax(1);
        for row in y.value().rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Weighted sum exercises the full jacobian, not just the sum direction.
        let mut rng2 = ChaCha8Rng::seed_from_u64(8);
        let w = randn(&mut rng2, &[3, 5]);
        check(&[x, w], |_, v| v[0].softmax(1).mul(&v[1]).sum_all(), 1e-6);
    }

    #[test]
    fn layer_norm_normalizes_and_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[4, 6]);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = v.layer_norm_last(1e-5);
        for row in y.value().rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.mapv(|a| (a - mean) * (a - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let w = randn(&mut rng, &[4, 6]);
        check(
            &[x, w],
            |_, v| v[0].layer_norm_last(1e-5).mul(&v[1]).sum_all(),
            1e-6,
        );
    }

    #[test]
    fn reductions_and_reshapes_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[2, 3, 4]);
        check(
            std::slice::from_ref(&x),
            |_, v| v[0].square().mean_all(),
            1e-7,
        );
        check(
            std::slice::from_ref(&x),
            |_, v| v[0].sum_axis_keep(1).square().sum_all(),
            1e-7,
        );
        check(
            std::slice::from_ref(&x),
            |_, v| v[0].reshape(&[6, 4]).square().sum_all(),
            1e-7,
        );
        check(
            &[x],
            |_, v| v[0].permute_axes(&[2, 0, 1]).square().sum_all(),
            1e-7,
        );
    }

    #[test]
    fn permute_axes_round_trips_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut rng, &[2, 3, 4]);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = v.permute_axes(&[1, 2, 0]).permute_axes(&[2, 0, 1]);
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn gather_and_scatter_are_mutual_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, &[6]);
        // Repeated indices exercise adjoint accumulation.
        let map = Rc::new(vec![0usize, 2, 2, 5, 1, 1, 1, 3]);
        let m2 = map.clone();
        check(
            std::slice::from_ref(&x),
            move |_, v| v[0].gather_flat(m2.clone(), &[8]).square().sum_all(),
            1e-7,
        );
        let y = randn(&mut rng, &[8]);
        let m3 = map.clone();
        check(
            &[y],
            move |_, v| v[0].scatter_flat(m3.clone(), &[6]).square().sum_all(),
            1e-7,
        );
        // For a bijective map, scatter through the same map undoes gather.
        let perm = Rc::new(vec![3usize, 1, 4, 0, 5, 2]);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let g = v.gather_flat(perm.clone(), &[6]);
        let s = g.scatter_flat(perm, &[6]);
        assert_eq!(s.value(), &x);
    }

    #[test]
    fn segment_softmax_normalizes_within_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, &[7, 2]);
        let offsets = Rc::new(vec![0usize, 3, 3, 7]); // middle segment is empty
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = v.segment_softmax(offsets.clone());
        for h in 0..2 {
            let s1: f64 = (0..3).map(|r| y.value()[[r, h]]).sum();
            let s2: f64 = (3..7).map(|r| y.value()[[r, h]]).sum();
            assert!((s1 - 1.0).abs() < 1e-12);
            assert!((s2 - 1.0).abs() < 1e-12);
        }
        let w = randn(&mut rng, &[7, 2]);
        let off = offsets.clone();
        check(
            &[x, w],
            move |_, v| v[0].segment_softmax(off.clone()).mul(&v[1]).sum_all(),
            1e-6,
        );
    }

    #[test]
    fn segment_weighted_sum_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = randn(&mut rng, &[5, 2]);
        let vals = randn(&mut rng, &[5, 2, 3]);
        let offsets = Rc::new(vec![0usize, 2, 5]);
        let tape = Tape::new();
        let wv = tape.constant(w.clone());
        let vv = tape.constant(vals.clone());
        let out = wv.segment_weighted_sum(&vv, offsets.clone());
        for s in 0..2 {
            for h in 0..2 {
                for d in 0..3 {
                    let mut want = 0.0;
                    for r in offsets[s]..offsets[s + 1] {
                        want += w[[r, h]] * vals[[r, h, d]];
                    }
                    assert!((out.value()[[s, h, d]] - want).abs() < 1e-12);
                }
            }
        }
        let off = offsets.clone();
        check(
            &[w, vals],
            move |_, v| {
                v[0].segment_weighted_sum(&v[1], off.clone())
                    .square()
                    .sum_all()
            },
            1e-6,
        );
    }

    #[test]
    fn stop_grad_blocks_gradient_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, &[3]);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = v.stop_grad().mul(&v).sum_all();
        let grads = tape.backward(&loss);
        // d(sg(x) * x)/dx = sg(x), not 2x.
        let g = grads.wrt(&v);
        for (gi, xi) in g.iter().zip(x.iter()) {
            assert!((gi - xi).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_produce_no_gradient_nodes() {
        let tape = Tape::new();
        let c = tape.constant(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let d = tape.constant(ArrayD::from_elem(IxDyn(&[2]), 4.0));
        let loss = c.mul(&d).sum_all();
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&c), ArrayD::zeros(IxDyn(&[2])));
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        let x = ArrayD::from_elem(IxDyn(&[1]), 2.0);
        let tape = Tape::new();
        let v = tape.leaf(x);
        // f = x*x + 3x; f' = 2x + 3 = 7 at x = 2.
        let loss = v.mul(&v).add(&v.mul_scalar(3.0)).sum_all();
        let grads = tape.backward(&loss);
        assert!((grads.wrt(&v)[[0]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn composite_expression_gradients_match() {
        // A miniature attention-like program touching most op kinds at once.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = randn(&mut rng, &[4, 3]);
        let k = randn(&mut rng, &[4, 3]);
        let v = randn(&mut rng, &[4, 3]);
        check(
            &[q, k, v],
            |_, vars| {
                let scores = vars[0]
                    .matmul(&vars[1].permute_axes(&[1, 0]))
                    .mul_scalar(1.0 / 3f64.sqrt());
                let attn = scores.softmax(1);
                attn.matmul(&vars[2])
                    .layer_norm_last(1e-5)
                    .gelu()
                    .square()
                    .mean_all()
            },
            1e-5,
        );
    }
}
