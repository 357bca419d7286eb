//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node holding its value, its
//! parents and a backward closure. Nodes are appended in evaluation order,
//! so the tape is topologically sorted by construction and a single reverse
//! sweep accumulates gradients.
//!
//! ```
//! use ctxfer_core::neural::Graph;
//!
//! let mut g = Graph::new();
//! let w = g.leaf(vec![3], vec![1.0, -2.0, 0.5], true);
//! let loss = g.sq_sum(w);
//! let grads = g.backward_scalar(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

use thiserror::Error;

use super::kernels::{col2im, gemm, im2col, ConvGeom, MatRef};
use super::params::ParamStore;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("node {node} depends on later node {parent}; tape is not acyclic")]
    CycleDetected { node: usize, parent: usize },
    #[error("seed for node {node} has length {got}, expected {expected}")]
    SeedShape { node: usize, got: usize, expected: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees for one node.
pub struct BackwardCtx<'a> {
    /// Gradient of the seed w.r.t. this node's output.
    pub grad: &'a [f64],
    pub output: &'a [f64],
    pub inputs: Vec<&'a [f64]>,
    /// Which parents need a gradient; others may be returned as `None`.
    pub need: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when `v` is unreachable from the seeds.
    pub fn get_or_zero(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.len_of(v)])
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.len_of(v), 1);
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parameters registered through [`Graph::param`], in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(numel(&shape), value.len(), "leaf shape/value mismatch");
        self.nodes.push(Node {
            shape,
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        self.leaf(shape, value, false)
    }

    /// Copies a parameter from the store into the graph as a trainable
    /// leaf. Repeated lookups of one name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, AutodiffError> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_owned()))?;
        let v = self.leaf(t.shape.clone(), t.data.clone(), true);
        self.params.push((name.to_owned(), v));
        Ok(v)
    }

    /// Records an arbitrary differentiable operation.
    pub fn custom(&mut self, parents: &[Var], shape: Vec<usize>, value: Vec<f64>, backward: BackwardFn) -> Var {
        assert_eq!(numel(&shape), value.len(), "op shape/value mismatch");
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            parents: parents.to_vec(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from the given seeds. With `targets = None` every
    /// trainable leaf receives a gradient; otherwise propagation is pruned
    /// to paths that reach one of `targets`.
    pub fn backward(&self, seeds: &[(Var, Vec<f64>)], targets: Option<&[Var]>) -> Result<Gradients, AutodiffError> {
        let n = self.nodes.len();
        let mut on_path = vec![false; n];
        for (i, node) in self.nodes.iter().enumerate() {
            for p in &node.parents {
                if p.0 >= i {
                    return Err(AutodiffError::CycleDetected { node: i, parent: p.0 });
                }
            }
            on_path[i] = match targets {
                None => node.requires_grad,
                Some(t) => t.contains(&Var(i)) || node.parents.iter().any(|p| on_path[p.0]),
            };
        }
        let keep = |i: usize| match targets {
            None => self.nodes[i].parents.is_empty(),
            Some(t) => t.contains(&Var(i)),
        };

        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        for (v, seed) in seeds {
            if seed.len() != self.nodes[v.0].value.len() {
                return Err(AutodiffError::SeedShape {
                    node: v.0,
                    got: seed.len(),
                    expected: self.nodes[v.0].value.len(),
                });
            }
            accumulate(&mut grads[v.0], seed);
        }

        for i in (0..n).rev() {
            if !on_path[i] {
                continue;
            }
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = (if keep(i) { grads[i].clone() } else { grads[i].take() }) else {
                continue;
            };
            let need: Vec<bool> = node.parents.iter().map(|p| on_path[p.0]).collect();
            if !need.iter().any(|b| *b) {
                continue;
            }
            let ctx = BackwardCtx {
                grad: &grad,
                output: &node.value,
                inputs: node.parents.iter().map(|p| self.nodes[p.0].value.as_slice()).collect(),
                need: need.clone(),
            };
            let parent_grads = backward(&ctx);
            for ((p, pg), needed) in node.parents.iter().zip(parent_grads).zip(need) {
                if let (Some(pg), true) = (pg, needed) {
                    debug_assert_eq!(pg.len(), self.nodes[p.0].value.len());
                    accumulate(&mut grads[p.0], &pg);
                }
            }
        }
        Ok(Gradients { grads })
    }

    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        self.backward(&[(loss, vec![1.0])], None)
    }

    // ----- elementwise -----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a],
            shape,
            value,
            Box::new(move |c| {
                vec![Some(
                    c.grad
                        .iter()
                        .zip(c.inputs[0])
                        .zip(c.output)
                        .map(|((g, &x), &y)| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, |x, _| sigmoid(x))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, |_, _| 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    fn same_shape(&self, a: Var, b: Var) {
        assert_eq!(
            self.len_of(a),
            self.len_of(b),
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a, b],
            shape,
            value,
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a, b],
            shape,
            value,
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.iter().map(|g| -g).collect())]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.custom(
            &[a, b],
            shape,
            value,
            Box::new(|c| {
                let ga = c.need[0].then(|| c.grad.iter().zip(c.inputs[1]).map(|(g, y)| g * y).collect());
                let gb = c.need[1].then(|| c.grad.iter().zip(c.inputs[0]).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        )
    }

    /// Same values, no gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a).to_vec();
        self.constant(shape, value)
    }

    // ----- shape -----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(numel(&shape), self.len_of(a), "reshape changes size");
        let value = self.value(a).to_vec();
        self.custom(&[a], shape, value, Box::new(|c| vec![Some(c.grad.to_vec())]))
    }

    /// Flat concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let lens: Vec<usize> = parts.iter().map(|p| self.len_of(*p)).collect();
        let mut value = Vec::with_capacity(lens.iter().sum());
        for p in parts {
            value.extend_from_slice(self.value(*p));
        }
        let n = value.len();
        self.custom(
            parts,
            vec![n],
            value,
            Box::new(move |c| {
                let mut off = 0;
                lens.iter()
                    .enumerate()
                    .map(|(i, &len)| {
                        let g = c.need[i].then(|| c.grad[off..off + len].to_vec());
                        off += len;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Flat slice `[start, start + len)`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let total = self.len_of(a);
        assert!(start + len <= total, "slice out of range");
        let value = self.value(a)[start..start + len].to_vec();
        self.custom(
            &[a],
            vec![len],
            value,
            Box::new(move |c| {
                let mut g = vec![0.0; total];
                g[start..start + len].copy_from_slice(c.grad);
                vec![Some(g)]
            }),
        )
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let n = self.len_of(a);
        self.custom(
            &[a],
            vec![1],
            vec![s],
            Box::new(move |c| vec![Some(vec![c.grad[0]; n])]),
        )
    }

    pub fn sq_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        self.custom(
            &[a],
            vec![1],
            vec![s],
            Box::new(|c| vec![Some(c.inputs[0].iter().map(|x| 2.0 * x * c.grad[0]).collect())]),
        )
    }

    /// `sum((a - b)^2)`.
    pub fn sq_diff_sum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.custom(
            &[a, b],
            vec![1],
            vec![s],
            Box::new(|c| {
                let d: Vec<f64> = c.inputs[0]
                    .iter()
                    .zip(c.inputs[1])
                    .map(|(x, y)| 2.0 * (x - y) * c.grad[0])
                    .collect();
                let nd = c.need[1].then(|| d.iter().map(|v| -v).collect());
                vec![Some(d), nd]
            }),
        )
    }

    /// Weighted sum of scalars, `sum_i w_i * s_i`.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let s = terms.iter().map(|(v, w)| w * self.scalar(*v)).sum();
        self.custom(
            &vars,
            vec![1],
            vec![s],
            Box::new(move |c| weights.iter().map(|w| Some(vec![w * c.grad[0]])).collect()),
        )
    }

    fn extremum(&mut self, parts: &[Var], better: fn(f64, f64) -> bool) -> Var {
        let mut best: Option<(usize, usize, f64)> = None;
        for (pi, p) in parts.iter().enumerate() {
            for (i, &v) in self.value(*p).iter().enumerate() {
                if best.map_or(true, |(_, _, b)| better(v, b)) {
                    best = Some((pi, i, v));
                }
            }
        }
        let (bp, bi, bv) = best.expect("extremum over empty input");
        let lens: Vec<usize> = parts.iter().map(|p| self.len_of(*p)).collect();
        self.custom(
            parts,
            vec![1],
            vec![bv],
            Box::new(move |c| {
                (0..lens.len())
                    .map(|pi| {
                        (pi == bp && c.need[pi]).then(|| {
                            let mut g = vec![0.0; lens[pi]];
                            g[bi] = c.grad[0];
                            g
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Minimum over all elements of all parts; the gradient flows to the
    /// first minimizing element.
    pub fn min_all(&mut self, parts: &[Var]) -> Var {
        self.extremum(parts, |a, b| a < b)
    }

    pub fn max_all(&mut self, parts: &[Var]) -> Var {
        self.extremum(parts, |a, b| a > b)
    }

    /// `(x - lo) / (hi - lo)` elementwise with scalar `lo`, `hi`; all zeros
    /// when `hi == lo`.
    pub fn normalize(&mut self, x: Var, lo: Var, hi: Var) -> Var {
        let (l, h) = (self.scalar(lo), self.scalar(hi));
        let span = h - l;
        let value: Vec<f64> = if span == 0.0 {
            vec![0.0; self.len_of(x)]
        } else {
            self.value(x).iter().map(|v| (v - l) / span).collect()
        };
        let shape = self.shape(x).to_vec();
        self.custom(
            &[x, lo, hi],
            shape,
            value,
            Box::new(move |c| {
                if span == 0.0 {
                    return vec![None, None, None];
                }
                let gx = c.need[0].then(|| c.grad.iter().map(|g| g / span).collect());
                let s2 = span * span;
                let glo = c.need[1].then(|| vec![c.grad.iter().zip(c.inputs[0]).map(|(g, v)| g * (v - h) / s2).sum()]);
                let ghi = c.need[2].then(|| vec![c.grad.iter().zip(c.inputs[0]).map(|(g, v)| -g * (v - l) / s2).sum()]);
                vec![gx, glo, ghi]
            }),
        )
    }

    // ----- linear algebra -----

    /// `w x + b` for `x: [n]`, `w: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n = self.len_of(x);
        let m = self.len_of(b);
        assert_eq!(self.len_of(w), m * n, "linear weight shape mismatch");
        let mut out = self.value(b).to_vec();
        {
            let (xv, wv) = (self.value(x), self.value(w));
            for (i, o) in out.iter_mut().enumerate() {
                *o += dot(&wv[i * n..(i + 1) * n], xv);
            }
        }
        self.custom(
            &[x, w, b],
            vec![m],
            out,
            Box::new(move |c| {
                let (xv, wv) = (c.inputs[0], c.inputs[1]);
                let gx = c.need[0].then(|| {
                    let mut gx = vec![0.0; n];
                    for (i, g) in c.grad.iter().enumerate() {
                        axpy(*g, &wv[i * n..(i + 1) * n], &mut gx);
                    }
                    gx
                });
                let gw = c.need[1].then(|| {
                    let mut gw = vec![0.0; m * n];
                    for (i, g) in c.grad.iter().enumerate() {
                        axpy(*g, xv, &mut gw[i * n..(i + 1) * n]);
                    }
                    gw
                });
                vec![gx, gw, Some(c.grad.to_vec())]
            }),
        )
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, k, k]");
        assert_eq!(ws[1], xs[0], "conv2d channel mismatch");
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kernel: ws[2],
            stride,
            pad,
        };
        let o = ws[0];
        let (kk, hw) = (geom.col_rows(), geom.col_cols());
        let cols = im2col(self.value(x), &geom);
        let mut out = vec![0.0; o * hw];
        for (oc, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.fill(self.value(b)[oc]);
        }
        gemm(
            MatRef::new(self.value(w), o, kk),
            MatRef::new(&cols, kk, hw),
            1.0,
            &mut out,
        );
        drop(cols);
        self.custom(
            &[x, w, b],
            vec![o, geom.out_height(), geom.out_width()],
            out,
            Box::new(move |c| {
                let dout = MatRef::new(c.grad, o, hw);
                let gw = c.need[1].then(|| {
                    let cols = im2col(c.inputs[0], &geom);
                    let mut gw = vec![0.0; o * kk];
                    gemm(dout, MatRef::new(&cols, kk, hw).t(), 0.0, &mut gw);
                    gw
                });
                let gx = c.need[0].then(|| {
                    let mut dcols = vec![0.0; kk * hw];
                    gemm(MatRef::new(c.inputs[1], o, kk).t(), dout, 0.0, &mut dcols);
                    col2im(&dcols, &geom)
                });
                let gb = c.need[2].then(|| c.grad.chunks(hw).map(|r| r.iter().sum()).collect());
                vec![gx, gw, gb]
            }),
        )
    }

    /// Transposed convolution of `x: [C, H, W]` with `w: [C, O, k, k]`,
    /// `b: [O]`; output is `[O, (H-1)s - 2p + k, (W-1)s - 2p + k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv_transpose2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv_transpose2d weight must be [C, O, k, k]");
        assert_eq!(ws[0], xs[0], "conv_transpose2d channel mismatch");
        let (cin, o, k) = (ws[0], ws[1], ws[2]);
        let (h, wd) = (xs[1], xs[2]);
        let out_h = (h - 1) * stride + k - 2 * pad;
        let out_w = (wd - 1) * stride + k - 2 * pad;
        // The output plays the role of a convolution input whose im2col has
        // exactly `h * w` columns.
        let geom = ConvGeom {
            channels: o,
            height: out_h,
            width: out_w,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.col_cols(), h * wd);
        let (okk, hw) = (geom.col_rows(), h * wd);
        let mut cols = vec![0.0; okk * hw];
        gemm(
            MatRef::new(self.value(w), cin, okk).t(),
            MatRef::new(self.value(x), cin, hw),
            0.0,
            &mut cols,
        );
        let mut out = col2im(&cols, &geom);
        let plane = out_h * out_w;
        for (oc, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = self.value(b)[oc];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        self.custom(
            &[x, w, b],
            vec![o, out_h, out_w],
            out,
            Box::new(move |c| {
                let dcols = im2col(c.grad, &geom);
                let gx = c.need[0].then(|| {
                    let mut gx = vec![0.0; cin * hw];
                    gemm(
                        MatRef::new(c.inputs[1], cin, okk),
                        MatRef::new(&dcols, okk, hw),
                        0.0,
                        &mut gx,
                    );
                    gx
                });
                let gw = c.need[1].then(|| {
                    let mut gw = vec![0.0; cin * okk];
                    gemm(
                        MatRef::new(c.inputs[0], cin, hw),
                        MatRef::new(&dcols, okk, hw).t(),
                        0.0,
                        &mut gw,
                    );
                    gw
                });
                let gb = c.need[2].then(|| c.grad.chunks(plane).map(|r| r.iter().sum()).collect());
                vec![gx, gw, gb]
            }),
        )
    }

    /// Average pooling with a `k x k` window and stride `k` (floor mode).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "avg_pool2d input must be [C, H, W]");
        let (ch, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let xv = self.value(x);
        let mut out = vec![0.0; ch * oh * ow];
        for c in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        let row = (c * h + oy * k + dy) * w + ox * k;
                        acc += xv[row..row + k].iter().sum::<f64>();
                    }
                    out[(c * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        self.custom(
            &[x],
            vec![ch, oh, ow],
            out,
            Box::new(move |c| {
                let mut gx = vec![0.0; ch * h * w];
                for cc in 0..ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = c.grad[(cc * oh + oy) * ow + ox] * norm;
                            for dy in 0..k {
                                let row = (cc * h + oy * k + dy) * w + ox * k;
                                gx[row..row + k].iter_mut().for_each(|v| *v += g);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Bilinear lookup of `grid: [H, W]` at continuous `(gx, gy)` pairs
    /// `coords: [n, 2]`. Coordinates are clamped to `[0, W-1] x [0, H-1]`
    /// and integer coordinates hit cell values exactly.
    pub fn bilinear_sample(&mut self, grid: Var, coords: Var) -> Var {
        let gs = self.shape(grid).to_vec();
        assert_eq!(gs.len(), 2, "bilinear_sample grid must be [H, W]");
        let (rows, cols) = (gs[0], gs[1]);
        let n = self.len_of(coords) / 2;
        let taps: Vec<Taps> = self
            .value(coords)
            .chunks(2)
            .map(|p| Taps::new(p[0], p[1], rows, cols))
            .collect();
        let gv = self.value(grid);
        let out: Vec<f64> = taps.iter().map(|t| t.eval(gv, cols)).collect();
        self.custom(
            &[grid, coords],
            vec![n],
            out,
            Box::new(move |c| {
                let gg = c.need[0].then(|| {
                    let mut gg = vec![0.0; rows * cols];
                    for (t, g) in taps.iter().zip(c.grad) {
                        t.scatter(*g, &mut gg, cols);
                    }
                    gg
                });
                let gc = c.need[1].then(|| {
                    let mut gc = vec![0.0; 2 * n];
                    for (i, (t, g)) in taps.iter().zip(c.grad).enumerate() {
                        let (dx, dy) = t.coord_grad(c.inputs[0], cols);
                        gc[2 * i] = g * dx;
                        gc[2 * i + 1] = g * dy;
                    }
                    gc
                });
                vec![gg, gc]
            }),
        )
    }
}

/// The four neighbors and weights of one bilinear lookup.
#[derive(Clone, Copy, Debug)]
struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    x_inside: bool,
    y_inside: bool,
}

impl Taps {
    fn axis(v: f64, n: usize) -> (usize, usize, f64, bool) {
        let max = (n - 1) as f64;
        let inside = v > 0.0 && v < max;
        let c = v.clamp(0.0, max);
        if n == 1 {
            return (0, 0, 0.0, false);
        }
        let i0 = (c.floor() as usize).min(n - 2);
        (i0, i0 + 1, c - i0 as f64, inside)
    }

    fn new(gx: f64, gy: f64, rows: usize, cols: usize) -> Self {
        let (x0, x1, fx, x_inside) = Self::axis(gx, cols);
        let (y0, y1, fy, y_inside) = Self::axis(gy, rows);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            x_inside,
            y_inside,
        }
    }

    fn eval(&self, g: &[f64], cols: usize) -> f64 {
        let v = |x: usize, y: usize| g[y * cols + x];
        (1.0 - self.fx) * (1.0 - self.fy) * v(self.x0, self.y0)
            + self.fx * (1.0 - self.fy) * v(self.x1, self.y0)
            + (1.0 - self.fx) * self.fy * v(self.x0, self.y1)
            + self.fx * self.fy * v(self.x1, self.y1)
    }

    fn scatter(&self, w: f64, out: &mut [f64], cols: usize) {
        out[self.y0 * cols + self.x0] += w * (1.0 - self.fx) * (1.0 - self.fy);
        out[self.y0 * cols + self.x1] += w * self.fx * (1.0 - self.fy);
        out[self.y1 * cols + self.x0] += w * (1.0 - self.fx) * self.fy;
        out[self.y1 * cols + self.x1] += w * self.fx * self.fy;
    }

    fn coord_grad(&self, g: &[f64], cols: usize) -> (f64, f64) {
        let v = |x: usize, y: usize| g[y * cols + x];
        let dx = if self.x_inside {
            (1.0 - self.fy) * (v(self.x1, self.y0) - v(self.x0, self.y0))
                + self.fy * (v(self.x1, self.y1) - v(self.x0, self.y1))
        } else {
            0.0
        };
        let dy = if self.y_inside {
            (1.0 - self.fx) * (v(self.x0, self.y1) - v(self.x0, self.y0))
                + self.fx * (v(self.x1, self.y1) - v(self.x1, self.y0))
        } else {
            0.0
        };
        (dx, dy)
    }
}

/// Plain bilinear lookup with the same clamping rules as
/// [`Graph::bilinear_sample`].
pub fn bilinear(grid: &[f64], rows: usize, cols: usize, gx: f64, gy: f64) -> f64 {
    Taps::new(gx, gy, rows, cols).eval(grid, cols)
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
