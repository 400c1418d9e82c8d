//! A reverse-mode automatic differentiation tape.
//!
//! Every forward call appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! depends on a parameter or a [`Graph::variable`] leaf. Image tensors use the
//! `[B, C, H, W]` layout.

use std::collections::HashMap;

use crate::error::Result;
use crate::linalg;
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

const GROUP_NORM_EPS: f64 = 1e-5;
/// Half-width of one quantisation bin for masks in `[-1, 1]`.
const HALF_BIN: f64 = 1.0 / 255.0;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Silu,
    Relu,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Option<Vec<f64>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannel {
        x: Var,
        e: Var,
    },
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Tensor),
    Unary(Var, Unary),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Cholesky {
        diag: Var,
        off: Option<Var>,
    },
    LatentKl {
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
    },
    DiscretizedNll {
        x0: Tensor,
        mean: Var,
        log_scale: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The computation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    param_order: Vec<(usize, Var)>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    /// A tape that records what backward needs.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            record: true,
        }
    }

    /// A forward-only tape: no convolution buffers are retained and
    /// [`Graph::backward`] must not be called.
    pub fn inference() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for a stored parameter, created once per tape.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (bn, c, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        let (co, ci, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ci, c, "conv2d: {c} input channels, weight expects {ci}");
        assert_eq!(ws[3], k, "conv2d: square kernels only");
        let hw = h * wd;
        let cols = im2col(self.value(x).data(), bn, c, h, wd, k);
        let rows = c * k * k;
        let mut out_mat = vec![0.0; co * bn * hw];
        gemm(
            co,
            rows,
            bn * hw,
            1.0,
            self.value(w).data(),
            rows,
            1,
            &cols,
            bn * hw,
            1,
            0.0,
            &mut out_mat,
        );
        let bias = self.value(b).data();
        let mut out = vec![0.0; bn * co * hw];
        for o in 0..co {
            for i in 0..bn {
                let src = &out_mat[o * bn * hw + i * hw..o * bn * hw + (i + 1) * hw];
                let dst = &mut out[(i * co + o) * hw..(i * co + o + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = (self.record && needs).then_some(cols);
        let value = Tensor::new([bn, co, h, wd], out).expect("conv2d shape");
        self.push(value, Op::Conv2d { x, w, b, cols }, needs)
    }

    /// `x·Wᵀ + b` for `x: [B, in]`, `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (bn, din, dout) = (xs[0], xs[1], ws[0]);
        assert_eq!(ws[1], din, "linear: input width mismatch");
        let mut out = vec![0.0; bn * dout];
        for i in 0..bn {
            out[i * dout..(i + 1) * dout].copy_from_slice(self.value(b).data());
        }
        gemm(
            bn,
            din,
            dout,
            1.0,
            self.value(x).data(),
            din,
            1,
            self.value(w).data(),
            1,
            din,
            1.0,
            &mut out,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        let value = Tensor::new([bn, dout], out).expect("linear shape");
        self.push(value, Op::Linear { x, w, b }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .expect("elementwise op on mismatched shapes");
        let needs = self.ng(a) || self.ng(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a per-(sample, channel) offset `e: [B, C]` to `x: [B, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let (bn, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(e).shape(), &[bn, c], "add_channel: offset shape");
        let hw = h * w;
        let mut value = self.value(x).clone();
        let ev = self.value(e).data();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            let off = ev[i];
            chunk.iter_mut().for_each(|v| *v += off);
        }
        let needs = self.ng(x) || self.ng(e);
        self.push(value, Op::AddChannel { x, e }, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.ng(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let value = self
            .value(x)
            .zip_map(c, |a, b| a + b)
            .expect("add_const shape");
        let needs = self.ng(x);
        self.push(value, Op::AddConst(x), needs)
    }

    /// Multiplies by a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let value = self
            .value(x)
            .zip_map(&c, |a, b| a * b)
            .expect("mul_const shape");
        let needs = self.ng(x);
        self.push(value, Op::MulConst(x, c), needs)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Silu => |v| v * sigmoid(v),
            Unary::Relu => |v| v.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Sigmoid => sigmoid,
            Unary::Softplus => softplus,
            Unary::Square => |v| v * v,
        };
        let value = self.value(x).map(f);
        let needs = self.ng(x);
        self.push(value, Op::Unary(x, kind), needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Clips to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let needs = self.ng(x);
        self.push(value, Op::Clamp { x, lo, hi }, needs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (bn, c, h, w) = self.value(x).dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels / {groups} groups");
        let per = (c / groups) * h * w;
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; bn * groups];
        let mut out = vec![0.0; xv.len()];
        for s in 0..bn * groups {
            let chunk = &xv[s * per..(s + 1) * per];
            let mean = chunk.iter().sum::<f64>() / per as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            inv_std[s] = is;
            for (j, &v) in chunk.iter().enumerate() {
                let idx = s * per + j;
                let ch = (idx / hw) % c;
                let xh = (v - mean) * is;
                xhat[idx] = xh;
                out[idx] = xh * gv[ch] + bv[ch];
            }
        }
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let value = Tensor::new([bn, c, h, w], out).expect("group_norm shape");
        let (xhat, inv_std) = if self.record && needs {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    /// 2×2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (bn, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        assert!(ho > 0 && wo > 0, "avg_pool2 on {h}x{w}");
        let xv = self.value(x).data();
        let mut out = vec![0.0; bn * c * ho * wo];
        for p in 0..bn * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = p * h * w + 2 * y * w + 2 * xx;
                    out[p * ho * wo + y * wo + xx] =
                        0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::new([bn, c, ho, wo], out).expect("pool shape");
        self.push(value, Op::AvgPool2(x), needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (bn, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; bn * c * ho * wo];
        for p in 0..bn * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = xv[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::new([bn, c, ho, wo], out).expect("upsample shape");
        self.push(value, Op::Upsample2(x), needs)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let value = Tensor::concat_channels(self.value(a), self.value(b))
            .expect("concat: spatial shapes differ");
        let needs = self.ng(a) || self.ng(b);
        self.push(value, Op::Concat(a, b), needs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (bn, c, h, w) = self.value(x).dims4();
        assert!(start + len <= c, "slice_channels out of range");
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bn * len * hw);
        for i in 0..bn {
            out.extend_from_slice(&xv[(i * c + start) * hw..(i * c + start + len) * hw]);
        }
        let needs = self.ng(x);
        let value = Tensor::new([bn, len, h, w], out).expect("slice shape");
        self.push(value, Op::SliceChannels { x, start }, needs)
    }

    /// Spatial mean: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (bn, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let needs = self.ng(x);
        let value = Tensor::new([bn, c], out).expect("gap shape");
        self.push(value, Op::GlobalAvgPool(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    /// Assembles lower-triangular factors `[B, N, N]` from a positive
    /// diagonal `[B, N]` and optional strictly-lower entries
    /// `[B, N(N-1)/2]` in row-major order.
    pub fn cholesky(&mut self, diag: Var, off: Option<Var>) -> Var {
        let ds = self.value(diag).shape().to_vec();
        let (bn, n) = (ds[0], ds[1]);
        let dv = self.value(diag).data();
        let mut out = vec![0.0; bn * n * n];
        for i in 0..bn {
            for r in 0..n {
                out[i * n * n + r * n + r] = dv[i * n + r];
            }
        }
        if let Some(off) = off {
            let ov = self.value(off).data();
            let m = n * (n - 1) / 2;
            assert_eq!(self.value(off).shape(), &[bn, m], "cholesky: off-diagonal shape");
            for i in 0..bn {
                let mut k = 0;
                for r in 0..n {
                    for c in 0..r {
                        out[i * n * n + r * n + c] = ov[i * m + k];
                        k += 1;
                    }
                }
            }
        }
        let needs = self.ng(diag) || off.is_some_and(|o| self.ng(o));
        let value = Tensor::new([bn, n, n], out).expect("cholesky shape");
        self.push(value, Op::Cholesky { diag, off }, needs)
    }

    /// Per-sample `KL(Q ‖ P)` between batched latent Gaussians: means
    /// `[B, N]`, factors `[B, N, N]`. Output `[B]`.
    pub fn latent_kl(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let ms = self.value(mq).shape().to_vec();
        let (bn, n) = (ms[0], ms[1]);
        let out: Vec<f64> = (0..bn)
            .map(|i| {
                linalg::gaussian_kl(
                    &self.value(mq).data()[i * n..(i + 1) * n],
                    &self.value(lq).data()[i * n * n..(i + 1) * n * n],
                    &self.value(mp).data()[i * n..(i + 1) * n],
                    &self.value(lp).data()[i * n * n..(i + 1) * n * n],
                    n,
                )
            })
            .collect();
        let needs = [mq, lq, mp, lp].iter().any(|&v| self.ng(v));
        let value = Tensor::new([bn], out).expect("kl shape");
        self.push(value, Op::LatentKl { mq, lq, mp, lp }, needs)
    }

    /// Per-element negative log-likelihood of `x0 ∈ {-1, 1}` under a
    /// Gaussian discretised to bins of width `2/255`, with the outermost
    /// bins extended to infinity.
    pub fn discretized_nll(&mut self, x0: &Tensor, mean: Var, log_scale: Var) -> Var {
        let mv = self.value(mean).data();
        let sv = self.value(log_scale).data();
        let out: Vec<f64> = x0
            .data()
            .iter()
            .zip(mv.iter().zip(sv))
            .map(|(&x, (&m, &s))| -discretized_log_prob(x, m, s).0)
            .collect();
        let needs = self.ng(mean) || self.ng(log_scale);
        let value = Tensor::new(x0.shape().to_vec(), out).expect("nll shape");
        self.push(
            value,
            Op::DiscretizedNll {
                x0: x0.clone(),
                mean,
                log_scale,
            },
            needs,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(self.record, "backward on an inference tape");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every parameter touched by this tape, indexed by
    /// parameter id.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..store.len()).map(|_| None).collect();
        for &(id, v) in &self.param_order {
            out[id] = grads.get(v).cloned();
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, cols } => {
                let cols = cols.as_ref().expect("conv2d backward without buffers");
                let (bn, c, h, wd) = self.value(*x).dims4();
                let ws = self.value(*w).shape();
                let (co, k) = (ws[0], ws[2]);
                let hw = h * wd;
                let rows = c * k * k;
                let n = bn * hw;
                let mut dy = vec![0.0; co * n];
                let gd = g.data();
                for i in 0..bn {
                    for o in 0..co {
                        dy[o * n + i * hw..o * n + (i + 1) * hw]
                            .copy_from_slice(&gd[(i * co + o) * hw..(i * co + o + 1) * hw]);
                    }
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; co * rows];
                    gemm(co, n, rows, 1.0, &dy, n, 1, cols, 1, n, 0.0, &mut dw);
                    let t = Tensor::new(ws.to_vec(), dw).expect("dw shape");
                    self.accumulate(grads, *w, t);
                }
                if self.ng(*b) {
                    let db: Vec<f64> = dy.chunks(n).map(|r| r.iter().sum()).collect();
                    self.accumulate(grads, *b, Tensor::new([co], db).expect("db shape"));
                }
                if self.ng(*x) {
                    let mut dcols = vec![0.0; rows * n];
                    gemm(
                        rows,
                        co,
                        n,
                        1.0,
                        self.value(*w).data(),
                        1,
                        rows,
                        &dy,
                        n,
                        1,
                        0.0,
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, bn, c, h, wd, k);
                    self.accumulate(grads, *x, Tensor::new([bn, c, h, wd], dx).expect("dx"));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (bn, din) = (xs[0], xs[1]);
                let dout = self.value(*w).shape()[0];
                let gd = g.data();
                if self.ng(*x) {
                    let mut dx = vec![0.0; bn * din];
                    gemm(bn, dout, din, 1.0, gd, dout, 1, self.value(*w).data(), din, 1, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new([bn, din], dx).expect("dx"));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, bn, din, 1.0, gd, 1, dout, self.value(*x).data(), din, 1, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new([dout, din], dw).expect("dw"));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(grads, *b, Tensor::new([dout], db).expect("db"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let t = g.zip_map(self.value(*b), |x, y| x * y).expect("mul");
                    self.accumulate(grads, *a, t);
                }
                if self.ng(*b) {
                    let t = g.zip_map(self.value(*a), |x, y| x * y).expect("mul");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::AddChannel { x, e } => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*e) {
                    let (_, _, h, w) = g.dims4();
                    let de: Vec<f64> = g.data().chunks(h * w).map(|c| c.iter().sum()).collect();
                    let shape = self.value(*e).shape().to_vec();
                    self.accumulate(grads, *e, Tensor::new(shape, de).expect("de"));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulConst(x, c) => {
                let t = g.zip_map(c, |a, b| a * b).expect("mul_const");
                self.accumulate(grads, *x, t);
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(out.data()))
                    .map(|(&gv, (&xi, &yi))| {
                        gv * match kind {
                            Unary::Silu => {
                                let s = sigmoid(xi);
                                s * (1.0 + xi * (1.0 - s))
                            }
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Exp => yi,
                            Unary::Log => 1.0 / xi,
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Softplus => sigmoid(xi),
                            Unary::Square => 2.0 * xi,
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).expect("unary"));
            }
            Op::Clamp { x, lo, hi } => {
                let t = g
                    .zip_map(self.value(*x), |gv, xi| if xi > *lo && xi < *hi { gv } else { 0.0 })
                    .expect("clamp");
                self.accumulate(grads, *x, t);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (bn, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let per = (c / groups) * hw;
                let gv = self.value(*gamma).data();
                let gd = g.data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (idx, (&dy, &xh)) in gd.iter().zip(xhat).enumerate() {
                        let ch = (idx / hw) % c;
                        dg[ch] += dy * xh;
                        db[ch] += dy;
                    }
                    self.accumulate(grads, *gamma, Tensor::new([c], dg).expect("dgamma"));
                    self.accumulate(grads, *beta, Tensor::new([c], db).expect("dbeta"));
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..bn * groups {
                        let range = s * per..(s + 1) * per;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for i in range.clone() {
                            let d = gd[i] * gv[(i / hw) % c];
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                        let m = per as f64;
                        for i in range {
                            let d = gd[i] * gv[(i / hw) % c];
                            dx[i] = inv_std[s] / m * (m * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new([bn, c, h, w], dx).expect("dx"));
                }
            }
            Op::AvgPool2(x) => {
                let (bn, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; bn * c * h * w];
                let gd = g.data();
                for p in 0..bn * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = 0.25 * gd[p * ho * wo + y * wo + xx];
                            let base = p * h * w + 2 * y * w + 2 * xx;
                            dx[base] += v;
                            dx[base + 1] += v;
                            dx[base + w] += v;
                            dx[base + w + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([bn, c, h, w], dx).expect("dx"));
            }
            Op::Upsample2(x) => {
                let (bn, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (2 * h, 2 * w);
                let mut dx = vec![0.0; bn * c * h * w];
                let gd = g.data();
                for p in 0..bn * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            dx[p * h * w + (y / 2) * w + xx / 2] += gd[p * ho * wo + y * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([bn, c, h, w], dx).expect("dx"));
            }
            Op::Concat(a, b) => {
                let (bn, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let gd = g.data();
                if self.ng(*a) {
                    let mut da = Vec::with_capacity(bn * ca * hw);
                    for i in 0..bn {
                        let base = i * (ca + cb) * hw;
                        da.extend_from_slice(&gd[base..base + ca * hw]);
                    }
                    self.accumulate(grads, *a, Tensor::new([bn, ca, h, w], da).expect("da"));
                }
                if self.ng(*b) {
                    let mut db = Vec::with_capacity(bn * cb * hw);
                    for i in 0..bn {
                        let base = i * (ca + cb) * hw + ca * hw;
                        db.extend_from_slice(&gd[base..base + cb * hw]);
                    }
                    self.accumulate(grads, *b, Tensor::new([bn, cb, h, w], db).expect("db"));
                }
            }
            Op::SliceChannels { x, start } => {
                let (bn, c, h, w) = self.value(*x).dims4();
                let len = g.dims4().1;
                let hw = h * w;
                let mut dx = vec![0.0; bn * c * hw];
                for i in 0..bn {
                    dx[(i * c + start) * hw..(i * c + start + len) * hw]
                        .copy_from_slice(&g.data()[i * len * hw..(i + 1) * len * hw]);
                }
                self.accumulate(grads, *x, Tensor::new([bn, c, h, w], dx).expect("dx"));
            }
            Op::GlobalAvgPool(x) => {
                let (bn, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![0.0; bn * c * hw];
                for (p, &gv) in g.data().iter().enumerate() {
                    dx[p * hw..(p + 1) * hw].fill(gv / hw as f64);
                }
                self.accumulate(grads, *x, Tensor::new([bn, c, h, w], dx).expect("dx"));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.item() / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), v));
            }
            Op::Cholesky { diag, off } => {
                let ds = self.value(*diag).shape().to_vec();
                let (bn, n) = (ds[0], ds[1]);
                let gd = g.data();
                let dd: Vec<f64> = (0..bn * n)
                    .map(|p| {
                        let (i, r) = (p / n, p % n);
                        gd[i * n * n + r * n + r]
                    })
                    .collect();
                self.accumulate(grads, *diag, Tensor::new(ds.clone(), dd).expect("ddiag"));
                if let Some(off) = off {
                    let m = n * (n - 1) / 2;
                    let mut doff = Vec::with_capacity(bn * m);
                    for i in 0..bn {
                        for r in 0..n {
                            for c in 0..r {
                                doff.push(gd[i * n * n + r * n + c]);
                            }
                        }
                    }
                    self.accumulate(grads, *off, Tensor::new([bn, m], doff).expect("doff"));
                }
            }
            Op::LatentKl { mq, lq, mp, lp } => {
                let ms = self.value(*mq).shape().to_vec();
                let (bn, n) = (ms[0], ms[1]);
                let mut gmq = vec![0.0; bn * n];
                let mut gmp = vec![0.0; bn * n];
                let mut glq = vec![0.0; bn * n * n];
                let mut glp = vec![0.0; bn * n * n];
                for i in 0..bn {
                    let v = i * n..(i + 1) * n;
                    let m = i * n * n..(i + 1) * n * n;
                    linalg::gaussian_kl_grad(
                        &self.value(*mq).data()[v.clone()],
                        &self.value(*lq).data()[m.clone()],
                        &self.value(*mp).data()[v.clone()],
                        &self.value(*lp).data()[m.clone()],
                        n,
                        g.data()[i],
                        &mut gmq[v.clone()],
                        &mut glq[m.clone()],
                        &mut gmp[v],
                        &mut glp[m],
                    );
                }
                self.accumulate(grads, *mq, Tensor::new([bn, n], gmq).expect("gmq"));
                self.accumulate(grads, *mp, Tensor::new([bn, n], gmp).expect("gmp"));
                self.accumulate(grads, *lq, Tensor::new([bn, n, n], glq).expect("glq"));
                self.accumulate(grads, *lp, Tensor::new([bn, n, n], glp).expect("glp"));
            }
            Op::DiscretizedNll {
                x0,
                mean,
                log_scale,
            } => {
                let mv = self.value(*mean).data();
                let sv = self.value(*log_scale).data();
                let mut dm = vec![0.0; mv.len()];
                let mut ds = vec![0.0; mv.len()];
                for i in 0..mv.len() {
                    let (_, gm, gs) = discretized_log_prob(x0.data()[i], mv[i], sv[i]);
                    dm[i] = -g.data()[i] * gm;
                    ds[i] = -g.data()[i] * gs;
                }
                let shape = x0.shape().to_vec();
                self.accumulate(grads, *mean, Tensor::new(shape.clone(), dm).expect("dm"));
                self.accumulate(grads, *log_scale, Tensor::new(shape, ds).expect("ds"));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Log-probability of `x` under the discretised Gaussian, with partial
/// derivatives with respect to the mean and the log standard deviation.
pub(crate) fn discretized_log_prob(x: f64, mean: f64, log_scale: f64) -> (f64, f64, f64) {
    let inv = (-log_scale).exp();
    let centered = x - mean;
    let plus = inv * (centered + HALF_BIN);
    let minus = inv * (centered - HALF_BIN);
    // d(plus)/d(mean) = -inv, d(plus)/d(log_scale) = -plus; same for minus.
    if x < -0.999 {
        let cdf = std_normal_cdf(plus);
        if cdf <= LOG_FLOOR {
            return (LOG_FLOOR.ln(), 0.0, 0.0);
        }
        let dlp = std_normal_pdf(plus) / cdf;
        (cdf.ln(), -inv * dlp, -plus * dlp)
    } else if x > 0.999 {
        let tail = std_normal_cdf(-minus);
        if tail <= LOG_FLOOR {
            return (LOG_FLOOR.ln(), 0.0, 0.0);
        }
        let dlm = -std_normal_pdf(minus) / tail;
        (tail.ln(), -inv * dlm, -minus * dlm)
    } else {
        let delta = std_normal_cdf(plus) - std_normal_cdf(minus);
        if delta <= LOG_FLOOR {
            return (LOG_FLOOR.ln(), 0.0, 0.0);
        }
        let dp = std_normal_pdf(plus) / delta;
        let dmn = -std_normal_pdf(minus) / delta;
        (
            delta.ln(),
            -inv * (dp + dmn),
            -(plus * dp + minus * dmn),
        )
    }
}

fn im2col(x: &[f64], bn: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let n = bn * hw;
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0; c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for i in 0..bn {
                    let src = &x[(i * c + ci) * hw..(i * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let drow = &mut dst[i * hw + y * w..i * hw + (y + 1) * w];
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize) as usize;
                        for xx in x_lo..x_hi {
                            drow[xx] = srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], bn: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let n = bn * hw;
    let pad = (k / 2) as isize;
    let mut x = vec![0.0; bn * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for i in 0..bn {
                    let dst = &mut x[(i * c + ci) * hw..(i * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = (w as isize - dx).min(w as isize) as usize;
                        for xx in x_lo..x_hi {
                            dst[sy as usize * w + (xx as isize + dx) as usize] +=
                                src[i * hw + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(loss)/d(leaf) for every entry of every leaf by central
    /// differences, rebuilding the tape from scratch for each probe.
    fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf gradient").clone();
            for k in 0..leaf.len() {
                let eval = |d: f64| {
                    let mut ls = leaves.clone();
                    ls[li].data_mut()[k] += d;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ls.iter().map(|t| g.variable(t.clone())).collect();
                    let l = build(&mut g, &vs);
                    g.value(l).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[k];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + an.abs().max(fd.abs())),
                    "leaf {li}[{k}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), &mut rng)
    }

    /// A fixed random projection to a scalar, so every output entry matters.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
        let shape = g.value(v).shape().to_vec();
        let w = rand(&shape, seed);
        let p = g.mul_const(v, w);
        g.sum(p)
    }

    #[test]
    fn conv2d_gradients() {
        for k in [1usize, 3] {
            check(
                vec![rand(&[2, 3, 5, 4], 1), rand(&[4, 3, k, k], 2), rand(&[4], 3)],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2]);
                    project(g, y, 4)
                },
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let x = rand(&[2, 2, 4, 3], 5);
        let w = rand(&[3, 2, 3, 3], 6);
        let b = rand(&[3], 7);
        let mut g = Graph::inference();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, bv);
        let y = g.value(y);
        let (h, wd) = (4isize, 3isize);
        for i in 0..2 {
            for o in 0..3 {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut s = b.data()[o];
                        for c in 0..2 {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if sy < 0 || sy >= h || sx < 0 || sx >= wd {
                                        continue;
                                    }
                                    s += w.data()[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.data()[((i * 2 + c) * 4 + sy as usize) * 3 + sx as usize];
                                }
                            }
                        }
                        let got = y.data()[((i * 3 + o) * 4 + yy as usize) * 3 + xx as usize];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_and_channel_offset_gradients() {
        check(
            vec![rand(&[3, 4], 1), rand(&[2, 4], 2), rand(&[2], 3), rand(&[3, 2, 2, 2], 4)],
            |g, v| {
                let e = g.linear(v[0], v[1], v[2]);
                let e = g.silu(e);
                let y = g.add_channel(v[3], e);
                project(g, y, 5)
            },
        );
    }

    #[test]
    fn group_norm_gradients() {
        check(
            vec![rand(&[2, 4, 3, 3], 1), rand(&[4], 2), rand(&[4], 3)],
            |g, v| {
                let y = g.group_norm(v[0], v[1], v[2], 2);
                project(g, y, 4)
            },
        );
    }

    #[test]
    fn spatial_op_gradients() {
        check(vec![rand(&[2, 2, 4, 4], 1), rand(&[2, 1, 4, 4], 2)], |g, v| {
            let p = g.avg_pool2(v[0]);
            let u = g.upsample2(p);
            let c = g.concat(u, v[1]);
            let s = g.slice_channels(c, 1, 2);
            let gp = g.global_avg_pool(s);
            let q = g.square(gp);
            let m = g.mean(q);
            let t = project(g, c, 3);
            g.add(m, t)
        });
    }

    #[test]
    fn elementwise_gradients() {
        check(vec![rand(&[2, 3], 1), rand(&[2, 3], 2)], |g, v| {
            let a = g.sigmoid(v[0]);
            let b = g.softplus(v[1]);
            let c = g.mul(a, b);
            let d = g.exp(c);
            let e = g.log(d);
            let f = g.sub(e, v[0]);
            let r = g.relu(f);
            let s = g.scale(r, 0.7);
            let k = g.add_const(s, &Tensor::full([2, 3], 0.25));
            let cl = g.clamp(v[1], -0.5, 0.5);
            let z = g.add(k, cl);
            project(g, z, 3)
        });
    }

    #[test]
    fn latent_kl_and_cholesky_gradients() {
        let n = 3;
        let diag_raw = rand(&[2, n], 1);
        check(
            vec![rand(&[2, n], 2), diag_raw.clone(), rand(&[2, 3], 3), rand(&[2, n], 4), diag_raw.map(|x| x * 0.5), rand(&[2, 3], 5)],
            |g, v| {
                let dq = g.softplus(v[1]);
                let lq = g.cholesky(dq, Some(v[2]));
                let dp = g.softplus(v[4]);
                let lp = g.cholesky(dp, Some(v[5]));
                let kl = g.latent_kl(v[0], lq, v[3], lp);
                project(g, kl, 6)
            },
        );
    }

    #[test]
    fn discretized_nll_gradients() {
        let x0 = Tensor::new([2, 3], vec![-1.0, 1.0, 0.2, 1.0, -1.0, -0.4]).unwrap();
        check(vec![rand(&[2, 3], 1).map(|x| 0.3 * x), rand(&[2, 3], 2).map(|x| 0.3 * x - 1.0)], move |g, v| {
            let n = g.discretized_nll(&x0, v[0], v[1]);
            g.sum(n)
        });
    }

    #[test]
    fn param_leaves_are_shared_within_a_tape() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full([2], 3.0)).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        let pg = g.param_grads(&grads, &store);
        assert_eq!(pg[0].as_ref().unwrap().data(), &[6.0, 6.0]);
    }
}
