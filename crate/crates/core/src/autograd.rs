//! Reverse-mode differentiation over a per-step tape.
//!
//! Every forward computation of a training step is recorded as a node on a
//! [`Tape`]. Trainable leaves are registered by key through [`Tape::param`];
//! constants (images, frozen parameters) through [`Tape::constant`] and never
//! receive gradients. [`Tape::backward`] returns the gradient of a scalar root
//! with respect to every parameter key that influenced it.
//!
//! All image-shaped tensors are single images laid out `[channels, height, width]`.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct RoiTaps {
    /// Per (roi, bin): (plane offset, weight) pairs shared by every channel.
    taps: Vec<Vec<(usize, f64)>>,
    bins: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Grl(Var, f64),
    Add(Var, Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    RoiAlign {
        x: Var,
        taps: RoiTaps,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    BceLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
    },
    WeightedSq {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    FocalLogits {
        z: Var,
        source: Vec<bool>,
        weights: Vec<f64>,
        gamma: f64,
    },
    SigmoidAbsDiff {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, key: &str) -> Option<&Tensor> {
        self.params.get(key).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Parameter gradients keyed by registration key. Parameters that did not
    /// influence the root are omitted.
    pub fn into_param_grads(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(k.clone(), g);
            }
        }
        out
    }
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: index bounds of all three operands are checked above for the
    // given strides; c is row-major m x n and does not alias a or b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let p = ho * wo;
    let mut cols = vec![0.0; c * k * k * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    gx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[base + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
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

/// Bilinear taps for one sampling point on an `h x w` plane, following the
/// usual ROI-align boundary convention (zero beyond one cell outside the map).
fn bilinear_taps(mut y: f64, mut x: f64, h: usize, w: usize, weight: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let mut y0 = y.floor() as usize;
    let mut x0 = x.floor() as usize;
    let y1;
    let x1;
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = y0;
        y = y0 as f64;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = x0;
        x = x0 as f64;
    } else {
        x1 = x0 + 1;
    }
    let ly = y - y0 as f64;
    let lx = x - x0 as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y0 * w + x0, weight * hy * hx));
    out.push((y0 * w + x1, weight * hy * lx));
    out.push((y1 * w + x0, weight * ly * hx));
    out.push((y1 * w + x1, weight * ly * lx));
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param => true,
            _ => parents.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Registers a trainable leaf. Registering the same key twice returns the
    /// same variable so gradients from every use accumulate in one place.
    pub fn param(&mut self, key: &str, t: &Tensor) -> Var {
        if let Some(v) = self.params.get(key) {
            return *v;
        }
        let v = self.push(t.clone(), Op::Param, &[]);
        self.params.insert(key.to_string(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,k,k]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, k) = (ws[0], ws[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let p = ho * wo;
        let q = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols = if direct {
            None
        } else {
            Some(im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo))
        };
        let mut out = vec![0.0; o * p];
        {
            let colsref: &[f64] = match &cols {
                Some(c) => c,
                None => self.value(x).data(),
            };
            gemm(o, q, p, self.value(w).data(), (q, 1), colsref, (p, 1), &mut out, 0.0);
        }
        let bias = self.value(b).data();
        for (oi, row) in out.chunks_mut(p).enumerate() {
            let bv = bias[oi];
            for v in row {
                *v += bv;
            }
        }
        let t = Tensor::from_vec(&[o, ho, wo], out).expect("conv shape");
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            &[x, w, b],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self.push(t, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        for v in t.data_mut() {
            *v = sigmoid(*v);
        }
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Gradient reversal: identity forward, `-scale * grad` backward.
    pub fn grl(&mut self, x: Var, scale: f64) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Grl(x, scale), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut t = self.value(a).clone();
        t.add_assign(self.value(b));
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let mut t = self.value(x).clone();
        t.scale_assign(k);
        self.push(t, Op::Scale(x, k), &[x])
    }

    /// `Σ w_i x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut t = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, w) in terms {
            let src = self.value(v).data();
            assert_eq!(src.len(), t.numel(), "weighted_sum shape mismatch");
            for (d, s) in t.data_mut().iter_mut().zip(src) {
                *d += w * s;
            }
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(t, Op::WeightedSum(terms.to_vec()), &parents)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let data = self.value(x).data();
        let out: Vec<f64> = (0..c)
            .map(|ci| data[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::from_vec(&[c], out).expect("gap shape");
        self.push(t, Op::GlobalAvgPool(x), &[x])
    }

    /// `y = x W^T + b` with `x: [R, F]` (any shape with `F` trailing elements
    /// per row), `W: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.value(w).shape().to_vec();
        let (o, f) = (ws[0], ws[1]);
        let n = self.value(x).numel();
        assert_eq!(n % f, 0, "linear input not divisible by fan-in");
        let r = n / f;
        let mut out = vec![0.0; r * o];
        gemm(r, f, o, self.value(x).data(), (f, 1), self.value(w).data(), (1, f), &mut out, 0.0);
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += bv;
            }
        }
        let t = Tensor::from_vec(&[r, o], out).expect("linear shape");
        self.push(t, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Bilinear ROI feature pooling. `boxes` are in input-image pixels;
    /// `spatial_scale` maps pixels to feature cells. Output `[R, C*P*P]`.
    pub fn roi_align(
        &mut self,
        x: Var,
        boxes: &[[f64; 4]],
        spatial_scale: f64,
        pooled: usize,
        samples: usize,
    ) -> Var {
        let s = self.value(x).shape().to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let bins = pooled * pooled;
        let norm = 1.0 / (samples * samples) as f64;
        let mut taps = Vec::with_capacity(boxes.len() * bins);
        for bx in boxes {
            let x1 = bx[0] * spatial_scale - 0.5;
            let y1 = bx[1] * spatial_scale - 0.5;
            let x2 = bx[2] * spatial_scale - 0.5;
            let y2 = bx[3] * spatial_scale - 0.5;
            let bin_w = (x2 - x1) / pooled as f64;
            let bin_h = (y2 - y1) / pooled as f64;
            for py in 0..pooled {
                for px in 0..pooled {
                    let mut t = Vec::with_capacity(4 * samples * samples);
                    for sy in 0..samples {
                        let yy = y1 + py as f64 * bin_h + (sy as f64 + 0.5) * bin_h / samples as f64;
                        for sx in 0..samples {
                            let xx =
                                x1 + px as f64 * bin_w + (sx as f64 + 0.5) * bin_w / samples as f64;
                            bilinear_taps(yy, xx, h, w, norm, &mut t);
                        }
                    }
                    taps.push(t);
                }
            }
        }
        let r = boxes.len();
        let data = self.value(x).data();
        let mut out = vec![0.0; r * c * bins];
        for ri in 0..r {
            for ci in 0..c {
                let plane = &data[ci * h * w..(ci + 1) * h * w];
                for bin in 0..bins {
                    out[(ri * c + ci) * bins + bin] =
                        taps[ri * bins + bin].iter().map(|&(o, wt)| wt * plane[o]).sum();
                }
            }
        }
        let t = Tensor::from_vec(&[r, c * bins], out).expect("roi shape");
        self.push(
            t,
            Op::RoiAlign {
                x,
                taps: RoiTaps { taps, bins },
            },
            &[x],
        )
    }

    /// Flat gather of `x`'s elements at `idx`; output shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let data = self.value(x).data();
        let out: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
        let t = Tensor::from_vec(&[idx.len()], out).expect("gather shape");
        self.push(t, Op::Gather { x, idx }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let mut out = Vec::new();
        for &v in xs {
            out.extend_from_slice(self.value(v).data());
        }
        let n = out.len();
        let t = Tensor::from_vec(&[n], out).expect("concat shape");
        self.push(t, Op::Concat(xs.to_vec()), xs)
    }

    /// `Σ_r w_r · (−log softmax(z_r)[label_r])` for `logits: [R, K]`.
    pub fn softmax_ce(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<f64>) -> Var {
        let s = self.value(logits).shape().to_vec();
        let k = s[1];
        assert_eq!(labels.len(), s[0]);
        assert_eq!(weights.len(), s[0]);
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (r, (&lab, &w)) in labels.iter().zip(&weights).enumerate() {
            let row = &data[r * k..(r + 1) * k];
            total += w * (log_sum_exp(row) - row[lab]);
        }
        self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
            },
            &[logits],
        )
    }

    /// `Σ w · BCE(σ(x), t)` evaluated stably from logits.
    pub fn bce_logits(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let data = self.value(x).data();
        assert_eq!(data.len(), targets.len());
        let total = data
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                x,
                targets,
                weights,
            },
            &[x],
        )
    }

    pub fn smooth_l1(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>, beta: f64) -> Var {
        let data = self.value(x).data();
        assert_eq!(data.len(), targets.len());
        let total = data
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&v, &t), &w)| {
                let d = (v - t).abs();
                w * if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta }
            })
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            },
            &[x],
        )
    }

    /// `Σ w (x − t)²`.
    pub fn weighted_sq(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let data = self.value(x).data();
        assert_eq!(data.len(), targets.len());
        let total = data
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&v, &t), &w)| w * (v - t) * (v - t))
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::WeightedSq {
                x,
                targets,
                weights,
            },
            &[x],
        )
    }

    /// Focal domain loss over logits `z` with `p = σ(z)`: source entries
    /// contribute `−w (1−p)^γ log p`, target entries `−w p^γ log(1−p)`.
    pub fn focal_logits(&mut self, z: Var, source: Vec<bool>, weights: Vec<f64>, gamma: f64) -> Var {
        let data = self.value(z).data();
        assert_eq!(data.len(), source.len());
        let total = data
            .iter()
            .zip(&source)
            .zip(&weights)
            .map(|((&zv, &src), &w)| w * focal_logit_term(zv, src, gamma))
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::FocalLogits {
                z,
                source,
                weights,
                gamma,
            },
            &[z],
        )
    }

    /// `Σ w |σ(x) − t|` with constant targets `t`.
    pub fn sigmoid_abs_diff(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>) -> Var {
        let data = self.value(x).data();
        assert_eq!(data.len(), targets.len());
        let total = data
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&v, &t), &w)| w * (sigmoid(v) - t).abs())
            .sum();
        self.push(
            Tensor::scalar(total),
            Op::SigmoidAbsDiff {
                x,
                targets,
                weights,
            },
            &[x],
        )
    }

    /// Gradient of the scalar `root` with respect to every node upstream of it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Input | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let (o, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[1], os[2]);
                let p = ho * wo;
                let q = c * k * k;
                let colsref: &[f64] = match cols {
                    Some(c) => c,
                    None => self.value(*x).data(),
                };
                if self.wants(*w) {
                    let gw = grad_slot(grads, *w, ws);
                    gemm(o, p, q, gd, (p, 1), colsref, (1, p), gw.data_mut(), 1.0);
                }
                if self.wants(*b) {
                    let gb = grad_slot(grads, *b, self.value(*b).shape());
                    for (oi, row) in gd.chunks(p).enumerate() {
                        gb.data_mut()[oi] += row.iter().sum::<f64>();
                    }
                }
                if self.wants(*x) {
                    let wdata = self.value(*w).data();
                    if cols.is_none() {
                        let gx = grad_slot(grads, *x, xs);
                        gemm(q, o, p, wdata, (1, q), gd, (p, 1), gx.data_mut(), 1.0);
                    } else {
                        let mut gcols = vec![0.0; q * p];
                        gemm(q, o, p, wdata, (1, q), gd, (p, 1), &mut gcols, 0.0);
                        let gx = grad_slot(grads, *x, xs);
                        col2im(&gcols, gx.data_mut(), c, h, wd, k, *stride, *pad, ho, wo);
                    }
                }
            }
            Op::Relu(x) => {
                let y = node.value.data();
                let gx = grad_slot(grads, *x, node.value.shape());
                for ((d, &gv), &yv) in gx.data_mut().iter_mut().zip(gd).zip(y) {
                    if yv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let gx = grad_slot(grads, *x, node.value.shape());
                for ((d, &gv), &v) in gx.data_mut().iter_mut().zip(gd).zip(xv) {
                    *d += if v > 0.0 { gv } else { gv * slope };
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = grad_slot(grads, *x, node.value.shape());
                for ((d, &gv), &yv) in gx.data_mut().iter_mut().zip(gd).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            Op::Grl(x, scale) => {
                let gx = grad_slot(grads, *x, node.value.shape());
                for (d, &gv) in gx.data_mut().iter_mut().zip(gd) {
                    *d -= scale * gv;
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        grad_slot(grads, *v, node.value.shape()).add_assign(g);
                    }
                }
            }
            Op::Scale(x, k) => {
                let gx = grad_slot(grads, *x, node.value.shape());
                for (d, &gv) in gx.data_mut().iter_mut().zip(gd) {
                    *d += k * gv;
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        let gv = grad_slot(grads, v, node.value.shape());
                        for (d, &s) in gv.data_mut().iter_mut().zip(gd) {
                            *d += w * s;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[1] * s[2];
                let gx = grad_slot(grads, *x, s);
                for (ci, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    let v = gd[ci] / hw as f64;
                    for d in chunk {
                        *d += v;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w).shape();
                let (o, f) = (ws[0], ws[1]);
                let r = node.value.shape()[0];
                if self.wants(*x) {
                    let gx = grad_slot(grads, *x, self.value(*x).shape());
                    gemm(r, o, f, gd, (o, 1), self.value(*w).data(), (f, 1), gx.data_mut(), 1.0);
                }
                if self.wants(*w) {
                    let gw = grad_slot(grads, *w, ws);
                    gemm(o, r, f, gd, (1, o), self.value(*x).data(), (f, 1), gw.data_mut(), 1.0);
                }
                if self.wants(*b) {
                    let gb = grad_slot(grads, *b, self.value(*b).shape());
                    for row in gd.chunks(o) {
                        for (d, &v) in gb.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::RoiAlign { x, taps } => {
                let s = self.value(*x).shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                let bins = taps.bins;
                let r = node.value.shape()[0];
                let gx = grad_slot(grads, *x, s);
                let gxd = gx.data_mut();
                for ri in 0..r {
                    for ci in 0..c {
                        let plane = &mut gxd[ci * hw..(ci + 1) * hw];
                        for bin in 0..bins {
                            let gv = gd[(ri * c + ci) * bins + bin];
                            if gv == 0.0 {
                                continue;
                            }
                            for &(off, wt) in &taps.taps[ri * bins + bin] {
                                plane[off] += wt * gv;
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let gx = grad_slot(grads, *x, self.value(*x).shape());
                let d = gx.data_mut();
                for (&i, &gv) in idx.iter().zip(gd) {
                    d[i] += gv;
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).numel();
                    if self.wants(v) {
                        let gv = grad_slot(grads, v, self.value(v).shape());
                        for (d, &s) in gv.data_mut().iter_mut().zip(&gd[off..off + n]) {
                            *d += s;
                        }
                    }
                    off += n;
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                weights,
            } => {
                let s = self.value(*logits).shape();
                let k = s[1];
                let z = self.value(*logits).data();
                let gl = grad_slot(grads, *logits, s);
                let gld = gl.data_mut();
                for (r, (&lab, &w)) in labels.iter().zip(weights).enumerate() {
                    let row = &z[r * k..(r + 1) * k];
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        let pj = (row[j] - lse).exp();
                        let t = if j == lab { 1.0 } else { 0.0 };
                        gld[r * k + j] += gd[0] * w * (pj - t);
                    }
                }
            }
            Op::BceLogits {
                x,
                targets,
                weights,
            } => {
                let z = self.value(*x).data();
                let gx = grad_slot(grads, *x, self.value(*x).shape());
                for (i, d) in gx.data_mut().iter_mut().enumerate() {
                    *d += gd[0] * weights[i] * (sigmoid(z[i]) - targets[i]);
                }
            }
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            } => {
                let v = self.value(*x).data();
                let gx = grad_slot(grads, *x, self.value(*x).shape());
                for (i, d) in gx.data_mut().iter_mut().enumerate() {
                    let diff = v[i] - targets[i];
                    let dd = if diff.abs() < *beta {
                        diff / beta
                    } else {
                        diff.signum()
                    };
                    *d += gd[0] * weights[i] * dd;
                }
            }
            Op::WeightedSq {
                x,
                targets,
                weights,
            } => {
                let v = self.value(*x).data();
                let gx = grad_slot(grads, *x, self.value(*x).shape());
                for (i, d) in gx.data_mut().iter_mut().enumerate() {
                    *d += gd[0] * 2.0 * weights[i] * (v[i] - targets[i]);
                }
            }
            Op::FocalLogits {
                z,
                source,
                weights,
                gamma,
            } => {
                let v = self.value(*z).data();
                let gz = grad_slot(grads, *z, self.value(*z).shape());
                for (i, d) in gz.data_mut().iter_mut().enumerate() {
                    *d += gd[0] * weights[i] * focal_logit_grad(v[i], source[i], *gamma);
                }
            }
            Op::SigmoidAbsDiff {
                x,
                targets,
                weights,
            } => {
                let v = self.value(*x).data();
                let gx = grad_slot(grads, *x, self.value(*x).shape());
                for (i, d) in gx.data_mut().iter_mut().enumerate() {
                    let s = sigmoid(v[i]);
                    let diff = s - targets[i];
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *d += gd[0] * weights[i] * sign * s * (1.0 - s);
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn focal_term(p: f64, source: bool, gamma: f64) -> f64 {
    if source {
        -(1.0 - p).powf(gamma) * p.ln()
    } else {
        -p.powf(gamma) * (1.0 - p).ln()
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// [`focal_term`] at `p = σ(z)` with the logarithms in logit space.
pub(crate) fn focal_logit_term(z: f64, source: bool, gamma: f64) -> f64 {
    let p = sigmoid(z);
    if source {
        (1.0 - p).powf(gamma) * softplus(-z)
    } else {
        p.powf(gamma) * softplus(z)
    }
}

fn focal_logit_grad(z: f64, source: bool, gamma: f64) -> f64 {
    let p = sigmoid(z);
    let q = 1.0 - p;
    if source {
        -gamma * p * q.powf(gamma) * softplus(-z) - q.powf(gamma + 1.0)
    } else {
        gamma * q * p.powf(gamma) * softplus(z) + p.powf(gamma + 1.0)
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}
