//! Per-forward-pass compute graph with reverse-mode differentiation.
//!
//! Ops execute eagerly and record a node; [`Graph::backward`] walks the
//! node list in reverse, accumulating gradients additively over fan-out.
//! Every op validates its output for NaN/Inf and fails loudly.

use std::sync::Arc;

use rayon::prelude::*;

use super::kernels::{self, ConvDims};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-aligned broadcast pattern: `a` viewed as [outer, mid, inner],
/// `b` holds `mid` elements applied across outer and inner.
#[derive(Copy, Clone, Debug)]
struct Bcast {
    outer: usize,
    mid: usize,
    inner: usize,
}

#[derive(Copy, Clone, Debug)]
struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_batched: bool,
}

#[derive(Clone, Debug)]
enum NormKind<T> {
    Batch,
    BatchFixed { mean: Tensor<T>, var: Tensor<T> },
    Layer,
    Instance,
}

#[derive(Clone, Debug)]
struct NormSaved<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

enum Op<T: Element> {
    Leaf,
    Bin {
        kind: BinKind,
        bc: Bcast,
    },
    MulScalar {
        c: T,
    },
    Matmul {
        d: MatmulDims,
    },
    Conv2d {
        d: ConvDims,
    },
    Deconv2x2 {
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    },
    MaxPool2 {
        h: usize,
        w: usize,
        codes: Vec<u8>,
    },
    GlobalMean {
        hw: usize,
    },
    Bilinear {
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Gelu,
    Sigmoid,
    Exp,
    Softmax {
        outer: usize,
        len: usize,
        inner: usize,
    },
    Norm {
        kind: NormKind<T>,
        saved: NormSaved<T>,
    },
    ReduceSum {
        axis: usize,
    },
    SumAll,
    MeanAll,
    Reshape,
    Permute {
        perm: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    Roll2d {
        sh: isize,
        sw: isize,
    },
    Pad2d {
        pads: [usize; 4],
    },
    Crop2d {
        crops: [usize; 4],
    },
    DiceCe {
        labels: Arc<Vec<u8>>,
        classes: usize,
        w_dice: f64,
        w_ce: f64,
        smooth: f64,
    },
}

struct Node<T: Element> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Element> Grads<T> {
    /// Gradient of the loss w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Topologically ordered op tape; built per forward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `v`.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert a tensor as a graph input. `needs_grad` marks trainable leaves.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Result<Var> {
        let v = self.push(Op::Leaf, Vec::new(), value, "leaf")?;
        self.nodes[v.0].needs_grad = needs_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    // ---- elementwise / broadcast ----

    fn resolve_bcast(a: &[usize], b: &[usize]) -> Result<Bcast> {
        if b.len() > a.len() {
            return Err(Error::shape(
                "broadcast",
                format!("rhs rank {} exceeds lhs rank {}", b.len(), a.len()),
            ));
        }
        let offset = a.len() - b.len();
        let mut padded = vec![1usize; a.len()];
        padded[offset..].copy_from_slice(b);
        let first = padded.iter().position(|&d| d != 1).unwrap_or(a.len());
        let last = padded.iter().rposition(|&d| d != 1).map_or(first, |i| i + 1);
        for i in first..last {
            if padded[i] != a[i] {
                return Err(Error::shape(
                    "broadcast",
                    format!("cannot align {b:?} against {a:?}"),
                ));
            }
        }
        Ok(Bcast {
            outer: a[..first].iter().product(),
            mid: a[first..last].iter().product(),
            inner: a[last..].iter().product(),
        })
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bc = Self::resolve_bcast(&sa, &sb)?;
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![T::ZERO; av.len()];
        let inner = bc.inner;
        let mid = bc.mid;
        let segments = bc.outer * mid;
        let apply = |seg0: usize, o: &mut [T], x: &[T]| {
            for (si, (oseg, xseg)) in o.chunks_mut(inner).zip(x.chunks(inner)).enumerate() {
                let bval = bv[(seg0 + si) % mid];
                match kind {
                    BinKind::Add => {
                        for (y, v) in oseg.iter_mut().zip(xseg) {
                            *y = *v + bval;
                        }
                    }
                    BinKind::Sub => {
                        for (y, v) in oseg.iter_mut().zip(xseg) {
                            *y = *v - bval;
                        }
                    }
                    BinKind::Mul => {
                        for (y, v) in oseg.iter_mut().zip(xseg) {
                            *y = *v * bval;
                        }
                    }
                    BinKind::Div => {
                        for (y, v) in oseg.iter_mut().zip(xseg) {
                            *y = *v / bval;
                        }
                    }
                }
            }
        };
        if av.len() >= 2 * ELEMWISE_GRAIN && inner > 0 {
            let seg_grain = (ELEMWISE_GRAIN / inner.max(1)).max(1);
            out.par_chunks_mut(seg_grain * inner)
                .zip(av.par_chunks(seg_grain * inner))
                .enumerate()
                .for_each(|(ci, (o, x))| apply(ci * seg_grain, o, x));
        } else {
            apply(0, &mut out, av);
        }
        let _ = segments;
        let value = Tensor::from_vec(&sa, out)?;
        self.push(Op::Bin { kind, bc }, vec![a, b], value, "binary")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Div, a, b)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x).values();
        let out: Vec<T> = xv.iter().map(|&v| v * c).collect();
        let value = Tensor::from_vec(self.shape(x).to_vec().as_slice(), out)?;
        self.push(Op::MulScalar { c }, vec![x], value, "mul_scalar")
    }

    // ---- matmul ----

    /// Batched matrix product. `a`: [..., m, k]; `b`: [..., k, n] or [k, n]
    /// (shared across the batch). `ta`/`tb` treat the trailing two axes of
    /// the respective operand as transposed.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("ranks {sa:?} x {sb:?}")));
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {ka} vs {kb} ({sa:?} x {sb:?})"),
            ));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() > 2;
        if b_batched {
            let bb: usize = sb[..sb.len() - 2].iter().product();
            if bb != batch {
                return Err(Error::shape(
                    "matmul",
                    format!("batch extents differ: {batch} vs {bb}"),
                ));
            }
        }
        let d = MatmulDims {
            batch,
            m,
            k: ka,
            n,
            ta,
            tb,
            b_batched,
        };
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![T::ZERO; batch * m * n];
        let (rsa, csa) = if ta { (1, m as isize) } else { (ka as isize, 1) };
        let (rsb, csb) = if tb { (1, ka as isize) } else { (n as isize, 1) };
        let a_stride = ar * ac;
        let b_stride = if b_batched { br * bc } else { 0 };
        if batch == 1 {
            // single large product: split output rows into work-sized
            // chunks (fixed by shape, so results are run-deterministic)
            let grain = matmul_row_grain(ka, n).min(m.max(1));
            out.par_chunks_mut(grain * n)
                .enumerate()
                .for_each(|(ci, c)| {
                    let r0 = ci * grain;
                    let rows = c.len() / n;
                    let ai = &av[r0 * rsa as usize..];
                    T::gemm(
                        rows, ka, n, T::ONE, ai, rsa, csa, bv, rsb, csb, T::ZERO, c,
                        n as isize, 1,
                    );
                });
        } else {
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
                let ai = &av[i * a_stride..(i + 1) * a_stride];
                let bi = &bv[i * b_stride..i * b_stride + br * bc];
                T::gemm(
                    m, ka, n, T::ONE, ai, rsa, csa, bi, rsb, csb, T::ZERO, c, n as isize, 1,
                );
            });
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let value = Tensor::from_vec(&shape, out)?;
        self.push(Op::Matmul { d }, vec![a, b], value, "matmul")
    }

    // ---- convolutions ----

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        same: bool,
    ) -> Result<Var> {
        let d = ConvDims::resolve(self.shape(x), self.shape(kernel), stride, dilation, same)?;
        if let Some(b) = bias {
            if self.shape(b) != [d.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} != [{}]", self.shape(b), d.cout),
                ));
            }
        }
        let mut out = vec![T::ZERO; d.n * d.cout * d.oh * d.ow];
        kernels::conv2d_fwd(
            &d,
            self.value(x).values(),
            self.value(kernel).values(),
            bias.map(|b| self.value(b).values()),
            &mut out,
        );
        let value = Tensor::from_vec(&[d.n, d.cout, d.oh, d.ow], out)?;
        let mut inputs = vec![x, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.push(Op::Conv2d { d }, inputs, value, "conv2d")
    }

    /// Transposed convolution, kernel 2x2 stride 2. kernel: [cin, cout, 2, 2].
    pub fn deconv2x2(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 4 || sk.len() != 4 || sk[2] != 2 || sk[3] != 2 || sk[0] != sx[1] {
            return Err(Error::shape(
                "deconv2x2",
                format!("input {sx:?} kernel {sk:?}"),
            ));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sk[1];
        let mut out = vec![T::ZERO; n * cout * 4 * h * w];
        kernels::deconv2x2_fwd(
            n,
            cin,
            cout,
            h,
            w,
            self.value(x).values(),
            self.value(kernel).values(),
            &mut out,
        );
        let value = Tensor::from_vec(&[n, cout, 2 * h, 2 * w], out)?;
        self.push(Op::Deconv2x2 { cin, cout, h, w }, vec![x, kernel], value, "deconv2x2")
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool2", format!("extent too small {s:?}")));
        }
        let mut out = vec![T::ZERO; n * c * (h / 2) * (w / 2)];
        let mut codes = Vec::new();
        kernels::maxpool2_fwd(n, c, h, w, self.value(x).values(), &mut out, &mut codes);
        let value = Tensor::from_vec(&[n, c, h / 2, w / 2], out)?;
        self.push(Op::MaxPool2 { h, w, codes }, vec![x], value, "maxpool2")
    }

    /// Mean over the spatial plane: [N,C,H,W] -> [N,C].
    pub fn global_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_mean", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::ONE / T::from_f64(hw as f64);
        let xv = self.value(x).values();
        let out: Vec<T> = xv
            .chunks(hw)
            .map(|p| {
                let mut acc = T::ZERO;
                for v in p {
                    acc += *v;
                }
                acc * inv
            })
            .collect();
        let value = Tensor::from_vec(&[s[0], s[1]], out)?;
        self.push(Op::GlobalMean { hw }, vec![x], value, "global_mean")
    }

    /// Bilinear resize with half-pixel centers: [N,C,H,W] -> [N,C,oh,ow].
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("bilinear", format!("{s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let mut out = vec![T::ZERO; s[0] * s[1] * oh * ow];
        kernels::bilinear_fwd(h, w, oh, ow, self.value(x).values(), &mut out);
        let value = Tensor::from_vec(&[s[0], s[1], oh, ow], out)?;
        self.push(Op::Bilinear { h, w, oh, ow }, vec![x], value, "bilinear")
    }

    /// Upsample by integer factor (>= 2).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(Error::shape("upsample", "factor must be >= 2"));
        }
        let s = self.shape(x).to_vec();
        self.bilinear_resize(x, s[2] * factor, s[3] * factor)
    }

    // ---- activations ----

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = map_elementwise(self.value(x).values(), |v| v * gauss_cdf(v));
        let value = Tensor::from_vec(self.shape(x).to_vec().as_slice(), out)?;
        self.push(Op::Gelu, vec![x], value, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = map_elementwise(self.value(x).values(), |v| T::ONE / (T::ONE + (-v).exp()));
        let value = Tensor::from_vec(self.shape(x).to_vec().as_slice(), out)?;
        self.push(Op::Sigmoid, vec![x], value, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = map_elementwise(self.value(x).values(), |v| v.exp());
        let value = Tensor::from_vec(self.shape(x).to_vec().as_slice(), out)?;
        self.push(Op::Exp, vec![x], value, "exp")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; self.value(x).numel()];
        kernels::softmax_fwd(outer, len, inner, self.value(x).values(), &mut out);
        let value = Tensor::from_vec(&s, out)?;
        self.push(Op::Softmax { outer, len, inner }, vec![x], value, "softmax")
    }

    // ---- normalization ----

    fn norm_impl(
        &mut self,
        kind: NormKind<T>,
        x: Var,
        gain: Var,
        offset: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        if eps <= 0.0 {
            return Err(Error::config("normalization epsilon must be > 0"));
        }
        let s = self.shape(x).to_vec();
        let xv = self.value(x).values();
        let (groups, group_len) = norm_groups(&kind, &s)?;
        let gv = self.value(gain).values();
        let bv = self.value(offset).values();
        let affine_len = norm_affine_len(&kind, &s);
        if gv.len() != affine_len || bv.len() != affine_len {
            return Err(Error::shape(
                "normalize",
                format!(
                    "gain/offset length {}/{} != normalized extent {affine_len}",
                    gv.len(),
                    bv.len()
                ),
            ));
        }
        let mut mean = vec![T::ZERO; groups];
        let mut var = vec![T::ZERO; groups];
        match &kind {
            NormKind::BatchFixed { mean: m, var: v } => {
                mean.copy_from_slice(m.values());
                var.copy_from_slice(v.values());
            }
            _ => {
                let inv_len = T::ONE / T::from_f64(group_len as f64);
                for g in 0..groups {
                    let mut acc = T::ZERO;
                    for_group(&kind, &s, g, |idx| acc += xv[idx]);
                    let mu = acc * inv_len;
                    let mut vv = T::ZERO;
                    for_group(&kind, &s, g, |idx| {
                        let d = xv[idx] - mu;
                        vv += d * d;
                    });
                    mean[g] = mu;
                    var[g] = vv * inv_len;
                }
            }
        }
        let epst = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + epst).sqrt()).collect();
        let mut out = vec![T::ZERO; xv.len()];
        for g in 0..groups {
            let (mu, istd) = (mean[g], inv_std[g]);
            for_group_affine(&kind, &s, g, |idx, aff| {
                out[idx] = (xv[idx] - mu) * istd * gv[aff] + bv[aff];
            });
        }
        let value = Tensor::from_vec(&s, out)?;
        let saved = NormSaved {
            mean: mean.clone(),
            inv_std,
        };
        let v = self.push(
            Op::Norm { kind, saved },
            vec![x, gain, offset],
            value,
            "normalize",
        )?;
        Ok((v, mean, var))
    }

    /// Batch normalization over (N,H,W) per channel; returns batch stats
    /// so the caller can maintain running estimates.
    pub fn norm_batch(
        &mut self,
        x: Var,
        gain: Var,
        offset: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        self.norm_impl(NormKind::Batch, x, gain, offset, eps)
    }

    /// Batch normalization with frozen statistics (eval mode).
    pub fn norm_batch_fixed(
        &mut self,
        x: Var,
        gain: Var,
        offset: Var,
        mean: Tensor<T>,
        var: Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        Ok(self
            .norm_impl(NormKind::BatchFixed { mean, var }, x, gain, offset, eps)?
            .0)
    }

    /// Layer normalization over the last axis of `[..., C]`.
    pub fn norm_layer(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        Ok(self.norm_impl(NormKind::Layer, x, gain, offset, eps)?.0)
    }

    /// Instance normalization over (H,W) per (N,C).
    pub fn norm_instance(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        Ok(self.norm_impl(NormKind::Instance, x, gain, offset, eps)?.0)
    }

    // ---- reductions ----

    /// Sum along `axis`, keeping it as extent 1.
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("reduce_sum", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xv = self.value(x).values();
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, v) in dst.iter_mut().zip(&xv[base..base + inner]) {
                    *d += *v;
                }
            }
        }
        let mut shape = s.clone();
        shape[axis] = 1;
        let value = Tensor::from_vec(&shape, out)?;
        self.push(Op::ReduceSum { axis }, vec![x], value, "reduce_sum")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::ZERO;
        for v in self.value(x).values() {
            acc += *v;
        }
        let value = Tensor::scalar(acc);
        self.push(Op::SumAll, vec![x], value, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).values();
        let mut acc = T::ZERO;
        for v in xv {
            acc += *v;
        }
        let value = Tensor::scalar(acc / T::from_f64(xv.len() as f64));
        self.push(Op::MeanAll, vec![x], value, "mean_all")
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        self.push(Op::Reshape, vec![x], value, "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if perm.len() != s.len() {
            return Err(Error::shape("permute", format!("perm {perm:?} vs {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(self.value(x).values(), &s, perm);
        let value = Tensor::from_vec(&out_shape, out)?;
        self.push(
            Op::Permute {
                perm: perm.to_vec(),
            },
            vec![x],
            value,
            "permute",
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let s0 = self.shape(xs[0]).to_vec();
        let mut axis_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s.iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} vs {:?}", s, s0),
                ));
            }
            axis_total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut shape = s0.clone();
        shape[axis] = axis_total;
        let mut out = vec![T::ZERO; outer * axis_total * inner];
        let mut offset = 0;
        for &v in xs {
            let len = self.shape(v)[axis];
            let xv = self.value(v).values();
            for o in 0..outer {
                let src = &xv[o * len * inner..(o + 1) * len * inner];
                let dst_base = (o * axis_total + offset) * inner;
                out[dst_base..dst_base + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let value = Tensor::from_vec(&shape, out)?;
        self.push(Op::Concat { axis }, xs.to_vec(), value, "concat")
    }

    /// Cyclic shift of axes 1,2 of a [B,H,W,C] tensor.
    pub fn roll2d(&mut self, x: Var, sh: isize, sw: isize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("roll2d", format!("{s:?}")));
        }
        let out = roll_data(self.value(x).values(), &s, sh, sw);
        let value = Tensor::from_vec(&s, out)?;
        self.push(Op::Roll2d { sh, sw }, vec![x], value, "roll2d")
    }

    /// Zero padding [top, bottom, left, right] on the spatial axes of NCHW.
    pub fn pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("pad2d", format!("{s:?}")));
        }
        let [t, b, l, r] = pads;
        if t + b + l + r == 0 {
            return Ok(x);
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h + t + b, w + l + r);
        let xv = self.value(x).values();
        let mut out = vec![T::ZERO; s[0] * s[1] * oh * ow];
        for p in 0..s[0] * s[1] {
            for i in 0..h {
                let src = &xv[p * h * w + i * w..p * h * w + (i + 1) * w];
                let dst = p * oh * ow + (i + t) * ow + l;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], oh, ow], out)?;
        self.push(Op::Pad2d { pads }, vec![x], value, "pad2d")
    }

    /// Crop [top, bottom, left, right] from the spatial axes of NCHW.
    pub fn crop2d(&mut self, x: Var, crops: [usize; 4]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("crop2d", format!("{s:?}")));
        }
        let [t, b, l, r] = crops;
        if t + b + l + r == 0 {
            return Ok(x);
        }
        let (h, w) = (s[2], s[3]);
        if t + b >= h || l + r >= w {
            return Err(Error::shape("crop2d", format!("crop {crops:?} of {s:?}")));
        }
        let (oh, ow) = (h - t - b, w - l - r);
        let xv = self.value(x).values();
        let mut out = vec![T::ZERO; s[0] * s[1] * oh * ow];
        for p in 0..s[0] * s[1] {
            for i in 0..oh {
                let src = p * h * w + (i + t) * w + l;
                let dst = p * oh * ow + i * ow;
                out[dst..dst + ow].copy_from_slice(&xv[src..src + ow]);
            }
        }
        let value = Tensor::from_vec(&[s[0], s[1], oh, ow], out)?;
        self.push(Op::Crop2d { crops }, vec![x], value, "crop2d")
    }

    // ---- loss ----

    /// Combined cross-entropy and soft-Dice loss over per-pixel class
    /// probabilities [N,C,H,W] against integer labels [N,H,W].
    pub fn dice_ce(
        &mut self,
        probs: Var,
        labels: Arc<Vec<u8>>,
        w_dice: f64,
        w_ce: f64,
    ) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("dice_ce", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if labels.len() != n * h * w {
            return Err(Error::shape(
                "dice_ce",
                format!("labels {} != {}", labels.len(), n * h * w),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::data(format!("label {bad} out of range (C={c})")));
        }
        let smooth = 1e-5;
        let pv = self.value(probs).values();
        let hw = h * w;
        let npix = (n * hw) as f64;
        // cross entropy
        let mut ce = 0.0f64;
        for ni in 0..n {
            for pix in 0..hw {
                let t = labels[ni * hw + pix] as usize;
                let p = pv[(ni * c + t) * hw + pix].to_f64().max(1e-12);
                ce -= p.ln();
            }
        }
        ce /= npix;
        // batch-aggregated soft dice per foreground class
        let mut dice_sum = 0.0f64;
        for cls in 1..c {
            let (mut sp, mut sg, mut si) = (0.0f64, 0.0f64, 0.0f64);
            for ni in 0..n {
                for pix in 0..hw {
                    let p = pv[(ni * c + cls) * hw + pix].to_f64();
                    let g = (labels[ni * hw + pix] as usize == cls) as u8 as f64;
                    sp += p;
                    sg += g;
                    si += p * g;
                }
            }
            dice_sum += (2.0 * si + smooth) / (sp + sg + smooth);
        }
        let dice_loss = 1.0 - dice_sum / (c - 1).max(1) as f64;
        let total = w_ce * ce + w_dice * dice_loss;
        let value = Tensor::scalar(T::from_f64(total));
        self.push(
            Op::DiceCe {
                labels,
                classes: c,
                w_dice,
                w_ce,
                smooth,
            },
            vec![probs],
            value,
            "dice_ce",
        )
    }

    // ---- backward ----

    /// Reverse accumulation from a scalar loss. Gradients for all
    /// reachable vars that need them are returned.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut slots: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            if slots[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let dy = slots[idx].take().unwrap();
            self.backprop_node(idx, &dy, &mut slots)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                slots[idx] = Some(dy);
            }
        }
        Ok(Grads { slots })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn grad_slot<'a>(
        slots: &'a mut [Option<Vec<T>>],
        v: Var,
        numel: usize,
    ) -> &'a mut Vec<T> {
        slots[v.0].get_or_insert_with(|| vec![T::ZERO; numel])
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, idx: usize, dy: &[T], slots: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Bin { kind, bc } => {
                let (a, b) = (ins[0], ins[1]);
                let av = self.value(a).values();
                let bv = self.value(b).values();
                let (outer, mid, inner) = (bc.outer, bc.mid, bc.inner);
                if self.wants(a) {
                    let ga = Self::grad_slot(slots, a, av.len());
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            for (g, d) in ga.iter_mut().zip(dy) {
                                *g += *d;
                            }
                        }
                        BinKind::Mul => {
                            for o in 0..outer {
                                for m in 0..mid {
                                    let base = (o * mid + m) * inner;
                                    let bval = bv[m];
                                    for i in 0..inner {
                                        ga[base + i] += dy[base + i] * bval;
                                    }
                                }
                            }
                        }
                        BinKind::Div => {
                            for o in 0..outer {
                                for m in 0..mid {
                                    let base = (o * mid + m) * inner;
                                    let bval = bv[m];
                                    for i in 0..inner {
                                        ga[base + i] += dy[base + i] / bval;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.wants(b) {
                    let gb = Self::grad_slot(slots, b, bv.len());
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            let mut acc = T::ZERO;
                            match kind {
                                BinKind::Add => {
                                    for i in 0..inner {
                                        acc += dy[base + i];
                                    }
                                }
                                BinKind::Sub => {
                                    for i in 0..inner {
                                        acc -= dy[base + i];
                                    }
                                }
                                BinKind::Mul => {
                                    for i in 0..inner {
                                        acc += dy[base + i] * av[base + i];
                                    }
                                }
                                BinKind::Div => {
                                    let b2 = bv[m] * bv[m];
                                    for i in 0..inner {
                                        acc -= dy[base + i] * av[base + i] / b2;
                                    }
                                }
                            }
                            gb[m] += acc;
                        }
                    }
                }
            }
            Op::MulScalar { c } => {
                let x = ins[0];
                if self.wants(x) {
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += *d * *c;
                    }
                }
            }
            Op::Matmul { d } => {
                let (a, b) = (ins[0], ins[1]);
                let av = self.value(a).values();
                let bv = self.value(b).values();
                let (rsa, csa) = if d.ta { (1, d.m as isize) } else { (d.k as isize, 1) };
                let (rsb, csb) = if d.tb { (1, d.k as isize) } else { (d.n as isize, 1) };
                let a_stride = d.m * d.k;
                let b_stride = if d.b_batched { d.k * d.n } else { 0 };
                let y_stride = d.m * d.n;
                if self.wants(a) {
                    let ga = Self::grad_slot(slots, a, av.len());
                    ga.par_chunks_mut(a_stride).enumerate().for_each(|(i, gai)| {
                        let dyi = &dy[i * y_stride..(i + 1) * y_stride];
                        let bi = &bv[i * b_stride..i * b_stride + d.k * d.n];
                        // dA_eff = dy . B_eff^T, written through A's storage strides
                        T::gemm(
                            d.m, d.n, d.k, T::ONE, dyi, d.n as isize, 1, bi, csb, rsb, T::ONE,
                            gai, rsa, csa,
                        );
                    });
                }
                if self.wants(b) {
                    let gb = Self::grad_slot(slots, b, bv.len());
                    if d.b_batched {
                        gb.par_chunks_mut(b_stride).enumerate().for_each(|(i, gbi)| {
                            let dyi = &dy[i * y_stride..(i + 1) * y_stride];
                            let ai = &av[i * a_stride..(i + 1) * a_stride];
                            T::gemm(
                                d.k, d.m, d.n, T::ONE, ai, csa, rsa, dyi, d.n as isize, 1,
                                T::ONE, gbi, rsb, csb,
                            );
                        });
                    } else {
                        // shared rhs: accumulate across the batch in order
                        for i in 0..d.batch {
                            let dyi = &dy[i * y_stride..(i + 1) * y_stride];
                            let ai = &av[i * a_stride..(i + 1) * a_stride];
                            T::gemm(
                                d.k, d.m, d.n, T::ONE, ai, csa, rsa, dyi, d.n as isize, 1,
                                T::ONE, gb, rsb, csb,
                            );
                        }
                    }
                }
            }
            Op::Conv2d { d } => {
                let x = ins[0];
                let k = ins[1];
                let bias = ins.get(2).copied();
                let xv = self.value(x).values();
                let kv = self.value(k).values();
                let want_x = self.wants(x);
                let want_k = self.wants(k);
                let want_b = bias.map(|b| self.wants(b)).unwrap_or(false);
                let mut dx = if want_x { Some(vec![T::ZERO; xv.len()]) } else { None };
                let mut dk = if want_k { Some(vec![T::ZERO; kv.len()]) } else { None };
                let mut db = if want_b { Some(vec![T::ZERO; d.cout]) } else { None };
                kernels::conv2d_bwd(
                    d,
                    xv,
                    kv,
                    dy,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    let gx = Self::grad_slot(slots, x, xv.len());
                    for (g, v) in gx.iter_mut().zip(&dx) {
                        *g += *v;
                    }
                }
                if let Some(dk) = dk {
                    let gk = Self::grad_slot(slots, k, kv.len());
                    for (g, v) in gk.iter_mut().zip(&dk) {
                        *g += *v;
                    }
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    let gb = Self::grad_slot(slots, b, d.cout);
                    for (g, v) in gb.iter_mut().zip(&db) {
                        *g += *v;
                    }
                }
            }
            Op::Deconv2x2 { cin, cout, h, w } => {
                let (x, k) = (ins[0], ins[1]);
                let xv = self.value(x).values();
                let kv = self.value(k).values();
                let n = self.value(x).shape()[0];
                let want_x = self.wants(x);
                let want_k = self.wants(k);
                let mut dx = if want_x { Some(vec![T::ZERO; xv.len()]) } else { None };
                let mut dk = if want_k { Some(vec![T::ZERO; kv.len()]) } else { None };
                kernels::deconv2x2_bwd(
                    n,
                    *cin,
                    *cout,
                    *h,
                    *w,
                    xv,
                    kv,
                    dy,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    let gx = Self::grad_slot(slots, x, xv.len());
                    for (g, v) in gx.iter_mut().zip(&dx) {
                        *g += *v;
                    }
                }
                if let Some(dk) = dk {
                    let gk = Self::grad_slot(slots, k, kv.len());
                    for (g, v) in gk.iter_mut().zip(&dk) {
                        *g += *v;
                    }
                }
            }
            Op::MaxPool2 { h, w, codes } => {
                let x = ins[0];
                if self.wants(x) {
                    let s = self.value(x).shape().to_vec();
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    kernels::maxpool2_bwd(s[0], s[1], *h, *w, dy, codes, gx);
                }
            }
            Op::GlobalMean { hw } => {
                let x = ins[0];
                if self.wants(x) {
                    let inv = T::ONE / T::from_f64(*hw as f64);
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for (p, chunk) in gx.chunks_mut(*hw).enumerate() {
                        let g = dy[p] * inv;
                        for v in chunk {
                            *v += g;
                        }
                    }
                }
            }
            Op::Bilinear { h, w, oh, ow } => {
                let x = ins[0];
                if self.wants(x) {
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    kernels::bilinear_bwd(*h, *w, *oh, *ow, dy, gx);
                }
            }
            Op::Gelu => {
                let x = ins[0];
                if self.wants(x) {
                    let xv = self.value(x).values();
                    let gx = Self::grad_slot(slots, x, xv.len());
                    for ((g, &v), d) in gx.iter_mut().zip(xv).zip(dy) {
                        *g += *d * (gauss_cdf(v) + v * gauss_pdf(v));
                    }
                }
            }
            Op::Sigmoid => {
                let x = ins[0];
                if self.wants(x) {
                    let yv = node.value.values();
                    let gx = Self::grad_slot(slots, x, yv.len());
                    for ((g, &y), d) in gx.iter_mut().zip(yv).zip(dy) {
                        *g += *d * y * (T::ONE - y);
                    }
                }
            }
            Op::Exp => {
                let x = ins[0];
                if self.wants(x) {
                    let yv = node.value.values();
                    let gx = Self::grad_slot(slots, x, yv.len());
                    for ((g, &y), d) in gx.iter_mut().zip(yv).zip(dy) {
                        *g += *d * y;
                    }
                }
            }
            Op::Softmax { outer, len, inner } => {
                let x = ins[0];
                if self.wants(x) {
                    let yv = node.value.values();
                    let gx = Self::grad_slot(slots, x, yv.len());
                    kernels::softmax_bwd(*outer, *len, *inner, yv, dy, gx);
                }
            }
            Op::Norm { kind, saved, .. } => {
                self.backprop_norm(ins, kind, saved, dy, slots);
            }
            Op::ReduceSum { axis } => {
                let x = ins[0];
                if self.wants(x) {
                    let s = self.value(x).shape().to_vec();
                    let outer: usize = s[..*axis].iter().product();
                    let len = s[*axis];
                    let inner: usize = s[*axis + 1..].iter().product();
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[base + i] += dy[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll => {
                let x = ins[0];
                if self.wants(x) {
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for g in gx.iter_mut() {
                        *g += dy[0];
                    }
                }
            }
            Op::MeanAll => {
                let x = ins[0];
                if self.wants(x) {
                    let numel = self.value(x).numel();
                    let g0 = dy[0] / T::from_f64(numel as f64);
                    let gx = Self::grad_slot(slots, x, numel);
                    for g in gx.iter_mut() {
                        *g += g0;
                    }
                }
            }
            Op::Reshape => {
                let x = ins[0];
                if self.wants(x) {
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for (g, d) in gx.iter_mut().zip(dy) {
                        *g += *d;
                    }
                }
            }
            Op::Permute { perm } => {
                let x = ins[0];
                if self.wants(x) {
                    let out_shape = node.value.shape();
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_data(dy, out_shape, &inv);
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for (g, d) in gx.iter_mut().zip(&back) {
                        *g += *d;
                    }
                }
            }
            Op::Concat { axis } => {
                let s_out = node.value.shape().to_vec();
                let outer: usize = s_out[..*axis].iter().product();
                let inner: usize = s_out[*axis + 1..].iter().product();
                let axis_total = s_out[*axis];
                let mut offset = 0;
                for &v in ins {
                    let len = self.value(v).shape()[*axis];
                    if self.wants(v) {
                        let gv = Self::grad_slot(slots, v, self.value(v).numel());
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                            for (g, d) in dst.iter_mut().zip(&dy[src_base..src_base + len * inner])
                            {
                                *g += *d;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Roll2d { sh, sw } => {
                let x = ins[0];
                if self.wants(x) {
                    let s = node.value.shape().to_vec();
                    let back = roll_data(dy, &s, -*sh, -*sw);
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for (g, d) in gx.iter_mut().zip(&back) {
                        *g += *d;
                    }
                }
            }
            Op::Pad2d { pads } => {
                let x = ins[0];
                if self.wants(x) {
                    let [t, _b, l, _r] = *pads;
                    let s_in = self.value(x).shape().to_vec();
                    let s_out = node.value.shape().to_vec();
                    let (h, w) = (s_in[2], s_in[3]);
                    let (oh, ow) = (s_out[2], s_out[3]);
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for p in 0..s_in[0] * s_in[1] {
                        for i in 0..h {
                            let src = p * oh * ow + (i + t) * ow + l;
                            let dst = p * h * w + i * w;
                            for j in 0..w {
                                gx[dst + j] += dy[src + j];
                            }
                        }
                    }
                }
            }
            Op::Crop2d { crops } => {
                let x = ins[0];
                if self.wants(x) {
                    let [t, _b, l, _r] = *crops;
                    let s_in = self.value(x).shape().to_vec();
                    let s_out = node.value.shape().to_vec();
                    let (h, w) = (s_in[2], s_in[3]);
                    let (oh, ow) = (s_out[2], s_out[3]);
                    let gx = Self::grad_slot(slots, x, self.value(x).numel());
                    for p in 0..s_in[0] * s_in[1] {
                        for i in 0..oh {
                            let dst = p * h * w + (i + t) * w + l;
                            let src = p * oh * ow + i * ow;
                            for j in 0..ow {
                                gx[dst + j] += dy[src + j];
                            }
                        }
                    }
                }
            }
            Op::DiceCe {
                labels,
                classes,
                w_dice,
                w_ce,
                smooth,
            } => {
                let probs = ins[0];
                if self.wants(probs) {
                    let s = self.value(probs).shape().to_vec();
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    debug_assert_eq!(c, *classes);
                    let hw = h * w;
                    let npix = (n * hw) as f64;
                    let pv = self.value(probs).values();
                    // per-class sums for the dice term
                    let mut sums = vec![(0.0f64, 0.0f64, 0.0f64); c];
                    for cls in 1..c {
                        let (mut sp, mut sg, mut si) = (0.0f64, 0.0f64, 0.0f64);
                        for ni in 0..n {
                            for pix in 0..hw {
                                let p = pv[(ni * c + cls) * hw + pix].to_f64();
                                let g = (labels[ni * hw + pix] as usize == cls) as u8 as f64;
                                sp += p;
                                sg += g;
                                si += p * g;
                            }
                        }
                        sums[cls] = (sp, sg, si);
                    }
                    let fg = (c - 1).max(1) as f64;
                    let d0 = dy[0].to_f64();
                    let gx = Self::grad_slot(slots, probs, pv.len());
                    for ni in 0..n {
                        for cls in 0..c {
                            for pix in 0..hw {
                                let idx = (ni * c + cls) * hw + pix;
                                let t = labels[ni * hw + pix] as usize;
                                let mut g = 0.0f64;
                                if cls == t {
                                    let p = pv[idx].to_f64().max(1e-12);
                                    g += w_ce * (-1.0 / (p * npix));
                                }
                                if cls > 0 {
                                    let (sp, sg, si) = sums[cls];
                                    let denom = sp + sg + smooth;
                                    let gpix = (t == cls) as u8 as f64;
                                    let ddice =
                                        (2.0 * gpix * denom - (2.0 * si + smooth)) / (denom * denom);
                                    g += w_dice * (-ddice / fg);
                                }
                                gx[idx] += T::from_f64(g * d0);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_norm(
        &self,
        ins: &[Var],
        kind: &NormKind<T>,
        saved: &NormSaved<T>,
        dy: &[T],
        slots: &mut [Option<Vec<T>>],
    ) {
        let (x, gain, offset) = (ins[0], ins[1], ins[2]);
        let s = self.value(x).shape().to_vec();
        let xv = self.value(x).values();
        let gv = self.value(gain).values();
        let (groups, group_len) = norm_groups(kind, &s).expect("validated at forward");
        let fixed = matches!(kind, NormKind::BatchFixed { .. });
        let m = T::from_f64(group_len as f64);

        let want_x = self.wants(x);
        let want_g = self.wants(gain);
        let want_b = self.wants(offset);
        let affine_len = norm_affine_len(kind, &s);
        let mut dgain = vec![T::ZERO; affine_len];
        let mut doffset = vec![T::ZERO; affine_len];
        let mut dx = if want_x { vec![T::ZERO; xv.len()] } else { Vec::new() };

        for g in 0..groups {
            let (mu, istd) = (saved.mean[g], saved.inv_std[g]);
            let mut sum_dy_g = T::ZERO;
            let mut sum_dyxhat_g = T::ZERO;
            if want_x && !fixed {
                for_group_affine(kind, &s, g, |idx, aff| {
                    let xhat = (xv[idx] - mu) * istd;
                    let dyg = dy[idx] * gv[aff];
                    sum_dy_g += dyg;
                    sum_dyxhat_g += dyg * xhat;
                });
            }
            for_group_affine(kind, &s, g, |idx, aff| {
                let xhat = (xv[idx] - mu) * istd;
                if want_g {
                    dgain[aff] += dy[idx] * xhat;
                }
                if want_b {
                    doffset[aff] += dy[idx];
                }
                if want_x {
                    let dyg = dy[idx] * gv[aff];
                    let v = if fixed {
                        dyg * istd
                    } else {
                        istd * (dyg - sum_dy_g / m - xhat * (sum_dyxhat_g / m))
                    };
                    dx[idx] += v;
                }
            });
        }
        if want_x {
            let gx = Self::grad_slot(slots, x, xv.len());
            for (a, b) in gx.iter_mut().zip(&dx) {
                *a += *b;
            }
        }
        if want_g {
            let gg = Self::grad_slot(slots, gain, affine_len);
            for (a, b) in gg.iter_mut().zip(&dgain) {
                *a += *b;
            }
        }
        if want_b {
            let gb = Self::grad_slot(slots, offset, affine_len);
            for (a, b) in gb.iter_mut().zip(&doffset) {
                *a += *b;
            }
        }
    }
}

/// Rows per parallel matmul task, sized to a fixed flop budget so the
/// split depends only on the shape.
fn matmul_row_grain(k: usize, n: usize) -> usize {
    const TARGET_FLOPS: usize = 34_000_000;
    (TARGET_FLOPS / (2 * k * n).max(1)).max(1)
}

const ELEMWISE_GRAIN: usize = 262_144;

fn map_elementwise<T: Element>(xs: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    let mut out = vec![T::ZERO; xs.len()];
    if xs.len() >= 2 * ELEMWISE_GRAIN {
        out.par_chunks_mut(ELEMWISE_GRAIN)
            .zip(xs.par_chunks(ELEMWISE_GRAIN))
            .for_each(|(o, x)| {
                for (a, &b) in o.iter_mut().zip(x) {
                    *a = f(b);
                }
            });
    } else {
        for (a, &b) in out.iter_mut().zip(xs) {
            *a = f(b);
        }
    }
    out
}

fn gauss_cdf<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::ONE + (x * inv_sqrt2).erf())
}

fn gauss_pdf<T: Element>(x: T) -> T {
    let c = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64(0.5)).exp()
}

fn norm_groups<T: Element>(kind: &NormKind<T>, s: &[usize]) -> Result<(usize, usize)> {
    match kind {
        NormKind::Batch | NormKind::BatchFixed { .. } => {
            if s.len() != 4 {
                return Err(Error::shape("normalize", format!("batch mode wants NCHW, got {s:?}")));
            }
            Ok((s[1], s[0] * s[2] * s[3]))
        }
        NormKind::Instance => {
            if s.len() != 4 {
                return Err(Error::shape("normalize", format!("instance mode wants NCHW, got {s:?}")));
            }
            Ok((s[0] * s[1], s[2] * s[3]))
        }
        NormKind::Layer => {
            let c = *s.last().ok_or_else(|| Error::shape("normalize", "rank 0"))?;
            Ok((s.iter().product::<usize>() / c, c))
        }
    }
}

fn norm_affine_len<T: Element>(kind: &NormKind<T>, s: &[usize]) -> usize {
    match kind {
        NormKind::Batch | NormKind::BatchFixed { .. } | NormKind::Instance => s[1],
        NormKind::Layer => *s.last().unwrap(),
    }
}

/// Visit flat indices of group `g`, with the affine (gain/offset) index.
fn for_group_affine<T: Element>(
    kind: &NormKind<T>,
    s: &[usize],
    g: usize,
    mut f: impl FnMut(usize, usize),
) {
    match kind {
        NormKind::Batch | NormKind::BatchFixed { .. } => {
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            for ni in 0..n {
                let base = (ni * c + g) * hw;
                for i in 0..hw {
                    f(base + i, g);
                }
            }
        }
        NormKind::Instance => {
            let c = s[1];
            let hw = s[2] * s[3];
            let base = g * hw;
            let ch = g % c;
            for i in 0..hw {
                f(base + i, ch);
            }
        }
        NormKind::Layer => {
            let c = *s.last().unwrap();
            let base = g * c;
            for i in 0..c {
                f(base + i, i);
            }
        }
    }
}

fn for_group<T: Element>(kind: &NormKind<T>, s: &[usize], g: usize, mut f: impl FnMut(usize)) {
    for_group_affine(kind, s, g, |idx, _| f(idx));
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let ndim = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // input strides, then reordered so out index i advances by in_strides[perm[i]]
    let mut in_strides = vec![1usize; ndim];
    for i in (0..ndim.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = vec![data.first().copied().unwrap_or(T::ZERO); numel];
    let mut idx = vec![0usize; ndim];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // odometer increment over the output shape
        for d in (0..ndim).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn roll_data<T: Element>(data: &[T], s: &[usize], sh: isize, sw: isize) -> Vec<T> {
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![data.first().copied().unwrap_or(T::ZERO); data.len()];
    let shm = sh.rem_euclid(h as isize) as usize;
    let swm = sw.rem_euclid(w as isize) as usize;
    for bi in 0..b {
        for i in 0..h {
            let ti = (i + shm) % h;
            for j in 0..w {
                let tj = (j + swm) % w;
                let src = ((bi * h + i) * w + j) * c;
                let dst = ((bi * h + ti) * w + tj) * c;
                out[dst..dst + c].copy_from_slice(&data[src..src + c]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_scaling() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let k = g.leaf(t(&[1, 1, 1, 1], &[2.0]), false).unwrap();
        let y = g.conv2d(x, k, None, 1, 1, true).unwrap();
        assert_eq!(g.value(y).values(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_same_padding_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false).unwrap();
        let k = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false).unwrap();
        let y = g.conv2d(x, k, None, 1, 1, true).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(g.value(y).values(), &expect);
    }

    #[test]
    fn conv_dilation_center() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 5, 5], 1.0), false).unwrap();
        let k = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false).unwrap();
        let y = g.conv2d(x, k, None, 1, 2, true).unwrap();
        // center tap reaches offsets {-2, 0, 2} in both axes: all 9 in range
        assert_eq!(g.value(y).values()[12], 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..16).map(|v| v as f64 * 0.37 - 2.0).collect();
        let x = g.leaf(t(&[1, 1, 4, 4], &vals), false).unwrap();
        let k = g.leaf(t(&[1, 1, 1, 1], &[1.0]), false).unwrap();
        let y = g.conv2d(x, k, None, 1, 1, true).unwrap();
        assert_eq!(g.value(y).values(), vals.as_slice());
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 2, 4, 4], 1.0), false).unwrap();
        let k = g.leaf(Tensor::full(&[1, 3, 3, 3], 1.0), false).unwrap();
        assert!(g.conv2d(x, k, None, 1, 1, true).is_err());
    }

    #[test]
    fn bilinear_row_example() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 1, 2], &[0.0, 4.0]), false).unwrap();
        let y = g.bilinear_resize(x, 1, 4).unwrap();
        let out = g.value(y).values();
        for (a, b) in out.iter().zip(&[0.0, 1.0, 3.0, 4.0]) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn bilinear_constant_and_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 5.0), false).unwrap();
        let y = g.upsample(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert!(g.value(y).values().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn gelu_points() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[0.0, 10.0, 1.0]), false).unwrap();
        let y = g.gelu(x).unwrap();
        let v = g.value(y).values();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-9);
        assert!((v[2] - 0.841344746068543).abs() < 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[0.0, 0.0]), false).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, 0.5]);

        let x = g.leaf(t(&[2], &[1000.0, 1000.0]), false).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, 0.5]);

        let x = g.leaf(t(&[2], &[0.0, 3.0f64.ln()]), false).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).values();
        assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false).unwrap();
        let m = g.leaf(t(&[2, 2], &[3.0, -1.0, 2.0, 7.0]), false).unwrap();
        let y = g.matmul(i, m, false, false).unwrap();
        assert_eq!(g.value(y).values(), g.value(m).values());

        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let b = g.leaf(t(&[2, 1], &[1.0, 1.0]), false).unwrap();
        let y = g.matmul(a, b, false, false).unwrap();
        assert_eq!(g.value(y).values(), &[3.0, 7.0]);

        let a = g.leaf(Tensor::full(&[2, 3], 1.0), false).unwrap();
        let b = g.leaf(Tensor::full(&[3, 4], 1.0), false).unwrap();
        let y = g.matmul(a, b, false, false).unwrap();
        assert_eq!(g.shape(y), &[2, 4]);
        let bad = g.matmul(a, a, false, false);
        assert!(bad.is_err());
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
        let s = g.sum_all(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_fanout_accumulates() {
        // y = sum(x*x) + sum(x): fan-out of x over two paths
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3.0, -1.0]), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum_all(sq).unwrap();
        let s2 = g.sum_all(x).unwrap();
        let y = g.add(s1, s2).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[7.0, -1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[1.0]), false).unwrap();
        let z = g.leaf(t(&[1], &[0.0]), false).unwrap();
        assert!(g.div(x, z).is_err());
    }

    #[test]
    fn normalize_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 2, 2, 2], 3.5), false).unwrap();
        let gain = g.leaf(Tensor::full(&[2], 1.0), false).unwrap();
        let offset = g.leaf(Tensor::zeros(&[2]), false).unwrap();
        let (y, _, _) = g.norm_batch(x, gain, offset, 1e-5).unwrap();
        assert!(g.value(y).values().iter().all(|v| v.abs() < 1e-9));

        // layer mode on [1, 3] with gain 1 offset 0 -> [-1, 1]
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 3.0]), false).unwrap();
        let gain = g.leaf(Tensor::full(&[2], 1.0), false).unwrap();
        let offset = g.leaf(Tensor::zeros(&[2]), false).unwrap();
        let y = g.norm_layer(x, gain, offset, 1e-10).unwrap();
        let v = g.value(y).values();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);

        // offset 5, gain 0 -> all 5
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 3.0]), false).unwrap();
        let gain = g.leaf(Tensor::zeros(&[2]), false).unwrap();
        let offset = g.leaf(Tensor::full(&[2], 5.0), false).unwrap();
        let y = g.norm_layer(x, gain, offset, 1e-10).unwrap();
        assert!(g.value(y).values().iter().all(|&v| (v - 5.0).abs() < 1e-12));

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 3.0]), false).unwrap();
        let gain = g.leaf(Tensor::zeros(&[2]), false).unwrap();
        let offset = g.leaf(Tensor::full(&[2], 5.0), false).unwrap();
        assert!(g.norm_layer(x, gain, offset, 0.0).is_err());
    }

    #[test]
    fn permute_roundtrip() {
        let vals: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2, 3, 4], &vals), false).unwrap();
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z).values(), vals.as_slice());
    }

    #[test]
    fn concat_and_backward() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[1, 2, 1, 1], &[1.0, 2.0]), true).unwrap();
        let b = g.leaf(t(&[1, 1, 1, 1], &[5.0]), true).unwrap();
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 2.0, 5.0]);
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0]);
    }

    #[test]
    fn roll_is_cyclic() {
        let vals: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2, 4, 1], &vals), false).unwrap();
        let y = g.roll2d(x, 1, 1).unwrap();
        let z = g.roll2d(y, -1, -1).unwrap();
        assert_eq!(g.value(z).values(), vals.as_slice());
    }

    #[test]
    fn pad_crop_inverse() {
        let vals: Vec<f64> = (0..4).map(|v| v as f64 + 1.0).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &vals), false).unwrap();
        let p = g.pad2d(x, [1, 2, 0, 3]).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 5, 5]);
        let c = g.crop2d(p, [1, 2, 0, 3]).unwrap();
        assert_eq!(g.value(c).values(), vals.as_slice());
    }
}
