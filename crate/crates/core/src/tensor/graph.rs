use crate::error::{Error, Result};

use super::gemm::{gemm, Mat};
use super::{Scalar, Tensor};

const GROUP_NORM_EPS: f64 = 1e-5;
const DIV_GUARD: f64 = 1e-12;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand operand of an elementwise op: a same-shaped tensor or a scalar.
#[derive(Clone, Copy, Debug)]
pub enum Rhs<T> {
    Var(Var),
    Scalar(T),
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    DivScalar(Var, T),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    /// Keeps `sigmoid(x)` for the backward pass.
    Silu {
        x: Var,
        sig: Vec<T>,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        rstd: Vec<T>,
    },
    Concat(Vec<Var>),
    RepeatInterleave {
        x: Var,
        times: usize,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    TemporalConv {
        x: Var,
        w: Var,
        frames: usize,
    },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations, rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Batch/channel/inner-size decomposition used by channel-wise ops.
fn nc_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        3 => Ok((1, shape[0], shape[1] * shape[2])),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::InvalidShape {
            op,
            detail: format!("expected rank 2, 3 or 4, got {shape:?}"),
        }),
    }
}

fn checked<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Geometry of a 2D convolution over an `[N, C, H, W]` batch.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c_in, h, wd) = match x.len() {
            3 => (1, x[0], x[1], x[2]),
            4 => (x[0], x[1], x[2], x[3]),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    detail: format!("input must be [C,H,W] or [N,C,H,W], got {x:?}"),
                })
            }
        };
        if w.len() != 4 || w[1] != c_in || w[2] != w[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        let k = w[2];
        if k.is_multiple_of(2) || stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel size must be odd and stride positive (k={k}, stride={stride})"),
            });
        }
        let span_h = h + 2 * pad;
        let span_w = wd + 2 * pad;
        if span_h < k || span_w < k || !(span_h - k).is_multiple_of(stride) || !(span_w - k).is_multiple_of(stride) {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("non-integral output size for input {h}x{wd}, kernel {k}, stride {stride}, pad {pad}"),
            });
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out: w[0],
            k,
            stride,
            pad,
            ho: (span_h - k) / stride + 1,
            wo: (span_w - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn identity_cols(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = match (self.w + self.pad).checked_sub(kx) {
            Some(lim) => lim.div_ceil(self.stride).min(self.wo),
            None => 0,
        };
        (lo.min(hi), hi)
    }

    /// Stride 1 with output size equal to input size. Every row of the
    /// column matrix is then the input plane shifted by a constant offset.
    fn is_same(&self) -> bool {
        self.stride == 1 && self.ho == self.h && self.wo == self.w
    }

    /// Plane offset of tap `(ky, kx)` for a "same" convolution, and the
    /// range of flat output indices whose source lies inside the plane.
    fn same_shift(&self, ky: usize, kx: usize) -> (isize, usize, usize) {
        let n = (self.h * self.w) as isize;
        let off = (ky as isize - self.pad as isize) * self.w as isize + kx as isize - self.pad as isize;
        (off, (-off).clamp(0, n) as usize, (n - off).clamp(0, n) as usize)
    }

    /// Zero the entries of a column-matrix row whose tap wrapped around a
    /// row edge of the input.
    fn clear_wrapped<T: Scalar>(&self, dst: &mut [T], kx: usize) {
        let (lo, hi) = self.valid_cols(kx);
        if lo == 0 && hi == self.wo {
            return;
        }
        for row in dst.chunks_mut(self.wo) {
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    if self.is_same() {
                        let (off, a, b) = self.same_shift(ky, kx);
                        dst[..a].fill(T::zero());
                        dst[b.max(a)..].fill(T::zero());
                        if a < b {
                            let src = (a as isize + off) as usize;
                            dst[a..b].copy_from_slice(&plane[src..src + (b - a)]);
                        }
                        self.clear_wrapped(dst, kx);
                        continue;
                    }
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if self.stride == 1 {
                            let start = lo + kx - self.pad;
                            out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (ox, v) in out_row[lo..hi].iter_mut().enumerate() {
                                *v = src[(ox + lo) * self.stride + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a column matrix back onto the input. Entries that fall
    /// outside the input are cleared from `col` on the way.
    fn col2im_add<T: Scalar>(&self, col: &mut [T], dx: &mut [T]) {
        let p = self.out_pixels();
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    if self.is_same() {
                        let src = &mut col[row * p..(row + 1) * p];
                        self.clear_wrapped(src, kx);
                        let (off, a, b) = self.same_shift(ky, kx);
                        if a < b {
                            let start = (a as isize + off) as usize;
                            add_into(&mut plane[start..start + (b - a)], &src[a..b]);
                        }
                        continue;
                    }
                    let src = &col[row * p..(row + 1) * p];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        if self.stride == 1 {
                            let start = lo + kx - self.pad;
                            add_into(&mut dst[start..start + (hi - lo)], &srow[lo..hi]);
                        } else {
                            for ox in lo..hi {
                                let ix = ox * self.stride + kx - self.pad;
                                dst[ix] = dst[ix] + srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf; it takes part in backward iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated into `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Value-identical copy of `x` that gradients do not flow through.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn elementwise(&mut self, op: BinaryOp, a: Var, rhs: Rhs<T>) -> Result<Var> {
        match rhs {
            Rhs::Var(b) => self.binary(op, a, b),
            Rhs::Scalar(s) => match op {
                BinaryOp::Add => self.add_scalar(a, s),
                BinaryOp::Sub => self.add_scalar(a, -s),
                BinaryOp::Mul => self.mul_scalar(a, s),
                BinaryOp::Div => self.div_scalar(a, s),
            },
        }
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        same_shape(name, self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.data(a), self.data(b));
        if op == BinaryOp::Div && bd.iter().any(|v| v.abs() < T::lit(DIV_GUARD)) {
            return Err(Error::DivisionByZero { op: name });
        }
        let data: Vec<T> = match op {
            BinaryOp::Add => ad.iter().zip(bd).map(|(&x, &y)| x + y).collect(),
            BinaryOp::Sub => ad.iter().zip(bd).map(|(&x, &y)| x - y).collect(),
            BinaryOp::Mul => ad.iter().zip(bd).map(|(&x, &y)| x * y).collect(),
            BinaryOp::Div => ad.iter().zip(bd).map(|(&x, &y)| x / y).collect(),
        };
        let out = checked(name, Tensor::new(self.shape(a).to_vec(), data)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x + s).collect();
        let out = checked("add_scalar", Tensor::new(self.shape(a).to_vec(), data)?)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::AddScalar(a), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let out = checked("mul_scalar", Tensor::new(self.shape(a).to_vec(), data)?)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn div_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        if s.abs() < T::lit(DIV_GUARD) {
            return Err(Error::DivisionByZero { op: "div_scalar" });
        }
        let data = self.data(a).iter().map(|&x| x / s).collect();
        let out = checked("div_scalar", Tensor::new(self.shape(a).to_vec(), data)?)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::DivScalar(a, s), rg))
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            Mat::row_major(self.data(a), k),
            Mat::row_major(self.data(b), n),
            &mut out,
            false,
        );
        let out = checked("matmul", Tensor::new(vec![m, n], out)?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `x` (`[C,H,W]` or `[N,C,H,W]`) with `w`
    /// (`[C_out,C_in,k,k]`), zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv2d_forward(&geom, self.data(x), self.data(w));
        let shape = if self.shape(x).len() == 3 {
            vec![geom.c_out, geom.ho, geom.wo]
        } else {
            vec![geom.n, geom.c_out, geom.ho, geom.wo]
        };
        let out = checked("conv2d", Tensor::new(shape, out)?)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        let out = checked("sum", Tensor::scalar(s))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s: T = self.data(x).iter().copied().sum();
        let out = checked("mean", Tensor::scalar(s / T::lit(n as f64)))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mse", self.shape(a), self.shape(b))?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "mse",
                detail: "empty tensor".into(),
            });
        }
        let s: T = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = checked("mse", Tensor::scalar(s / T::lit(n as f64)))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let sig: Vec<T> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let data = self.data(x).iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let out = checked("silu", Tensor::new(self.shape(x).to_vec(), data)?)?;
        let rg = self.rg(x);
        // the cache is only worth its memory when a backward pass will read it
        let sig = if rg { sig } else { Vec::new() };
        Ok(self.push(out, Op::Silu { x, sig }, rg))
    }

    /// Normalise each (sample, channel-group) slice to zero mean and unit
    /// variance. No affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (n, c, inner) = nc_layout("group_norm", self.shape(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidShape {
                op: "group_norm",
                detail: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        let span = (c / groups) * inner;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        let mut rstd = Vec::with_capacity(n * groups);
        let inv = T::lit(1.0 / span as f64);
        for (src, dst) in xd.chunks(span).zip(out.chunks_mut(span)) {
            let mu = src.iter().copied().sum::<T>() * inv;
            let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
            let r = T::one() / (var + T::lit(GROUP_NORM_EPS)).sqrt();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mu) * r;
            }
            rstd.push(r);
        }
        let out = checked("group_norm", Tensor::new(self.shape(x).to_vec(), out)?)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GroupNorm { x, groups, rstd }, rg))
    }

    /// Concatenate along the channel axis (`[N,C,...]` or `[C,H,W]`).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        let (n, _, inner) = nc_layout("concat", &base)?;
        let mut total_c = 0;
        for &v in xs {
            let s = self.shape(v);
            let (vn, vc, vi) = nc_layout("concat", s)?;
            let spatial_ok = s.len() == base.len() && s[s.len() - 2..] == base[base.len() - 2..];
            if vn != n || vi != inner || (base.len() > 2 && !spatial_ok) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total_c += vc;
        }
        let mut out = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for &v in xs {
                let (_, vc, _) = nc_layout("concat", self.shape(v))?;
                out.extend_from_slice(&self.data(v)[b * vc * inner..(b + 1) * vc * inner]);
            }
        }
        let mut shape = base.clone();
        let c_axis = if base.len() == 3 { 0 } else { 1 };
        shape[c_axis] = total_c;
        let rg = xs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    /// Repeat every entry along axis 0 `times` times consecutively.
    pub fn repeat_interleave(&mut self, x: Var, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || times == 0 {
            return Err(Error::InvalidShape {
                op: "repeat_interleave",
                detail: format!("cannot repeat {shape:?} {times} times"),
            });
        }
        let row: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(row * shape[0] * times);
        for chunk in self.data(x).chunks(row.max(1)) {
            for _ in 0..times {
                out.extend_from_slice(chunk);
            }
        }
        let mut new_shape = shape;
        new_shape[0] *= times;
        let rg = self.rg(x);
        let out = Tensor::new(new_shape, out)?;
        Ok(self.push(out, Op::RepeatInterleave { x, times }, rg))
    }

    /// Add a per-channel bias `[C]` or per-sample-channel bias `[N,C]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, inner) = nc_layout("channel_bias", self.shape(x))?;
        let bs = self.shape(b);
        let per_sample = match bs {
            [bc] if *bc == c => false,
            [bn, bc] if *bn == n && *bc == c => true,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "channel_bias",
                    lhs: self.shape(x).to_vec(),
                    rhs: bs.to_vec(),
                })
            }
        };
        let bd = self.data(b);
        let mut out = self.data(x).to_vec();
        for s in 0..n {
            for ch in 0..c {
                let bias = bd[if per_sample { s * c + ch } else { ch }];
                for v in &mut out[(s * c + ch) * inner..(s * c + ch + 1) * inner] {
                    *v = *v + bias;
                }
            }
        }
        let out = checked("channel_bias", Tensor::new(self.shape(x).to_vec(), out)?)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::ChannelBias { x, b }, rg))
    }

    /// Depthwise 1D convolution along time for `x = [B*frames, C, H, W]`
    /// with `w = [C, k]`, zero padded so the frame count is preserved.
    pub fn temporal_conv(&mut self, x: Var, w: Var, frames: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if xs.len() != 4 || frames == 0 || !xs[0].is_multiple_of(frames) {
            return Err(Error::InvalidShape {
                op: "temporal_conv",
                detail: format!("input {xs:?} is not a whole number of {frames}-frame clips"),
            });
        }
        if ws.len() != 2 || ws[0] != xs[1] || ws[1].is_multiple_of(2) {
            return Err(Error::ShapeMismatch {
                op: "temporal_conv",
                lhs: xs,
                rhs: ws.to_vec(),
            });
        }
        let (c, k) = (ws[0], ws[1]);
        let inner = xs[2] * xs[3];
        let clips = xs[0] / frames;
        let half = k / 2;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![T::zero(); xd.len()];
        for_each_tap(clips, frames, k, half, |dst_frame, src_frame, j| {
            for ch in 0..c {
                let wv = wd[ch * k + j];
                let src = &xd[(src_frame * c + ch) * inner..(src_frame * c + ch + 1) * inner];
                let dst = &mut out[(dst_frame * c + ch) * inner..(dst_frame * c + ch + 1) * inner];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = *o + wv * v;
                }
            }
        });
        let out = checked("temporal_conv", Tensor::new(xs, out)?)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::TemporalConv { x, w, frames }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`. Populates the gradient slot of
    /// every node that requires grad; the graph cannot be swept again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                let (ad, bd) = (self.data(a), self.data(b));
                match op {
                    BinaryOp::Add => {
                        self.accumulate(grads, a, |s| add_into(s, g));
                        self.accumulate(grads, b, |s| add_into(s, g));
                    }
                    BinaryOp::Sub => {
                        self.accumulate(grads, a, |s| add_into(s, g));
                        self.accumulate(grads, b, |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d - gv));
                    }
                    BinaryOp::Mul => {
                        self.accumulate(grads, a, |s| {
                            for ((d, &gv), &y) in s.iter_mut().zip(g).zip(bd) {
                                *d = *d + gv * y;
                            }
                        });
                        self.accumulate(grads, b, |s| {
                            for ((d, &gv), &x) in s.iter_mut().zip(g).zip(ad) {
                                *d = *d + gv * x;
                            }
                        });
                    }
                    BinaryOp::Div => {
                        self.accumulate(grads, a, |s| {
                            for ((d, &gv), &y) in s.iter_mut().zip(g).zip(bd) {
                                *d = *d + gv / y;
                            }
                        });
                        self.accumulate(grads, b, |s| {
                            for (((d, &gv), &x), &y) in s.iter_mut().zip(g).zip(ad).zip(bd) {
                                *d = *d - gv * x / (y * y);
                            }
                        });
                    }
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |s| add_into(s, g)),
            Op::MulScalar(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * k));
            }
            Op::DivScalar(a, k) => {
                let k = *k;
                self.accumulate(grads, *a, |s| s.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv / k));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(a), self.data(b));
                // dA = G * B^T, dB = A^T * G
                self.accumulate(grads, a, |s| {
                    gemm(m, n, k, Mat::row_major(g, n), Mat::transposed(bd, n), s, true)
                });
                self.accumulate(grads, b, |s| {
                    gemm(k, m, n, Mat::transposed(ad, k), Mat::row_major(g, n), s, true)
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (x, w) = (*x, *w);
                let geom =
                    ConvGeom::new(self.shape(x), self.shape(w), *stride, *pad).expect("geometry validated in forward");
                let (xd, wd) = (self.data(x), self.data(w));
                let (need_x, need_w) = (self.rg(x), self.rg(w));
                let kk = geom.patch();
                let p = geom.out_pixels();
                let in_len = geom.c_in * geom.h * geom.w;
                let out_len = geom.c_out * p;
                let mut dw = vec![T::zero(); if need_w { wd.len() } else { 0 }];
                let mut dx = vec![T::zero(); if need_x { xd.len() } else { 0 }];
                let mut col = vec![T::zero(); if geom.identity_cols() { 0 } else { kk * p }];
                let mut dcol = vec![T::zero(); if need_x { kk * p } else { 0 }];
                for s in 0..geom.n {
                    let xs = &xd[s * in_len..(s + 1) * in_len];
                    let gs = &g[s * out_len..(s + 1) * out_len];
                    if need_w {
                        let cols: &[T] = if geom.identity_cols() {
                            xs
                        } else {
                            geom.im2col(xs, &mut col);
                            &col
                        };
                        gemm(
                            geom.c_out,
                            p,
                            kk,
                            Mat::row_major(gs, p),
                            Mat::transposed(cols, p),
                            &mut dw,
                            true,
                        );
                    }
                    if need_x {
                        gemm(
                            kk,
                            geom.c_out,
                            p,
                            Mat::transposed(wd, kk),
                            Mat::row_major(gs, p),
                            &mut dcol,
                            false,
                        );
                        let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                        if geom.identity_cols() {
                            add_into(dxs, &dcol);
                        } else {
                            geom.col2im_add(&mut dcol, dxs);
                        }
                    }
                }
                if need_w {
                    self.accumulate(grads, w, |s| add_into(s, &dw));
                }
                if need_x {
                    self.accumulate(grads, x, |s| add_into(s, &dx));
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|d| *d = *d + gv));
            }
            Op::Mean(x) => {
                let gv = g[0] / T::lit(self.value(*x).numel() as f64);
                self.accumulate(grads, *x, |s| s.iter_mut().for_each(|d| *d = *d + gv));
            }
            Op::Mse(a, b) => {
                let (a, b) = (*a, *b);
                let scale = T::lit(2.0) * g[0] / T::lit(self.value(a).numel() as f64);
                let (ad, bd) = (self.data(a), self.data(b));
                self.accumulate(grads, a, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(ad).zip(bd) {
                        *d = *d + scale * (x - y);
                    }
                });
                self.accumulate(grads, b, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(ad).zip(bd) {
                        *d = *d - scale * (x - y);
                    }
                });
            }
            Op::Silu { x, sig } => {
                let xd = self.data(*x);
                self.accumulate(grads, *x, |s| {
                    for (((d, &gv), &v), &sg) in s.iter_mut().zip(g).zip(xd).zip(sig) {
                        *d = *d + gv * sg * (T::one() + v * (T::one() - sg));
                    }
                });
            }
            Op::GroupNorm { x, groups, rstd } => {
                let (_, c, inner) = nc_layout("group_norm", self.shape(*x)).expect("validated");
                let span = (c / groups) * inner;
                let y = node.value.data();
                let inv = T::lit(1.0 / span as f64);
                self.accumulate(grads, *x, |s| {
                    for (i, ((ds, gs), ys)) in s.chunks_mut(span).zip(g.chunks(span)).zip(y.chunks(span)).enumerate() {
                        let mean_g = gs.iter().copied().sum::<T>() * inv;
                        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv;
                        let r = rstd[i];
                        for ((d, &gv), &yv) in ds.iter_mut().zip(gs).zip(ys) {
                            *d = *d + r * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let (n, _, inner) = nc_layout("concat", node.value.shape()).expect("validated");
                let total_c: usize = xs
                    .iter()
                    .map(|&v| nc_layout("concat", self.shape(v)).expect("validated").1)
                    .sum();
                let mut offset = 0;
                for &v in xs {
                    let vc = nc_layout("concat", self.shape(v)).expect("validated").1;
                    self.accumulate(grads, v, |s| {
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * inner..(b * total_c + offset + vc) * inner];
                            add_into(&mut s[b * vc * inner..(b + 1) * vc * inner], src);
                        }
                    });
                    offset += vc;
                }
            }
            Op::RepeatInterleave { x, times } => {
                let row = self.value(*x).numel() / self.shape(*x)[0];
                self.accumulate(grads, *x, |s| {
                    for (i, chunk) in g.chunks(row.max(1)).enumerate() {
                        let b = i / times;
                        add_into(&mut s[b * row..(b + 1) * row], chunk);
                    }
                });
            }
            Op::ChannelBias { x, b } => {
                let (x, b) = (*x, *b);
                let (n, c, inner) = nc_layout("channel_bias", self.shape(x)).expect("validated");
                let per_sample = self.shape(b).len() == 2;
                self.accumulate(grads, x, |s| add_into(s, g));
                self.accumulate(grads, b, |s| {
                    for smp in 0..n {
                        for ch in 0..c {
                            let base = (smp * c + ch) * inner;
                            let total: T = g[base..base + inner].iter().copied().sum();
                            let slot = if per_sample { smp * c + ch } else { ch };
                            s[slot] = s[slot] + total;
                        }
                    }
                });
            }
            Op::TemporalConv { x, w, frames } => {
                let (x, w, frames) = (*x, *w, *frames);
                let xs = self.shape(x);
                let (c, k) = (self.shape(w)[0], self.shape(w)[1]);
                let inner = xs[2] * xs[3];
                let clips = xs[0] / frames;
                let half = k / 2;
                let (xd, wd) = (self.data(x), self.data(w));
                self.accumulate(grads, x, |s| {
                    for_each_tap(clips, frames, k, half, |dst_frame, src_frame, j| {
                        for ch in 0..c {
                            let wv = wd[ch * k + j];
                            let gsl = &g[(dst_frame * c + ch) * inner..(dst_frame * c + ch + 1) * inner];
                            let dsl = &mut s[(src_frame * c + ch) * inner..(src_frame * c + ch + 1) * inner];
                            for (d, &gv) in dsl.iter_mut().zip(gsl) {
                                *d = *d + wv * gv;
                            }
                        }
                    })
                });
                self.accumulate(grads, w, |s| {
                    for_each_tap(clips, frames, k, half, |dst_frame, src_frame, j| {
                        for ch in 0..c {
                            let gsl = &g[(dst_frame * c + ch) * inner..(dst_frame * c + ch + 1) * inner];
                            let xsl = &xd[(src_frame * c + ch) * inner..(src_frame * c + ch + 1) * inner];
                            let dot: T = gsl.iter().zip(xsl).map(|(&a, &b)| a * b).sum();
                            s[ch * k + j] = s[ch * k + j] + dot;
                        }
                    })
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |s| add_into(s, g)),
        }
    }
}

/// Visit every (output frame, source frame, tap) triple of a temporal conv.
fn for_each_tap(clips: usize, frames: usize, k: usize, half: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..clips {
        for t in 0..frames {
            for j in 0..k {
                let src_t = t as isize + j as isize - half as isize;
                if src_t >= 0 && src_t < frames as isize {
                    f(b * frames + t, b * frames + src_t as usize, j);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn conv2d_forward<T: Scalar>(geom: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let kk = geom.patch();
    let p = geom.out_pixels();
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_out * p;
    let mut out = vec![T::zero(); geom.n * out_len];
    let mut col = vec![T::zero(); if geom.identity_cols() { 0 } else { kk * p }];
    for s in 0..geom.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let cols: &[T] = if geom.identity_cols() {
            xs
        } else {
            geom.im2col(xs, &mut col);
            &col
        };
        gemm(
            geom.c_out,
            kk,
            p,
            Mat::row_major(w, kk),
            Mat::row_major(cols, p),
            &mut out[s * out_len..(s + 1) * out_len],
            false,
        );
    }
    out
}
