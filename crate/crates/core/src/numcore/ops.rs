//! Differentiable tensor operations.
//!
//! Each public function validates shapes, computes the forward value, and
//! records a node with a backward rule on the tape. Multiply-add charges per
//! op (empirical cost accounting, 1 MAC = 2 FLOPs):
//!
//! | op                  | multiply-adds                  |
//! |---------------------|--------------------------------|
//! | matmul              | batch · m · k · n              |
//! | elementwise (any)   | output numel                   |
//! | reduce (any)        | input numel                    |
//! | rms_norm            | 3 · numel                      |
//! | layer_norm          | 6 · numel                      |
//! | depthwise conv1d    | B·L·D·k (+ B·L·D with bias)    |
//! | softmax cross-ent.  | 3 · N · K                      |
//! | reshape/reverse/gather/scatter | 0 (data movement)   |

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, TapeOp, Var};
use crate::numcore::tensor::{
    broadcast_index, broadcast_shape, broadcast_strides, strides_of, Tensor,
};
use crate::par;

#[inline]
pub(crate) fn sigmoid_s(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_s(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// elementwise binary with trailing-dimension broadcasting

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

impl BinKind {
    #[inline]
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        }
    }
}

struct Binary {
    kind: BinKind,
}

fn binary_forward(kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let numel: usize = shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![0.0; numel];
    if a.shape() == shape.as_slice() && b.shape() == shape.as_slice() {
        par::fill_with(&mut data, |i| kind.apply(ad[i], bd[i]));
    } else if a.shape() == shape.as_slice() && is_suffix(b.shape(), &shape) {
        let bn = b.numel().max(1);
        par::fill_with(&mut data, |i| kind.apply(ad[i], bd[i % bn]));
    } else {
        let out_strides = strides_of(&shape);
        let sa = broadcast_strides(a.shape(), &shape);
        let sb = broadcast_strides(b.shape(), &shape);
        par::fill_with(&mut data, |i| {
            let x = ad[broadcast_index(i, &shape, &out_strides, &sa)];
            let y = bd[broadcast_index(i, &shape, &out_strides, &sb)];
            kind.apply(x, y)
        });
    }
    Tensor::new(shape, data)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

impl TapeOp for Binary {
    fn backward(
        &self,
        out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (parents[0], parents[1]);
        let out_strides = strides_of(out.shape());
        let sa = broadcast_strides(a.shape(), out.shape());
        let sb = broadcast_strides(b.shape(), out.shape());
        let mut ga = if needs[0] { Some(vec![0.0; a.numel()]) } else { None };
        let mut gb = if needs[1] { Some(vec![0.0; b.numel()]) } else { None };
        for (i, g) in out_grad.iter().enumerate() {
            let ia = broadcast_index(i, out.shape(), &out_strides, &sa);
            let ib = broadcast_index(i, out.shape(), &out_strides, &sb);
            match self.kind {
                BinKind::Add => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g;
                    }
                }
                BinKind::Sub => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] -= g;
                    }
                }
                BinKind::Mul => {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += g * b.data()[ib];
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += g * a.data()[ia];
                    }
                }
            }
        }
        vec![ga, gb]
    }

    fn name(&self) -> &'static str {
        match self.kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        }
    }
}

fn binary(tape: &mut Tape, kind: BinKind, a: Var, b: Var) -> Result<Var> {
    let value = binary_forward(kind, tape.value(a), tape.value(b))?;
    let macs = value.numel() as u64;
    Ok(tape.push_op(value, vec![a, b], Box::new(Binary { kind }), macs))
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    binary(tape, BinKind::Add, a, b)
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    binary(tape, BinKind::Sub, a, b)
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    binary(tape, BinKind::Mul, a, b)
}

/// Multiply by a compile-time constant (recorded as a scalar constant leaf).
pub fn scale(tape: &mut Tape, a: Var, c: f64) -> Var {
    let s = tape.constant(Tensor::scalar(c));
    mul(tape, a, s).expect("scalar broadcast cannot fail")
}

// ---------------------------------------------------------------------------
// elementwise unary

#[derive(Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Silu,
    Softplus,
    Sigmoid,
    Recip,
}

struct Unary {
    kind: UnKind,
}

impl TapeOp for Unary {
    fn backward(
        &self,
        out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = parents[0].data();
        let y = out.data();
        let mut gx = vec![0.0; x.len()];
        for i in 0..x.len() {
            let g = out_grad[i];
            gx[i] = match self.kind {
                UnKind::Neg => -g,
                UnKind::Exp => g * y[i],
                UnKind::Silu => {
                    let s = sigmoid_s(x[i]);
                    g * s * (1.0 + x[i] * (1.0 - s))
                }
                UnKind::Softplus => g * sigmoid_s(x[i]),
                UnKind::Sigmoid => g * y[i] * (1.0 - y[i]),
                UnKind::Recip => -g * y[i] * y[i],
            };
        }
        vec![Some(gx)]
    }

    fn name(&self) -> &'static str {
        match self.kind {
            UnKind::Neg => "neg",
            UnKind::Exp => "exp",
            UnKind::Silu => "silu",
            UnKind::Softplus => "softplus",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Recip => "recip",
        }
    }
}

fn unary(tape: &mut Tape, kind: UnKind, a: Var) -> Var {
    let x = tape.value(a);
    let mut data = vec![0.0; x.numel()];
    let xd = x.data();
    par::fill_with(&mut data, |i| {
        let v = xd[i];
        match kind {
            UnKind::Neg => -v,
            UnKind::Exp => v.exp(),
            UnKind::Silu => v * sigmoid_s(v),
            UnKind::Softplus => softplus_s(v),
            UnKind::Sigmoid => sigmoid_s(v),
            UnKind::Recip => 1.0 / v,
        }
    });
    let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
    let macs = value.numel() as u64;
    tape.push_op(value, vec![a], Box::new(Unary { kind }), macs)
}

pub fn neg(tape: &mut Tape, a: Var) -> Var {
    unary(tape, UnKind::Neg, a)
}

pub fn exp(tape: &mut Tape, a: Var) -> Var {
    unary(tape, UnKind::Exp, a)
}

pub fn silu(tape: &mut Tape, a: Var) -> Var {
    unary(tape, UnKind::Silu, a)
}

pub fn softplus(tape: &mut Tape, a: Var) -> Var {
    unary(tape, UnKind::Softplus, a)
}

pub fn sigmoid(tape: &mut Tape, a: Var) -> Var {
    unary(tape, UnKind::Sigmoid, a)
}

/// Elementwise reciprocal; any exactly-zero input is a domain error.
pub fn recip(tape: &mut Tape, a: Var) -> Result<Var> {
    if tape.value(a).data().iter().any(|&v| v == 0.0) {
        return Err(Error::Domain("recip of zero".into()));
    }
    Ok(unary(tape, UnKind::Recip, a))
}

// ---------------------------------------------------------------------------
// reductions

#[derive(Clone, Copy, PartialEq, Eq)]
enum RedKind {
    Sum,
    Mean,
    Max,
}

struct Reduce {
    kind: RedKind,
    axis: Option<usize>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axn = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axn, inner)
}

impl TapeOp for Reduce {
    fn backward(
        &self,
        _out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = parents[0];
        let xd = x.data();
        let mut gx = vec![0.0; x.numel()];
        match self.axis {
            None => {
                let g = out_grad[0];
                match self.kind {
                    RedKind::Sum => gx.iter_mut().for_each(|v| *v = g),
                    RedKind::Mean => {
                        let s = g / x.numel() as f64;
                        gx.iter_mut().for_each(|v| *v = s);
                    }
                    RedKind::Max => {
                        let mut best = 0usize;
                        for i in 1..xd.len() {
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                        gx[best] = g;
                    }
                }
            }
            Some(axis) => {
                let (outer, axn, inner) = axis_split(x.shape(), axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let g = out_grad[o * inner + i];
                        match self.kind {
                            RedKind::Sum => {
                                for a in 0..axn {
                                    gx[(o * axn + a) * inner + i] = g;
                                }
                            }
                            RedKind::Mean => {
                                let s = g / axn as f64;
                                for a in 0..axn {
                                    gx[(o * axn + a) * inner + i] = s;
                                }
                            }
                            RedKind::Max => {
                                let mut best = 0usize;
                                for a in 1..axn {
                                    if xd[(o * axn + a) * inner + i]
                                        > xd[(o * axn + best) * inner + i]
                                    {
                                        best = a;
                                    }
                                }
                                gx[(o * axn + best) * inner + i] = g;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gx)]
    }

    fn name(&self) -> &'static str {
        match self.kind {
            RedKind::Sum => "sum",
            RedKind::Mean => "mean",
            RedKind::Max => "max",
        }
    }
}

fn reduce(tape: &mut Tape, kind: RedKind, a: Var, axis: Option<usize>) -> Result<Var> {
    let x = tape.value(a);
    let xd = x.data();
    let value = match axis {
        None => {
            if x.numel() == 0 {
                return Err(Error::Shape("reduce over empty tensor".into()));
            }
            let v = match kind {
                RedKind::Sum => xd.iter().sum(),
                RedKind::Mean => xd.iter().sum::<f64>() / x.numel() as f64,
                RedKind::Max => xd.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            Tensor::scalar(v)
        }
        Some(axis) => {
            if axis >= x.shape().len() {
                return Err(Error::Shape(format!(
                    "reduce axis {axis} out of range for shape {:?}",
                    x.shape()
                )));
            }
            if x.shape()[axis] == 0 {
                return Err(Error::Shape("reduce over empty axis".into()));
            }
            let (outer, axn, inner) = axis_split(x.shape(), axis);
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            let mut data = vec![0.0; outer * inner];
            par::fill_with(&mut data, |oi| {
                let (o, i) = (oi / inner, oi % inner);
                match kind {
                    RedKind::Sum | RedKind::Mean => {
                        let mut s = 0.0;
                        for a in 0..axn {
                            s += xd[(o * axn + a) * inner + i];
                        }
                        if kind == RedKind::Mean {
                            s / axn as f64
                        } else {
                            s
                        }
                    }
                    RedKind::Max => {
                        let mut m = f64::NEG_INFINITY;
                        for a in 0..axn {
                            m = m.max(xd[(o * axn + a) * inner + i]);
                        }
                        m
                    }
                }
            });
            Tensor::new(shape, data)?
        }
    };
    let macs = x.numel() as u64;
    Ok(tape.push_op(value, vec![a], Box::new(Reduce { kind, axis }), macs))
}

pub fn sum_all(tape: &mut Tape, a: Var) -> Result<Var> {
    reduce(tape, RedKind::Sum, a, None)
}

pub fn mean_all(tape: &mut Tape, a: Var) -> Result<Var> {
    reduce(tape, RedKind::Mean, a, None)
}

pub fn max_all(tape: &mut Tape, a: Var) -> Result<Var> {
    reduce(tape, RedKind::Max, a, None)
}

pub fn sum_axis(tape: &mut Tape, a: Var, axis: usize) -> Result<Var> {
    reduce(tape, RedKind::Sum, a, Some(axis))
}

pub fn mean_axis(tape: &mut Tape, a: Var, axis: usize) -> Result<Var> {
    reduce(tape, RedKind::Mean, a, Some(axis))
}

pub fn max_axis(tape: &mut Tape, a: Var, axis: usize) -> Result<Var> {
    reduce(tape, RedKind::Max, a, Some(axis))
}

// ---------------------------------------------------------------------------
// matmul

struct MatMul;

struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    bn: usize,
    batch_strides: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn mat_dims(a: &Tensor, b: &Tensor) -> Result<MatDims> {
    let (ra, rb) = (a.shape().len(), b.shape().len());
    if ra < 2 || rb < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank >= 2, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let la = &a.shape()[..ra - 2];
    let lb = &b.shape()[..rb - 2];
    let batch = broadcast_shape(la, lb)?;
    let bn = batch.iter().product::<usize>().max(1);
    let batch_strides = strides_of(&batch);
    let sa = broadcast_strides(la, &batch);
    let sb = broadcast_strides(lb, &batch);
    Ok(MatDims {
        m,
        k,
        n,
        batch,
        bn,
        batch_strides,
        sa,
        sb,
    })
}

impl TapeOp for MatMul {
    fn backward(
        &self,
        out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (parents[0], parents[1]);
        let d = mat_dims(a, b).expect("checked in forward");
        let (m, k, n) = (d.m, d.k, d.n);
        let ad = a.data();
        let bd = b.data();
        let mut ga = if needs[0] { Some(vec![0.0; a.numel()]) } else { None };
        let mut gb = if needs[1] { Some(vec![0.0; b.numel()]) } else { None };
        let _ = out;
        for bi in 0..d.bn {
            let ai = broadcast_index(bi, &d.batch, &d.batch_strides, &d.sa) * m * k;
            let bi_off = broadcast_index(bi, &d.batch, &d.batch_strides, &d.sb) * k * n;
            let g_off = bi * m * n;
            if let Some(ga) = ga.as_mut() {
                // dA = G · Bᵀ
                for i in 0..m {
                    let grow = &out_grad[g_off + i * n..g_off + i * n + n];
                    for kk in 0..k {
                        let brow = &bd[bi_off + kk * n..bi_off + kk * n + n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        ga[ai + i * k + kk] += s;
                    }
                }
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · G
                for i in 0..m {
                    let grow = &out_grad[g_off + i * n..g_off + i * n + n];
                    for kk in 0..k {
                        let av = ad[ai + i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[bi_off + kk * n..bi_off + kk * n + n];
                        for j in 0..n {
                            dst[j] += av * grow[j];
                        }
                    }
                }
            }
        }
        vec![ga, gb]
    }

    fn name(&self) -> &'static str {
        "matmul"
    }
}

/// Batched matrix product. Trailing two axes are the matrix dims; leading
/// axes broadcast.
pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = mat_dims(tape.value(a), tape.value(b))?;
    let (m, k, n) = (d.m, d.k, d.n);
    let ad = tape.value(a).data();
    let bd = tape.value(b).data();
    let mut shape = d.batch.clone();
    shape.push(m);
    shape.push(n);
    let mut data = vec![0.0; d.bn * m * n];
    par::for_each_row(&mut data, n, |r, row| {
        let (bi, i) = (r / m, r % m);
        let ai = broadcast_index(bi, &d.batch, &d.batch_strides, &d.sa) * m * k;
        let bo = broadcast_index(bi, &d.batch, &d.batch_strides, &d.sb) * k * n;
        for kk in 0..k {
            let av = ad[ai + i * k + kk];
            let brow = &bd[bo + kk * n..bo + kk * n + n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    let value = Tensor::new(shape, data)?;
    let macs = (d.bn * m * k * n) as u64;
    Ok(tape.push_op(value, vec![a, b], Box::new(MatMul), macs))
}

/// Affine map `x·W + b` over the last axis.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = matmul(tape, x, w)?;
    add(tape, y, b)
}

// ---------------------------------------------------------------------------
// normalizations over the last axis

struct LayerNorm {
    eps: f64,
}

impl TapeOp for LayerNorm {
    fn backward(
        &self,
        _out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, scale, _bias) = (parents[0], parents[1], parents[2]);
        let d = *x.shape().last().unwrap();
        let rows = x.numel() / d;
        let xd = x.data();
        let sd = scale.data();
        let mut gx = if needs[0] { Some(vec![0.0; x.numel()]) } else { None };
        let mut gs = if needs[1] { Some(vec![0.0; d]) } else { None };
        let mut gb = if needs[2] { Some(vec![0.0; d]) } else { None };
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let gr = &out_grad[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            let mut w_mean = 0.0;
            let mut wx_mean = 0.0;
            for j in 0..d {
                let xhat = (xr[j] - mean) * inv;
                let w = gr[j] * sd[j];
                w_mean += w;
                wx_mean += w * xhat;
                if let Some(gs) = gs.as_mut() {
                    gs[j] += gr[j] * xhat;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += gr[j];
                }
            }
            w_mean /= d as f64;
            wx_mean /= d as f64;
            if let Some(gx) = gx.as_mut() {
                for j in 0..d {
                    let xhat = (xr[j] - mean) * inv;
                    let w = gr[j] * sd[j];
                    gx[r * d + j] = inv * (w - w_mean - xhat * wx_mean);
                }
            }
        }
        vec![gx, gs, gb]
    }

    fn name(&self) -> &'static str {
        "layer_norm"
    }
}

/// Layer normalization over the last axis with learnable scale and bias.
pub fn layer_norm(tape: &mut Tape, x: Var, scale: Var, bias: Var, eps: f64) -> Result<Var> {
    let xv = tape.value(x);
    let d = *xv.shape().last().ok_or_else(|| Error::Shape("layer_norm on rank-0".into()))?;
    if tape.value(scale).shape() != [d] || tape.value(bias).shape() != [d] {
        return Err(Error::Shape("layer_norm scale/bias must have shape [D]".into()));
    }
    let xd = xv.data();
    let sd = tape.value(scale).data();
    let bd = tape.value(bias).data();
    let mut data = vec![0.0; xv.numel()];
    par::for_each_row(&mut data, d, |r, row| {
        let xr = &xd[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            row[j] = (xr[j] - mean) * inv * sd[j] + bd[j];
        }
    });
    let shape = xv.shape().to_vec();
    let value = Tensor::new(shape, data)?;
    let macs = 6 * value.numel() as u64;
    Ok(tape.push_op(value, vec![x, scale, bias], Box::new(LayerNorm { eps }), macs))
}

struct RmsNorm {
    eps: f64,
}

impl TapeOp for RmsNorm {
    fn backward(
        &self,
        _out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, scale) = (parents[0], parents[1]);
        let d = *x.shape().last().unwrap();
        let rows = x.numel() / d;
        let xd = x.data();
        let sd = scale.data();
        let mut gx = if needs[0] { Some(vec![0.0; x.numel()]) } else { None };
        let mut gs = if needs[1] { Some(vec![0.0; d]) } else { None };
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let gr = &out_grad[r * d..(r + 1) * d];
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + self.eps).sqrt();
            let mut wx_mean = 0.0;
            for j in 0..d {
                let xhat = xr[j] * inv;
                let w = gr[j] * sd[j];
                wx_mean += w * xhat;
                if let Some(gs) = gs.as_mut() {
                    gs[j] += gr[j] * xhat;
                }
            }
            wx_mean /= d as f64;
            if let Some(gx) = gx.as_mut() {
                for j in 0..d {
                    let xhat = xr[j] * inv;
                    let w = gr[j] * sd[j];
                    gx[r * d + j] = inv * (w - xhat * wx_mean);
                }
            }
        }
        vec![gx, gs]
    }

    fn name(&self) -> &'static str {
        "rms_norm"
    }
}

/// RMS normalization over the last axis with learnable scale.
pub fn rms_norm(tape: &mut Tape, x: Var, scale: Var, eps: f64) -> Result<Var> {
    let xv = tape.value(x);
    let d = *xv.shape().last().ok_or_else(|| Error::Shape("rms_norm on rank-0".into()))?;
    if tape.value(scale).shape() != [d] {
        return Err(Error::Shape("rms_norm scale must have shape [D]".into()));
    }
    let xd = xv.data();
    let sd = tape.value(scale).data();
    let mut data = vec![0.0; xv.numel()];
    par::for_each_row(&mut data, d, |r, row| {
        let xr = &xd[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for j in 0..d {
            row[j] = xr[j] * inv * sd[j];
        }
    });
    let shape = xv.shape().to_vec();
    let value = Tensor::new(shape, data)?;
    let macs = 3 * value.numel() as u64;
    Ok(tape.push_op(value, vec![x, scale], Box::new(RmsNorm { eps }), macs))
}

// ---------------------------------------------------------------------------
// depthwise 1-D convolution along the middle (time) axis of [B, L, D]

struct DepthwiseConv1d {
    causal: bool,
    has_bias: bool,
}

impl DepthwiseConv1d {
    /// Left shift applied to the kernel window: y_t sums kern[j]·x[t-j+shift].
    fn shift(&self, k: usize) -> usize {
        if self.causal {
            0
        } else {
            (k - 1) / 2
        }
    }
}

impl TapeOp for DepthwiseConv1d {
    fn backward(
        &self,
        _out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, kern) = (parents[0], parents[1]);
        let (bsz, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = kern.shape()[1];
        let shift = self.shift(k);
        let xd = x.data();
        let kd = kern.data();
        let mut gx = if needs[0] { Some(vec![0.0; x.numel()]) } else { None };
        let mut gk = if needs[1] { Some(vec![0.0; kern.numel()]) } else { None };
        let mut gb = if self.has_bias && needs[2] {
            Some(vec![0.0; d])
        } else {
            None
        };
        for b in 0..bsz {
            for t in 0..l {
                let go = (b * l + t) * d;
                for j in 0..k {
                    let s = t as isize - j as isize + shift as isize;
                    if s < 0 || s >= l as isize {
                        continue;
                    }
                    let xo = (b * l + s as usize) * d;
                    for c in 0..d {
                        let g = out_grad[go + c];
                        if let Some(gx) = gx.as_mut() {
                            gx[xo + c] += g * kd[c * k + j];
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[c * k + j] += g * xd[xo + c];
                        }
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    for c in 0..d {
                        gb[c] += out_grad[go + c];
                    }
                }
            }
        }
        if self.has_bias {
            vec![gx, gk, gb]
        } else {
            vec![gx, gk]
        }
    }

    fn name(&self) -> &'static str {
        "depthwise_conv1d"
    }
}

/// Per-channel 1-D convolution of `x: [B, L, D]` with `kern: [D, k]`.
/// Causal mode pads k−1 on the left so output t sees inputs ≤ t.
pub fn conv1d_depthwise(
    tape: &mut Tape,
    x: Var,
    kern: Var,
    bias: Option<Var>,
    causal: bool,
) -> Result<Var> {
    let xv = tape.value(x);
    if xv.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "conv1d expects [B, L, D], got {:?}",
            xv.shape()
        )));
    }
    let (bsz, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let kv = tape.value(kern);
    if kv.shape().len() != 2 || kv.shape()[0] != d {
        return Err(Error::Shape(format!(
            "conv1d kernel must be [D, k] with D={d}, got {:?}",
            kv.shape()
        )));
    }
    let k = kv.shape()[1];
    if k == 0 || l == 0 {
        return Err(Error::Shape("conv1d needs k >= 1 and L >= 1".into()));
    }
    if let Some(b) = bias {
        if tape.value(b).shape() != [d] {
            return Err(Error::Shape("conv1d bias must have shape [D]".into()));
        }
    }
    let op = DepthwiseConv1d {
        causal,
        has_bias: bias.is_some(),
    };
    let shift = op.shift(k);
    let xd = xv.data();
    let kd = kv.data();
    let bd = bias.map(|b| tape.value(b).data().to_vec());
    let mut data = vec![0.0; bsz * l * d];
    par::for_each_row(&mut data, d, |r, row| {
        let (b, t) = (r / l, r % l);
        if let Some(bd) = &bd {
            row.copy_from_slice(bd);
        }
        for j in 0..k {
            let s = t as isize - j as isize + shift as isize;
            if s < 0 || s >= l as isize {
                continue;
            }
            let xo = (b * l + s as usize) * d;
            for c in 0..d {
                row[c] += kd[c * k + j] * xd[xo + c];
            }
        }
    });
    let value = Tensor::new(vec![bsz, l, d], data)?;
    let mut macs = (bsz * l * d * k) as u64;
    let mut parents = vec![x, kern];
    if let Some(b) = bias {
        parents.push(b);
        macs += (bsz * l * d) as u64;
    }
    Ok(tape.push_op(value, parents, Box::new(op), macs))
}

// ---------------------------------------------------------------------------
// data movement

struct Reshape;

impl TapeOp for Reshape {
    fn backward(
        &self,
        _out: &Tensor,
        out_grad: &[f64],
        _parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if needs[0] {
            vec![Some(out_grad.to_vec())]
        } else {
            vec![None]
        }
    }

    fn name(&self) -> &'static str {
        "reshape"
    }
}

pub fn reshape(tape: &mut Tape, a: Var, shape: Vec<usize>) -> Result<Var> {
    let value = tape.value(a).reshaped(shape)?;
    Ok(tape.push_op(value, vec![a], Box::new(Reshape), 0))
}

struct ReverseAxis {
    axis: usize,
}

fn reverse_data(x: &Tensor, axis: usize) -> Vec<f64> {
    let (outer, axn, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut data = vec![0.0; xd.len()];
    for o in 0..outer {
        for a in 0..axn {
            let src = (o * axn + a) * inner;
            let dst = (o * axn + (axn - 1 - a)) * inner;
            data[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
        }
    }
    data
}

impl TapeOp for ReverseAxis {
    fn backward(
        &self,
        out: &Tensor,
        out_grad: &[f64],
        _parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let g = Tensor::new(out.shape().to_vec(), out_grad.to_vec()).unwrap();
        vec![Some(reverse_data(&g, self.axis))]
    }

    fn name(&self) -> &'static str {
        "reverse_axis"
    }
}

/// Reverse a tensor along one axis.
pub fn reverse_axis(tape: &mut Tape, a: Var, axis: usize) -> Result<Var> {
    let x = tape.value(a);
    if axis >= x.shape().len() {
        return Err(Error::Shape(format!(
            "reverse axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let value = Tensor::new(x.shape().to_vec(), reverse_data(x, axis))?;
    Ok(tape.push_op(value, vec![a], Box::new(ReverseAxis { axis }), 0))
}

struct GatherAxis1 {
    idx: Vec<usize>,
}

impl TapeOp for GatherAxis1 {
    fn backward(
        &self,
        _out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let x = parents[0];
        let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let v = self.idx.len();
        let mut gx = vec![0.0; x.numel()];
        for b in 0..n {
            for (i, &src) in self.idx.iter().enumerate() {
                let go = (b * v + i) * d;
                let xo = (b * t + src) * d;
                for c in 0..d {
                    gx[xo + c] += out_grad[go + c];
                }
            }
        }
        vec![Some(gx)]
    }

    fn name(&self) -> &'static str {
        "gather_axis1"
    }
}

/// Select rows along axis 1 of `[N, T, D]`, same selection for every batch
/// element: `out[n, i, :] = x[n, idx[i], :]`.
pub fn gather_axis1(tape: &mut Tape, a: Var, idx: &[usize]) -> Result<Var> {
    let x = tape.value(a);
    if x.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "gather_axis1 expects [N, T, D], got {:?}",
            x.shape()
        )));
    }
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if let Some(&bad) = idx.iter().find(|&&i| i >= t) {
        return Err(Error::Shape(format!("gather index {bad} out of range 0..{t}")));
    }
    let xd = x.data();
    let v = idx.len();
    let mut data = vec![0.0; n * v * d];
    for b in 0..n {
        for (i, &src) in idx.iter().enumerate() {
            let xo = (b * t + src) * d;
            data[(b * v + i) * d..(b * v + i + 1) * d].copy_from_slice(&xd[xo..xo + d]);
        }
    }
    let value = Tensor::new(vec![n, v, d], data)?;
    Ok(tape.push_op(
        value,
        vec![a],
        Box::new(GatherAxis1 { idx: idx.to_vec() }),
        0,
    ))
}

struct ScatterFill {
    visible: Vec<usize>,
    masked: Vec<usize>,
}

impl TapeOp for ScatterFill {
    fn backward(
        &self,
        out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = parents[0];
        let (n, v, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let t = out.shape()[1];
        let mut gx = if needs[0] { Some(vec![0.0; x.numel()]) } else { None };
        let mut gf = if needs[1] { Some(vec![0.0; d]) } else { None };
        for b in 0..n {
            if let Some(gx) = gx.as_mut() {
                for (i, &dst) in self.visible.iter().enumerate() {
                    let go = (b * t + dst) * d;
                    let xo = (b * v + i) * d;
                    for c in 0..d {
                        gx[xo + c] += out_grad[go + c];
                    }
                }
            }
            if let Some(gf) = gf.as_mut() {
                for &dst in &self.masked {
                    let go = (b * t + dst) * d;
                    for c in 0..d {
                        gf[c] += out_grad[go + c];
                    }
                }
            }
        }
        vec![gx, gf]
    }

    fn name(&self) -> &'static str {
        "scatter_fill"
    }
}

/// Inverse of [`gather_axis1`] for masked autoencoding: place the rows of
/// `x: [N, V, D]` at `visible` slots of a `[N, T, D]` output and the shared
/// `fill: [D]` vector at every `masked` slot.
pub fn scatter_fill(
    tape: &mut Tape,
    x: Var,
    fill: Var,
    visible: &[usize],
    masked: &[usize],
) -> Result<Var> {
    let xv = tape.value(x);
    if xv.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "scatter_fill expects [N, V, D], got {:?}",
            xv.shape()
        )));
    }
    let (n, v, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    if visible.len() != v {
        return Err(Error::Shape(format!(
            "scatter_fill: {v} rows but {} visible slots",
            visible.len()
        )));
    }
    if tape.value(fill).shape() != [d] {
        return Err(Error::Shape("scatter_fill fill must have shape [D]".into()));
    }
    let t = visible.len() + masked.len();
    let mut seen = vec![false; t];
    for &i in visible.iter().chain(masked.iter()) {
        if i >= t || seen[i] {
            return Err(Error::Shape(
                "visible/masked must partition 0..T without repeats".into(),
            ));
        }
        seen[i] = true;
    }
    let xd = xv.data();
    let fd = tape.value(fill).data();
    let mut data = vec![0.0; n * t * d];
    for b in 0..n {
        for (i, &dst) in visible.iter().enumerate() {
            let xo = (b * v + i) * d;
            data[(b * t + dst) * d..(b * t + dst + 1) * d].copy_from_slice(&xd[xo..xo + d]);
        }
        for &dst in masked {
            data[(b * t + dst) * d..(b * t + dst + 1) * d].copy_from_slice(fd);
        }
    }
    let value = Tensor::new(vec![n, t, d], data)?;
    Ok(tape.push_op(
        value,
        vec![x, fill],
        Box::new(ScatterFill {
            visible: visible.to_vec(),
            masked: masked.to_vec(),
        }),
        0,
    ))
}

// ---------------------------------------------------------------------------
// softmax cross-entropy

struct SoftmaxCrossEntropy {
    labels: Vec<usize>,
}

impl TapeOp for SoftmaxCrossEntropy {
    fn backward(
        &self,
        _out: &Tensor,
        out_grad: &[f64],
        parents: &[&Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let logits = parents[0];
        let (n, k) = (logits.shape()[0], logits.shape()[1]);
        let xd = logits.data();
        let g = out_grad[0] / n as f64;
        let mut gx = vec![0.0; xd.len()];
        for r in 0..n {
            let row = &xd[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                let p = (row[j] - m).exp() / denom;
                let y = if j == self.labels[r] { 1.0 } else { 0.0 };
                gx[r * k + j] = g * (p - y);
            }
        }
        vec![Some(gx)]
    }

    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
}

/// Mean negative log-likelihood of integer labels under row-wise softmax of
/// `logits: [N, K]`.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let x = tape.value(logits);
    if x.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy expects [N, K], got {:?}",
            x.shape()
        )));
    }
    let (n, k) = (x.shape()[0], x.shape()[1]);
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!(
            "need one label per row: {} rows, {} labels",
            n,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} out of range 0..{k}")));
    }
    let xd = x.data();
    let mut total = 0.0;
    for r in 0..n {
        let row = &xd[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[labels[r]];
    }
    let value = Tensor::scalar(total / n as f64);
    let macs = (3 * n * k) as u64;
    Ok(tape.push_op(
        value,
        vec![logits],
        Box::new(SoftmaxCrossEntropy {
            labels: labels.to_vec(),
        }),
        macs,
    ))
}

/// Row-wise softmax probabilities (plain math, no tape).
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "softmax_rows expects [N, K], got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let xd = logits.data();
    let mut data = vec![0.0; n * k];
    for r in 0..n {
        let row = &xd[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for j in 0..k {
            data[r * k + j] = (row[j] - m).exp() / denom;
        }
    }
    Tensor::new(vec![n, k], data)
}
