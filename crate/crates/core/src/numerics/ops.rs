use super::kernels::{self, axis_split, ConvGeom};
use super::Tensor;
use crate::{Error, Result};

/// Recorded operation of a graph node. Parameters that are not tensors (axes,
/// strides, token ids) live in the tag itself.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Root node: parameter or input supplied from outside.
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `x + b` where `b`'s shape is a leading prefix of `x`'s shape.
    BiasAdd,
    /// Batched `[.., m, k] × [.., k, n]`.
    MatMul,
    /// `x[.., in] · w[out, in]ᵀ + b[out]`.
    Linear,
    /// `x[B, C, H, W] ⋆ w[O, C, kh, kw] + b[O]`.
    Conv2d { stride: usize, pad: usize },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// `x[B, C, ..]` with per-channel affine `gamma[C]`, `beta[C]`.
    GroupNorm { groups: usize, eps: f64 },
    Silu,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat { axis: usize },
    /// Rows of `table[V, d]` selected by `ids`.
    EmbedLookup(Vec<usize>),
    /// Mean over one axis, keeping it with extent 1.
    Mean { axis: usize },
    /// Nearest-neighbour 2× upsampling of the two trailing axes.
    UpsampleNearest2x,
    /// 2×2 average pooling of the two trailing axes.
    DownsampleAvg2x,
    /// `x / sqrt(Σx² + 1e-12)` along the last axis.
    L2Normalize,
}

const L2_EPS: f64 = 1e-12;

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::BiasAdd => "bias_add",
            Op::MatMul => "matmul",
            Op::Linear => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu => "silu",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::EmbedLookup(_) => "embed_lookup",
            Op::Mean { .. } => "mean",
            Op::UpsampleNearest2x => "upsample_nearest2x",
            Op::DownsampleAvg2x => "downsample_avg2x",
            Op::L2Normalize => "l2_normalize",
        }
    }

    fn arity(&self) -> Option<usize> {
        Some(match self {
            Op::Leaf => 0,
            Op::Add | Op::Sub | Op::Mul | Op::BiasAdd | Op::MatMul => 2,
            Op::Linear | Op::Conv2d { .. } | Op::GroupNorm { .. } => 3,
            Op::Concat { .. } => return None,
            _ => 1,
        })
    }

    /// Computes the forward value. Shared by graph construction and replay so
    /// both produce identical bits.
    pub(crate) fn eval(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let tag = self.tag();
        match self.arity() {
            Some(n) if n != inputs.len() => {
                return Err(Error::shape(
                    tag,
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
            None if inputs.is_empty() => {
                return Err(Error::shape(tag, "expected at least one input"))
            }
            _ => {}
        }
        match self {
            Op::Leaf => Err(Error::Numerics("leaf nodes carry no computation".into())),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                same_shape(tag, a, b)?;
                Ok(match self {
                    Op::Add => a.zip_map(b, |x, y| x + y)?,
                    Op::Sub => a.zip_map(b, |x, y| x - y)?,
                    _ => a.zip_map(b, |x, y| x * y)?,
                })
            }
            Op::Scale(c) => Ok(inputs[0].map(|x| x * c)),
            Op::BiasAdd => {
                let (x, b) = (inputs[0], inputs[1]);
                let inner = bias_inner(x, b)?;
                let mut out = x.clone();
                for (chunk, &bv) in out.data_mut().chunks_mut(inner).zip(b.data()) {
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
                Ok(out)
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let d = matmul_dims(a, b)?;
                let mut shape = a.shape()[..a.rank() - 1].to_vec();
                shape.push(d.n);
                let mut out = Tensor::zeros(&shape);
                let o = out.data_mut();
                for i in 0..d.batch {
                    kernels::gemm(
                        d.m,
                        d.k,
                        d.n,
                        &a.data()[i * d.m * d.k..],
                        (d.k, 1),
                        &b.data()[i * d.k * d.n..],
                        (d.n, 1),
                        &mut o[i * d.m * d.n..],
                        0.0,
                    );
                }
                Ok(out)
            }
            Op::Linear => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let (rows, fin, fout) = linear_dims(x, w, b)?;
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = fout;
                let mut out = Tensor::zeros(&shape);
                let o = out.data_mut();
                for row in o.chunks_mut(fout) {
                    row.copy_from_slice(b.data());
                }
                kernels::gemm(rows, fin, fout, x.data(), (fin, 1), w.data(), (1, fin), o, 1.0);
                Ok(out)
            }
            Op::Conv2d { stride, pad } => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let (batch, geom, outc) = conv_dims(x, w, b, *stride, *pad)?;
                let mut out = Tensor::zeros(&[batch, outc, geom.out_h, geom.out_w]);
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { rows * cols }];
                let in_len = geom.channels * geom.height * geom.width;
                let o = out.data_mut();
                for n in 0..batch {
                    let xb = &x.data()[n * in_len..(n + 1) * in_len];
                    let ob = &mut o[n * outc * cols..(n + 1) * outc * cols];
                    for (c, chunk) in ob.chunks_mut(cols).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = b.data()[c]);
                    }
                    let src: &[f64] = if geom.is_pointwise() {
                        xb
                    } else {
                        kernels::im2col(xb, &geom, &mut col);
                        &col
                    };
                    kernels::gemm(outc, rows, cols, w.data(), (rows, 1), src, (cols, 1), ob, 1.0);
                }
                Ok(out)
            }
            Op::Softmax { axis } | Op::LogSoftmax { axis } => {
                let x = inputs[0];
                check_axis(tag, x, *axis)?;
                let mut out = Tensor::zeros(x.shape());
                if matches!(self, Op::Softmax { .. }) {
                    kernels::softmax(x.data(), x.shape(), *axis, out.data_mut());
                } else {
                    kernels::log_softmax(x.data(), x.shape(), *axis, out.data_mut());
                }
                Ok(out)
            }
            Op::GroupNorm { groups, eps } => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let gn = GroupNormDims::new(x, gamma, beta, *groups)?;
                let mut out = Tensor::zeros(x.shape());
                let o = out.data_mut();
                gn.for_each_group(x.data(), *eps, |range, mean, inv_std, c0| {
                    for (j, i) in range.enumerate() {
                        let c = c0 + j / gn.spatial;
                        let xhat = (x.data()[i] - mean) * inv_std;
                        o[i] = gamma.data()[c] * xhat + beta.data()[c];
                    }
                });
                Ok(out)
            }
            Op::Silu => Ok(inputs[0].map(|x| x * kernels::sigmoid(x))),
            Op::Reshape(shape) => {
                let x = inputs[0];
                let n: usize = shape.iter().product();
                if n != x.numel() || shape.contains(&0) {
                    return Err(Error::shape(
                        tag,
                        format!("cannot view {:?} as {shape:?}", x.shape()),
                    ));
                }
                x.clone().reshape(shape)
            }
            Op::Permute(perm) => {
                let x = inputs[0];
                check_perm(x, perm)?;
                let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
                let mut out = Tensor::zeros(&shape);
                kernels::permute(x.data(), x.shape(), perm, out.data_mut());
                Ok(out)
            }
            Op::Concat { axis } => {
                let first = inputs[0];
                check_axis(tag, first, *axis)?;
                for t in &inputs[1..] {
                    let ok = t.rank() == first.rank()
                        && t.shape()
                            .iter()
                            .zip(first.shape())
                            .enumerate()
                            .all(|(i, (a, b))| i == *axis || a == b);
                    if !ok {
                        return Err(Error::shape(
                            tag,
                            format!(
                                "{:?} and {:?} differ outside axis {axis}",
                                first.shape(),
                                t.shape()
                            ),
                        ));
                    }
                }
                let mut shape = first.shape().to_vec();
                shape[*axis] = inputs.iter().map(|t| t.shape()[*axis]).sum();
                let (outer, _, inner) = axis_split(&shape, *axis);
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for t in inputs {
                        let block = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                    }
                }
                Tensor::new(shape, data)
            }
            Op::EmbedLookup(ids) => {
                let table = inputs[0];
                if table.rank() != 2 {
                    return Err(Error::shape(
                        tag,
                        format!("table must be 2-D, got {:?}", table.shape()),
                    ));
                }
                let (v, d) = (table.shape()[0], table.shape()[1]);
                if ids.is_empty() {
                    return Err(Error::shape(tag, "no ids"));
                }
                if let Some(bad) = ids.iter().find(|&&i| i >= v) {
                    return Err(Error::shape(
                        tag,
                        format!("id {bad} out of range for vocabulary of {v}"),
                    ));
                }
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![ids.len(), d], data)
            }
            Op::Mean { axis } => {
                let x = inputs[0];
                check_axis(tag, x, *axis)?;
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut shape = x.shape().to_vec();
                shape[*axis] = 1;
                let mut out = Tensor::zeros(&shape);
                let o = out.data_mut();
                for a in 0..outer {
                    for k in 0..len {
                        let src = &x.data()[(a * len + k) * inner..(a * len + k + 1) * inner];
                        for (dst, s) in o[a * inner..(a + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v /= len as f64);
                Ok(out)
            }
            Op::UpsampleNearest2x => {
                let x = inputs[0];
                let (planes, h, w) = spatial_dims(tag, x)?;
                let mut shape = x.shape().to_vec();
                let r = shape.len();
                shape[r - 2] = 2 * h;
                shape[r - 1] = 2 * w;
                let mut out = Tensor::zeros(&shape);
                let o = out.data_mut();
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            o[(p * 2 * h + y) * 2 * w + xx] = x.data()[(p * h + y / 2) * w + xx / 2];
                        }
                    }
                }
                Ok(out)
            }
            Op::DownsampleAvg2x => {
                let x = inputs[0];
                let (planes, h, w) = spatial_dims(tag, x)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(
                        tag,
                        format!("spatial dims {h}x{w} must be even"),
                    ));
                }
                let (oh, ow) = (h / 2, w / 2);
                let mut shape = x.shape().to_vec();
                let r = shape.len();
                shape[r - 2] = oh;
                shape[r - 1] = ow;
                let mut out = Tensor::zeros(&shape);
                let o = out.data_mut();
                let xd = x.data();
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let at = |dy: usize, dx: usize| xd[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                            o[(p * oh + y) * ow + xx] =
                                0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                        }
                    }
                }
                Ok(out)
            }
            Op::L2Normalize => {
                let x = inputs[0];
                let d = *x.shape().last().unwrap();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(d) {
                    let norm = (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                Ok(out)
            }
        }
    }

    /// Vector-Jacobian product: given `g = ∂L/∂out`, returns `∂L/∂input_i` for
    /// every input with `need[i]` set.
    pub(crate) fn vjp(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        g: &Tensor,
        need: &[bool],
    ) -> Vec<Option<Tensor>> {
        let mut res: Vec<Option<Tensor>> = vec![None; inputs.len()];
        match self {
            Op::Leaf => {}
            Op::Add => {
                for (r, &n) in res.iter_mut().zip(need) {
                    if n {
                        *r = Some(g.clone());
                    }
                }
            }
            Op::Sub => {
                if need[0] {
                    res[0] = Some(g.clone());
                }
                if need[1] {
                    res[1] = Some(g.map(|v| -v));
                }
            }
            Op::Mul => {
                if need[0] {
                    res[0] = g.zip_map(inputs[1], |a, b| a * b).ok();
                }
                if need[1] {
                    res[1] = g.zip_map(inputs[0], |a, b| a * b).ok();
                }
            }
            Op::Scale(c) => res[0] = Some(g.map(|v| v * c)),
            Op::BiasAdd => {
                if need[0] {
                    res[0] = Some(g.clone());
                }
                if need[1] {
                    let b = inputs[1];
                    let inner = g.numel() / b.numel();
                    let data = g.data().chunks(inner).map(|c| c.iter().sum()).collect();
                    res[1] = Tensor::new(b.shape().to_vec(), data).ok();
                }
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let d = matmul_dims(a, b).expect("validated in forward");
                if need[0] {
                    let mut da = Tensor::zeros(a.shape());
                    for i in 0..d.batch {
                        // da = g · bᵀ
                        kernels::gemm(
                            d.m,
                            d.n,
                            d.k,
                            &g.data()[i * d.m * d.n..],
                            (d.n, 1),
                            &b.data()[i * d.k * d.n..],
                            (1, d.n),
                            &mut da.data_mut()[i * d.m * d.k..],
                            0.0,
                        );
                    }
                    res[0] = Some(da);
                }
                if need[1] {
                    let mut db = Tensor::zeros(b.shape());
                    for i in 0..d.batch {
                        // db = aᵀ · g
                        kernels::gemm(
                            d.k,
                            d.m,
                            d.n,
                            &a.data()[i * d.m * d.k..],
                            (1, d.k),
                            &g.data()[i * d.m * d.n..],
                            (d.n, 1),
                            &mut db.data_mut()[i * d.k * d.n..],
                            0.0,
                        );
                    }
                    res[1] = Some(db);
                }
            }
            Op::Linear => {
                let (x, w) = (inputs[0], inputs[1]);
                let (rows, fin, fout) = (x.numel() / w.shape()[1], w.shape()[1], w.shape()[0]);
                if need[0] {
                    let mut dx = Tensor::zeros(x.shape());
                    kernels::gemm(rows, fout, fin, g.data(), (fout, 1), w.data(), (fin, 1), dx.data_mut(), 0.0);
                    res[0] = Some(dx);
                }
                if need[1] {
                    let mut dw = Tensor::zeros(w.shape());
                    kernels::gemm(fout, rows, fin, g.data(), (1, fout), x.data(), (fin, 1), dw.data_mut(), 0.0);
                    res[1] = Some(dw);
                }
                if need[2] {
                    let mut db = Tensor::zeros(&[fout]);
                    for row in g.data().chunks(fout) {
                        db.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    res[2] = Some(db);
                }
            }
            Op::Conv2d { stride, pad } => {
                let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
                let (batch, geom, outc) =
                    conv_dims(x, w, b, *stride, *pad).expect("validated in forward");
                let (rows, cols) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { rows * cols }];
                let mut dcol = vec![0.0; rows * cols];
                let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
                let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
                for n in 0..batch {
                    let gb = &g.data()[n * outc * cols..(n + 1) * outc * cols];
                    if let Some(dw) = dw.as_mut() {
                        let xb = &x.data()[n * in_len..(n + 1) * in_len];
                        let src: &[f64] = if geom.is_pointwise() {
                            xb
                        } else {
                            kernels::im2col(xb, &geom, &mut col);
                            &col
                        };
                        // dw += g_n · colᵀ
                        kernels::gemm(outc, cols, rows, gb, (cols, 1), src, (1, cols), dw.data_mut(), 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
                        if geom.is_pointwise() {
                            kernels::gemm(rows, outc, cols, w.data(), (1, rows), gb, (cols, 1), dxb, 0.0);
                        } else {
                            kernels::gemm(rows, outc, cols, w.data(), (1, rows), gb, (cols, 1), &mut dcol, 0.0);
                            kernels::col2im(&dcol, &geom, dxb);
                        }
                    }
                }
                res[0] = dx;
                res[1] = dw;
                if need[2] {
                    let mut db = Tensor::zeros(&[outc]);
                    for (i, chunk) in g.data().chunks(cols).enumerate() {
                        db.data_mut()[i % outc] += chunk.iter().sum::<f64>();
                    }
                    res[2] = Some(db);
                }
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut dx = Tensor::zeros(out.shape());
                let d = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                res[0] = Some(dx);
            }
            Op::LogSoftmax { axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut dx = Tensor::zeros(out.shape());
                let d = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let s: f64 = (0..len).map(|k| gd[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = gd[at(k)] - y[at(k)].exp() * s;
                        }
                    }
                }
                res[0] = Some(dx);
            }
            Op::GroupNorm { groups, eps } => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let gn = GroupNormDims::new(x, gamma, beta, *groups).expect("validated in forward");
                let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
                let mut dgamma = Tensor::zeros(gamma.shape());
                let mut dbeta = Tensor::zeros(beta.shape());
                let (xd, gd, gam) = (x.data(), g.data(), gamma.data());
                gn.for_each_group(xd, *eps, |range, mean, inv_std, c0| {
                    let len = range.len() as f64;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for (j, i) in range.clone().enumerate() {
                        let c = c0 + j / gn.spatial;
                        let xhat = (xd[i] - mean) * inv_std;
                        let dxhat = gd[i] * gam[c];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgamma.data_mut()[c] += gd[i] * xhat;
                        dbeta.data_mut()[c] += gd[i];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxd = dx.data_mut();
                        let (m1, m2) = (sum_dxhat / len, sum_dxhat_xhat / len);
                        for (j, i) in range.enumerate() {
                            let c = c0 + j / gn.spatial;
                            let xhat = (xd[i] - mean) * inv_std;
                            dxd[i] = inv_std * (gd[i] * gam[c] - m1 - xhat * m2);
                        }
                    }
                });
                res[0] = dx;
                if need[1] {
                    res[1] = Some(dgamma);
                }
                if need[2] {
                    res[2] = Some(dbeta);
                }
            }
            Op::Silu => {
                res[0] = g
                    .zip_map(inputs[0], |gv, x| {
                        let s = kernels::sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .ok();
            }
            Op::Reshape(_) => res[0] = g.clone().reshape(inputs[0].shape()).ok(),
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let mut dx = Tensor::zeros(inputs[0].shape());
                kernels::permute(g.data(), g.shape(), &inv, dx.data_mut());
                res[0] = Some(dx);
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut start = 0;
                for (i, t) in inputs.iter().enumerate() {
                    let len = t.shape()[*axis];
                    if need[i] {
                        let mut data = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        res[i] = Tensor::new(t.shape().to_vec(), data).ok();
                    }
                    start += len;
                }
            }
            Op::EmbedLookup(ids) => {
                let table = inputs[0];
                let d = table.shape()[1];
                let mut dt = Tensor::zeros(table.shape());
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    dt.data_mut()[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
                res[0] = Some(dt);
            }
            Op::Mean { axis } => {
                let x = inputs[0];
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for a in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            d[(a * len + k) * inner + i] = g.data()[a * inner + i] / len as f64;
                        }
                    }
                }
                res[0] = Some(dx);
            }
            Op::UpsampleNearest2x => {
                let x = inputs[0];
                let r = x.rank();
                let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
                let planes = x.numel() / (h * w);
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + y / 2) * w + xx / 2] += g.data()[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                res[0] = Some(dx);
            }
            Op::DownsampleAvg2x => {
                let x = inputs[0];
                let r = x.rank();
                let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = x.numel() / (h * w);
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(p * h + y) * w + xx] = 0.25 * g.data()[(p * oh + y / 2) * ow + xx / 2];
                        }
                    }
                }
                res[0] = Some(dx);
            }
            Op::L2Normalize => {
                let x = inputs[0];
                let dim = *x.shape().last().unwrap();
                let mut dx = Tensor::zeros(x.shape());
                for ((dr, xr), (yr, gr)) in dx
                    .data_mut()
                    .chunks_mut(dim)
                    .zip(x.data().chunks(dim))
                    .zip(out.data().chunks(dim).zip(g.data().chunks(dim)))
                {
                    let norm = (xr.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt();
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..dim {
                        dr[k] = (gr[k] - yr[k] * yg) / norm;
                    }
                }
                res[0] = Some(dx);
            }
        }
        res
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_axis(op: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn check_perm(x: &Tensor, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; x.rank()];
    let ok = perm.len() == x.rank()
        && perm
            .iter()
            .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
    if !ok {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of the axes of {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn bias_inner(x: &Tensor, b: &Tensor) -> Result<usize> {
    if b.rank() > x.rank() || x.shape()[..b.rank()] != *b.shape() {
        return Err(Error::shape(
            "bias_add",
            format!(
                "bias {:?} is not a leading prefix of {:?}",
                b.shape(),
                x.shape()
            ),
        ));
    }
    Ok(x.numel() / b.numel())
}

fn spatial_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(
            op,
            format!("need at least 2 axes, got {:?}", x.shape()),
        ));
    }
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    Ok((x.numel() / (h * w), h, w))
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatMulDims> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(Error::shape(
            "matmul",
            format!(
                "incompatible batch dims {:?} x {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dims differ: {:?} x {:?} ({k} vs {k2})",
                a.shape(),
                b.shape()
            ),
        ));
    }
    Ok(MatMulDims {
        batch: a.shape()[..ra - 2].iter().product(),
        m,
        k,
        n,
    })
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if w.rank() != 2 {
        return Err(Error::shape(
            "linear",
            format!("weight must be 2-D, got {:?}", w.shape()),
        ));
    }
    let (fout, fin) = (w.shape()[0], w.shape()[1]);
    if *x.shape().last().unwrap() != fin {
        return Err(Error::shape(
            "linear",
            format!(
                "input last dim {} does not match weight {:?}",
                x.shape().last().unwrap(),
                w.shape()
            ),
        ));
    }
    if b.shape() != [fout] {
        return Err(Error::shape(
            "linear",
            format!("bias {:?} does not match {fout} outputs", b.shape()),
        ));
    }
    Ok((x.numel() / fin, fin, fout))
}

fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, ConvGeom, usize)> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "expected 4-D input and kernel, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    let (batch, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but kernel {:?} expects {ci}", w.shape()),
        ));
    }
    if b.shape() != [o] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} does not match {o} output channels", b.shape()),
        ));
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} (stride {stride}, pad {pad}) does not fit {h}x{wd}"),
        ));
    }
    let geom = ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        pad,
        out_h: (h + 2 * pad - kh) / stride + 1,
        out_w: (wd + 2 * pad - kw) / stride + 1,
    };
    Ok((batch, geom, o))
}

struct GroupNormDims {
    batch: usize,
    channels: usize,
    groups: usize,
    spatial: usize,
}

impl GroupNormDims {
    fn new(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Self> {
        if x.rank() < 2 {
            return Err(Error::shape(
                "group_norm",
                format!("need [B, C, ..], got {:?}", x.shape()),
            ));
        }
        let channels = x.shape()[1];
        if groups == 0 || channels % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{channels} channels not divisible into {groups} groups"),
            ));
        }
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "affine shapes {:?}/{:?} do not match {channels} channels",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        Ok(Self {
            batch: x.shape()[0],
            channels,
            groups,
            spatial: x.numel() / (x.shape()[0] * channels),
        })
    }

    /// Calls `f(index range, mean, 1/std, first channel)` for every group.
    fn for_each_group(
        &self,
        x: &[f64],
        eps: f64,
        mut f: impl FnMut(std::ops::Range<usize>, f64, f64, usize),
    ) {
        let cpg = self.channels / self.groups;
        let len = cpg * self.spatial;
        for b in 0..self.batch {
            for g in 0..self.groups {
                let start = (b * self.channels + g * cpg) * self.spatial;
                let vals = &x[start..start + len];
                let mean = vals.iter().sum::<f64>() / len as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
                f(start..start + len, mean, 1.0 / (var + eps).sqrt(), g * cpg);
            }
        }
    }
}
