//! Forward kernels and the gradient kernels the tape reuses.
//!
//! These are plain functions over [`Tensor`]; the tape wraps them with
//! backward rules. Inference paths call them directly.

use super::{numel, strides, Scalar, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

/// Rank of the `[T, B, C, H, W]` activation layout.
pub const TIME_MAJOR_RANK: usize = 5;

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

// Temporal replication must be explicit: a rank-5 result may not be produced
// by stretching an operand along axis 0.
fn check_time_axis(out: &[usize], operand: &[usize]) -> Result<()> {
    if out.len() == TIME_MAJOR_RANK && out[0] > 1 {
        let aligned = if operand.len() == TIME_MAJOR_RANK {
            operand[0]
        } else {
            1
        };
        if aligned != out[0] {
            return Err(Error::TimeBroadcast(format!(
                "operand {operand:?} would be replicated over T={}",
                out[0]
            )));
        }
    }
    Ok(())
}

/// For each flat index of `out`, the flat index of the broadcast operand.
fn broadcast_index_map(operand: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - operand.len();
    let op_strides = strides(operand);
    let mut eff = vec![0usize; rank];
    for i in 0..operand.len() {
        if operand[i] != 1 {
            eff[i + offset] = op_strides[i];
        }
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn zip_broadcast<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec_unchecked(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    check_time_axis(&out, a.shape())?;
    check_time_axis(&out, b.shape())?;
    let ma = broadcast_index_map(a.shape(), &out);
    let mb = broadcast_index_map(b.shape(), &out);
    let (da, db) = (a.data(), b.data());
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::from_vec_unchecked(&out, data)
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_broadcast(a, b, |x, y| x + y)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_broadcast(a, b, |x, y| x - y)
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_broadcast(a, b, |x, y| x * y)
}

pub fn scale<S: Scalar>(a: &Tensor<S>, s: f64) -> Tensor<S> {
    let s = S::cast(s);
    Tensor::from_fn(a.shape(), |i| a.data()[i] * s)
}

pub fn map<S: Scalar>(a: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::from_fn(a.shape(), |i| f(a.data()[i]))
}

/// Operand values laid out over the broadcast result shape.
pub(crate) fn expand_to<S: Scalar>(t: &Tensor<S>, out: &[usize]) -> Vec<S> {
    if t.shape() == out {
        return t.data().to_vec();
    }
    let d = t.data();
    broadcast_index_map(t.shape(), out).into_iter().map(|i| d[i]).collect()
}

/// Sum a gradient of shape `out` back down to the broadcast operand `target`.
pub(crate) fn reduce_to_shape<S: Scalar>(grad: &[S], out: &[usize], target: &[usize]) -> Vec<S> {
    if out == target {
        return grad.to_vec();
    }
    let map = broadcast_index_map(target, out);
    let mut acc = vec![0.0f64; numel(target)];
    for (g, &j) in grad.iter().zip(&map) {
        acc[j] += g.wide();
    }
    acc.into_iter().map(S::cast).collect()
}

fn normalize_axes(rank: usize, axes: &[usize]) -> Result<Vec<usize>> {
    let mut v = axes.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.len() != axes.len() {
        return invalid(format!("duplicate reduction axes {axes:?}"));
    }
    if let Some(&bad) = v.iter().find(|&&a| a >= rank) {
        return invalid(format!("axis {bad} out of range for rank {rank}"));
    }
    Ok(v)
}

/// Output shape plus, for each input flat index, its output flat index.
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &n)| n)
        .collect();
    // Keep reduced axes with extent 1 so the broadcast map lines up.
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &n)| if axes.contains(&i) { 1 } else { n })
        .collect();
    let map = broadcast_index_map(&kept, shape);
    (out_shape, map)
}

pub fn sum_axes<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let axes = normalize_axes(x.rank(), axes)?;
    let (out_shape, map) = reduce_map(x.shape(), &axes);
    let mut acc = vec![0.0f64; numel(&out_shape)];
    for (v, &j) in x.data().iter().zip(&map) {
        acc[j] += v.wide();
    }
    Tensor::from_vec_unchecked(&out_shape, acc.into_iter().map(S::cast).collect())
}

pub fn sum_all<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor::scalar(S::cast(x.data().iter().map(|v| v.wide()).sum()))
}

fn reduced_count(shape: &[usize], axes: &[usize]) -> usize {
    axes.iter().map(|&a| shape[a]).product()
}

pub fn mean_axes<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let axes = normalize_axes(x.rank(), axes)?;
    let count = reduced_count(x.shape(), &axes);
    if count == 0 {
        return invalid("mean over an empty axis");
    }
    let (out_shape, map) = reduce_map(x.shape(), &axes);
    let mut acc = vec![0.0f64; numel(&out_shape)];
    for (v, &j) in x.data().iter().zip(&map) {
        acc[j] += v.wide();
    }
    let inv = 1.0 / count as f64;
    Tensor::from_vec_unchecked(&out_shape, acc.into_iter().map(|v| S::cast(v * inv)).collect())
}

/// Population (biased) variance over `axes`.
pub fn var_axes<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let (_, var) = mean_var_wide(x, axes)?;
    let out_shape = reduce_map(x.shape(), &normalize_axes(x.rank(), axes)?).0;
    Tensor::from_vec_unchecked(&out_shape, var.into_iter().map(S::cast).collect())
}

/// Mean and biased variance accumulated in `f64` (two-pass).
pub(crate) fn mean_var_wide<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let axes = normalize_axes(x.rank(), axes)?;
    let count = reduced_count(x.shape(), &axes);
    if count == 0 {
        return invalid("variance over an empty axis");
    }
    let (out_shape, map) = reduce_map(x.shape(), &axes);
    let n_out = numel(&out_shape);
    let mut mean = vec![0.0f64; n_out];
    for (v, &j) in x.data().iter().zip(&map) {
        mean[j] += v.wide();
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0f64; n_out];
    for (v, &j) in x.data().iter().zip(&map) {
        let d = v.wide() - mean[j];
        var[j] += d * d;
    }
    var.iter_mut().for_each(|m| *m /= count as f64);
    Ok((mean, var))
}

/// Broadcast a reduced gradient back to the input shape.
pub(crate) fn expand_reduced<S: Scalar>(g: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let axes = normalize_axes(shape.len(), axes).expect("axes validated in forward");
    let (_, map) = reduce_map(shape, &axes);
    map.iter().map(|&j| g[j]).collect()
}

pub(crate) fn reduce_axes_of(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, usize)> {
    let axes = normalize_axes(shape.len(), axes)?;
    Ok((axes.clone(), reduced_count(shape, &axes)))
}

// ---------------------------------------------------------------------------
// Convolutions. Input is `[..., C, H, W]`; leading axes are flattened into one
// batch axis, so `[T, B, C, H, W]` activations go straight through.
// ---------------------------------------------------------------------------

struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn image_geom(shape: &[usize]) -> Result<Geom> {
    if shape.len() < 3 {
        return shape_err(format!("convolution input needs [..., C, H, W], got {shape:?}"));
    }
    let r = shape.len();
    Ok(Geom {
        n: numel(&shape[..r - 3]),
        c: shape[r - 3],
        h: shape[r - 2],
        w: shape[r - 1],
    })
}

fn check_odd(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return invalid(format!("kernel size must be odd, got {k}"));
    }
    Ok(())
}

fn dw_kernel_size(x: &Geom, kshape: &[usize]) -> Result<usize> {
    if kshape.len() != 3 || kshape[1] != kshape[2] {
        return shape_err(format!("depthwise kernel must be [C, k, k], got {kshape:?}"));
    }
    if kshape[0] != x.c {
        return shape_err(format!(
            "depthwise kernel has {} channels, input has {}",
            kshape[0], x.c
        ));
    }
    check_odd(kshape[1])?;
    Ok(kshape[1])
}

/// Depthwise cross-correlation, stride 1, zero "same" padding.
pub fn conv2d_dw<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>) -> Result<Tensor<S>> {
    let g = image_geom(x.shape())?;
    let k = dw_kernel_size(&g, kernel.shape())?;
    let p = k / 2;
    let (h, w) = (g.h, g.w);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![S::ZERO; xd.len()];
    let mut acc = vec![0.0f64; w];
    for n in 0..g.n {
        for c in 0..g.c {
            let base = (n * g.c + c) * h * w;
            let kc = &kd[c * k * k..(c + 1) * k * k];
            for i in 0..h {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for u in 0..k {
                    let y = i as isize + u as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let row = &xd[base + y as usize * w..base + (y as usize + 1) * w];
                    for v in 0..k {
                        let kv = kc[u * k + v].wide();
                        // out column j reads input column j + v - p
                        let shift = v as isize - p as isize;
                        let j0 = (-shift).max(0) as usize;
                        let j1 = (w as isize - shift).min(w as isize).max(0) as usize;
                        for j in j0..j1 {
                            acc[j] += kv * row[(j as isize + shift) as usize].wide();
                        }
                    }
                }
                for j in 0..w {
                    out[base + i * w + j] = S::cast(acc[j]);
                }
            }
        }
    }
    Tensor::from_vec_unchecked(x.shape(), out)
}

/// Gradients of [`conv2d_dw`] with respect to input and kernel.
pub(crate) fn conv2d_dw_backward<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>, dy: &[S]) -> (Vec<S>, Vec<S>) {
    let g = image_geom(x.shape()).expect("validated in forward");
    let k = kernel.shape()[1];
    let p = k as isize / 2;
    let (h, w) = (g.h as isize, g.w as isize);
    let xd = x.data();
    let kd = kernel.data();
    let mut dx = vec![0.0f64; xd.len()];
    let mut dk = vec![0.0f64; kd.len()];
    for n in 0..g.n {
        for c in 0..g.c {
            let base = (n * g.c + c) * g.h * g.w;
            for i in 0..h {
                for j in 0..w {
                    let gy = dy[base + (i * w + j) as usize].wide();
                    if gy == 0.0 {
                        continue;
                    }
                    for u in 0..k as isize {
                        let y = i + u - p;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for v in 0..k as isize {
                            let xx = j + v - p;
                            if xx < 0 || xx >= w {
                                continue;
                            }
                            let xi = base + (y * w + xx) as usize;
                            let ki = c * k * k + (u * k as isize + v) as usize;
                            dx[xi] += gy * kd[ki].wide();
                            dk[ki] += gy * xd[xi].wide();
                        }
                    }
                }
            }
        }
    }
    (
        dx.into_iter().map(S::cast).collect(),
        dk.into_iter().map(S::cast).collect(),
    )
}

pub fn conv_out_extent(n: usize, k: usize, stride: usize) -> usize {
    let p = k / 2;
    (n + 2 * p - k) / stride + 1
}

fn dense_kernel_dims(x: &Geom, kshape: &[usize], stride: usize) -> Result<(usize, usize)> {
    if kshape.len() != 4 || kshape[2] != kshape[3] {
        return shape_err(format!("kernel must be [Cout, Cin, k, k], got {kshape:?}"));
    }
    if kshape[1] != x.c {
        return shape_err(format!(
            "kernel expects {} input channels, input has {}",
            kshape[1], x.c
        ));
    }
    check_odd(kshape[2])?;
    if stride != 1 && stride != 2 {
        return invalid(format!("stride must be 1 or 2, got {stride}"));
    }
    Ok((kshape[0], kshape[2]))
}

/// Dense cross-correlation with zero padding `(k-1)/2` and stride 1 or 2.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
    let g = image_geom(x.shape())?;
    let (cout, k) = dense_kernel_dims(&g, kernel.shape(), stride)?;
    let (ho, wo) = (conv_out_extent(g.h, k, stride), conv_out_extent(g.w, k, stride));
    let xd = x.data();
    let kd = kernel.data();
    let p = (k / 2) as isize;
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let mut out = vec![S::ZERO; g.n * cout * plane_out];
    let mut acc = vec![0.0f64; plane_out];
    let mut xw = vec![0.0f64; g.c * plane_in];
    for n in 0..g.n {
        for (dst, v) in xw.iter_mut().zip(&xd[n * g.c * plane_in..(n + 1) * g.c * plane_in]) {
            *dst = v.wide();
        }
        for o in 0..cout {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ci in 0..g.c {
                let plane = &xw[ci * plane_in..(ci + 1) * plane_in];
                if k == 1 && stride == 1 {
                    let kv = kd[o * g.c + ci].wide();
                    if kv != 0.0 {
                        for (a, &v) in acc.iter_mut().zip(plane) {
                            *a += kv * v;
                        }
                    }
                    continue;
                }
                for u in 0..k {
                    for v in 0..k {
                        let kv = kd[((o * g.c + ci) * k + u) * k + v].wide();
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..ho {
                            let y = (i * stride) as isize + u as isize - p;
                            if y < 0 || y >= g.h as isize {
                                continue;
                            }
                            let row = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                            let arow = &mut acc[i * wo..(i + 1) * wo];
                            for (j, a) in arow.iter_mut().enumerate() {
                                let xx = (j * stride) as isize + v as isize - p;
                                if xx >= 0 && xx < g.w as isize {
                                    *a += kv * row[xx as usize];
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(n * cout + o) * plane_out..(n * cout + o + 1) * plane_out];
            for (d, &a) in dst.iter_mut().zip(&acc) {
                *d = S::cast(a);
            }
        }
    }
    let r = x.rank();
    let mut shape = x.shape()[..r - 3].to_vec();
    shape.extend_from_slice(&[cout, ho, wo]);
    Tensor::from_vec_unchecked(&shape, out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    dy: &[S],
) -> (Vec<S>, Vec<S>) {
    let g = image_geom(x.shape()).expect("validated in forward");
    let (cout, k) = (kernel.shape()[0], kernel.shape()[2]);
    let (ho, wo) = (conv_out_extent(g.h, k, stride), conv_out_extent(g.w, k, stride));
    let p = (k / 2) as isize;
    let plane_in = g.h * g.w;
    let plane_out = ho * wo;
    let xd = x.data();
    let kd = kernel.data();
    let mut dx = vec![0.0f64; xd.len()];
    let mut dk = vec![0.0f64; kd.len()];
    let mut gw = vec![0.0f64; plane_out];
    let mut xw = vec![0.0f64; plane_in];
    for n in 0..g.n {
        for o in 0..cout {
            let src = &dy[(n * cout + o) * plane_out..(n * cout + o + 1) * plane_out];
            for (d, v) in gw.iter_mut().zip(src) {
                *d = v.wide();
            }
            for ci in 0..g.c {
                let xoff = (n * g.c + ci) * plane_in;
                for (d, v) in xw.iter_mut().zip(&xd[xoff..xoff + plane_in]) {
                    *d = v.wide();
                }
                let dxp = &mut dx[xoff..xoff + plane_in];
                if k == 1 && stride == 1 {
                    let ki = o * g.c + ci;
                    let kv = kd[ki].wide();
                    let mut s = 0.0;
                    for ((d, &gy), &xv) in dxp.iter_mut().zip(&gw).zip(&xw) {
                        *d += gy * kv;
                        s += gy * xv;
                    }
                    dk[ki] += s;
                    continue;
                }
                for u in 0..k {
                    for v in 0..k {
                        let ki = ((o * g.c + ci) * k + u) * k + v;
                        let kv = kd[ki].wide();
                        let mut s = 0.0;
                        for i in 0..ho {
                            let y = (i * stride) as isize + u as isize - p;
                            if y < 0 || y >= g.h as isize {
                                continue;
                            }
                            for j in 0..wo {
                                let xx = (j * stride) as isize + v as isize - p;
                                if xx < 0 || xx >= g.w as isize {
                                    continue;
                                }
                                let gy = gw[i * wo + j];
                                let xi = y as usize * g.w + xx as usize;
                                dxp[xi] += gy * kv;
                                s += gy * xw[xi];
                            }
                        }
                        dk[ki] += s;
                    }
                }
            }
        }
    }
    (
        dx.into_iter().map(S::cast).collect(),
        dk.into_iter().map(S::cast).collect(),
    )
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err(format!("matmul needs rank >= 2, got {a:?} and {b:?}"));
    }
    let (ra, rb) = (a.len(), b.len());
    if a[..ra - 2] != b[..rb - 2] {
        return shape_err(format!("matmul leading axes differ: {a:?} vs {b:?}"));
    }
    let (m, k) = (a[ra - 2], a[ra - 1]);
    let (k2, n) = (b[rb - 2], b[rb - 1]);
    if k != k2 {
        return shape_err(format!("matmul inner extents differ: {k} vs {k2}"));
    }
    Ok((numel(&a[..ra - 2]), m, k, n))
}

/// Batched matrix product over identical leading axes.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (batch, m, k, n) = matmul_dims(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::ZERO; batch * m * n];
    let mut acc = vec![0.0f64; n];
    for bi in 0..batch {
        let ab = &ad[bi * m * k..(bi + 1) * m * k];
        let bb = &bd[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for kk in 0..k {
                let av = ab[i * k + kk].wide();
                if av == 0.0 {
                    continue;
                }
                for (dst, bv) in acc.iter_mut().zip(&bb[kk * n..(kk + 1) * n]) {
                    *dst += av * bv.wide();
                }
            }
            for (o, &v) in out[(bi * m + i) * n..(bi * m + i + 1) * n].iter_mut().zip(&acc) {
                *o = S::cast(v);
            }
        }
    }
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend_from_slice(&[m, n]);
    Tensor::from_vec_unchecked(&shape, out)
}

/// Swap the last two axes.
pub fn transpose_last2<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    let r = a.rank();
    if r < 2 {
        return shape_err(format!("transpose needs rank >= 2, got {:?}", a.shape()));
    }
    let (m, n) = (a.shape()[r - 2], a.shape()[r - 1]);
    let batch = numel(&a.shape()[..r - 2]);
    let src = a.data();
    let mut out = vec![S::ZERO; src.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_vec_unchecked(&shape, out)
}
