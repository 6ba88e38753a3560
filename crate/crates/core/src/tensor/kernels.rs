//! Forward and adjoint kernels over plain tensors.
//!
//! Broadcasting follows the usual trailing-dimension rule: shapes are
//! right-aligned and every pair of extents must be equal or contain a 1.

use super::gemm::gemm;
use super::{strides, Tensor};
use crate::error::{Error, Result};

pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Offsets into `src` (laid out with `src_strides`) for every element of
/// `shape`, in row-major order, starting from `base`.
pub(crate) fn index_map(shape: &[usize], src_strides: &[usize], base: usize) -> Vec<usize> {
    let mut out = vec![base];
    for (d, &extent) in shape.iter().enumerate() {
        let step = src_strides[d];
        let mut next = Vec::with_capacity(out.len() * extent);
        for &o in &out {
            for j in 0..extent {
                next.push(o + j * step);
            }
        }
        out = next;
    }
    out
}

/// Offsets into a tensor of shape `small` for each element of the
/// broadcast target shape `big`.
pub(crate) fn broadcast_offsets(big: &[usize], small: &[usize]) -> Vec<usize> {
    let r = big.len();
    let lead = r - small.len();
    let st = strides(small);
    let mut eff = vec![0; r];
    for i in 0..small.len() {
        if small[i] != 1 {
            eff[lead + i] = st[i];
        }
    }
    index_map(big, &eff, 0)
}

pub fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let data = if b.numel() == 1 && a.numel() == n {
        let y = b.data()[0];
        a.data().iter().map(|&x| f(x, y)).collect()
    } else if a.numel() == 1 && b.numel() == n {
        let x = a.data()[0];
        b.data().iter().map(|&y| f(x, y)).collect()
    } else {
        let oa = broadcast_offsets(&shape, a.shape());
        let ob = broadcast_offsets(&shape, b.shape());
        oa.iter()
            .zip(&ob)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect()
    };
    Tensor::new(shape, data)
}

/// Sum `grad` down to `shape` (the adjoint of broadcasting to `grad`'s shape).
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape.to_vec());
    if out.numel() == 1 {
        out.data_mut()[0] = grad.sum();
        return out;
    }
    let offs = broadcast_offsets(grad.shape(), shape);
    let o = out.data_mut();
    for (&off, &g) in offs.iter().zip(grad.data()) {
        o[off] += g;
    }
    out
}

fn check_axes(op: &'static str, rank: usize, axes: &[usize]) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= rank || axes[..i].contains(&a) {
            return Err(Error::shape(op, format!("invalid axes {axes:?} for rank {rank}")));
        }
    }
    Ok(())
}

pub(crate) fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

pub(crate) fn squeeze_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect()
}

pub fn reduce_sum(x: &Tensor, axes: &[usize], keepdim: bool) -> Result<Tensor> {
    check_axes("sum", x.rank(), axes)?;
    let kshape = keepdim_shape(x.shape(), axes);
    let out = reduce_to(x, &kshape);
    let shape = if keepdim { kshape } else { squeeze_shape(x.shape(), axes) };
    Tensor::new(shape, out.into_data())
}

pub fn reduce_max(x: &Tensor, axes: &[usize], keepdim: bool) -> Result<Tensor> {
    check_axes("max", x.rank(), axes)?;
    if x.numel() == 0 {
        return Err(Error::shape("max", "empty input"));
    }
    let kshape = keepdim_shape(x.shape(), axes);
    let mut out = Tensor::full(kshape.clone(), f64::NEG_INFINITY);
    let offs = broadcast_offsets(x.shape(), &kshape);
    let o = out.data_mut();
    for (&off, &v) in offs.iter().zip(x.data()) {
        if v > o[off] {
            o[off] = v;
        }
    }
    let shape = if keepdim { kshape } else { squeeze_shape(x.shape(), axes) };
    Tensor::new(shape, out.into_data())
}

/// Gradient of a max reduction: routed to the first maximal element.
pub fn reduce_max_backward(x: &Tensor, out: &Tensor, grad: &Tensor, axes: &[usize]) -> Tensor {
    let kshape = keepdim_shape(x.shape(), axes);
    let offs = broadcast_offsets(x.shape(), &kshape);
    let mut taken = vec![false; out.numel()];
    let mut gx = Tensor::zeros(x.shape().to_vec());
    let gd = gx.data_mut();
    for (i, (&off, &v)) in offs.iter().zip(x.data()).enumerate() {
        if !taken[off] && v == out.data()[off] {
            taken[off] = true;
            gd[i] = grad.data()[off];
        }
    }
    gx
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
    Tensor::new(vec![m, n], c)
}

/// Returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut ga = vec![0.0; m * k];
    gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, false);
    let mut gb = vec![0.0; k * n];
    gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, false);
    (
        Tensor::new(vec![m, k], ga).expect("matmul grad shape"),
        Tensor::new(vec![k, n], gb).expect("matmul grad shape"),
    )
}

pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", x.shape())));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mx = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (d[at(j)] - mx).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[at(j)] /= z;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = axis_split(y.shape(), axis);
    let mut gx = vec![0.0; y.numel()];
    let (yd, gd) = (y.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let dot: f64 = (0..n).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..n {
                gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), gx).expect("softmax grad shape")
}

pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::shape("concat", format!("axis {axis} for shape {:?}", first.shape())));
    }
    for t in inputs {
        let ok = t.rank() == first.rank()
            && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
            ));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let block = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(shape, out)
}

pub fn concat_backward(g: &Tensor, sizes: &[usize], axis: usize) -> Vec<Tensor> {
    let (outer, total, inner) = axis_split(g.shape(), axis);
    let mut outs: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
    for o in 0..outer {
        let mut at = o * total * inner;
        for (k, &s) in sizes.iter().enumerate() {
            outs[k].extend_from_slice(&g.data()[at..at + s * inner]);
            at += s * inner;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &s)| {
            let mut shape = g.shape().to_vec();
            shape[axis] = s;
            Tensor::new(shape, d).expect("concat grad shape")
        })
        .collect()
}

fn slice_map(shape: &[usize], ranges: &[(usize, usize)]) -> Result<(Vec<usize>, Vec<usize>)> {
    if ranges.len() != shape.len() {
        return Err(Error::shape("slice", format!("{} ranges for shape {shape:?}", ranges.len())));
    }
    for (&(s, e), &d) in ranges.iter().zip(shape) {
        if s > e || e > d {
            return Err(Error::shape("slice", format!("range {s}..{e} of extent {d}")));
        }
    }
    let st = strides(shape);
    let out_shape: Vec<usize> = ranges.iter().map(|&(s, e)| e - s).collect();
    let base = ranges.iter().zip(&st).map(|(&(s, _), &k)| s * k).sum();
    Ok((index_map(&out_shape, &st, base), out_shape))
}

pub fn slice(x: &Tensor, ranges: &[(usize, usize)]) -> Result<Tensor> {
    let (map, shape) = slice_map(x.shape(), ranges)?;
    Tensor::new(shape, map.iter().map(|&i| x.data()[i]).collect())
}

pub fn slice_backward(in_shape: &[usize], ranges: &[(usize, usize)], g: &Tensor) -> Tensor {
    let (map, _) = slice_map(in_shape, ranges).expect("validated in forward");
    let mut gx = Tensor::zeros(in_shape.to_vec());
    let d = gx.data_mut();
    for (&i, &v) in map.iter().zip(g.data()) {
        d[i] += v;
    }
    gx
}

fn pad_map(in_shape: &[usize], pads: &[(usize, usize)]) -> Result<(Vec<usize>, Vec<usize>)> {
    if pads.len() != in_shape.len() {
        return Err(Error::shape("pad", format!("{} pads for shape {in_shape:?}", pads.len())));
    }
    let out_shape: Vec<usize> = in_shape.iter().zip(pads).map(|(&d, &(a, b))| d + a + b).collect();
    let st = strides(&out_shape);
    let base = pads.iter().zip(&st).map(|(&(a, _), &k)| a * k).sum();
    Ok((index_map(in_shape, &st, base), out_shape))
}

pub fn pad(x: &Tensor, pads: &[(usize, usize)]) -> Result<Tensor> {
    let (map, shape) = pad_map(x.shape(), pads)?;
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    for (&i, &v) in map.iter().zip(x.data()) {
        d[i] = v;
    }
    Ok(out)
}

pub fn pad_backward(in_shape: &[usize], pads: &[(usize, usize)], g: &Tensor) -> Tensor {
    let (map, _) = pad_map(in_shape, pads).expect("validated in forward");
    Tensor::new(in_shape.to_vec(), map.iter().map(|&i| g.data()[i]).collect()).expect("pad grad shape")
}

fn spatial(op: &'static str, x: &Tensor) -> Result<(usize, [usize; 3])> {
    if x.rank() < 3 {
        return Err(Error::shape(op, format!("needs ≥3 spatial dims, got {:?}", x.shape())));
    }
    let r = x.rank();
    let s = [x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]];
    Ok((x.numel() / (s[0] * s[1] * s[2]).max(1), s))
}

/// Nearest-neighbour upsampling of the last three axes by an integer factor.
pub fn upsample_nearest(x: &Tensor, f: usize) -> Result<Tensor> {
    if f == 0 {
        return Err(Error::InvalidArgument("upsample factor must be ≥ 1".into()));
    }
    let (lead, [d, h, w]) = spatial("upsample_nearest", x)?;
    let (od, oh, ow) = (d * f, h * f, w * f);
    let mut out = vec![0.0; lead * od * oh * ow];
    let xd = x.data();
    for l in 0..lead {
        for z in 0..od {
            for y in 0..oh {
                let src = l * d * h * w + (z / f) * h * w + (y / f) * w;
                let dst = l * od * oh * ow + z * oh * ow + y * ow;
                for xx in 0..ow {
                    out[dst + xx] = xd[src + xx / f];
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = od;
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}

pub fn upsample_nearest_backward(in_shape: &[usize], f: usize, g: &Tensor) -> Tensor {
    let r = in_shape.len();
    let (d, h, w) = (in_shape[r - 3], in_shape[r - 2], in_shape[r - 1]);
    let (od, oh, ow) = (d * f, h * f, w * f);
    let lead: usize = in_shape[..r - 3].iter().product();
    let mut gx = vec![0.0; lead * d * h * w];
    for l in 0..lead {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    gx[l * d * h * w + (z / f) * h * w + (y / f) * w + xx / f] +=
                        g.data()[l * od * oh * ow + z * oh * ow + y * ow + xx];
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).expect("upsample grad shape")
}

/// Nearest-neighbour downsampling of the last three axes: output voxel
/// `(z, y, x)` takes input voxel `(f·z, f·y, f·x)`. Extents must divide by `f`.
pub fn downsample_nearest(x: &Tensor, f: usize) -> Result<Tensor> {
    let (lead, [d, h, w]) = spatial("downsample_nearest", x)?;
    if f == 0 || d % f != 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(
            "downsample_nearest",
            format!("spatial {:?} not divisible by {f}", [d, h, w]),
        ));
    }
    let (od, oh, ow) = (d / f, h / f, w / f);
    let mut out = Vec::with_capacity(lead * od * oh * ow);
    for l in 0..lead {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(x.data()[l * d * h * w + z * f * h * w + y * f * w + xx * f]);
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = od;
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}

pub fn downsample_nearest_backward(in_shape: &[usize], f: usize, g: &Tensor) -> Tensor {
    let r = in_shape.len();
    let (d, h, w) = (in_shape[r - 3], in_shape[r - 2], in_shape[r - 1]);
    let (od, oh, ow) = (d / f, h / f, w / f);
    let lead: usize = in_shape[..r - 3].iter().product();
    let mut gx = vec![0.0; lead * d * h * w];
    let mut i = 0;
    for l in 0..lead {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    gx[l * d * h * w + z * f * h * w + y * f * w + xx * f] = g.data()[i];
                    i += 1;
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).expect("downsample grad shape")
}

// ---------------------------------------------------------------------------
// Channel gather / scatter
// ---------------------------------------------------------------------------

fn channel_layout(op: &'static str, x: &Tensor, indices: &[Vec<usize>]) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(op, format!("needs [B, C, ...], got {:?}", x.shape())));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    if indices.len() != b {
        return Err(Error::shape(op, format!("{} index rows for batch {b}", indices.len())));
    }
    let k = indices.first().map_or(0, Vec::len);
    for row in indices {
        if row.len() != k || row.iter().any(|&i| i >= c) {
            return Err(Error::shape(op, format!("bad channel indices {row:?} for C={c}")));
        }
    }
    let rest = x.numel() / (b * c).max(1);
    Ok((c, k, rest))
}

/// Gathers channels `indices[b]` of each batch item: `[B, C, ..] → [B, K, ..]`.
pub fn gather_channels(x: &Tensor, indices: &[Vec<usize>]) -> Result<Tensor> {
    let (c, k, rest) = channel_layout("gather_channels", x, indices)?;
    let mut out = Vec::with_capacity(indices.len() * k * rest);
    for (b, row) in indices.iter().enumerate() {
        for &ch in row {
            let at = (b * c + ch) * rest;
            out.extend_from_slice(&x.data()[at..at + rest]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = k;
    Tensor::new(shape, out)
}

/// Replaces channels `indices[b]` of `base` with the rows of `sub`.
pub fn scatter_channels(base: &Tensor, sub: &Tensor, indices: &[Vec<usize>]) -> Result<Tensor> {
    let (c, k, rest) = channel_layout("scatter_channels", base, indices)?;
    let mut want = base.shape().to_vec();
    want[1] = k;
    if sub.shape() != want.as_slice() {
        return Err(Error::shape(
            "scatter_channels",
            format!("sub {:?}, expected {want:?}", sub.shape()),
        ));
    }
    let mut out = base.clone();
    let od = out.data_mut();
    for (b, row) in indices.iter().enumerate() {
        for (j, &ch) in row.iter().enumerate() {
            let dst = (b * c + ch) * rest;
            let src = (b * k + j) * rest;
            od[dst..dst + rest].copy_from_slice(&sub.data()[src..src + rest]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// 3D convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeom {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    /// Output extent of a forward convolution, if positive.
    fn conv_out(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let span = input[i] + 2 * self.padding[i];
            if span < kernel[i] || self.stride[i] == 0 {
                return None;
            }
            out[i] = (span - kernel[i]) / self.stride[i] + 1;
        }
        Some(out)
    }

    /// Output extent of the transposed convolution.
    fn transpose_out(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let full = input[i].checked_sub(1)? * self.stride[i] + kernel[i];
            out[i] = full.checked_sub(2 * self.padding[i]).filter(|&v| v > 0)?;
        }
        Some(out)
    }
}

/// Range of output positions `o` with `0 ≤ o·s + off < len`.
fn valid_span(out_len: usize, in_len: usize, s: usize, off: isize) -> (usize, usize) {
    let s = s as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (in_len as isize - off + s - 1).div_euclid(s);
    let lo = lo.clamp(0, out_len as isize) as usize;
    let hi = hi.clamp(lo as isize, out_len as isize) as usize;
    (lo, hi)
}

struct Im2Col {
    channels: usize,
    image: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    geom: ConvGeom,
}

impl Im2Col {
    fn rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn cols(&self) -> usize {
        self.out.iter().product()
    }

    /// Visits every (column-buffer row segment, image row) pair that overlaps.
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [d, h, w] = self.image;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.out;
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.padding;
        let n = self.cols();
        let mut row = 0;
        for c in 0..self.channels {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let (z0, z1) = valid_span(od, d, sd, a as isize - pd as isize);
                        let (y0, y1) = valid_span(oh, h, sh, b as isize - ph as isize);
                        let (x0, x1) = valid_span(ow, w, sw, e as isize - pw as isize);
                        if x0 < x1 {
                            for z in z0..z1 {
                                let iz = z * sd + a - pd;
                                for y in y0..y1 {
                                    let iy = y * sh + b - ph;
                                    let col_at = row * n + z * oh * ow + y * ow + x0;
                                    let img_at = c * d * h * w + iz * h * w + iy * w + (x0 * sw + e - pw);
                                    f(col_at, img_at, x1 - x0, sw, 0);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn gather(&self, image: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        self.for_each_segment(|col_at, img_at, len, sw, _| {
            if sw == 1 {
                col[col_at..col_at + len].copy_from_slice(&image[img_at..img_at + len]);
            } else {
                for i in 0..len {
                    col[col_at + i] = image[img_at + i * sw];
                }
            }
        });
    }

    fn scatter_add(&self, col: &[f64], image: &mut [f64]) {
        self.for_each_segment(|col_at, img_at, len, sw, _| {
            for i in 0..len {
                image[img_at + i * sw] += col[col_at + i];
            }
        });
    }
}

fn conv_dims(op: &'static str, x: &Tensor, w: &Tensor) -> Result<(usize, usize, [usize; 3], usize, [usize; 3])> {
    if x.rank() != 5 || w.rank() != 5 {
        return Err(Error::shape(op, format!("input {:?}, weight {:?}", x.shape(), w.shape())));
    }
    let s = x.shape();
    let k = w.shape();
    Ok((s[0], s[1], [s[2], s[3], s[4]], k[0], [k[2], k[3], k[4]]))
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, n: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [n] => Err(Error::shape(op, format!("bias {:?}, expected [{n}]", b.shape()))),
        _ => Ok(()),
    }
}

/// `x: [B, Ci, D, H, W]`, `w: [Co, Ci, kd, kh, kw]`, optional `bias: [Co]`.
pub fn conv3d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let (b, ci, image, co, kernel) = conv_dims("conv3d", x, w)?;
    if w.shape()[1] != ci {
        return Err(Error::shape("conv3d", format!("input {:?}, weight {:?}", x.shape(), w.shape())));
    }
    check_bias("conv3d", bias, co)?;
    let out = geom
        .conv_out(image, kernel)
        .ok_or_else(|| Error::shape("conv3d", format!("kernel {kernel:?} larger than padded input {image:?}")))?;
    let ic = Im2Col { channels: ci, image, kernel, out, geom };
    let (rows, n) = (ic.rows(), ic.cols());
    let in_block = ci * image.iter().product::<usize>();
    let mut col = vec![0.0; rows * n];
    let mut y = vec![0.0; b * co * n];
    for bi in 0..b {
        ic.gather(&x.data()[bi * in_block..(bi + 1) * in_block], &mut col);
        let yb = &mut y[bi * co * n..(bi + 1) * co * n];
        gemm(co, rows, n, w.data(), false, &col, false, yb, false);
        if let Some(bias) = bias {
            for (c, chunk) in yb.chunks_mut(n).enumerate() {
                let bv = bias.data()[c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![b, co, out[0], out[1], out[2]], y)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

fn channel_sums(g: &Tensor) -> Tensor {
    let (b, c) = (g.shape()[0], g.shape()[1]);
    let n = g.numel() / (b * c).max(1);
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            let at = (bi * c + ci) * n;
            *o += g.data()[at..at + n].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(out)
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    geom: ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let (b, ci, image, co, kernel) = conv_dims("conv3d", x, w).expect("validated in forward");
    let out = [g.shape()[2], g.shape()[3], g.shape()[4]];
    let ic = Im2Col { channels: ci, image, kernel, out, geom };
    let (rows, n) = (ic.rows(), ic.cols());
    let in_block = ci * image.iter().product::<usize>();
    let mut gx = need[0].then(|| vec![0.0; x.numel()]);
    let mut gw = need[1].then(|| vec![0.0; w.numel()]);
    let mut col = vec![0.0; rows * n];
    for bi in 0..b {
        let gb = &g.data()[bi * co * n..(bi + 1) * co * n];
        if let Some(gw) = gw.as_mut() {
            ic.gather(&x.data()[bi * in_block..(bi + 1) * in_block], &mut col);
            gemm(co, n, rows, gb, false, &col, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(rows, co, n, w.data(), true, gb, false, &mut col, false);
            ic.scatter_add(&col, &mut gx[bi * in_block..(bi + 1) * in_block]);
        }
    }
    ConvGrads {
        input: gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("conv grad")),
        weight: gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("conv grad")),
        bias: need[2].then(|| channel_sums(g)),
    }
}

/// Adjoint of [`conv3d`]: `y: [B, Cy, ..]`, `w: [Cy, Cx, kd, kh, kw]`,
/// optional `bias: [Cx]`. Output extent is `(in − 1)·s − 2p + k`.
pub fn conv_transpose3d(y: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let (b, cy, in_dims, wcy, kernel) = conv_dims("conv_transpose3d", y, w)?;
    if wcy != cy {
        return Err(Error::shape(
            "conv_transpose3d",
            format!("input {:?}, weight {:?}", y.shape(), w.shape()),
        ));
    }
    let cx = w.shape()[1];
    check_bias("conv_transpose3d", bias, cx)?;
    let image = geom
        .transpose_out(in_dims, kernel)
        .ok_or_else(|| Error::shape("conv_transpose3d", format!("degenerate output for input {in_dims:?}")))?;
    let ic = Im2Col { channels: cx, image, kernel, out: in_dims, geom };
    let (rows, n) = (ic.rows(), ic.cols());
    let out_block = cx * image.iter().product::<usize>();
    let mut col = vec![0.0; rows * n];
    let mut x = vec![0.0; b * out_block];
    for bi in 0..b {
        let yb = &y.data()[bi * cy * n..(bi + 1) * cy * n];
        gemm(rows, cy, n, w.data(), true, yb, false, &mut col, false);
        let xb = &mut x[bi * out_block..(bi + 1) * out_block];
        ic.scatter_add(&col, xb);
        if let Some(bias) = bias {
            let vox = out_block / cx;
            for (c, chunk) in xb.chunks_mut(vox).enumerate() {
                let bv = bias.data()[c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![b, cx, image[0], image[1], image[2]], x)
}

pub fn conv_transpose3d_backward(
    y: &Tensor,
    w: &Tensor,
    g: &Tensor,
    geom: ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let (b, cy, in_dims, _, kernel) = conv_dims("conv_transpose3d", y, w).expect("validated in forward");
    let cx = w.shape()[1];
    let image = [g.shape()[2], g.shape()[3], g.shape()[4]];
    let ic = Im2Col { channels: cx, image, kernel, out: in_dims, geom };
    let (rows, n) = (ic.rows(), ic.cols());
    let out_block = cx * image.iter().product::<usize>();
    let mut gy = need[0].then(|| vec![0.0; y.numel()]);
    let mut gw = need[1].then(|| vec![0.0; w.numel()]);
    let mut col = vec![0.0; rows * n];
    for bi in 0..b {
        ic.gather(&g.data()[bi * out_block..(bi + 1) * out_block], &mut col);
        if let Some(gy) = gy.as_mut() {
            gemm(cy, rows, n, w.data(), false, &col, false, &mut gy[bi * cy * n..(bi + 1) * cy * n], false);
        }
        if let Some(gw) = gw.as_mut() {
            let yb = &y.data()[bi * cy * n..(bi + 1) * cy * n];
            gemm(cy, n, rows, yb, false, &col, true, gw, true);
        }
    }
    ConvGrads {
        input: gy.map(|d| Tensor::new(y.shape().to_vec(), d).expect("convT grad")),
        weight: gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("convT grad")),
        bias: need[2].then(|| channel_sums(g)),
    }
}
