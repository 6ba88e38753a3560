use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation catalogue.
///
/// Binary arithmetic broadcasts. `Conv3d`/`ConvTranspose3d` take
/// `(input, weight)` or `(input, weight, bias)`. `GatherChannels` takes the
/// feature map and, optionally, a `[B, C]` score tensor that receives a
/// straight-through gradient: forward is a hard gather, backward treats every
/// gathered channel as multiplied by its score with unit pass-through.
#[derive(Clone, Debug)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Conv3d(ConvGeom),
    ConvTranspose3d(ConvGeom),
    Relu,
    Sigmoid,
    Softmax { axis: usize },
    Exp,
    Log,
    Power { exponent: f64 },
    Clamp { lo: f64, hi: f64 },
    Sum { axes: Vec<usize>, keepdim: bool },
    Mean { axes: Vec<usize>, keepdim: bool },
    Max { axes: Vec<usize>, keepdim: bool },
    Concat { axis: usize },
    Slice { ranges: Vec<(usize, usize)> },
    Pad { pads: Vec<(usize, usize)> },
    Reshape { shape: Vec<usize> },
    /// Elementwise product with a constant mask of the input's shape.
    MaskMul { mask: Tensor },
    UpsampleNearest { factor: usize },
    DownsampleNearest { factor: usize },
    GatherChannels { indices: Vec<Vec<usize>> },
    ScatterChannels { indices: Vec<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv3d(_) => "conv3d",
            Op::ConvTranspose3d(_) => "conv_transpose3d",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Power { .. } => "power",
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Reshape { .. } => "reshape",
            Op::MaskMul { .. } => "mask_mul",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::DownsampleNearest { .. } => "downsample_nearest",
            Op::GatherChannels { .. } => "gather_channels",
            Op::ScatterChannels { .. } => "scatter_channels",
        }
    }

    fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::ScatterChannels { .. } => 2..=2,
            Op::Conv3d(_) | Op::ConvTranspose3d(_) => 2..=3,
            Op::GatherChannels { .. } => 1..=2,
            Op::Concat { .. } => 1..=usize::MAX,
            _ => 1..=1,
        }
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order; the
/// backward pass walks them once in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero when `v` was not reached.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
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

    fn push(&mut self, value: Tensor, op: Option<Op>, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v`'s value as a constant: no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if !op.arity().contains(&inputs.len()) {
            return Err(Error::InvalidArgument(format!(
                "{} takes {:?} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = forward(&op, &vals)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then_some(op);
        Ok(self.push(value, op, inputs.to_vec(), requires_grad))
    }

    /// Smallest distance from any differentiable ReLU or clamp input to its
    /// kink, `inf` when there is none. Finite differences with a step below
    /// this margin never straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for n in &self.nodes {
            let x = || self.nodes[n.inputs[0].0].value.data().iter();
            match n.op {
                Some(Op::Relu) => m = x().fold(m, |m, v| m.min(v.abs())),
                Some(Op::Clamp { lo, hi }) => m = x().fold(m, |m, v| m.min((v - lo).abs()).min((v - hi).abs())),
                _ => {}
            }
        }
        m
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on empty tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 || lv.rank() > 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let vals: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let in_grads = vjp(op, &vals, &node.value, &g, &need);
            for ((v, gi), needed) in node.inputs.iter().zip(in_grads).zip(need) {
                let Some(gi) = gi else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        // Only leaves keep their gradient slot meaningful for callers, but
        // interior gradients are retained as well.
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    // -- convenience wrappers ------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn powf(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.apply(Op::Power { exponent }, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }
    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.apply(Op::Sum { axes: axes.to_vec(), keepdim }, &[a])
    }
    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.apply(Op::Mean { axes: axes.to_vec(), keepdim }, &[a])
    }
    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.sum(a, &axes, false)
    }
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.mean(a, &axes, false)
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }
    pub fn slice(&mut self, a: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        self.apply(Op::Slice { ranges: ranges.to_vec() }, &[a])
    }
    pub fn mask_mul(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        self.apply(Op::MaskMul { mask }, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.mul(a, k)
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::Conv3d(geom), &[x, w, b]),
            None => self.apply(Op::Conv3d(geom), &[x, w]),
        }
    }
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        match b {
            Some(b) => self.apply(Op::ConvTranspose3d(geom), &[x, w, b]),
            None => self.apply(Op::ConvTranspose3d(geom), &[x, w]),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_count(shape: &[usize], axes: &[usize]) -> f64 {
    axes.iter().map(|&a| shape[a]).product::<usize>() as f64
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    match op {
        Op::Add => kernels::binary(name, x[0], x[1], |a, b| a + b),
        Op::Sub => kernels::binary(name, x[0], x[1], |a, b| a - b),
        Op::Mul => kernels::binary(name, x[0], x[1], |a, b| a * b),
        Op::Div => {
            if x[1].data().contains(&0.0) {
                return Err(Error::domain(name, "division by zero"));
            }
            kernels::binary(name, x[0], x[1], |a, b| a / b)
        }
        Op::MatMul => kernels::matmul(x[0], x[1]),
        Op::Transpose => kernels::transpose2d(x[0]),
        Op::Conv3d(g) => kernels::conv3d(x[0], x[1], x.get(2).copied(), *g),
        Op::ConvTranspose3d(g) => kernels::conv_transpose3d(x[0], x[1], x.get(2).copied(), *g),
        Op::Relu => Ok(x[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Op::Sigmoid => Ok(x[0].map(sigmoid)),
        Op::Softmax { axis } => kernels::softmax(x[0], *axis),
        Op::Exp => Ok(x[0].map(f64::exp)),
        Op::Log => {
            if let Some(v) = x[0].data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::domain(name, format!("log of {v}")));
            }
            Ok(x[0].map(f64::ln))
        }
        Op::Power { exponent: p } => {
            let p = *p;
            let integral = p.fract() == 0.0;
            for &v in x[0].data() {
                if (v < 0.0 && !integral) || (v == 0.0 && p < 0.0) {
                    return Err(Error::domain(name, format!("{v}^{p}")));
                }
            }
            Ok(x[0].map(|v| v.powf(p)))
        }
        Op::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
            }
            Ok(x[0].map(|v| v.clamp(*lo, *hi)))
        }
        Op::Sum { axes, keepdim } => kernels::reduce_sum(x[0], axes, *keepdim),
        Op::Mean { axes, keepdim } => {
            let s = kernels::reduce_sum(x[0], axes, *keepdim)?;
            let n = mean_count(x[0].shape(), axes);
            Ok(s.map(|v| v / n))
        }
        Op::Max { axes, keepdim } => kernels::reduce_max(x[0], axes, *keepdim),
        Op::Concat { axis } => kernels::concat(x, *axis),
        Op::Slice { ranges } => kernels::slice(x[0], ranges),
        Op::Pad { pads } => kernels::pad(x[0], pads),
        Op::Reshape { shape } => x[0].reshape(shape.clone()),
        Op::MaskMul { mask } => {
            same_shape(name, x[0], mask)?;
            x[0].zip_map(mask, |a, m| a * m)
        }
        Op::UpsampleNearest { factor } => kernels::upsample_nearest(x[0], *factor),
        Op::DownsampleNearest { factor } => kernels::downsample_nearest(x[0], *factor),
        Op::GatherChannels { indices } => {
            if let Some(s) = x.get(1) {
                let want = [x[0].shape()[0], x[0].shape().get(1).copied().unwrap_or(0)];
                if s.shape() != want {
                    return Err(Error::shape(name, format!("scores {:?}, expected {want:?}", s.shape())));
                }
            }
            kernels::gather_channels(x[0], indices)
        }
        Op::ScatterChannels { indices } => kernels::scatter_channels(x[0], x[1], indices),
    }
}

/// Vector-Jacobian products for each input (`None` where not needed).
fn vjp(op: &Op, x: &[&Tensor], y: &Tensor, g: &Tensor, need: &[bool]) -> Vec<Option<Tensor>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let unary = |t: Tensor| vec![Some(t)];
    match op {
        Op::Add => vec![
            want(0).then(|| kernels::reduce_to(g, x[0].shape())),
            want(1).then(|| kernels::reduce_to(g, x[1].shape())),
        ],
        Op::Sub => vec![
            want(0).then(|| kernels::reduce_to(g, x[0].shape())),
            want(1).then(|| kernels::reduce_to(&g.map(|v| -v), x[1].shape())),
        ],
        Op::Mul => vec![
            want(0).then(|| {
                let t = kernels::binary("mul", g, x[1], |a, b| a * b).expect("broadcast");
                kernels::reduce_to(&t, x[0].shape())
            }),
            want(1).then(|| {
                let t = kernels::binary("mul", g, x[0], |a, b| a * b).expect("broadcast");
                kernels::reduce_to(&t, x[1].shape())
            }),
        ],
        Op::Div => vec![
            want(0).then(|| {
                let t = kernels::binary("div", g, x[1], |a, b| a / b).expect("broadcast");
                kernels::reduce_to(&t, x[0].shape())
            }),
            want(1).then(|| {
                // d(a/b)/db = -y/b
                let yb = kernels::binary("div", y, x[1], |a, b| -a / b).expect("broadcast");
                let t = kernels::binary("mul", g, &yb, |a, b| a * b).expect("broadcast");
                kernels::reduce_to(&t, x[1].shape())
            }),
        ],
        Op::MatMul => {
            let (ga, gb) = kernels::matmul_backward(x[0], x[1], g);
            vec![want(0).then_some(ga), want(1).then_some(gb)]
        }
        Op::Transpose => unary(kernels::transpose2d(g).expect("rank 2")),
        Op::Conv3d(geom) => {
            let r = kernels::conv3d_backward(x[0], x[1], g, *geom, [want(0), want(1), want(2)]);
            vec![r.input, r.weight, r.bias]
        }
        Op::ConvTranspose3d(geom) => {
            let r = kernels::conv_transpose3d_backward(x[0], x[1], g, *geom, [want(0), want(1), want(2)]);
            vec![r.input, r.weight, r.bias]
        }
        Op::Relu => unary(x[0].zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 }).expect("shape")),
        Op::Sigmoid => unary(y.zip_map(g, |s, gv| gv * s * (1.0 - s)).expect("shape")),
        Op::Softmax { axis } => unary(kernels::softmax_backward(y, g, *axis)),
        Op::Exp => unary(y.zip_map(g, |e, gv| gv * e).expect("shape")),
        Op::Log => unary(x[0].zip_map(g, |v, gv| gv / v).expect("shape")),
        Op::Power { exponent: p } => {
            let p = *p;
            unary(x[0].zip_map(g, |v, gv| gv * p * v.powf(p - 1.0)).expect("shape"))
        }
        Op::Clamp { lo, hi } => unary(
            x[0].zip_map(g, |v, gv| if v >= *lo && v <= *hi { gv } else { 0.0 })
                .expect("shape"),
        ),
        Op::Sum { axes, .. } | Op::Mean { axes, .. } => {
            let kshape = kernels::keepdim_shape(x[0].shape(), axes);
            let gk = g.reshape(kshape).expect("keepdim reshape");
            let scale = match op {
                Op::Mean { .. } => 1.0 / mean_count(x[0].shape(), axes),
                _ => 1.0,
            };
            let zeros = Tensor::zeros(x[0].shape().to_vec());
            unary(kernels::binary("sum", &zeros, &gk, |_, b| b * scale).expect("broadcast"))
        }
        Op::Max { axes, .. } => {
            let kshape = kernels::keepdim_shape(x[0].shape(), axes);
            let yk = y.reshape(kshape.clone()).expect("keepdim reshape");
            let gk = g.reshape(kshape).expect("keepdim reshape");
            unary(kernels::reduce_max_backward(x[0], &yk, &gk, axes))
        }
        Op::Concat { axis } => {
            let sizes: Vec<usize> = x.iter().map(|t| t.shape()[*axis]).collect();
            kernels::concat_backward(g, &sizes, *axis).into_iter().map(Some).collect()
        }
        Op::Slice { ranges } => unary(kernels::slice_backward(x[0].shape(), ranges, g)),
        Op::Pad { pads } => unary(kernels::pad_backward(x[0].shape(), pads, g)),
        Op::Reshape { .. } => unary(g.reshape(x[0].shape().to_vec()).expect("reshape")),
        Op::MaskMul { mask } => unary(g.zip_map(mask, |a, m| a * m).expect("shape")),
        Op::UpsampleNearest { factor } => unary(kernels::upsample_nearest_backward(x[0].shape(), *factor, g)),
        Op::DownsampleNearest { factor } => {
            unary(kernels::downsample_nearest_backward(x[0].shape(), *factor, g))
        }
        Op::GatherChannels { indices } => {
            let gx = want(0).then(|| {
                let zeros = Tensor::zeros(x[0].shape().to_vec());
                scatter_add_channels(&zeros, g, indices)
            });
            let gs = want(1).then(|| {
                let (b, c) = (x[0].shape()[0], x[0].shape()[1]);
                let rest = x[0].numel() / (b * c).max(1);
                let k = indices.first().map_or(0, Vec::len);
                let mut out = Tensor::zeros(vec![b, c]);
                for (bi, row) in indices.iter().enumerate() {
                    for (j, &ch) in row.iter().enumerate() {
                        let fa = (bi * c + ch) * rest;
                        let ga = (bi * k + j) * rest;
                        let dot: f64 = x[0].data()[fa..fa + rest]
                            .iter()
                            .zip(&g.data()[ga..ga + rest])
                            .map(|(a, b)| a * b)
                            .sum();
                        out.data_mut()[bi * c + ch] += dot;
                    }
                }
                out
            });
            vec![gx, gs]
        }
        Op::ScatterChannels { indices } => {
            let gbase = want(0).then(|| {
                let k = indices.first().map_or(0, Vec::len);
                let mut sub_shape = g.shape().to_vec();
                sub_shape[1] = k;
                kernels::scatter_channels(g, &Tensor::zeros(sub_shape), indices).expect("shape")
            });
            let gsub = want(1).then(|| kernels::gather_channels(g, indices).expect("shape"));
            vec![gbase, gsub]
        }
    }
}

fn scatter_add_channels(base: &Tensor, sub: &Tensor, indices: &[Vec<usize>]) -> Tensor {
    let (c, k) = (base.shape()[1], sub.shape()[1]);
    let rest = base.numel() / (base.shape()[0] * c).max(1);
    let mut out = base.clone();
    let od = out.data_mut();
    for (b, row) in indices.iter().enumerate() {
        for (j, &ch) in row.iter().enumerate() {
            let dst = (b * c + ch) * rest;
            let src = (b * k + j) * rest;
            for i in 0..rest {
                od[dst + i] += sub.data()[src + i];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = t.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![3]));
        let s = t.softmax(a, 0).unwrap();
        for &v in t.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_kernel_conv_doubles() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(vec![1, 1, 1, 1, 1], 1.75));
        let w = t.constant(Tensor::full(vec![1, 1, 1, 1, 1], 2.0));
        let y = t.conv3d(x, w, None, ConvGeom::new(1, 0)).unwrap();
        assert_eq!(t.value(y).data(), &[3.5]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = t.mul(x, x).unwrap();
        let l = t.sum_all(sq).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let s = t.sigmoid(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.25]);
    }

    #[test]
    fn relu_gate_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![-1.0, 1.0]));
        let r = t.relu(x).unwrap();
        let l = t.mean_all(r).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.5]);
        // Kink at exactly zero has zero gradient.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let r = t.relu(x).unwrap();
        assert_eq!(t.backward(r).unwrap().wrt(x).data(), &[0.0]);
    }

    #[test]
    fn kink_margin_tracks_relu_and_clamp_inputs() {
        let mut t = Tape::new();
        assert_eq!(t.kink_margin(), f64::INFINITY);
        let x = t.leaf(Tensor::from_vec(vec![0.5, -0.02, 2.0]));
        t.relu(x).unwrap();
        assert_eq!(t.kink_margin(), 0.02);
        t.clamp(x, -1.0, 1.99).unwrap();
        assert!((t.kink_margin() - 0.01).abs() < 1e-12);
        let c = t.constant(Tensor::from_vec(vec![0.0]));
        t.relu(c).unwrap();
        assert!((t.kink_margin() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = t.leaf(Tensor::from_vec(vec![5.0]));
        let l = t.sum_all(x).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(y).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Shape { .. })));
        assert!(Tape::new().backward(Var(0)).is_err());
    }

    #[test]
    fn domain_and_shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let b = t.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.log(a), Err(Error::Domain { op: "log", .. })));
        assert!(t.div(b, b).is_ok());
        let z = t.constant(Tensor::from_vec(vec![0.0, 1.0, 2.0]));
        assert!(matches!(t.div(b, z), Err(Error::Domain { op: "div", .. })));
        match t.add(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "add");
                assert!(detail.contains("[2]") && detail.contains("[3]"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn detached_values_carry_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(vec![2.0]));
        let d = t.detach(x);
        let p = t.mul(x, d).unwrap();
        let l = t.sum_all(p).unwrap();
        assert_eq!(t.backward(l).unwrap().wrt(x).data(), &[2.0]);
    }

    #[test]
    fn gather_straight_through_routes_into_scores() {
        let mut t = Tape::new();
        let f = t.leaf(Tensor::new(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = t.leaf(Tensor::new(vec![1, 3], vec![0.2, 0.7, 0.9]).unwrap());
        let sub = t.apply(Op::GatherChannels { indices: vec![vec![1, 2]] }, &[f, s]).unwrap();
        assert_eq!(t.value(sub).data(), &[3.0, 4.0, 5.0, 6.0]);
        let l = t.sum_all(sub).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(f).data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.wrt(s).data(), &[0.0, 7.0, 11.0]);
    }
}
