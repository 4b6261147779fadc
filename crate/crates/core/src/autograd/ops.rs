//! Elementwise, structural, pooling, normalisation and softmax ops.

use super::graph::{Backward, GradCtx, Graph, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

struct Relu {
    x: Var,
}

impl<T: Float> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let x = ctx.value(self.x).data();
        if let Some(dx) = ctx.slot(self.x) {
            // subgradient 0 at x == 0
            for ((d, &g), &v) in dx.iter_mut().zip(grad).zip(x) {
                if v > T::zero() {
                    *d += g;
                }
            }
        }
    }

    fn kink_margin(&self, nodes: &[Node<T>]) -> Option<T> {
        nodes[self.x.0].value.data().iter().map(|v| v.abs()).reduce(T::min)
    }
}

struct Sigmoid {
    x: Var,
}

impl<T: Float> Backward<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        if let Some(dx) = ctx.slot(self.x) {
            for ((d, &g), &s) in dx.iter_mut().zip(grad).zip(out.data()) {
                *d += g * s * (T::one() - s);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

struct Add {
    a: Var,
    b: Var,
}

impl<T: Float> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        for v in [self.a, self.b] {
            if let Some(d) = ctx.slot(v) {
                d.iter_mut().zip(grad).for_each(|(d, &g)| *d += g);
            }
        }
    }
}

struct Mul {
    a: Var,
    b: Var,
}

impl<T: Float> Backward<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        for (v, other) in [(self.a, self.b), (self.b, self.a)] {
            let other = ctx.value(other).data();
            if let Some(d) = ctx.slot(v) {
                for ((d, &g), &o) in d.iter_mut().zip(grad).zip(other) {
                    *d += g * o;
                }
            }
        }
    }
}

struct Scale<T> {
    x: Var,
    factor: T,
}

impl<T: Float> Backward<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let f = self.factor;
        if let Some(d) = ctx.slot(self.x) {
            d.iter_mut().zip(grad).for_each(|(d, &g)| *d += g * f);
        }
    }
}

struct Sum<T> {
    x: Var,
    factor: T,
    name: &'static str,
}

impl<T: Float> Backward<T> for Sum<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let g = grad[0] * self.factor;
        if let Some(d) = ctx.slot(self.x) {
            d.iter_mut().for_each(|d| *d += g);
        }
    }
}

struct Concat {
    parts: Vec<Var>,
}

impl<T: Float> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn inputs(&self) -> Vec<Var> {
        self.parts.clone()
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let [b, c_total, h, w] = out.dims4("concat output").expect("rank 4");
        let plane = h * w;
        let mut c0 = 0;
        for &part in &self.parts {
            let c = ctx.value(part).shape()[1];
            if let Some(d) = ctx.slot(part) {
                for bi in 0..b {
                    let src = &grad[(bi * c_total + c0) * plane..(bi * c_total + c0 + c) * plane];
                    let dst = &mut d[bi * c * plane..(bi + 1) * c * plane];
                    dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                }
            }
            c0 += c;
        }
    }
}

struct Narrow {
    x: Var,
    start: usize,
}

impl<T: Float> Backward<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow_channels"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let [b, len, h, w] = out.dims4("narrow output").expect("rank 4");
        let c_in = ctx.value(self.x).shape()[1];
        let plane = h * w;
        let start = self.start;
        if let Some(d) = ctx.slot(self.x) {
            for bi in 0..b {
                let dst = &mut d[(bi * c_in + start) * plane..(bi * c_in + start + len) * plane];
                let src = &grad[bi * len * plane..(bi + 1) * len * plane];
                dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
            }
        }
    }
}

struct MaxPool2 {
    x: Var,
    argmax: Vec<u32>,
}

impl<T: Float> Backward<T> for MaxPool2 {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        if let Some(d) = ctx.slot(self.x) {
            for (&idx, &g) in self.argmax.iter().zip(grad) {
                d[idx as usize] += g;
            }
        }
    }

    fn kink_margin(&self, nodes: &[Node<T>]) -> Option<T> {
        // gap between the winner and the runner-up of each window
        let x = &nodes[self.x.0].value;
        let [b, c, h, w] = x.dims4("pool input").ok()?;
        let data = x.data();
        let mut margin: Option<T> = None;
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut vals = [T::zero(); 4];
                    for (k, v) in vals.iter_mut().enumerate() {
                        *v = data[base + (2 * oy + k / 2) * w + 2 * ox + k % 2];
                    }
                    vals.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                    let gap = vals[0] - vals[1];
                    margin = Some(margin.map_or(gap, |m| m.min(gap)));
                }
            }
        }
        margin
    }
}

struct LogSoftmax {
    x: Var,
}

impl<T: Float> Backward<T> for LogSoftmax {
    fn name(&self) -> &'static str {
        "log_softmax_channels"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let [b, c, h, w] = out.dims4("log_softmax output").expect("rank 4");
        let plane = h * w;
        let y = out.data();
        if let Some(d) = ctx.slot(self.x) {
            for bi in 0..b {
                let base = bi * c * plane;
                for p in 0..plane {
                    let gsum: T = (0..c).map(|ci| grad[base + ci * plane + p]).sum();
                    for ci in 0..c {
                        let i = base + ci * plane + p;
                        d[i] += grad[i] - y[i].exp() * gsum;
                    }
                }
            }
        }
    }
}

/// Normalisation statistics used by [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalise with the statistics of the current batch (pooled over B, H, W).
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel moments of a training-mode batch, for running-stat updates.
/// `var` is the unbiased estimate (biased when only one element per channel).
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

struct BatchNorm<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Float> Backward<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, out: &Tensor<T>, grad: &[T], ctx: &mut GradCtx<'_, T>) {
        let [b, c, h, w] = out.dims4("batch_norm output").expect("rank 4");
        let plane = h * w;
        let n = T::from_usize(b * plane).expect("count");
        let gamma = ctx.value(self.gamma).data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    sum_dy[ci] += grad[i];
                    sum_dy_xhat[ci] += grad[i] * self.xhat[i];
                }
            }
        }
        if let Some(dg) = ctx.slot(self.gamma) {
            dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, &s)| *d += s);
        }
        if let Some(db) = ctx.slot(self.beta) {
            db.iter_mut().zip(&sum_dy).for_each(|(d, &s)| *d += s);
        }
        if let Some(dx) = ctx.slot(self.x) {
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let k = gamma[ci] * self.inv_std[ci];
                    if self.training {
                        let mean_dy = sum_dy[ci] / n;
                        let mean_dy_xhat = sum_dy_xhat[ci] / n;
                        for i in base..base + plane {
                            dx[i] += k * (grad[i] - mean_dy - self.xhat[i] * mean_dy_xhat);
                        }
                    } else {
                        for i in base..base + plane {
                            dx[i] += k * grad[i];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(out, Box::new(Relu { x }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push_op(out, Box::new(Sigmoid { x }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op(out, Box::new(Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_op(out, Box::new(Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push_op(out, Box::new(Scale { x, factor }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(out, Box::new(Sum { x, factor: T::one(), name: "sum" }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let inv = T::one() / T::from_usize(t.numel()).expect("count");
        let out = Tensor::scalar(t.sum() * inv);
        self.push_op(out, Box::new(Sum { x, factor: inv, name: "mean" }))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let [b, _, h, w] = self.value(first).dims4("concat input")?;
        let mut c_total = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).dims4("concat input")?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::dim(format!(
                    "concat: non-channel extents {:?} vs {:?}",
                    [pb, ph, pw],
                    [b, h, w]
                )));
            }
            c_total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * c_total * plane);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let out = Tensor::new(vec![b, c_total, h, w], data)?;
        self.push_op(out, Box::new(Concat { parts: parts.to_vec() }))
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = t.dims4("narrow input")?;
        if start + len > c {
            return Err(Error::dim(format!("narrow {start}..{} of {c} channels", start + len)));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            data.extend_from_slice(&t.data()[(bi * c + start) * plane..(bi * c + start + len) * plane]);
        }
        let out = Tensor::new(vec![b, len, h, w], data)?;
        self.push_op(out, Box::new(Narrow { x, start }))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first maximum in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = t.dims4("max_pool2d input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Geometry(format!("max_pool2d needs even extents, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let data = t.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for idx in [best + 1, best + w, best + w + 1] {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push_op(out, Box::new(MaxPool2 { x, argmax }))
    }

    /// Log-softmax over the channel axis of a `[B, C, H, W]` tensor.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = t.dims4("log_softmax input")?;
        let plane = h * w;
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            let base = bi * c * plane;
            for p in 0..plane {
                let lse = log_sum_exp((0..c).map(|ci| src[base + ci * plane + p]));
                for ci in 0..c {
                    let i = base + ci * plane + p;
                    out[i] = src[i] - lse;
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        self.push_op(out, Box::new(LogSoftmax { x }))
    }

    /// Batch normalisation of a `[B, C, H, W]` tensor with per-channel scale
    /// `gamma` and shift `beta`. In training mode the batch moments are
    /// returned so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let t = self.value(x);
        let [b, c, h, w] = t.dims4("batch_norm input")?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(format!(
                    "batch_norm {what} shape {:?}, expected [{c}]",
                    self.value(v).shape()
                )));
            }
        }
        let plane = h * w;
        let count = b * plane;
        let data = t.data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if count == 0 {
                    return Err(Error::dim("batch_norm over an empty batch"));
                }
                let n = T::from_usize(count).expect("count");
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        s += data[base..base + plane].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut sq = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for &v in &data[base..base + plane] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ci] = m;
                    var[ci] = sq / n;
                }
                let unbiased = if count > 1 {
                    let f = n / (n - T::one());
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in base..base + plane {
                    let xh = (data[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = xh;
                    out[i] = g[ci] * xh + be[ci];
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        let training = matches!(mode, BnMode::Train);
        let v = self.push_op(out, Box::new(BatchNorm { x, gamma, beta, xhat, inv_std, training }))?;
        Ok((v, stats))
    }
}

pub(crate) fn log_sum_exp<T: Float>(values: impl Iterator<Item = T> + Clone) -> T {
    let m = values.clone().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // subgradient at exactly zero is zero
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn max_pool_picks_maximum_and_first_tie() {
        let mut g = Graph::new();
        let x = g.variable(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g.max_pool2d(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::new();
        let x = g.variable(t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 1.0])).unwrap();
        let y = g.max_pool2d(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_odd_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![1, 1, 3, 4])).unwrap();
        assert!(matches!(g.max_pool2d(x), Err(Error::Geometry(_))));
    }

    #[test]
    fn concat_requires_matching_spatial_extent() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(vec![1, 2, 4, 4])).unwrap();
        let b = g.input(Tensor::zeros(vec![1, 3, 4, 2])).unwrap();
        assert!(matches!(g.concat_channels(&[a, b]), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = g.variable(t(&[2, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0])).unwrap();
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(
            g.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let back = g.narrow_channels(c, 1, 2).unwrap();
        assert_eq!(g.value(back).data(), g.value(b).data());
    }

    #[test]
    fn log_softmax_normalises_each_pixel() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 4 * 3 * 3).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let x = g.input(t(&[2, 4, 3, 3], &data)).unwrap();
        let y = g.log_softmax_channels(x).unwrap();
        let out = g.value(y).data();
        for bi in 0..2 {
            for p in 0..9 {
                let lse = log_sum_exp((0..4).map(|c| out[bi * 36 + c * 9 + p]));
                assert!(lse.abs() < 1e-5);
            }
        }
    }

    #[test]
    fn batch_norm_standardises_each_channel() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 7919) % 97) as f64 * 0.3 - 4.0).collect();
        let x = g.input(t(&[2, 3, 4, 5], &data)).unwrap();
        let gamma = g.variable(Tensor::full(vec![3], 1.0)).unwrap();
        let beta = g.variable(Tensor::zeros(vec![3])).unwrap();
        let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train, 1e-5).unwrap();
        assert!(stats.is_some());
        let out = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| out[(b * 3 + c) * 20..(b * 3 + c + 1) * 20].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 40.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_of_constant_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 3, 3])).unwrap();
        let gamma = g.variable(Tensor::full(vec![2], 1.0)).unwrap();
        let beta = g.variable(Tensor::zeros(vec![2])).unwrap();
        let (y, _) = g.batch_norm(x, gamma, beta, BnMode::Train, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
