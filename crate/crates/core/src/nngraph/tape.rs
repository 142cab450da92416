use super::linalg::{col2im, gemm, im2col, ConvGeometry, MatRef};
use super::{NnError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    Relu(Var),
    Silu(Var),
    AvgPool { x: Var, k: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample2x(Var),
    Concat { a: Var, b: Var, outer: usize, a_inner: usize, b_inner: usize },
    Add(Var, Var),
    AddChannel { x: Var, v: Var, per_sample: bool },
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    GlobalAvgPool(Var),
    InstanceNorm { x: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse(Var, Var),
    Sum(Var),
    PickClass { x: Var, class: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NnError {
    NnError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn nchw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, t.shape(), &[0, 0, 0, 0])),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in execution order, which is a topological
/// order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `x [N, in] . W[out, in]^T + b[out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        let (n, fan_in, fan_out) = match (xs, ws) {
            (&[n, i], &[o, i2]) if i == i2 => (n, i, o),
            _ => return Err(shape_err("dense", xs, ws)),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [fan_out] {
                return Err(shape_err("dense", ws, self.value(b).shape()));
            }
        }
        let mut out = vec![0.0; n * fan_out];
        gemm(
            MatRef::new(self.value(x).data(), n, fan_in),
            MatRef::t(self.value(w).data(), fan_in, fan_out),
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::new(&[n, fan_out], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Dense { x, w, b }, &inputs))
    }

    /// Cross-correlation of `x [N, C, H, W]` with `k [O, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let (n, c, h, w) = nchw("conv2d", self.value(x))?;
        let (o, kh, kw) = match *self.value(k).shape() {
            [o, kc, kh, kw] if kc == c => (o, kh, kw),
            _ => return Err(shape_err("conv2d", self.value(x).shape(), self.value(k).shape())),
        };
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err("conv2d", self.value(x).shape(), self.value(k).shape()));
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let spatial = oh * ow;
        let patch = geom.patch_len();
        let mut out = vec![0.0; n * o * spatial];
        let mut cols = vec![0.0; patch * spatial];
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        for s in 0..n {
            im2col(&xv[s * c * h * w..(s + 1) * c * h * w], &geom, &mut cols);
            gemm(
                MatRef::new(kv, o, patch),
                MatRef::new(&cols, patch, spatial),
                &mut out[s * o * spatial..(s + 1) * o * spatial],
                0.0,
            );
        }
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let value = Tensor::from_fn(src.shape(), |i| f(src.data()[i]));
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + offset)
    }

    fn pool_dims(&self, op: &'static str, x: Var, k: usize) -> Result<(usize, usize, usize, usize), NnError> {
        let dims = nchw(op, self.value(x))?;
        if k == 0 || dims.2 % k != 0 || dims.3 % k != 0 {
            return Err(shape_err(op, self.value(x).shape(), &[k, k]));
        }
        Ok(dims)
    }

    /// Non-overlapping `k x k` mean pooling; spatial dims must divide by `k`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var, NnError> {
        let (n, c, h, w) = self.pool_dims("avg_pool2d", x, k)?;
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += plane[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, &[x]))
    }

    /// Non-overlapping `k x k` max pooling; ties resolve to the first maximum.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var, NnError> {
        let (n, c, h, w) = self.pool_dims("max_pool2d", x, k)?;
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = p * h * w + (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > best.0 {
                                best = (src[idx], idx);
                            }
                        }
                    }
                    let o = (p * oh + oy) * ow + ox;
                    out[o] = best.0;
                    argmax[o] = best.1;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = nchw("upsample_nearest2x", self.value(x))?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(p * oh + oy) * ow + ox] = src[(p * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter().zip(sb).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(shape_err("concat", sa, sb));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (a_inner, b_inner) = (sa[axis] * inner, sb[axis] * inner);
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&bv[o * b_inner..(o + 1) * b_inner]);
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { a, b, outer, a_inner, b_inner }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let value = Tensor::from_fn(self.value(a).shape(), |i| av[i] + bv[i]);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let value = Tensor::from_fn(self.value(a).shape(), |i| av[i] * bv[i]);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Broadcast add of `v [N, C]` (per sample) or `v [C]` (shared) over the
    /// spatial plane of `x [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = nchw("add_channel", self.value(x))?;
        let per_sample = match *self.value(v).shape() {
            [vn, vc] if vn == n && vc == c => true,
            [vc] if vc == c => false,
            _ => return Err(shape_err("add_channel", self.value(x).shape(), self.value(v).shape())),
        };
        let (xv, vv) = (self.value(x).data(), self.value(v).data());
        let plane = h * w;
        let value = Tensor::from_fn(&[n, c, h, w], |i| {
            let p = i / plane;
            xv[i] + if per_sample { vv[p] } else { vv[p % c] }
        });
        Ok(self.push(value, Op::AddChannel { x, v, per_sample }, &[x, v]))
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = nchw("global_avg_pool", self.value(x))?;
        let plane = h * w;
        let src = self.value(x).data();
        let value = Tensor::from_fn(&[n, c], |p| {
            src[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64
        });
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Per-sample, per-channel normalization over the spatial plane, followed
    /// by the affine `gamma[C] * x_hat + beta[C]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = nchw("instance_norm", self.value(x))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(shape_err("instance_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let plane = h * w;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; n * c];
        let mut out = vec![0.0; src.len()];
        for p in 0..n * c {
            let xs = &src[p * plane..(p + 1) * plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[p] = inv;
            let ch = p % c;
            for (i, &v) in xs.iter().enumerate() {
                let xh = (v - mean) * inv;
                normalized[p * plane + i] = xh;
                out[p * plane + i] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm { x, gamma, beta, normalized, inv_std },
            &[x, gamma, beta],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let (n, classes) = match *self.value(logits).shape() {
            [n, c] if n == labels.len() && n > 0 => (n, c),
            _ => return Err(shape_err("softmax_cross_entropy", self.value(logits).shape(), &[labels.len()])),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::Contract(format!("label {bad} out of range for {classes} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (s, &label) in labels.iter().enumerate() {
            let row = &z[s * classes..(s + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum_exp.ln();
            loss += log_norm - row[label];
            for (j, &v) in row.iter().enumerate() {
                probs[s * classes + j] = (v - log_norm).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let sq: f64 = av.iter().zip(bv).map(|(x, y)| (x - y).powi(2)).sum();
        let value = Tensor::scalar(sq / av.len() as f64);
        Ok(self.push(value, Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Sum over the batch of column `class` of `x [N, C]`.
    pub fn pick_class(&mut self, x: Var, class: usize) -> Result<Var, NnError> {
        let (_, c) = match *self.value(x).shape() {
            [n, c] if class < c => (n, c),
            _ => return Err(shape_err("pick_class", self.value(x).shape(), &[class])),
        };
        let total = self.value(x).data().iter().skip(class).step_by(c).sum();
        Ok(self.push(Tensor::scalar(total), Op::PickClass { x, class }, &[x]))
    }

    /// Reverse pass from a scalar `loss`. Every node that depends on a
    /// `requires_grad` leaf receives its gradient; fan-out accumulates.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(NnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, node)| {
                    g.filter(|_| node.requires_grad)
                        .map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape"))
                })
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[var.0].requires_grad {
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; nodes[var.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let (n, fan_in) = (xv.shape()[0], xv.shape()[1]);
                let fan_out = wv.shape()[0];
                acc(*x, &mut |gx| {
                    gemm(
                        MatRef::new(gy, n, fan_out),
                        MatRef::new(wv.data(), fan_out, fan_in),
                        gx,
                        1.0,
                    )
                });
                acc(*w, &mut |gw| {
                    gemm(
                        MatRef::t(gy, fan_out, n),
                        MatRef::new(xv.data(), n, fan_in),
                        gw,
                        1.0,
                    )
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in gy.chunks(fan_out) {
                            gb.iter_mut().zip(row).for_each(|(g, r)| *g += r);
                        }
                    });
                }
            }
            Op::Conv2d { x, k, geom } => {
                let xv = nodes[x.0].value.data();
                let kv = nodes[k.0].value.data();
                let n = nodes[x.0].value.shape()[0];
                let o = nodes[k.0].value.shape()[0];
                let spatial = geom.out_height() * geom.out_width();
                let patch = geom.patch_len();
                let sample = geom.channels * geom.height * geom.width;
                let mut cols = vec![0.0; patch * spatial];
                if nodes[k.0].requires_grad {
                    acc(*k, &mut |gk| {
                        for s in 0..n {
                            im2col(&xv[s * sample..(s + 1) * sample], geom, &mut cols);
                            gemm(
                                MatRef::new(&gy[s * o * spatial..(s + 1) * o * spatial], o, spatial),
                                MatRef::t(&cols, spatial, patch),
                                gk,
                                1.0,
                            );
                        }
                    });
                }
                acc(*x, &mut |gx| {
                    for s in 0..n {
                        gemm(
                            MatRef::t(kv, patch, o),
                            MatRef::new(&gy[s * o * spatial..(s + 1) * o * spatial], o, spatial),
                            &mut cols,
                            0.0,
                        );
                        col2im(&cols, geom, &mut gx[s * sample..(s + 1) * sample]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((g, &v), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((g, &v), &d) in gx.iter_mut().zip(xv).zip(gy) {
                        let s = sigmoid(v);
                        *g += d * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            Op::Scale(x, factor) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d * factor));
            }
            Op::AddScalar(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::AvgPool { x, k } => {
                let (_, _, h, w) = nchw("avg_pool2d", &nodes[x.0].value).expect("recorded shape");
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                acc(*x, &mut |gx| {
                    for (i, g) in gx.iter_mut().enumerate() {
                        let p = i / (h * w);
                        let (y, xx) = ((i % (h * w)) / w, i % w);
                        *g += gy[(p * oh + y / k) * ow + xx / k] * norm;
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (&src, &d) in argmax.iter().zip(gy) {
                        gx[src] += d;
                    }
                });
            }
            Op::Upsample2x(x) => {
                let (_, _, h, w) = nchw("upsample_nearest2x", &nodes[x.0].value).expect("recorded shape");
                let (oh, ow) = (2 * h, 2 * w);
                acc(*x, &mut |gx| {
                    for (o, &d) in gy.iter().enumerate() {
                        let p = o / (oh * ow);
                        let (oy, ox) = ((o % (oh * ow)) / ow, o % ow);
                        gx[(p * h + oy / 2) * w + ox / 2] += d;
                    }
                });
            }
            Op::Concat { a, b, outer, a_inner, b_inner } => {
                let stride = a_inner + b_inner;
                acc(*a, &mut |ga| {
                    for o in 0..*outer {
                        let src = &gy[o * stride..o * stride + a_inner];
                        ga[o * a_inner..(o + 1) * a_inner].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                });
                acc(*b, &mut |gb| {
                    for o in 0..*outer {
                        let src = &gy[o * stride + a_inner..(o + 1) * stride];
                        gb[o * b_inner..(o + 1) * b_inner].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((g, &d), &o) in ga.iter_mut().zip(gy).zip(bv) {
                        *g += d * o;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((g, &d), &o) in gb.iter_mut().zip(gy).zip(av) {
                        *g += d * o;
                    }
                });
            }
            Op::AddChannel { x, v, per_sample } => {
                let (_, c, h, w) = nchw("add_channel", &nodes[x.0].value).expect("recorded shape");
                let plane = h * w;
                acc(*x, &mut |gx| gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d));
                acc(*v, &mut |gv| {
                    for (p, chunk) in gy.chunks(plane).enumerate() {
                        let slot = if *per_sample { p } else { p % c };
                        gv[slot] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = nchw("global_avg_pool", &nodes[x.0].value).expect("recorded shape");
                let plane = h * w;
                acc(*x, &mut |gx| {
                    for (i, g) in gx.iter_mut().enumerate() {
                        *g += gy[i / plane] / plane as f64;
                    }
                });
            }
            Op::InstanceNorm { x, gamma, beta, normalized, inv_std } => {
                let (_, c, h, w) = nchw("instance_norm", &nodes[x.0].value).expect("recorded shape");
                let plane = h * w;
                let m = plane as f64;
                let g = nodes[gamma.0].value.data();
                acc(*gamma, &mut |gg| {
                    for (i, (&d, &xh)) in gy.iter().zip(normalized).enumerate() {
                        gg[(i / plane) % c] += d * xh;
                    }
                });
                acc(*beta, &mut |gb| {
                    for (i, &d) in gy.iter().enumerate() {
                        gb[(i / plane) % c] += d;
                    }
                });
                acc(*x, &mut |gx| {
                    for (p, &inv) in inv_std.iter().enumerate() {
                        let range = p * plane..(p + 1) * plane;
                        let gamma_c = g[p % c];
                        let dys = &gy[range.clone()];
                        let xhs = &normalized[range.clone()];
                        let sum_d: f64 = dys.iter().map(|d| d * gamma_c).sum();
                        let sum_dx: f64 = dys.iter().zip(xhs).map(|(d, xh)| d * gamma_c * xh).sum();
                        for ((gxi, &d), &xh) in gx[range].iter_mut().zip(dys).zip(xhs) {
                            *gxi += inv / m * (m * d * gamma_c - sum_d - xh * sum_dx);
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let classes = probs.len() / n;
                let scale = gy[0] / n as f64;
                acc(*logits, &mut |gl| {
                    for (i, (g, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let target = if labels[i / classes] == i % classes { 1.0 } else { 0.0 };
                        *g += scale * (p - target);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let scale = 2.0 * gy[0] / av.len() as f64;
                acc(*a, &mut |ga| {
                    for ((g, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *g += scale * (x - y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((g, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *g -= scale * (x - y);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|g| *g += gy[0]));
            }
            Op::PickClass { x, class } => {
                let c = nodes[x.0].value.shape()[1];
                acc(*x, &mut |gx| {
                    gx.iter_mut().skip(*class).step_by(c).for_each(|g| *g += gy[0]);
                });
            }
        }
    }
}

/// Sinusoidal timestep features `[N, dim]`: pairs `(sin(t w_i), cos(t w_i))`
/// with frequencies `w_i` spaced geometrically from 1 down to 1e-4.
pub fn sinusoidal_embed(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half > 1 {
                10_000f64.powf(-(i as f64) / (half - 1) as f64)
            } else {
                1.0
            }
        })
        .collect();
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        for &f in &freqs {
            data.push((t * f).sin());
            data.push((t * f).cos());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(&[timesteps.len(), dim], data).expect("embedding shape")
}
