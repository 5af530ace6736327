use rand::Rng;

use super::conv::{self, ConvGeom, Padding};
use super::lstm::{self, LstmCache};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Running statistics of one batch-normalization layer. Normalization is per
/// channel (last axis) over all leading axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GlobalAvgPool(Var),
    Sigmoid(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    WidthAsTime(Var),
    Lstm {
        x: Var,
        w: Var,
        u: Var,
        b: Var,
        cache: LstmCache<T>,
    },
    LastStep(Var),
    Softmax(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A record of one forward pass. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar node.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf, typically a parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.o] {
                return Err(Error::Shape(format!("conv2d bias shape {:?}, expected [{}]", self.shape(b), geom.o)));
            }
        }
        let y = conv::forward(&geom, self.value(x), self.value(k), b.map(|b| self.value(b)));
        let needs = self.needs(x) || self.needs(k) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(y, Op::Conv { x, k, b, geom }, needs))
    }

    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState<T>, train: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Shape("batchnorm of a scalar".into()))?;
        let m = if c == 0 { 0 } else { self.value(x).len() / c };
        if m == 0 {
            return Err(Error::Shape("batchnorm over an empty batch".into()));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.running_mean.len() != c {
            return Err(Error::Shape(format!("batchnorm parameters do not match {c} channels")));
        }
        let eps = T::from_f64(state.eps);
        let xs = &self.value(x).data;
        let (mean, var) = if train {
            let mut mean = vec![T::zero(); c];
            for row in xs.chunks(c) {
                for (a, &v) in mean.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            let mf = T::from_f64(m as f64);
            mean.iter_mut().for_each(|v| *v = *v / mf);
            let mut var = vec![T::zero(); c];
            for row in xs.chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] = var[j] + d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / mf);
            let mom = T::from_f64(state.momentum);
            for j in 0..c {
                state.running_mean[j] = mom * state.running_mean[j] + (T::one() - mom) * mean[j];
                state.running_var[j] = mom * state.running_var[j] + (T::one() - mom) * var[j];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for (i, &v) in xs.iter().enumerate() {
            let j = i % c;
            xhat[i] = (v - mean[j]) * inv_std[j];
            y[i] = g[j] * xhat[i] + bt[j];
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor { shape, data: y },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(T::zero())).collect(),
        };
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows and columns are dropped.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || shape[1] < 2 || shape[2] < 2 {
            return Err(Error::Shape(format!("maxpool2x2 needs NHWC with H, W >= 2, got {shape:?}")));
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xs = &self.value(x).data;
        let mut y = vec![T::zero(); n * ho * wo * c];
        let mut argmax = vec![0u32; y.len()];
        for s in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if best == usize::MAX || xs[i] > xs[best] {
                                best = i;
                            }
                        }
                        let o = ((s * ho + oy) * wo + ox) * c + ch;
                        y[o] = xs[best];
                        argmax[o] = best as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, ho, wo, c],
                data: y,
            },
            Op::MaxPool { x, argmax },
            needs,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!("concat shapes {first:?} and {s:?} disagree")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(xs.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", v.shape)));
        }
        let y = Tensor {
            shape: shape.to_vec(),
            data: v.data.clone(),
        };
        let needs = self.needs(x);
        Ok(self.push(y, Op::Reshape(x), needs))
    }

    /// Collapse everything but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = *s.first().ok_or_else(|| Error::Shape("flatten of a scalar".into()))?;
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `x (N, D) @ w (D, O) + b (O)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(b) != [ws[1]] {
            return Err(Error::Shape(format!(
                "dense input {xs:?}, weight {ws:?}, bias {:?} do not chain",
                self.shape(b)
            )));
        }
        let (n, d, o) = (xs[0], xs[1], ws[1]);
        let bias = &self.value(b).data;
        let mut y = Vec::with_capacity(n * o);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        T::gemm(n, d, o, &self.value(x).data, false, &self.value(w).data, false, T::one(), &mut y);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![n, o], data: y }, Op::Dense { x, w, b }, needs))
    }

    /// Inverted dropout. Outside training, or at rate 0, returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let y = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        };
        let needs = self.needs(x);
        Ok(self.push(y, Op::Dropout { x, mask }, needs))
    }

    /// Mean over H and W: (N, H, W, C) to (N, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] * s[2] == 0 {
            return Err(Error::Shape(format!("global_avg_pool needs non-empty NHWC, got {s:?}")));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let xs = &self.value(x).data;
        let scale = T::from_f64(1.0 / hw as f64);
        let mut y = vec![T::zero(); n * c];
        for i in 0..n {
            for p in 0..hw {
                for j in 0..c {
                    y[i * c + j] = y[i * c + j] + xs[(i * hw + p) * c + j];
                }
            }
        }
        y.iter_mut().for_each(|v| *v = *v * scale);
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: vec![n, c], data: y }, Op::GlobalAvgPool(x), needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let y = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| sigmoid(a)).collect(),
        };
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid(x), needs)
    }

    /// Multiply each channel of `x` (N, H, W, C) by `s` (N, C).
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(s) != [xs[0], xs[3]] {
            return Err(Error::Shape(format!("channel_scale of {xs:?} by {:?}", self.shape(s))));
        }
        let (hw, c) = (xs[1] * xs[2], xs[3]);
        let (xv, sv) = (&self.value(x).data, &self.value(s).data);
        let y: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[(i / (hw * c)) * c + i % c])
            .collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Tensor { shape: xs, data: y }, Op::ChannelScale { x, s }, needs))
    }

    /// (N, H, W, C) to a sequence (N, W, H * C): image columns become time steps.
    pub fn width_as_time(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("width_as_time needs NHWC, got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let xv = &self.value(x).data;
        let mut y = vec![T::zero(); xv.len()];
        for i in 0..n {
            for row in 0..h {
                for col in 0..w {
                    let src = ((i * h + row) * w + col) * c;
                    let dst = ((i * w + col) * h + row) * c;
                    y[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![n, w, h * c],
                data: y,
            },
            Op::WidthAsTime(x),
            needs,
        ))
    }

    /// LSTM over `x` (N, T, D) with zero initial state; returns every hidden state (N, T, H).
    pub fn lstm(&mut self, x: Var, w: Var, u: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || xs[1] == 0 || ws.len() != 2 || ws[0] != xs[2] || ws[1] % 4 != 0 {
            return Err(Error::Shape(format!("lstm input {xs:?} with weight {ws:?}")));
        }
        let h = ws[1] / 4;
        if self.shape(u) != [h, 4 * h] || self.shape(b) != [4 * h] {
            return Err(Error::Shape(format!("lstm recurrent weight {:?} / bias {:?} for hidden {h}", self.shape(u), self.shape(b))));
        }
        let (n, t, d) = (xs[0], xs[1], xs[2]);
        let (out, cache) = lstm::forward(
            &self.value(x).data,
            &self.value(w).data,
            &self.value(u).data,
            &self.value(b).data,
            n,
            t,
            d,
            h,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(u) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, t, h],
                data: out,
            },
            Op::Lstm { x, w, u, b, cache },
            needs,
        ))
    }

    /// (N, T, H) to (N, H) at the final step.
    pub fn last_step(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Shape(format!("last_step needs (N, T, H), got {s:?}")));
        }
        let (n, t, h) = (s[0], s[1], s[2]);
        let xv = &self.value(x).data;
        let mut y = Vec::with_capacity(n * h);
        for i in 0..n {
            y.extend_from_slice(&xv[(i * t + t - 1) * h..(i * t + t) * h]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: vec![n, h], data: y }, Op::LastStep(x), needs))
    }

    /// Row-wise softmax of (N, K).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::Shape(format!("softmax needs (N, K), got {s:?}")));
        }
        let y = softmax_rows(&self.value(x).data, s[1]);
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: s, data: y }, Op::Softmax(x), needs))
    }

    /// Mean categorical cross-entropy of `logits` (N, K) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Shape(format!("logits {s:?} for {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let lv = &self.value(logits).data;
        let probs = softmax_rows(lv, k);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            // log-sum-exp form keeps saturated logits exact.
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[l].as_f64();
        }
        loss /= labels.len() as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// `sum_i weights[i] * x[i]`, a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape("weighted_sum weights do not match input".into()));
        }
        let total = self
            .value(x)
            .data
            .iter()
            .zip(&weights)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights }, needs))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let one = T::one();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b, geom } => {
                let (dx, dk, db) = conv::backward(geom, self.value(*x), self.value(*k), dy, self.needs(*x));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*k) {
                    accumulate(grads, *k, dk);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    accumulate(grads, b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let m = T::from_f64((dy.len() / c) as f64);
                let g = &self.value(*gamma).data;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &d) in dy.iter().enumerate() {
                    dgamma[i % c] = dgamma[i % c] + d * xhat[i];
                    dbeta[i % c] = dbeta[i % c] + d;
                }
                if self.needs(*x) {
                    let dx: Vec<T> = if *train {
                        dy.iter()
                            .enumerate()
                            .map(|(i, &d)| {
                                let j = i % c;
                                g[j] * inv_std[j] / m * (m * d - dbeta[j] - xhat[i] * dgamma[j])
                            })
                            .collect()
                    } else {
                        dy.iter().enumerate().map(|(i, &d)| d * g[i % c] * inv_std[i % c]).collect()
                    };
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let dx = dy
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&d, &i) in dy.iter().zip(argmax) {
                    dx[i as usize] = dx[i as usize] + d;
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&v| *self.shape(v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total;
                let mut offset = 0;
                for (&v, &wd) in xs.iter().zip(&widths) {
                    if self.needs(v) {
                        let mut g = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            g.extend_from_slice(&dy[r * total + offset..r * total + offset + wd]);
                        }
                        accumulate(grads, v, g);
                    }
                    offset += wd;
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, dy.to_vec()),
            Op::Dense { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[1];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, o, d, dy, false, &self.value(*w).data, true, T::zero(), &mut dx);
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); d * o];
                    T::gemm(d, n, o, &self.value(*x).data, true, dy, false, T::zero(), &mut dw);
                    accumulate(grads, *w, dw);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in dy.chunks(o) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, dy.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let (hw, c) = (s[1] * s[2], s[3]);
                let scale = T::from_f64(1.0 / hw as f64);
                let dx = (0..self.value(*x).len())
                    .map(|i| dy[(i / (hw * c)) * c + i % c] * scale)
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = dy
                    .iter()
                    .zip(&node.value.data)
                    .map(|(&d, &y)| d * y * (one - y))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::ChannelScale { x, s } => {
                let shape = self.shape(*x);
                let (hw, c) = (shape[1] * shape[2], shape[3]);
                let sv = &self.value(*s).data;
                let xv = &self.value(*x).data;
                if self.needs(*x) {
                    let dx = dy
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| d * sv[(i / (hw * c)) * c + i % c])
                        .collect();
                    accumulate(grads, *x, dx);
                }
                if self.needs(*s) {
                    let mut ds = vec![T::zero(); sv.len()];
                    for (i, (&d, &v)) in dy.iter().zip(xv).enumerate() {
                        let j = (i / (hw * c)) * c + i % c;
                        ds[j] = ds[j] + d * v;
                    }
                    accumulate(grads, *s, ds);
                }
            }
            Op::WidthAsTime(x) => {
                let s = self.shape(*x);
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![T::zero(); dy.len()];
                for i in 0..n {
                    for row in 0..h {
                        for col in 0..w {
                            let src = ((i * h + row) * w + col) * c;
                            let dst = ((i * w + col) * h + row) * c;
                            dx[src..src + c].copy_from_slice(&dy[dst..dst + c]);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Lstm { x, w, u, b, cache } => {
                let s = self.shape(*x);
                let (n, t, d) = (s[0], s[1], s[2]);
                let h = self.shape(*u)[0];
                let (dx, dw, du, db) = lstm::backward(
                    &self.value(*x).data,
                    &self.value(*w).data,
                    &self.value(*u).data,
                    &node.value.data,
                    cache,
                    dy,
                    n,
                    t,
                    d,
                    h,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                for (v, g) in [(*w, dw), (*u, du), (*b, db)] {
                    if self.needs(v) {
                        accumulate(grads, v, g);
                    }
                }
            }
            Op::LastStep(x) => {
                let s = self.shape(*x);
                let (n, t, h) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); n * t * h];
                for i in 0..n {
                    dx[(i * t + t - 1) * h..(i * t + t) * h].copy_from_slice(&dy[i * h..(i + 1) * h]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let k = self.shape(*x)[1];
                let mut dx = vec![T::zero(); dy.len()];
                for ((p, d), out) in node.value.data.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot = p.iter().zip(d).fold(T::zero(), |a, (&pi, &di)| a + pi * di);
                    for j in 0..k {
                        out[j] = p[j] * (d[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = self.shape(*logits)[1];
                let scale = dy[0] / T::from_f64(labels.len() as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] = dx[i * k + l] - scale;
                }
                accumulate(grads, *logits, dx);
            }
            Op::WeightedSum { x, weights } => {
                accumulate(grads, *x, weights.iter().map(|&w| w * dy[0]).collect());
            }
        }
    }
}
