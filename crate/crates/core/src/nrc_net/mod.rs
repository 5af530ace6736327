//! NRC-Net: a convolutional spatial extractor, a squeeze/expand attention
//! block, parallel LSTMs over image columns, and a dense classifier.

mod train;

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    load_checkpoint, save_checkpoint, BatchNormState, Checkpoint, Graph, NamedTensor, Padding, ParamSet, Scalar, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

pub use train::{accuracy, train, train_with_progress, Dataset, EpochRecord, TrainConfig, TrainHistory};

pub const SFEB_LAYERS: usize = 6;
pub const TCB_LAYERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HabConfig {
    pub squeeze_channels: usize,
    pub expand_1x1: usize,
    pub expand_3x3: usize,
    pub post_conv_channels: Vec<usize>,
    pub se_reduction: usize,
}

impl Default for HabConfig {
    fn default() -> Self {
        Self {
            squeeze_channels: 32,
            expand_1x1: 64,
            expand_3x3: 64,
            post_conv_channels: vec![128, 128],
            se_reduction: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NrcNetConfig {
    pub sfeb_channels: Vec<usize>,
    pub sfeb_kernel: usize,
    pub hab: HabConfig,
    pub tfeb_hidden: Vec<usize>,
    pub tcb_units: Vec<usize>,
    pub dropout: f64,
    pub n_classes: usize,
    pub input_size: usize,
    pub input_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NrcNetConfig {
    fn default() -> Self {
        Self {
            sfeb_channels: vec![16, 32, 64, 64, 128, 128],
            sfeb_kernel: 3,
            hab: HabConfig::default(),
            tfeb_hidden: vec![64, 32],
            tcb_units: vec![512, 256, 128, 64, 32],
            dropout: 0.3,
            n_classes: 5,
            input_size: 224,
            input_channels: 3,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl NrcNetConfig {
    /// Narrow variant with the same topology, for gradient checks.
    pub fn reduced() -> Self {
        Self {
            sfeb_channels: vec![2; SFEB_LAYERS],
            tfeb_hidden: vec![4, 2],
            tcb_units: vec![8; TCB_LAYERS],
            ..Self::default()
        }
    }

    /// Spatial size after the six pooling stages.
    pub fn feature_size(&self) -> usize {
        (0..SFEB_LAYERS).fold(self.input_size, |s, _| s / 2)
    }

    fn hab_out(&self) -> usize {
        *self.hab.post_conv_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sfeb_channels.len() != SFEB_LAYERS {
            return bad(format!("need {SFEB_LAYERS} SFEB channel counts, got {}", self.sfeb_channels.len()));
        }
        if self.tcb_units.len() != TCB_LAYERS {
            return bad(format!("need {TCB_LAYERS} TCB widths, got {}", self.tcb_units.len()));
        }
        if self.tfeb_hidden.len() != 2 {
            return bad(format!("need 2 TFEB hidden sizes, got {}", self.tfeb_hidden.len()));
        }
        if self.hab.post_conv_channels.len() != 2 {
            return bad("need 2 HAB post-conv channel counts".into());
        }
        let zero = self.sfeb_channels.iter().chain(&self.tfeb_hidden).chain(&self.tcb_units).chain(&self.hab.post_conv_channels);
        if zero.chain([&self.hab.squeeze_channels, &self.hab.expand_1x1, &self.hab.expand_3x3, &self.sfeb_kernel]).any(|&c| c == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.hab.se_reduction == 0 || self.hab_out() / self.hab.se_reduction == 0 {
            return bad(format!("SE reduction {} too large for {} channels", self.hab.se_reduction, self.hab_out()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.n_classes < 2 || self.input_channels == 0 {
            return bad("need at least 2 classes and 1 input channel".into());
        }
        if self.feature_size() == 0 {
            return bad(format!("input size {} vanishes after {SFEB_LAYERS} poolings", self.input_size));
        }
        if self.sfeb_kernel % 2 == 0 {
            return bad("SFEB kernel must be odd".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvIdx {
    k: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BnIdx {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DenseIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LstmIdx {
    w: usize,
    u: usize,
    b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    sfeb: Vec<(ConvIdx, BnIdx)>,
    squeeze: ConvIdx,
    expand_1x1: ConvIdx,
    expand_3x3: ConvIdx,
    post: Vec<ConvIdx>,
    se_reduce: DenseIdx,
    se_expand: DenseIdx,
    tfeb: Vec<[LstmIdx; 2]>,
    tcb: Vec<DenseIdx>,
    head: DenseIdx,
}

/// Weight initialization scale.
#[derive(Clone, Copy)]
enum Init {
    /// `U(+-sqrt(6 / fan_in))`, for layers followed by ReLU.
    He,
    /// `U(+-sqrt(3 / fan_in))`, unit-variance preserving without a ReLU.
    LeCun,
}

struct Builder<'a, T> {
    params: ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], limit: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.rng.random_range(-limit..limit))).collect();
        self.params.add(name, Tensor { shape: shape.to_vec(), data })
    }

    fn limit(init: Init, fan_in: usize) -> f64 {
        match init {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::LeCun => (3.0 / fan_in as f64).sqrt(),
        }
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> ConvIdx {
        let lim = Self::limit(Init::He, k * k * cin);
        ConvIdx {
            k: self.uniform(format!("{name}.kernel"), &[k, k, cin, cout], lim),
            b: self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIdx {
        BnIdx {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::filled(&[c], T::one())),
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize, init: Init) -> DenseIdx {
        let lim = Self::limit(init, din);
        DenseIdx {
            w: self.uniform(format!("{name}.weight"), &[din, dout], lim),
            b: self.params.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    fn lstm(&mut self, name: &str, din: usize, h: usize) -> LstmIdx {
        let lim = 1.0 / (h as f64).sqrt();
        let w = self.uniform(format!("{name}.input_weight"), &[din, 4 * h], lim);
        let u = self.uniform(format!("{name}.recurrent_weight"), &[h, 4 * h], lim);
        // Forget-gate bias 1.
        let mut bias = Tensor::zeros(&[4 * h]);
        bias.data[h..2 * h].iter_mut().for_each(|v| *v = T::one());
        let b = self.params.add(format!("{name}.bias"), bias);
        LstmIdx { w, u, b }
    }
}

/// A built NRC-Net with its parameters and batch-norm statistics.
#[derive(Debug, Clone)]
pub struct NrcNet<T> {
    pub config: NrcNetConfig,
    pub params: ParamSet<T>,
    pub bn: Vec<BatchNormState<T>>,
    layout: Layout,
    /// Dropout mask source, advanced only by training-mode passes.
    dropout_rng: ChaCha8Rng,
}

impl<T: Scalar> PartialEq for NrcNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.bn == other.bn
    }
}

/// The result of a forward pass: the graph and its logits node.
pub struct Forward<T> {
    pub graph: Graph<T>,
    pub logits: Var,
    /// Graph leaves for each parameter, in `ParamSet` order.
    pub param_vars: Vec<Var>,
}

impl<T: Scalar> NrcNet<T> {
    pub fn new(config: NrcNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(derive_seed(seed, 0));
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let k = config.sfeb_kernel;
        let mut bn = Vec::new();
        let mut cin = config.input_channels;
        let mut sfeb = Vec::new();
        for (i, &c) in config.sfeb_channels.iter().enumerate() {
            let conv = b.conv(&format!("sfeb.conv{}", i + 1), k, cin, c);
            let norm = b.bn(&format!("sfeb.bn{}", i + 1), c);
            let mut state = BatchNormState::new(c);
            state.momentum = config.bn_momentum;
            state.eps = config.bn_eps;
            bn.push(state);
            sfeb.push((conv, norm));
            cin = c;
        }
        let h = &config.hab;
        let squeeze = b.conv("hab.squeeze", 1, cin, h.squeeze_channels);
        let expand_1x1 = b.conv("hab.expand1x1", 1, h.squeeze_channels, h.expand_1x1);
        let expand_3x3 = b.conv("hab.expand3x3", 3, h.squeeze_channels, h.expand_3x3);
        let mut cin = h.expand_1x1 + h.expand_3x3;
        let mut post = Vec::new();
        for (i, &c) in h.post_conv_channels.iter().enumerate() {
            post.push(b.conv(&format!("hab.conv{}", i + 1), 3, cin, c));
            cin = c;
        }
        let reduced = cin / h.se_reduction;
        let se_reduce = b.dense("hab.se_reduce", cin, reduced, Init::He);
        let se_expand = b.dense("hab.se_expand", reduced, cin, Init::LeCun);

        let fs = config.feature_size();
        let mut din = fs * cin;
        let mut tfeb = Vec::new();
        for (stage, &hidden) in config.tfeb_hidden.iter().enumerate() {
            let a = b.lstm(&format!("tfeb.lstm{}a", stage + 1), din, hidden);
            let c = b.lstm(&format!("tfeb.lstm{}b", stage + 1), din, hidden);
            tfeb.push([a, c]);
            din = 2 * hidden;
        }
        let mut tcb = Vec::new();
        for (i, &units) in config.tcb_units.iter().enumerate() {
            tcb.push(b.dense(&format!("tcb.dense{}", i + 1), din, units, Init::He));
            din = units;
        }
        let head = b.dense("tcb.output", din, config.n_classes, Init::LeCun);
        let params = b.params;
        Ok(Self {
            config,
            params,
            bn,
            layout: Layout {
                sfeb,
                squeeze,
                expand_1x1,
                expand_3x3,
                post,
                se_reduce,
                se_expand,
                tfeb,
                tcb,
                head,
            },
            dropout_rng: rng_for(derive_seed(seed, 1)),
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.input_size, c.input_size, c.input_channels];
        if batch.shape.len() != 4 || batch.shape[1..] != want || batch.shape[0] == 0 {
            return Err(Error::Shape(format!("expected batch of N x {want:?}, got {:?}", batch.shape)));
        }
        Ok(())
    }

    /// Records a forward pass. Training mode uses batch statistics (and
    /// updates the running ones) and draws dropout masks; evaluation mode
    /// mutates nothing.
    pub fn forward_graph(&mut self, batch: &Tensor<T>, train: bool) -> Result<Forward<T>> {
        self.check_batch(batch)?;
        if train {
            record(&self.config, &self.layout, &self.params, &mut self.bn, &mut self.dropout_rng, batch, true)
        } else {
            self.forward_eval(batch)
        }
    }

    /// Evaluation-mode forward pass on a shared model.
    pub fn forward_eval(&self, batch: &Tensor<T>) -> Result<Forward<T>> {
        self.check_batch(batch)?;
        // Neither copy is modified in evaluation mode.
        let mut bn = self.bn.clone();
        let mut rng = self.dropout_rng.clone();
        record(&self.config, &self.layout, &self.params, &mut bn, &mut rng, batch, false)
    }

    /// Evaluation-mode class probabilities, N x n_classes.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = self.forward_eval(batch)?;
        let probs = f.graph.softmax(f.logits)?;
        Ok(f.graph.value(probs).clone())
    }

    /// Mean cross-entropy of one batch without the reverse pass.
    pub fn loss(&mut self, batch: &Tensor<T>, labels: &[usize], train: bool) -> Result<f64> {
        let mut f = self.forward_graph(batch, train)?;
        let loss = f.graph.softmax_cross_entropy(f.logits, labels)?;
        Ok(f.graph.value(loss).data[0].as_f64())
    }

    /// Loss and per-parameter gradients for one training batch.
    pub fn loss_and_grads(&mut self, batch: &Tensor<T>, labels: &[usize], train: bool) -> Result<(f64, Vec<Vec<T>>, Tensor<T>)> {
        let mut f = self.forward_graph(batch, train)?;
        let loss = f.graph.softmax_cross_entropy(f.logits, labels)?;
        let value = f.graph.value(loss).data[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Numerics(format!("non-finite loss {value}")));
        }
        let mut grads = f.graph.backward(loss)?;
        let g = f
            .param_vars
            .iter()
            .zip(&self.params.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.value.len()]))
            .collect();
        let logits = f.graph.value(f.logits).clone();
        Ok((value, g, logits))
    }

    fn bn_names(&self) -> Vec<String> {
        (1..=self.bn.len()).map(|i| format!("sfeb.bn{i}")).collect()
    }

    pub fn to_checkpoint(&self, step: u64) -> Checkpoint<T> {
        let mut tensors: Vec<NamedTensor<T>> = self
            .params
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                tensor: p.value.clone(),
            })
            .collect();
        for (name, st) in self.bn_names().into_iter().zip(&self.bn) {
            let c = st.running_mean.len();
            tensors.push(NamedTensor {
                name: format!("{name}.running_mean"),
                tensor: Tensor {
                    shape: vec![c],
                    data: st.running_mean.clone(),
                },
            });
            tensors.push(NamedTensor {
                name: format!("{name}.running_var"),
                tensor: Tensor {
                    shape: vec![c],
                    data: st.running_var.clone(),
                },
            });
        }
        Checkpoint {
            tensors,
            step,
            optimizer_state: false,
            meta: serde_json::json!({ "model": self.config }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let config: NrcNetConfig = serde_json::from_value(ckpt.meta.get("model").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let t = ckpt.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape)));
            }
            Ok(t.clone())
        };
        for p in &mut model.params.params {
            p.value = fetch(&p.name, &p.value.shape)?;
        }
        for (name, st) in model.bn_names().into_iter().zip(model.bn.iter_mut()) {
            let c = [st.running_mean.len()];
            st.running_mean = fetch(&format!("{name}.running_mean"), &c)?.data;
            st.running_var = fetch(&format!("{name}.running_var"), &c)?.data;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint(0))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

#[allow(clippy::too_many_arguments)]
fn record<T: Scalar>(
    config: &NrcNetConfig,
    l: &Layout,
    params: &ParamSet<T>,
    bn: &mut [BatchNormState<T>],
    dropout_rng: &mut ChaCha8Rng,
    batch: &Tensor<T>,
    train: bool,
) -> Result<Forward<T>> {
    let mut g = Graph::new();
    let param_vars: Vec<Var> = params.params.iter().map(|p| g.leaf(p.value.clone())).collect();
    let p = |i: usize| param_vars[i];
    let mut x = g.input(batch.clone());

    for (i, (conv, norm)) in l.sfeb.iter().enumerate() {
        x = g.conv2d(x, p(conv.k), Some(p(conv.b)), 1, Padding::Same)?;
        x = g.batchnorm(x, p(norm.gamma), p(norm.beta), &mut bn[i], train)?;
        x = g.relu(x);
        x = g.maxpool2x2(x)?;
    }

    let conv_relu = |g: &mut Graph<T>, x: Var, c: &ConvIdx| -> Result<Var> {
        let y = g.conv2d(x, p(c.k), Some(p(c.b)), 1, Padding::Same)?;
        Ok(g.relu(y))
    };
    let s = conv_relu(&mut g, x, &l.squeeze)?;
    let e1 = conv_relu(&mut g, s, &l.expand_1x1)?;
    let e3 = conv_relu(&mut g, s, &l.expand_3x3)?;
    let mut y = g.concat(&[e1, e3])?;
    for c in &l.post {
        y = conv_relu(&mut g, y, c)?;
    }
    let pooled = g.global_avg_pool(y)?;
    let z = g.dense(pooled, p(l.se_reduce.w), p(l.se_reduce.b))?;
    let z = g.relu(z);
    let z = g.dense(z, p(l.se_expand.w), p(l.se_expand.b))?;
    let z = g.sigmoid(z);
    let y = g.channel_scale(y, z)?;

    let mut seq = g.width_as_time(y)?;
    for pair in &l.tfeb {
        let a = g.lstm(seq, p(pair[0].w), p(pair[0].u), p(pair[0].b))?;
        let b = g.lstm(seq, p(pair[1].w), p(pair[1].u), p(pair[1].b))?;
        seq = g.concat(&[a, b])?;
    }
    let mut h = g.last_step(seq)?;
    for d in &l.tcb {
        h = g.dense(h, p(d.w), p(d.b))?;
        h = g.relu(h);
        h = g.dropout(h, config.dropout, dropout_rng, train)?;
    }
    let logits = g.dense(h, p(l.head.w), p(l.head.b))?;
    Ok(Forward {
        graph: g,
        logits,
        param_vars,
    })
}

/// Stack flat H x W x C images into an N x H x W x C tensor.
pub fn batch_tensor<T: Scalar>(images: &[&[f32]], size: usize, channels: usize) -> Result<Tensor<T>> {
    let per = size * size * channels;
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        if img.len() != per {
            return Err(Error::Shape(format!("image has {} values, expected {per}", img.len())));
        }
        data.extend(img.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(vec![images.len(), size, size, channels], data)
}
