//! The CNN as an ordered layer graph with hand-written backward passes.

mod lsw;
mod train;

pub use lsw::{load_weights, save_weights, weights_from_bytes, weights_to_bytes, LSW_MAGIC, LSW_VERSION};
pub use train::{evaluate, fit, EpochRecord, Evaluation, FitOutcome, History, TrainConfig};

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_update, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::exec;
use crate::layers::{
    conv2d_backward_parts, conv2d_forward, dense_backward_parts, dense_forward, dropout,
    dropout_backward, maxpool2_backward, maxpool2_forward, relu, relu_backward, scce_slice,
    softmax, ConvGeometry, Padding, PoolSwitches,
};
use crate::tensor::{argmax, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    /// Convolution with an optional fused ReLU.
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        relu: bool,
    },
    /// 2x2 max-pool, stride 2.
    Pool,
    Relu,
    Flatten,
    Dense {
        units: usize,
        relu: bool,
    },
    Dropout {
        rate: f32,
    },
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }
}

/// Named parameter tensors in graph order (`<layer>.kernel`, `<layer>.bias`).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

impl<T: Scalar> Default for WeightStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Sizes of the conv/dense stack built by [`build_cnn`].
#[derive(Clone, Debug, PartialEq)]
pub struct CnnArch {
    pub input: [usize; 3],
    pub filters: [usize; 3],
    pub kernel: usize,
    pub dense: [usize; 2],
    pub dropout: f32,
    pub num_classes: usize,
}

impl CnnArch {
    /// Three 3x3 conv blocks (32, 128, 64 filters) on 128x128 RGB, dense 1024 and 512.
    pub fn leaf(num_classes: usize) -> Self {
        CnnArch {
            input: [3, 128, 128],
            filters: [32, 128, 64],
            kernel: 3,
            dense: [1024, 512],
            dropout: 0.5,
            num_classes,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let conv = |filters| LayerKind::Conv {
            filters,
            kernel: self.kernel,
            stride: 1,
            padding: Padding::Same,
            relu: true,
        };
        vec![
            LayerSpec::new("conv1", conv(self.filters[0])),
            LayerSpec::new("pool1", LayerKind::Pool),
            LayerSpec::new("conv2", conv(self.filters[1])),
            LayerSpec::new("pool2", LayerKind::Pool),
            LayerSpec::new("conv3", conv(self.filters[2])),
            LayerSpec::new("pool3", LayerKind::Pool),
            LayerSpec::new("flatten", LayerKind::Flatten),
            LayerSpec::new("fc1", LayerKind::Dense { units: self.dense[0], relu: true }),
            LayerSpec::new("drop1", LayerKind::Dropout { rate: self.dropout }),
            LayerSpec::new("fc2", LayerKind::Dense { units: self.dense[1], relu: true }),
            LayerSpec::new("drop2", LayerKind::Dropout { rate: self.dropout }),
            LayerSpec::new(
                "logits",
                LayerKind::Dense {
                    units: self.num_classes,
                    relu: false,
                },
            ),
            LayerSpec::new("softmax", LayerKind::Softmax),
        ]
    }
}

pub fn build_cnn(arch: &CnnArch, seed: u64) -> Result<ModelGraph> {
    if arch.num_classes < 2 {
        return Err(Error::Input(format!(
            "need at least 2 classes, got {}",
            arch.num_classes
        )));
    }
    ModelGraph::new(arch.input, arch.layers(), seed)
}

/// The three-block CNN for `num_classes` classes, He-uniform initialised from `seed`.
pub fn build_leaf_cnn(num_classes: usize, seed: u64) -> Result<ModelGraph> {
    build_cnn(&CnnArch::leaf(num_classes), seed)
}

/// Layer outputs (batch-leading) of one forward pass, plus pool switches and dropout masks.
#[derive(Clone, Debug)]
pub struct ActivationCache<T = f32> {
    names: Vec<String>,
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    switches: Vec<Vec<PoolSwitches>>,
    masks: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ActivationCache<T> {
    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn output(&self, name: &str) -> Option<&Tensor<T>> {
        self.index(name).map(|i| &self.outputs[i])
    }

    pub fn switches(&self, name: &str) -> Option<&[PoolSwitches]> {
        self.index(name).map(|i| self.switches[i].as_slice())
    }

    pub fn dropout_mask(&self, name: &str) -> Option<&Tensor<T>> {
        self.index(name).and_then(|i| self.masks[i].as_ref())
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    /// Pre-softmax class scores `[B, K]`.
    pub fn logits(&self) -> &Tensor<T> {
        &self.outputs[self.outputs.len() - 2]
    }

    fn layer_input(&self, i: usize) -> &Tensor<T> {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }
}

/// Ordered layers, their parameters and the Adam state of every parameter.
#[derive(Clone, Debug)]
pub struct ModelGraph<T = f32> {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    weights: WeightStore<T>,
    adam: Vec<AdamState<T>>,
    /// Per layer, index of its kernel in `weights` (bias follows).
    param_slot: Vec<Option<usize>>,
}

fn batch_shape(b: usize, item: &[usize]) -> Vec<usize> {
    let mut s = vec![b];
    s.extend_from_slice(item);
    s
}

fn concat<T: Scalar>(parts: Vec<Tensor<T>>, b: usize, item: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(b * item.iter().product::<usize>());
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(batch_shape(b, item), data)
}

/// Activations, logits, and the optional `(class, gradient)` pair.
pub(crate) type LayerActivation<T> = (Tensor<T>, Tensor<T>, Option<(usize, Tensor<T>)>);

impl<T: Scalar> ModelGraph<T> {
    /// Validates the layer sequence and draws He-uniform weights (zero biases) from `seed`.
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let (shapes, param_shapes) = infer_shapes(input_shape, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = WeightStore::new();
        for (name, kshape, bshape) in param_shapes {
            let fan_in: usize = kshape[1..].iter().product();
            let limit = (6.0 / fan_in as f64).sqrt();
            let kernel = Tensor::from_fn(kshape, |_| T::from_f64(rng.gen_range(-limit..limit)));
            weights.push(format!("{name}.kernel"), kernel);
            weights.push(format!("{name}.bias"), Tensor::zeros(bshape));
        }
        Self::assemble(input_shape, layers, shapes, weights)
    }

    /// Rebuilds a graph from stored parameters, checking every shape.
    pub fn from_parts(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        weights: WeightStore<T>,
    ) -> Result<Self> {
        let (shapes, param_shapes) = infer_shapes(input_shape, &layers)?;
        let expected: Vec<(String, Vec<usize>)> = param_shapes
            .into_iter()
            .flat_map(|(n, k, b)| [(format!("{n}.kernel"), k), (format!("{n}.bias"), b)])
            .collect();
        if expected.len() != weights.len() {
            return Err(Error::Format(format!(
                "layers need {} parameter tensors, found {}",
                expected.len(),
                weights.len()
            )));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(weights.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::Format(format!(
                    "expected parameter {name} {shape:?}, found {have} {:?}",
                    t.shape()
                )));
            }
        }
        Self::assemble(input_shape, layers, shapes, weights)
    }

    fn assemble(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        shapes: Vec<Vec<usize>>,
        weights: WeightStore<T>,
    ) -> Result<Self> {
        let mut param_slot = Vec::with_capacity(layers.len());
        let mut next = 0;
        for l in &layers {
            if l.has_params() {
                param_slot.push(Some(next));
                next += 2;
            } else {
                param_slot.push(None);
            }
        }
        let adam = weights.tensors().iter().map(|t| AdamState::new(t.shape())).collect();
        Ok(ModelGraph {
            input_shape,
            layers,
            shapes,
            weights,
            adam,
            param_slot,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Output shape of a layer for one example.
    pub fn output_shape(&self, name: &str) -> Option<&[usize]> {
        self.layer_index(name).map(|i| self.shapes[i].as_slice())
    }

    pub fn num_classes(&self) -> usize {
        self.shapes[self.shapes.len() - 1][0]
    }

    pub fn weights(&self) -> &WeightStore<T> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightStore<T> {
        &mut self.weights
    }

    /// Replaces all parameters; shapes must match.
    pub fn set_weights(&mut self, weights: WeightStore<T>) -> Result<()> {
        if weights.names() != self.weights.names()
            || weights
                .tensors()
                .iter()
                .zip(self.weights.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Dimension("replacement weights do not match the graph".into()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn adam_states(&self) -> &[AdamState<T>] {
        &self.adam
    }

    /// Same graph and parameters in another precision, with fresh optimizer state.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph::assemble(
            self.input_shape,
            self.layers.clone(),
            self.shapes.clone(),
            self.weights.cast(),
        )
        .expect("same layers")
    }

    fn params(&self, layer: usize) -> (&Tensor<T>, &Tensor<T>) {
        let k = self.param_slot[layer].expect("layer has parameters");
        (&self.weights.tensors[k], &self.weights.tensors[k + 1])
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Dimension(format!(
                "model expects batches of {:?}, got {:?}",
                self.input_shape, s
            )));
        }
        Ok(s[0])
    }

    /// Full forward pass keeping every layer output.
    ///
    /// Returns class probabilities `[B, K]`. Dropout draws from `rng` only when `training`.
    pub fn forward_with_cache<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ActivationCache<T>)> {
        let b = self.check_batch(batch)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        let mut switches = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let x = if i == 0 { batch } else { &outputs[i - 1] };
            let (y, sw, mask) = self.layer_forward(i, x, b, training, rng)?;
            outputs.push(y);
            switches.push(sw);
            masks.push(mask);
        }
        let probs = outputs.last().expect("non-empty graph").clone();
        Ok((
            probs,
            ActivationCache {
                names: self.layers.iter().map(|l| l.name.clone()).collect(),
                input: batch.clone(),
                outputs,
                switches,
                masks,
            },
        ))
    }

    /// Inference logits `[B, K]` without keeping intermediates.
    pub fn predict_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.check_batch(batch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = batch.clone();
        for i in 0..self.layers.len() - 1 {
            x = self.layer_forward(i, &x, b, false, &mut rng)?.0;
        }
        Ok(x)
    }

    #[allow(clippy::type_complexity)]
    fn layer_forward<R: Rng + ?Sized>(
        &self,
        i: usize,
        x: &Tensor<T>,
        b: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<PoolSwitches>, Option<Tensor<T>>)> {
        let out_shape = &self.shapes[i];
        let none = (Vec::new(), None);
        let y = match self.layers[i].kind {
            LayerKind::Conv {
                stride,
                padding,
                relu: fused,
                ..
            } => {
                let (k, bias) = self.params(i);
                let parts = exec::try_map_indexed(b, |e| {
                    let xe = Tensor::new(x.shape()[1..].to_vec(), x.outer_slice(e).to_vec())?;
                    let y = conv2d_forward(&xe, k, bias, stride, padding)?;
                    Ok::<_, Error>(if fused { relu(&y) } else { y })
                })?;
                concat(parts, b, out_shape)?
            }
            LayerKind::Pool => {
                let parts = exec::try_map_indexed(b, |e| {
                    let xe = Tensor::new(x.shape()[1..].to_vec(), x.outer_slice(e).to_vec())?;
                    maxpool2_forward(&xe)
                })?;
                let (ys, sws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
                return Ok((concat(ys, b, out_shape)?, sws, None));
            }
            LayerKind::Relu => relu(x),
            LayerKind::Flatten => x.clone().reshape(batch_shape(b, out_shape))?,
            LayerKind::Dense { relu: fused, .. } => {
                let (w, bias) = self.params(i);
                let y = dense_forward(x, w, bias)?;
                if fused {
                    relu(&y)
                } else {
                    y
                }
            }
            LayerKind::Dropout { rate } => {
                let (y, mask) = dropout(x, rate, rng, training)?;
                return Ok((y, Vec::new(), mask));
            }
            LayerKind::Softmax => softmax(x),
        };
        Ok((y, none.0, none.1))
    }

    /// Backpropagates `grad` (w.r.t. the output of layer `top`) down the graph.
    ///
    /// Stops after producing the gradient w.r.t. the output of layer `stop`
    /// (or after layer 0 when `stop` is `None`). Parameter gradients are summed
    /// over the batch in example order.
    #[allow(clippy::type_complexity)]
    fn backward(
        &self,
        cache: &ActivationCache<T>,
        top: usize,
        mut grad: Tensor<T>,
        stop: Option<usize>,
        want_params: bool,
    ) -> Result<(Vec<Option<Tensor<T>>>, Tensor<T>)> {
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.weights.len()];
        let b = cache.input.outer();
        let lowest = stop.map(|s| s + 1).unwrap_or(0);
        for i in (lowest..=top).rev() {
            let x = cache.layer_input(i);
            let y = &cache.outputs[i];
            let want_input = i > lowest || stop.is_some();
            grad = match self.layers[i].kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    relu: fused,
                    ..
                } => {
                    if fused {
                        grad = relu_backward(&grad, y)?;
                    }
                    let (k, _) = self.params(i);
                    let in_item = x.shape()[1..].to_vec();
                    let out_item = y.shape()[1..].to_vec();
                    let parts = exec::try_map_indexed(b, |e| {
                        let xe = Tensor::new(in_item.clone(), x.outer_slice(e).to_vec())?;
                        let ge = Tensor::new(out_item.clone(), grad.outer_slice(e).to_vec())?;
                        conv2d_backward_parts(&ge, &xe, k, stride, padding, want_input, want_params)
                    })?;
                    let mut d_inputs = Vec::with_capacity(b);
                    let mut dk: Option<Tensor<T>> = None;
                    let mut db: Option<Tensor<T>> = None;
                    for p in parts {
                        if let Some(d) = p.d_input {
                            d_inputs.push(d);
                        }
                        if let (Some(k), Some(bb)) = (p.d_kernels, p.d_bias) {
                            match (&mut dk, &mut db) {
                                (Some(ak), Some(ab)) => {
                                    ak.add_assign(&k)?;
                                    ab.add_assign(&bb)?;
                                }
                                _ => {
                                    dk = Some(k);
                                    db = Some(bb);
                                }
                            }
                        }
                    }
                    if want_params {
                        let slot = self.param_slot[i].expect("conv has params");
                        param_grads[slot] = dk;
                        param_grads[slot + 1] = db;
                    }
                    if want_input {
                        concat(d_inputs, b, &in_item)?
                    } else {
                        grad
                    }
                }
                LayerKind::Pool => {
                    let in_item = x.shape()[1..].to_vec();
                    let out_item = y.shape()[1..].to_vec();
                    let sws = &cache.switches[i];
                    let parts = exec::try_map_indexed(b, |e| {
                        let ge = Tensor::new(out_item.clone(), grad.outer_slice(e).to_vec())?;
                        maxpool2_backward(&ge, &sws[e], &in_item)
                    })?;
                    concat(parts, b, &in_item)?
                }
                LayerKind::Relu => relu_backward(&grad, x)?,
                LayerKind::Flatten => grad.reshape(x.shape().to_vec())?,
                LayerKind::Dense { relu: fused, .. } => {
                    if fused {
                        grad = relu_backward(&grad, y)?;
                    }
                    let (w, _) = self.params(i);
                    let (dx, dw, db) = dense_backward_parts(&grad, x, w, want_input, want_params)?;
                    if want_params {
                        let slot = self.param_slot[i].expect("dense has params");
                        param_grads[slot] = dw;
                        param_grads[slot + 1] = db;
                    }
                    dx.unwrap_or(grad)
                }
                LayerKind::Dropout { .. } => dropout_backward(&grad, cache.masks[i].as_ref())?,
                LayerKind::Softmax => {
                    return Err(Error::Internal("softmax is folded into the loss".into()))
                }
            };
        }
        Ok((param_grads, grad))
    }

    /// Mean cross-entropy of a cached pass and its gradient w.r.t. the logits (already divided by B).
    fn loss_grad(&self, cache: &ActivationCache<T>, labels: &[usize]) -> Result<(T, Tensor<T>, usize)> {
        let logits = cache.logits();
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != b {
            return Err(Error::Input(format!("{} labels for a batch of {b}", labels.len())));
        }
        let inv_b = T::one() / T::from_f64(b as f64);
        let mut total = T::zero();
        let mut grad = Vec::with_capacity(b * k);
        let mut correct = 0;
        for (e, &label) in labels.iter().enumerate() {
            let row = &logits.data()[e * k..(e + 1) * k];
            let (loss, g) = scce_slice(row, label);
            total = total + loss;
            grad.extend(g.into_iter().map(|v| v * inv_b));
            correct += (argmax(row) == label) as usize;
        }
        Ok((total * inv_b, Tensor::new(vec![b, k], grad)?, correct))
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let k = self.num_classes();
        match labels.iter().find(|&&l| l >= k) {
            Some(l) => Err(Error::Input(format!("label {l} outside 0..{k}"))),
            None => Ok(()),
        }
    }

    /// Mean loss over the batch and the batch-averaged gradient of every parameter.
    pub fn loss_and_gradients<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<(T, WeightStore<T>)> {
        let (loss, grads, _) = self.loss_gradients_correct(batch, labels, training, rng)?;
        Ok((loss, grads))
    }

    fn loss_gradients_correct<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<(T, WeightStore<T>, usize)> {
        self.check_labels(labels)?;
        let (_, cache) = self.forward_with_cache(batch, training, rng)?;
        let (loss, d_logits, correct) = self.loss_grad(&cache, labels)?;
        let top = self.layers.len() - 2;
        let (grads, _) = self.backward(&cache, top, d_logits, None, true)?;
        let mut store = WeightStore::new();
        for (name, g) in self.weights.names.iter().zip(grads) {
            let g = g.ok_or_else(|| Error::Internal(format!("no gradient for {name}")))?;
            store.push(name.clone(), g);
        }
        Ok((loss, store, correct))
    }

    /// Mean cross-entropy of a batch without touching any state.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<T> {
        self.check_labels(labels)?;
        let (_, cache) = self.forward_with_cache(batch, training, rng)?;
        Ok(self.loss_grad(&cache, labels)?.0)
    }

    /// One Adam step on the batch; returns the mean loss before the update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        adam: &AdamConfig,
        rng: &mut R,
    ) -> Result<T> {
        Ok(self.train_step_counted(batch, labels, adam, rng)?.0)
    }

    pub(crate) fn train_step_counted<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        adam: &AdamConfig,
        rng: &mut R,
    ) -> Result<(T, usize)> {
        let (loss, grads, correct) = self.loss_gradients_correct(batch, labels, true, rng)?;
        for ((param, state), g) in self
            .weights
            .tensors
            .iter_mut()
            .zip(self.adam.iter_mut())
            .zip(grads.tensors())
        {
            adam_update(param, g, state, adam)?;
        }
        Ok((loss, correct))
    }

    /// Activations `[C, h, w]` of `layer` for one input, the logits, and
    /// optionally `d logit[class] / d activations` (class `None` = argmax).
    pub(crate) fn layer_activation(
        &self,
        input: &Tensor<T>,
        layer: &str,
        gradient_for: Option<Option<usize>>,
    ) -> Result<LayerActivation<T>> {
        let idx = self
            .layer_index(layer)
            .ok_or_else(|| Error::Request(format!("no layer named '{layer}'")))?;
        let flatten = self
            .layers
            .iter()
            .position(|l| l.kind == LayerKind::Flatten)
            .unwrap_or(self.layers.len());
        if idx >= flatten || !matches!(self.layers[idx].kind, LayerKind::Conv { .. } | LayerKind::Pool) {
            return Err(Error::Request(format!(
                "layer '{layer}' is not a conv or pool layer before flatten"
            )));
        }
        if input.shape() != self.input_shape {
            return Err(Error::Dimension(format!(
                "expected an input of {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let batch = input.clone().reshape(batch_shape(1, &self.input_shape))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = self.forward_with_cache(&batch, false, &mut rng)?;
        let activations = cache.outputs[idx].outer_tensor(0);
        let logits = cache.logits().outer_tensor(0);
        let grad = match gradient_for {
            None => None,
            Some(target) => {
                let k = self.num_classes();
                let class = target.unwrap_or_else(|| logits.argmax());
                if class >= k {
                    return Err(Error::Request(format!("class {class} outside 0..{k}")));
                }
                let mut onehot = Tensor::zeros(vec![1, k]);
                onehot.data_mut()[class] = T::one();
                let top = self.layers.len() - 2;
                let (_, g) = self.backward(&cache, top, onehot, Some(idx), false)?;
                Some((class, g.outer_tensor(0)))
            }
        };
        Ok((activations, logits, grad))
    }
}

type ParamShapes = Vec<(String, Vec<usize>, Vec<usize>)>;

fn infer_shapes(input: [usize; 3], layers: &[LayerSpec]) -> Result<(Vec<Vec<usize>>, ParamShapes)> {
    if input.contains(&0) {
        return Err(Error::Dimension(format!("input shape {input:?} has a zero dimension")));
    }
    if layers.len() < 2 || layers.last().map(|l| &l.kind) != Some(&LayerKind::Softmax) {
        return Err(Error::Input("a graph must end with a softmax layer".into()));
    }
    let mut seen = HashSet::new();
    let mut shapes = Vec::with_capacity(layers.len());
    let mut params = Vec::new();
    let mut cur: Vec<usize> = input.to_vec();
    for (i, l) in layers.iter().enumerate() {
        if l.name.is_empty() || !seen.insert(l.name.as_str()) {
            return Err(Error::Input(format!("layer name '{}' is empty or repeated", l.name)));
        }
        let bad = |why: &str| Error::Dimension(format!("layer '{}' ({why}) cannot take {cur:?}", l.name));
        cur = match l.kind {
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                let &[c, h, w] = cur.as_slice() else {
                    return Err(bad("conv needs [C,H,W]"));
                };
                let geo = ConvGeometry::new([c, h, w], [filters, c, kernel, kernel], stride, padding)?;
                params.push((l.name.clone(), vec![filters, c, kernel, kernel], vec![filters]));
                vec![filters, geo.out_h, geo.out_w]
            }
            LayerKind::Pool => match cur.as_slice() {
                &[c, h, w] if h % 2 == 0 && w % 2 == 0 => vec![c, h / 2, w / 2],
                _ => return Err(bad("2x2 pool needs even [C,H,W]")),
            },
            LayerKind::Relu => cur.clone(),
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Input(format!("dropout rate {rate} outside [0, 1)")));
                }
                cur.clone()
            }
            LayerKind::Flatten => vec![cur.iter().product()],
            LayerKind::Dense { units, .. } => {
                let &[n] = cur.as_slice() else {
                    return Err(bad("dense needs a flat vector"));
                };
                if units == 0 {
                    return Err(Error::Input(format!("layer '{}' has zero units", l.name)));
                }
                params.push((l.name.clone(), vec![units, n], vec![units]));
                vec![units]
            }
            LayerKind::Softmax => {
                if i + 1 != layers.len() || cur.len() != 1 {
                    return Err(bad("softmax must be last and follow a flat vector"));
                }
                cur.clone()
            }
        };
        shapes.push(cur.clone());
    }
    Ok((shapes, params))
}
