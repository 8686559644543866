//! One directional gated PixelCNN over block label matrices.
//!
//! Every gated layer runs two stacks. The vertical stack sees only rows
//! strictly above the current one, while the horizontal stack sees the
//! current row to the left and receives the vertical features through a 1x1
//! link. The first layer uses type-A masks so that no position ever sees its
//! own input; later layers use type B. A two-layer 1x1 head with a rectifier
//! maps the final horizontal features to per-block class logits.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blm::{Blm, Cell, ClassId};
use crate::error::{Error, Result};
use crate::nn::{gate_backward_planes, gate_planes, softmax, softmax_xent, Grid, MaskType, MaskedKernel, Pointwise, Stack, Tensor};
use crate::scalar::Scalar;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Gated layers including the type-A first layer.
    pub num_layers: usize,
    pub features: usize,
    pub first_kernel: usize,
    pub hidden_kernel: usize,
    pub head_channels: usize,
}

impl ModelConfig {
    /// Defaults cover the full causal context of an 8x8 grid.
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            num_layers: 6,
            features: 32,
            first_kernel: 7,
            hidden_kernel: 3,
            head_channels: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1");
        }
        if self.features == 0 || self.head_channels == 0 {
            return bad("features and head_channels must be at least 1");
        }
        if self.first_kernel % 2 == 0 || self.hidden_kernel % 2 == 0 {
            return bad("kernel sizes must be odd");
        }
        if self.first_kernel < 3 {
            return bad("first_kernel must be at least 3 so the first layer sees any context");
        }
        Ok(())
    }
}

/// Probability vector over the class vocabulary for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDistribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> BlockDistribution<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::LengthMismatch("distribution has no classes".into()));
        }
        let sum: T = probs.iter().copied().sum();
        if probs.iter().any(|p| !(*p >= T::zero())) || (sum - T::one()).abs() > T::of(1e-9) {
            return Err(Error::LengthMismatch(format!("not a probability vector (sum {sum})")));
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_softmax(probs: Vec<T>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, class: ClassId) -> T {
        self.probs[class.0]
    }

    /// Most probable class; ties go to the smallest id.
    pub fn argmax(&self) -> ClassId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        ClassId(best)
    }

    /// Classes by decreasing probability, ties by increasing id.
    pub fn ranked(&self) -> Vec<ClassId> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| {
            self.probs[b]
                .partial_cmp(&self.probs[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.into_iter().map(ClassId).collect()
    }

    pub fn in_top_n(&self, class: ClassId, n: usize) -> bool {
        self.ranked().iter().take(n).any(|&c| c == class)
    }
}

/// Result of filling the Unknown cells of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Infill<T> {
    pub filled: Blm,
    /// Recorded distribution for every originally Unknown cell.
    pub dists: BTreeMap<(usize, usize), BlockDistribution<T>>,
}

/// One gated layer with its vertical and horizontal stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedLayer<T> {
    pub vertical: MaskedKernel<T>,
    pub horizontal: MaskedKernel<T>,
    pub vert_to_horiz: Pointwise<T>,
    pub horiz_residual: Pointwise<T>,
    pub layer_index: usize,
}

impl<T: Scalar> GatedLayer<T> {
    fn new(layer_index: usize, in_channels: usize, features: usize, kernel: usize) -> Result<Self> {
        let mask = if layer_index == 0 { MaskType::A } else { MaskType::B };
        Ok(Self {
            vertical: MaskedKernel::new(Stack::Vertical, mask, 2 * features, in_channels, kernel)?,
            horizontal: MaskedKernel::new(Stack::Horizontal, mask, 2 * features, in_channels, kernel)?,
            vert_to_horiz: Pointwise::new(2 * features, 2 * features, false),
            horiz_residual: Pointwise::new(features, features, false),
            layer_index,
        })
    }

    fn features(&self) -> usize {
        self.horiz_residual.out_channels()
    }

    /// The identity skip exists once the horizontal input already has `F` channels.
    fn has_skip(&self) -> bool {
        self.layer_index > 0
    }

    fn zeros_like(&self) -> Self {
        Self {
            vertical: self.vertical.zeros_like(),
            horizontal: self.horizontal.zeros_like(),
            vert_to_horiz: self.vert_to_horiz.zeros_like(),
            horiz_residual: self.horiz_residual.zeros_like(),
            layer_index: self.layer_index,
        }
    }

    fn forward(&self, v_in: &[T], h_in: &[T], grid: Grid) -> LayerCache<T> {
        let n = grid.plane();
        let f = self.features();
        let mut v_pre = vec![T::zero(); 2 * f * n];
        self.vertical.forward_planes(v_in, grid, &mut v_pre);
        let mut v_out = vec![T::zero(); f * n];
        gate_planes(&v_pre, n, &mut v_out);

        let mut h_pre = vec![T::zero(); 2 * f * n];
        self.horizontal.forward_planes(h_in, grid, &mut h_pre);
        self.vert_to_horiz.forward_planes(&v_pre, n, &mut h_pre, true);
        let mut h_gate = vec![T::zero(); f * n];
        gate_planes(&h_pre, n, &mut h_gate);

        let mut h_out = if self.has_skip() { h_in.to_vec() } else { vec![T::zero(); f * n] };
        self.horiz_residual.forward_planes(&h_gate, n, &mut h_out, true);
        LayerCache {
            v_pre,
            v_out,
            h_pre,
            h_gate,
            h_out,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        v_in: &[T],
        h_in: &[T],
        grid: Grid,
        cache: &LayerCache<T>,
        grad_v_out: Option<&[T]>,
        grad_h_out: &[T],
        grads: &mut GatedLayer<T>,
        grad_v_in: Option<&mut [T]>,
        grad_h_in: Option<&mut [T]>,
    ) {
        let n = grid.plane();
        let f = self.features();
        let mut grad_h_gate = vec![T::zero(); f * n];
        self.horiz_residual
            .backward_planes(&cache.h_gate, n, grad_h_out, &mut grads.horiz_residual, Some(&mut grad_h_gate));
        let mut grad_h_in = grad_h_in;
        if self.has_skip() {
            if let Some(g) = grad_h_in.as_deref_mut() {
                for (a, &b) in g.iter_mut().zip(grad_h_out) {
                    *a += b;
                }
            }
        }
        let mut grad_h_pre = vec![T::zero(); 2 * f * n];
        gate_backward_planes(&cache.h_pre, &grad_h_gate, &mut grad_h_pre);
        self.horizontal
            .backward_planes(h_in, grid, &grad_h_pre, &mut grads.horizontal, grad_h_in);

        let mut grad_v_pre = vec![T::zero(); 2 * f * n];
        self.vert_to_horiz
            .backward_planes(&cache.v_pre, n, &grad_h_pre, &mut grads.vert_to_horiz, Some(&mut grad_v_pre));
        if let Some(gv) = grad_v_out {
            gate_backward_planes(&cache.v_pre, gv, &mut grad_v_pre);
        }
        self.vertical
            .backward_planes(v_in, grid, &grad_v_pre, &mut grads.vertical, grad_v_in);
    }
}

struct LayerCache<T> {
    v_pre: Vec<T>,
    v_out: Vec<T>,
    h_pre: Vec<T>,
    h_gate: Vec<T>,
    h_out: Vec<T>,
}

struct ForwardCache<T> {
    grid: Grid,
    input: Vec<T>,
    layers: Vec<LayerCache<T>>,
    head_pre: Vec<T>,
    head_act: Vec<T>,
    logits: Vec<T>,
}

/// All weights of one directional model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layers: Vec<GatedLayer<T>>,
    head_hidden: Pointwise<T>,
    head_out: Pointwise<T>,
}

/// One-hot `[num_classes, rows, cols]` encoding; Unknown cells are all zero.
pub fn encode_input<T: Scalar>(blm: &Blm, num_classes: usize) -> Result<Tensor<T>> {
    if blm.num_classes() != num_classes {
        return Err(Error::ClassCountMismatch {
            expected: num_classes,
            found: blm.num_classes(),
        });
    }
    let mut data = vec![T::zero(); num_classes * blm.len()];
    encode_into(blm, blm.rows(), &mut data, 0, 1);
    Tensor::from_vec(&[num_classes, blm.rows(), blm.cols()], data)
}

/// Writes the first `rows` rows of `blm` as item `slot` of a batch of `batch`.
fn encode_into<T: Scalar>(blm: &Blm, rows: usize, data: &mut [T], slot: usize, batch: usize) {
    let area = rows * blm.cols();
    let plane = batch * area;
    for (i, cell) in blm.cells()[..area].iter().enumerate() {
        if let Cell::Known(c) = cell {
            data[c.0 * plane + slot * area + i] = T::one();
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Zero-initialized parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let (cin, k) = if l == 0 {
                (config.num_classes, config.first_kernel)
            } else {
                (config.features, config.hidden_kernel)
            };
            layers.push(GatedLayer::new(l, cin, config.features, k)?);
        }
        Ok(Self {
            config,
            layers,
            head_hidden: Pointwise::new(config.head_channels, config.features, true),
            head_out: Pointwise::new(config.num_classes, config.head_channels, true),
        })
    }

    /// Random initialization: weights ~ N(0, 1/fan_in) over unmasked taps,
    /// biases ~ U(-0.1, 0.1).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |t: &mut Tensor<T>, fan_in: usize, rng: &mut ChaCha8Rng| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for w in t.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = T::of(z * scale);
            }
        };
        let uniform = |t: &mut Tensor<T>, rng: &mut ChaCha8Rng| {
            for b in t.data_mut() {
                *b = T::of(rng.gen_range(-0.1..0.1));
            }
        };
        for layer in &mut params.layers {
            for kernel in [&mut layer.vertical, &mut layer.horizontal] {
                let fan_in = kernel.fan_in();
                normal(kernel.weights_mut(), fan_in, &mut rng);
                kernel.enforce_mask();
                uniform(kernel.bias_mut(), &mut rng);
            }
            for pw in [&mut layer.vert_to_horiz, &mut layer.horiz_residual] {
                let fan_in = pw.in_channels();
                normal(pw.weight_mut(), fan_in, &mut rng);
            }
        }
        for pw in [&mut params.head_hidden, &mut params.head_out] {
            let fan_in = pw.in_channels();
            normal(pw.weight_mut(), fan_in, &mut rng);
            if let Some(b) = pw.bias_mut() {
                uniform(b, &mut rng);
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn layers(&self) -> &[GatedLayer<T>] {
        &self.layers
    }

    pub fn first_layer(&self) -> &GatedLayer<T> {
        &self.layers[0]
    }

    pub fn hidden_layers(&self) -> &[GatedLayer<T>] {
        &self.layers[1..]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            layers: self.layers.iter().map(GatedLayer::zeros_like).collect(),
            head_hidden: self.head_hidden.zeros_like(),
            head_out: self.head_out.zeros_like(),
        }
    }

    /// Stable names of all tensors, in [`ModelParams::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            for part in [
                "vertical.weight",
                "vertical.bias",
                "horizontal.weight",
                "horizontal.bias",
                "vert_to_horiz.weight",
                "horiz_residual.weight",
            ] {
                names.push(format!("layer{l}.{part}"));
            }
        }
        for part in ["head.hidden.weight", "head.hidden.bias", "head.out.weight", "head.out.bias"] {
            names.push(part.to_string());
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.vertical.weights());
            out.push(layer.vertical.bias());
            out.push(layer.horizontal.weights());
            out.push(layer.horizontal.bias());
            out.push(layer.vert_to_horiz.weight());
            out.push(layer.horiz_residual.weight());
        }
        out.push(self.head_hidden.weight());
        out.push(self.head_hidden.bias().expect("head has bias"));
        out.push(self.head_out.weight());
        out.push(self.head_out.bias().expect("head has bias"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            let GatedLayer {
                vertical,
                horizontal,
                vert_to_horiz,
                horiz_residual,
                ..
            } = layer;
            let (vw, vb) = vertical.parts_mut();
            out.push(vw);
            out.push(vb);
            let (hw, hb) = horizontal.parts_mut();
            out.push(hw);
            out.push(hb);
            out.push(vert_to_horiz.weight_mut());
            out.push(horiz_residual.weight_mut());
        }
        let (w, b) = self.head_hidden.parts_mut();
        out.push(w);
        out.push(b);
        let (w, b) = self.head_out.parts_mut();
        out.push(w);
        out.push(b);
        out
    }

    /// Rebuilds a model from named tensors, inferring the configuration from
    /// their shapes.
    pub fn from_named_tensors(tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate tensor name {name:?}")));
            }
        }
        let shape_of = |map: &BTreeMap<String, Tensor<T>>, name: &str| -> Result<Vec<usize>> {
            map.get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
        };
        let num_layers = (0..).take_while(|l| map.contains_key(&format!("layer{l}.vertical.weight"))).count();
        if num_layers == 0 {
            return Err(Error::Format("checkpoint has no gated layers".into()));
        }
        let v0 = shape_of(&map, "layer0.vertical.weight")?;
        let res = shape_of(&map, "layer0.horiz_residual.weight")?;
        let head = shape_of(&map, "head.hidden.weight")?;
        if v0.len() != 4 || res.len() != 2 || head.len() != 2 {
            return Err(Error::ShapeMismatch("unexpected tensor rank in checkpoint".into()));
        }
        let hidden_kernel = if num_layers > 1 {
            let v1 = shape_of(&map, "layer1.vertical.weight")?;
            *v1.get(3).ok_or_else(|| Error::ShapeMismatch("layer1 kernel rank".into()))?
        } else {
            3
        };
        let config = ModelConfig {
            num_classes: v0[1],
            num_layers,
            features: res[0],
            first_kernel: v0[3],
            hidden_kernel,
            head_channels: head[0],
        };
        config.validate().map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let mut params = Self::zeros(config)?;
        let names = params.tensor_names();
        if map.len() != names.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for the inferred architecture, found {}",
                names.len(),
                map.len()
            )));
        }
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        for layer in &params.layers {
            for k in [&layer.vertical, &layer.horizontal] {
                MaskedKernel::from_parts(k.stack(), k.mask_type(), k.weights().clone(), k.bias().clone())
                    .map_err(|e| Error::Format(e.to_string()))?;
            }
        }
        Ok(params)
    }

    /// Total number of scalar parameters, masked taps included.
    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                self.num_values(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let len = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn enforce_masks(&mut self) {
        for layer in &mut self.layers {
            layer.vertical.enforce_mask();
            layer.horizontal.enforce_mask();
        }
    }

    fn forward_planes(&self, input: Vec<T>, grid: Grid) -> ForwardCache<T> {
        let n = grid.plane();
        let mut caches: Vec<LayerCache<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let cache = match caches.last() {
                None => layer.forward(&input, &input, grid),
                Some(prev) => layer.forward(&prev.v_out, &prev.h_out, grid),
            };
            caches.push(cache);
        }
        let last = &caches.last().expect("at least one layer").h_out;
        let mut head_pre = vec![T::zero(); self.config.head_channels * n];
        self.head_hidden.forward_planes(last, n, &mut head_pre, false);
        let head_act: Vec<T> = head_pre.iter().map(|&x| x.max(T::zero())).collect();
        let mut logits = vec![T::zero(); self.config.num_classes * n];
        self.head_out.forward_planes(&head_act, n, &mut logits, false);
        ForwardCache {
            grid,
            input,
            layers: caches,
            head_pre,
            head_act,
            logits,
        }
    }

    /// Gradients of a loss whose logit gradient is `grad_logits`.
    fn backward_planes(&self, cache: &ForwardCache<T>, grad_logits: &[T], want_input: bool) -> (ModelParams<T>, Option<Vec<T>>) {
        let grid = cache.grid;
        let n = grid.plane();
        let f = self.config.features;
        let mut grads = self.zeros_like();
        let mut grad_act = vec![T::zero(); self.config.head_channels * n];
        self.head_out
            .backward_planes(&cache.head_act, n, grad_logits, &mut grads.head_out, Some(&mut grad_act));
        for (g, &z) in grad_act.iter_mut().zip(&cache.head_pre) {
            if z <= T::zero() {
                *g = T::zero();
            }
        }
        let last = &cache.layers.last().expect("layers").h_out;
        let mut grad_h = vec![T::zero(); f * n];
        self.head_hidden
            .backward_planes(last, n, &grad_act, &mut grads.head_hidden, Some(&mut grad_h));
        let mut grad_v: Option<Vec<T>> = None;
        let mut grad_input = None;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (v_in, h_in): (&[T], &[T]) = if l == 0 {
                (&cache.input, &cache.input)
            } else {
                (&cache.layers[l - 1].v_out, &cache.layers[l - 1].h_out)
            };
            if l == 0 {
                if want_input {
                    let mut gv = vec![T::zero(); cache.input.len()];
                    let mut gh = vec![T::zero(); cache.input.len()];
                    layer.backward(
                        v_in,
                        h_in,
                        grid,
                        &cache.layers[0],
                        grad_v.as_deref(),
                        &grad_h,
                        &mut grads.layers[0],
                        Some(&mut gv),
                        Some(&mut gh),
                    );
                    gv.iter_mut().zip(&gh).for_each(|(a, &b)| *a += b);
                    grad_input = Some(gv);
                } else {
                    layer.backward(v_in, h_in, grid, &cache.layers[0], grad_v.as_deref(), &grad_h, &mut grads.layers[0], None, None);
                }
            } else {
                let mut gv_in = vec![T::zero(); f * n];
                let mut gh_in = vec![T::zero(); f * n];
                layer.backward(
                    v_in,
                    h_in,
                    grid,
                    &cache.layers[l],
                    grad_v.as_deref(),
                    &grad_h,
                    &mut grads.layers[l],
                    Some(&mut gv_in),
                    Some(&mut gh_in),
                );
                grad_v = Some(gv_in);
                grad_h = gh_in;
            }
        }
        (grads, grad_input)
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<Grid> {
        match input.shape() {
            &[c, rows, cols] if c == self.config.num_classes && rows > 0 && cols > 0 => Ok(Grid::new(1, rows, cols)),
            other => Err(Error::ShapeMismatch(format!(
                "model expects [{}, rows, cols] input, got {other:?}",
                self.config.num_classes
            ))),
        }
    }

    pub fn encode_input(&self, blm: &Blm) -> Result<Tensor<T>> {
        encode_input(blm, self.config.num_classes)
    }

    /// Logits `[num_classes, rows, cols]`; position `(r, c)` depends only on
    /// input positions strictly earlier in raster order.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let grid = self.check_input(input)?;
        let cache = self.forward_planes(input.data().to_vec(), grid);
        Tensor::from_vec(input.shape(), cache.logits)
    }

    /// Gradient of `sum_k weights[k] * logit_k(target)` with respect to the input.
    pub fn input_gradient(&self, input: &Tensor<T>, target: (usize, usize), weights: &[T]) -> Result<Tensor<T>> {
        let grid = self.check_input(input)?;
        if target.0 >= grid.rows || target.1 >= grid.cols {
            return Err(Error::OutOfBounds(format!("target {target:?}")));
        }
        if weights.len() != self.config.num_classes {
            return Err(Error::LengthMismatch(format!(
                "{} logit weights for {} classes",
                weights.len(),
                self.config.num_classes
            )));
        }
        let cache = self.forward_planes(input.data().to_vec(), grid);
        let n = grid.plane();
        let pos = target.0 * grid.cols + target.1;
        let mut grad_logits = vec![T::zero(); cache.logits.len()];
        for (k, &w) in weights.iter().enumerate() {
            grad_logits[k * n + pos] = w;
        }
        let (_, gi) = self.backward_planes(&cache, &grad_logits, true);
        Tensor::from_vec(input.shape(), gi.expect("input gradient requested"))
    }

    fn check_blm(&self, blm: &Blm) -> Result<()> {
        if blm.num_classes() != self.config.num_classes {
            return Err(Error::ClassCountMismatch {
                expected: self.config.num_classes,
                found: blm.num_classes(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[&Blm]) -> Result<(usize, usize)> {
        let first = batch.first().ok_or(Error::EmptyDataset)?;
        let shape = (first.rows(), first.cols());
        for b in batch {
            self.check_blm(b)?;
            if (b.rows(), b.cols()) != shape {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes {}x{} and {}x{} grids",
                    shape.0,
                    shape.1,
                    b.rows(),
                    b.cols()
                )));
            }
        }
        Ok(shape)
    }

    fn forward_batch(&self, batch: &[&Blm], rows: usize) -> ForwardCache<T> {
        let cols = batch[0].cols();
        let grid = Grid::new(batch.len(), rows, cols);
        let mut input = vec![T::zero(); self.config.num_classes * grid.plane()];
        for (slot, b) in batch.iter().enumerate() {
            encode_into(b, rows, &mut input, slot, batch.len());
        }
        self.forward_planes(input, grid)
    }

    /// Per-position `-ln p(true class)` of `targets` when the model reads
    /// `inputs`, with the gradient of their mean if requested.
    fn batch_nll(&self, inputs: &[&Blm], targets: &[&Blm], with_grad: bool) -> Result<(Vec<T>, Option<ModelParams<T>>)> {
        let (rows, cols) = self.check_batch(targets)?;
        if targets.iter().any(|b| !b.is_complete()) {
            return Err(Error::UnknownCellPresent);
        }
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch("one input grid per target grid".into()));
        }
        if self.check_batch(inputs)? != (rows, cols) {
            return Err(Error::ShapeMismatch("inputs and targets differ in shape".into()));
        }
        let cache = self.forward_batch(inputs, rows);
        let n = cache.grid.plane();
        let area = n / targets.len();
        let c = self.config.num_classes;
        let mut losses = Vec::with_capacity(n);
        let mut grad_logits = if with_grad { vec![T::zero(); c * n] } else { Vec::new() };
        let scale = T::one() / T::of(n as f64);
        let mut column = vec![T::zero(); c];
        for p in 0..n {
            for k in 0..c {
                column[k] = cache.logits[k * n + p];
            }
            let target = targets[p / area].cells()[p % area].class().expect("complete").0;
            let (loss, probs) = softmax_xent(&column, target);
            losses.push(loss);
            if with_grad {
                for k in 0..c {
                    let indicator = if k == target { T::one() } else { T::zero() };
                    grad_logits[k * n + p] = (probs[k] - indicator) * scale;
                }
            }
        }
        let grads = with_grad.then(|| self.backward_planes(&cache, &grad_logits, false).0);
        Ok((losses, grads))
    }

    /// Mean NLL per block (nats) of complete `targets` when the model reads
    /// `inputs`, which may contain Unknown cells, and its gradient.
    pub fn occluded_loss_and_grad(&self, inputs: &[&Blm], targets: &[&Blm]) -> Result<(T, ModelParams<T>)> {
        let (losses, grads) = self.batch_nll(inputs, targets, true)?;
        let mean = losses.iter().copied().sum::<T>() / T::of(losses.len() as f64);
        Ok((mean, grads.expect("gradient requested")))
    }

    /// Mean NLL per block (nats) over a batch and its gradient.
    pub fn loss_and_grad(&self, batch: &[&Blm]) -> Result<(T, ModelParams<T>)> {
        let (losses, grads) = self.batch_nll(batch, batch, true)?;
        let mean = losses.iter().copied().sum::<T>() / T::of(losses.len() as f64);
        Ok((mean, grads.expect("gradient requested")))
    }

    /// Mean NLL per block (nats) over a batch.
    pub fn loss(&self, batch: &[&Blm]) -> Result<T> {
        let (losses, _) = self.batch_nll(batch, batch, false)?;
        Ok(losses.iter().copied().sum::<T>() / T::of(losses.len() as f64))
    }

    /// `ln p(x)` as the sum of the raster-order conditionals.
    pub fn log_likelihood(&self, blm: &Blm) -> Result<T> {
        let (losses, _) = self.batch_nll(&[blm], &[blm], false)?;
        Ok(-losses.iter().copied().sum::<T>())
    }

    /// `ln p(x)` for many grids at once.
    pub fn log_likelihoods(&self, blms: &[Blm]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(blms.len());
        for chunk in blms.chunks(256) {
            let refs: Vec<&Blm> = chunk.iter().collect();
            let (losses, _) = self.batch_nll(&refs, &refs, false)?;
            let area = losses.len() / refs.len();
            out.extend(losses.chunks(area).map(|l| -l.iter().copied().sum::<T>()));
        }
        Ok(out)
    }

    /// Mean over all blocks of `-log2 p(true class | earlier blocks)`.
    pub fn nll_bits_per_dim(&self, dataset: &[Blm]) -> Result<T> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut per_image = Vec::with_capacity(dataset.len());
        for chunk in dataset.chunks(32) {
            let refs: Vec<&Blm> = chunk.iter().collect();
            let (losses, _) = self.batch_nll(&refs, &refs, false)?;
            let area = losses.len() / refs.len();
            per_image.extend(losses.chunks(area).map(|l| l.iter().copied().sum::<T>() / T::of(area as f64)));
        }
        let mean_nats = per_image.iter().copied().sum::<T>() / T::of(per_image.len() as f64);
        Ok(mean_nats / T::of(std::f64::consts::LN_2))
    }

    /// Conditional distributions at every position given the grid as
    /// context, in raster order.
    pub fn conditionals(&self, blm: &Blm) -> Result<Vec<BlockDistribution<T>>> {
        self.check_blm(blm)?;
        let cache = self.forward_batch(&[blm], blm.rows());
        let n = cache.grid.plane();
        let c = self.config.num_classes;
        Ok((0..n)
            .map(|p| {
                let column: Vec<T> = (0..c).map(|k| cache.logits[k * n + p]).collect();
                BlockDistribution::from_softmax(softmax(&column))
            })
            .collect())
    }

    /// Distribution at `target` given the current grid. Only rows up to the
    /// target row are evaluated, which causality makes sufficient.
    pub fn query(&self, grid: &Blm, target: (usize, usize)) -> Result<BlockDistribution<T>> {
        Ok(self.query_batch(&[grid], &[target])?.pop().expect("one query"))
    }

    /// Batched [`ModelParams::query`] over equally shaped grids.
    pub fn query_batch(&self, grids: &[&Blm], targets: &[(usize, usize)]) -> Result<Vec<BlockDistribution<T>>> {
        let (rows, cols) = self.check_batch(grids)?;
        if targets.len() != grids.len() {
            return Err(Error::LengthMismatch("one target per grid".into()));
        }
        if let Some(t) = targets.iter().find(|t| t.0 >= rows || t.1 >= cols) {
            return Err(Error::OutOfBounds(format!("target {t:?} outside {rows}x{cols} grid")));
        }
        let depth = targets.iter().map(|t| t.0).max().unwrap_or(0) + 1;
        let cache = self.forward_batch(grids, depth);
        let n = cache.grid.plane();
        let area = depth * cols;
        let c = self.config.num_classes;
        Ok(targets
            .iter()
            .enumerate()
            .map(|(slot, t)| {
                let p = slot * area + t.0 * cols + t.1;
                let column: Vec<T> = (0..c).map(|k| cache.logits[k * n + p]).collect();
                BlockDistribution::from_softmax(softmax(&column))
            })
            .collect())
    }

    /// Fills Unknown cells in raster order, committing the argmax of each
    /// recorded distribution before moving on.
    pub fn infill_directional(&self, blm: &Blm) -> Result<Infill<T>> {
        Ok(self.infill_directional_batch(std::slice::from_ref(blm))?.pop().expect("one grid"))
    }

    /// [`ModelParams::infill_directional`] over equally shaped grids, run in
    /// lockstep so each step is one batched query.
    pub fn infill_directional_batch(&self, blms: &[Blm]) -> Result<Vec<Infill<T>>> {
        if blms.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&Blm> = blms.iter().collect();
        self.check_batch(&refs)?;
        let coords: Vec<Vec<(usize, usize)>> = blms.iter().map(|b| b.unknown_coords()).collect();
        let mut out: Vec<Infill<T>> = blms
            .iter()
            .map(|b| Infill {
                filled: b.clone(),
                dists: BTreeMap::new(),
            })
            .collect();
        let steps = coords.iter().map(Vec::len).max().unwrap_or(0);
        for step in 0..steps {
            let active: Vec<usize> = (0..blms.len()).filter(|&i| step < coords[i].len()).collect();
            let grids: Vec<&Blm> = active.iter().map(|&i| &out[i].filled).collect();
            let targets: Vec<(usize, usize)> = active.iter().map(|&i| coords[i][step]).collect();
            let dists = self.query_batch(&grids, &targets)?;
            for ((&i, t), dist) in active.iter().zip(targets).zip(dists) {
                out[i].filled.set(t.0, t.1, Cell::Known(dist.argmax()))?;
                out[i].dists.insert(t, dist);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blm::MaskRegion;

    fn small(num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            num_layers: 3,
            features: 4,
            first_kernel: 3,
            hidden_kernel: 3,
            head_channels: 6,
        }
    }

    fn grid(rows: usize, cols: usize, nc: usize, salt: usize) -> Blm {
        let classes: Vec<usize> = (0..rows * cols).map(|i| (i * 7 + salt * 3 + i / cols) % nc).collect();
        Blm::from_classes(rows, cols, nc, &classes).unwrap()
    }

    fn logits_at(logits: &Tensor<f64>, nc: usize, area: usize, p: usize) -> Vec<u64> {
        (0..nc).map(|k| logits.data()[k * area + p].to_bits()).collect()
    }

    #[test]
    fn encoding_examples() {
        let known = Blm::from_classes(1, 1, 4, &[2]).unwrap();
        assert_eq!(encode_input::<f64>(&known, 4).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
        let unknown = Blm::unknown(1, 1, 4).unwrap();
        assert_eq!(encode_input::<f64>(&unknown, 4).unwrap().data(), &[0.0; 4]);
        assert!(matches!(encode_input::<f64>(&known, 5), Err(Error::ClassCountMismatch { .. })));
        let masked = grid(3, 4, 4, 1).apply_mask(&MaskRegion::new(1, 1, 2, 2)).unwrap();
        let t = encode_input::<f64>(&masked, 4).unwrap();
        for p in 0..12 {
            let s: f64 = (0..4).map(|k| t.data()[k * 12 + p]).sum();
            assert_eq!(s, if masked.cells()[p].is_known() { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn later_inputs_never_reach_earlier_logits() {
        let (rows, cols, nc) = (5, 5, 3);
        let area = rows * cols;
        let model = ModelParams::<f64>::init(small(nc), 11).unwrap();
        let base = grid(rows, cols, nc, 0);
        let base_input = encode_input::<f64>(&base, nc).unwrap();
        let reference = model.forward(&base_input).unwrap();
        for q in 0..area {
            let mut variants = Vec::new();
            for cell in (0..nc).map(|c| Cell::Known(ClassId(c))).chain([Cell::Unknown]) {
                let mut b = base.clone();
                b.set(q / cols, q % cols, cell).unwrap();
                variants.push(encode_input::<f64>(&b, nc).unwrap());
            }
            let mut noisy = base_input.clone();
            for k in 0..nc {
                noisy.data_mut()[k * area + q] += 0.37 * (k as f64 + 1.0);
            }
            variants.push(noisy);
            for input in variants {
                let out = model.forward(&input).unwrap();
                for p in 0..=q {
                    assert_eq!(logits_at(&out, nc, area, p), logits_at(&reference, nc, area, p), "q={q} p={p}");
                }
            }
        }
    }

    #[test]
    fn first_logits_are_input_independent() {
        let model = ModelParams::<f64>::init(small(3), 2).unwrap();
        let a = model.forward(&encode_input(&grid(4, 4, 3, 0), 3).unwrap()).unwrap();
        let b = model.forward(&encode_input(&Blm::unknown(4, 4, 3).unwrap(), 3).unwrap()).unwrap();
        assert_eq!(logits_at(&a, 3, 16, 0), logits_at(&b, 3, 16, 0));
    }

    #[test]
    fn infill_of_complete_grid_is_identity() {
        let model = ModelParams::<f64>::init(small(3), 3).unwrap();
        let g = grid(4, 4, 3, 2);
        let out = model.infill_directional(&g).unwrap();
        assert_eq!(out.filled, g);
        assert!(out.dists.is_empty());
    }

    #[test]
    fn infill_at_origin_is_unconditional() {
        let model = ModelParams::<f64>::init(small(3), 4).unwrap();
        let mut g = grid(3, 3, 3, 1);
        g.set(0, 0, Cell::Unknown).unwrap();
        let out = model.infill_directional(&g).unwrap();
        let first = model.conditionals(&Blm::unknown(3, 3, 3).unwrap()).unwrap().remove(0);
        assert_eq!(out.dists[&(0, 0)], first);
        assert_eq!(out.filled.get(0, 0), Cell::Known(first.argmax()));
    }

    #[test]
    fn infill_keeps_known_cells_and_keys_match() {
        let model = ModelParams::<f64>::init(small(4), 5).unwrap();
        let masked = grid(5, 6, 4, 3).apply_mask(&MaskRegion::new(1, 2, 3, 3)).unwrap();
        let out = model.infill_directional(&masked).unwrap();
        assert!(out.filled.is_complete());
        assert_eq!(out.dists.keys().copied().collect::<Vec<_>>(), masked.unknown_coords());
        for (p, cell) in masked.cells().iter().enumerate() {
            if cell.is_known() {
                assert_eq!(out.filled.cells()[p], *cell);
            }
        }
        assert_eq!(model.infill_directional(&masked).unwrap(), out);
    }

    #[test]
    fn truncated_query_matches_full_forward() {
        let model = ModelParams::<f64>::init(small(3), 6).unwrap();
        let g = grid(5, 4, 3, 4).apply_mask(&MaskRegion::new(2, 0, 2, 4)).unwrap();
        let full = model.conditionals(&g).unwrap();
        for p in 0..20 {
            let q = model.query(&g, (p / 4, p % 4)).unwrap();
            assert_eq!(q, full[p]);
        }
        assert!(matches!(model.query(&g, (5, 0)), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn uniform_model_scores_log2_classes() {
        // Zero weights and biases give equal logits everywhere.
        let model = ModelParams::<f64>::zeros(ModelConfig::new(6)).unwrap();
        let data = vec![grid(4, 4, 6, 0), grid(4, 4, 6, 1)];
        let bits = model.nll_bits_per_dim(&data).unwrap();
        assert!((bits - 6f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn nll_ignores_dataset_order() {
        let model = ModelParams::<f64>::init(small(3), 7).unwrap();
        let data: Vec<Blm> = (0..40).map(|s| grid(4, 4, 3, s)).collect();
        let mut reversed = data.clone();
        reversed.reverse();
        let a = model.nll_bits_per_dim(&data).unwrap();
        let b = model.nll_bits_per_dim(&reversed).unwrap();
        assert!((a - b).abs() < 1e-12);
        let per_image: f64 = data.iter().map(|g| model.nll_bits_per_dim(std::slice::from_ref(g)).unwrap()).sum::<f64>() / 40.0;
        assert!((a - per_image).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_unknown_cells() {
        let model = ModelParams::<f64>::init(small(3), 7).unwrap();
        let g = grid(3, 3, 3, 0).apply_mask(&MaskRegion::new(0, 0, 1, 1)).unwrap();
        assert!(matches!(model.nll_bits_per_dim(&[g]), Err(Error::UnknownCellPresent)));
    }

    #[test]
    fn named_tensor_round_trip() {
        let model = ModelParams::<f64>::init(small(3), 8).unwrap();
        let named: Vec<(String, Tensor<f64>)> = model
            .tensor_names()
            .into_iter()
            .zip(model.tensors().into_iter().cloned())
            .collect();
        assert_eq!(ModelParams::from_named_tensors(named.clone()).unwrap(), model);

        let mut broken = named.clone();
        let pos = broken.iter().position(|(n, _)| n == "layer0.vertical.weight").unwrap();
        let w = broken[pos].1.data_mut();
        // Last tap of the kernel lies below the centre row, which is masked.
        let last = w.len() - 1;
        w[last] = 1.0;
        assert!(matches!(ModelParams::from_named_tensors(broken), Err(Error::Format(_))));

        let mut missing = named;
        missing.pop();
        assert!(ModelParams::from_named_tensors(missing).is_err());
    }

    #[test]
    fn flat_parameters_round_trip() {
        let model = ModelParams::<f64>::init(small(3), 9).unwrap();
        let mut other = model.zeros_like();
        other.set_flat(&model.to_flat()).unwrap();
        assert_eq!(other, model);
        assert!(other.set_flat(&[0.0]).is_err());
    }

    #[test]
    fn single_precision_runs() {
        let model = ModelParams::<f32>::init(small(3), 10).unwrap();
        let g = grid(4, 4, 3, 0);
        let bits = model.nll_bits_per_dim(&[g]).unwrap();
        assert!(bits.is_finite() && bits > 0.0);
    }

    #[test]
    fn distribution_ranking_breaks_ties_by_id() {
        let d = BlockDistribution::new(vec![0.25, 0.25, 0.5]).unwrap();
        assert_eq!(d.ranked(), vec![ClassId(2), ClassId(0), ClassId(1)]);
        assert_eq!(BlockDistribution::new(vec![0.5, 0.5]).unwrap().argmax(), ClassId(0));
        assert!(BlockDistribution::new(vec![0.5, 0.6]).is_err());
    }
}
