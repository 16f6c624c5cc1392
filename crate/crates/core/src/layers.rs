//! Differentiable layers with explicit forward/backward passes.
//!
//! Layers are stateless apart from their parameters; everything a backward
//! pass needs is recorded in a [`ForwardContext`] by the matching forward.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SenaError};
use crate::rng::Rng;
use crate::tensor::{gemm_acc, transpose_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Dropout,
    Flatten,
    Dense,
    Softmax,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2x2 => "maxpool2x2",
            LayerKind::Dropout => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense => "dense",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; spatial size is preserved for odd kernels.
    Same,
    Valid,
}

/// Layer kind plus its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        padding: Padding,
    },
    Relu,
    MaxPool2x2,
    Dropout {
        rate: f32,
    },
    Flatten,
    Dense {
        inputs: usize,
        units: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool2x2 => LayerKind::MaxPool2x2,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Softmax => LayerKind::Softmax,
        }
    }

    /// Shapes of the parameter tensors, weights first.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                ..
            } => vec![vec![filters, in_channels, kernel, kernel], vec![filters]],
            LayerSpec::Dense { inputs, units } => vec![vec![inputs, units], vec![units]],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// One layer: hyperparameters, parameters, accumulated gradients and the
/// frozen flag. Frozen layers never accumulate parameter gradients.
#[derive(Clone, Debug)]
pub struct LayerNode {
    spec: LayerSpec,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
    frozen: bool,
}

impl LayerNode {
    fn parameterless(spec: LayerSpec) -> Self {
        LayerNode {
            spec,
            params: Vec::new(),
            grads: Vec::new(),
            frozen: false,
        }
    }

    /// Builds a layer from a spec and explicit parameters.
    pub fn from_parts(spec: LayerSpec, params: Vec<Tensor>, frozen: bool) -> Result<Self> {
        let expected = spec.param_shapes();
        if expected.len() != params.len()
            || expected.iter().zip(&params).any(|(s, p)| s[..] != *p.shape())
        {
            return Err(SenaError::Shape(format!(
                "{} expects parameters {:?}, got {:?}",
                spec.kind().name(),
                expected,
                params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        if let LayerSpec::Dropout { rate } = spec {
            if !(0.0..1.0).contains(&rate) {
                return Err(SenaError::InvalidArgument(format!(
                    "dropout rate {rate} outside [0, 1)"
                )));
            }
        }
        let grads = params.iter().map(Tensor::zeros_like).collect();
        Ok(LayerNode {
            spec,
            params,
            grads,
            frozen,
        })
    }

    /// 3x3-style convolution with Glorot-uniform weights and zero bias.
    pub fn conv2d(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = filters * kernel * kernel;
        let w = glorot(rng, &[filters, in_channels, kernel, kernel], fan_in, fan_out)?;
        let b = Tensor::zeros(&[filters])?;
        Self::from_parts(
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                padding,
            },
            vec![w, b],
            false,
        )
    }

    pub fn dense(inputs: usize, units: usize, rng: &mut Rng) -> Result<Self> {
        let w = glorot(rng, &[inputs, units], inputs, units)?;
        let b = Tensor::zeros(&[units])?;
        Self::from_parts(LayerSpec::Dense { inputs, units }, vec![w, b], false)
    }

    pub fn relu() -> Self {
        Self::parameterless(LayerSpec::Relu)
    }

    pub fn maxpool2x2() -> Self {
        Self::parameterless(LayerSpec::MaxPool2x2)
    }

    pub fn dropout(rate: f32) -> Result<Self> {
        Self::from_parts(LayerSpec::Dropout { rate }, Vec::new(), false)
    }

    pub fn flatten() -> Self {
        Self::parameterless(LayerSpec::Flatten)
    }

    pub fn softmax() -> Self {
        Self::parameterless(LayerSpec::Softmax)
    }

    pub fn kind(&self) -> LayerKind {
        self.spec.kind()
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Parameters paired with their gradients, for optimizers.
    pub fn params_and_grads(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.params.iter_mut().zip(self.grads.iter())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn has_params(&self) -> bool {
        !self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardContext) -> Result<Tensor> {
        let (out, cache) = match self.spec {
            LayerSpec::Conv2d { padding, .. } => {
                let out = conv2d_forward(x, &self.params[0], &self.params[1], padding)?;
                (out, Cache::Input(x.clone()))
            }
            LayerSpec::Relu => (relu_forward(x), Cache::Input(x.clone())),
            LayerSpec::MaxPool2x2 => {
                let (out, argmax) = maxpool2x2_forward(x)?;
                (
                    out,
                    Cache::Pool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerSpec::Dropout { rate } => match ctx.dropout_rng() {
                Some(rng) if rate > 0.0 => {
                    let mask = dropout_mask(x.shape(), rate, rng)?;
                    let out = dropout_forward(x, Some(&mask))?;
                    (out, Cache::Mask(Some(mask)))
                }
                _ => (x.clone(), Cache::Mask(None)),
            },
            LayerSpec::Flatten => (flatten(x)?, Cache::Shape(x.shape().to_vec())),
            LayerSpec::Dense { .. } => {
                let out = dense_forward(x, &self.params[0], &self.params[1])?;
                (out, Cache::Input(x.clone()))
            }
            LayerSpec::Softmax => {
                let out = softmax_forward(x)?;
                (out.clone(), Cache::Output(out))
            }
        };
        ctx.caches.push(cache);
        Ok(out)
    }

    /// Propagates `grad_out` through the layer, accumulating parameter
    /// gradients unless frozen. Returns the input gradient when requested.
    pub fn backward(
        &mut self,
        cache: Cache,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        match (&self.spec, cache) {
            (LayerSpec::Conv2d { padding, .. }, Cache::Input(x)) => {
                let want_params = !self.frozen;
                if !want_params && !need_input_grad {
                    return Ok(None);
                }
                let grads = conv2d_backward(
                    &x,
                    &self.params[0],
                    *padding,
                    grad_out,
                    want_params,
                    need_input_grad,
                )?;
                if let (Some(gw), Some(gb)) = (grads.weight, grads.bias) {
                    self.grads[0].add_assign(&gw)?;
                    self.grads[1].add_assign(&gb)?;
                }
                Ok(grads.input)
            }
            (LayerSpec::Dense { .. }, Cache::Input(x)) => {
                let want_params = !self.frozen;
                let grads = dense_backward(
                    &x,
                    &self.params[0],
                    grad_out,
                    want_params,
                    need_input_grad,
                )?;
                if let (Some(gw), Some(gb)) = (grads.weight, grads.bias) {
                    self.grads[0].add_assign(&gw)?;
                    self.grads[1].add_assign(&gb)?;
                }
                Ok(grads.input)
            }
            _ if !need_input_grad => Ok(None),
            (LayerSpec::Relu, Cache::Input(x)) => relu_backward(&x, grad_out).map(Some),
            (LayerSpec::MaxPool2x2, Cache::Pool { input_shape, argmax }) => {
                maxpool2x2_backward(&input_shape, &argmax, grad_out).map(Some)
            }
            (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => {
                dropout_backward(grad_out, mask.as_ref()).map(Some)
            }
            (LayerSpec::Flatten, Cache::Shape(shape)) => grad_out.reshape(&shape).map(Some),
            (LayerSpec::Softmax, Cache::Output(probs)) => {
                softmax_backward(&probs, grad_out).map(Some)
            }
            (spec, _) => Err(SenaError::State(format!(
                "cache does not belong to a {} layer",
                spec.kind().name()
            ))),
        }
    }
}

fn glorot(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    rng.uniform(shape, -limit, limit)
}

/// Whatever a layer's backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Input(Tensor),
    Output(Tensor),
    Pool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Mask(Option<Tensor>),
    Shape(Vec<usize>),
}

/// Per-pass record of layer caches plus the train/eval switch.
///
/// Dropout is active only when the context was built with
/// [`ForwardContext::training`]; its masks are drawn from the supplied rng.
#[derive(Debug)]
pub struct ForwardContext {
    dropout_rng: Option<Rng>,
    caches: Vec<Cache>,
}

impl ForwardContext {
    pub fn training(rng: Rng) -> Self {
        ForwardContext {
            dropout_rng: Some(rng),
            caches: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        ForwardContext {
            dropout_rng: None,
            caches: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    fn dropout_rng(&mut self) -> Option<&mut Rng> {
        self.dropout_rng.as_mut()
    }

    pub fn cached_layers(&self) -> usize {
        self.caches.len()
    }

    pub(crate) fn pop(&mut self) -> Option<Cache> {
        self.caches.pop()
    }
}

/// An ordered run of layers evaluated back to back.
#[derive(Clone, Debug, Default)]
pub struct LayerStack {
    layers: Vec<LayerNode>,
}

impl LayerStack {
    pub fn new(layers: Vec<LayerNode>) -> Self {
        LayerStack { layers }
    }

    pub fn layers(&self) -> &[LayerNode] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerNode] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerNode::param_count).sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for l in &mut self.layers {
            l.set_frozen(frozen);
        }
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(LayerNode::zero_grad);
    }

    /// True when some layer has parameters that are not frozen.
    pub fn has_trainable(&self) -> bool {
        self.layers.iter().any(|l| l.has_params() && !l.is_frozen())
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardContext) -> Result<Tensor> {
        self.forward_range(x, ctx, self.layers.len())
    }

    /// Runs only the first `upto` layers.
    pub fn forward_range(&self, x: &Tensor, ctx: &mut ForwardContext, upto: usize) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers[..upto] {
            cur = layer.forward(&cur, ctx)?;
        }
        Ok(cur)
    }

    /// Backward through the layers recorded in `ctx` (the last `ctx` caches
    /// correspond to the top layers that were run). Stops early once no
    /// trainable layer remains below and no input gradient is needed.
    pub fn backward(
        &mut self,
        ctx: &mut ForwardContext,
        grad_out: Tensor,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let ran = ctx.cached_layers();
        if ran == 0 || ran > self.layers.len() {
            return Err(SenaError::State(
                "backward called without a matching forward pass".into(),
            ));
        }
        let lowest_trainable = self.layers[..ran]
            .iter()
            .position(|l| l.has_params() && !l.is_frozen());
        let stop = match (need_input_grad, lowest_trainable) {
            (true, _) => 0,
            (false, Some(i)) => i,
            (false, None) => {
                while ctx.pop().is_some() {}
                return Ok(None);
            }
        };
        let mut grad = grad_out;
        for idx in (0..ran).rev() {
            let cache = ctx.pop().expect("cache count checked above");
            if idx < stop {
                continue;
            }
            let want_input = idx > stop || need_input_grad;
            match self.layers[idx].backward(cache, &grad, want_input)? {
                Some(g) => grad = g,
                None => {
                    while ctx.pop().is_some() {}
                    return Ok(None);
                }
            }
        }
        Ok(if need_input_grad { Some(grad) } else { None })
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn conv_output_dims(h: usize, w: usize, kernel: usize, padding: Padding) -> Result<(usize, usize, usize)> {
    match padding {
        Padding::Same => Ok((h, w, kernel / 2)),
        Padding::Valid => {
            if kernel > h || kernel > w {
                return Err(SenaError::Shape(format!(
                    "kernel {kernel} larger than input {h}x{w}"
                )));
            }
            Ok((h - kernel + 1, w - kernel + 1, 0))
        }
    }
}

/// Output columns `ox` whose input column `ox + kx - pad` lies inside `[0, w)`.
fn valid_cols(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(wo);
    let hi = (w + pad).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

/// Unfolds one image `[C,H,W]` into columns `[C*k*k, Ho*Wo]`.
fn im2col(
    img: &[f32],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f32],
) {
    let plane = ho * wo;
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(kx, pad, w, wo);
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo < hi {
                        let start = iy as usize * w + lo + kx - pad;
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    }
                }
            }
        }
    }
}

/// Folds columns back into an image, summing overlapping contributions.
fn col2im_add(
    cols: &[f32],
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    img: &mut [f32],
) {
    let plane = ho * wo;
    for ch in 0..c {
        let dst = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(kx, pad, w, wo);
                for oy in 0..ho {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || lo == hi {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w + lo + kx - pad..iy as usize * w + hi + kx - pad];
                    for (d, &v) in dst_row.iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn conv_shapes(x: &Tensor, w: &Tensor) -> Result<([usize; 4], [usize; 4])> {
    let xd = x.dims4()?;
    let wd = w.dims4()?;
    if xd[1] != wd[1] {
        return Err(SenaError::Shape(format!(
            "conv input has {} channels but kernel expects {}",
            xd[1], wd[1]
        )));
    }
    if wd[2] != wd[3] {
        return Err(SenaError::Shape(format!("non-square kernel {:?}", w.shape())));
    }
    Ok((xd, wd))
}

/// Stride-1 cross-correlation plus bias. `x: [N,C,H,W]`, `w: [F,C,k,k]`, `b: [F]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, padding: Padding) -> Result<Tensor> {
    let ([n, c, h, wd], [f, _, k, _]) = conv_shapes(x, w)?;
    if b.shape() != [f] {
        return Err(SenaError::Shape(format!("bias {:?} for {f} filters", b.shape())));
    }
    let (ho, wo, pad) = conv_output_dims(h, wd, k, padding)?;
    let ckk = c * k * k;
    let plane = ho * wo;
    let mut cols = vec![0.0; ckk * plane];
    let mut out = vec![0.0; n * f * plane];
    for (img, dst) in x
        .data()
        .chunks_exact(c * h * wd)
        .zip(out.chunks_exact_mut(f * plane))
    {
        im2col(img, (c, h, wd), k, pad, (ho, wo), &mut cols);
        gemm_acc(f, ckk, plane, w.data(), &cols, dst);
        for (ch, &bias) in b.data().iter().enumerate() {
            dst[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += bias);
        }
    }
    Tensor::from_vec(&[n, f, ho, wo], out)
}

/// Gradients of a layer with weight and bias. Entries are `None` when not requested.
#[derive(Debug)]
pub struct ParamGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    padding: Padding,
    grad_out: &Tensor,
    want_params: bool,
    want_input: bool,
) -> Result<ParamGrads> {
    let ([n, c, h, wd], [f, _, k, _]) = conv_shapes(x, w)?;
    let (ho, wo, pad) = conv_output_dims(h, wd, k, padding)?;
    if grad_out.shape() != [n, f, ho, wo] {
        return Err(SenaError::Shape(format!(
            "conv grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [n, f, ho, wo]
        )));
    }
    let ckk = c * k * k;
    let plane = ho * wo;
    let mut cols = vec![0.0; ckk * plane];
    let mut g_t = vec![0.0; plane * f];
    // Accumulated as [C*k*k, F]; each entry still sums over positions in order.
    let mut gw_t = vec![0.0; ckk * f];
    let mut gb = vec![0.0; f];
    let mut w_t = vec![0.0; f * ckk];
    if want_input {
        transpose_into(f, ckk, w.data(), &mut w_t);
    }
    let mut gx = if want_input {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    let mut gcols = vec![0.0; if want_input { ckk * plane } else { 0 }];
    for s in 0..n {
        let g = &grad_out.data()[s * f * plane..(s + 1) * f * plane];
        if want_params {
            let img = &x.data()[s * c * h * wd..(s + 1) * c * h * wd];
            im2col(img, (c, h, wd), k, pad, (ho, wo), &mut cols);
            transpose_into(f, plane, g, &mut g_t);
            gemm_acc(ckk, plane, f, &cols, &g_t, &mut gw_t);
            for (ch, acc) in gb.iter_mut().enumerate() {
                *acc += g[ch * plane..(ch + 1) * plane].iter().sum::<f32>();
            }
        }
        if want_input {
            gcols.fill(0.0);
            gemm_acc(ckk, f, plane, &w_t, g, &mut gcols);
            let dst = &mut gx[s * c * h * wd..(s + 1) * c * h * wd];
            col2im_add(&gcols, (c, h, wd), k, pad, (ho, wo), dst);
        }
    }
    Ok(ParamGrads {
        input: if want_input {
            Some(Tensor::from_vec(x.shape(), gx)?)
        } else {
            None
        },
        weight: if want_params {
            let mut gw = vec![0.0; f * ckk];
            transpose_into(ckk, f, &gw_t, &mut gw);
            Some(Tensor::from_vec(w.shape(), gw)?)
        } else {
            None
        },
        bias: if want_params {
            Some(Tensor::from_vec(&[f], gb)?)
        } else {
            None
        },
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.expect_same_shape(grad_out)?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
/// Returns the output and, per output element, the flat input index of the
/// first maximum in row-major window order.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(SenaError::Shape(format!(
            "maxpool2x2 needs at least 2x2 input, got {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, argmax))
}

pub fn maxpool2x2_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(SenaError::Shape(format!(
            "maxpool grad_out {:?} does not match forward output",
            grad_out.shape()
        )));
    }
    let mut gx = Tensor::zeros(input_shape)?;
    let dst = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dst[idx] += g;
    }
    Ok(gx)
}

/// Inverted-dropout mask: survivors hold `1 / (1 - rate)`, dropped units 0.
pub fn dropout_mask(shape: &[usize], rate: f32, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(SenaError::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let scale = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(shape)?;
    for m in mask.data_mut() {
        *m = if rng.next_f32() >= rate { scale } else { 0.0 };
    }
    Ok(mask)
}

/// Applies a dropout mask; `None` (eval mode) is the identity.
pub fn dropout_forward(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    match mask {
        None => Ok(x.clone()),
        Some(m) => {
            x.expect_same_shape(m)?;
            let data = x.data().iter().zip(m.data()).map(|(a, b)| a * b).collect();
            Tensor::from_vec(x.shape(), data)
        }
    }
}

pub fn dropout_backward(grad_out: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    dropout_forward(grad_out, mask)
}

/// `[N, ...]` to `[N, prod(...)]`.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let rest = x.len() / n;
    x.reshape(&[n, rest])
}

/// `x[N,in] · w[in,out] + b[out]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, inputs] = x.dims2()?;
    let [w_in, units] = w.dims2()?;
    if inputs != w_in || b.shape() != [units] {
        return Err(SenaError::Shape(format!(
            "dense input {:?} with weight {:?} and bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; n * units];
    gemm_acc(n, inputs, units, x.data(), w.data(), &mut out);
    for row in out.chunks_exact_mut(units) {
        for (v, &bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Tensor::from_vec(&[n, units], out)
}

pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    want_params: bool,
    want_input: bool,
) -> Result<ParamGrads> {
    let [n, inputs] = x.dims2()?;
    let [_, units] = w.dims2()?;
    if grad_out.shape() != [n, units] {
        return Err(SenaError::Shape(format!(
            "dense grad_out {:?}, expected {:?}",
            grad_out.shape(),
            [n, units]
        )));
    }
    let (weight, bias) = if want_params {
        let mut x_t = vec![0.0; n * inputs];
        transpose_into(n, inputs, x.data(), &mut x_t);
        let mut gw = vec![0.0; inputs * units];
        gemm_acc(inputs, n, units, &x_t, grad_out.data(), &mut gw);
        let mut gb = vec![0.0; units];
        for row in grad_out.data().chunks_exact(units) {
            for (acc, &g) in gb.iter_mut().zip(row) {
                *acc += g;
            }
        }
        (
            Some(Tensor::from_vec(&[inputs, units], gw)?),
            Some(Tensor::from_vec(&[units], gb)?),
        )
    } else {
        (None, None)
    };
    let input = if want_input {
        let mut w_t = vec![0.0; inputs * units];
        transpose_into(inputs, units, w.data(), &mut w_t);
        let mut gx = vec![0.0; n * inputs];
        gemm_acc(n, units, inputs, grad_out.data(), &w_t, &mut gx);
        Some(Tensor::from_vec(&[n, inputs], gx)?)
    } else {
        None
    };
    Ok(ParamGrads {
        input,
        weight,
        bias,
    })
}

/// Row-wise softmax of `[N,K]` logits, stabilized by subtracting the row max.
pub fn softmax_forward(logits: &Tensor) -> Result<Tensor> {
    let [_, k] = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_vec(logits.shape(), out)
}

pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    probs.expect_same_shape(grad_out)?;
    let [_, k] = probs.dims2()?;
    let mut out = vec![0.0; probs.len()];
    for ((p, g), o) in probs
        .data()
        .chunks_exact(k)
        .zip(grad_out.data().chunks_exact(k))
        .zip(out.chunks_exact_mut(k))
    {
        let dot: f32 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &pi), &gi) in o.iter_mut().zip(p).zip(g) {
            *o = pi * (gi - dot);
        }
    }
    Tensor::from_vec(probs.shape(), out)
}

const PROB_FLOOR: f32 = 1e-12;

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(SenaError::Shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(SenaError::InvalidLabel {
            label,
            n_classes: k,
        });
    }
    Ok(())
}

/// Mean of `-ln p[label]` over the batch, with `p` clamped at `1e-12`.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<f32> {
    let [n, k] = probs.dims2()?;
    check_labels(labels, n, k)?;
    let total: f32 = probs
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &l)| -row[l].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f32)
}

/// Gradient of [`cross_entropy_loss`] with respect to the probabilities.
pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, k] = probs.dims2()?;
    check_labels(labels, n, k)?;
    let mut g = Tensor::zeros(probs.shape())?;
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.data()[i * k + l];
        if p > PROB_FLOOR {
            g.data_mut()[i * k + l] = -1.0 / (p * n as f32);
        }
    }
    Ok(g)
}

/// Fused softmax + cross-entropy gradient with respect to the logits:
/// `(p - onehot(label)) / N`.
pub fn softmax_cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let [n, k] = probs.dims2()?;
    check_labels(labels, n, k)?;
    let scale = 1.0 / n as f32;
    let mut g = probs.map(|p| p * scale);
    for (i, &l) in labels.iter().enumerate() {
        g.data_mut()[i * k + l] -= scale;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], 1.0).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = conv2d_forward(&x, &w, &b, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_same_padding() {
        let mut rng = Rng::new(4);
        let x = rng.uniform(&[2, 3, 6, 5], -1.0, 1.0).unwrap();
        let mut w = Tensor::zeros(&[3, 3, 3, 3]).unwrap();
        for ch in 0..3 {
            // output channel ch reads the centre tap of input channel ch
            w.data_mut()[((ch * 3 + ch) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[3]).unwrap(), Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, &b, Padding::Same),
            Err(SenaError::Shape(_))
        ));
    }

    #[test]
    fn conv_backward_zero_grad_out() {
        let mut rng = Rng::new(2);
        let x = rng.uniform(&[1, 2, 4, 4], -1.0, 1.0).unwrap();
        let w = rng.uniform(&[3, 2, 3, 3], -1.0, 1.0).unwrap();
        let g = Tensor::zeros(&[1, 3, 4, 4]).unwrap();
        let grads = conv2d_backward(&x, &w, Padding::Same, &g, true, true).unwrap();
        for t in [grads.input, grads.weight, grads.bias] {
            assert!(t.unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_backward_single_tap_kernel() {
        // 1x1 kernel: dL/dw = sum over positions of x * grad_out.
        let mut rng = Rng::new(8);
        let x = rng.uniform(&[2, 1, 3, 4], -1.0, 1.0).unwrap();
        let w = t(&[1, 1, 1, 1], &[0.5]);
        let g = rng.uniform(&[2, 1, 3, 4], -1.0, 1.0).unwrap();
        let grads = conv2d_backward(&x, &w, Padding::Valid, &g, true, false).unwrap();
        let expected: f32 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((grads.weight.unwrap().data()[0] - expected).abs() < 1e-5);
        assert!((grads.bias.unwrap().data()[0] - g.sum()).abs() < 1e-5);
        assert!(grads.input.is_none());
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = relu_forward(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_max() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, argmax) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let gx = maxpool2x2_backward(x.shape(), &argmax, &t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_pick_first_in_row_major_order() {
        let x = t(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]);
        let (_, argmax) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(argmax, vec![0]);
        let x = t(&[1, 1, 2, 2], &[1.0, 7.0, 7.0, 2.0]);
        let (_, argmax) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(argmax, vec![1]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales_survivors() {
        let mut rng = Rng::new(3);
        let x = rng.uniform(&[4, 50], 0.5, 1.0).unwrap();
        let layer = LayerNode::dropout(0.25).unwrap();
        let y = layer.forward(&x, &mut ForwardContext::eval()).unwrap();
        assert!(y.bit_eq(&x));

        let y = layer
            .forward(&x, &mut ForwardContext::training(Rng::new(1)))
            .unwrap();
        let mut dropped = 0;
        for (a, b) in x.data().iter().zip(y.data()) {
            if *b == 0.0 {
                dropped += 1;
            } else {
                assert!((b - a / 0.75).abs() < 1e-6);
            }
        }
        assert!(dropped > 20 && dropped < 80, "dropped {dropped} of 200");
    }

    #[test]
    fn softmax_rows_sum_to_one_for_wide_logits() {
        let mut rng = Rng::new(11);
        let logits = rng.uniform(&[16, 10], -50.0, 50.0).unwrap();
        let p = softmax_forward(&logits).unwrap();
        for row in p.data().chunks_exact(10) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let onehot = t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(cross_entropy_loss(&onehot, &[0, 2]).unwrap(), 0.0);
        let uniform = Tensor::new(&[3, 4], 0.25).unwrap();
        let loss = cross_entropy_loss(&uniform, &[0, 1, 3]).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let p = Tensor::new(&[1, 3], 1.0 / 3.0).unwrap();
        assert!(matches!(
            cross_entropy_loss(&p, &[3]),
            Err(SenaError::InvalidLabel { label: 3, n_classes: 3 })
        ));
    }

    #[test]
    fn stack_backward_without_forward_is_state_error() {
        let mut rng = Rng::new(0);
        let mut stack = LayerStack::new(vec![LayerNode::dense(3, 2, &mut rng).unwrap()]);
        let g = Tensor::zeros(&[1, 2]).unwrap();
        let err = stack.backward(&mut ForwardContext::eval(), g, true).unwrap_err();
        assert!(matches!(err, SenaError::State(_)));
    }

    #[test]
    fn frozen_layers_accumulate_no_gradient() {
        let mut rng = Rng::new(0);
        let mut stack = LayerStack::new(vec![
            LayerNode::dense(3, 4, &mut rng).unwrap(),
            LayerNode::relu(),
            LayerNode::dense(4, 2, &mut rng).unwrap(),
        ]);
        stack.layers_mut()[0].set_frozen(true);
        let x = rng.uniform(&[5, 3], -1.0, 1.0).unwrap();
        let mut ctx = ForwardContext::eval();
        let y = stack.forward(&x, &mut ctx).unwrap();
        let g = Tensor::new(y.shape(), 1.0).unwrap();
        assert!(stack.backward(&mut ctx, g, false).unwrap().is_none());
        assert!(stack.layers()[0].grads().iter().all(|g| g.sum() == 0.0));
        assert!(stack.layers()[2].grads()[1].sum() != 0.0);
    }
}
