//! Convolutional backbone with a mixture density head.
//!
//! Architecture: a stack of 3×3 convolution blocks with elu activations, the
//! final feature map flattened into a fully connected layer of width
//! `fc_hidden` (elu), and a linear head of width `(2 + 2)·K + 1` whose output
//! is a [`RawHeadOutput`](crate::mixture::RawHeadOutput).
//!
//! Convolutions run as im2col followed by a GEMM. Per-sample activations are
//! kept in a [`Workspace`] so the backward pass can reuse them.

mod checkpoint;
mod scalar;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load, save, Checkpoint, TrainingMeta, FORMAT_VERSION, MAGIC};
pub use scalar::Scalar;
pub use train::{dihedral, train, train_with, AdamState, TrainOutcome, Trainer, TrainingBatch};

use crate::error::{Error, Result};
use crate::mixture::{head_width, RawHeadOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Number of mixture components.
    pub k: usize,
    /// Patch side length in pixels.
    pub patch_size: usize,
    pub in_channels: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_hidden: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rescale the batch gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
    /// Train on a random flip or transpose of every patch and its targets.
    pub augment: bool,
    /// Anneal the learning rate to zero along a half cosine over all steps.
    pub cosine_decay: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            k: 100,
            patch_size: 50,
            in_channels: 1,
            conv_blocks: vec![
                ConvBlock::new(16, 3, 1),
                ConvBlock::new(32, 3, 2),
                ConvBlock::new(64, 3, 2),
                ConvBlock::new(64, 3, 2),
            ],
            fc_hidden: 256,
            seed: 0,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 30,
            grad_clip: Some(100.0),
            augment: true,
            cosine_decay: true,
        }
    }
}

impl NetworkConfig {
    pub fn head_width(&self) -> usize {
        head_width(self.k)
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if self.patch_size == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        if self.in_channels == 0 || self.fc_hidden == 0 {
            return Err(Error::config("channel and hidden widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let a = &self.adam;
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning rate must be finite and nonnegative",
            ));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::config(
                "Adam betas must lie in [0, 1) and epsilon be positive",
            ));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("gradient clip norm must be positive"));
            }
        }
        let mut size = self.patch_size;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.kernel % 2 == 0 || b.stride == 0 {
                return Err(Error::config(format!(
                    "conv block {i} needs positive channels, an odd kernel and a positive stride"
                )));
            }
            size = conv_out(size, b.kernel, b.stride);
            if size == 0 {
                return Err(Error::config(format!(
                    "conv block {i} shrinks the patch to nothing"
                )));
            }
        }
        Ok(())
    }

    /// Geometry of every convolution layer, assuming a valid config.
    fn conv_geometry(&self) -> Vec<ConvGeom> {
        let mut geoms = Vec::with_capacity(self.conv_blocks.len());
        let (mut c, mut h, mut w) = (self.in_channels, self.patch_size, self.patch_size);
        for b in &self.conv_blocks {
            let g = ConvGeom {
                in_c: c,
                in_h: h,
                in_w: w,
                out_c: b.channels,
                kernel: b.kernel,
                stride: b.stride,
                pad: b.kernel / 2,
                out_h: conv_out(h, b.kernel, b.stride),
                out_w: conv_out(w, b.kernel, b.stride),
            };
            (c, h, w) = (g.out_c, g.out_h, g.out_w);
            geoms.push(g);
        }
        geoms
    }

    fn feature_len(&self) -> usize {
        self.conv_geometry()
            .last()
            .map_or(self.input_len(), |g| g.out_len())
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad).saturating_sub(kernel) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_pixels()
    }

    fn im2col<T: Scalar>(&self, input: &[T], col: &mut [T]) {
        let p = self.out_pixels();
        for c in 0..self.in_c {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.in_h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *v = if iw < 0 || iw >= self.in_w as isize {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], grad_input: &mut [T]) {
        grad_input.fill(T::zero());
        let p = self.out_pixels();
        for c in 0..self.in_c {
            let plane = &mut grad_input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        let base = ih as usize * self.in_w;
                        for ow in 0..self.out_w {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.in_w as isize {
                                plane[base + iw as usize] =
                                    plane[base + iw as usize] + src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Name and dimensions of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl TensorShape {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of elu expressed through its output.
fn elu_grad_from_output<T: Scalar>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

/// Network parameters. Tensors are stored in a fixed order: for each conv
/// block its weight `[out_c, in_c·k·k]` and bias `[out_c]`, then the hidden
/// layer `[fc_hidden, features]`, `[fc_hidden]`, then the head
/// `[head_width, fc_hidden]`, `[head_width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: NetworkConfig,
    shapes: Vec<TensorShape>,
    params: Vec<Vec<T>>,
}

fn layer_shapes(config: &NetworkConfig) -> Vec<TensorShape> {
    let mut shapes = Vec::new();
    for (i, g) in config.conv_geometry().iter().enumerate() {
        shapes.push(TensorShape {
            name: format!("conv{i}.weight"),
            dims: vec![g.out_c, g.col_rows()],
        });
        shapes.push(TensorShape {
            name: format!("conv{i}.bias"),
            dims: vec![g.out_c],
        });
    }
    let features = config.feature_len();
    shapes.push(TensorShape {
        name: "hidden.weight".into(),
        dims: vec![config.fc_hidden, features],
    });
    shapes.push(TensorShape {
        name: "hidden.bias".into(),
        dims: vec![config.fc_hidden],
    });
    shapes.push(TensorShape {
        name: "head.weight".into(),
        dims: vec![config.head_width(), config.fc_hidden],
    });
    shapes.push(TensorShape {
        name: "head.bias".into(),
        dims: vec![config.head_width()],
    });
    shapes
}

/// Initial head scale-logit bias: components start with sigma = 0.1 patch units.
const INIT_SIGMA: f64 = 0.1;
/// Head weights are shrunk so the initial prediction is dominated by the biases.
const HEAD_INIT_GAIN: f64 = 0.1;

impl<T: Scalar> Network<T> {
    /// Fan-in scaled uniform initialization from the config seed.
    ///
    /// Head biases start with zero alpha- and gate-logits, means spread
    /// uniformly over the patch and scales of 0.1 patch units.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let shapes = layer_shapes(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let head_w = shapes.len() - 2;
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let mut values = vec![T::zero(); shape.len()];
            if shape.dims.len() == 2 {
                let fan_in = shape.dims[1] as f64;
                let gain = if i == head_w { HEAD_INIT_GAIN } else { 1.0 };
                let bound = gain * (6.0 / fan_in).sqrt();
                for v in &mut values {
                    *v = T::of_f64(rng.random_range(-bound..bound));
                }
            }
            params.push(values);
        }
        let k = config.k;
        let head_b = params.last_mut().expect("head bias");
        for v in &mut head_b[k..3 * k] {
            *v = T::of_f64(rng.random_range(0.05..0.95));
        }
        let scale = (INIT_SIGMA - crate::mixture::SIGMA_FLOOR).ln();
        for v in &mut head_b[3 * k..4 * k] {
            *v = T::of_f64(scale);
        }
        Ok(Self {
            config,
            shapes,
            params,
        })
    }

    /// Network with every weight and bias set to zero.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let shapes = layer_shapes(&config);
        let params = shapes.iter().map(|s| vec![T::zero(); s.len()]).collect();
        Ok(Self {
            config,
            shapes,
            params,
        })
    }

    /// Rebuilds a network from explicit tensors, checking their shapes.
    pub fn from_parts(
        config: NetworkConfig,
        shapes: Vec<TensorShape>,
        params: Vec<Vec<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layer_shapes(&config);
        if shapes != expected {
            return Err(Error::config(
                "tensor shapes do not match the network config",
            ));
        }
        if params.len() != shapes.len()
            || params.iter().zip(&shapes).any(|(p, s)| p.len() != s.len())
        {
            return Err(Error::config("tensor lengths do not match their shapes"));
        }
        Ok(Self {
            config,
            shapes,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn shapes(&self) -> &[TensorShape] {
        &self.shapes
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Same network with every parameter converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| p.iter().map(|v| U::of_f64(v.as_f64())).collect())
                .collect(),
        }
    }

    /// Zero-filled tensors matching the parameter layout.
    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.shapes
            .iter()
            .map(|s| vec![T::zero(); s.len()])
            .collect()
    }

    pub fn workspace(&self) -> Workspace<T> {
        Workspace::new(&self.config)
    }

    fn check_input(&self, patch: &[T]) -> Result<()> {
        if patch.len() != self.config.input_len() {
            return Err(Error::config(format!(
                "patch has {} values, network expects {} ({}×{}×{})",
                patch.len(),
                self.config.input_len(),
                self.config.in_channels,
                self.config.patch_size,
                self.config.patch_size
            )));
        }
        Ok(())
    }

    /// Raw head output for one patch.
    pub fn forward(&self, patch: &[T]) -> Result<RawHeadOutput> {
        let mut ws = self.workspace();
        let out = self.forward_batch(&[patch], &mut ws)?;
        RawHeadOutput::new(out[0].iter().map(|v| v.as_f64()).collect(), self.config.k)
    }

    /// Forward pass over a batch, caching activations in `ws`. Returns one
    /// head output row per patch.
    pub fn forward_batch(&self, patches: &[&[T]], ws: &mut Workspace<T>) -> Result<Vec<Vec<T>>> {
        for p in patches {
            self.check_input(p)?;
        }
        let geoms = self.config.conv_geometry();
        let b = patches.len();
        ws.resize(b);
        let features = self.config.feature_len();
        let hidden = self.config.fc_hidden;
        let width = self.config.head_width();
        let n_conv = geoms.len();

        for (s, patch) in patches.iter().enumerate() {
            let cache = &mut ws.samples[s];
            for (l, g) in geoms.iter().enumerate() {
                let (before, rest) = cache.split_at_mut(l);
                let layer = &mut rest[0];
                let input: &[T] = if l == 0 { patch } else { &before[l - 1].out };
                g.im2col(input, &mut layer.col);
                let weight = &self.params[2 * l];
                let bias = &self.params[2 * l + 1];
                let p = g.out_pixels();
                for (oc, row) in layer.out.chunks_exact_mut(p).enumerate() {
                    row.fill(bias[oc]);
                }
                T::gemm(
                    g.out_c,
                    g.col_rows(),
                    p,
                    weight,
                    false,
                    &layer.col,
                    false,
                    T::one(),
                    &mut layer.out,
                );
                layer.out.iter_mut().for_each(|v| *v = elu(*v));
            }
            let feat = if n_conv == 0 {
                patch
            } else {
                &cache[n_conv - 1].out[..]
            };
            ws.features[s * features..(s + 1) * features].copy_from_slice(feat);
        }

        let (hw, hb) = (&self.params[2 * n_conv], &self.params[2 * n_conv + 1]);
        for row in ws.hidden.chunks_exact_mut(hidden) {
            row.copy_from_slice(hb);
        }
        T::gemm(
            b,
            features,
            hidden,
            &ws.features,
            false,
            hw,
            true,
            T::one(),
            &mut ws.hidden,
        );
        ws.hidden.iter_mut().for_each(|v| *v = elu(*v));

        let (ow, ob) = (&self.params[2 * n_conv + 2], &self.params[2 * n_conv + 3]);
        let mut out = vec![T::zero(); b * width];
        for row in out.chunks_exact_mut(width) {
            row.copy_from_slice(ob);
        }
        T::gemm(
            b,
            hidden,
            width,
            &ws.hidden,
            false,
            ow,
            true,
            T::one(),
            &mut out,
        );
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("network output is not finite"));
        }
        Ok(out.chunks_exact(width).map(<[T]>::to_vec).collect())
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// with respect to each head output row of the last `forward_batch`.
    pub fn backward_batch(&self, grad_out: &[Vec<T>], ws: &mut Workspace<T>, grads: &mut [Vec<T>]) {
        let geoms = self.config.conv_geometry();
        let n_conv = geoms.len();
        let b = grad_out.len();
        assert_eq!(b, ws.batch, "backward batch must match the forward batch");
        let features = self.config.feature_len();
        let hidden = self.config.fc_hidden;
        let width = self.config.head_width();

        let d_out: Vec<T> = grad_out.iter().flatten().copied().collect();
        assert_eq!(d_out.len(), b * width);

        // Head.
        let (ow_idx, ob_idx) = (2 * n_conv + 2, 2 * n_conv + 3);
        T::gemm(
            width,
            b,
            hidden,
            &d_out,
            true,
            &ws.hidden,
            false,
            T::one(),
            &mut grads[ow_idx],
        );
        for row in d_out.chunks_exact(width) {
            for (g, d) in grads[ob_idx].iter_mut().zip(row) {
                *g = *g + *d;
            }
        }
        let mut d_hidden = vec![T::zero(); b * hidden];
        T::gemm(
            b,
            width,
            hidden,
            &d_out,
            false,
            &self.params[ow_idx],
            false,
            T::zero(),
            &mut d_hidden,
        );
        for (d, h) in d_hidden.iter_mut().zip(&ws.hidden) {
            *d = *d * elu_grad_from_output(*h);
        }

        // Hidden layer.
        let (hw_idx, hb_idx) = (2 * n_conv, 2 * n_conv + 1);
        T::gemm(
            hidden,
            b,
            features,
            &d_hidden,
            true,
            &ws.features,
            false,
            T::one(),
            &mut grads[hw_idx],
        );
        for row in d_hidden.chunks_exact(hidden) {
            for (g, d) in grads[hb_idx].iter_mut().zip(row) {
                *g = *g + *d;
            }
        }
        if n_conv == 0 {
            return;
        }
        let mut d_features = vec![T::zero(); b * features];
        T::gemm(
            b,
            hidden,
            features,
            &d_hidden,
            false,
            &self.params[hw_idx],
            false,
            T::zero(),
            &mut d_features,
        );

        // Convolutions, one sample at a time.
        for s in 0..b {
            let cache = &mut ws.samples[s];
            let mut d_act = d_features[s * features..(s + 1) * features].to_vec();
            for l in (0..n_conv).rev() {
                let g = &geoms[l];
                let layer = &cache[l];
                let p = g.out_pixels();
                for (d, a) in d_act.iter_mut().zip(&layer.out) {
                    *d = *d * elu_grad_from_output(*a);
                }
                T::gemm(
                    g.out_c,
                    p,
                    g.col_rows(),
                    &d_act,
                    false,
                    &layer.col,
                    true,
                    T::one(),
                    &mut grads[2 * l],
                );
                for (oc, row) in d_act.chunks_exact(p).enumerate() {
                    grads[2 * l + 1][oc] = grads[2 * l + 1][oc] + row.iter().copied().sum();
                }
                if l == 0 {
                    break;
                }
                let mut d_col = std::mem::take(&mut ws.scratch);
                d_col.resize(g.col_rows() * p, T::zero());
                T::gemm(
                    g.col_rows(),
                    g.out_c,
                    p,
                    &self.params[2 * l],
                    true,
                    &d_act,
                    false,
                    T::zero(),
                    &mut d_col,
                );
                let mut d_in = vec![T::zero(); g.in_c * g.in_h * g.in_w];
                g.col2im(&d_col, &mut d_in);
                ws.scratch = d_col;
                d_act = d_in;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    col: Vec<T>,
    out: Vec<T>,
}

/// Reusable activation buffers for batched forward/backward passes.
#[derive(Debug, Clone)]
pub struct Workspace<T> {
    geoms: Vec<ConvGeom>,
    feature_len: usize,
    hidden_len: usize,
    batch: usize,
    samples: Vec<Vec<LayerCache<T>>>,
    features: Vec<T>,
    hidden: Vec<T>,
    scratch: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    fn new(config: &NetworkConfig) -> Self {
        Self {
            geoms: config.conv_geometry(),
            feature_len: config.feature_len(),
            hidden_len: config.fc_hidden,
            batch: 0,
            samples: Vec::new(),
            features: Vec::new(),
            hidden: Vec::new(),
            scratch: Vec::new(),
        }
    }

    fn resize(&mut self, batch: usize) {
        self.batch = batch;
        while self.samples.len() < batch {
            let caches = self
                .geoms
                .iter()
                .map(|g| LayerCache {
                    col: vec![T::zero(); g.col_rows() * g.out_pixels()],
                    out: vec![T::zero(); g.out_len()],
                })
                .collect();
            self.samples.push(caches);
        }
        self.features.resize(batch * self.feature_len, T::zero());
        self.hidden.resize(batch * self.hidden_len, T::zero());
    }
}
