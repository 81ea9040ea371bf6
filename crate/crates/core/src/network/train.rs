use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Checkpoint, Network, NetworkConfig, Scalar, TrainingMeta, Workspace};
use crate::error::{Error, Result};
use crate::mixture::{loss_and_grad_raw, Point, RawHeadOutput, TargetSet};
use crate::synth::PatchRecord;

/// Borrowed mini-batch of patches and their targets.
#[derive(Debug, Clone)]
pub struct TrainingBatch<'a> {
    patches: Vec<&'a [f32]>,
    targets: Vec<&'a TargetSet>,
}

impl<'a> TrainingBatch<'a> {
    pub fn new(patches: Vec<&'a [f32]>, targets: Vec<&'a TargetSet>) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::config("training batch is empty"));
        }
        if patches.len() != targets.len() {
            return Err(Error::config(format!(
                "batch has {} patches but {} target sets",
                patches.len(),
                targets.len()
            )));
        }
        if patches
            .iter()
            .any(|p| p.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::config("patch pixel values must lie in [0, 1]"));
        }
        Ok(Self { patches, targets })
    }

    pub fn from_records(records: &[&'a PatchRecord]) -> Result<Self> {
        Self::new(
            records.iter().map(|r| r.pixels.as_slice()).collect(),
            records.iter().map(|r| &r.targets).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patches(&self) -> &[&'a [f32]] {
        &self.patches
    }

    pub fn targets(&self) -> &[&'a TargetSet] {
        &self.targets
    }
}

impl<T: Scalar> Network<T> {
    /// Summed batch loss; overwrites `grads` with its gradient with respect
    /// to every parameter.
    pub fn loss_and_gradients(
        &self,
        patches: &[&[T]],
        targets: &[&TargetSet],
        ws: &mut Workspace<T>,
        grads: &mut [Vec<T>],
    ) -> Result<f64> {
        if patches.len() != targets.len() {
            return Err(Error::config("patches and targets are misaligned"));
        }
        let outputs = self.forward_batch(patches, ws)?;
        let mut loss = 0.0;
        let mut grad_out = Vec::with_capacity(outputs.len());
        for (out, t) in outputs.into_iter().zip(targets) {
            let raw = RawHeadOutput::new(out.iter().map(|v| v.as_f64()).collect(), self.config.k)?;
            let (l, g) = loss_and_grad_raw(&raw, t)?;
            loss += l;
            grad_out.push(g.into_iter().map(T::of_f64).collect());
        }
        grads.iter_mut().for_each(|g| g.fill(T::zero()));
        self.backward_batch(&grad_out, ws, grads);
        Ok(loss)
    }
}

/// First and second moment estimates of the adaptive-moment optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(net: &Network<f32>) -> Self {
        Self {
            step: 0,
            first: net.zeros_like(),
            second: net.zeros_like(),
        }
    }
}

/// Mutable training state: weights, optimizer moments and scratch buffers.
pub struct Trainer {
    net: Network<f32>,
    adam: AdamState,
    ws: Workspace<f32>,
    grads: Vec<Vec<f32>>,
    lr_factor: f64,
}

impl Trainer {
    pub fn new(net: Network<f32>) -> Self {
        let adam = AdamState::new(&net);
        let ws = net.workspace();
        let grads = net.zeros_like();
        Self {
            net,
            adam,
            ws,
            grads,
            lr_factor: 1.0,
        }
    }

    /// Multiplies the configured learning rate for subsequent steps.
    pub fn set_lr_factor(&mut self, factor: f64) {
        self.lr_factor = factor;
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn into_network(self) -> Network<f32> {
        self.net
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Batch loss without touching the weights.
    pub fn evaluate(&mut self, batch: &TrainingBatch) -> Result<f64> {
        self.net.loss_and_gradients(
            batch.patches(),
            batch.targets(),
            &mut self.ws,
            &mut self.grads,
        )
    }

    /// One optimizer step on `batch`. Returns the pre-step summed loss.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<f64> {
        let loss = self.evaluate(batch)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "batch loss is {loss} at step {}; lower the learning rate",
                self.adam.step + 1
            )));
        }
        let config = self.net.config().clone();
        let scale = 1.0 / batch.len() as f64;
        let norm = self
            .grads
            .iter()
            .flatten()
            .map(|g| (*g as f64 * scale).powi(2))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric(format!(
                "gradient norm is {norm} at step {}; lower the learning rate",
                self.adam.step + 1
            )));
        }
        let scale = match config.grad_clip {
            Some(clip) if norm > clip => scale * clip / norm,
            _ => scale,
        };

        let a = config.adam;
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let lr = a.learning_rate * self.lr_factor;
        let bias1 = 1.0 - a.beta1.powi(t);
        let bias2 = 1.0 - a.beta2.powi(t);
        let state = &mut self.adam;
        for (((p, g), m), v) in self
            .net
            .params_mut()
            .iter_mut()
            .zip(&self.grads)
            .zip(&mut state.first)
            .zip(&mut state.second)
        {
            for i in 0..p.len() {
                let gi = g[i] as f64 * scale;
                let mi = a.beta1 * m[i] as f64 + (1.0 - a.beta1) * gi;
                let vi = a.beta2 * v[i] as f64 + (1.0 - a.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + a.epsilon);
                p[i] = (p[i] as f64 - update) as f32;
            }
        }
        Ok(loss)
    }
}

/// Trained checkpoint plus the per-epoch mean patch loss.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_curve: Vec<f64>,
}

// Keep shuffling and augmentation independent of weight initialization.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;
const AUGMENT_STREAM: u64 = 0x4155_474d_454e_5431;

/// One of the eight symmetries of the square: bit 2 transposes, bit 0 flips
/// x and bit 1 flips y, applied in that order. Pixel data is channel-major
/// with `size × size` planes; targets use the pixel-index convention
/// (`index / size`), so a flip maps `t` to `(size - 1) / size - t`.
pub fn dihedral(
    pixels: &[f32],
    targets: &TargetSet,
    size: usize,
    transform: u8,
) -> Result<(Vec<f32>, TargetSet)> {
    let plane = size * size;
    if plane == 0 || !pixels.len().is_multiple_of(plane) {
        return Err(Error::config(format!(
            "{} values do not form {size}×{size} planes",
            pixels.len()
        )));
    }
    let (transpose, flip_x, flip_y) = (transform & 4 != 0, transform & 1 != 0, transform & 2 != 0);
    let map_index = |x: usize, y: usize| {
        let (x, y) = if transpose { (y, x) } else { (x, y) };
        (
            if flip_x { size - 1 - x } else { x },
            if flip_y { size - 1 - y } else { y },
        )
    };
    let mut out = vec![0.0; pixels.len()];
    for (src, dst) in pixels.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for y in 0..size {
            for x in 0..size {
                let (nx, ny) = map_index(x, y);
                dst[ny * size + nx] = src[y * size + x];
            }
        }
    }
    let last = (size - 1) as f64 / size as f64;
    let points: Vec<Point> = targets
        .points()
        .iter()
        .map(|p| {
            let [x, y] = if transpose { [p[1], p[0]] } else { *p };
            [
                if flip_x {
                    (last - x).clamp(0.0, 1.0)
                } else {
                    x
                },
                if flip_y {
                    (last - y).clamp(0.0, 1.0)
                } else {
                    y
                },
            ]
        })
        .collect();
    Ok((out, TargetSet::new(points)?))
}

/// Trains a freshly initialized network on `dataset`.
///
/// Fully determined by `config.seed`: initialization and the per-epoch
/// shuffling both derive from it.
pub fn train(dataset: &[PatchRecord], config: &NetworkConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_, _| {})
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch.
pub fn train_with(
    dataset: &[PatchRecord],
    config: &NetworkConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let net = Network::<f32>::new(config.clone())?;
    if let Some(r) = dataset
        .iter()
        .find(|r| r.pixels.len() != config.input_len())
    {
        return Err(Error::config(format!(
            "patch from image {} has {} pixels, expected {}",
            r.parent_id,
            r.pixels.len(),
            config.input_len()
        )));
    }
    let with_object = dataset.iter().filter(|r| r.targets.has_object()).count();
    if with_object == 0 || with_object == dataset.len() {
        log::warn!(
            "training set has {with_object} object patches out of {}; the gate sees one class only",
            dataset.len()
        );
    }

    let mut trainer = Trainer::new(net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed ^ AUGMENT_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let total_steps = config.epochs * dataset.len().div_ceil(config.batch_size);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            if config.cosine_decay {
                let progress = step as f64 / total_steps as f64;
                trainer.set_lr_factor(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            }
            step += 1;
            let records: Vec<&PatchRecord> = chunk.iter().map(|&i| &dataset[i]).collect();
            if config.augment {
                let moved = records
                    .iter()
                    .map(|r| {
                        dihedral(
                            &r.pixels,
                            &r.targets,
                            config.patch_size,
                            aug_rng.random_range(0..8),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let batch = TrainingBatch::new(
                    moved.iter().map(|(p, _)| p.as_slice()).collect(),
                    moved.iter().map(|(_, t)| t).collect(),
                )?;
                total += trainer.train_step(&batch)?;
            } else {
                let batch = TrainingBatch::from_records(&records)?;
                total += trainer.train_step(&batch)?;
            }
        }
        let mean = total / dataset.len() as f64;
        log::info!(
            "epoch {}/{}: mean patch loss {mean:.4}",
            epoch + 1,
            config.epochs
        );
        on_epoch(epoch, mean);
        curve.push(mean);
    }

    let meta = TrainingMeta {
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        epochs: config.epochs as u32,
        seed: config.seed,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(trainer.into_network(), meta),
        loss_curve: curve,
    })
}
