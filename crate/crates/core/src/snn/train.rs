//! Losses, momentum SGD and the data-parallel training step.

use rayon::prelude::*;

use crate::{Error, Result, Scalar};

/// Samples per shard; shards are reduced in index order so the result does
/// not depend on the thread count.
pub const SHARD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    CrossEntropy,
    MeanSquared,
}

/// Softmax cross-entropy; returns the loss and dL/dlogits.
pub fn cross_entropy<S: Scalar>(logits: &[S], class: usize) -> (S, Vec<S>) {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    let mut grad: Vec<S> = exps.iter().map(|&e| e / sum).collect();
    let loss = -(grad[class].ln());
    grad[class] -= S::one();
    (loss, grad)
}

/// Mean squared error over the output dimensions.
pub fn mean_squared<S: Scalar>(pred: &[S], target: &[S]) -> (S, Vec<S>) {
    let n = S::of(pred.len().max(1) as f64);
    let mut loss = S::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            S::of(2.0) * d / n
        })
        .collect();
    (loss / n, grad)
}

pub trait GradBuffer<S>: Send {
    fn add_assign(&mut self, other: &Self);
    fn visit(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>));
}

/// Anything trainable sample by sample.
pub trait Model<S: Scalar>: Sync {
    type Grads: GradBuffer<S>;

    fn zero_grads(&self) -> Self::Grads;

    /// Loss for one sample; its gradient is added into `grads`.
    fn sample_grad(&self, sample: usize, grads: &mut Self::Grads) -> Result<S>;

    /// Visits trainable parameters in the same order as `Grads::visit`.
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>));
}

#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub lr: f64,
    pub momentum: f64,
    /// Optional global gradient-norm clip.
    pub clip: Option<f64>,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64, clip: Option<f64>) -> Self {
        Sgd {
            lr,
            momentum,
            clip,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: Model<S> + ?Sized>(&mut self, model: &mut M, grads: &mut M::Grads) {
        let mut flat: Vec<Vec<S>> = Vec::new();
        grads.visit(&mut |g, _| flat.push(g.to_vec()));
        if let Some(clip) = self.clip {
            let norm = flat.iter().flatten().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
            if norm > clip {
                let scale = S::of(clip / norm);
                flat.iter_mut().flatten().for_each(|g| *g *= scale);
            }
        }
        if self.velocity.len() != flat.len() {
            self.velocity = flat.iter().map(|g| vec![S::zero(); g.len()]).collect();
        }
        let (lr, mom) = (S::of(self.lr), S::of(self.momentum));
        let mut idx = 0;
        let velocity = &mut self.velocity;
        model.visit_params_mut(&mut |p, mask| {
            let g = &flat[idx];
            let v = &mut velocity[idx];
            for i in 0..p.len() {
                if mask.is_some_and(|m| !m[i]) {
                    v[i] = S::zero();
                    p[i] = S::zero();
                    continue;
                }
                v[i] = mom * v[i] + g[i];
                p[i] -= lr * v[i];
            }
            idx += 1;
        });
    }
}

/// Mean loss and gradient over `batch`, computed shard-parallel.
pub fn batch_grad<S: Scalar, M: Model<S>>(model: &M, batch: &[usize]) -> Result<(S, M::Grads)> {
    let parts: Vec<Result<(S, M::Grads)>> = batch
        .par_chunks(SHARD)
        .map(|shard| {
            let mut g = model.zero_grads();
            let mut loss = S::zero();
            for &i in shard {
                loss += model.sample_grad(i, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = model.zero_grads();
    let mut loss = S::zero();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let scale = S::one() / S::of(batch.len().max(1) as f64);
    total.visit(&mut |g, _| g.iter_mut().for_each(|v| *v *= scale));
    Ok((loss * scale, total))
}

/// One gradient-descent update on `batch`. Returns the batch loss.
pub fn train_step<S: Scalar, M: Model<S>>(model: &mut M, batch: &[usize], opt: &mut Sgd<S>) -> Result<S> {
    let (loss, mut grads) = batch_grad(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            location: "training loss".into(),
        });
    }
    opt.step(model, &mut grads);
    Ok(loss)
}
