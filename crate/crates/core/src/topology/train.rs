//! Sample-level training of one column against cached upstream activity.

use rayon::prelude::*;

use super::{ColumnGraph, ColumnGrads, ColumnOutputs};
use crate::snn::{cross_entropy, mean_squared, LossKind, Model};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target<'a> {
    Class(usize),
    Values(&'a [f32]),
}

/// Read access to a labelled sample collection.
pub trait SampleSet: Sync {
    fn len(&self) -> usize;
    fn image(&self, i: usize) -> &[f32];
    fn state(&self, i: usize) -> &[f32];
    fn target(&self, i: usize) -> Target<'_>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn to_scalars<S: Scalar>(v: &[f32]) -> Vec<S> {
    v.iter().map(|&x| S::of(x as f64)).collect()
}

/// Loss and its gradient for a head output.
pub fn loss_and_grad<S: Scalar>(kind: LossKind, output: &[S], target: Target<'_>) -> Result<(S, Vec<S>)> {
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Class(c)) if c < output.len() => Ok(cross_entropy(output, c)),
        (LossKind::MeanSquared, Target::Values(v)) if v.len() == output.len() => Ok(mean_squared(output, &to_scalars::<S>(v))),
        _ => Err(Error::Wiring(format!("target does not match a {kind:?} head of {} outputs", output.len()))),
    }
}

/// Outputs of every column below `task`, per sample, frozen for one phase.
#[derive(Debug, Clone, Default)]
pub struct SourceCache<S> {
    /// `samples[i][k-1]` holds task k's block outputs for sample i.
    samples: Vec<Vec<ColumnOutputs<S>>>,
}

impl<S: Scalar> SourceCache<S> {
    pub fn empty(n: usize) -> Self {
        SourceCache {
            samples: vec![Vec::new(); n],
        }
    }

    /// Runs columns `1..task` on every sample of `data`.
    pub fn build<D: SampleSet>(graph: &ColumnGraph<S>, task: usize, data: &D) -> Result<Self> {
        if task <= 1 {
            return Ok(Self::empty(data.len()));
        }
        let last = task - 1;
        let samples = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let image = to_scalars::<S>(data.image(i));
                let mut outs: Vec<ColumnOutputs<S>> = Vec::with_capacity(last);
                for t in 1..=last {
                    let lr = graph.long_range_currents(t, &|k, b, step| &outs[k - 1][b - 1][step]);
                    let tape = graph.column(t).forward(&image, &[], &lr, &graph.spike, t)?;
                    let mut o = tape.block_outputs();
                    // block 1 is never a long-range source
                    o[0] = Vec::new();
                    outs.push(o);
                }
                Ok(outs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SourceCache { samples })
    }

    pub fn spikes(&self, sample: usize, task: usize, block: usize, step: usize) -> &[S] {
        &self.samples[sample][task - 1][block - 1][step]
    }
}

/// Trains column `task` (and optionally the adapters feeding it).
pub struct ColumnTrainer<'a, S, D> {
    pub graph: &'a mut ColumnGraph<S>,
    pub task: usize,
    pub data: &'a D,
    pub cache: &'a SourceCache<S>,
    pub train_adapters: bool,
}

impl<'a, S: Scalar, D: SampleSet> ColumnTrainer<'a, S, D> {
    fn head_state(&self, sample: usize) -> Vec<S> {
        let state = self.data.state(sample);
        let want = self.graph.column(self.task).spec.state_dim;
        to_scalars(&state[..want.min(state.len())])
    }

    /// Forward only; returns the loss of one sample.
    pub fn sample_loss(&self, sample: usize) -> Result<S> {
        let g = &*self.graph;
        let cache = self.cache;
        let image = to_scalars::<S>(self.data.image(sample));
        let lr = g.long_range_currents(self.task, &|k, b, step| cache.spikes(sample, k, b, step));
        let col = g.column(self.task);
        let tape = col.forward(&image, &self.head_state(sample), &lr, &g.spike, self.task)?;
        Ok(loss_and_grad(col.spec.loss, &tape.output, self.data.target(sample))?.0)
    }
}

impl<'a, S: Scalar, D: SampleSet> Model<S> for ColumnTrainer<'a, S, D> {
    type Grads = ColumnGrads<S>;

    fn zero_grads(&self) -> ColumnGrads<S> {
        let adapters: Vec<_> = if self.train_adapters {
            self.graph.edges_into(self.task).map(|(_, e)| &e.adapter).collect()
        } else {
            Vec::new()
        };
        self.graph.column(self.task).zero_grads(&adapters)
    }

    fn sample_grad(&self, sample: usize, grads: &mut ColumnGrads<S>) -> Result<S> {
        let g = &*self.graph;
        let cache = self.cache;
        let image = to_scalars::<S>(self.data.image(sample));
        let lr = g.long_range_currents(self.task, &|k, b, step| cache.spikes(sample, k, b, step));
        let col = g.column(self.task);
        let tape = col.forward(&image, &self.head_state(sample), &lr, &g.spike, self.task)?;
        let (loss, g_out) = loss_and_grad(col.spec.loss, &tape.output, self.data.target(sample))?;
        let input_grads = col.backward(&tape, &g_out, grads, &g.spike);
        if self.train_adapters {
            for (j, (_, e)) in g.edges_into(self.task).enumerate() {
                let gin = &input_grads[e.dst_block - 1];
                for (step, gs) in gin.iter().enumerate() {
                    let x = e.adapter_input(cache.spikes(sample, e.src_task, e.src_block, step));
                    e.adapter.backward(&x, gs, &mut grads.adapters[j], None);
                }
                for (v, &m) in grads.adapters[j].weights.iter_mut().zip(&e.adapter.mask) {
                    if !m {
                        *v = S::zero();
                    }
                }
            }
        }
        Ok(loss)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        let task = self.task;
        self.graph.column_mut(task).visit_mut(f);
        if self.train_adapters {
            for e in self.graph.edges.iter_mut().filter(|e| e.dst_task == task) {
                e.adapter.visit_mut(f);
            }
        }
    }
}
