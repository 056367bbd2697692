//! Progressive task columns, long-range edges between them, and census.
//!
//! A column is four residual spiking blocks plus a non-spiking linear head.
//! Every block halves the spatial size. Block `b >= 2` of a new column may
//! receive, besides its native input, the output spikes of blocks 2..4 of
//! earlier columns through a 1x1 adapter (with spatial resampling); all
//! inputs are summed.

mod column;
mod census;
mod train;

pub use census::{BlockCensus, Census};
pub use train::{loss_and_grad, to_scalars, ColumnTrainer, SampleSet, SourceCache, Target};
pub use column::{BlockGrads, BlockModule, BlockTape, ColumnGrads, ColumnTape, TaskColumn};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::snn::{resample, ConvGeom, LayerParams, LossKind, SpikeConfig};
use crate::{Error, Result, Scalar};

pub const BLOCKS: usize = 4;
pub const BASE_LADDER: [usize; BLOCKS] = [32, 64, 128, 256];
/// Options per choice vector; the first three decode to "no connection".
pub const OPTIONS: usize = 6;

/// Channel widths for a width factor: `ceil(factor * 32/64/128/256)`.
pub fn ladder(width_factor: f64) -> [usize; BLOCKS] {
    BASE_LADDER.map(|c| ((width_factor * c as f64) - 1e-9).ceil().max(1.0) as usize)
}

/// Source block (2..=4) selected by an option index 0..6, or `None` for the
/// three no-connection options.
pub fn decode_option(option: usize) -> Option<usize> {
    match option {
        0..=2 => None,
        3..=5 => Some(option - 1),
        _ => None,
    }
}

/// What a column is shaped for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub in_c: usize,
    pub in_hw: (usize, usize),
    pub state_dim: usize,
    pub outputs: usize,
    pub loss: LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitGains {
    pub conv: f64,
    pub shortcut: f64,
    pub adapter: f64,
    pub head: f64,
    /// Initial raw membrane time constant of every spiking layer.
    pub tau: f64,
}

impl Default for InitGains {
    fn default() -> Self {
        InitGains {
            conv: 2.5,
            shortcut: 1.5,
            adapter: 0.5,
            head: 1.0,
            tau: crate::snn::TAU_INIT,
        }
    }
}

/// One long-range wiring decision for the newest column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub dst_block: usize,
    pub src_task: usize,
    pub option: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRangeEdge<S> {
    pub src_task: usize,
    pub src_block: usize,
    pub dst_task: usize,
    pub dst_block: usize,
    /// Source map (channels, h, w) before resampling.
    pub src_shape: (usize, usize, usize),
    /// 1x1 projection at the destination resolution.
    pub adapter: LayerParams<S>,
}

impl<S: Scalar> LongRangeEdge<S> {
    pub fn dst_hw(&self) -> (usize, usize) {
        (self.adapter.geom.in_h, self.adapter.geom.in_w)
    }

    /// Resampled adapter input for one step of source spikes.
    pub fn adapter_input(&self, src: &[S]) -> Vec<S> {
        let (c, h, w) = self.src_shape;
        resample(src, c, (h, w), self.dst_hw())
    }
}

/// Per-step output spikes of every block of one column.
pub type ColumnOutputs<S> = Vec<Vec<Vec<S>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnGraph<S> {
    pub width_factor: f64,
    pub spike: SpikeConfig,
    pub gains: InitGains,
    pub columns: Vec<TaskColumn<S>>,
    pub edges: Vec<LongRangeEdge<S>>,
}

impl<S: Scalar> ColumnGraph<S> {
    pub fn new(width_factor: f64, spike: SpikeConfig) -> Self {
        ColumnGraph {
            width_factor,
            spike,
            gains: InitGains::default(),
            columns: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, task: usize) -> &TaskColumn<S> {
        &self.columns[task - 1]
    }

    pub fn column_mut(&mut self, task: usize) -> &mut TaskColumn<S> {
        &mut self.columns[task - 1]
    }

    /// Appends the column for `task_id` with the ladder for `width_factor`.
    pub fn grow_task_column<R: Rng + ?Sized>(&mut self, task_id: usize, width_factor: f64, spec: ColumnSpec, rng: &mut R) -> Result<()> {
        let next = self.columns.len() + 1;
        if task_id != next {
            return Err(Error::Growth(format!("task {task_id} cannot follow {} existing columns", self.columns.len())));
        }
        if let Some(first) = self.columns.first() {
            if first.spec.in_c != spec.in_c || first.spec.in_hw != spec.in_hw {
                return Err(Error::Growth(format!("task {task_id} input shape differs from task 1")));
            }
        }
        let widths = ladder(width_factor);
        self.columns.push(TaskColumn::new(task_id, widths, spec, &self.gains, rng));
        Ok(())
    }

    /// Spatial size and channel count entering block `b` (1-based) of a column.
    pub fn block_input_shape(&self, task: usize, block: usize) -> (usize, usize, usize) {
        self.column(task).block(block).input_shape()
    }

    /// Materializes edges into the newest column.
    pub fn wire_edges<R: Rng + ?Sized>(&mut self, choices: &[Choice], rng: &mut R) -> Result<usize> {
        let t = self.columns.len();
        if t == 0 {
            return Err(Error::Wiring("no column to wire".into()));
        }
        let mut added = Vec::new();
        for c in choices {
            if c.src_task == 0 || c.src_task >= t {
                return Err(Error::Wiring(format!("source task {} is not earlier than task {t}", c.src_task)));
            }
            if !(2..=BLOCKS).contains(&c.dst_block) {
                return Err(Error::Wiring(format!("destination block {} of task {t} cannot take long-range input", c.dst_block)));
            }
            if c.option >= OPTIONS {
                return Err(Error::Wiring(format!("option {} out of range", c.option)));
            }
            let Some(src_block) = decode_option(c.option) else { continue };
            let src = self.column(c.src_task).block(src_block);
            let src_shape = src.output_shape();
            let (dst_c, dst_h, dst_w) = self.block_input_shape(t, c.dst_block);
            let (sc, sh, sw) = src_shape;
            let divisible = if sh >= dst_h { sh % dst_h == 0 && sw % dst_w == 0 } else { dst_h % sh == 0 && dst_w % sw == 0 };
            if !divisible {
                return Err(Error::Wiring(format!(
                    "task {} block {src_block} output {sh}x{sw} cannot be resampled to task {t} block {} input {dst_h}x{dst_w}",
                    c.src_task, c.dst_block
                )));
            }
            let geom = ConvGeom::conv(sc, dst_c, 1, 1, 0, (dst_h, dst_w));
            added.push(LongRangeEdge {
                src_task: c.src_task,
                src_block,
                dst_task: t,
                dst_block: c.dst_block,
                src_shape,
                adapter: LayerParams::init(geom, self.gains.adapter, false, rng),
            });
        }
        let n = added.len();
        self.edges.extend(added);
        self.check_acyclic()?;
        Ok(n)
    }

    /// Removes every edge into `task`.
    pub fn clear_edges_into(&mut self, task: usize) {
        self.edges.retain(|e| e.dst_task != task);
    }

    pub fn edges_into(&self, task: usize) -> impl Iterator<Item = (usize, &LongRangeEdge<S>)> {
        self.edges.iter().enumerate().filter(move |(_, e)| e.dst_task == task)
    }

    /// Kahn's algorithm over task columns.
    pub fn check_acyclic(&self) -> Result<()> {
        let n = self.columns.len();
        let mut indeg = vec![0usize; n + 1];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for e in &self.edges {
            if e.src_task == 0 || e.src_task > n || e.dst_task > n {
                return Err(Error::Wiring(format!("edge {}->{} references a missing column", e.src_task, e.dst_task)));
            }
            indeg[e.dst_task] += 1;
            out[e.src_task].push(e.dst_task);
        }
        let mut queue: Vec<usize> = (1..=n).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop() {
            seen += 1;
            for &w in &out[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push(w);
                }
            }
        }
        if seen != n {
            return Err(Error::Wiring("long-range edges form a cycle".into()));
        }
        Ok(())
    }

    /// Columns whose outputs task `task` depends on, ascending, `task` included.
    pub fn dependencies(&self, task: usize) -> Vec<usize> {
        let mut need = vec![false; self.columns.len() + 1];
        need[task] = true;
        for t in (1..=task).rev() {
            if need[t] {
                for e in self.edges.iter().filter(|e| e.dst_task == t) {
                    need[e.src_task] = true;
                }
            }
        }
        (1..=task).filter(|&t| need[t]).collect()
    }

    /// Runs task `task`'s column and everything it reads from. Returns the
    /// block outputs of each computed column plus the tape of `task`.
    pub fn forward_with_tape(&self, task: usize, image: &[S], state: &[S]) -> Result<(BTreeMap<usize, ColumnOutputs<S>>, ColumnTape<S>)> {
        let mut outputs: BTreeMap<usize, ColumnOutputs<S>> = BTreeMap::new();
        let mut last = None;
        for t in self.dependencies(task) {
            let lr = self.long_range_currents(t, &|src_task, src_block, step| &outputs[&src_task][src_block - 1][step]);
            let tape = self.column(t).forward(image, state, &lr, &self.spike, t)?;
            outputs.insert(t, tape.block_outputs());
            if t == task {
                last = Some(tape);
            }
        }
        Ok((outputs, last.expect("task is its own dependency")))
    }

    /// Head outputs for `task` (logits or regression values).
    pub fn forward(&self, task: usize, image: &[S], state: &[S]) -> Result<Vec<S>> {
        Ok(self.forward_with_tape(task, image, state)?.1.output)
    }

    /// Summed adapter currents into each block of `task`, per step:
    /// `result[b-1][step]`, empty where a block has no long-range input.
    pub fn long_range_currents<'s>(&self, task: usize, source: &dyn Fn(usize, usize, usize) -> &'s [S]) -> Vec<Vec<Vec<S>>> {
        let steps = self.spike.steps;
        let mut per_block: Vec<Vec<Vec<S>>> = vec![Vec::new(); BLOCKS];
        for (_, e) in self.edges_into(task) {
            let slot = &mut per_block[e.dst_block - 1];
            let len = e.adapter.geom.output_len();
            if slot.is_empty() {
                *slot = vec![vec![S::zero(); len]; steps];
            }
            let mut buf = vec![S::zero(); len];
            for (step, acc) in slot.iter_mut().enumerate() {
                let x = e.adapter_input(source(e.src_task, e.src_block, step));
                e.adapter.forward(&x, &mut buf);
                for (a, &b) in acc.iter_mut().zip(&buf) {
                    *a += b;
                }
            }
        }
        per_block
    }

    pub fn census(&self) -> Census {
        Census::of(self)
    }

    /// Long-range parameter count (adapter weights still active).
    pub fn long_range_params(&self) -> usize {
        self.edges.iter().map(|e| e.adapter.active_count()).sum()
    }
}

/// Element-wise sum of a block's native input and its long-range inputs.
pub fn merge_inputs<S: Scalar>(native: &[S], long_range: &[&[S]]) -> Result<Vec<S>> {
    let mut out = native.to_vec();
    for (i, lr) in long_range.iter().enumerate() {
        if lr.len() != native.len() {
            return Err(Error::Wiring(format!(
                "long-range input {i} has {} values, native input has {}",
                lr.len(),
                native.len()
            )));
        }
        for (o, &v) in out.iter_mut().zip(lr.iter()) {
            *o += v;
        }
    }
    Ok(out)
}
