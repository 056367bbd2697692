use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ColumnSpec, InitGains, BLOCKS};
use crate::snn::{plif_backward, plif_forward, ConvGeom, GradBuffer, LayerGrads, LayerParams, PlifRecord, SpikeConfig};
use crate::{Result, Scalar};

/// One residual spiking block:
/// `s1 = PLIF(conv3x3/2(x))`, `out = PLIF(conv3x3(s1) + conv1x1/2(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockModule<S> {
    pub task: usize,
    pub index: usize,
    pub width: usize,
    pub conv1: LayerParams<S>,
    pub conv2: LayerParams<S>,
    pub shortcut: LayerParams<S>,
    pub tau1: S,
    pub tau2: S,
    /// Completed phases in which this block's weights were trained.
    pub updates: u32,
}

#[derive(Debug, Clone)]
pub struct BlockTape<S> {
    /// Merged input current per step.
    pub input: Vec<Vec<S>>,
    pub rec1: PlifRecord<S>,
    pub rec2: PlifRecord<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<S> {
    pub conv1: LayerGrads<S>,
    pub conv2: LayerGrads<S>,
    pub shortcut: LayerGrads<S>,
    pub tau1: S,
    pub tau2: S,
}

impl<S: Scalar> BlockModule<S> {
    fn new<R: Rng + ?Sized>(task: usize, index: usize, in_c: usize, width: usize, in_hw: (usize, usize), gains: &InitGains, rng: &mut R) -> Self {
        let conv1 = LayerParams::init(ConvGeom::conv(in_c, width, 3, 2, 1, in_hw), gains.conv, true, rng);
        let mid = (conv1.geom.out_h(), conv1.geom.out_w());
        let conv2 = LayerParams::init(ConvGeom::conv(width, width, 3, 1, 1, mid), gains.conv, true, rng);
        let shortcut = LayerParams::init(ConvGeom::conv(in_c, width, 1, 2, 0, in_hw), gains.shortcut, false, rng);
        BlockModule {
            task,
            index,
            width,
            conv1,
            conv2,
            shortcut,
            tau1: S::of(gains.tau),
            tau2: S::of(gains.tau),
            updates: 0,
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let g = &self.conv1.geom;
        (g.in_c, g.in_h, g.in_w)
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        let g = &self.conv2.geom;
        (self.width, g.out_h(), g.out_w())
    }

    pub fn layers(&self) -> [(&'static str, &LayerParams<S>); 3] {
        [("conv1", &self.conv1), ("conv2", &self.conv2), ("shortcut", &self.shortcut)]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, &mut LayerParams<S>); 3] {
        [("conv1", &mut self.conv1), ("conv2", &mut self.conv2), ("shortcut", &mut self.shortcut)]
    }

    pub fn total_weights(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.weights.len()).sum()
    }

    pub fn active_weights(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.active_count()).sum()
    }

    pub fn zero_grads(&self) -> BlockGrads<S> {
        BlockGrads {
            conv1: LayerGrads::zeros_like(&self.conv1),
            conv2: LayerGrads::zeros_like(&self.conv2),
            shortcut: LayerGrads::zeros_like(&self.shortcut),
            tau1: S::zero(),
            tau2: S::zero(),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        self.conv1.visit_mut(f);
        f(std::slice::from_mut(&mut self.tau1), None);
        self.conv2.visit_mut(f);
        self.shortcut.visit_mut(f);
        f(std::slice::from_mut(&mut self.tau2), None);
    }

    pub fn forward(&self, input: Vec<Vec<S>>, cfg: &SpikeConfig, label: &str) -> Result<BlockTape<S>> {
        let mid_len = self.conv1.geom.output_len();
        let cur1: Vec<Vec<S>> = input
            .iter()
            .map(|x| {
                let mut c = vec![S::zero(); mid_len];
                self.conv1.forward(x, &mut c);
                c
            })
            .collect();
        let rec1 = plif_forward(&cur1, self.tau1, cfg, &format!("{label}.conv1"))?;
        let out_len = self.conv2.geom.output_len();
        let mut skip = vec![S::zero(); out_len];
        let cur2: Vec<Vec<S>> = rec1
            .spikes
            .iter()
            .zip(&input)
            .map(|(s1, x)| {
                let mut c = vec![S::zero(); out_len];
                self.conv2.forward(s1, &mut c);
                self.shortcut.forward(x, &mut skip);
                for (a, &b) in c.iter_mut().zip(&skip) {
                    *a += b;
                }
                c
            })
            .collect();
        let rec2 = plif_forward(&cur2, self.tau2, cfg, &format!("{label}.conv2"))?;
        Ok(BlockTape { input, rec1, rec2 })
    }

    /// Backward through the block; returns the input gradient per step when
    /// `need_input` is set.
    pub fn backward(&self, tape: &BlockTape<S>, grad_out: &[Vec<S>], grads: &mut BlockGrads<S>, cfg: &SpikeConfig, need_input: bool) -> Option<Vec<Vec<S>>> {
        let steps = tape.input.len();
        let (g_cur2, g_tau2) = plif_backward(&tape.rec2, grad_out, self.tau2, cfg);
        grads.tau2 += g_tau2;
        let in_len = self.conv1.geom.input_len();
        let mid_len = self.conv1.geom.output_len();
        let mut g_in = need_input.then(|| vec![vec![S::zero(); in_len]; steps]);
        let mut g_s1 = vec![vec![S::zero(); mid_len]; steps];
        for t in 0..steps {
            self.conv2.backward(&tape.rec1.spikes[t], &g_cur2[t], &mut grads.conv2, Some(&mut g_s1[t]));
            let gi = g_in.as_mut().map(|g| g[t].as_mut_slice());
            self.shortcut.backward(&tape.input[t], &g_cur2[t], &mut grads.shortcut, gi);
        }
        let (g_cur1, g_tau1) = plif_backward(&tape.rec1, &g_s1, self.tau1, cfg);
        grads.tau1 += g_tau1;
        let mut buf = vec![S::zero(); in_len];
        for t in 0..steps {
            if let Some(g_in) = g_in.as_mut() {
                self.conv1.backward(&tape.input[t], &g_cur1[t], &mut grads.conv1, Some(&mut buf));
                for (a, &b) in g_in[t].iter_mut().zip(&buf) {
                    *a += b;
                }
            } else {
                self.conv1.backward(&tape.input[t], &g_cur1[t], &mut grads.conv1, None);
            }
        }
        g_in
    }
}

impl<S: Scalar> BlockGrads<S> {
    pub fn add_assign(&mut self, o: &Self) {
        self.conv1.add_assign(&o.conv1);
        self.conv2.add_assign(&o.conv2);
        self.shortcut.add_assign(&o.shortcut);
        self.tau1 += o.tau1;
        self.tau2 += o.tau2;
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        self.conv1.visit(f);
        f(std::slice::from_mut(&mut self.tau1), None);
        self.conv2.visit(f);
        self.shortcut.visit(f);
        f(std::slice::from_mut(&mut self.tau2), None);
    }

    /// Zeroes gradients of masked weights.
    pub fn apply_masks(&mut self, block: &BlockModule<S>) {
        for (g, l) in [
            (&mut self.conv1, &block.conv1),
            (&mut self.conv2, &block.conv2),
            (&mut self.shortcut, &block.shortcut),
        ] {
            for (v, &m) in g.weights.iter_mut().zip(&l.mask) {
                if !m {
                    *v = S::zero();
                }
            }
        }
    }
}

/// The four blocks and readout head grown for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskColumn<S> {
    pub task: usize,
    pub spec: ColumnSpec,
    pub blocks: Vec<BlockModule<S>>,
    /// Linear readout over (final-block firing rates ++ state vector).
    pub head: LayerParams<S>,
    /// Bumped whenever the column's parameters or incoming edges change.
    pub version: u64,
}

#[derive(Debug, Clone)]
pub struct ColumnTape<S> {
    pub blocks: Vec<BlockTape<S>>,
    pub head_input: Vec<S>,
    pub output: Vec<S>,
}

impl<S: Scalar> ColumnTape<S> {
    pub fn block_outputs(&self) -> Vec<Vec<Vec<S>>> {
        self.blocks.iter().map(|b| b.rec2.spikes.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnGrads<S> {
    pub blocks: Vec<BlockGrads<S>>,
    pub head: LayerGrads<S>,
    pub adapters: Vec<LayerGrads<S>>,
}

impl<S: Scalar> GradBuffer<S> for ColumnGrads<S> {
    fn add_assign(&mut self, o: &Self) {
        for (a, b) in self.blocks.iter_mut().zip(&o.blocks) {
            a.add_assign(b);
        }
        self.head.add_assign(&o.head);
        for (a, b) in self.adapters.iter_mut().zip(&o.adapters) {
            a.add_assign(b);
        }
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        for b in &mut self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
        for a in &mut self.adapters {
            a.visit(f);
        }
    }
}

impl<S: Scalar> TaskColumn<S> {
    pub fn new<R: Rng + ?Sized>(task: usize, widths: [usize; BLOCKS], spec: ColumnSpec, gains: &InitGains, rng: &mut R) -> Self {
        let mut blocks = Vec::with_capacity(BLOCKS);
        let mut in_c = spec.in_c;
        let mut hw = spec.in_hw;
        for (i, &w) in widths.iter().enumerate() {
            let b = BlockModule::new(task, i + 1, in_c, w, hw, gains, rng);
            let (_, h, wd) = b.output_shape();
            hw = (h, wd);
            in_c = w;
            blocks.push(b);
        }
        let head = LayerParams::init(ConvGeom::dense(in_c + spec.state_dim, spec.outputs), gains.head, true, rng);
        TaskColumn {
            task,
            spec,
            blocks,
            head,
            version: 0,
        }
    }

    pub fn block(&self, b: usize) -> &BlockModule<S> {
        &self.blocks[b - 1]
    }

    pub fn block_mut(&mut self, b: usize) -> &mut BlockModule<S> {
        &mut self.blocks[b - 1]
    }

    pub fn zero_grads(&self, adapters: &[&LayerParams<S>]) -> ColumnGrads<S> {
        ColumnGrads {
            blocks: self.blocks.iter().map(BlockModule::zero_grads).collect(),
            head: LayerGrads::zeros_like(&self.head),
            adapters: adapters.iter().map(|a| LayerGrads::zeros_like(a)).collect(),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }

    /// `long_range[b-1][step]` is summed into block `b`'s input (empty = none).
    pub fn forward(&self, image: &[S], state: &[S], long_range: &[Vec<Vec<S>>], cfg: &SpikeConfig, task: usize) -> Result<ColumnTape<S>> {
        let steps = cfg.steps;
        let mut native: Vec<Vec<S>> = vec![image.to_vec(); steps];
        let mut tapes = Vec::with_capacity(BLOCKS);
        for (i, block) in self.blocks.iter().enumerate() {
            let lr = long_range.get(i).filter(|v| !v.is_empty());
            let input = match lr {
                Some(lr) => native
                    .into_iter()
                    .zip(lr)
                    .map(|(n, l)| super::merge_inputs(&n, &[l.as_slice()]))
                    .collect::<Result<Vec<_>>>()?,
                None => native,
            };
            let tape = block.forward(input, cfg, &format!("task{task}.block{}", i + 1))?;
            native = tape.rec2.spikes.clone();
            tapes.push(tape);
        }
        let last = &self.blocks[BLOCKS - 1];
        let (c, h, w) = last.output_shape();
        let norm = S::one() / S::of((steps * h * w) as f64);
        let sd = self.spec.state_dim;
        let mut head_input = vec![S::zero(); c + sd];
        for spikes in &native {
            for px in spikes.chunks_exact(c) {
                for (f, &v) in head_input.iter_mut().zip(px) {
                    *f += v * norm;
                }
            }
        }
        let n = sd.min(state.len());
        head_input[c..c + n].copy_from_slice(&state[..n]);
        let mut output = vec![S::zero(); self.head.geom.out_c];
        self.head.forward(&head_input, &mut output);
        Ok(ColumnTape {
            blocks: tapes,
            head_input,
            output,
        })
    }

    /// Backward from a gradient on the head output. Returns the gradient of
    /// each block's merged input (index `b-1`, empty for block 1).
    pub fn backward(&self, tape: &ColumnTape<S>, grad_output: &[S], grads: &mut ColumnGrads<S>, cfg: &SpikeConfig) -> Vec<Vec<Vec<S>>> {
        let steps = cfg.steps;
        let mut g_head_in = vec![S::zero(); tape.head_input.len()];
        self.head.backward(&tape.head_input, grad_output, &mut grads.head, Some(&mut g_head_in));
        let (c, h, w) = self.blocks[BLOCKS - 1].output_shape();
        let norm = S::one() / S::of((steps * h * w) as f64);
        let px: Vec<S> = g_head_in[..c].iter().map(|&g| g * norm).collect();
        let per_step: Vec<S> = (0..h * w).flat_map(|_| px.iter().copied()).collect();
        let mut g_out = vec![per_step; steps];
        let mut input_grads = vec![Vec::new(); BLOCKS];
        for i in (0..BLOCKS).rev() {
            let need = i > 0;
            let g = self.blocks[i].backward(&tape.blocks[i], &g_out, &mut grads.blocks[i], cfg, need);
            grads.blocks[i].apply_masks(&self.blocks[i]);
            if let Some(g) = g {
                g_out = g.clone();
                input_grads[i] = g;
            }
        }
        input_grads
    }
}
