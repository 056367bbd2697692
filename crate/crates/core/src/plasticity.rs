//! Hebbian traces, generality scores, threshold coefficients and the
//! inhibition/pruning transform applied to earlier columns.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evolution::ChoiceMatrix;
use crate::snn::LayerParams;
use crate::topology::{to_scalars, SampleSet};
use crate::topology::{ColumnGraph, BLOCKS, OPTIONS};
use crate::{Error, Result, Scalar};

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_MATURITY: f64 = 3.0;
pub const PRUNE_QUANTILE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceState {
    pub trace: Vec<f64>,
    pub alpha: f64,
}

impl TraceState {
    pub fn new(n: usize, alpha: f64) -> Self {
        TraceState { trace: vec![0.0; n], alpha }
    }

    pub fn step(&mut self, spikes: &[f64]) {
        for (t, &s) in self.trace.iter_mut().zip(spikes) {
            *t = self.alpha * *t + s;
        }
    }
}

/// `trace <- alpha * trace + spike`.
pub fn update_trace(mut state: TraceState, spikes: &[f64]) -> TraceState {
    state.step(spikes);
    state
}

/// Min-max normalization to [0,1]; constant input maps to all zeros.
pub fn normalize01(v: &mut [f64]) {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

/// Post-by-pre plasticity matrix, row-major over post neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HebbianMatrix {
    pub post: usize,
    pub pre: usize,
    pub h: Vec<f64>,
}

impl HebbianMatrix {
    pub fn raw(post: &[f64], pre: &[f64]) -> Self {
        let h = post.iter().flat_map(|&a| pre.iter().map(move |&b| a * b)).collect();
        HebbianMatrix {
            post: post.len(),
            pre: pre.len(),
            h,
        }
    }

    pub fn get(&self, post: usize, pre: usize) -> f64 {
        self.h[post * self.pre + pre]
    }

    pub fn mean(&self) -> f64 {
        if self.h.is_empty() {
            0.0
        } else {
            self.h.iter().sum::<f64>() / self.h.len() as f64
        }
    }
}

/// Normalized outer product of end-of-window traces.
pub fn hebbian_matrix(pre: &[f64], post: &[f64]) -> HebbianMatrix {
    let mut m = HebbianMatrix::raw(post, pre);
    normalize01(&mut m.h);
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HebbianScope {
    Layer,
    Network,
}

impl std::str::FromStr for HebbianScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "layer" => Ok(HebbianScope::Layer),
            "network" => Ok(HebbianScope::Network),
            other => Err(format!("expected layer|network, got `{other}`")),
        }
    }
}

impl std::fmt::Display for HebbianScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HebbianScope::Layer => "layer",
            HebbianScope::Network => "network",
        })
    }
}

/// How much later tasks reuse block `block` of task `task`.
///
/// Each later task contributes the probability that at least one of its
/// rows referencing `task` selects `block` as source, so every summand lies
/// in [0,1].
pub fn generality(later: &[&ChoiceMatrix], task: usize, block: usize) -> f64 {
    if !(2..=BLOCKS).contains(&block) {
        return 0.0;
    }
    let option = block + 1;
    debug_assert!(option < OPTIONS);
    later
        .iter()
        .filter(|m| m.task > task)
        .map(|m| {
            let miss: f64 = m.rows.iter().filter(|r| r.src_task == task).map(|r| 1.0 - r.p[option]).product();
            1.0 - miss
        })
        .sum()
}

pub fn threshold_coeff(h: f64, e: f64, n: u32, maturity: f64) -> f64 {
    (n as f64 / maturity).min(1.0) * (1.0 - (-2.0 * (h + e)).exp())
}

/// `V = min(1, n/N) * (1 - exp(-2 (H + E)))` elementwise.
pub fn threshold_coeffs(h: &[f64], e: f64, n: u32, maturity: f64) -> Result<Vec<f64>> {
    if !(maturity > 0.0) {
        return Err(Error::InvalidConfig(format!("plasticity.N must be > 0, got {maturity}")));
    }
    Ok(h.iter().map(|&h| threshold_coeff(h, e, n, maturity)).collect())
}

/// Per-weight coefficients for a conv layer from its kernel-level H.
pub fn layer_coeffs<S>(layer: &LayerParams<S>, hebb: &HebbianMatrix, e: f64, n: u32, maturity: f64) -> Result<Vec<f64>> {
    let g = &layer.geom;
    debug_assert_eq!((hebb.post, hebb.pre), (g.out_c, g.in_c));
    let v = threshold_coeffs(&hebb.h, e, n, maturity)?;
    let mut out = vec![0.0; layer.weights.len()];
    for ky in 0..g.k {
        for kx in 0..g.k {
            for ic in 0..g.in_c {
                let row = g.row(ky, kx, ic);
                for oc in 0..g.out_c {
                    out[row + oc] = v[oc * g.in_c + ic];
                }
            }
        }
    }
    Ok(out)
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneStats {
    pub active_before: usize,
    pub active_after: usize,
    pub quantile: f64,
    pub mean_v: f64,
}

/// `w <- sign(w) * max(0, |w| - V q)` with `q` the 0.8 quantile of active
/// `|w|`; weights that reach zero are masked for good.
pub fn inhibit_and_prune<S: Scalar>(layer: &mut LayerParams<S>, v: &[f64]) -> PruneStats {
    assert_eq!(v.len(), layer.weights.len());
    let active: Vec<f64> = layer
        .weights
        .iter()
        .zip(&layer.mask)
        .filter(|(_, &m)| m)
        .map(|(w, _)| w.as_f64().abs())
        .collect();
    let before = active.len();
    if before == 0 {
        log::warn!("inhibit_and_prune: layer has no active weights; skipped");
        return PruneStats {
            active_before: 0,
            active_after: 0,
            quantile: 0.0,
            mean_v: 0.0,
        };
    }
    let q = quantile(&active, PRUNE_QUANTILE);
    let mut v_sum = 0.0;
    for i in 0..layer.weights.len() {
        if !layer.mask[i] {
            continue;
        }
        v_sum += v[i];
        let w = layer.weights[i].as_f64();
        let mag = (w.abs() - v[i] * q).max(0.0);
        if mag == 0.0 {
            layer.prune(i);
        } else {
            layer.weights[i] = S::of(w.signum() * mag);
        }
    }
    PruneStats {
        active_before: before,
        active_after: layer.active_count(),
        quantile: q,
        mean_v: v_sum / before as f64,
    }
}

/// Per-channel end-of-window traces of one block on a probe batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTraces {
    /// Merged block input (pre of conv1 and shortcut).
    pub input: Vec<f64>,
    /// First spiking layer (post of conv1, pre of conv2).
    pub mid: Vec<f64>,
    /// Block output (post of conv2 and shortcut).
    pub output: Vec<f64>,
}

impl BlockTraces {
    fn zeros(in_c: usize, width: usize) -> Self {
        BlockTraces {
            input: vec![0.0; in_c],
            mid: vec![0.0; width],
            output: vec![0.0; width],
        }
    }

    fn add(&mut self, o: &Self) {
        for (a, b) in [(&mut self.input, &o.input), (&mut self.mid, &o.mid), (&mut self.output, &o.output)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for v in [&mut self.input, &mut self.mid, &mut self.output] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Raw (unnormalized) matrices for conv1, conv2, shortcut.
    pub fn raw_matrices(&self) -> [HebbianMatrix; 3] {
        [
            HebbianMatrix::raw(&self.mid, &self.input),
            HebbianMatrix::raw(&self.output, &self.mid),
            HebbianMatrix::raw(&self.output, &self.input),
        ]
    }
}

/// Runs channels-last activity through a trace per neuron and returns the
/// end-of-window trace averaged over spatial positions, per channel.
pub fn channel_traces<S: Scalar>(steps: &[Vec<S>], channels: usize, alpha: f64) -> Vec<f64> {
    let n = steps.first().map_or(0, Vec::len);
    let mut st = TraceState::new(n, alpha);
    let mut buf = vec![0.0; n];
    for s in steps {
        for (b, v) in buf.iter_mut().zip(s) {
            *b = v.as_f64();
        }
        st.step(&buf);
    }
    let mut out = vec![0.0; channels];
    if n == 0 {
        return out;
    }
    for px in st.trace.chunks_exact(channels) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let positions = (n / channels) as f64;
    out.iter_mut().for_each(|o| *o /= positions);
    out
}

/// Seeded probe subset of `len` samples.
pub fn probe_indices(len: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(size.min(len));
    idx.sort_unstable();
    idx
}

/// Mean per-block traces of `task`'s column over the probe samples.
pub fn probe_traces<S: Scalar, D: SampleSet>(graph: &ColumnGraph<S>, task: usize, data: &D, indices: &[usize], alpha: f64) -> Result<Vec<BlockTraces>> {
    let col = graph.column(task);
    let zero: Vec<BlockTraces> = col.blocks.iter().map(|b| BlockTraces::zeros(b.input_shape().0, b.width)).collect();
    let per_sample: Vec<Vec<BlockTraces>> = indices
        .par_iter()
        .map(|&i| {
            let image = to_scalars::<S>(data.image(i));
            let state = to_scalars::<S>(data.state(i));
            let (_, tape) = graph.forward_with_tape(task, &image, &state)?;
            Ok(tape
                .blocks
                .iter()
                .zip(&col.blocks)
                .map(|(t, b)| BlockTraces {
                    input: channel_traces(&t.input, b.input_shape().0, alpha),
                    mid: channel_traces(&t.rec1.spikes, b.width, alpha),
                    output: channel_traces(&t.rec2.spikes, b.width, alpha),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut total = zero;
    for s in &per_sample {
        for (t, b) in total.iter_mut().zip(s) {
            t.add(b);
        }
    }
    if !indices.is_empty() {
        total.iter_mut().for_each(|t| t.scale(1.0 / indices.len() as f64));
    }
    Ok(total)
}

/// Normalized H for every (block, layer) of a column, ordered
/// `[block][conv1, conv2, shortcut]`.
pub fn column_hebbian(traces: &[BlockTraces], scope: HebbianScope) -> Vec<[HebbianMatrix; 3]> {
    let mut mats: Vec<[HebbianMatrix; 3]> = traces.iter().map(BlockTraces::raw_matrices).collect();
    match scope {
        HebbianScope::Layer => mats.iter_mut().flatten().for_each(|m| normalize01(&mut m.h)),
        HebbianScope::Network => {
            let (lo, hi) = mats
                .iter()
                .flatten()
                .flat_map(|m| m.h.iter())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            let span = hi - lo;
            for m in mats.iter_mut().flatten() {
                m.h.iter_mut().for_each(|x| *x = if span > 0.0 { (*x - lo) / span } else { 0.0 });
            }
        }
    }
    mats
}

/// One block's outcome in a pruning round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub round: usize,
    pub task: usize,
    pub block: usize,
    pub active_before: usize,
    pub active_after: usize,
    pub mean_v: f64,
    pub mean_h: f64,
    pub e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSettings {
    pub alpha: f64,
    pub maturity: f64,
    pub probe_size: usize,
    pub scope: HebbianScope,
    /// Whether generality from later choice matrices enters V.
    pub use_generality: bool,
}

impl Default for PruneSettings {
    fn default() -> Self {
        PruneSettings {
            alpha: DEFAULT_ALPHA,
            maturity: DEFAULT_MATURITY,
            probe_size: 256,
            scope: HebbianScope::Layer,
            use_generality: true,
        }
    }
}

/// Inhibits and prunes every block of `task`'s column. `later` holds the
/// finalized choice matrices of tasks after `task`.
pub fn prune_column<S: Scalar, D: SampleSet>(
    graph: &mut ColumnGraph<S>,
    task: usize,
    data: &D,
    later: &[&ChoiceMatrix],
    settings: &PruneSettings,
    round: usize,
    seed: u64,
) -> Result<Vec<PruneRecord>> {
    let indices = probe_indices(data.len(), settings.probe_size, seed);
    let traces = probe_traces(graph, task, data, &indices, settings.alpha)?;
    let hebb = column_hebbian(&traces, settings.scope);
    let col = graph.column_mut(task);
    let mut records = Vec::with_capacity(BLOCKS);
    for (b, mats) in hebb.iter().enumerate() {
        let block = &mut col.blocks[b];
        let e = if settings.use_generality { generality(later, task, b + 1) } else { 0.0 };
        let n = block.updates;
        let mut before = 0;
        let mut after = 0;
        let mut v_weighted = 0.0;
        for ((_, layer), m) in block.layers_mut().into_iter().zip(mats) {
            let v = layer_coeffs(layer, m, e, n, settings.maturity)?;
            let s = inhibit_and_prune(layer, &v);
            before += s.active_before;
            after += s.active_after;
            v_weighted += s.mean_v * s.active_before as f64;
        }
        let n_h: usize = mats.iter().map(|m| m.h.len()).sum();
        let mean_h = mats.iter().map(|m| m.h.iter().sum::<f64>()).sum::<f64>() / n_h.max(1) as f64;
        records.push(PruneRecord {
            round,
            task,
            block: b + 1,
            active_before: before,
            active_after: after,
            mean_v: if before > 0 { v_weighted / before as f64 } else { 0.0 },
            mean_h,
            e,
        });
    }
    col.version += 1;
    Ok(records)
}

/// One conv kernel (post channel x pre channel slice of a layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelStat {
    pub task: usize,
    pub block: usize,
    pub layer: String,
    pub post: usize,
    pub pre: usize,
    pub mean_h: f64,
    pub pruned_fraction: f64,
}

/// Kernel-level (mean H, pruned fraction) table for one column.
pub fn correlate_plasticity_pruning<S: Scalar>(graph: &ColumnGraph<S>, task: usize, hebb: &[[HebbianMatrix; 3]]) -> Vec<KernelStat> {
    let col = graph.column(task);
    let mut out = Vec::new();
    for (b, (block, mats)) in col.blocks.iter().zip(hebb).enumerate() {
        for ((name, layer), m) in block.layers().into_iter().zip(mats) {
            let g = &layer.geom;
            let taps = g.k * g.k;
            for oc in 0..g.out_c {
                for ic in 0..g.in_c {
                    let mut pruned = 0;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            if !layer.mask[g.row(ky, kx, ic) + oc] {
                                pruned += 1;
                            }
                        }
                    }
                    out.push(KernelStat {
                        task,
                        block: b + 1,
                        layer: name.to_string(),
                        post: oc,
                        pre: ic,
                        mean_h: m.get(oc, ic),
                        pruned_fraction: pruned as f64 / taps as f64,
                    });
                }
            }
        }
    }
    out
}

/// Average ranks, ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; NaN when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::init_choice_matrix;
    use crate::snn::ConvGeom;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn layer(ws: &[f64]) -> LayerParams<f64> {
        let mut l = LayerParams::zeros(ConvGeom::dense(1, ws.len()), false);
        l.weights.copy_from_slice(ws);
        l
    }

    #[test]
    fn trace_recurrence() {
        let s = update_trace(TraceState::new(1, 0.5), &[1.0]);
        let s = update_trace(s, &[1.0]);
        assert_eq!(s.trace, vec![1.5]);
        let s = update_trace(update_trace(TraceState::new(1, 0.0), &[1.0]), &[0.0]);
        assert_eq!(s.trace, vec![0.0]);
        let mut z = TraceState::new(3, 0.7);
        for _ in 0..5 {
            z.step(&[0.0; 3]);
        }
        assert_eq!(z.trace, vec![0.0; 3]);
    }

    #[test]
    fn hebbian_hand_case() {
        let m = hebbian_matrix(&[1.0, 3.0], &[2.0, 1.0]);
        let want = [0.2, 1.0, 0.0, 0.4];
        for (a, b) in m.h.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", m.h);
        }
        assert!(hebbian_matrix(&[0.0; 3], &[0.0; 2]).h.iter().all(|&v| v == 0.0));
        let scaled = hebbian_matrix(&[3.0, 9.0], &[6.0, 3.0]);
        for (a, b) in m.h.iter().zip(&scaled.h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn generality_sums_later_tasks() {
        assert_eq!(generality(&[], 1, 3), 0.0);
        let mut m2 = init_choice_matrix(2).unwrap();
        for r in &mut m2.rows {
            r.p = [0.0; 6];
            r.p[0] = 1.0;
        }
        m2.rows[0].p = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(generality(&[&m2], 1, 3), 1.0);
        assert_eq!(generality(&[&m2], 1, 2), 0.0);

        let mut m3 = init_choice_matrix(3).unwrap();
        for r in &mut m3.rows {
            r.p = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        }
        m2.rows[0].p = [0.7, 0.0, 0.0, 0.0, 0.3, 0.0];
        let row = m3.rows.iter_mut().find(|r| r.src_task == 1).unwrap();
        row.p = [0.5, 0.0, 0.0, 0.0, 0.5, 0.0];
        assert!((generality(&[&m2, &m3], 1, 3) - 0.8).abs() < 1e-12);
        // block 1 is never a long-range source
        assert_eq!(generality(&[&m2, &m3], 1, 1), 0.0);
    }

    #[test]
    fn threshold_hand_cases() {
        assert_eq!(threshold_coeffs(&[0.7], 2.0, 0, 3.0).unwrap(), vec![0.0]);
        assert_eq!(threshold_coeffs(&[0.0], 0.0, 5, 3.0).unwrap(), vec![0.0]);
        let v = threshold_coeffs(&[0.5], 0.5, 3, 3.0).unwrap()[0];
        assert!((v - (1.0 - (-2.0f64).exp())).abs() < 1e-12);
        assert!((v - 0.8647).abs() < 1e-4);
        assert!(matches!(threshold_coeffs(&[0.5], 0.5, 3, 0.0), Err(Error::InvalidConfig(_))));
        assert!(threshold_coeffs(&[0.5], 0.5, 3, -1.0).is_err());
    }

    #[test]
    fn prune_hand_cases() {
        assert!((quantile(&[0.1, 0.2, 0.3, 0.4, 0.5], 0.8) - 0.42).abs() < 1e-12);
        let mut l = layer(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let s = inhibit_and_prune(&mut l, &[0.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((s.quantile - 0.42).abs() < 1e-12);
        assert!(!l.mask[2] && l.weights[2] == 0.0);
        assert!((l.weights[4] - 0.08).abs() < 1e-12);
        assert_eq!(&l.weights[..2], &[0.1, 0.2]);
        assert_eq!(s.active_after, 4);

        // q = 0.4: the 0.8 quantile lands on the fifth of six order statistics
        let mut l = layer(&[-0.9, 0.4, 0.4, 0.4, 0.4, 0.4]);
        assert!((quantile(&[0.9, 0.4, 0.4, 0.4, 0.4, 0.4], 0.8) - 0.4).abs() < 1e-12);
        inhibit_and_prune(&mut l, &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((l.weights[0] + 0.7).abs() < 1e-12);

        let mut l = layer(&[0.3, -0.2]);
        let before = l.clone();
        inhibit_and_prune(&mut l, &[0.0, 0.0]);
        assert_eq!(l, before);

        let mut l = layer(&[0.3, -0.2]);
        l.prune(0);
        l.prune(1);
        let s = inhibit_and_prune(&mut l, &[1.0, 1.0]);
        assert_eq!((s.active_before, s.active_after), (0, 0));
    }

    #[test]
    fn zero_plasticity_kernel_prunes_at_least_as_much_under_equal_v() {
        // Two 3x3 kernels, same weights: H=0 and H=1 with E, n chosen so
        // that both see the same V (n = 0 disables inhibition entirely; with
        // maturity the coefficient is monotone in H).
        let mut l: LayerParams<f64> = LayerParams::zeros(ConvGeom::conv(1, 2, 3, 1, 1, (3, 3)), false);
        for ky in 0..3 {
            for kx in 0..3 {
                let r = l.geom.row(ky, kx, 0);
                let w = 0.1 * (1 + ky * 3 + kx) as f64;
                l.weights[r] = w;
                l.weights[r + 1] = w;
            }
        }
        let hebb = HebbianMatrix { post: 2, pre: 1, h: vec![0.0, 1.0] };
        let big_e = 50.0; // saturates the H dependence: equal V
        let v = layer_coeffs(&l, &hebb, big_e, 3, 3.0).unwrap();
        inhibit_and_prune(&mut l, &v);
        let graph_free = |oc: usize| (0..9).filter(|&t| !l.mask[t * 2 + oc]).count();
        assert!(graph_free(0) >= graph_free(1));

        // Without saturation V grows with H, so the high-H kernel is pruned
        // at least as hard.
        let mut l2 = l.clone();
        l2.mask.iter_mut().for_each(|m| *m = true);
        for ky in 0..3 {
            for kx in 0..3 {
                let r = l2.geom.row(ky, kx, 0);
                let w = 0.1 * (1 + ky * 3 + kx) as f64;
                l2.weights[r] = w;
                l2.weights[r + 1] = w;
            }
        }
        let v = layer_coeffs(&l2, &hebb, 0.0, 3, 3.0).unwrap();
        inhibit_and_prune(&mut l2, &v);
        let pruned = |oc: usize| (0..9).filter(|&t| !l2.mask[t * 2 + oc]).count();
        assert!(pruned(1) >= pruned(0));
    }

    #[test]
    fn channel_traces_average_positions() {
        // two positions, two channels, alpha 0.5, steps (1,1) on position 0 ch 0
        let steps = vec![vec![1.0f64, 0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]];
        let t = channel_traces(&steps, 2, 0.5);
        assert_eq!(t, vec![0.75, 0.5]);
    }

    #[test]
    fn spearman_reference() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // tied data: hand-computed Pearson on ranks
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((r - 0.9486832980505138).abs() < 1e-12, "{r}");
    }

    #[test]
    fn probe_indices_deterministic() {
        assert_eq!(probe_indices(100, 10, 3), probe_indices(100, 10, 3));
        assert_eq!(probe_indices(5, 10, 3), vec![0, 1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn prune_contracts_and_is_monotone(
            ws in prop::collection::vec(-2.0f64..2.0, 1..30),
            seed_v in prop::collection::vec(0.0f64..1.0, 30),
            bump in 0.0f64..0.5,
            which in 0usize..30,
        ) {
            let v: Vec<f64> = seed_v[..ws.len()].to_vec();
            let mut a = layer(&ws);
            inhibit_and_prune(&mut a, &v);
            for (w, w2) in ws.iter().zip(&a.weights) {
                prop_assert!(w2.abs() <= w.abs());
                prop_assert!(*w2 == 0.0 || w2.signum() == w.signum());
            }
            let i = which % ws.len();
            let mut v2 = v.clone();
            v2[i] = (v2[i] + bump).min(1.0);
            let mut b = layer(&ws);
            inhibit_and_prune(&mut b, &v2);
            prop_assert!(b.weights[i].abs() <= a.weights[i].abs());
            // masked weights stay masked in later rounds
            let masked: Vec<bool> = a.mask.clone();
            inhibit_and_prune(&mut a, &vec![0.0; ws.len()]);
            for (m0, m1) in masked.iter().zip(&a.mask) {
                prop_assert!(*m0 || !*m1);
            }
        }

        #[test]
        fn coefficients_bounded_and_monotone(h in 0.0f64..1.0, e in 0.0f64..10.0, n in 0u32..6, dh in 0.0f64..0.5, de in 0.0f64..1.0) {
            let v = threshold_coeff(h, e, n, 3.0);
            prop_assert!((0.0..1.0).contains(&v));
            prop_assert!(threshold_coeff((h + dh).min(1.0), e, n, 3.0) >= v);
            prop_assert!(threshold_coeff(h, e + de, n, 3.0) >= v);
            prop_assert!(threshold_coeff(h, e, n + 1, 3.0) >= v);
        }

        #[test]
        fn trace_matches_closed_form(spikes in prop::collection::vec(prop::bool::ANY, 1..12), alpha in 0.0f64..0.99) {
            let mut st = TraceState::new(1, alpha);
            for &s in &spikes {
                st.step(&[s as u8 as f64]);
            }
            let steps = spikes.len();
            let closed: f64 = spikes.iter().enumerate().map(|(s, &b)| alpha.powi((steps - 1 - s) as i32) * (b as u8 as f64)).sum();
            prop_assert!((st.trace[0] - closed).abs() < 1e-12);
            prop_assert!(st.trace[0] >= 0.0);
        }

        #[test]
        fn normalized_hebbian_in_unit_interval(pre in prop::collection::vec(0.0f64..5.0, 1..6), post in prop::collection::vec(0.0f64..5.0, 1..6)) {
            let m = hebbian_matrix(&pre, &post);
            prop_assert_eq!(m.h.len(), pre.len() * post.len());
            prop_assert!(m.h.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
