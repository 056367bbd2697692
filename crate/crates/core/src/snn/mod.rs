//! Spiking primitives: PLIF dynamics, masked layers, surrogate-gradient training.

mod layer;
mod plif;
mod train;

pub use layer::{resample, ConvGeom, LayerGrads, LayerParams};
pub use plif::{plif_backward, plif_forward, plif_step, sigmoid, surrogate_spike_grad, PlifRecord, PlifState, SpikeConfig};
pub use train::{batch_grad, cross_entropy, mean_squared, train_step, GradBuffer, LossKind, Model, Sgd, SHARD};

use crate::{Result, Scalar};

/// Default learnable decay parameter (sigmoid(2.0) ~ 0.88).
pub const TAU_INIT: f64 = 2.0;

/// A single spiking layer read out by firing rate. Input is applied as a
/// constant current at every step. Used standalone for gradient checks and
/// small experiments.
#[derive(Debug, Clone)]
pub struct RateLayer<S> {
    pub params: LayerParams<S>,
    pub tau_raw: S,
    pub cfg: SpikeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateGrads<S> {
    pub layer: LayerGrads<S>,
    pub tau: S,
}

impl<S: Scalar> GradBuffer<S> for RateGrads<S> {
    fn add_assign(&mut self, other: &Self) {
        self.layer.add_assign(&other.layer);
        self.tau += other.tau;
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        self.layer.visit(f);
        f(std::slice::from_mut(&mut self.tau), None);
    }
}

impl<S: Scalar> RateLayer<S> {
    pub fn new(params: LayerParams<S>, cfg: SpikeConfig) -> Self {
        RateLayer {
            params,
            tau_raw: S::of(TAU_INIT),
            cfg,
        }
    }

    fn record(&self, input: &[S]) -> Result<PlifRecord<S>> {
        let mut cur = vec![S::zero(); self.params.geom.output_len()];
        self.params.forward(input, &mut cur);
        let currents = vec![cur; self.cfg.steps];
        plif_forward(&currents, self.tau_raw, &self.cfg, "rate-layer")
    }

    pub fn rates(&self, input: &[S]) -> Result<Vec<S>> {
        let rec = self.record(input)?;
        let n = S::of(self.cfg.steps as f64);
        let mut out = vec![S::zero(); self.params.geom.output_len()];
        for s in &rec.spikes {
            for (o, &v) in out.iter_mut().zip(s) {
                *o += v / n;
            }
        }
        Ok(out)
    }

    pub fn loss(&self, input: &[S], target: &[S]) -> Result<S> {
        Ok(mean_squared(&self.rates(input)?, target).0)
    }

    pub fn zero_grads(&self) -> RateGrads<S> {
        RateGrads {
            layer: LayerGrads::zeros_like(&self.params),
            tau: S::zero(),
        }
    }

    pub fn grad(&self, input: &[S], target: &[S], grads: &mut RateGrads<S>) -> Result<S> {
        let rec = self.record(input)?;
        let n = S::of(self.cfg.steps as f64);
        let mut rates = vec![S::zero(); self.params.geom.output_len()];
        for s in &rec.spikes {
            for (o, &v) in rates.iter_mut().zip(s) {
                *o += v / n;
            }
        }
        let (loss, g_rate) = mean_squared(&rates, target);
        let g_spk: Vec<S> = g_rate.iter().map(|&g| g / n).collect();
        let grad_spikes = vec![g_spk; self.cfg.steps];
        let (g_cur, g_tau) = plif_backward(&rec, &grad_spikes, self.tau_raw, &self.cfg);
        // constant input: current gradients sum over steps
        let mut g_total = vec![S::zero(); g_rate.len()];
        for g in &g_cur {
            for (a, &b) in g_total.iter_mut().zip(g) {
                *a += b;
            }
        }
        self.params.backward(input, &g_total, &mut grads.layer, None);
        for (g, &m) in grads.layer.weights.iter_mut().zip(&self.params.mask) {
            if !m {
                *g = S::zero();
            }
        }
        grads.tau += g_tau;
        Ok(loss)
    }
}

/// A [`RateLayer`] bound to a fixed regression dataset.
#[derive(Debug, Clone)]
pub struct RateTask<S> {
    pub layer: RateLayer<S>,
    pub inputs: Vec<Vec<S>>,
    pub targets: Vec<Vec<S>>,
}

impl<S: Scalar> Model<S> for RateTask<S> {
    type Grads = RateGrads<S>;

    fn zero_grads(&self) -> RateGrads<S> {
        self.layer.zero_grads()
    }

    fn sample_grad(&self, sample: usize, grads: &mut RateGrads<S>) -> Result<S> {
        self.layer.grad(&self.inputs[sample], &self.targets[sample], grads)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        self.layer.params.visit_mut(f);
        f(std::slice::from_mut(&mut self.layer.tau_raw), None);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_diff(task: &RateTask<f64>, which: &dyn Fn(&mut RateLayer<f64>) -> &mut f64) -> f64 {
        let h = 1e-6;
        let mut plus = task.layer.clone();
        *which(&mut plus) += h;
        let mut minus = task.layer.clone();
        *which(&mut minus) -= h;
        let lp = plus.loss(&task.inputs[0], &task.targets[0]).unwrap();
        let lm = minus.loss(&task.inputs[0], &task.targets[0]).unwrap();
        (lp - lm) / (2.0 * h)
    }

    fn relaxed_task(seed: u64) -> RateTask<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = LayerParams::init(ConvGeom::dense(6, 4), 3.0, true, &mut rng);
        let mut layer = RateLayer::new(params, SpikeConfig::relaxed(4));
        layer.tau_raw = rng.random_range(-1.0..2.0);
        RateTask {
            layer,
            inputs: vec![(0..6).map(|_| rng.random::<f64>()).collect()],
            targets: vec![(0..4).map(|_| rng.random::<f64>()).collect()],
        }
    }

    #[test]
    fn dense_relaxed_gradient_matches_finite_differences() {
        let task = relaxed_task(11);
        let mut g = task.zero_grads();
        task.sample_grad(0, &mut g).unwrap();
        for i in 0..task.layer.params.weights.len() {
            let fd = central_diff(&task, &|l| &mut l.params.weights[i]);
            assert!((fd - g.layer.weights[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "w{i}: {fd} vs {}", g.layer.weights[i]);
        }
        let fd = central_diff(&task, &|l| &mut l.tau_raw);
        assert!((fd - g.tau).abs() <= 1e-4 * fd.abs().max(1e-3));
    }

    #[test]
    fn all_masked_set_leaves_weights_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = LayerParams::<f64>::init(ConvGeom::dense(3, 2), 1.0, false, &mut rng);
        for i in 0..params.weights.len() {
            params.prune(i);
        }
        let mut task = RateTask {
            layer: RateLayer::new(params, SpikeConfig::default()),
            inputs: vec![vec![1.0, 0.5, 0.2]],
            targets: vec![vec![1.0, 0.0]],
        };
        let before = task.layer.params.weights.clone();
        let mut opt = Sgd::new(0.1, 0.9, None);
        let loss = train_step(&mut task, &[0], &mut opt).unwrap();
        assert!(loss.is_finite());
        assert_eq!(task.layer.params.weights, before);
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..64 {
            let x: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let label = x[0] + x[1] > x[2] + x[3];
            inputs.push(x);
            targets.push(if label { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
        }
        let params = LayerParams::init(ConvGeom::dense(4, 2), 2.0, true, &mut rng);
        let mut task = RateTask {
            layer: RateLayer::new(params, SpikeConfig::default()),
            inputs,
            targets,
        };
        let batch: Vec<usize> = (0..64).collect();
        let mut opt = Sgd::new(0.5, 0.9, None);
        let first = batch_grad(&task, &batch).unwrap().0;
        for _ in 0..50 {
            train_step(&mut task, &batch, &mut opt).unwrap();
        }
        let last = batch_grad(&task, &batch).unwrap().0;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn batch_gradient_is_deterministic() {
        let task = relaxed_task(8);
        let a = batch_grad(&task, &[0, 0, 0, 0, 0]).unwrap();
        let b = batch_grad(&task, &[0, 0, 0, 0, 0]).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}
