//! Parametric leaky integrate-and-fire dynamics.
//!
//! `U[t] = sigmoid(tau_raw) * U~[t-1] + I[t]`, spike when `U[t] >= v_th`, and
//! the carried membrane is `U~[t] = U[t] * (1 - S[t])` (reset to zero).

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Logistic-derivative surrogate for dS/dU, peaking at `beta / 4` when `u == v_th`.
pub fn surrogate_spike_grad<S: Scalar>(u: S, v_th: S, beta: S) -> S {
    let s = sigmoid(beta * (u - v_th));
    beta * s * (S::one() - s)
}

/// Knobs shared by every spiking layer of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeConfig {
    pub steps: usize,
    pub v_th: f64,
    pub beta: f64,
    /// Replace the Heaviside spike by its logistic primitive in the forward
    /// pass (used to check gradients against finite differences).
    pub relaxed: bool,
    /// Drop the dependence of the reset on U in the backward pass.
    pub detach_reset: bool,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        SpikeConfig {
            steps: 4,
            v_th: 1.0,
            beta: 4.0,
            relaxed: false,
            detach_reset: true,
        }
    }
}

impl SpikeConfig {
    pub fn relaxed(steps: usize) -> Self {
        SpikeConfig {
            steps,
            relaxed: true,
            detach_reset: false,
            ..Default::default()
        }
    }

    fn spike<S: Scalar>(&self, u: S) -> S {
        let v_th = S::of(self.v_th);
        if self.relaxed {
            sigmoid(S::of(self.beta) * (u - v_th))
        } else if u >= v_th {
            S::one()
        } else {
            S::zero()
        }
    }
}

/// Single-neuron-population state for stepwise simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PlifState<S> {
    pub membrane: Vec<S>,
    pub tau_raw: S,
    pub v_th: S,
}

impl<S: Scalar> PlifState<S> {
    pub fn new(n: usize, tau_raw: S, v_th: S) -> Self {
        PlifState {
            membrane: vec![S::zero(); n],
            tau_raw,
            v_th,
        }
    }

    pub fn decay(&self) -> S {
        sigmoid(self.tau_raw)
    }
}

/// One hard-threshold step. Returns the integrated membrane (before reset) and
/// the spikes; `state.membrane` is left holding the post-reset value.
pub fn plif_step<S: Scalar>(state: &mut PlifState<S>, current: &[S], layer: &str) -> Result<(Vec<S>, Vec<S>)> {
    let decay = state.decay();
    let mut integrated = Vec::with_capacity(current.len());
    let mut spikes = Vec::with_capacity(current.len());
    for (m, &i) in state.membrane.iter_mut().zip(current) {
        let u = decay * *m + i;
        if !u.is_finite() {
            return Err(Error::Divergence { location: layer.to_string() });
        }
        let s = if u >= state.v_th { S::one() } else { S::zero() };
        *m = u * (S::one() - s);
        integrated.push(u);
        spikes.push(s);
    }
    Ok((integrated, spikes))
}

/// Per-step record of a layer's membranes and spikes, kept for BPTT.
#[derive(Debug, Clone)]
pub struct PlifRecord<S> {
    /// Integrated membrane before reset, per step.
    pub membrane: Vec<Vec<S>>,
    pub spikes: Vec<Vec<S>>,
}

/// Runs a population over the whole window.
pub fn plif_forward<S: Scalar>(currents: &[Vec<S>], tau_raw: S, cfg: &SpikeConfig, layer: &str) -> Result<PlifRecord<S>> {
    let n = currents.first().map_or(0, Vec::len);
    let decay = sigmoid(tau_raw);
    let mut carried = vec![S::zero(); n];
    let mut membrane = Vec::with_capacity(currents.len());
    let mut spikes = Vec::with_capacity(currents.len());
    for cur in currents {
        let mut u_t = Vec::with_capacity(n);
        let mut s_t = Vec::with_capacity(n);
        for (c, &i) in carried.iter_mut().zip(cur) {
            let u = decay * *c + i;
            if !u.is_finite() {
                return Err(Error::Divergence { location: layer.to_string() });
            }
            let s = cfg.spike(u);
            *c = u * (S::one() - s);
            u_t.push(u);
            s_t.push(s);
        }
        membrane.push(u_t);
        spikes.push(s_t);
    }
    Ok(PlifRecord { membrane, spikes })
}

/// Backpropagates spike gradients through time. Returns the gradient w.r.t.
/// each step's input current and w.r.t. `tau_raw`.
pub fn plif_backward<S: Scalar>(rec: &PlifRecord<S>, grad_spikes: &[Vec<S>], tau_raw: S, cfg: &SpikeConfig) -> (Vec<Vec<S>>, S) {
    let steps = rec.membrane.len();
    let n = rec.membrane.first().map_or(0, Vec::len);
    let decay = sigmoid(tau_raw);
    let ddecay = decay * (S::one() - decay);
    let (v_th, beta) = (S::of(cfg.v_th), S::of(cfg.beta));
    let mut grad_cur = vec![vec![S::zero(); n]; steps];
    // dL/dU~[t], flowing back from step t+1
    let mut carry = vec![S::zero(); n];
    let mut grad_tau = S::zero();
    for t in (0..steps).rev() {
        let (u_t, s_t, gs_t) = (&rec.membrane[t], &rec.spikes[t], &grad_spikes[t]);
        for i in 0..n {
            let u = u_t[i];
            let s = s_t[i];
            let ds = surrogate_spike_grad(u, v_th, beta);
            let mut dreset = S::one() - s;
            if !cfg.detach_reset {
                dreset -= u * ds;
            }
            let gu = gs_t[i] * ds + carry[i] * dreset;
            grad_cur[t][i] = gu;
            if t > 0 {
                let prev_u = rec.membrane[t - 1][i];
                let prev_carried = prev_u * (S::one() - rec.spikes[t - 1][i]);
                grad_tau += gu * ddecay * prev_carried;
            }
            carry[i] = gu * decay;
        }
    }
    (grad_cur, grad_tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau_for_decay(d: f64) -> f64 {
        (d / (1.0 - d)).ln()
    }

    #[test]
    fn zero_dynamics() {
        let mut st = PlifState::new(1, 2.0f64, 1.0);
        let (u, s) = plif_step(&mut st, &[0.0], "l").unwrap();
        assert_eq!((u[0], s[0]), (0.0, 0.0));
    }

    #[test]
    fn fires_and_resets() {
        let mut st = PlifState::new(1, tau_for_decay(0.5), 1.0);
        st.membrane[0] = 1.0;
        let (u, s) = plif_step(&mut st, &[0.6], "l").unwrap();
        assert!((u[0] - 1.1).abs() < 1e-12);
        assert_eq!(s[0], 1.0);
        assert_eq!(st.membrane[0], 0.0);
    }

    #[test]
    fn subthreshold_integration() {
        let mut st = PlifState::new(1, tau_for_decay(0.5), 1.0);
        st.membrane[0] = 0.4;
        let (u, s) = plif_step(&mut st, &[0.2], "l").unwrap();
        assert!((u[0] - 0.4).abs() < 1e-12);
        assert_eq!(s[0], 0.0);
    }

    #[test]
    fn non_finite_membrane_names_layer() {
        let mut st = PlifState::new(1, 2.0f64, 1.0);
        let err = plif_step(&mut st, &[f64::NAN], "block3.conv2").unwrap_err();
        assert!(err.to_string().contains("block3.conv2"));
    }

    #[test]
    fn surrogate_shape() {
        assert!((surrogate_spike_grad(1.0f64, 1.0, 4.0) - 1.0).abs() < 1e-15);
        assert!(surrogate_spike_grad(1e6f64, 1.0, 4.0) < 1e-300);
        assert!(surrogate_spike_grad(-1e6f64, 1.0, 4.0) < 1e-300);
        let a = surrogate_spike_grad(1.5f64, 1.0, 4.0);
        let b = surrogate_spike_grad(0.5f64, 1.0, 4.0);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn decay_closed_form_without_spikes() {
        let tau = 0.3f64;
        let mut st = PlifState::new(1, tau, 1.0);
        st.membrane[0] = 0.9;
        for _ in 0..5 {
            plif_step(&mut st, &[0.0], "l").unwrap();
        }
        assert!((st.membrane[0] - sigmoid(tau).powi(5) * 0.9).abs() < 1e-14);
    }
}
