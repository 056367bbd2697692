//! Masked convolution / dense layers over channels-last activations.
//!
//! Activations are stored `[y][x][c]`; kernels `[ky][kx][in_c][out_c]` so the
//! innermost loops run over contiguous output channels. A dense layer is a
//! 1x1 convolution over a 1x1 map.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn conv(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, in_hw: (usize, usize)) -> Self {
        ConvGeom {
            in_c,
            out_c,
            k,
            stride,
            pad,
            in_h: in_hw.0,
            in_w: in_hw.1,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self::conv(inputs, outputs, 1, 1, 0, (1, 1))
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.out_h() * self.out_w() * self.out_c
    }

    pub fn weight_len(&self) -> usize {
        self.k * self.k * self.in_c * self.out_c
    }

    /// Offset of the `out_c`-long kernel row for (ky, kx, ic).
    #[inline]
    pub fn row(&self, ky: usize, kx: usize, ic: usize) -> usize {
        ((ky * self.k + kx) * self.in_c + ic) * self.out_c
    }

    /// Output coordinate reached from input coordinate `i` through kernel tap `kk`.
    #[inline]
    fn target(&self, i: usize, kk: usize, out_len: usize) -> Option<usize> {
        let num = i + self.pad;
        if num < kk {
            return None;
        }
        let num = num - kk;
        if num % self.stride != 0 {
            return None;
        }
        let o = num / self.stride;
        (o < out_len).then_some(o)
    }
}

/// Weights, pruning mask and bias of one layer.
///
/// Masked weights are held at exactly zero, so the forward pass never needs
/// to consult the mask; gradients are masked when they are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<S> {
    pub geom: ConvGeom,
    pub weights: Vec<S>,
    pub mask: Vec<bool>,
    pub bias: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<S> {
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> LayerGrads<S> {
    pub fn zeros_like(p: &LayerParams<S>) -> Self {
        LayerGrads {
            weights: vec![S::zero(); p.weights.len()],
            bias: vec![S::zero(); p.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += *b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += *b;
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        f(&mut self.weights, None);
        if !self.bias.is_empty() {
            f(&mut self.bias, None);
        }
    }
}

impl<S: Scalar> LayerParams<S> {
    /// Normal init with std `gain / sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(geom: ConvGeom, gain: f64, with_bias: bool, rng: &mut R) -> Self {
        let fan_in = (geom.k * geom.k * geom.in_c).max(1) as f64;
        let std = gain / fan_in.sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weights = (0..geom.weight_len()).map(|_| S::of(normal.sample(rng))).collect();
        LayerParams {
            geom,
            weights,
            mask: vec![true; geom.weight_len()],
            bias: if with_bias { vec![S::zero(); geom.out_c] } else { Vec::new() },
        }
    }

    pub fn zeros(geom: ConvGeom, with_bias: bool) -> Self {
        LayerParams {
            geom,
            weights: vec![S::zero(); geom.weight_len()],
            mask: vec![true; geom.weight_len()],
            bias: if with_bias { vec![S::zero(); geom.out_c] } else { Vec::new() },
        }
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Permanently removes weight `i`.
    pub fn prune(&mut self, i: usize) {
        self.mask[i] = false;
        self.weights[i] = S::zero();
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [S], Option<&[bool]>)) {
        f(&mut self.weights, Some(&self.mask));
        if !self.bias.is_empty() {
            f(&mut self.bias, None);
        }
    }

    /// `out = bias + W * input`; `out` is overwritten. Zero inputs are skipped,
    /// which makes spike inputs cheap.
    pub fn forward(&self, input: &[S], out: &mut [S]) {
        let g = &self.geom;
        let (oh, ow, oc) = (g.out_h(), g.out_w(), g.out_c);
        debug_assert_eq!(input.len(), g.input_len());
        debug_assert_eq!(out.len(), g.output_len());
        if self.bias.is_empty() {
            out.fill(S::zero());
        } else {
            for px in out.chunks_exact_mut(oc) {
                px.copy_from_slice(&self.bias);
            }
        }
        for iy in 0..g.in_h {
            for ix in 0..g.in_w {
                let ibase = (iy * g.in_w + ix) * g.in_c;
                for ic in 0..g.in_c {
                    let x = input[ibase + ic];
                    if x == S::zero() {
                        continue;
                    }
                    for ky in 0..g.k {
                        let Some(oy) = g.target(iy, ky, oh) else { continue };
                        for kx in 0..g.k {
                            let Some(ox) = g.target(ix, kx, ow) else { continue };
                            let w = &self.weights[g.row(ky, kx, ic)..][..oc];
                            let o = &mut out[(oy * ow + ox) * oc..][..oc];
                            for (ov, &wv) in o.iter_mut().zip(w) {
                                *ov += x * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients and, if requested, overwrites `grad_in`
    /// with the gradient w.r.t. the input.
    pub fn backward(&self, input: &[S], grad_out: &[S], grads: &mut LayerGrads<S>, grad_in: Option<&mut [S]>) {
        let g = &self.geom;
        let (oh, ow, oc) = (g.out_h(), g.out_w(), g.out_c);
        if !grads.bias.is_empty() {
            for px in grad_out.chunks_exact(oc) {
                for (b, &v) in grads.bias.iter_mut().zip(px) {
                    *b += v;
                }
            }
        }
        for iy in 0..g.in_h {
            for ix in 0..g.in_w {
                let ibase = (iy * g.in_w + ix) * g.in_c;
                for ic in 0..g.in_c {
                    let x = input[ibase + ic];
                    if x == S::zero() {
                        continue;
                    }
                    for ky in 0..g.k {
                        let Some(oy) = g.target(iy, ky, oh) else { continue };
                        for kx in 0..g.k {
                            let Some(ox) = g.target(ix, kx, ow) else { continue };
                            let gw = &mut grads.weights[g.row(ky, kx, ic)..][..oc];
                            let go = &grad_out[(oy * ow + ox) * oc..][..oc];
                            for (w, &v) in gw.iter_mut().zip(go) {
                                *w += x * v;
                            }
                        }
                    }
                }
            }
        }
        if let Some(grad_in) = grad_in {
            for iy in 0..g.in_h {
                for ix in 0..g.in_w {
                    let ibase = (iy * g.in_w + ix) * g.in_c;
                    for ic in 0..g.in_c {
                        let mut acc = S::zero();
                        for ky in 0..g.k {
                            let Some(oy) = g.target(iy, ky, oh) else { continue };
                            for kx in 0..g.k {
                                let Some(ox) = g.target(ix, kx, ow) else { continue };
                                let w = &self.weights[g.row(ky, kx, ic)..][..oc];
                                let go = &grad_out[(oy * ow + ox) * oc..][..oc];
                                acc += w.iter().zip(go).map(|(&a, &b)| a * b).sum::<S>();
                            }
                        }
                        grad_in[ibase + ic] = acc;
                    }
                }
            }
        }
    }
}

/// Spatial resampling between feature maps of different resolution:
/// average pooling when shrinking, nearest-neighbour copy when growing.
/// Both directions require integer ratios.
pub fn resample<S: Scalar>(input: &[S], c: usize, from: (usize, usize), to: (usize, usize)) -> Vec<S> {
    if from == to {
        return input.to_vec();
    }
    let mut out = vec![S::zero(); to.0 * to.1 * c];
    if from.0 >= to.0 {
        let (fy, fx) = (from.0 / to.0, from.1 / to.1);
        let norm = S::one() / S::of((fy * fx) as f64);
        for y in 0..from.0 {
            for x in 0..from.1 {
                let src = &input[(y * from.1 + x) * c..][..c];
                let (oy, ox) = (y / fy, x / fx);
                let dst = &mut out[(oy * to.1 + ox) * c..][..c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * norm;
                }
            }
        }
    } else {
        let (fy, fx) = (to.0 / from.0, to.1 / from.1);
        for y in 0..to.0 {
            for x in 0..to.1 {
                let src = &input[((y / fy) * from.1 + x / fx) * c..][..c];
                out[(y * to.1 + x) * c..][..c].copy_from_slice(src);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct gather-form convolution, independent of the scatter loops.
    fn conv_reference(p: &LayerParams<f64>, input: &[f64]) -> Vec<f64> {
        let g = &p.geom;
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.output_len()];
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..g.out_c {
                    let mut acc = if p.bias.is_empty() { 0.0 } else { p.bias[oc] };
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                continue;
                            }
                            for ic in 0..g.in_c {
                                let x = input[(iy as usize * g.in_w + ix as usize) * g.in_c + ic];
                                acc += x * p.weights[g.row(ky, kx, ic) + oc];
                            }
                        }
                    }
                    out[(oy * ow + ox) * g.out_c + oc] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn scatter_forward_matches_gather_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad, hw) in &[(3, 2, 1, 8), (3, 1, 1, 4), (1, 2, 0, 4), (3, 2, 1, 2), (1, 1, 0, 1)] {
            let geom = ConvGeom::conv(3, 5, k, stride, pad, (hw, hw));
            let mut p = LayerParams::<f64>::init(geom, 1.0, true, &mut rng);
            p.bias.iter_mut().for_each(|b| *b = rng.random::<f64>());
            let input: Vec<f64> = (0..geom.input_len()).map(|_| rng.random::<f64>()).collect();
            let mut out = vec![0.0; geom.output_len()];
            p.forward(&input, &mut out);
            let want = conv_reference(&p, &input);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_grad_is_adjoint_of_forward() {
        // <grad_out, W x> == <W^T grad_out, x> for a bias-free layer
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geom = ConvGeom::conv(2, 4, 3, 2, 1, (6, 6));
        let p = LayerParams::<f64>::init(geom, 1.0, false, &mut rng);
        let x: Vec<f64> = (0..geom.input_len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let go: Vec<f64> = (0..geom.output_len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut y = vec![0.0; geom.output_len()];
        p.forward(&x, &mut y);
        let mut gi = vec![0.0; geom.input_len()];
        let mut grads = LayerGrads::zeros_like(&p);
        p.backward(&x, &go, &mut grads, Some(&mut gi));
        let lhs: f64 = go.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = gi.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn masked_weight_equals_deleted_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geom = ConvGeom::conv(2, 3, 3, 1, 1, (4, 4));
        let mut masked = LayerParams::<f64>::init(geom, 1.0, true, &mut rng);
        let mut deleted = masked.clone();
        masked.prune(7);
        deleted.weights[7] = 0.0;
        let x: Vec<f64> = (0..geom.input_len()).map(|_| rng.random::<f64>()).collect();
        let (mut a, mut b) = (vec![0.0; geom.output_len()], vec![0.0; geom.output_len()]);
        masked.forward(&x, &mut a);
        deleted.forward(&x, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn resample_pools_and_upsamples() {
        let x = vec![1.0, 3.0, 5.0, 7.0]; // 2x2, one channel
        assert_eq!(resample(&x, 1, (2, 2), (1, 1)), vec![4.0]);
        let up = resample(&[2.0f64], 1, (1, 1), (2, 2));
        assert_eq!(up, vec![2.0; 4]);
    }
}
