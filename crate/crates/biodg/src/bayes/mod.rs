//! Variational conv and dense layers with flipout perturbations.
//!
//! Each weight carries a Gaussian posterior parameterized as
//! (mean, rho) with stddev = softplus(rho) and a N(0, sigma_p) prior.
//! A sampled forward draws one base perturbation `dW = stddev . E`
//! (E standard normal, shared across the batch) and decorrelates
//! examples with per-example Rademacher sign vectors `s` (input side)
//! and `r` (output side):
//!
//! ```text
//! y_n = x_n W_mean + ((x_n . s_n) dW) . r_n + b_sample
//! ```
//!
//! Since `s`, `r` have zero mean and are independent of E, the
//! perturbation term vanishes in expectation and each example sees a
//! pseudo-independent weight draw at the cost of one extra GEMM. Biases
//! use plain reparameterization, shared across the batch.
//!
//! Backward treats the drawn noise (E, s, r, bias epsilon) as constants
//! and differentiates means and rhos; KL terms against the prior are
//! accumulated separately via `kl_backward` so the trainer can weight
//! them by 1/dataset-size.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::layers::{col2im, im2col, ConvDims};
use crate::engine::{init, Layer, ParamSlot, Phase, Scalar, Tensor};
use crate::error::{Error, Result};

/// Prior stddev sigma_p of the zero-mean Gaussian weight prior.
pub const PRIOR_STDDEV: f64 = 1.0;

/// Initial posterior stddev; rho is initialized to softplus^-1 of this.
pub const INIT_STDDEV: f64 = 0.05;

/// Numerically stable ln(1 + e^x).
pub fn softplus<S: Scalar>(x: S) -> S {
    let zero = S::zero();
    x.max(zero) + ((-x.abs()).exp() + S::one()).ln()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// One variational parameter block: posterior means, rhos, and their
/// gradient accumulators.
#[derive(Debug)]
struct VariationalParam<S> {
    mean: Vec<S>,
    rho: Vec<S>,
    g_mean: Vec<S>,
    g_rho: Vec<S>,
}

impl<S: Scalar> VariationalParam<S> {
    fn new(mean: Vec<S>) -> Self {
        let n = mean.len();
        let rho0 = S::from_f64(softplus_inv(INIT_STDDEV));
        VariationalParam {
            mean,
            rho: vec![rho0; n],
            g_mean: vec![S::zero(); n],
            g_rho: vec![S::zero(); n],
        }
    }

    fn stddev(&self) -> Vec<S> {
        self.rho.iter().map(|r| softplus(*r)).collect()
    }

    /// KL(N(mean, stddev^2) || N(0, sigma_p^2)) summed over elements.
    fn kl(&self) -> S {
        let sp = S::from_f64(PRIOR_STDDEV);
        let half = S::from_f64(0.5);
        let mut acc = S::zero();
        for (m, r) in self.mean.iter().zip(&self.rho) {
            let sd = softplus(*r);
            acc += (sp / sd).ln() + (sd * sd + *m * *m) / (S::from_f64(2.0) * sp * sp) - half;
        }
        acc
    }

    /// Accumulates `scale * dKL/d{mean, rho}`.
    fn kl_backward(&mut self, scale: S) {
        let sp2 = S::from_f64(PRIOR_STDDEV * PRIOR_STDDEV);
        for i in 0..self.mean.len() {
            let sd = softplus(self.rho[i]);
            self.g_mean[i] += scale * self.mean[i] / sp2;
            self.g_rho[i] += scale * (sd / sp2 - S::one() / sd) * sigmoid(self.rho[i]);
        }
    }
}

fn draw_normals<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn draw_signs<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| if rng.gen::<bool>() { S::one() } else { -S::one() })
        .collect()
}

// ---------------------------------------------------------------------
// DenseFlipout
// ---------------------------------------------------------------------

#[derive(Debug)]
pub struct DenseFlipout<S> {
    in_dim: usize,
    out_dim: usize,
    w: VariationalParam<S>,
    b: VariationalParam<S>,
    cache: Option<DenseFlipoutCache<S>>,
}

#[derive(Debug)]
struct DenseFlipoutCache<S> {
    x: Tensor<S>,
    /// None for a mean-weight (deterministic) pass.
    noise: Option<DenseNoise<S>>,
}

#[derive(Debug)]
struct DenseNoise<S> {
    e: Vec<S>,      // [out, in] standard normal, shared per batch
    s: Vec<S>,      // [batch, in] signs
    r: Vec<S>,      // [batch, out] signs
    eps_b: Vec<S>,  // [out] bias noise, shared per batch
}

impl<S: Scalar> DenseFlipout<S> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        DenseFlipout {
            in_dim,
            out_dim,
            w: VariationalParam::new(init::he_uniform(rng, in_dim, out_dim * in_dim)),
            b: VariationalParam::new(vec![S::zero(); out_dim]),
            cache: None,
        }
    }

    fn delta_w(&self, e: &[S]) -> Vec<S> {
        self.w
            .stddev()
            .iter()
            .zip(e)
            .map(|(sd, ev)| *sd * *ev)
            .collect()
    }
}

impl<S: Scalar> Layer<S> for DenseFlipout<S> {
    fn name(&self) -> &'static str {
        "dense_flipout"
    }

    fn forward(&mut self, x: &Tensor<S>, phase: &mut Phase) -> Result<Tensor<S>> {
        let (batch, d) = x.dims2();
        if d != self.in_dim {
            return Err(Error::shape_in(
                "dense_flipout",
                format!("[batch, {}]", self.in_dim),
                format!("{:?}", x.shape()),
            ));
        }
        let (i, o) = (self.in_dim, self.out_dim);
        let mut y = Tensor::zeros(&[batch, o]);

        // Mean path: y = x W_mean^T
        S::gemm(
            batch, i, o,
            S::one(),
            x.data(), i as isize, 1,
            &self.w.mean, 1, i as isize,
            S::zero(),
            y.data_mut(), o as isize, 1,
        );

        let noise = match phase {
            Phase::Mean => {
                for bi in 0..batch {
                    for (j, bm) in self.b.mean.iter().enumerate() {
                        y.data_mut()[bi * o + j] += *bm;
                    }
                }
                None
            }
            Phase::Sampled(rng) => {
                let e = draw_normals::<S>(rng, o * i);
                let eps_b = draw_normals::<S>(rng, o);
                let s = draw_signs::<S>(rng, batch * i);
                let r = draw_signs::<S>(rng, batch * o);

                // Perturbation path: ((x . s) dW^T) . r
                let dw = self.delta_w(&e);
                let mut xs = x.clone();
                for (v, sg) in xs.data_mut().iter_mut().zip(&s) {
                    *v *= *sg;
                }
                let mut pert = vec![S::zero(); batch * o];
                S::gemm(
                    batch, i, o,
                    S::one(),
                    xs.data(), i as isize, 1,
                    &dw, 1, i as isize,
                    S::zero(),
                    &mut pert, o as isize, 1,
                );
                let b_sd = self.b.stddev();
                for bi in 0..batch {
                    for j in 0..o {
                        let sample_b = self.b.mean[j] + b_sd[j] * eps_b[j];
                        y.data_mut()[bi * o + j] += pert[bi * o + j] * r[bi * o + j] + sample_b;
                    }
                }
                Some(DenseNoise { e, s, r, eps_b })
            }
        };
        self.cache = Some(DenseFlipoutCache { x: x.clone(), noise });
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some(DenseFlipoutCache { x, noise }) = self.cache.take() else {
            return Err(Error::State(
                "dense_flipout: backward called without a cached forward".into(),
            ));
        };
        let (batch, _) = x.dims2();
        let (i, o) = (self.in_dim, self.out_dim);

        // Mean path gradients (both phases).
        S::gemm(
            o, batch, i,
            S::one(),
            gy.data(), 1, o as isize,
            x.data(), i as isize, 1,
            S::one(),
            &mut self.w.g_mean, i as isize, 1,
        );
        for bi in 0..batch {
            for j in 0..o {
                self.b.g_mean[j] += gy.data()[bi * o + j];
            }
        }
        let mut gx = Tensor::zeros(&[batch, i]);
        S::gemm(
            batch, o, i,
            S::one(),
            gy.data(), o as isize, 1,
            &self.w.mean, i as isize, 1,
            S::zero(),
            gx.data_mut(), i as isize, 1,
        );

        if let Some(DenseNoise { e, s, r, eps_b }) = noise {
            // gyr = gy . r ; xs = x . s
            let mut gyr = gy.clone();
            for (v, sg) in gyr.data_mut().iter_mut().zip(&r) {
                *v *= *sg;
            }
            let mut xs = x.clone();
            for (v, sg) in xs.data_mut().iter_mut().zip(&s) {
                *v *= *sg;
            }
            // d(dW) = gyr^T xs, then drho = d(dW) . E . d softplus
            let mut g_dw = vec![S::zero(); o * i];
            S::gemm(
                o, batch, i,
                S::one(),
                gyr.data(), 1, o as isize,
                xs.data(), i as isize, 1,
                S::zero(),
                &mut g_dw, i as isize, 1,
            );
            for idx in 0..o * i {
                self.w.g_rho[idx] += g_dw[idx] * e[idx] * sigmoid(self.w.rho[idx]);
            }
            // Bias: y += b_mean + softplus(b_rho) eps_b (mean part already done)
            for bi in 0..batch {
                for j in 0..o {
                    self.b.g_rho[j] +=
                        gy.data()[bi * o + j] * eps_b[j] * sigmoid(self.b.rho[j]);
                }
            }
            // Input gradient through the perturbation path: (gyr dW) . s
            let dw = self.delta_w(&e);
            let mut gx_pert = vec![S::zero(); batch * i];
            S::gemm(
                batch, o, i,
                S::one(),
                gyr.data(), o as isize, 1,
                &dw, i as isize, 1,
                S::zero(),
                &mut gx_pert, i as isize, 1,
            );
            for (idx, v) in gx.data_mut().iter_mut().enumerate() {
                *v += gx_pert[idx] * s[idx];
            }
        }
        Ok(gx)
    }

    fn param_blocks(&self) -> Vec<&[S]> {
        vec![&self.w.mean, &self.w.rho, &self.b.mean, &self.b.rho]
    }

    fn param_slots(&mut self) -> Vec<ParamSlot<'_, S>> {
        vec![
            ParamSlot { values: &mut self.w.mean, grads: &mut self.w.g_mean },
            ParamSlot { values: &mut self.w.rho, grads: &mut self.w.g_rho },
            ParamSlot { values: &mut self.b.mean, grads: &mut self.b.g_mean },
            ParamSlot { values: &mut self.b.rho, grads: &mut self.b.g_rho },
        ]
    }

    fn kl(&self) -> S {
        self.w.kl() + self.b.kl()
    }

    fn kl_backward(&mut self, scale: S) {
        self.w.kl_backward(scale);
        self.b.kl_backward(scale);
    }
}

// ---------------------------------------------------------------------
// Conv2dFlipout
// ---------------------------------------------------------------------

/// Flipout convolution. Sign vectors are per example and per channel:
/// `s` flips input channels, `r` flips output channels, so the
/// perturbation reuses the same im2col patch matrix as the mean path.
/// Work runs example by example against a persistent patch buffer, with
/// the perturbation confined to [K, P] and [O, P] tiles that stay
/// cache-resident.
#[derive(Debug)]
pub struct Conv2dFlipout<S> {
    dims: ConvDims,
    out_ch: usize,
    w: VariationalParam<S>,
    b: VariationalParam<S>,
    cols: Vec<S>,
    dcols: Vec<S>,
    cache: Option<ConvFlipoutCache<S>>,
}

#[derive(Debug)]
struct ConvFlipoutCache<S> {
    batch: usize,
    noise: Option<ConvNoise<S>>,
}

#[derive(Debug)]
struct ConvNoise<S> {
    e: Vec<S>,      // [out_ch, K]
    s: Vec<S>,      // [batch, in_ch]
    r: Vec<S>,      // [batch, out_ch]
    eps_b: Vec<S>,  // [out_ch]
}

impl<S: Scalar> Conv2dFlipout<S> {
    pub fn new(dims: ConvDims, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = dims.k();
        Conv2dFlipout {
            dims,
            out_ch,
            w: VariationalParam::new(init::he_uniform(rng, k, out_ch * k)),
            b: VariationalParam::new(vec![S::zero(); out_ch]),
            cols: Vec::new(),
            dcols: Vec::new(),
            cache: None,
        }
    }

    fn delta_w(&self, e: &[S]) -> Vec<S> {
        self.w
            .stddev()
            .iter()
            .zip(e)
            .map(|(sd, ev)| *sd * *ev)
            .collect()
    }

    /// Scales example `b`'s slice of the patch matrix by its
    /// input-channel signs into a [K, P] tile: row k of the patch
    /// matrix belongs to input channel k / (kh*kw).
    fn signed_patch(&self, b: usize, batch: usize, s: &[S], out: &mut [S]) {
        let d = self.dims;
        let p = d.p();
        let bp = batch * p;
        let patch = d.kh * d.kw;
        for k in 0..d.k() {
            let sign = s[b * d.in_ch + k / patch];
            let src = &self.cols[k * bp + b * p..][..p];
            for (dst, v) in out[k * p..(k + 1) * p].iter_mut().zip(src) {
                *dst = *v * sign;
            }
        }
    }
}

impl<S: Scalar> Layer<S> for Conv2dFlipout<S> {
    fn name(&self) -> &'static str {
        "conv2d_flipout"
    }

    fn forward(&mut self, x: &Tensor<S>, phase: &mut Phase) -> Result<Tensor<S>> {
        let d = self.dims;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != d.in_ch || shape[2] != d.h || shape[3] != d.w {
            return Err(Error::shape_in(
                "conv2d_flipout",
                format!("[batch, {}, {}, {}]", d.in_ch, d.h, d.w),
                format!("{shape:?}"),
            ));
        }
        let batch = x.batch();
        let (k, p) = (d.k(), d.p());
        let bp = batch * p;

        self.cols.resize(k * bp, S::zero());
        im2col(x.data(), batch, d, &mut self.cols);

        let noise = match phase {
            Phase::Mean => None,
            Phase::Sampled(rng) => {
                let e = draw_normals::<S>(rng, self.out_ch * k);
                let eps_b = draw_normals::<S>(rng, self.out_ch);
                let s = draw_signs::<S>(rng, batch * d.in_ch);
                let r = draw_signs::<S>(rng, batch * self.out_ch);
                Some(ConvNoise { e, s, r, eps_b })
            }
        };

        // Seed the output with biases (sampled ones under flipout; the
        // bias draw is shared across the batch), then accumulate the
        // mean path W_mean * cols_b on top, example by example.
        let bias: Vec<S> = match &noise {
            None => self.b.mean.clone(),
            Some(n) => {
                let sd = self.b.stddev();
                (0..self.out_ch)
                    .map(|o| self.b.mean[o] + sd[o] * n.eps_b[o])
                    .collect()
            }
        };
        let mut ydata = Vec::with_capacity(self.out_ch * bp);
        for _ in 0..batch {
            for o in 0..self.out_ch {
                ydata.resize(ydata.len() + p, bias[o]);
            }
        }
        for b in 0..batch {
            S::gemm(
                self.out_ch, k, p,
                S::one(),
                &self.w.mean, k as isize, 1,
                &self.cols[b * p..], bp as isize, 1,
                S::one(),
                &mut ydata[b * self.out_ch * p..], p as isize, 1,
            );
        }

        if let Some(n) = &noise {
            let dw = self.delta_w(&n.e);
            let mut cols_s = vec![S::zero(); k * p];
            let mut pert = vec![S::zero(); self.out_ch * p];
            for b in 0..batch {
                self.signed_patch(b, batch, &n.s, &mut cols_s);
                S::gemm(
                    self.out_ch, k, p,
                    S::one(),
                    &dw, k as isize, 1,
                    &cols_s, p as isize, 1,
                    S::zero(),
                    &mut pert, p as isize, 1,
                );
                let yb = &mut ydata[b * self.out_ch * p..(b + 1) * self.out_ch * p];
                for o in 0..self.out_ch {
                    let sign = n.r[b * self.out_ch + o];
                    let row = &mut yb[o * p..(o + 1) * p];
                    for (yv, pv) in row.iter_mut().zip(&pert[o * p..(o + 1) * p]) {
                        *yv += *pv * sign;
                    }
                }
            }
        }

        self.cache = Some(ConvFlipoutCache { batch, noise });
        Ok(Tensor::from_vec(
            &[batch, self.out_ch, d.out_h(), d.out_w()],
            ydata,
        ))
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some(ConvFlipoutCache { batch, noise }) = self.cache.take() else {
            return Err(Error::State(
                "conv2d_flipout: backward called without a cached forward".into(),
            ));
        };
        let d = self.dims;
        let (k, p) = (d.k(), d.p());
        let bp = batch * p;
        let want = [batch, self.out_ch, d.out_h(), d.out_w()];
        if gy.shape() != want {
            return Err(Error::shape_in(
                "conv2d_flipout",
                format!("{want:?}"),
                format!("{:?}", gy.shape()),
            ));
        }
        let gyd = gy.data();

        // Mean-path gradients, example by example.
        for b in 0..batch {
            S::gemm(
                self.out_ch, p, k,
                S::one(),
                &gyd[b * self.out_ch * p..], p as isize, 1,
                &self.cols[b * p..], 1, bp as isize,
                S::one(),
                &mut self.w.g_mean, k as isize, 1,
            );
        }
        // Per-channel gradient sums feed both bias mean and bias rho.
        let mut gsum = vec![S::zero(); self.out_ch];
        for (bo, chunk) in gyd.chunks_exact(p).enumerate() {
            let mut acc = S::zero();
            for v in chunk {
                acc += *v;
            }
            gsum[bo % self.out_ch] += acc;
        }
        for o in 0..self.out_ch {
            self.b.g_mean[o] += gsum[o];
        }

        self.dcols.resize(k * bp, S::zero());
        for b in 0..batch {
            S::gemm(
                k, self.out_ch, p,
                S::one(),
                &self.w.mean, 1, k as isize,
                &gyd[b * self.out_ch * p..], p as isize, 1,
                S::zero(),
                &mut self.dcols[b * p..], bp as isize, 1,
            );
        }

        if let Some(ConvNoise { e, s, r, eps_b }) = noise {
            let dw = self.delta_w(&e);
            let patch = d.kh * d.kw;
            let mut gyr = vec![S::zero(); self.out_ch * p];
            let mut cols_s = vec![S::zero(); k * p];
            let mut dcols_s = vec![S::zero(); k * p];
            let mut g_dw = vec![S::zero(); self.out_ch * k];
            for b in 0..batch {
                // gyr = gy_b rows scaled by the output-channel signs.
                for o in 0..self.out_ch {
                    let sign = r[b * self.out_ch + o];
                    let src = &gyd[(b * self.out_ch + o) * p..][..p];
                    for (dst, v) in gyr[o * p..(o + 1) * p].iter_mut().zip(src) {
                        *dst = *v * sign;
                    }
                }
                self.signed_patch(b, batch, &s, &mut cols_s);
                // d(dW) += gyr_b cols_s^T
                S::gemm(
                    self.out_ch, p, k,
                    S::one(),
                    &gyr, p as isize, 1,
                    &cols_s, 1, p as isize,
                    S::one(),
                    &mut g_dw, k as isize, 1,
                );
                // Perturbation-path input gradient: (dW^T gyr) scaled by s.
                S::gemm(
                    k, self.out_ch, p,
                    S::one(),
                    &dw, 1, k as isize,
                    &gyr, p as isize, 1,
                    S::zero(),
                    &mut dcols_s, p as isize, 1,
                );
                for kk in 0..k {
                    let sign = s[b * d.in_ch + kk / patch];
                    let dst = &mut self.dcols[kk * bp + b * p..][..p];
                    for (dv, sv) in dst.iter_mut().zip(&dcols_s[kk * p..(kk + 1) * p]) {
                        *dv += *sv * sign;
                    }
                }
            }
            for idx in 0..self.out_ch * k {
                self.w.g_rho[idx] += g_dw[idx] * e[idx] * sigmoid(self.w.rho[idx]);
            }
            // Bias rho: bias noise is shared per batch, summed like b_mean.
            for o in 0..self.out_ch {
                self.b.g_rho[o] += gsum[o] * eps_b[o] * sigmoid(self.b.rho[o]);
            }
        }

        let mut gx = Tensor::zeros(&[batch, d.in_ch, d.h, d.w]);
        col2im(&self.dcols, batch, d, gx.data_mut());
        Ok(gx)
    }

    fn param_blocks(&self) -> Vec<&[S]> {
        vec![&self.w.mean, &self.w.rho, &self.b.mean, &self.b.rho]
    }

    fn param_slots(&mut self) -> Vec<ParamSlot<'_, S>> {
        vec![
            ParamSlot { values: &mut self.w.mean, grads: &mut self.w.g_mean },
            ParamSlot { values: &mut self.w.rho, grads: &mut self.w.g_rho },
            ParamSlot { values: &mut self.b.mean, grads: &mut self.b.g_mean },
            ParamSlot { values: &mut self.b.rho, grads: &mut self.b.g_rho },
        ]
    }

    fn kl(&self) -> S {
        self.w.kl() + self.b.kl()
    }

    fn kl_backward(&mut self, scale: S) {
        self.w.kl_backward(scale);
        self.b.kl_backward(scale);
    }
}

/// Forces a layer stack's posterior stddevs to exactly zero by driving
/// every rho to a value whose softplus underflows; used by degeneracy
/// tests and documented as such (softplus(-1e3) == 0.0 in both f32/f64).
pub fn zero_stddevs<S: Scalar>(slots: &mut [ParamSlot<'_, S>]) {
    // Variational layers expose slots as (mean, rho) pairs in order.
    for pair in slots.chunks_mut(2) {
        if pair.len() == 2 {
            pair[1].values.fill(S::from_f64(-1e3));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn softplus_stable_and_underflows_to_zero() {
        assert_eq!(softplus(-1e3f64), 0.0);
        assert!((softplus(0.0f64) - (2.0f64).ln()).abs() < 1e-15);
        assert!((softplus(30.0f64) - 30.0).abs() < 1e-12);
        let rho0 = softplus_inv(INIT_STDDEV);
        assert!((softplus(rho0) - INIT_STDDEV).abs() < 1e-12);
    }

    #[test]
    fn kl_closed_forms() {
        // mean 0, stddev = prior -> KL = 0
        let mut p = VariationalParam::<f64>::new(vec![0.0]);
        p.rho[0] = softplus_inv(PRIOR_STDDEV);
        assert!(p.kl().abs() < 1e-12);

        // single weight, mean 1, stddev = prior = 1 -> KL = mu^2/2 = 0.5
        let mut p = VariationalParam::<f64>::new(vec![1.0]);
        p.rho[0] = softplus_inv(1.0);
        assert!((p.kl() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_over_random_draws() {
        let mut r = rng::stream(99, &[rng::tag::INIT]);
        for _ in 0..100 {
            let mut p = VariationalParam::<f64>::new(vec![
                r.gen_range(-3.0..3.0),
                r.gen_range(-3.0..3.0),
            ]);
            p.rho[0] = r.gen_range(-4.0..2.0);
            p.rho[1] = r.gen_range(-4.0..2.0);
            assert!(p.kl() >= -1e-12, "KL must be nonnegative, got {}", p.kl());
        }
    }

    #[test]
    fn zero_stddev_equals_mean_forward_bit_exactly() {
        let mut layer = DenseFlipout::<f64>::new(5, 3, &mut rng::stream(1, &[rng::tag::INIT]));
        zero_stddevs(&mut layer.param_slots());
        let x = Tensor::from_vec(&[2, 5], (0..10).map(|i| i as f64 * 0.3 - 1.0).collect());
        let mean = layer.forward(&x, &mut Phase::Mean).unwrap();
        let mut noise = rng::stream(7, &[rng::tag::FLIPOUT]);
        let sampled = layer.forward(&x, &mut Phase::Sampled(&mut noise)).unwrap();
        assert_eq!(mean.data(), sampled.data());
    }

    #[test]
    fn identical_inputs_in_batch_get_distinct_outputs() {
        let mut layer = DenseFlipout::<f64>::new(4, 4, &mut rng::stream(2, &[rng::tag::INIT]));
        let row = vec![0.5, -0.25, 1.0, 2.0];
        let mut both = row.clone();
        both.extend_from_slice(&row);
        let x = Tensor::from_vec(&[2, 4], both);
        let mut noise = rng::stream(3, &[rng::tag::FLIPOUT]);
        let y = layer.forward(&x, &mut Phase::Sampled(&mut noise)).unwrap();
        assert_ne!(y.row(0), y.row(1));
    }

    #[test]
    fn conv_flipout_zero_stddev_matches_mean_pass() {
        let dims = ConvDims { in_ch: 2, h: 5, w: 6, kh: 2, kw: 2 };
        let mut layer = Conv2dFlipout::<f64>::new(dims, 3, &mut rng::stream(4, &[rng::tag::INIT]));
        zero_stddevs(&mut layer.param_slots());
        let x = Tensor::from_vec(
            &[2, 2, 5, 6],
            (0..120).map(|i| (i as f64 * 0.7).sin()).collect(),
        );
        let mean = layer.forward(&x, &mut Phase::Mean).unwrap();
        let mut noise = rng::stream(8, &[rng::tag::FLIPOUT]);
        let sampled = layer.forward(&x, &mut Phase::Sampled(&mut noise)).unwrap();
        assert_eq!(mean.data(), sampled.data());
    }

    #[test]
    fn sampled_forward_is_reproducible_per_stream() {
        let mut layer = DenseFlipout::<f64>::new(6, 2, &mut rng::stream(5, &[rng::tag::INIT]));
        let x = Tensor::from_vec(&[3, 6], (0..18).map(|i| i as f64 * 0.1).collect());
        let mut n1 = rng::stream(11, &[rng::tag::FLIPOUT, 0]);
        let y1 = layer.forward(&x, &mut Phase::Sampled(&mut n1)).unwrap();
        let mut n2 = rng::stream(11, &[rng::tag::FLIPOUT, 0]);
        let y2 = layer.forward(&x, &mut Phase::Sampled(&mut n2)).unwrap();
        assert_eq!(y1.data(), y2.data());
    }
}
