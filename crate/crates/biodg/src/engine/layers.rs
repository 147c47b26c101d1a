//! Layer implementations.
//!
//! Each layer owns its parameters and gradient accumulators, caches what
//! its backward pass needs during forward, and frees the cache when
//! backward consumes it. Calling backward without a prior forward is a
//! state error. Convolution and dense layers do their work in single
//! GEMM calls over the whole batch.

use rand_chacha::ChaCha8Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Forward mode. Deterministic layers behave identically in both;
/// variational layers use posterior means in `Mean` and draw weight
/// perturbations from the stream in `Sampled`.
pub enum Phase<'a> {
    Mean,
    Sampled(&'a mut ChaCha8Rng),
}

/// Mutable view of one parameter block and its gradient accumulator.
pub struct ParamSlot<'a, S> {
    pub values: &'a mut [S],
    pub grads: &'a mut [S],
}

pub trait Layer<S: Scalar>: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&mut self, x: &Tensor<S>, phase: &mut Phase) -> Result<Tensor<S>>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>>;
    /// Parameter blocks in serialization order.
    fn param_blocks(&self) -> Vec<&[S]> {
        Vec::new()
    }
    fn param_slots(&mut self) -> Vec<ParamSlot<'_, S>> {
        Vec::new()
    }
    /// KL divergence of the layer's variational posterior from its prior;
    /// zero for point-weight layers.
    fn kl(&self) -> S {
        S::zero()
    }
    /// Accumulates `scale * dKL/dparam` into the gradient buffers.
    fn kl_backward(&mut self, _scale: S) {}

    fn zero_grad(&mut self) {
        for slot in self.param_slots() {
            slot.grads.fill(S::zero());
        }
    }
    fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }
}

fn missing_cache<T>(layer: &'static str) -> Result<T> {
    Err(Error::State(format!(
        "{layer}: backward called without a cached forward"
    )))
}

fn check_4d<S: Scalar>(
    layer: &'static str,
    x: &Tensor<S>,
    ch: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != ch || s[2] != h || s[3] != w {
        return Err(Error::shape_in(
            layer,
            format!("[batch, {ch}, {h}, {w}]"),
            format!("{s:?}"),
        ));
    }
    Ok(())
}

fn check_2d<S: Scalar>(layer: &'static str, x: &Tensor<S>, dim: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[1] != dim {
        return Err(Error::shape_in(
            layer,
            format!("[batch, {dim}]"),
            format!("{s:?}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// im2col plumbing, shared by the point-weight and variational convs.
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }
    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }
    /// Patch size: rows of the im2col matrix.
    pub fn k(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    /// Output positions per example: columns per example.
    pub fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Lowers `x` [B, C, H, W] to a [K, B*P] patch matrix (valid padding,
/// stride 1): column `b*P + oh*OW + ow` holds the receptive field of
/// output position (oh, ow) of example b.
pub(crate) fn im2col<S: Scalar>(x: &[S], batch: usize, d: ConvDims, cols: &mut [S]) {
    let (oh, ow, p) = (d.out_h(), d.out_w(), d.p());
    let bp = batch * p;
    debug_assert_eq!(cols.len(), d.k() * bp);
    for c in 0..d.in_ch {
        for dh in 0..d.kh {
            for dw in 0..d.kw {
                let k = (c * d.kh + dh) * d.kw + dw;
                let row = &mut cols[k * bp..(k + 1) * bp];
                for b in 0..batch {
                    let x_base = (b * d.in_ch + c) * d.h * d.w;
                    for r in 0..oh {
                        let src = x_base + (r + dh) * d.w + dw;
                        let dst = b * p + r * ow;
                        row[dst..dst + ow].copy_from_slice(&x[src..src + ow]);
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds patch-matrix gradients back to
/// input positions.
pub(crate) fn col2im<S: Scalar>(cols: &[S], batch: usize, d: ConvDims, gx: &mut [S]) {
    let (oh, ow, p) = (d.out_h(), d.out_w(), d.p());
    let bp = batch * p;
    debug_assert_eq!(cols.len(), d.k() * bp);
    for c in 0..d.in_ch {
        for dh in 0..d.kh {
            for dw in 0..d.kw {
                let k = (c * d.kh + dh) * d.kw + dw;
                let row = &cols[k * bp..(k + 1) * bp];
                for b in 0..batch {
                    let x_base = (b * d.in_ch + c) * d.h * d.w;
                    for r in 0..oh {
                        let dst = x_base + (r + dh) * d.w + dw;
                        let src = b * p + r * ow;
                        for j in 0..ow {
                            gx[dst + j] += row[src + j];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------

/// 2-D convolution, valid padding, stride 1. Weights are stored
/// [out_ch, in_ch*kh*kw]: inputs are lowered to a patch matrix and each
/// example's output is one GEMM against its slice of it. Per-example
/// GEMMs read and write batch layout directly, and the patch and
/// gradient scratch buffers persist across calls to avoid refilling
/// multi-megabyte allocations every step.
#[derive(Debug)]
pub struct Conv2d<S> {
    pub(crate) dims: ConvDims,
    pub(crate) out_ch: usize,
    w: Vec<S>,
    b: Vec<S>,
    gw: Vec<S>,
    gb: Vec<S>,
    cols: Vec<S>,
    dcols: Vec<S>,
    cached_batch: Option<usize>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(dims: ConvDims, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = dims.k();
        Conv2d {
            dims,
            out_ch,
            w: super::init::he_uniform(rng, k, out_ch * k),
            b: vec![S::zero(); out_ch],
            gw: vec![S::zero(); out_ch * k],
            gb: vec![S::zero(); out_ch],
            cols: Vec::new(),
            dcols: Vec::new(),
            cached_batch: None,
        }
    }

    /// Output seeded with biases, one [out_ch, P] block per example.
    fn bias_seeded_output(&self, batch: usize) -> Vec<S> {
        let p = self.dims.p();
        let mut ydata = Vec::with_capacity(batch * self.out_ch * p);
        for _ in 0..batch {
            for o in 0..self.out_ch {
                ydata.resize(ydata.len() + p, self.b[o]);
            }
        }
        ydata
    }
}

impl<S: Scalar> Layer<S> for Conv2d<S> {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, x: &Tensor<S>, _phase: &mut Phase) -> Result<Tensor<S>> {
        let d = self.dims;
        check_4d("conv2d", x, d.in_ch, d.h, d.w)?;
        let batch = x.batch();
        let (k, p) = (d.k(), d.p());
        let bp = batch * p;

        self.cols.resize(k * bp, S::zero());
        im2col(x.data(), batch, d, &mut self.cols);

        // Seed the output with biases, then accumulate W * cols_b.
        let mut ydata = self.bias_seeded_output(batch);
        for b in 0..batch {
            S::gemm(
                self.out_ch, k, p,
                S::one(),
                &self.w, k as isize, 1,
                &self.cols[b * p..], bp as isize, 1,
                S::one(),
                &mut ydata[b * self.out_ch * p..], p as isize, 1,
            );
        }

        self.cached_batch = Some(batch);
        Ok(Tensor::from_vec(
            &[batch, self.out_ch, d.out_h(), d.out_w()],
            ydata,
        ))
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some(batch) = self.cached_batch.take() else {
            return missing_cache("conv2d");
        };
        let d = self.dims;
        let (k, p) = (d.k(), d.p());
        let bp = batch * p;
        check_4d("conv2d", gy, self.out_ch, d.out_h(), d.out_w())?;
        if gy.batch() != batch {
            return Err(Error::shape_in(
                "conv2d",
                format!("batch {batch}"),
                format!("batch {}", gy.batch()),
            ));
        }
        let gyd = gy.data();

        for (bo, chunk) in gyd.chunks_exact(p).enumerate() {
            let mut acc = S::zero();
            for v in chunk {
                acc += *v;
            }
            self.gb[bo % self.out_ch] += acc;
        }

        // dW += gy_b (O x P) * cols_b^T (P x K), example by example.
        for b in 0..batch {
            S::gemm(
                self.out_ch, p, k,
                S::one(),
                &gyd[b * self.out_ch * p..], p as isize, 1,
                &self.cols[b * p..], 1, bp as isize,
                S::one(),
                &mut self.gw, k as isize, 1,
            );
        }

        // dcols_b = W^T (K x O) * gy_b (O x P), then scatter back to input.
        self.dcols.resize(k * bp, S::zero());
        for b in 0..batch {
            S::gemm(
                k, self.out_ch, p,
                S::one(),
                &self.w, 1, k as isize,
                &gyd[b * self.out_ch * p..], p as isize, 1,
                S::zero(),
                &mut self.dcols[b * p..], bp as isize, 1,
            );
        }
        let mut gx = Tensor::zeros(&[batch, d.in_ch, d.h, d.w]);
        col2im(&self.dcols, batch, d, gx.data_mut());
        Ok(gx)
    }

    fn param_blocks(&self) -> Vec<&[S]> {
        vec![&self.w, &self.b]
    }

    fn param_slots(&mut self) -> Vec<ParamSlot<'_, S>> {
        vec![
            ParamSlot { values: &mut self.w, grads: &mut self.gw },
            ParamSlot { values: &mut self.b, grads: &mut self.gb },
        ]
    }
}

// ---------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------

/// Fully connected layer; weights [out, in].
#[derive(Debug)]
pub struct Dense<S> {
    pub(crate) in_dim: usize,
    pub(crate) out_dim: usize,
    w: Vec<S>,
    b: Vec<S>,
    gw: Vec<S>,
    gb: Vec<S>,
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            in_dim,
            out_dim,
            w: super::init::he_uniform(rng, in_dim, out_dim * in_dim),
            b: vec![S::zero(); out_dim],
            gw: vec![S::zero(); out_dim * in_dim],
            gb: vec![S::zero(); out_dim],
            cache: None,
        }
    }

    /// Identity-initialized square dense layer; test helper.
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![S::zero(); dim * dim];
        for i in 0..dim {
            w[i * dim + i] = S::one();
        }
        Dense {
            in_dim: dim,
            out_dim: dim,
            w,
            b: vec![S::zero(); dim],
            gw: vec![S::zero(); dim * dim],
            gb: vec![S::zero(); dim],
            cache: None,
        }
    }
}

impl<S: Scalar> Layer<S> for Dense<S> {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward(&mut self, x: &Tensor<S>, _phase: &mut Phase) -> Result<Tensor<S>> {
        check_2d("dense", x, self.in_dim)?;
        let batch = x.batch();
        let mut y = Tensor::zeros(&[batch, self.out_dim]);
        // y = x (B x I) * W^T (I x O)
        S::gemm(
            batch, self.in_dim, self.out_dim,
            S::one(),
            x.data(), self.in_dim as isize, 1,
            &self.w, 1, self.in_dim as isize,
            S::zero(),
            y.data_mut(), self.out_dim as isize, 1,
        );
        let ydata = y.data_mut();
        for b in 0..batch {
            for (o, bias) in self.b.iter().enumerate() {
                ydata[b * self.out_dim + o] += *bias;
            }
        }
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some(x) = self.cache.take() else {
            return missing_cache("dense");
        };
        check_2d("dense", gy, self.out_dim)?;
        let batch = x.batch();

        // dW += gY^T (O x B) * x (B x I)
        S::gemm(
            self.out_dim, batch, self.in_dim,
            S::one(),
            gy.data(), 1, self.out_dim as isize,
            x.data(), self.in_dim as isize, 1,
            S::one(),
            &mut self.gw, self.in_dim as isize, 1,
        );
        for b in 0..batch {
            for o in 0..self.out_dim {
                self.gb[o] += gy.data()[b * self.out_dim + o];
            }
        }

        // dX = gY (B x O) * W (O x I)
        let mut gx = Tensor::zeros(&[batch, self.in_dim]);
        S::gemm(
            batch, self.out_dim, self.in_dim,
            S::one(),
            gy.data(), self.out_dim as isize, 1,
            &self.w, self.in_dim as isize, 1,
            S::zero(),
            gx.data_mut(), self.in_dim as isize, 1,
        );
        Ok(gx)
    }

    fn param_blocks(&self) -> Vec<&[S]> {
        vec![&self.w, &self.b]
    }

    fn param_slots(&mut self) -> Vec<ParamSlot<'_, S>> {
        vec![
            ParamSlot { values: &mut self.w, grads: &mut self.gw },
            ParamSlot { values: &mut self.b, grads: &mut self.gb },
        ]
    }
}

// ---------------------------------------------------------------------
// Activations and shape layers
// ---------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct Relu<S> {
    /// One where the input was positive, zero elsewhere. Stored as
    /// scalars so backward is a plain vectorizable multiply.
    mask: Option<Vec<S>>,
}

impl<S: Scalar> Relu<S> {
    pub fn new() -> Self {
        Relu { mask: None }
    }
}

impl<S: Scalar> Layer<S> for Relu<S> {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, x: &Tensor<S>, _phase: &mut Phase) -> Result<Tensor<S>> {
        // Branch-free passes; the compiler turns both into vector selects.
        let mask: Vec<S> = x
            .data()
            .iter()
            .map(|&v| if v > S::zero() { S::one() } else { S::zero() })
            .collect();
        let ydata: Vec<S> = x
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        self.mask = Some(mask);
        Ok(Tensor::from_vec(x.shape(), ydata))
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some(mask) = self.mask.take() else {
            return missing_cache("relu");
        };
        if mask.len() != gy.len() {
            return Err(Error::shape_in("relu", format!("{} grads", mask.len()), format!("{}", gy.len())));
        }
        let gxdata: Vec<S> = gy
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| g * m)
            .collect();
        Ok(Tensor::from_vec(gy.shape(), gxdata))
    }
}

#[derive(Debug, Default)]
pub struct Sigmoid<S> {
    out: Option<Tensor<S>>,
}

impl<S: Scalar> Sigmoid<S> {
    pub fn new() -> Self {
        Sigmoid { out: None }
    }
}

impl<S: Scalar> Layer<S> for Sigmoid<S> {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&mut self, x: &Tensor<S>, _phase: &mut Phase) -> Result<Tensor<S>> {
        let y = x.clone().map(|v| S::one() / (S::one() + (-v).exp()));
        self.out = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some(y) = self.out.take() else {
            return missing_cache("sigmoid");
        };
        let mut gx = gy.clone();
        for (g, yv) in gx.data_mut().iter_mut().zip(y.data()) {
            *g *= *yv * (S::one() - *yv);
        }
        Ok(gx)
    }
}

/// Row-wise softmax over a [batch, classes] tensor.
#[derive(Debug, Default)]
pub struct Softmax<S> {
    out: Option<Tensor<S>>,
}

impl<S: Scalar> Softmax<S> {
    pub fn new() -> Self {
        Softmax { out: None }
    }
}

impl<S: Scalar> Layer<S> for Softmax<S> {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&mut self, x: &Tensor<S>, _phase: &mut Phase) -> Result<Tensor<S>> {
        let (batch, m) = x.dims2();
        let mut y = x.clone();
        let data = y.data_mut();
        for b in 0..batch {
            let row = &mut data[b * m..(b + 1) * m];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.out = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some(y) = self.out.take() else {
            return missing_cache("softmax");
        };
        let (batch, m) = y.dims2();
        let mut gx = Tensor::zeros(&[batch, m]);
        for b in 0..batch {
            let yr = &y.data()[b * m..(b + 1) * m];
            let gr = &gy.data()[b * m..(b + 1) * m];
            let mut dot = S::zero();
            for (yv, gv) in yr.iter().zip(gr) {
                dot += *yv * *gv;
            }
            let out = &mut gx.data_mut()[b * m..(b + 1) * m];
            for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                *o = *yv * (*gv - dot);
            }
        }
        Ok(gx)
    }
}

/// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Default)]
pub struct MaxPool2x2<S> {
    cache: Option<(Vec<u32>, Vec<usize>)>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> MaxPool2x2<S> {
    pub fn new() -> Self {
        MaxPool2x2 { cache: None, _marker: std::marker::PhantomData }
    }
}

impl<S: Scalar> Layer<S> for MaxPool2x2<S> {
    fn name(&self) -> &'static str {
        "max_pool"
    }

    fn forward(&mut self, x: &Tensor<S>, _phase: &mut Phase) -> Result<Tensor<S>> {
        let (batch, c, h, w) = x.dims4();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape_in("max_pool", "height and width >= 2", format!("[{h}, {w}]")));
        }
        let mut y = Tensor::zeros(&[batch, c, oh, ow]);
        let mut argmax = vec![0u32; batch * c * oh * ow];
        let xd = x.data();
        let yd = y.data_mut();
        for bc in 0..batch * c {
            let in_base = bc * h * w;
            let out_base = bc * oh * ow;
            for r in 0..oh {
                for q in 0..ow {
                    let i00 = in_base + (2 * r) * w + 2 * q;
                    // Running best in a register keeps this branch-free.
                    let mut best = i00;
                    let mut bv = xd[i00];
                    for i in [i00 + 1, i00 + w, i00 + w + 1] {
                        let v = xd[i];
                        if v > bv {
                            best = i;
                            bv = v;
                        }
                    }
                    yd[out_base + r * ow + q] = bv;
                    argmax[out_base + r * ow + q] = best as u32;
                }
            }
        }
        self.cache = Some((argmax, x.shape().to_vec()));
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some((argmax, in_shape)) = self.cache.take() else {
            return missing_cache("max_pool");
        };
        if argmax.len() != gy.len() {
            return Err(Error::shape_in("max_pool", format!("{} grads", argmax.len()), format!("{}", gy.len())));
        }
        let mut gx = Tensor::zeros(&in_shape);
        let gxd = gx.data_mut();
        for (g, &src) in gy.data().iter().zip(&argmax) {
            gxd[src as usize] += *g;
        }
        Ok(gx)
    }
}

/// [B, C, H, W] -> [B, C*H*W]; pure reshape.
#[derive(Debug, Default)]
pub struct Flatten<S> {
    in_shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Flatten<S> {
    pub fn new() -> Self {
        Flatten { in_shape: None, _marker: std::marker::PhantomData }
    }
}

impl<S: Scalar> Layer<S> for Flatten<S> {
    fn name(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, x: &Tensor<S>, _phase: &mut Phase) -> Result<Tensor<S>> {
        let shape = x.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape_in("flatten", "rank >= 1", "rank 0"));
        }
        let batch = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.in_shape = Some(shape);
        Ok(x.clone().reshaped(&[batch, rest]))
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some(in_shape) = self.in_shape.take() else {
            return missing_cache("flatten");
        };
        Ok(gy.clone().reshaped(&in_shape))
    }
}

/// Row-wise L2 normalization of a [batch, dim] tensor.
///
/// Rows with norm below the floor come out as zero rows and block
/// gradient flow; unit-scale embeddings never hit this in practice.
#[derive(Debug, Default)]
pub struct L2Normalize<S> {
    cache: Option<(Tensor<S>, Vec<S>)>,
}

/// Norm floor guarding division for degenerate (near-zero) rows.
pub const L2_NORM_FLOOR: f64 = 1e-12;

impl<S: Scalar> L2Normalize<S> {
    pub fn new() -> Self {
        L2Normalize { cache: None }
    }
}

impl<S: Scalar> Layer<S> for L2Normalize<S> {
    fn name(&self) -> &'static str {
        "l2_normalize"
    }

    fn forward(&mut self, x: &Tensor<S>, _phase: &mut Phase) -> Result<Tensor<S>> {
        let (batch, d) = x.dims2();
        let floor = S::from_f64(L2_NORM_FLOOR);
        let mut y = x.clone();
        let mut norms = vec![S::zero(); batch];
        for b in 0..batch {
            let row = &mut y.data_mut()[b * d..(b + 1) * d];
            let mut sq = S::zero();
            for v in row.iter() {
                sq += *v * *v;
            }
            let norm = sq.sqrt();
            norms[b] = norm;
            if norm <= floor {
                row.fill(S::zero());
            } else {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
        self.cache = Some((y.clone(), norms));
        Ok(y)
    }

    fn backward(&mut self, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let Some((y, norms)) = self.cache.take() else {
            return missing_cache("l2_normalize");
        };
        let (batch, d) = y.dims2();
        let floor = S::from_f64(L2_NORM_FLOOR);
        let mut gx = Tensor::zeros(&[batch, d]);
        for b in 0..batch {
            let norm = norms[b];
            if norm <= floor {
                continue; // degenerate row: treated as constant zero
            }
            let yr = &y.data()[b * d..(b + 1) * d];
            let gr = &gy.data()[b * d..(b + 1) * d];
            let mut dot = S::zero();
            for (yv, gv) in yr.iter().zip(gr) {
                dot += *yv * *gv;
            }
            let out = &mut gx.data_mut()[b * d..(b + 1) * d];
            for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                *o = (*gv - *yv * dot) / norm;
            }
        }
        Ok(gx)
    }
}
