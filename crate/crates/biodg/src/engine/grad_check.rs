//! Finite-difference gradient verification.
//!
//! Treats a model as a flat parameter vector plus a loss function and
//! compares analytic gradients against central differences. Run in `f64`:
//! with eps = 1e-4 the truncation and rounding errors are both far below
//! the 1e-4 relative tolerance the engine is held to.

/// A model under gradient test: flat indexed parameter access plus a
/// deterministic loss evaluation. `loss_and_grads` must rebuild the whole
/// forward/backward (with any noise frozen) on every call.
pub trait GradCheckable {
    fn n_params(&self) -> usize;
    fn get_param(&self, i: usize) -> f64;
    fn set_param(&mut self, i: usize, v: f64);
    /// Loss at current parameters and analytic dloss/dparam (flat).
    fn loss_and_grads(&mut self) -> (f64, Vec<f64>);
    /// Loss only; default recomputes gradients and drops them.
    fn loss(&mut self) -> f64 {
        self.loss_and_grads().0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor so near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-7 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Central-difference check over the given parameter indices
/// (all parameters if `indices` is empty).
pub fn check(model: &mut impl GradCheckable, eps: f64, indices: &[usize]) -> GradCheckReport {
    let all: Vec<usize>;
    let indices = if indices.is_empty() {
        all = (0..model.n_params()).collect();
        &all
    } else {
        indices
    };
    let (_, analytic) = model.loss_and_grads();
    assert_eq!(analytic.len(), model.n_params(), "gradient length mismatch");

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_index: 0, checked: 0 };
    for &i in indices {
        let orig = model.get_param(i);
        model.set_param(i, orig + eps);
        let up = model.loss();
        model.set_param(i, orig - eps);
        let down = model.loss();
        model.set_param(i, orig);
        let numeric = (up - down) / (2.0 * eps);
        let e = rel_err(analytic[i], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}

/// Adapter that exposes a [`super::Stack`] (plus optionally its input)
/// as a flat parameter vector for finite-difference checking. For stacks
/// with variational layers, `noise_seed` re-seeds the perturbation
/// stream identically on every evaluation, freezing the drawn noise so
/// the loss is a deterministic function of the parameters.
pub struct StackCheck<'a> {
    stack: &'a mut super::Stack<f64>,
    input: super::Tensor<f64>,
    loss: Box<dyn FnMut(&super::Tensor<f64>) -> (f64, super::Tensor<f64>) + 'a>,
    noise_seed: Option<u64>,
    check_input: bool,
}

impl<'a> StackCheck<'a> {
    pub fn new(
        stack: &'a mut super::Stack<f64>,
        input: super::Tensor<f64>,
        loss: impl FnMut(&super::Tensor<f64>) -> (f64, super::Tensor<f64>) + 'a,
    ) -> Self {
        StackCheck {
            stack,
            input,
            loss: Box::new(loss),
            noise_seed: None,
            check_input: true,
        }
    }

    pub fn with_frozen_noise(mut self, seed: u64) -> Self {
        self.noise_seed = Some(seed);
        self
    }

    pub fn params_only(mut self) -> Self {
        self.check_input = false;
        self
    }

    fn stack_param_count(&self) -> usize {
        self.stack.param_count()
    }
}

impl GradCheckable for StackCheck<'_> {
    fn n_params(&self) -> usize {
        self.stack_param_count() + if self.check_input { self.input.len() } else { 0 }
    }

    fn get_param(&self, i: usize) -> f64 {
        let np = self.stack_param_count();
        if i < np {
            let mut off = i;
            for block in self.stack.param_blocks() {
                if off < block.len() {
                    return block[off];
                }
                off -= block.len();
            }
            unreachable!("index {i} out of parameter range");
        } else {
            self.input.data()[i - np]
        }
    }

    fn set_param(&mut self, i: usize, v: f64) {
        let np = self.stack_param_count();
        if i < np {
            let mut off = i;
            for slot in self.stack.param_slots() {
                if off < slot.values.len() {
                    slot.values[off] = v;
                    return;
                }
                off -= slot.values.len();
            }
            unreachable!("index {i} out of parameter range");
        } else {
            self.input.data_mut()[i - np] = v;
        }
    }

    fn loss_and_grads(&mut self) -> (f64, Vec<f64>) {
        self.stack.zero_grad();
        let y = match self.noise_seed {
            None => self
                .stack
                .forward(&self.input, &mut super::Phase::Mean)
                .expect("forward"),
            Some(seed) => {
                let mut stream = crate::rng::stream(seed, &[crate::rng::tag::FLIPOUT]);
                self.stack
                    .forward(&self.input, &mut super::Phase::Sampled(&mut stream))
                    .expect("forward")
            }
        };
        let (loss, gy) = (self.loss)(&y);
        let gx = self.stack.backward(&gy).expect("backward");
        let mut grads = Vec::with_capacity(self.n_params());
        for slot in self.stack.param_slots() {
            grads.extend_from_slice(slot.grads);
        }
        if self.check_input {
            grads.extend_from_slice(gx.data());
        }
        (loss, grads)
    }
}

/// Adapter checking `dKL/dparams` of a stack's variational layers.
pub struct KlCheck<'a> {
    pub stack: &'a mut super::Stack<f64>,
}

impl GradCheckable for KlCheck<'_> {
    fn n_params(&self) -> usize {
        self.stack.param_count()
    }

    fn get_param(&self, i: usize) -> f64 {
        let mut off = i;
        for block in self.stack.param_blocks() {
            if off < block.len() {
                return block[off];
            }
            off -= block.len();
        }
        unreachable!()
    }

    fn set_param(&mut self, i: usize, v: f64) {
        let mut off = i;
        for slot in self.stack.param_slots() {
            if off < slot.values.len() {
                slot.values[off] = v;
                return;
            }
            off -= slot.values.len();
        }
        unreachable!()
    }

    fn loss_and_grads(&mut self) -> (f64, Vec<f64>) {
        self.stack.zero_grad();
        self.stack.kl_backward(1.0);
        let loss = self.stack.kl();
        let mut grads = Vec::with_capacity(self.n_params());
        for slot in self.stack.param_slots() {
            grads.extend_from_slice(slot.grads);
        }
        (loss, grads)
    }
}
