use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point type the engine can run on. Training uses `f32`; gradient
/// checks replay the same graphs in `f64`.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Dense row-major buffer with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            ));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![F::zero(); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[F]) {
        debug_assert_eq!(g.len(), self.values.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| G::lit(v.to_f64_lossy())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| G::lit(v.to_f64_lossy())).collect()),
            requires_grad: self.requires_grad,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments<F> {
    first: Vec<F>,
    second: Vec<F>,
}

/// Named trainable tensors plus the Adam state that updates them.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    moments: Vec<Moments<F>>,
    step: u64,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(self.lookup(&name).is_none(), "duplicate parameter name {name}");
        let n = tensor.len();
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        self.moments.push(Moments {
            first: vec![F::zero(); n],
            second: vec![F::zero(); n],
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn accumulate(&mut self, grads: &super::Gradients<F>) {
        for (id, g) in grads.param_grads() {
            self.tensors[id.0].accumulate_grad(g);
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// One bias-corrected Adam update over every parameter holding a
    /// gradient, followed by zeroing all gradients.
    pub fn adam_step(&mut self, opt: &Adam) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = F::lit(opt.beta1);
        let b2 = F::lit(opt.beta2);
        let one = F::one();
        let c1 = F::lit(1.0 - opt.beta1.powf(t));
        let c2 = F::lit(1.0 - opt.beta2.powf(t));
        let lr = F::lit(opt.lr);
        let eps = F::lit(opt.eps);
        for (tensor, mom) in self.tensors.iter_mut().zip(self.moments.iter_mut()) {
            let Some(grad) = tensor.grad.take() else {
                continue;
            };
            for (((w, &g), m), v) in tensor
                .values
                .iter_mut()
                .zip(&grad)
                .zip(mom.first.iter_mut())
                .zip(mom.second.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            moments: self
                .moments
                .iter()
                .map(|m| Moments {
                    first: m.first.iter().map(|v| G::lit(v.to_f64_lossy())).collect(),
                    second: m.second.iter().map(|v| G::lit(v.to_f64_lossy())).collect(),
                })
                .collect(),
            step: self.step,
        }
    }

    /// Parameter values only, in registration order; used for checkpoints.
    pub fn snapshot(&self) -> Vec<Vec<F>> {
        self.tensors.iter().map(|t| t.values.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<F>]) {
        assert_eq!(snapshot.len(), self.tensors.len());
        for (t, s) in self.tensors.iter_mut().zip(snapshot) {
            assert_eq!(t.values.len(), s.len());
            t.values.copy_from_slice(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_shape() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        ps.get_mut(id).accumulate_grad(&[0.0, 0.0, 0.0]);
        ps.adam_step(&Adam::default());
        assert_eq!(ps.get(id).values(), &[1.0, -2.0, 0.5]);
        assert!(ps.get(id).grad().is_none());
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        ps.get_mut(id).accumulate_grad(&[0.7, -3.0, 1e-2]);
        ps.adam_step(&Adam::default());
        let w = ps.get(id).values();
        assert!((w[0] - (1.0 - 0.001)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 0.001)).abs() < 1e-9);
        // |g| = 1e-2 still dominates eps = 1e-8
        assert!((w[2] - (1.0 - 0.001)).abs() < 1e-8);
    }

    #[test]
    fn adam_descends_quadratic_monotonically() {
        // f(w) = w^2, grad 2w
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut prev = 1.0;
        for _ in 0..10 {
            let w = ps.get(id).values()[0];
            ps.get_mut(id).accumulate_grad(&[2.0 * w]);
            ps.adam_step(&Adam::default());
            let now = ps.get(id).values()[0];
            assert!(now < prev && now > 0.0);
            prev = now;
        }
    }

    #[test]
    fn snapshot_restore_round_trips() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let snap = ps.snapshot();
        ps.get_mut(id).values_mut()[0] = 9.0;
        ps.restore(&snap);
        assert_eq!(ps.get(id).values(), &[1.0, 2.0]);
    }
}
