//! Uniform access to the trainable parameters and buffers of a layer tree.
//!
//! Optimizers, checkpoints, gradient zeroing and parameter counting all walk the
//! same visitor, so they agree on names and order.

use crate::ops::BnState;
use crate::tensor::{ConvKernel, Param, Real};

pub trait Visitor<T> {
    /// A trainable tensor. `decay` marks tensors subject to weight decay.
    fn param(&mut self, name: &str, shape: &[usize], value: &mut [T], grad: &mut [T], decay: bool);

    /// Non-trainable state that still belongs in a checkpoint.
    fn buffer(&mut self, _name: &str, _shape: &[usize], _value: &mut [T]) {}
}

pub trait Module<T: Real> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>);

    fn zero_grad(&mut self) {
        self.visit("", &mut ZeroGrad);
    }

    fn num_params(&mut self) -> usize {
        let mut c = Count(0);
        self.visit("", &mut c);
        c.0
    }

    /// All trainable values, concatenated in visit order.
    fn flat_params(&mut self) -> Vec<T> {
        let mut g = Gather(Vec::new(), false);
        self.visit("", &mut g);
        g.0
    }

    fn flat_grads(&mut self) -> Vec<T> {
        let mut g = Gather(Vec::new(), true);
        self.visit("", &mut g);
        g.0
    }

    fn set_flat_params(&mut self, values: &[T]) {
        let mut s = Scatter(values, 0);
        self.visit("", &mut s);
        assert_eq!(s.1, values.len(), "flat parameter length mismatch");
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_kernel<T: Real>(prefix: &str, name: &str, k: &mut ConvKernel<T>, v: &mut dyn Visitor<T>) {
    let shape = k.shape();
    let (value, grad) = k.value_and_grad();
    v.param(&join(prefix, name), &shape, value, grad, true);
}

pub(crate) fn visit_vector<T: Real>(prefix: &str, name: &str, p: &mut Param<T>, decay: bool, v: &mut dyn Visitor<T>) {
    let shape = [p.len()];
    v.param(&join(prefix, name), &shape, &mut p.value, &mut p.grad, decay);
}

pub(crate) fn visit_bn<T: Real>(prefix: &str, bn: &mut BnState<T>, v: &mut dyn Visitor<T>) {
    visit_vector(prefix, "gamma", &mut bn.gamma, false, v);
    visit_vector(prefix, "beta", &mut bn.beta, false, v);
    let shape = [bn.channels()];
    v.buffer(&join(prefix, "running_mean"), &shape, &mut bn.running_mean);
    v.buffer(&join(prefix, "running_var"), &shape, &mut bn.running_var);
}

struct ZeroGrad;

impl<T: Real> Visitor<T> for ZeroGrad {
    fn param(&mut self, _: &str, _: &[usize], _: &mut [T], grad: &mut [T], _: bool) {
        grad.fill(T::zero());
    }
}

struct Count(usize);

impl<T: Real> Visitor<T> for Count {
    fn param(&mut self, _: &str, _: &[usize], value: &mut [T], _: &mut [T], _: bool) {
        self.0 += value.len();
    }
}

struct Gather<T>(Vec<T>, bool);

impl<T: Real> Visitor<T> for Gather<T> {
    fn param(&mut self, _: &str, _: &[usize], value: &mut [T], grad: &mut [T], _: bool) {
        self.0.extend_from_slice(if self.1 { grad } else { value });
    }
}

struct Scatter<'a, T>(&'a [T], usize);

impl<T: Real> Visitor<T> for Scatter<'_, T> {
    fn param(&mut self, _: &str, _: &[usize], value: &mut [T], _: &mut [T], _: bool) {
        let n = value.len();
        value.copy_from_slice(&self.0[self.1..self.1 + n]);
        self.1 += n;
    }
}
