//! Channel-wise recurrent convolution.
//!
//! The input's `d·S_in` channels are cut into `d` contiguous segments that are
//! fed, in order, to a convolutional recurrence with shared weights:
//!
//! ```text
//! z_0 = x_0 ⊛ W_x + b
//! z_i = x_i ⊛ W_x + s_{i-1} ⊛ W_h + b        (i ≥ 1)
//! ```
//!
//! The variant decides how `z_i` becomes the output segment `h_i` and which
//! value `s_i` is carried forward:
//!
//! | variant          | output `h_i`              | carried `s_i` | bias |
//! |------------------|---------------------------|---------------|------|
//! | `Relu`           | `relu(z_i)`               | `h_i`         | yes  |
//! | `SharedBnRelu`   | `relu(bn(z_i))`           | `h_i`         | no   |
//! | `SeparateBnRelu` | `relu(bn_i(z_i))`         | `h_i`         | no   |
//! | `Linear`         | `relu(bn_out(z_i))`       | `z_i`         | yes  |
//!
//! `Linear` normalizes the concatenation of the linear hidden states once, at
//! the layer output; since batch norm is per channel this is applied here
//! segment by segment on the matching channel window.
//!
//! [`Connectivity::GroupedShared`] removes the recurrence and instead applies
//! `W_x` then `W_h` to each segment independently, keeping the same weights.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward_range, batchnorm_forward_range, conv2d_accumulate, conv2d_backward_into, conv2d_forward, relu,
    relu_backward, BnState, Padding,
};
use crate::state::{join, visit_bn, visit_kernel, visit_vector, Module, Visitor};
use crate::tensor::{ConvKernel, Param, Real, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrcVariant {
    Relu,
    SharedBnRelu,
    #[default]
    SeparateBnRelu,
    Linear,
}

impl CrcVariant {
    pub const ALL: [CrcVariant; 4] = [
        CrcVariant::Relu,
        CrcVariant::SharedBnRelu,
        CrcVariant::SeparateBnRelu,
        CrcVariant::Linear,
    ];

    pub fn has_bias(self) -> bool {
        matches!(self, CrcVariant::Relu | CrcVariant::Linear)
    }

    pub fn name(self) -> &'static str {
        match self {
            CrcVariant::Relu => "relu",
            CrcVariant::SharedBnRelu => "shared-bn-relu",
            CrcVariant::SeparateBnRelu => "separate-bn-relu",
            CrcVariant::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Trainable batch-norm scalars owned by a layer of this variant.
    pub fn bn_params(self, s_out: usize, d: usize) -> usize {
        match self {
            CrcVariant::Relu => 0,
            CrcVariant::SharedBnRelu => 2 * s_out,
            CrcVariant::SeparateBnRelu | CrcVariant::Linear => 2 * d * s_out,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connectivity {
    #[default]
    Recurrent,
    GroupedShared,
}

/// Hyper-parameters of one layer: `CRC(S_in, S_out, d)` plus kernel sizes and variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CrcSpec {
    pub s_in: usize,
    pub s_out: usize,
    pub d: usize,
    pub k_x: usize,
    pub k_h: usize,
    pub variant: CrcVariant,
    pub connectivity: Connectivity,
}

impl CrcSpec {
    pub fn new(s_in: usize, s_out: usize, d: usize) -> Self {
        CrcSpec {
            s_in,
            s_out,
            d,
            k_x: 3,
            k_h: 3,
            variant: CrcVariant::default(),
            connectivity: Connectivity::default(),
        }
    }

    pub fn kernels(self, k_x: usize, k_h: usize) -> Self {
        CrcSpec { k_x, k_h, ..self }
    }

    pub fn variant(self, variant: CrcVariant) -> Self {
        CrcSpec { variant, ..self }
    }

    pub fn connectivity(self, connectivity: Connectivity) -> Self {
        CrcSpec { connectivity, ..self }
    }

    pub fn c_in(&self) -> usize {
        self.d * self.s_in
    }

    pub fn c_out(&self) -> usize {
        self.d * self.s_out
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("CRC layer needs at least one segment (d = 0)"));
        }
        if self.s_in == 0 || self.s_out == 0 {
            return Err(Error::config("CRC segment widths must be positive"));
        }
        for (name, k) in [("k_x", self.k_x), ("k_h", self.k_h)] {
            if k % 2 == 0 {
                return Err(Error::config(format!("{name} = {k} must be odd for same padding")));
            }
        }
        Ok(())
    }

    /// Convolution weights only: `k_x²·S_in·S_out + k_h²·S_out²`.
    pub fn conv_params(&self) -> usize {
        self.k_x * self.k_x * self.s_in * self.s_out + self.k_h * self.k_h * self.s_out * self.s_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrcLayer<T> {
    spec: CrcSpec,
    pub wx: ConvKernel<T>,
    pub wh: ConvKernel<T>,
    /// Present for the `Relu` and `Linear` variants.
    pub bias: Option<Param<T>>,
    /// One state for `SharedBnRelu`, `d` for `SeparateBnRelu`, one over all
    /// `d·S_out` output channels for `Linear`, none for `Relu`.
    pub norms: Vec<BnState<T>>,
}

/// Intermediate values of a forward pass that the backward pass consumes.
#[derive(Clone, Debug)]
pub struct CrcTrace<T> {
    x_segs: Vec<Tensor4<T>>,
    /// `W_x` responses, kept only for the grouped form.
    mids: Vec<Tensor4<T>>,
    pre: Vec<Tensor4<T>>,
    /// Batch-norm outputs, i.e. the ReLU inputs, for normalized variants.
    normed: Vec<Option<Tensor4<T>>>,
    outs: Vec<Tensor4<T>>,
}

impl<T> CrcTrace<T> {
    /// Output segments `h_0..h_{d-1}`.
    pub fn outputs(&self) -> &[Tensor4<T>] {
        &self.outs
    }
}

impl<T: Real> CrcLayer<T> {
    /// Layer with zero weights, zero bias and fresh batch-norm states.
    pub fn zeros(spec: CrcSpec) -> Result<Self> {
        spec.validate()?;
        let norms = match spec.variant {
            CrcVariant::Relu => vec![],
            CrcVariant::SharedBnRelu => vec![BnState::new(spec.s_out)],
            CrcVariant::SeparateBnRelu => (0..spec.d).map(|_| BnState::new(spec.s_out)).collect(),
            CrcVariant::Linear => vec![BnState::new(spec.c_out())],
        };
        Ok(CrcLayer {
            spec,
            wx: ConvKernel::zeros(spec.s_out, spec.s_in, spec.k_x, spec.k_x),
            wh: ConvKernel::zeros(spec.s_out, spec.s_out, spec.k_h, spec.k_h),
            bias: spec.variant.has_bias().then(|| Param::filled(spec.s_out, T::zero())),
            norms,
        })
    }

    /// He-normal convolution weights, zero bias, unit batch-norm scale.
    pub fn new<R: Rng + ?Sized>(spec: CrcSpec, rng: &mut R) -> Result<Self> {
        let mut layer = Self::zeros(spec)?;
        layer.wx = ConvKernel::he_normal(spec.s_out, spec.s_in, spec.k_x, rng);
        layer.wh = ConvKernel::he_normal(spec.s_out, spec.s_out, spec.k_h, rng);
        Ok(layer)
    }

    pub fn spec(&self) -> CrcSpec {
        self.spec
    }

    pub fn set_connectivity(&mut self, c: Connectivity) {
        self.spec.connectivity = c;
    }

    /// Trainable scalars, counted from the actual buffers.
    pub fn param_count(&self) -> usize {
        self.wx.len()
            + self.wh.len()
            + self.bias.as_ref().map_or(0, Param::len)
            + self.norms.iter().map(|b| 2 * b.channels()).sum::<usize>()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.dims().c != self.spec.c_in() {
            return Err(Error::shape(format!(
                "CRC({}, {}, {}) expects {} input channels, got {}",
                self.spec.s_in,
                self.spec.s_out,
                self.spec.d,
                self.spec.c_in(),
                x.dims().c
            )));
        }
        Ok(())
    }

    /// Which norm state, and at which channel offset, normalizes step `i`.
    fn norm_slot(&self, i: usize) -> Option<(usize, usize)> {
        match self.spec.variant {
            CrcVariant::Relu => None,
            CrcVariant::SharedBnRelu => Some((0, 0)),
            CrcVariant::SeparateBnRelu => Some((i, 0)),
            CrcVariant::Linear => Some((0, i * self.spec.s_out)),
        }
    }

    fn segment(&self, x: &Tensor4<T>, i: usize) -> Result<Tensor4<T>> {
        x.narrow_channels(i * self.spec.s_in, self.spec.s_in)
    }

    /// `z_i` for the recurrent form, given the carried state of step `i - 1`.
    fn pre_activation(&self, x_i: &Tensor4<T>, prev: Option<&Tensor4<T>>) -> Result<Tensor4<T>> {
        let bias = self.bias.as_ref().map(|b| b.value.as_slice());
        let mut z = conv2d_forward(x_i, &self.wx, bias, Padding::Same)?;
        if let Some(s) = prev {
            conv2d_accumulate(s, &self.wh, Padding::Same, &mut z)?;
        }
        Ok(z)
    }

    /// Runs the layer step by step, handing each output segment to `on_step`.
    /// Only the previous carried state is kept unless a trace is requested.
    fn run(
        &mut self,
        x: &Tensor4<T>,
        mut trace: Option<&mut CrcTrace<T>>,
        mut on_step: impl FnMut(usize, &Tensor4<T>, &Tensor4<T>) -> Result<()>,
    ) -> Result<()> {
        self.check_input(x)?;
        let mut carried: Option<Tensor4<T>> = None;
        for i in 0..self.spec.d {
            let x_i = self.segment(x, i)?;
            let (mid, z) = match self.spec.connectivity {
                Connectivity::Recurrent => (None, self.pre_activation(&x_i, carried.as_ref())?),
                Connectivity::GroupedShared => {
                    let a = conv2d_forward(&x_i, &self.wx, None, Padding::Same)?;
                    let bias = self.bias.as_ref().map(|b| b.value.as_slice());
                    let z = conv2d_forward(&a, &self.wh, bias, Padding::Same)?;
                    (Some(a), z)
                }
            };
            let normed = match self.norm_slot(i) {
                Some((k, c0)) => Some(batchnorm_forward_range(&z, &mut self.norms[k], c0)?),
                None => None,
            };
            let out = relu(normed.as_ref().unwrap_or(&z));
            let state = if self.spec.variant == CrcVariant::Linear {
                &z
            } else {
                &out
            };
            on_step(i, &out, state)?;
            if self.spec.connectivity == Connectivity::Recurrent && i + 1 < self.spec.d {
                carried = Some(state.clone());
            }
            if let Some(t) = trace.as_deref_mut() {
                t.x_segs.push(x_i);
                if let Some(a) = mid {
                    t.mids.push(a);
                }
                t.pre.push(z);
                t.normed.push(normed);
                t.outs.push(out);
            }
        }
        Ok(())
    }

    /// Concatenated output `(h_0, …, h_{d-1})` with `d·S_out` channels.
    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut out = Tensor4::zeros(x.dims().with_c(self.spec.c_out()));
        let s_out = self.spec.s_out;
        self.run(x, None, |i, h, _| out.write_channels(i * s_out, h))?;
        Ok(out)
    }

    pub fn forward_traced(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, CrcTrace<T>)> {
        let mut trace = CrcTrace {
            x_segs: Vec::with_capacity(self.spec.d),
            mids: Vec::new(),
            pre: Vec::with_capacity(self.spec.d),
            normed: Vec::with_capacity(self.spec.d),
            outs: Vec::with_capacity(self.spec.d),
        };
        self.run(x, Some(&mut trace), |_, _, _| Ok(()))?;
        let parts: Vec<&Tensor4<T>> = trace.outs.iter().collect();
        let out = Tensor4::concat_channels(&parts)?;
        Ok((out, trace))
    }

    /// Streams output segments without materializing the concatenation.
    pub fn for_each_output(
        &mut self,
        x: &Tensor4<T>,
        mut f: impl FnMut(usize, &Tensor4<T>) -> Result<()>,
    ) -> Result<()> {
        self.run(x, None, |i, h, _| f(i, h))
    }

    /// The carried states concatenated: the linear hidden states for `Linear`,
    /// the outputs otherwise.
    pub fn recurrence(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut out = Tensor4::zeros(x.dims().with_c(self.spec.c_out()));
        let s_out = self.spec.s_out;
        self.run(x, None, |i, _, s| out.write_channels(i * s_out, s))?;
        Ok(out)
    }

    /// Backpropagates a gradient w.r.t. the concatenated output.
    pub fn backward(&mut self, trace: &CrcTrace<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        if grad_out.dims().c != self.spec.c_out() {
            return Err(Error::shape(format!(
                "CRC grad_out has {} channels, expected {}",
                grad_out.dims().c,
                self.spec.c_out()
            )));
        }
        let segs = (0..self.spec.d)
            .map(|i| grad_out.narrow_channels(i * self.spec.s_out, self.spec.s_out))
            .collect::<Result<Vec<_>>>()?;
        self.backward_segments(trace, &segs)
    }

    /// Backpropagation through the `d` steps, accumulating into the layer's
    /// gradient buffers. `grad_outs[i]` is the gradient w.r.t. `h_i`.
    pub fn backward_segments(&mut self, trace: &CrcTrace<T>, grad_outs: &[Tensor4<T>]) -> Result<Tensor4<T>> {
        let d = self.spec.d;
        if grad_outs.len() != d || trace.outs.len() != d {
            return Err(Error::shape(format!(
                "expected {d} segment gradients and a {d}-step trace"
            )));
        }
        let xd = trace.x_segs[0].dims();
        let mut grad_x = Tensor4::zeros(xd.with_c(self.spec.c_in()));
        let mut carry: Option<Tensor4<T>> = None;
        let linear = self.spec.variant == CrcVariant::Linear;
        for i in (0..d).rev() {
            let g_out = &grad_outs[i];
            if g_out.dims() != trace.outs[i].dims() {
                return Err(Error::shape(format!(
                    "segment {i} gradient {} for output {}",
                    g_out.dims(),
                    trace.outs[i].dims()
                )));
            }
            let act_in = trace.normed[i].as_ref().unwrap_or(&trace.pre[i]);
            let mut dz = if linear {
                relu_backward(act_in, g_out)?
            } else {
                let mut g = g_out.clone();
                if let Some(c) = &carry {
                    g.add_assign(c)?;
                }
                relu_backward(act_in, &g)?
            };
            if let Some((k, c0)) = self.norm_slot(i) {
                dz = batchnorm_backward_range(&trace.pre[i], &mut self.norms[k], c0, &dz)?;
            }
            if linear {
                if let Some(c) = &carry {
                    dz.add_assign(c)?;
                }
            }
            if let Some(b) = self.bias.as_mut() {
                for n in 0..dz.dims().n {
                    for (o, g) in b.grad.iter_mut().enumerate() {
                        *g = *g + dz.plane(n, o).iter().copied().sum();
                    }
                }
            }
            let mut gx_i = Tensor4::zeros(xd.with_c(self.spec.s_in));
            match self.spec.connectivity {
                Connectivity::Recurrent => {
                    kernel_backward(&trace.x_segs[i], &mut self.wx, &dz, Some(&mut gx_i))?;
                    carry = if i > 0 {
                        let prev = if linear { &trace.pre[i - 1] } else { &trace.outs[i - 1] };
                        let mut gs = Tensor4::zeros(prev.dims());
                        kernel_backward(prev, &mut self.wh, &dz, Some(&mut gs))?;
                        Some(gs)
                    } else {
                        None
                    };
                }
                Connectivity::GroupedShared => {
                    let a = &trace.mids[i];
                    let mut ga = Tensor4::zeros(a.dims());
                    kernel_backward(a, &mut self.wh, &dz, Some(&mut ga))?;
                    kernel_backward(&trace.x_segs[i], &mut self.wx, &ga, Some(&mut gx_i))?;
                }
            }
            grad_x.write_channels(i * self.spec.s_in, &gx_i)?;
        }
        Ok(grad_x)
    }

    /// Parallel evaluation of the `Linear` recurrence from composed kernels:
    ///
    /// ```text
    /// h_i = Σ_{j≤i} x_j ⊛ (W_x then W_h applied i−j times) + Σ_{j≤i} M^j b
    /// ```
    ///
    /// where `M` is the spatial sum of `W_h`, so the bias chain is a per-channel
    /// constant. Returns the linear hidden states (before the output norm).
    /// Agrees with [`CrcLayer::recurrence`] wherever the zero padding of
    /// intermediate states is not reached.
    pub fn linear_unrolled(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        if self.spec.variant != CrcVariant::Linear {
            return Err(Error::config(format!(
                "unrolled evaluation needs the linear variant, layer is {}",
                self.spec.variant.name()
            )));
        }
        if self.spec.connectivity != Connectivity::Recurrent {
            return Err(Error::config("unrolled evaluation needs recurrent connectivity"));
        }
        self.check_input(x)?;
        let (d, s_out) = (self.spec.d, self.spec.s_out);
        let mut kernels = vec![self.wx.clone()];
        for m in 1..d {
            let next = kernels[m - 1].then(&self.wh)?;
            kernels.push(next);
        }
        let m_mat = self.wh.spatial_sum();
        let b = self
            .bias
            .as_ref()
            .map(|b| b.value.clone())
            .unwrap_or_else(|| vec![T::zero(); s_out]);
        // bias_i = Σ_{j ≤ i} M^j b
        let mut bias_terms = Vec::with_capacity(d);
        let mut power = b.clone();
        let mut acc = b;
        bias_terms.push(acc.clone());
        for _ in 1..d {
            power = (0..s_out)
                .map(|o| (0..s_out).map(|k| m_mat[o * s_out + k] * power[k]).sum())
                .collect();
            for (a, &p) in acc.iter_mut().zip(&power) {
                *a = *a + p;
            }
            bias_terms.push(acc.clone());
        }
        let segs = (0..d).map(|j| self.segment(x, j)).collect::<Result<Vec<_>>>()?;
        let outs = (0..d)
            .into_par_iter()
            .map(|i| {
                let mut h = Tensor4::zeros(x.dims().with_c(s_out));
                for (o, &bv) in bias_terms[i].iter().enumerate() {
                    for n in 0..h.dims().n {
                        h.plane_mut(n, o).fill(bv);
                    }
                }
                for j in 0..=i {
                    conv2d_accumulate(&segs[j], &kernels[i - j], Padding::Same, &mut h)?;
                }
                Ok(h)
            })
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<&Tensor4<T>> = outs.iter().collect();
        Tensor4::concat_channels(&parts)
    }

    /// Full `Linear` layer output computed from [`CrcLayer::linear_unrolled`].
    pub fn forward_unrolled(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let h = self.linear_unrolled(x)?;
        let n = batchnorm_forward_range(&h, &mut self.norms[0], 0)?;
        Ok(relu(&n))
    }
}

impl<T: Real> Module<T> for CrcLayer<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        visit_kernel(prefix, "wx", &mut self.wx, v);
        visit_kernel(prefix, "wh", &mut self.wh, v);
        if let Some(b) = self.bias.as_mut() {
            visit_vector(prefix, "bias", b, false, v);
        }
        match self.spec.variant {
            CrcVariant::SeparateBnRelu => {
                for (i, bn) in self.norms.iter_mut().enumerate() {
                    visit_bn(&join(prefix, &format!("bn{i}")), bn, v);
                }
            }
            _ => {
                for bn in &mut self.norms {
                    visit_bn(&join(prefix, "bn"), bn, v);
                }
            }
        }
    }
}

/// Same-padded convolution backward that accumulates into the kernel's own gradient.
pub(crate) fn kernel_backward<T: Real>(
    x: &Tensor4<T>,
    k: &mut ConvKernel<T>,
    grad_out: &Tensor4<T>,
    grad_x: Option<&mut Tensor4<T>>,
) -> Result<()> {
    let mut g = k.take_grad().unwrap_or_else(|| vec![T::zero(); k.len()]);
    let r = conv2d_backward_into(x, k, grad_out, Padding::Same, grad_x, Some(&mut g), None);
    k.set_grad(g);
    r
}
