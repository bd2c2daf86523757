//! The Recurrent module: a CRC layer followed by a transition block
//! (1×1 convolution, batch norm, ReLU).
//!
//! Two evaluation orders are provided. [`RecMode::Naive`] concatenates the `d`
//! CRC output segments and applies the 1×1 convolution to the `d·S_out`-channel
//! result. [`RecMode::Merged`] splits the 1×1 weights `A` column-wise into
//! blocks `A_i` and accumulates `A_i · h_i` into a single `C_out`-channel buffer
//! as each segment is produced, so the wide intermediate never exists.

use rand::Rng;

use crate::crc::{kernel_backward, CrcLayer, CrcSpec, CrcTrace};
use crate::error::{Error, Result};
use crate::ops::{batchnorm_backward_range, batchnorm_forward_range, relu, relu_backward, BnState, Padding};
use crate::state::{join, visit_bn, visit_kernel, Module, Visitor};
use crate::tensor::{ConvKernel, Real, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RecMode {
    Naive,
    #[default]
    Merged,
}

/// `TB(C_in, C_out)`: bias-free 1×1 convolution, batch norm, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBlock<T> {
    pub a: ConvKernel<T>,
    pub bn: BnState<T>,
}

impl<T: Real> TransitionBlock<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        TransitionBlock {
            a: ConvKernel::he_normal(c_out, c_in, 1, rng),
            bn: BnState::new(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.a.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.a.c_out()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecModule<T> {
    pub crc: CrcLayer<T>,
    pub tb: TransitionBlock<T>,
    pub mode: RecMode,
}

#[derive(Clone, Debug)]
pub struct RecTrace<T> {
    crc: CrcTrace<T>,
    concat: Option<Tensor4<T>>,
    pre: Tensor4<T>,
    normed: Tensor4<T>,
}

/// `acc[:, co] += Σ_ci A[co, offset + ci] · h[:, ci]` for a 1×1 kernel `A`.
fn accumulate_block<T: Real>(h: &Tensor4<T>, a: &ConvKernel<T>, offset: usize, acc: &mut Tensor4<T>) {
    let d = h.dims();
    for n in 0..d.n {
        for co in 0..a.c_out() {
            for ci in 0..d.c {
                let w = a.at(co, offset + ci, 0, 0);
                let src = h.plane(n, ci).to_vec();
                for (o, v) in acc.plane_mut(n, co).iter_mut().zip(src) {
                    *o = *o + w * v;
                }
            }
        }
    }
}

impl<T: Real> RecModule<T> {
    /// `Rec(S_in, S_out, C_out, d)` with the given CRC variant and kernels.
    pub fn new<R: Rng + ?Sized>(spec: CrcSpec, c_out: usize, rng: &mut R) -> Result<Self> {
        if c_out == 0 {
            return Err(Error::config("transition block needs at least one output channel"));
        }
        let crc = CrcLayer::new(spec, rng)?;
        let tb = TransitionBlock::new(spec.c_out(), c_out, rng);
        Ok(RecModule {
            crc,
            tb,
            mode: RecMode::default(),
        })
    }

    pub fn from_parts(crc: CrcLayer<T>, tb: TransitionBlock<T>, mode: RecMode) -> Result<Self> {
        if tb.c_in() != crc.spec().c_out() || tb.a.kh() != 1 || tb.a.kw() != 1 {
            return Err(Error::shape(format!(
                "transition block ({} -> {}, {}x{}) does not fit a CRC with {} output channels",
                tb.c_in(),
                tb.c_out(),
                tb.a.kh(),
                tb.a.kw(),
                crc.spec().c_out()
            )));
        }
        Ok(RecModule { crc, tb, mode })
    }

    pub fn c_out(&self) -> usize {
        self.tb.c_out()
    }

    pub fn param_count(&self) -> usize {
        self.crc.param_count() + self.tb.a.len() + 2 * self.tb.bn.channels()
    }

    /// Output of the 1×1 convolution, before batch norm.
    pub fn pre_norm(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self.mode {
            RecMode::Naive => {
                let h = self.crc.forward(x)?;
                crate::ops::conv2d_forward(&h, &self.tb.a, None, Padding::Same)
            }
            RecMode::Merged => {
                let mut acc = Tensor4::zeros(x.dims().with_c(self.tb.c_out()));
                let s_out = self.crc.spec().s_out;
                let a = &self.tb.a;
                self.crc.for_each_output(x, |i, h| {
                    accumulate_block(h, a, i * s_out, &mut acc);
                    Ok(())
                })?;
                Ok(acc)
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let pre = self.pre_norm(x)?;
        let n = batchnorm_forward_range(&pre, &mut self.tb.bn, 0)?;
        Ok(relu(&n))
    }

    pub fn forward_traced(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, RecTrace<T>)> {
        let (h, crc) = self.crc.forward_traced(x)?;
        let (pre, concat) = match self.mode {
            RecMode::Naive => (
                crate::ops::conv2d_forward(&h, &self.tb.a, None, Padding::Same)?,
                Some(h),
            ),
            RecMode::Merged => {
                let mut acc = Tensor4::zeros(x.dims().with_c(self.tb.c_out()));
                let s_out = self.crc.spec().s_out;
                for (i, h_i) in crc.outputs().iter().enumerate() {
                    accumulate_block(h_i, &self.tb.a, i * s_out, &mut acc);
                }
                (acc, None)
            }
        };
        let normed = batchnorm_forward_range(&pre, &mut self.tb.bn, 0)?;
        let y = relu(&normed);
        Ok((
            y,
            RecTrace {
                crc,
                concat,
                pre,
                normed,
            },
        ))
    }

    pub fn backward(&mut self, trace: &RecTrace<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        if grad_out.dims() != trace.normed.dims() {
            return Err(Error::shape(format!(
                "Rec grad_out {} for output {}",
                grad_out.dims(),
                trace.normed.dims()
            )));
        }
        let g = relu_backward(&trace.normed, grad_out)?;
        let g_pre = batchnorm_backward_range(&trace.pre, &mut self.tb.bn, 0, &g)?;
        match (&trace.concat, self.mode) {
            (Some(concat), _) => {
                let mut g_h = Tensor4::zeros(concat.dims());
                kernel_backward(concat, &mut self.tb.a, &g_pre, Some(&mut g_h))?;
                self.crc.backward(&trace.crc, &g_h)
            }
            (None, _) => {
                let s_out = self.crc.spec().s_out;
                let c_out = self.tb.c_out();
                let (a, grad_a) = self.tb.a.value_and_grad();
                let c_in = c_out_stride(a.len(), c_out);
                let mut seg_grads = Vec::with_capacity(trace.crc.outputs().len());
                for (i, h_i) in trace.crc.outputs().iter().enumerate() {
                    let off = i * s_out;
                    let d = h_i.dims();
                    let mut g_h = Tensor4::zeros(d);
                    for n in 0..d.n {
                        for co in 0..c_out {
                            let gp = g_pre.plane(n, co);
                            for ci in 0..s_out {
                                let k = co * c_in + off + ci;
                                let hv = h_i.plane(n, ci);
                                grad_a[k] = grad_a[k] + gp.iter().zip(hv).map(|(&x, &y)| x * y).sum();
                                let w = a[k];
                                for (o, &gv) in g_h.plane_mut(n, ci).iter_mut().zip(gp) {
                                    *o = *o + w * gv;
                                }
                            }
                        }
                    }
                    seg_grads.push(g_h);
                }
                self.crc.backward_segments(&trace.crc, &seg_grads)
            }
        }
    }
}

fn c_out_stride(len: usize, c_out: usize) -> usize {
    len / c_out
}

impl<T: Real> Module<T> for RecModule<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        self.crc.visit(&join(prefix, "crc"), v);
        visit_kernel(&join(prefix, "tb"), "a", &mut self.tb.a, v);
        visit_bn(&join(prefix, "tb.bn"), &mut self.tb.bn, v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crc::CrcVariant;
    use crate::ops::BnMode;
    use crate::tensor::Dims4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(spec: CrcSpec, c_out: usize, seed: u64) -> (RecModule<f64>, RecModule<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut naive = RecModule::new(spec, c_out, &mut rng).unwrap();
        naive.mode = RecMode::Naive;
        let mut merged = naive.clone();
        merged.mode = RecMode::Merged;
        (naive, merged)
    }

    #[test]
    fn block_identity_with_neutral_norm_passes_crc_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = CrcSpec::new(2, 3, 2).variant(CrcVariant::Relu);
        let mut m = RecModule::<f64>::new(spec, 6, &mut rng).unwrap();
        m.tb.a = ConvKernel::identity(6, 1);
        m.tb.bn.mode = BnMode::Eval;
        let x = Tensor4::randn(Dims4::new(1, 4, 4, 4), 1.0, &mut rng);
        let h = m.crc.forward(&x).unwrap();
        let k = 1.0 / (1.0 + crate::ops::DEFAULT_EPS).sqrt();
        for mode in [RecMode::Naive, RecMode::Merged] {
            m.mode = mode;
            let y = m.forward(&x).unwrap();
            let expect = relu(&h).map(|v| v * k);
            assert!(y.max_abs_diff(&expect).unwrap() < 1e-14);
        }
    }

    #[test]
    fn stage_one_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = RecModule::<f32>::new(CrcSpec::new(8, 32, 10), 80, &mut rng).unwrap();
        let x = Tensor4::randn(Dims4::new(1, 80, 32, 32), 1.0, &mut rng);
        assert_eq!(m.forward(&x).unwrap().dims(), Dims4::new(1, 80, 32, 32));
    }

    #[test]
    fn zero_input_linear_gives_zero_pre_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = CrcSpec::new(2, 2, 3).variant(CrcVariant::Linear);
        let mut m = RecModule::<f64>::new(spec, 4, &mut rng).unwrap();
        let x = Tensor4::zeros(Dims4::new(2, 6, 4, 4));
        assert!(m.crc.recurrence(&x).unwrap().data().iter().all(|&v| v == 0.0));
        for mode in [RecMode::Naive, RecMode::Merged] {
            m.mode = mode;
            assert!(m.pre_norm(&x).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_segment_modes_agree_exactly() {
        let (mut a, mut b) = pair(CrcSpec::new(2, 3, 1), 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let x = Tensor4::randn(Dims4::new(2, 2, 5, 5), 1.0, &mut rng);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn modes_agree_on_random_instance() {
        let (mut a, mut b) = pair(CrcSpec::new(2, 4, 3), 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = Tensor4::randn(Dims4::new(2, 6, 8, 8), 1.0, &mut rng);
        let diff = a.forward(&x).unwrap().max_abs_diff(&b.forward(&x).unwrap()).unwrap();
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        for mode in [RecMode::Naive, RecMode::Merged] {
            let (mut m, _) = pair(CrcSpec::new(1, 2, 2), 3, 6);
            m.mode = mode;
            let mut rng = ChaCha8Rng::seed_from_u64(60);
            let x = Tensor4::randn(Dims4::new(2, 2, 4, 4), 1.0, &mut rng);
            let (y, t) = m.forward_traced(&x).unwrap();
            let gx = m.backward(&t, &Tensor4::zeros(y.dims())).unwrap();
            assert!(gx.data().iter().all(|&v| v == 0.0));
            assert!(m.flat_grads().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn block_gradient_is_correlation_with_segment() {
        let (mut m, _) = pair(CrcSpec::new(1, 2, 2).variant(CrcVariant::Relu), 3, 7);
        m.mode = RecMode::Merged;
        m.tb.bn.mode = BnMode::Eval;
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = Tensor4::randn(Dims4::new(1, 2, 3, 3), 1.0, &mut rng);
        let (y, t) = m.forward_traced(&x).unwrap();
        // positive cotangent where the output is alive; the TB ReLU masks the rest
        let g = Tensor4::from_fn(
            y.dims(),
            |n, c, yy, xx| if y.at(n, c, yy, xx) > 0.0 { 1.0 } else { 0.0 },
        );
        m.zero_grad();
        m.backward(&t, &g).unwrap();
        let k = m.tb.bn.gamma.value.clone();
        let inv = 1.0 / (1.0 + crate::ops::DEFAULT_EPS).sqrt();
        let grad_a = m.tb.a.grad().unwrap().to_vec();
        for (i, h_i) in t.crc.outputs().iter().enumerate() {
            for co in 0..3 {
                for ci in 0..2 {
                    let expect: f64 = h_i
                        .plane(0, ci)
                        .iter()
                        .zip(g.plane(0, co))
                        .map(|(h, gv)| h * gv * k[co] * inv)
                        .sum();
                    let got = grad_a[co * 4 + i * 2 + ci];
                    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                }
            }
        }
    }
}
