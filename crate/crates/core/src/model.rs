//! The RecNet classifier: a 3×3 stem, three stages of two Recurrent modules
//! with 2×2 max pooling between stages, global average pooling and a linear
//! classifier.
//!
//! Stage `i` uses CRC layers with `S_in = S_i`, `S_out = e·S_i` and `d_i`
//! segments. Each stage's first transition block returns to `S_i·d_i`
//! channels; its second one hands over `S_{i+1}·d_{i+1}` channels to the next
//! stage (`S_3·d_3` for the last one).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crc::{kernel_backward, Connectivity, CrcSpec, CrcVariant};
use crate::error::{Error, Result};
use crate::ops::{
    avgpool_global, avgpool_global_backward, batchnorm_backward_range, batchnorm_forward_range, conv2d_forward,
    linear_backward, linear_forward, maxpool2, maxpool2_backward, relu, relu_backward, BnMode, BnState, Padding,
    PoolIndices,
};
use crate::rec::{RecMode, RecModule, RecTrace};
use crate::state::{join, visit_bn, visit_kernel, visit_vector, Module, Visitor};
use crate::tensor::{ConvKernel, Dims4, Param, Real, Tensor4};

pub const TUPLE_FIELDS: [&str; 7] = ["e", "S1", "S2", "S3", "d1", "d2", "d3"];

fn default_k() -> usize {
    3
}

fn default_input_size() -> usize {
    32
}

fn default_input_channels() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecNetConfig {
    pub e: usize,
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub variant: CrcVariant,
    #[serde(default = "default_k")]
    pub k_x: usize,
    #[serde(default = "default_k")]
    pub k_h: usize,
    #[serde(default)]
    pub connectivity: Connectivity,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
}

impl RecNetConfig {
    /// `RecNet(e, S1, S2, S3, d1, d2, d3)` with 10 classes, 3×3 kernels and 32×32 RGB input.
    pub fn new(tuple: [usize; 7]) -> Self {
        let [e, s1, s2, s3, d1, d2, d3] = tuple;
        RecNetConfig {
            e,
            s1,
            s2,
            s3,
            d1,
            d2,
            d3,
            n_classes: 10,
            variant: CrcVariant::default(),
            k_x: 3,
            k_h: 3,
            connectivity: Connectivity::default(),
            input_size: 32,
            input_channels: 3,
        }
    }

    pub fn classes(self, n_classes: usize) -> Self {
        RecNetConfig { n_classes, ..self }
    }

    pub fn kernels(self, k_x: usize, k_h: usize) -> Self {
        RecNetConfig { k_x, k_h, ..self }
    }

    pub fn variant(self, variant: CrcVariant) -> Self {
        RecNetConfig { variant, ..self }
    }

    pub fn connectivity(self, connectivity: Connectivity) -> Self {
        RecNetConfig { connectivity, ..self }
    }

    pub fn input_size(self, input_size: usize) -> Self {
        RecNetConfig { input_size, ..self }
    }

    pub fn tuple(&self) -> [usize; 7] {
        [self.e, self.s1, self.s2, self.s3, self.d1, self.d2, self.d3]
    }

    /// `(S_i, d_i)` per stage.
    pub fn stages(&self) -> [(usize, usize); 3] {
        [(self.s1, self.d1), (self.s2, self.d2), (self.s3, self.d3)]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in TUPLE_FIELDS.iter().zip(self.tuple()) {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be positive"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be positive"));
        }
        for (name, k) in [("k_x", self.k_x), ("k_h", self.k_h)] {
            if k % 2 == 0 {
                return Err(Error::config(format!("{name} = {k} must be odd")));
            }
        }
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of 4 (two 2x2 poolings)",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Specs of the six Recurrent modules in order: CRC and TB output width.
    pub fn module_plan(&self) -> [(CrcSpec, usize); 6] {
        let st = self.stages();
        let next = [st[1].0 * st[1].1, st[2].0 * st[2].1, st[2].0 * st[2].1];
        std::array::from_fn(|m| {
            let (s, d) = st[m / 2];
            let spec = CrcSpec::new(s, self.e * s, d)
                .kernels(self.k_x, self.k_h)
                .variant(self.variant)
                .connectivity(self.connectivity);
            let c_out = if m % 2 == 0 { s * d } else { next[m / 2] };
            (spec, c_out)
        })
    }

    pub fn stem_channels(&self) -> usize {
        self.s1 * self.d1
    }

    pub fn feature_channels(&self) -> usize {
        self.s3 * self.d3
    }
}

/// The textual tuple form `e,S1,S2,S3,d1,d2,d3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec(pub [usize; 7]);

impl FromStr for ArchSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim();
        let body = body
            .strip_prefix("RecNet(")
            .and_then(|b| b.strip_suffix(')'))
            .unwrap_or(body);
        let parts: Vec<&str> = body.split(',').map(str::trim).collect();
        if parts.len() != 7 {
            return Err(Error::config(format!(
                "architecture needs 7 comma-separated fields (e,S1,S2,S3,d1,d2,d3), got {}",
                parts.len()
            )));
        }
        let mut out = [0usize; 7];
        for ((slot, part), name) in out.iter_mut().zip(&parts).zip(TUPLE_FIELDS) {
            *slot = match part.parse::<usize>() {
                Ok(v) if v > 0 => v,
                _ => {
                    return Err(Error::config(format!(
                        "field {name}: {part:?} is not a positive integer"
                    )))
                }
            };
        }
        Ok(ArchSpec(out))
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "{}", s.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecNetModel<T> {
    cfg: RecNetConfig,
    pub stem: ConvKernel<T>,
    pub stem_bn: BnState<T>,
    pub blocks: Vec<RecModule<T>>,
    /// `(n_classes, S3·d3)`, row-major.
    pub fc_w: Param<T>,
    pub fc_b: Param<T>,
}

/// Forward intermediates for [`RecNetModel::backward`].
#[derive(Clone, Debug)]
pub struct ModelTrace<T> {
    input: Tensor4<T>,
    stem_pre: Tensor4<T>,
    stem_normed: Tensor4<T>,
    blocks: Vec<RecTrace<T>>,
    pools: Vec<PoolIndices>,
    pooled_dims: Dims4,
    features: Tensor4<T>,
}

/// Blocks after which a 2×2 max pooling follows.
fn pools_after(block: usize) -> bool {
    block == 1 || block == 3
}

/// Keeps the initial logits near zero, so the first loss sits close to ln(classes).
pub const CLASSIFIER_STD: f64 = 0.01;

impl<T: Real> RecNetModel<T> {
    /// Builds the network with He-normal convolutions, a classifier drawn
    /// from N(0, 0.01²), unit batch-norm scale and zero biases.
    pub fn new<R: Rng + ?Sized>(cfg: RecNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvKernel::he_normal(cfg.stem_channels(), cfg.input_channels, 3, rng);
        let mut blocks = Vec::with_capacity(6);
        for (spec, c_out) in cfg.module_plan() {
            blocks.push(RecModule::new(spec, c_out, rng)?);
        }
        let f = cfg.feature_channels();
        let fc = Tensor4::<T>::randn(Dims4::new(1, 1, cfg.n_classes, f), CLASSIFIER_STD, rng);
        Ok(RecNetModel {
            cfg,
            stem,
            stem_bn: BnState::new(cfg.stem_channels()),
            blocks,
            fc_w: Param::new(fc.into_data()),
            fc_b: Param::filled(cfg.n_classes, T::zero()),
        })
    }

    pub fn config(&self) -> &RecNetConfig {
        &self.cfg
    }

    /// Switches every batch norm between batch statistics and running statistics.
    pub fn set_training(&mut self, training: bool) {
        let mode = if training { BnMode::Train } else { BnMode::Eval };
        self.stem_bn.mode = mode;
        for b in &mut self.blocks {
            for bn in &mut b.crc.norms {
                bn.mode = mode;
            }
            b.tb.bn.mode = mode;
        }
    }

    pub fn set_rec_mode(&mut self, mode: RecMode) {
        for b in &mut self.blocks {
            b.mode = mode;
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let d = x.dims();
        let s = self.cfg.input_size;
        if d.c != self.cfg.input_channels || d.h != s || d.w != s {
            return Err(Error::shape(format!(
                "model expects (N, {}, {s}, {s}) input, got {d}",
                self.cfg.input_channels
            )));
        }
        Ok(())
    }

    /// Logits `(N, n_classes, 1, 1)`.
    pub fn forward(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let z = conv2d_forward(x, &self.stem, None, Padding::Same)?;
        let mut a = relu(&batchnorm_forward_range(&z, &mut self.stem_bn, 0)?);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            a = b.forward(&a)?;
            if pools_after(i) {
                a = maxpool2(&a)?.0;
            }
        }
        linear_forward(&avgpool_global(&a), &self.fc_w.value, &self.fc_b.value)
    }

    pub fn forward_traced(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ModelTrace<T>)> {
        self.check_input(x)?;
        let stem_pre = conv2d_forward(x, &self.stem, None, Padding::Same)?;
        let stem_normed = batchnorm_forward_range(&stem_pre, &mut self.stem_bn, 0)?;
        let mut a = relu(&stem_normed);
        let mut blocks = Vec::with_capacity(6);
        let mut pools = Vec::with_capacity(2);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let (y, t) = b.forward_traced(&a)?;
            blocks.push(t);
            a = y;
            if pools_after(i) {
                let (p, idx) = maxpool2(&a)?;
                pools.push(idx);
                a = p;
            }
        }
        let pooled_dims = a.dims();
        let features = avgpool_global(&a);
        let logits = linear_forward(&features, &self.fc_w.value, &self.fc_b.value)?;
        let trace = ModelTrace {
            input: x.clone(),
            stem_pre,
            stem_normed,
            blocks,
            pools,
            pooled_dims,
            features,
        };
        Ok((logits, trace))
    }

    /// Accumulates parameter gradients for a loss gradient w.r.t. the logits.
    pub fn backward(&mut self, trace: &ModelTrace<T>, grad_logits: &Tensor4<T>) -> Result<()> {
        let g = linear_backward(
            &trace.features,
            &self.fc_w.value,
            grad_logits,
            &mut self.fc_w.grad,
            &mut self.fc_b.grad,
        )?;
        let mut g = avgpool_global_backward(trace.pooled_dims, &g)?;
        let mut pools = trace.pools.iter().rev();
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            if pools_after(i) {
                let idx = pools
                    .next()
                    .ok_or_else(|| Error::shape("trace is missing a pooling step"))?;
                g = maxpool2_backward(idx, &g)?;
            }
            g = b.backward(&trace.blocks[i], &g)?;
        }
        let g = relu_backward(&trace.stem_normed, &g)?;
        let g = batchnorm_backward_range(&trace.stem_pre, &mut self.stem_bn, 0, &g)?;
        kernel_backward(&trace.input, &mut self.stem, &g, None)
    }
}

impl<T: Real> Module<T> for RecNetModel<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor<T>) {
        visit_kernel(prefix, "stem.w", &mut self.stem, v);
        visit_bn(&join(prefix, "stem.bn"), &mut self.stem_bn, v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("rec{}_{}", i / 2 + 1, i % 2 + 1)), v);
        }
        visit_kernel_like(
            prefix,
            "fc.w",
            &mut self.fc_w,
            [self.cfg.n_classes, self.cfg.feature_channels()],
            v,
        );
        visit_vector(prefix, "fc.b", &mut self.fc_b, false, v);
    }
}

fn visit_kernel_like<T: Real>(prefix: &str, name: &str, p: &mut Param<T>, shape: [usize; 2], v: &mut dyn Visitor<T>) {
    v.param(&join(prefix, name), &shape, &mut p.value, &mut p.grad, true);
}
