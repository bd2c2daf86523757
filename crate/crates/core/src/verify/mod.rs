//! Property suites run in `f64` on random instances: gradients, merged-vs-naive
//! equivalence, unrolled linear recurrence, causality and parameter counts.
//!
//! Every suite is a pure function of `(seed, trials)` and returns one
//! [`PropertyResult`] per property with the largest error it observed.

pub mod gradcheck;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accounting::{acronym, crc_params, dense_conv_params, param_count, Convention};
use crate::crc::{Connectivity, CrcLayer, CrcSpec, CrcVariant};
use crate::model::RecNetConfig;
use crate::ops::{
    avgpool_global, avgpool_global_backward, batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward,
    linear_backward, linear_forward, maxpool2, maxpool2_backward, relu, relu_backward, softmax_cross_entropy, BnMode,
    BnState, Padding,
};
use crate::rec::{RecMode, RecModule};
use crate::state::Module;
use crate::tensor::{ConvKernel, Dims4, Tensor4};
use gradcheck::{check_gradient, GradCheck, GradCheckConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Grad,
    Equiv,
    Unroll,
    Causality,
    Counts,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Grad,
        Suite::Equiv,
        Suite::Unroll,
        Suite::Causality,
        Suite::Counts,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Equiv => "equiv",
            Suite::Unroll => "unroll",
            Suite::Causality => "causality",
            Suite::Counts => "counts",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn run(self, seed: u64, trials: usize) -> Vec<PropertyResult> {
        match self {
            Suite::Grad => grad_suite(seed, trials),
            Suite::Equiv => equiv_suite(seed, trials),
            Suite::Unroll => unroll_suite(seed, trials),
            Suite::Causality => causality_suite(seed, trials),
            Suite::Counts => counts_suite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub suite: &'static str,
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<10} {:<40} max_err={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.max_error,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

fn result(
    suite: &'static str,
    name: impl Into<String>,
    max_error: f64,
    tolerance: f64,
    passed: bool,
    detail: String,
) -> PropertyResult {
    PropertyResult {
        suite,
        name: name.into(),
        max_error,
        tolerance,
        passed,
        detail,
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn randn(d: Dims4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::randn(d, 1.0, rng)
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_dims(rng: &mut ChaCha8Rng, c: usize) -> Dims4 {
    Dims4::new(
        rng.random_range(1..=2),
        c,
        rng.random_range(2..=6),
        rng.random_range(2..=6),
    )
}

fn random_variant(rng: &mut ChaCha8Rng) -> CrcVariant {
    CrcVariant::ALL[rng.random_range(0..4)]
}

/// Random CRC spec with `d ≤ max_d` and at most 4 input channels overall.
fn random_spec(rng: &mut ChaCha8Rng, max_d: usize) -> CrcSpec {
    let d = rng.random_range(1..=max_d);
    let s_in = rng.random_range(1..=(4 / d).max(1));
    let ks = [1, 3];
    CrcSpec::new(s_in, rng.random_range(1..=3), d)
        .kernels(ks[rng.random_range(0..2)], ks[rng.random_range(0..2)])
        .variant(random_variant(rng))
}

/// Perturbs batch-norm affine parameters and biases away from their initial
/// values so their gradients are exercised in general position.
fn jitter_layer(l: &mut CrcLayer<f64>, rng: &mut ChaCha8Rng) {
    if let Some(b) = l.bias.as_mut() {
        b.value = rand_vec(b.len(), rng);
    }
    for bn in &mut l.norms {
        jitter_bn(bn, rng);
    }
}

fn jitter_bn(bn: &mut BnState<f64>, rng: &mut ChaCha8Rng) {
    bn.gamma.value = (0..bn.channels()).map(|_| rng.random_range(0.5..1.5)).collect();
    bn.beta.value = rand_vec(bn.channels(), rng);
}

fn join_point(x: &Tensor4<f64>, params: Vec<f64>) -> Vec<f64> {
    let mut p = x.data().to_vec();
    p.extend(params);
    p
}

/// Gradient of `⟨r, f(x, θ)⟩` w.r.t. `(x, θ)` for a module, checked against finite differences.
fn check_module<M: Module<f64> + Clone>(
    module: &mut M,
    x: &Tensor4<f64>,
    cfg: &GradCheckConfig,
    forward: impl Fn(&mut M, &Tensor4<f64>) -> Tensor4<f64>,
    analytic: impl FnOnce(&mut M, &Tensor4<f64>, &Tensor4<f64>) -> Tensor4<f64>,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let mut probe = module.clone();
    let y = forward(&mut probe, x);
    let r = randn(y.dims(), rng);
    module.zero_grad();
    let gx = analytic(module, x, &r);
    let point = join_point(x, module.flat_params());
    let grads = join_point(&gx, module.flat_grads());
    let nx = x.dims().len();
    let dims = x.dims();
    check_gradient(&point, &grads, cfg, |p| {
        probe.set_flat_params(&p[nx..]);
        let xi = Tensor4::new(dims, p[..nx].to_vec()).expect("dims");
        forward(&mut probe, &xi).dot(&r).expect("dims")
    })
}

fn summarize(suite: &'static str, name: &str, checks: &[GradCheck], cfg: &GradCheckConfig) -> PropertyResult {
    let mut total = GradCheck::default();
    let mut failed = 0;
    for c in checks {
        if !c.passed(cfg) {
            failed += 1;
        }
        total.merge(c);
    }
    result(
        suite,
        name,
        total.max_rel_err,
        cfg.tolerance,
        failed == 0 && !checks.is_empty(),
        format!(
            "{} instances, {} coordinates, {} kinks, {failed} failed",
            checks.len(),
            total.checked,
            total.kinks
        ),
    )
}

pub fn grad_suite(seed: u64, trials: usize) -> Vec<PropertyResult> {
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    let s = "grad";

    let mut rng = rng_for(seed, 1);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|_| {
            let c_in = rng.random_range(1..=4);
            let c_out = rng.random_range(1..=4);
            let k = [1, 3][rng.random_range(0..2)];
            let x = randn(rand_dims(&mut rng, c_in), &mut rng);
            let w = ConvKernel::<f64>::he_normal(c_out, c_in, k, &mut rng);
            let b = rand_vec(c_out, &mut rng);
            let y = conv2d_forward(&x, &w, Some(&b), Padding::Same).expect("conv");
            let r = randn(y.dims(), &mut rng);
            let g = conv2d_backward(&x, &w, &r, Padding::Same).expect("conv backward");
            let (nx, nw) = (x.dims().len(), w.len());
            let mut point = x.data().to_vec();
            point.extend_from_slice(w.data());
            point.extend_from_slice(&b);
            let mut analytic = g.grad_x.data().to_vec();
            analytic.extend_from_slice(g.grad_w.data());
            analytic.extend_from_slice(&g.grad_bias);
            let xd = x.dims();
            check_gradient(&point, &analytic, &cfg, |p| {
                let xi = Tensor4::new(xd, p[..nx].to_vec()).expect("dims");
                let wi = ConvKernel::new(c_out, c_in, k, k, p[nx..nx + nw].to_vec()).expect("dims");
                conv2d_forward(&xi, &wi, Some(&p[nx + nw..]), Padding::Same)
                    .expect("conv")
                    .dot(&r)
                    .expect("dims")
            })
        })
        .collect();
    out.push(summarize(s, "conv2d", &checks, &cfg));

    let mut rng = rng_for(seed, 2);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|_| {
            let c = rng.random_range(1..=4);
            let x = randn(rand_dims(&mut rng, c), &mut rng);
            let mut bn = BnState::<f64>::new(c);
            jitter_bn(&mut bn, &mut rng);
            let y = batchnorm_forward(&x, &mut bn.clone()).expect("bn");
            let r = randn(y.dims(), &mut rng);
            let g = batchnorm_backward(&x, &bn, &r).expect("bn backward");
            let nx = x.dims().len();
            let mut point = x.data().to_vec();
            point.extend_from_slice(&bn.gamma.value);
            point.extend_from_slice(&bn.beta.value);
            let mut analytic = g.grad_x.data().to_vec();
            analytic.extend_from_slice(&g.grad_gamma);
            analytic.extend_from_slice(&g.grad_beta);
            let xd = x.dims();
            check_gradient(&point, &analytic, &cfg, |p| {
                let mut st = bn.clone();
                st.gamma.value = p[nx..nx + c].to_vec();
                st.beta.value = p[nx + c..].to_vec();
                let xi = Tensor4::new(xd, p[..nx].to_vec()).expect("dims");
                batchnorm_forward(&xi, &mut st).expect("bn").dot(&r).expect("dims")
            })
        })
        .collect();
    out.push(summarize(s, "batchnorm (train)", &checks, &cfg));

    let mut rng = rng_for(seed, 3);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|_| {
            let c = rng.random_range(1..=4);
            let x = randn(rand_dims(&mut rng, c), &mut rng);
            let r = randn(x.dims(), &mut rng);
            let g = relu_backward(&x, &r).expect("relu");
            let xd = x.dims();
            check_gradient(x.data(), g.data(), &cfg, |p| {
                relu(&Tensor4::new(xd, p.to_vec()).expect("dims"))
                    .dot(&r)
                    .expect("dims")
            })
        })
        .collect();
    out.push(summarize(s, "relu", &checks, &cfg));

    let mut rng = rng_for(seed, 4);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|_| {
            let d = Dims4::new(
                rng.random_range(1..=2),
                rng.random_range(1..=4),
                2 * rng.random_range(1..=3),
                2 * rng.random_range(1..=3),
            );
            let x = randn(d, &mut rng);
            let (y, idx) = maxpool2(&x).expect("pool");
            let r = randn(y.dims(), &mut rng);
            let g = maxpool2_backward(&idx, &r).expect("pool backward");
            check_gradient(x.data(), g.data(), &cfg, |p| {
                maxpool2(&Tensor4::new(d, p.to_vec()).expect("dims"))
                    .expect("pool")
                    .0
                    .dot(&r)
                    .expect("dims")
            })
        })
        .collect();
    out.push(summarize(s, "maxpool2", &checks, &cfg));

    let mut rng = rng_for(seed, 5);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|_| {
            let c = rng.random_range(1..=4);
            let x = randn(rand_dims(&mut rng, c), &mut rng);
            let y = avgpool_global(&x);
            let r = randn(y.dims(), &mut rng);
            let g = avgpool_global_backward(x.dims(), &r).expect("avgpool");
            let xd = x.dims();
            check_gradient(x.data(), g.data(), &cfg, |p| {
                avgpool_global(&Tensor4::new(xd, p.to_vec()).expect("dims"))
                    .dot(&r)
                    .expect("dims")
            })
        })
        .collect();
    out.push(summarize(s, "avgpool_global", &checks, &cfg));

    let mut rng = rng_for(seed, 6);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|_| {
            let f = rng.random_range(1..=8);
            let k = rng.random_range(1..=5);
            let x = randn(Dims4::new(rng.random_range(1..=2), f, 1, 1), &mut rng);
            let w = rand_vec(k * f, &mut rng);
            let b = rand_vec(k, &mut rng);
            let y = linear_forward(&x, &w, &b).expect("linear");
            let r = randn(y.dims(), &mut rng);
            let (mut gw, mut gb) = (vec![0.0; w.len()], vec![0.0; k]);
            let gx = linear_backward(&x, &w, &r, &mut gw, &mut gb).expect("linear backward");
            let nx = x.dims().len();
            let mut point = x.data().to_vec();
            point.extend_from_slice(&w);
            point.extend_from_slice(&b);
            let mut analytic = gx.data().to_vec();
            analytic.extend(gw);
            analytic.extend(gb);
            let xd = x.dims();
            check_gradient(&point, &analytic, &cfg, |p| {
                let xi = Tensor4::new(xd, p[..nx].to_vec()).expect("dims");
                linear_forward(&xi, &p[nx..nx + k * f], &p[nx + k * f..])
                    .expect("linear")
                    .dot(&r)
                    .expect("dims")
            })
        })
        .collect();
    out.push(summarize(s, "linear", &checks, &cfg));

    let mut rng = rng_for(seed, 7);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|_| {
            let k = rng.random_range(2..=6);
            let n = rng.random_range(1..=3);
            let x = Tensor4::randn(Dims4::new(n, k, 1, 1), 2.0, &mut rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let (_, g) = softmax_cross_entropy(&x, &labels).expect("xent");
            let xd = x.dims();
            check_gradient(x.data(), g.data(), &cfg, |p| {
                softmax_cross_entropy(&Tensor4::new(xd, p.to_vec()).expect("dims"), &labels)
                    .expect("xent")
                    .0
            })
        })
        .collect();
    out.push(summarize(s, "softmax_cross_entropy", &checks, &cfg));

    let mut rng = rng_for(seed, 8);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|t| {
            let conn = if t % 2 == 0 {
                Connectivity::Recurrent
            } else {
                Connectivity::GroupedShared
            };
            let spec = random_spec(&mut rng, 4).connectivity(conn);
            let mut layer = CrcLayer::<f64>::new(spec, &mut rng).expect("spec");
            jitter_layer(&mut layer, &mut rng);
            let x = randn(rand_dims(&mut rng, spec.c_in()), &mut rng);
            check_module(
                &mut layer,
                &x,
                &cfg,
                |m, x| m.forward(x).expect("crc"),
                |m, x, r| {
                    let (_, t) = m.forward_traced(x).expect("crc");
                    m.backward(&t, r).expect("crc backward")
                },
                &mut rng,
            )
        })
        .collect();
    out.push(summarize(s, "crc layer (all variants)", &checks, &cfg));

    let mut rng = rng_for(seed, 9);
    let checks: Vec<GradCheck> = (0..trials)
        .map(|t| {
            let spec = random_spec(&mut rng, 4);
            let c_out = rng.random_range(1..=4);
            let mut m = RecModule::<f64>::new(spec, c_out, &mut rng).expect("spec");
            m.mode = if t % 2 == 0 { RecMode::Naive } else { RecMode::Merged };
            jitter_layer(&mut m.crc, &mut rng);
            jitter_bn(&mut m.tb.bn, &mut rng);
            let x = randn(rand_dims(&mut rng, spec.c_in()), &mut rng);
            check_module(
                &mut m,
                &x,
                &cfg,
                |m, x| m.forward(x).expect("rec"),
                |m, x, r| {
                    let (_, t) = m.forward_traced(x).expect("rec");
                    m.backward(&t, r).expect("rec backward")
                },
                &mut rng,
            )
        })
        .collect();
    out.push(summarize(s, "recurrent module (both modes)", &checks, &cfg));
    out
}

/// Naive vs merged Recurrent modules on the same weights.
pub fn equiv_suite(seed: u64, trials: usize) -> Vec<PropertyResult> {
    let mut rng = rng_for(seed, 20);
    let (mut fwd, mut bwd) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let d = rng.random_range(1..=8);
        let spec = CrcSpec::new(rng.random_range(1..=3), rng.random_range(1..=4), d)
            .kernels([1, 3][rng.random_range(0..2)], [1, 3][rng.random_range(0..2)])
            .variant(random_variant(&mut rng));
        let c_out = rng.random_range(1..=6);
        let mut naive = RecModule::<f64>::new(spec, c_out, &mut rng).expect("spec");
        jitter_layer(&mut naive.crc, &mut rng);
        jitter_bn(&mut naive.tb.bn, &mut rng);
        naive.mode = RecMode::Naive;
        let mut merged = naive.clone();
        merged.mode = RecMode::Merged;
        let dims = Dims4::new(
            rng.random_range(1..=2),
            spec.c_in(),
            rng.random_range(3..=8),
            rng.random_range(3..=8),
        );
        let x = randn(dims, &mut rng);
        let (ya, ta) = naive.forward_traced(&x).expect("naive");
        let (yb, tb) = merged.forward_traced(&x).expect("merged");
        fwd = fwd.max(ya.max_abs_diff(&yb).expect("dims"));
        let yc = merged.clone().forward(&x).expect("merged");
        fwd = fwd.max(ya.max_abs_diff(&yc).expect("dims"));
        let r = randn(ya.dims(), &mut rng);
        naive.zero_grad();
        merged.zero_grad();
        let ga = naive.backward(&ta, &r).expect("naive backward");
        let gb = merged.backward(&tb, &r).expect("merged backward");
        bwd = bwd.max(ga.max_abs_diff(&gb).expect("dims"));
        for (a, b) in naive.flat_grads().iter().zip(merged.flat_grads()) {
            bwd = bwd.max((a - b).abs());
        }
    }
    vec![
        result(
            "equiv",
            "merged == naive forward",
            fwd,
            1e-9,
            fwd < 1e-9 && trials > 0,
            format!("{trials} instances, d <= 8"),
        ),
        result(
            "equiv",
            "merged == naive gradients",
            bwd,
            1e-8,
            bwd < 1e-8 && trials > 0,
            format!("{trials} instances"),
        ),
    ]
}

/// Iterative vs composed-kernel evaluation of the linear recurrence.
pub fn unroll_suite(seed: u64, trials: usize) -> Vec<PropertyResult> {
    let mut rng = rng_for(seed, 30);
    let (mut border_err, mut interior_err) = (0.0f64, 0.0f64);
    let mut cases = 0;
    for t in 0..trials {
        for (k_x, k_h) in [(1, 1), (1, 3), (3, 1), (3, 3)] {
            let d = 1 + (t + k_x + k_h) % 5;
            let spec = CrcSpec::new(rng.random_range(1..=2), rng.random_range(1..=3), d)
                .kernels(k_x, k_h)
                .variant(CrcVariant::Linear);
            let mut layer = CrcLayer::<f64>::new(spec, &mut rng).expect("spec");
            // the hidden states do not depend on the output norm; eval mode
            // lets single-pixel inputs through
            for bn in &mut layer.norms {
                bn.mode = BnMode::Eval;
            }
            let (rx, rh) = ((k_x - 1) / 2, (k_h - 1) / 2);
            let border = rx + (d - 1) * rh;
            let inner = rng.random_range(1..=4);
            let side = 2 * border + inner;
            let n = rng.random_range(1..=2);

            // zero border and zero bias: exact on every pixel
            let x = Tensor4::from_fn(Dims4::new(n, spec.c_in(), side, side), |_, _, y, xx| {
                let inside = (border..border + inner).contains(&y) && (border..border + inner).contains(&xx);
                if inside {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            let iter = layer.recurrence(&x).expect("recurrence");
            let unrolled = layer.linear_unrolled(&x).expect("unrolled");
            border_err = border_err.max(iter.max_abs_diff(&unrolled).expect("dims"));

            // general input with bias: exact away from the border
            if let Some(b) = layer.bias.as_mut() {
                b.value = rand_vec(b.len(), &mut rng);
            }
            let margin = (d - 1) * rh + rx;
            let side = 2 * margin + rng.random_range(1..=4);
            let x = randn(Dims4::new(n, spec.c_in(), side, side), &mut rng);
            let iter = layer.recurrence(&x).expect("recurrence");
            let unrolled = layer.linear_unrolled(&x).expect("unrolled");
            let dd = iter.dims();
            for nn in 0..dd.n {
                for c in 0..dd.c {
                    for y in margin..side - margin {
                        for xx in margin..side - margin {
                            let e = (iter.at(nn, c, y, xx) - unrolled.at(nn, c, y, xx)).abs();
                            interior_err = interior_err.max(e);
                        }
                    }
                }
            }
            cases += 1;
        }
    }
    vec![
        result(
            "unroll",
            "composed kernels == recurrence (zero border)",
            border_err,
            1e-5,
            border_err < 1e-5 && cases > 0,
            format!("{cases} instances, d <= 5, k in {{1,3}}"),
        ),
        result(
            "unroll",
            "composed kernels == recurrence (interior)",
            interior_err,
            1e-5,
            interior_err < 1e-5 && cases > 0,
            "margin (d-1)(k_h-1)/2 + (k_x-1)/2".into(),
        ),
    ]
}

fn permute_segments(x: &Tensor4<f64>, seg: usize, perm: &[usize]) -> Tensor4<f64> {
    let mut out = Tensor4::zeros(x.dims());
    for (dst, &src) in perm.iter().enumerate() {
        let part = x.narrow_channels(src * seg, seg).expect("segment");
        out.write_channels(dst * seg, &part).expect("segment");
    }
    out
}

/// History-only dependence of the recurrence, and the order behaviour that
/// separates it from the grouped control.
pub fn causality_suite(seed: u64, trials: usize) -> Vec<PropertyResult> {
    let mut rng = rng_for(seed, 40);
    let mut violations = 0usize;
    let mut draws = 0usize;
    let mut max_change = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(2..=5);
        let spec = CrcSpec::new(rng.random_range(1..=2), rng.random_range(1..=3), d)
            .kernels([1, 3][rng.random_range(0..2)], [1, 3][rng.random_range(0..2)])
            .variant(random_variant(&mut rng));
        let mut layer = CrcLayer::<f64>::new(spec, &mut rng).expect("spec");
        jitter_layer(&mut layer, &mut rng);
        let dims = Dims4::new(
            rng.random_range(1..=2),
            spec.c_in(),
            rng.random_range(2..=6),
            rng.random_range(2..=6),
        );
        let x = randn(dims, &mut rng);
        let j = rng.random_range(1..d);
        let mut xp = x.clone();
        for n in 0..dims.n {
            for c in j * spec.s_in..(j + 1) * spec.s_in {
                for v in xp.plane_mut(n, c) {
                    *v += rng.random_range(-1.0..1.0);
                }
            }
        }
        let a = layer.clone().forward(&x).expect("crc");
        let b = layer.clone().forward(&xp).expect("crc");
        for i in 0..j {
            let ha = a.narrow_channels(i * spec.s_out, spec.s_out).expect("segment");
            let hb = b.narrow_channels(i * spec.s_out, spec.s_out).expect("segment");
            draws += 1;
            if ha.data() != hb.data() {
                violations += 1;
                max_change = max_change.max(ha.max_abs_diff(&hb).expect("dims"));
            }
        }
    }

    // reach: x_0 influences the last linear hidden state
    let mut rng = rng_for(seed, 41);
    let mut unreached = 0;
    for _ in 0..trials {
        let d = rng.random_range(2..=5);
        let spec = CrcSpec::new(1, rng.random_range(1..=3), d).variant(CrcVariant::Linear);
        let mut layer = CrcLayer::<f64>::new(spec, &mut rng).expect("spec");
        let x = randn(Dims4::new(1, d, 4, 4), &mut rng);
        let mut xp = x.clone();
        for v in xp.plane_mut(0, 0) {
            *v += 1.0;
        }
        let a = layer.recurrence(&x).expect("crc");
        let b = layer.recurrence(&xp).expect("crc");
        let last = |t: &Tensor4<f64>| t.narrow_channels((d - 1) * spec.s_out, spec.s_out).expect("segment");
        if last(&a).data() == last(&b).data() {
            unreached += 1;
        }
    }

    // grouped control: segment permutations commute with the layer
    let mut rng = rng_for(seed, 42);
    let mut grouped_err = 0.0f64;
    let mut counts_equal = true;
    for _ in 0..trials.max(1) {
        let d = rng.random_range(2..=5);
        let spec = CrcSpec::new(rng.random_range(1..=2), rng.random_range(1..=3), d);
        let grouped_spec = spec.connectivity(Connectivity::GroupedShared);
        let mut grouped = CrcLayer::<f64>::new(grouped_spec, &mut rng).expect("spec");
        let recurrent = CrcLayer::<f64>::zeros(spec).expect("spec");
        counts_equal &= grouped.param_count() == recurrent.param_count();
        let x = randn(Dims4::new(2, spec.c_in(), 4, 4), &mut rng);
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut rng);
        let y = grouped.forward(&x).expect("grouped");
        let yp = grouped
            .forward(&permute_segments(&x, spec.s_in, &perm))
            .expect("grouped");
        grouped_err = grouped_err.max(yp.max_abs_diff(&permute_segments(&y, spec.s_out, &perm)).expect("dims"));
    }

    // recurrent form: a witness of order sensitivity within 10 seeds
    let mut witness = None;
    for s in 0..10u64 {
        let mut rng = rng_for(seed.wrapping_add(s), 43);
        let spec = CrcSpec::new(2, 3, 3);
        let mut layer = CrcLayer::<f64>::new(spec, &mut rng).expect("spec");
        let x = randn(Dims4::new(2, spec.c_in(), 4, 4), &mut rng);
        let perm = [2, 0, 1];
        let y = layer.forward(&x).expect("crc");
        let yp = layer.forward(&permute_segments(&x, spec.s_in, &perm)).expect("crc");
        let gap = yp.max_abs_diff(&permute_segments(&y, spec.s_out, &perm)).expect("dims");
        if gap > 1e-6 {
            witness = Some((s, gap));
            break;
        }
    }

    vec![
        result(
            "causality",
            "x_j leaves h_i (i < j) bit-identical",
            max_change,
            0.0,
            violations == 0 && draws > 0,
            format!("{draws} (i, j, instance) draws, {violations} changed"),
        ),
        result(
            "causality",
            "x_0 reaches the last segment",
            unreached as f64,
            0.0,
            unreached == 0,
            format!("{} of {trials} instances reached", trials - unreached),
        ),
        result(
            "causality",
            "grouped control is permutation-equivariant",
            grouped_err,
            0.0,
            grouped_err == 0.0 && counts_equal,
            format!("parameter counts equal: {counts_equal}"),
        ),
        result(
            "causality",
            "recurrent form is order-sensitive",
            witness.map_or(0.0, |w| w.1),
            1e-6,
            witness.is_some(),
            witness.map_or("no witness in 10 seeds".into(), |(s, _)| {
                format!("witness at seed offset {s}")
            }),
        ),
    ]
}

/// Published single-layer counts.
pub const SINGLE_LAYER: [(&str, u64); 3] = [
    ("crc with-bn", 47_360),
    ("crc formula-only", 46_080),
    ("dense 3x3 160->640", 921_600),
];

/// `(label, config, published total)` for the network-level comparisons.
pub fn published_totals() -> Vec<(String, RecNetConfig, u64)> {
    let base = |t: [usize; 7]| RecNetConfig::new(t);
    let mut rows = Vec::new();
    for (e, p) in [(1, 424_000), (2, 824_000), (4, 1_769_000), (8, 4_239_000)] {
        rows.push((format!("expansion e={e}"), base([e, 8, 16, 32, 10, 10, 10]), p));
    }
    for (kx, kh, p) in [(3, 1, 1_425_000), (1, 3, 1_683_000), (3, 3, 1_769_000)] {
        rows.push((
            format!("kernels k_x={kx} k_h={kh}"),
            base([4, 8, 16, 32, 10, 10, 10]).kernels(kx, kh),
            p,
        ));
    }
    for (t, _, p) in TABLE3 {
        rows.push((format!("RecNet{t:?}"), base(t), p));
    }
    rows
}

/// `(tuple, acronym, published total)` for the depth/width exploration.
pub const TABLE3: [([usize; 7], &str, u64); 12] = [
    ([4, 4, 8, 16, 10, 10, 10], "RecNet-60-640", 471_000),
    ([4, 4, 8, 16, 15, 15, 15], "RecNet-90-960", 863_000),
    ([4, 4, 8, 16, 20, 20, 20], "RecNet-120-1280", 1_406_000),
    ([4, 8, 16, 32, 10, 10, 10], "RecNet-60-1280", 1_769_000),
    ([4, 8, 16, 32, 15, 15, 15], "RecNet-90-1920", 3_306_000),
    ([4, 8, 16, 32, 20, 20, 20], "RecNet-120-2560", 5_444_000),
    ([4, 8, 8, 8, 5, 10, 15], "RecNet-60-480", 316_000),
    ([4, 8, 8, 8, 10, 15, 20], "RecNet-90-640", 537_000),
    ([4, 8, 8, 8, 10, 20, 30], "RecNet-120-960", 930_000),
    ([4, 16, 16, 16, 5, 10, 15], "RecNet-60-960", 1_137_000),
    ([4, 16, 16, 16, 10, 15, 20], "RecNet-90-1280", 2_028_000),
    ([4, 16, 16, 16, 10, 20, 30], "RecNet-120-1920", 3_569_000),
];

/// Relative error of the closer of the 10- and 100-class totals, and which one it was.
pub fn best_total_error(cfg: RecNetConfig, published: u64) -> (f64, usize, u64) {
    [10, 100]
        .into_iter()
        .map(|n| {
            let t = param_count(&cfg.classes(n), Convention::WithBnAndBias);
            ((t as f64 - published as f64).abs() / published as f64, n, t)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("two candidates")
}

pub fn counts_suite() -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let spec = CrcSpec::new(16, 64, 10);
    let got = [
        crc_params(&spec, Convention::WithBn) as u64,
        crc_params(&spec, Convention::FormulaOnly) as u64,
        dense_conv_params(160, 640, 3),
    ];
    for ((name, want), got) in SINGLE_LAYER.iter().zip(got) {
        out.push(result(
            "counts",
            *name,
            (got as f64 - *want as f64).abs(),
            0.0,
            got == *want,
            format!("{got} vs {want}"),
        ));
    }
    let grouped = spec.connectivity(Connectivity::GroupedShared);
    let (a, b) = (
        crc_params(&spec, Convention::WithBn),
        crc_params(&grouped, Convention::WithBn),
    );
    out.push(result(
        "counts",
        "recurrent == grouped count",
        (a as f64 - b as f64).abs(),
        0.0,
        a == b,
        format!("{a} vs {b}"),
    ));
    for (label, cfg, published) in published_totals() {
        let (err, n, total) = best_total_error(cfg, published);
        out.push(result(
            "counts",
            format!("total {label}"),
            err,
            0.05,
            err <= 0.05,
            format!("{total} ({n} classes) vs {}K", published / 1000),
        ));
    }
    for (t, want, _) in TABLE3 {
        let got = acronym(&RecNetConfig::new(t));
        out.push(result(
            "counts",
            format!("acronym {want}"),
            if got == want { 0.0 } else { 1.0 },
            0.0,
            got == want,
            if got == want {
                String::new()
            } else {
                format!("got {got}")
            },
        ));
    }
    out
}
