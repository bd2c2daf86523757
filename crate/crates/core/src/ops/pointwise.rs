//! ReLU, pooling, the classifier layer and the loss.

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Real, Tensor4};

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::zero()))
}

/// Masks `grad_out` where `x <= 0`.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.dims() != grad_out.dims() {
        return Err(Error::shape(format!(
            "relu grad {} for input {}",
            grad_out.dims(),
            x.dims()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::new(x.dims(), data)
}

/// Flat offsets into the input of every pooled maximum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input: Dims4,
    pub argmax: Vec<usize>,
}

/// Non-overlapping 2×2 max pooling. Ties go to the first element in row-major order.
pub fn maxpool2<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, PoolIndices)> {
    let d = x.dims();
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(Error::shape(format!(
            "2x2 max pooling needs even spatial dims, got {d}"
        )));
    }
    let od = Dims4::new(d.n, d.c, d.h / 2, d.w / 2);
    let mut out = Tensor4::zeros(od);
    let mut argmax = Vec::with_capacity(od.len());
    for n in 0..d.n {
        for c in 0..d.c {
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut best = x.offset(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    *out.at_mut(n, c, oy, ox) = x.data()[best];
                    argmax.push(best);
                }
            }
        }
    }
    Ok((out, PoolIndices { input: d, argmax }))
}

pub fn maxpool2_backward<T: Real>(idx: &PoolIndices, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if grad_out.dims().len() != idx.argmax.len() {
        return Err(Error::shape("max-pool gradient does not match pooled output"));
    }
    let mut gx = Tensor4::zeros(idx.input);
    for (&i, &g) in idx.argmax.iter().zip(grad_out.data()) {
        let v = &mut gx.data_mut()[i];
        *v = *v + g;
    }
    Ok(gx)
}

/// Mean over the full spatial extent: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn avgpool_global<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let d = x.dims();
    let k = T::of(1.0 / d.plane() as f64);
    let data = (0..d.n)
        .flat_map(|n| (0..d.c).map(move |c| (n, c)))
        .map(|(n, c)| x.plane(n, c).iter().copied().sum::<T>() * k)
        .collect();
    Tensor4::new(Dims4::new(d.n, d.c, 1, 1), data).expect("positive dims")
}

pub fn avgpool_global_backward<T: Real>(input: Dims4, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if grad_out.dims() != Dims4::new(input.n, input.c, 1, 1) {
        return Err(Error::shape("average-pool gradient dims"));
    }
    let k = T::of(1.0 / input.plane() as f64);
    let mut gx = Tensor4::zeros(input);
    for n in 0..input.n {
        for c in 0..input.c {
            let g = grad_out.data()[n * input.c + c] * k;
            gx.plane_mut(n, c).fill(g);
        }
    }
    Ok(gx)
}

/// `y = x·Wᵀ + b` with `x` flattened to `(N, F)` and `W` row-major `(classes, F)`.
/// Returns `(N, classes, 1, 1)`.
pub fn linear_forward<T: Real>(x: &Tensor4<T>, w: &[T], b: &[T]) -> Result<Tensor4<T>> {
    let d = x.dims();
    let f = d.c * d.plane();
    let k = b.len();
    if k == 0 || w.len() != k * f {
        return Err(Error::shape(format!(
            "linear layer with {} weights and {k} outputs cannot take {f} features",
            w.len()
        )));
    }
    let mut out = Vec::with_capacity(d.n * k);
    for n in 0..d.n {
        let xs = x.sample(n);
        for (row, &bias) in w.chunks(f).zip(b) {
            out.push(bias + row.iter().zip(xs).map(|(&a, &v)| a * v).sum::<T>());
        }
    }
    Tensor4::new(Dims4::new(d.n, k, 1, 1), out)
}

/// Returns the input gradient and accumulates into `grad_w` / `grad_b`.
pub fn linear_backward<T: Real>(
    x: &Tensor4<T>,
    w: &[T],
    grad_out: &Tensor4<T>,
    grad_w: &mut [T],
    grad_b: &mut [T],
) -> Result<Tensor4<T>> {
    let d = x.dims();
    let f = d.c * d.plane();
    let k = grad_out.dims().c;
    if grad_out.dims() != Dims4::new(d.n, k, 1, 1) || w.len() != k * f || grad_w.len() != w.len() || grad_b.len() != k {
        return Err(Error::shape("linear backward dims"));
    }
    let mut gx = Tensor4::zeros(d);
    for n in 0..d.n {
        let xs = x.sample(n).to_vec();
        let gs = &grad_out.data()[n * k..(n + 1) * k];
        let gxs = &mut gx.data_mut()[n * f..(n + 1) * f];
        for (j, &g) in gs.iter().enumerate() {
            grad_b[j] = grad_b[j] + g;
            let row = &w[j * f..(j + 1) * f];
            let grow = &mut grad_w[j * f..(j + 1) * f];
            for i in 0..f {
                grow[i] = grow[i] + g * xs[i];
                gxs[i] = gxs[i] + g * row[i];
            }
        }
    }
    Ok(gx)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(f64, Tensor4<T>)> {
    let d = logits.dims();
    let k = d.c * d.plane();
    if labels.len() != d.n {
        return Err(Error::shape(format!("{} labels for batch of {}", labels.len(), d.n)));
    }
    let mut grad = Tensor4::zeros(d);
    let mut total = 0.0;
    let inv_n = 1.0 / d.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::shape(format!("label {label} out of range for {k} classes")));
        }
        let row: Vec<f64> = logits.sample(n).iter().map(|v| v.f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[label];
        let g = &mut grad.data_mut()[n * k..(n + 1) * k];
        for (j, e) in exps.iter().enumerate() {
            let p = e / z - if j == label { 1.0 } else { 0.0 };
            g[j] = T::of(p * inv_n);
        }
    }
    Ok((total * inv_n, grad))
}

/// Index of the largest logit per sample; ties go to the lowest class index.
pub fn argmax_rows<T: Real>(logits: &Tensor4<T>) -> Vec<usize> {
    (0..logits.dims().n)
        .map(|n| {
            let row = logits.sample(n);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::gradcheck::{check_gradient, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(d: Dims4, v: &[f64]) -> Tensor4<f64> {
        Tensor4::new(d, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_cases() {
        let x = t(Dims4::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = t(x.dims(), &[5.0, 6.0, 7.0]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 7.0]);

        let neg = x.map(|v| -v.abs() - 1.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&neg, &g).unwrap().data().iter().all(|&v| v == 0.0));
        let pos = x.map(|v| v.abs());
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn maxpool_routes_to_maximum() {
        let x = t(Dims4::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let (y, idx) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let gx = maxpool2_backward(&idx, &t(y.dims(), &[1.0])).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let x = Tensor4::<f64>::filled(Dims4::new(1, 1, 4, 4), 3.0);
        let (y, idx) = maxpool2(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(idx.argmax, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_shapes() {
        let x = Tensor4::<f32>::zeros(Dims4::new(1, 1, 32, 32));
        assert_eq!(maxpool2(&x).unwrap().0.dims(), Dims4::new(1, 1, 16, 16));
        assert!(maxpool2(&Tensor4::<f32>::zeros(Dims4::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn avgpool_cases() {
        let x = t(Dims4::new(1, 1, 2, 2), &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(avgpool_global(&x).data(), &[3.0]);
        assert_eq!(
            avgpool_global(&Tensor4::<f64>::filled(Dims4::new(1, 2, 3, 3), 1.5)).data(),
            &[1.5, 1.5]
        );
        let big = Tensor4::<f32>::zeros(Dims4::new(1, 320, 8, 8));
        assert_eq!(avgpool_global(&big).dims(), Dims4::new(1, 320, 1, 1));
        let g = avgpool_global_backward(x.dims(), &t(Dims4::new(1, 1, 1, 1), &[4.0])).unwrap();
        assert_eq!(g.data(), &[1.0; 4]);
    }

    #[test]
    fn linear_cases() {
        let x = t(Dims4::new(2, 3, 1, 1), &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let b = [0.1, 0.2, 0.3];
        let y = linear_forward(&x, &eye, &b).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert!((v - (x.data()[i] + b[i % 3])).abs() < 1e-15);
        }
        let y = linear_forward(&x, &[0.0; 6], &[7.0, 8.0]).unwrap();
        assert_eq!(y.data(), &[7.0, 8.0, 7.0, 8.0]);

        let feats = Tensor4::<f32>::zeros(Dims4::new(4, 320, 1, 1));
        let y = linear_forward(&feats, &vec![0.0; 100 * 320], &[0.0; 100]).unwrap();
        assert_eq!(y.dims(), Dims4::new(4, 100, 1, 1));
        assert!(linear_forward(&feats, &[0.0; 10], &[0.0; 100]).is_err());
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor4::<f64>::randn(Dims4::new(2, 3, 2, 1), 1.0, &mut rng);
        let w = Tensor4::<f64>::randn(Dims4::new(1, 4, 1, 6), 1.0, &mut rng).into_data();
        let b = vec![0.5, -0.5, 0.0, 1.0];
        let r = Tensor4::<f64>::randn(Dims4::new(2, 4, 1, 1), 1.0, &mut rng);
        let mut gw = vec![0.0; 24];
        let mut gb = vec![0.0; 4];
        let gx = linear_backward(&x, &w, &r, &mut gw, &mut gb).unwrap();
        let cfg = GradCheckConfig::default();
        let res = check_gradient(x.data(), gx.data(), &cfg, |v| {
            linear_forward(&Tensor4::new(x.dims(), v.to_vec()).unwrap(), &w, &b)
                .unwrap()
                .dot(&r)
                .unwrap()
        });
        assert!(res.passed(&cfg));
        let res = check_gradient(&w, &gw, &cfg, |v| linear_forward(&x, v, &b).unwrap().dot(&r).unwrap());
        assert!(res.passed(&cfg));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let logits = Tensor4::<f64>::randn(Dims4::new(3, 5, 1, 1), 2.0, &mut rng);
        let labels = [4, 0, 2];
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let cfg = GradCheckConfig {
            tolerance: 1e-6,
            ..GradCheckConfig::default()
        };
        let res = check_gradient(logits.data(), g.data(), &cfg, |v| {
            softmax_cross_entropy(&Tensor4::new(logits.dims(), v.to_vec()).unwrap(), &labels)
                .unwrap()
                .0
        });
        assert!(res.passed(&cfg), "{res:?}");
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let (loss, _) = softmax_cross_entropy(&Tensor4::<f32>::zeros(Dims4::new(4, 10, 1, 1)), &[0, 3, 9, 1]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-6);
        assert!(softmax_cross_entropy(&Tensor4::<f32>::zeros(Dims4::new(1, 10, 1, 1)), &[10]).is_err());
    }

    #[test]
    fn argmax_ties_pick_first() {
        let l = t(Dims4::new(2, 3, 1, 1), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(argmax_rows(&l), vec![0, 1]);
    }
}
