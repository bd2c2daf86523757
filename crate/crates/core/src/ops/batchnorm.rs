//! Per-channel batch normalization.
//!
//! Train mode standardizes by the biased batch variance and folds the batch
//! statistics into the running estimates (`running ← m·running + (1 − m)·batch`,
//! running variance unbiased). Eval mode uses the running estimates only.
//!
//! The `*_range` variants operate on a channel window `c0..c0 + x.c` of a wider
//! state; per-channel statistics make that identical to normalizing the full
//! concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Param, Real, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
}

impl<T: Real> BnState<T> {
    /// gamma = 1, beta = 0, running statistics 0 / 1, train mode.
    pub fn new(channels: usize) -> Self {
        BnState {
            gamma: Param::filled(channels, T::one()),
            beta: Param::filled(channels, T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of(DEFAULT_EPS),
            momentum: T::of(DEFAULT_MOMENTUM),
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_window(&self, c0: usize, c: usize) -> Result<()> {
        if c0 + c > self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels applied to channels {c0}..{}",
                self.channels(),
                c0 + c
            )));
        }
        Ok(())
    }
}

struct Stats<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

fn batch_stats<T: Real>(x: &Tensor4<T>) -> Result<(Vec<T>, Vec<T>)> {
    let d = x.dims();
    let m = d.n * d.plane();
    if m < 2 {
        return Err(Error::config(format!(
            "train-mode batch norm needs at least 2 values per channel, got {m} for {d}"
        )));
    }
    let mf = T::of(m as f64);
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for c in 0..d.c {
        let s: T = (0..d.n).map(|n| x.plane(n, c).iter().copied().sum::<T>()).sum();
        let mu = s / mf;
        let v: T = (0..d.n)
            .map(|n| x.plane(n, c).iter().map(|&v| (v - mu) * (v - mu)).sum::<T>())
            .sum();
        mean[c] = mu;
        var[c] = v / mf;
    }
    Ok((mean, var))
}

fn stats<T: Real>(x: &Tensor4<T>, s: &BnState<T>, c0: usize) -> Result<Stats<T>> {
    let c = x.dims().c;
    let (mean, var) = match s.mode {
        BnMode::Train => batch_stats(x)?,
        BnMode::Eval => (s.running_mean[c0..c0 + c].to_vec(), s.running_var[c0..c0 + c].to_vec()),
    };
    let inv_std = var.iter().map(|&v| T::one() / (v + s.eps).sqrt()).collect();
    Ok(Stats { mean, inv_std })
}

pub fn batchnorm_forward<T: Real>(x: &Tensor4<T>, s: &mut BnState<T>) -> Result<Tensor4<T>> {
    if s.channels() != x.dims().c {
        return Err(Error::shape(format!(
            "batch norm over {} channels applied to {}",
            s.channels(),
            x.dims()
        )));
    }
    batchnorm_forward_range(x, s, 0)
}

pub fn batchnorm_forward_range<T: Real>(x: &Tensor4<T>, s: &mut BnState<T>, c0: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    s.check_window(c0, d.c)?;
    let st = stats(x, s, c0)?;
    if s.mode == BnMode::Train {
        let m = (d.n * d.plane()) as f64;
        let (mean, var) = batch_stats(x)?;
        let k = s.momentum;
        for c in 0..d.c {
            let unbiased = var[c] * T::of(m / (m - 1.0));
            let rm = &mut s.running_mean[c0 + c];
            *rm = k * *rm + (T::one() - k) * mean[c];
            let rv = &mut s.running_var[c0 + c];
            *rv = k * *rv + (T::one() - k) * unbiased;
        }
    }
    let mut y = x.clone();
    for n in 0..d.n {
        for c in 0..d.c {
            let g = s.gamma.value[c0 + c] * st.inv_std[c];
            let b = s.beta.value[c0 + c] - st.mean[c] * g;
            for v in y.plane_mut(n, c) {
                *v = *v * g + b;
            }
        }
    }
    Ok(y)
}

pub struct BnGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
}

/// Gradients of the current-mode forward, without touching `s`.
pub fn batchnorm_backward<T: Real>(x: &Tensor4<T>, s: &BnState<T>, grad_out: &Tensor4<T>) -> Result<BnGrads<T>> {
    if s.channels() != x.dims().c {
        return Err(Error::shape("batch norm channel mismatch"));
    }
    let mut grad_x = Tensor4::zeros(x.dims());
    let mut grad_gamma = vec![T::zero(); s.channels()];
    let mut grad_beta = vec![T::zero(); s.channels()];
    batchnorm_backward_into(x, s, 0, grad_out, &mut grad_x, &mut grad_gamma, &mut grad_beta)?;
    Ok(BnGrads {
        grad_x,
        grad_gamma,
        grad_beta,
    })
}

/// Backward over window `c0..`, accumulating into the state's own parameter gradients.
pub fn batchnorm_backward_range<T: Real>(
    x: &Tensor4<T>,
    s: &mut BnState<T>,
    c0: usize,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let mut grad_x = Tensor4::zeros(x.dims());
    let mut gg = std::mem::take(&mut s.gamma.grad);
    let mut gb = std::mem::take(&mut s.beta.grad);
    let r = batchnorm_backward_into(x, s, c0, grad_out, &mut grad_x, &mut gg, &mut gb);
    s.gamma.grad = gg;
    s.beta.grad = gb;
    r.map(|_| grad_x)
}

fn batchnorm_backward_into<T: Real>(
    x: &Tensor4<T>,
    s: &BnState<T>,
    c0: usize,
    grad_out: &Tensor4<T>,
    grad_x: &mut Tensor4<T>,
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
) -> Result<()> {
    let d = x.dims();
    if grad_out.dims() != d || grad_x.dims() != d {
        return Err(Error::shape(format!(
            "batch norm grad_out {} for input {d}",
            grad_out.dims()
        )));
    }
    s.check_window(c0, d.c)?;
    let st = stats(x, s, c0)?;
    let m = T::of((d.n * d.plane()) as f64);
    for c in 0..d.c {
        let (mu, inv) = (st.mean[c], st.inv_std[c]);
        let gamma = s.gamma.value[c0 + c];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..d.n {
            for (&g, &v) in grad_out.plane(n, c).iter().zip(x.plane(n, c)) {
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * (v - mu) * inv;
            }
        }
        grad_beta[c0 + c] = grad_beta[c0 + c] + sum_g;
        grad_gamma[c0 + c] = grad_gamma[c0 + c] + sum_gx;
        for n in 0..d.n {
            let xs = x.plane(n, c);
            let gs = grad_out.plane(n, c);
            let out = grad_x.plane_mut(n, c);
            match s.mode {
                BnMode::Train => {
                    let k = gamma * inv / m;
                    for ((o, &g), &v) in out.iter_mut().zip(gs).zip(xs) {
                        let xhat = (v - mu) * inv;
                        *o = *o + k * (m * g - sum_g - xhat * sum_gx);
                    }
                }
                BnMode::Eval => {
                    for (o, &g) in out.iter_mut().zip(gs) {
                        *o = *o + g * gamma * inv;
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dims4;
    use crate::verify::gradcheck::{check_gradient, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_moments(y: &Tensor4<f64>, c: usize) -> (f64, f64) {
        let d = y.dims();
        let vals: Vec<f64> = (0..d.n).flat_map(|n| y.plane(n, c).to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Tensor4::<f64>::randn(Dims4::new(4, 3, 5, 5), 3.0, &mut rng);
        for v in x.data_mut() {
            *v += 7.0;
        }
        let mut s = BnState::new(3);
        let y = batchnorm_forward(&x, &mut s).unwrap();
        for c in 0..3 {
            let (m, v) = channel_moments(&y, c);
            assert!(m.abs() < 1e-6 * (1.0 + 7.0), "mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "var {v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor4::<f64>::filled(Dims4::new(2, 2, 3, 3), 4.0);
        let mut s = BnState::new(2);
        s.gamma.value = vec![2.0, 2.0];
        s.beta.value = vec![5.0, 5.0];
        let y = batchnorm_forward(&x, &mut s).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn eval_with_neutral_stats_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::<f64>::randn(Dims4::new(2, 2, 3, 3), 1.0, &mut rng);
        let mut s = BnState::new(2);
        s.mode = BnMode::Eval;
        let y = batchnorm_forward(&x, &mut s).unwrap();
        let k = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() < 1e-15);
        }
    }

    #[test]
    fn running_statistics_update() {
        let x = Tensor4::<f64>::new(Dims4::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut s = BnState::new(1);
        batchnorm_forward(&x, &mut s).unwrap();
        // batch mean 2.5, unbiased variance 5/3
        assert!((s.running_mean[0] - 0.1 * 2.5).abs() < 1e-15);
        assert!((s.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn single_value_per_channel_is_rejected() {
        let x = Tensor4::<f64>::zeros(Dims4::new(1, 2, 1, 1));
        let mut s = BnState::new(2);
        assert!(matches!(batchnorm_forward(&x, &mut s), Err(Error::Config(_))));
        s.mode = BnMode::Eval;
        assert!(batchnorm_forward(&x, &mut s).is_ok());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor4::<f64>::randn(Dims4::new(2, 2, 3, 3), 1.0, &mut rng);
        let s = BnState::new(2);
        let g = batchnorm_backward(&x, &s, &Tensor4::zeros(x.dims())).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_gamma.iter().chain(&g.grad_beta).all(|&v| v == 0.0));
    }

    #[test]
    fn beta_gradient_is_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor4::<f64>::randn(Dims4::new(2, 3, 2, 2), 1.0, &mut rng);
        let g = Tensor4::<f64>::randn(x.dims(), 1.0, &mut rng);
        let gr = batchnorm_backward(&x, &BnState::new(3), &g).unwrap();
        for c in 0..3 {
            let s: f64 = (0..2).map(|n| g.plane(n, c).iter().sum::<f64>()).sum();
            assert!((gr.grad_beta[c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_backward_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor4::<f64>::randn(Dims4::new(1, 1, 2, 2), 1.0, &mut rng);
        let g = Tensor4::<f64>::randn(x.dims(), 1.0, &mut rng);
        let mut s = BnState::new(1);
        s.mode = BnMode::Eval;
        s.gamma.value = vec![3.0];
        s.running_var = vec![4.0];
        let gr = batchnorm_backward(&x, &s, &g).unwrap();
        let k = 3.0 / (4.0 + DEFAULT_EPS).sqrt();
        for (a, b) in gr.grad_x.data().iter().zip(g.data()) {
            assert!((a - b * k).abs() < 1e-14);
        }
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor4::<f64>::randn(Dims4::new(4, 1, 2, 2), 1.0, &mut rng);
        let r = Tensor4::<f64>::randn(x.dims(), 1.0, &mut rng);
        let mut s = BnState::new(1);
        s.gamma.value = vec![1.7];
        s.beta.value = vec![-0.3];
        let gr = batchnorm_backward(&x, &s, &r).unwrap();
        let cfg = GradCheckConfig::default();
        let res = check_gradient(x.data(), gr.grad_x.data(), &cfg, |v| {
            let xv = Tensor4::new(x.dims(), v.to_vec()).unwrap();
            batchnorm_forward(&xv, &mut s.clone()).unwrap().dot(&r).unwrap()
        });
        assert!(res.passed(&cfg), "{res:?}");
        let res = check_gradient(&s.gamma.value, &gr.grad_gamma, &cfg, |v| {
            let mut sv = s.clone();
            sv.gamma.value = v.to_vec();
            batchnorm_forward(&x, &mut sv).unwrap().dot(&r).unwrap()
        });
        assert!(res.passed(&cfg), "{res:?}");
    }

    #[test]
    fn windowed_norm_matches_full_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor4::<f64>::randn(Dims4::new(2, 4, 3, 3), 1.0, &mut rng);
        let mut full = BnState::new(4);
        full.gamma.value = vec![0.5, 1.5, 2.0, -1.0];
        let mut windowed = full.clone();
        let y = batchnorm_forward(&x, &mut full).unwrap();
        let tail = batchnorm_forward_range(&x.narrow_channels(2, 2).unwrap(), &mut windowed, 2).unwrap();
        assert!(tail.max_abs_diff(&y.narrow_channels(2, 2).unwrap()).unwrap() < 1e-14);
        assert_eq!(full.running_mean[2..], windowed.running_mean[2..]);
    }
}
