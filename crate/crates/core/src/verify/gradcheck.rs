//! Central finite-difference gradient checking in `f64`.
//!
//! The first step is `1e-4`. A coordinate that misses the tolerance is retried
//! at smaller steps; if it still misses and the second difference shows a slope
//! change, the coordinate straddles a ReLU or max-pool kink and is counted
//! instead of failed. At a kink located inside `(x, x + h)` the central
//! difference is off by exactly half the second difference, which is the test
//! used below.

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub steps: Vec<f64>,
    /// Bound on `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub tolerance: f64,
    pub floor: f64,
    /// Largest tolerated share of coordinates that land on a kink.
    pub max_kink_fraction: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            steps: vec![1e-4, 1e-5, 1e-6],
            tolerance: 1e-5,
            floor: 1e-3,
            max_kink_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks: usize,
    /// Coordinate with the largest error among non-kink coordinates.
    pub worst: Option<usize>,
}

impl GradCheck {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.max_rel_err < cfg.tolerance && (self.kinks as f64) <= cfg.max_kink_fraction * self.checked.max(1) as f64
    }

    /// Folds another check into this one.
    pub fn merge(&mut self, other: &GradCheck) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.kinks += other.kinks;
    }
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn check_gradient(
    point: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    assert_eq!(point.len(), analytic.len(), "gradient length mismatch");
    let mut x = point.to_vec();
    let f0 = f(&x);
    let mut out = GradCheck::default();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = x[i];
        let mut best = f64::INFINITY;
        let mut last = (0.0, 0.0, 0.0);
        for &h in &cfg.steps {
            x[i] = orig + h;
            let fp = f(&x);
            x[i] = orig - h;
            let fm = f(&x);
            x[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let scale = a.abs().max(numeric.abs()).max(cfg.floor);
            let err = (a - numeric).abs() / scale;
            best = best.min(err);
            last = ((fp - 2.0 * f0 + fm) / h, scale, err);
            if err < cfg.tolerance {
                break;
            }
        }
        out.checked += 1;
        let (second, scale, _) = last;
        if best >= cfg.tolerance && second.abs() > 2.0 * cfg.tolerance * scale {
            out.kinks += 1;
            continue;
        }
        if out.worst.is_none() || best > out.max_rel_err {
            out.max_rel_err = best;
            out.worst = Some(i);
        }
    }
    out
}
