//! Minimal Gaussian-process regression for the Bayesian strategy: squared
//! exponential kernel, hand-rolled Cholesky, standardized targets.

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(a: &[f64], b: &[f64], lengthscale: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * lengthscale * lengthscale)).exp()
}

/// In-place lower-triangular Cholesky. Fails on a non-positive pivot.
fn cholesky(a: &mut [Vec<f64>]) -> bool {
    let n = a.len();
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= a[i][k] * a[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return false;
                }
                a[i][j] = sum.sqrt();
            } else {
                a[i][j] = sum / a[j][j];
            }
        }
        for j in i + 1..n {
            a[i][j] = 0.0;
        }
    }
    true
}

/// Solves L Lᵀ x = b given the lower factor.
fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

pub struct Gp {
    xs: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    lengthscale: f64,
    noise: f64,
}

impl Gp {
    /// Fits on inputs already normalized to [0,1] per coordinate. The noise
    /// floor escalates (x10 up to 1e-2) if the Gram matrix loses positive
    /// definiteness, which happens with duplicated inputs.
    pub fn fit(xs: Vec<Vec<f64>>, ys: &[f64], lengthscale: f64, noise: f64) -> Gp {
        assert_eq!(xs.len(), ys.len());
        assert!(!xs.is_empty());
        let n = xs.len();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean) * (y - y_mean)).sum::<f64>() / n as f64;
        let y_std = var.sqrt().max(1e-12);
        let ys_std: Vec<f64> = ys.iter().map(|y| (y - y_mean) / y_std).collect();

        let mut noise = noise;
        loop {
            let mut gram: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            kernel(&xs[i], &xs[j], lengthscale)
                                + if i == j { noise } else { 0.0 }
                        })
                        .collect()
                })
                .collect();
            if cholesky(&mut gram) {
                let alpha = chol_solve(&gram, &ys_std);
                return Gp { xs, chol: gram, alpha, y_mean, y_std, lengthscale, noise };
            }
            noise *= 10.0;
            assert!(noise <= 1e-2, "Gram matrix not positive definite even with heavy jitter");
        }
    }

    /// Posterior mean and standard deviation at a normalized point.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks: Vec<f64> = self.xs.iter().map(|xi| kernel(xi, x, self.lengthscale)).collect();
        let mean_std = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum::<f64>();
        let v = chol_solve(&self.chol, &ks);
        let reduction = ks.iter().zip(&v).map(|(k, vi)| k * vi).sum::<f64>();
        let var = (1.0 + self.noise - reduction).max(1e-12);
        (self.y_mean + self.y_std * mean_std, self.y_std * var.sqrt())
    }
}

/// Abramowitz-Stegun 7.1.26 erf approximation; enough for EI ranking.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement of a maximization objective over `best`.
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    if std <= 0.0 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / std;
    (mean - best) * normal_cdf(z) + std * normal_pdf(z)
}
