//! Latent-space regularizers: the Gaussian KL term and reparameterized
//! sampling of the VAE, and the sliced-Wasserstein distance to a uniform
//! ball prior used by the SWAE.

use std::hash::{Hash, Hasher};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;

/// Lower clamp applied to log-variances before exponentiation.
pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// KL(N(mu, diag exp(logvar)) || N(0, I)).
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Gradients of [`kl_divergence`] with respect to `mu` and `logvar`.
pub fn kl_divergence_grad(mu: &[f64], logvar: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (mu.to_vec(), logvar.iter().map(|&lv| 0.5 * (lv.exp() - 1.0)).collect())
}

/// Standard-normal draws of length `dim`.
pub fn standard_normal(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)` and the log-variance
/// clamped to `[LOGVAR_MIN, LOGVAR_MAX]`. Returns the sample and `eps`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], seed: u64) -> (Vec<f64>, Vec<f64>) {
    let eps = standard_normal(mu.len(), seed);
    let z = mu
        .iter()
        .zip(logvar)
        .zip(&eps)
        .map(|((&m, &lv), &e)| m + (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp() * e)
        .collect();
    (z, eps)
}

/// `n` points uniform in the solid `dim`-ball of the given radius.
pub fn sample_prior_ball(n: usize, dim: usize, radius: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 || dim == 0 || !(radius > 0.0) {
        return Err(Error::Contract(format!(
            "prior ball needs n >= 1, dim >= 1, radius > 0 (got {n}, {dim}, {radius})"
        )));
    }
    let mut rng = seed::rng(seed);
    Ok((0..n)
        .map(|_| {
            let dir = random_direction(dim, &mut rng);
            let u: f64 = rng.gen();
            let r = radius * u.powf(1.0 / dim as f64);
            dir.into_iter().map(|c| c * r).collect()
        })
        .collect())
}

fn random_direction(dim: usize, rng: &mut seed::Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Value and gradients of the Monte-Carlo squared sliced-Wasserstein distance.
#[derive(Debug, Clone)]
pub struct SlicedWasserstein {
    pub value: f64,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
    /// Hash of the sorted matchings; differentiability holds while it is fixed.
    pub signature: u64,
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Contract(format!(
            "sliced Wasserstein needs equal non-empty sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::Contract("all points must share a positive dimension".into()));
    }
    Ok(d)
}

/// `(1/L) sum_l (1/n) sum_i (a_(i) - b_(i))^2` over `L` random unit
/// directions, where `a_(i)`, `b_(i)` are the sorted projections.
pub fn sliced_wasserstein_sq(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, seed: u64) -> Result<f64> {
    Ok(sliced_wasserstein_sq_grad(a, b, n_projections, seed)?.value)
}

pub fn sliced_wasserstein_sq_grad(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_projections: usize,
    seed: u64,
) -> Result<SlicedWasserstein> {
    let d = check_sets(a, b)?;
    if n_projections == 0 {
        return Err(Error::Contract("need at least one projection".into()));
    }
    let n = a.len();
    let mut rng = seed::rng(seed);
    let mut grad_a = vec![vec![0.0; d]; n];
    let mut grad_b = vec![vec![0.0; d]; n];
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    let scale = 2.0 / (n_projections * n) as f64;
    let mut total = 0.0;
    let project = |pts: &[Vec<f64>], theta: &[f64]| -> Vec<f64> {
        pts.iter()
            .map(|p| p.iter().zip(theta).map(|(x, t)| x * t).sum())
            .collect()
    };
    let argsort = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
        idx
    };
    for _ in 0..n_projections {
        let theta = random_direction(d, &mut rng);
        let pa = project(a, &theta);
        let pb = project(b, &theta);
        let (ia, ib) = (argsort(&pa), argsort(&pb));
        ia.hash(&mut hasher);
        ib.hash(&mut hasher);
        let mut sum = 0.0;
        for (&i, &j) in ia.iter().zip(&ib) {
            let diff = pa[i] - pb[j];
            sum += diff * diff;
            for k in 0..d {
                grad_a[i][k] += scale * diff * theta[k];
                grad_b[j][k] -= scale * diff * theta[k];
            }
        }
        total += sum / n as f64;
    }
    Ok(SlicedWasserstein {
        value: total / n_projections as f64,
        grad_a,
        grad_b,
        signature: hasher.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Uniform};

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        assert_eq!(kl_divergence(&[1.0, 0.0, 0.0], &[0.0; 3]), 0.5);
        let want = 0.5 * (4.0 - 4f64.ln() - 1.0);
        assert!((kl_divergence(&[0.0, 0.0], &[4f64.ln(), 0.0]) - want).abs() < 1e-12);
        assert!((want - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mu = [0.3, -1.2, 0.7];
        let lv = [0.1, -0.5, 1.3];
        let (gm, gl) = kl_divergence_grad(&mu, &lv);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = mu;
            p[i] += h;
            let mut m = mu;
            m[i] -= h;
            let fd = (kl_divergence(&p, &lv) - kl_divergence(&m, &lv)) / (2.0 * h);
            assert!((fd - gm[i]).abs() < 1e-7);
            let mut p = lv;
            p[i] += h;
            let mut m = lv;
            m[i] -= h;
            let fd = (kl_divergence(&mu, &p) - kl_divergence(&mu, &m)) / (2.0 * h);
            assert!((fd - gl[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn clamped_logvar_collapses_noise() {
        let mu = vec![0.5, -2.0, 3.0];
        let (z, _) = reparameterize(&mu, &[-1e6; 3], 4);
        for (a, b) in z.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(reparameterize(&mu, &[0.0; 3], 4), reparameterize(&mu, &[0.0; 3], 4));
    }

    #[test]
    fn unit_posterior_samples_have_unit_std() {
        let mut sums = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        let n = 10_000;
        for s in 0..n {
            let (z, _) = reparameterize(&[0.0; 4], &[0.0; 4], s);
            for k in 0..4 {
                sums[k] += z[k];
                sq[k] += z[k] * z[k];
            }
        }
        for k in 0..4 {
            let mean = sums[k] / n as f64;
            let std = (sq[k] / n as f64 - mean * mean).sqrt();
            assert!((std - 1.0).abs() < 0.05, "dim {k}: {std}");
        }
    }

    #[test]
    fn ball_samples_inside_with_expected_mean_norm() {
        let pts = sample_prior_ball(10_000, 128, 1.0, 3).unwrap();
        let norms: Vec<f64> = pts
            .iter()
            .map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        assert!(norms.iter().all(|&r| r <= 1.0));
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!((mean - 128.0 / 129.0).abs() < 0.002, "{mean}");
    }

    #[test]
    fn one_dimensional_ball_is_uniform_interval() {
        let mut xs: Vec<f64> = sample_prior_ball(10_000, 1, 2.0, 8)
            .unwrap()
            .into_iter()
            .map(|p| p[0])
            .collect();
        xs.sort_by(f64::total_cmp);
        let u = Uniform::new(-2.0, 2.0).unwrap();
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = u.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov asymptotic critical value at alpha = 0.01
        assert!(d * n.sqrt() < 1.628, "KS statistic {d}");
    }

    #[test]
    fn sw_of_identical_sets_is_zero() {
        let a = sample_prior_ball(20, 5, 1.0, 1).unwrap();
        assert_eq!(sliced_wasserstein_sq(&a, &a, 30, 2).unwrap(), 0.0);
    }

    #[test]
    fn sw_one_dimensional_singletons() {
        for l in [1, 7, 50] {
            let v = sliced_wasserstein_sq(&[vec![0.0]], &[vec![3.0]], l, l as u64).unwrap();
            assert!((v - 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sw_size_mismatch_rejected() {
        let a = vec![vec![0.0, 1.0]; 3];
        let b = vec![vec![0.0, 1.0]; 2];
        assert!(matches!(sliced_wasserstein_sq(&a, &b, 5, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn sw_gradient_matches_finite_differences() {
        let a = sample_prior_ball(6, 3, 1.0, 5).unwrap();
        let b = sample_prior_ball(6, 3, 1.0, 6).unwrap();
        let out = sliced_wasserstein_sq_grad(&a, &b, 10, 7).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            for k in 0..3 {
                let mut p = a.clone();
                p[i][k] += h;
                let mut m = a.clone();
                m[i][k] -= h;
                let fd = (sliced_wasserstein_sq(&p, &b, 10, 7).unwrap()
                    - sliced_wasserstein_sq(&m, &b, 10, 7).unwrap())
                    / (2.0 * h);
                assert!((fd - out.grad_a[i][k]).abs() < 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn sw_symmetric_and_nonnegative(seed in any::<u64>(), n in 1usize..12, d in 1usize..6) {
            let a = sample_prior_ball(n, d, 1.0, seed).unwrap();
            let b = sample_prior_ball(n, d, 2.0, seed ^ 1).unwrap();
            let ab = sliced_wasserstein_sq(&a, &b, 8, seed).unwrap();
            let ba = sliced_wasserstein_sq(&b, &a, 8, seed).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        }

        #[test]
        fn kl_nonnegative_zero_only_at_prior(
            mu in proptest::collection::vec(-3.0f64..3.0, 1..8),
            lv_seed in any::<u64>(),
        ) {
            let mut rng = seed::rng(lv_seed);
            let lv: Vec<f64> = mu.iter().map(|_| rng.gen_range(-4.0..4.0)).collect();
            let kl = kl_divergence(&mu, &lv);
            prop_assert!(kl >= 0.0);
            if mu.iter().any(|&m| m != 0.0) || lv.iter().any(|&l| l != 0.0) {
                prop_assert!(kl > 0.0);
            }
            prop_assert_eq!(kl_divergence(&vec![0.0; mu.len()], &vec![0.0; mu.len()]), 0.0);
        }
    }
}
