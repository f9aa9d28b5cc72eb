//! Closed-form algebra over mean-field (diagonal) Gaussians on flat vectors.
//!
//! These are the messages exchanged between clients and the server: priors,
//! posteriors and extracted likelihoods all share one representation. Values
//! are stored as `(mean, stddev)`; precision is derived when needed. All
//! densities are unnormalized, so products and quotients drop their constant
//! factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest standard deviation any stored Gaussian may carry.
pub const SIGMA_MIN: f64 = 1e-6;

/// Default precision assigned to a quotient coordinate that comes out improper.
pub const DEFAULT_PRECISION_FLOOR: f64 = 1e-8;

/// A fully factorized Gaussian over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Validation("gaussian must have at least one coordinate".into()));
        }
        if mean.len() != stddev.len() {
            return Err(Error::dims("gaussian stddev", mean.len(), stddev.len()));
        }
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::Validation(format!("non-finite mean at coordinate {i}")));
        }
        if let Some(i) = stddev.iter().position(|s| !s.is_finite() || *s < SIGMA_MIN) {
            return Err(Error::Validation(format!(
                "stddev {} at coordinate {i} is not finite or below {SIGMA_MIN}",
                stddev[i]
            )));
        }
        Ok(Self { mean, stddev })
    }

    /// Same stddev on every coordinate.
    pub fn isotropic(mean: Vec<f64>, stddev: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![stddev; n])
    }

    /// Builds from per-coordinate precisions, flooring the stddev at [`SIGMA_MIN`].
    pub fn from_precision(mean: Vec<f64>, precision: &[f64]) -> Result<Self> {
        let stddev = precision.iter().map(|&p| stddev_from_precision(p)).collect();
        Self::new(mean, stddev)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    pub fn precision(&self) -> Vec<f64> {
        self.stddev.iter().map(|s| 1.0 / (s * s)).collect()
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.mean, self.stddev)
    }

    /// Coordinates `range` as a standalone Gaussian.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.is_empty() {
            return Err(Error::dims("gaussian slice", self.len(), range.end));
        }
        Ok(Self {
            mean: self.mean[range.clone()].to_vec(),
            stddev: self.stddev[range].to_vec(),
        })
    }

    /// Appends `other`'s coordinates after this one's.
    pub fn concat(&self, other: &DiagonalGaussian) -> Self {
        let mut mean = self.mean.clone();
        mean.extend_from_slice(&other.mean);
        let mut stddev = self.stddev.clone();
        stddev.extend_from_slice(&other.stddev);
        Self { mean, stddev }
    }
}

fn stddev_from_precision(p: f64) -> f64 {
    (1.0 / p.sqrt()).max(SIGMA_MIN)
}

fn check_pair(a: &DiagonalGaussian, b: &DiagonalGaussian, context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims(context, a.len(), b.len()));
    }
    Ok(())
}

/// Pointwise product of two Gaussian densities: precisions add and means are
/// precision-weighted.
pub fn gaussian_product(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<DiagonalGaussian> {
    check_pair(a, b, "gaussian product")?;
    let n = a.len();
    let mut mean = Vec::with_capacity(n);
    let mut stddev = Vec::with_capacity(n);
    for i in 0..n {
        let pa = 1.0 / (a.stddev[i] * a.stddev[i]);
        let pb = 1.0 / (b.stddev[i] * b.stddev[i]);
        let p = pa + pb;
        mean.push((pa * a.mean[i] + pb * b.mean[i]) / p);
        stddev.push(stddev_from_precision(p));
    }
    DiagonalGaussian::new(mean, stddev)
}

/// Quotient `num / den` of two Gaussian densities.
///
/// Coordinates whose precision difference does not exceed `precision_floor`
/// are improper; they are replaced by a near-flat factor with precision
/// `precision_floor` centred on the numerator mean.
pub fn gaussian_quotient(
    num: &DiagonalGaussian,
    den: &DiagonalGaussian,
    precision_floor: f64,
) -> Result<DiagonalGaussian> {
    check_pair(num, den, "gaussian quotient")?;
    if !(precision_floor > 0.0 && precision_floor.is_finite()) {
        return Err(Error::Validation(format!(
            "precision floor must be positive and finite, got {precision_floor}"
        )));
    }
    let n = num.len();
    let mut mean = Vec::with_capacity(n);
    let mut stddev = Vec::with_capacity(n);
    for i in 0..n {
        let pn = 1.0 / (num.stddev[i] * num.stddev[i]);
        let pd = 1.0 / (den.stddev[i] * den.stddev[i]);
        let p = pn - pd;
        if p > precision_floor {
            mean.push((pn * num.mean[i] - pd * den.mean[i]) / p);
            stddev.push(stddev_from_precision(p));
        } else {
            mean.push(num.mean[i]);
            stddev.push(stddev_from_precision(precision_floor));
        }
    }
    DiagonalGaussian::new(mean, stddev)
}

/// Number of coordinates of `num / den` that [`gaussian_quotient`] would clamp.
pub fn improper_coordinates(
    num: &DiagonalGaussian,
    den: &DiagonalGaussian,
    precision_floor: f64,
) -> Result<usize> {
    check_pair(num, den, "gaussian quotient")?;
    Ok(num
        .stddev
        .iter()
        .zip(&den.stddev)
        .filter(|(sn, sd)| 1.0 / (*sn * *sn) - 1.0 / (*sd * *sd) <= precision_floor)
        .count())
}

/// Closed-form `KL(q || p)` summed over coordinates.
pub fn kl_divergence(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    check_pair(q, p, "kl divergence")?;
    let mut total = 0.0;
    for i in 0..q.len() {
        let (sq, sp) = (q.stddev[i], p.stddev[i]);
        let d = q.mean[i] - p.mean[i];
        total += (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    // Rounding can leave a tiny negative residue for near-identical inputs.
    Ok(total.max(0.0))
}

/// Reparameterized draw `mean + stddev * noise` for caller-supplied
/// standard-normal noise.
pub fn sample(g: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.len() {
        return Err(Error::dims("gaussian sample noise", g.len(), noise.len()));
    }
    Ok(g.mean
        .iter()
        .zip(&g.stddev)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn g1(m: f64, s: f64) -> DiagonalGaussian {
        DiagonalGaussian::new(vec![m], vec![s]).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn density(m: f64, s: f64, x: f64) -> f64 {
        (-(x - m) * (x - m) / (2.0 * s * s)).exp() / s
    }

    /// Mean and variance of an unnormalized 1-D density by Simpson's rule.
    fn grid_moments(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
        let h = (hi - lo) / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for k in 0..=n {
            let x = lo + k as f64 * h;
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let v = w * f(x);
            z += v;
            m1 += v * x;
            m2 += v * x * x;
        }
        let mean = m1 / z;
        (mean, m2 / z - mean * mean)
    }

    #[test]
    fn product_of_standard_normals() {
        let r = gaussian_product(&g1(0.0, 1.0), &g1(0.0, 1.0)).unwrap();
        assert_eq!(r.mean()[0], 0.0);
        assert!(rel(r.stddev()[0], 0.5f64.sqrt()) < 1e-15);
    }

    #[test]
    fn product_with_flat_factor_is_identity() {
        let r = gaussian_product(&g1(2.5, 0.7), &g1(-4.0, 1e6)).unwrap();
        assert!(rel(r.mean()[0], 2.5) < 1e-6);
        assert!(rel(r.stddev()[0], 0.7) < 1e-6);
    }

    #[test]
    fn product_matches_quadrature() {
        let r = gaussian_product(&g1(1.0, 2f64.sqrt()), &g1(3.0, 1.0)).unwrap();
        let (m, v) = grid_moments(
            |x| density(1.0, 2f64.sqrt(), x) * density(3.0, 1.0, x),
            -20.0,
            20.0,
            20_000,
        );
        assert!(rel(m, 7.0 / 3.0) < 1e-9);
        assert!(rel(v, 2.0 / 3.0) < 1e-9);
        assert!(rel(r.mean()[0], m) < 1e-9);
        assert!(rel(r.stddev()[0], v.sqrt()) < 1e-9);
    }

    #[test]
    fn quotient_examples() {
        let r = gaussian_quotient(&g1(0.0, 0.5f64.sqrt()), &g1(0.0, 1.0), 1e-8).unwrap();
        assert_eq!(r.mean()[0], 0.0);
        assert!(rel(r.stddev()[0], 1.0) < 1e-12);

        // Wider numerator than denominator: improper, clamped.
        let r = gaussian_quotient(&g1(0.0, 2f64.sqrt()), &g1(0.0, 1.0), 1e-8).unwrap();
        assert_eq!(r.mean()[0], 0.0);
        assert!(rel(r.precision()[0], 1e-8) < 1e-12);

        let r = gaussian_quotient(&g1(3.0, 2.0), &g1(-1.0, 1.0), 1e-8).unwrap();
        assert_eq!(r.mean()[0], 3.0);
    }

    #[test]
    fn quotient_rejects_bad_floor() {
        assert!(gaussian_quotient(&g1(0.0, 1.0), &g1(0.0, 1.0), 0.0).is_err());
        assert!(gaussian_quotient(&g1(0.0, 1.0), &g1(0.0, 1.0), f64::NAN).is_err());
    }

    #[test]
    fn equal_inputs_are_improper() {
        let a = DiagonalGaussian::new(vec![1.0, 2.0], vec![0.1, 0.2]).unwrap();
        assert_eq!(improper_coordinates(&a, &a, 1e-8).unwrap(), 2);
    }

    #[test]
    fn dimension_and_validation_errors() {
        let a = DiagonalGaussian::new(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let b = g1(0.0, 1.0);
        assert!(matches!(
            gaussian_product(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(gaussian_quotient(&a, &b, 1e-8).is_err());
        assert!(kl_divergence(&a, &b).is_err());
        assert!(sample(&a, &[0.0]).is_err());
        assert!(DiagonalGaussian::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![1e-7]).is_err());
        assert!(DiagonalGaussian::new(vec![], vec![]).is_err());
    }

    #[test]
    fn kl_examples_match_quadrature() {
        fn quad_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
            let (lo, hi, n) = (-30.0, 30.0, 60_000);
            let h = (hi - lo) / n as f64;
            let norm = (2.0 * std::f64::consts::PI).sqrt();
            let mut acc = 0.0;
            for k in 0..=n {
                let x = lo + k as f64 * h;
                let w = if k == 0 || k == n {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let q = density(mq, sq, x) / norm;
                let p = density(mp, sp, x) / norm;
                if q > 0.0 {
                    acc += w * q * (q / p).ln();
                }
            }
            acc * h / 3.0
        }
        let oracle1 = quad_kl(1.0, 1.0, 0.0, 1.0);
        let oracle2 = quad_kl(0.0, 2.0, 0.0, 1.0);
        assert!((oracle1 - 0.5).abs() < 1e-9);
        assert!((oracle2 - (1.5 + 0.5f64.ln())).abs() < 1e-9);

        let k1 = kl_divergence(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap();
        let k2 = kl_divergence(&g1(0.0, 2.0), &g1(0.0, 1.0)).unwrap();
        assert!((k1 - oracle1).abs() < 1e-9);
        assert!((k2 - oracle2).abs() < 1e-9);
        assert!((k2 - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let g = DiagonalGaussian::new(vec![0.3, -2.0, 5.0], vec![0.1, 1.0, 3.0]).unwrap();
        assert_eq!(kl_divergence(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn sample_examples() {
        let g = DiagonalGaussian::new(vec![1.0, -3.0], vec![2.0, 0.5]).unwrap();
        assert_eq!(sample(&g, &[0.0, 0.0]).unwrap(), g.mean().to_vec());
        assert_eq!(sample(&g1(1.0, 2.0), &[0.5]).unwrap(), vec![2.0]);

        let g = g1(3.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let total: f64 = (0..n)
            .map(|_| sample(&g, &[rng.sample::<f64, _>(StandardNormal)]).unwrap()[0])
            .sum();
        assert!((total / n as f64 - 3.0).abs() < 0.04);
    }

    fn arb_gaussian(n: usize) -> impl Strategy<Value = DiagonalGaussian> {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0.1f64..3.0, n),
        )
            .prop_map(|(m, s)| DiagonalGaussian::new(m, s).unwrap())
    }

    proptest! {
        #[test]
        fn product_is_commutative(a in arb_gaussian(6), b in arb_gaussian(6)) {
            let ab = gaussian_product(&a, &b).unwrap();
            let ba = gaussian_product(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn product_fold_order_is_irrelevant(
            msgs in prop::collection::vec(arb_gaussian(4), 2..6),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let fold = |ms: &[DiagonalGaussian]| {
                ms[1..].iter().fold(ms[0].clone(), |acc, m| gaussian_product(&acc, m).unwrap())
            };
            let base = fold(&msgs);
            let mut shuffled = msgs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let other = fold(&shuffled);
            for i in 0..4 {
                prop_assert!(rel(other.mean()[i], base.mean()[i]) < 1e-9 || (other.mean()[i] - base.mean()[i]).abs() < 1e-12);
                prop_assert!(rel(other.stddev()[i], base.stddev()[i]) < 1e-9);
            }
        }

        #[test]
        fn quotient_inverts_product(a in arb_gaussian(5), b in arb_gaussian(5)) {
            let back = gaussian_quotient(&gaussian_product(&a, &b).unwrap(), &a, 1e-8).unwrap();
            for i in 0..5 {
                prop_assert!((back.mean()[i] - b.mean()[i]).abs() <= 1e-9 * b.mean()[i].abs().max(1.0));
                prop_assert!(rel(back.stddev()[i], b.stddev()[i]) < 1e-9);
            }
        }

        #[test]
        fn kl_is_nonnegative(q in arb_gaussian(3), p in arb_gaussian(3)) {
            prop_assert!(kl_divergence(&q, &p).unwrap() >= 0.0);
        }

        #[test]
        fn outputs_respect_stddev_floor(
            m in -5.0f64..5.0, s1 in 1e-6f64..1e-3, s2 in 1e-6f64..1e-3,
        ) {
            let r = gaussian_product(&g1(m, s1), &g1(-m, s2)).unwrap();
            prop_assert!(r.stddev()[0] >= SIGMA_MIN);
            let r = gaussian_quotient(&g1(m, s1), &g1(-m, s2), 1e-8).unwrap();
            prop_assert!(r.stddev()[0] >= SIGMA_MIN);
        }
    }

    #[test]
    fn random_one_dimensional_cases_match_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..100 {
            let (ma, sa) = (rng.random_range(-5.0..5.0), rng.random_range(0.1..3.0));
            let (mb, sb) = (rng.random_range(-5.0..5.0), rng.random_range(0.1..3.0));
            let prod = gaussian_product(&g1(ma, sa), &g1(mb, sb)).unwrap();
            let (m, v) = grid_moments(|x| density(ma, sa, x) * density(mb, sb, x), -30.0, 30.0, 60_000);
            assert!((prod.mean()[0] - m).abs() <= 1e-6 * m.abs().max(1.0));
            assert!(rel(prod.stddev()[0].powi(2), v) < 1e-6);
        }
    }
}
