//! Instance-to-bag aggregation.
//!
//! The generalized mean `((1/n) Σ p_k^r)^(1/r)` turns per-instance
//! probabilities into a bag probability. It approaches the hard maximum as
//! `r` grows while keeping a nonzero derivative for every instance.
//! Everything here accumulates in `f64` regardless of the tensor scalar type.

use crate::error::{Error, Result};

/// Lower/upper guard applied to instance probabilities before pooling.
pub const PROB_EPS: f64 = 1e-6;

/// Sharpness used for training unless configured otherwise.
pub const DEFAULT_R: f64 = 4.0;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Per-instance probabilities of one bag, clamped into `[eps, 1 - eps]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceVector {
    probs: Vec<f64>,
}

impl InstanceVector {
    pub fn new<I: IntoIterator<Item = f64>>(values: I) -> Result<Self> {
        let probs: Vec<f64> = values.into_iter().map(clamp_prob).collect();
        if probs.is_empty() {
            return Err(Error::invalid("instance vector is empty"));
        }
        if probs.iter().any(|p| p.is_nan()) {
            return Err(Error::invalid("instance probability is NaN"));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn count(&self) -> usize {
        self.probs.len()
    }

    fn min_max(&self) -> (f64, f64) {
        self.probs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)))
    }
}

fn check_r(r: f64) -> Result<()> {
    if !(r >= 1.0) || !r.is_finite() {
        return Err(Error::invalid(format!("generalized mean needs finite r >= 1, got {r}")));
    }
    Ok(())
}

/// Pairwise summation; keeps the rounding error at O(log n).
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Generalized-mean bag probability.
///
/// Evaluated in log space as `exp((logsumexp(r ln p) - ln n) / r)`. `r == 1`
/// takes the arithmetic-mean path so it agrees bit for bit with
/// [`positiveness`]. The result is clipped into `[min, max]` of the inputs.
pub fn gm_pool(instances: &InstanceVector, r: f64) -> Result<f64> {
    check_r(r)?;
    if r == 1.0 {
        return Ok(mean(instances));
    }
    let (lo, hi) = instances.min_max();
    if lo == hi {
        return Ok(lo);
    }
    let logs: Vec<f64> = instances.probs.iter().map(|p| r * p.ln()).collect();
    let top = r * hi.ln();
    let shifted: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let lse = top + pairwise_sum(&shifted).ln();
    let n = instances.count() as f64;
    let value = ((lse - n.ln()) / r).exp();
    Ok(value.clamp(lo, hi))
}

/// `∂ gm / ∂ p_k = (1/n) p_k^(r-1) gm^(1-r)` for every instance.
pub fn gm_pool_grad(instances: &InstanceVector, r: f64) -> Result<Vec<f64>> {
    let bag = gm_pool(instances, r)?;
    let n = instances.count() as f64;
    if r == 1.0 {
        return Ok(vec![1.0 / n; instances.count()]);
    }
    let log_bag = bag.ln();
    Ok(instances
        .probs
        .iter()
        .map(|p| ((r - 1.0) * (p.ln() - log_bag)).exp() / n)
        .collect())
}

/// Hard maximum over instances. Comparison only, not used for training.
pub fn hard_max_pool(instances: &InstanceVector) -> f64 {
    instances.min_max().1
}

/// Mean instance probability, the "positiveness" fed to the area constraint.
pub fn positiveness(instances: &InstanceVector) -> f64 {
    mean(instances)
}

fn mean(instances: &InstanceVector) -> f64 {
    let v = pairwise_sum(&instances.probs) / instances.count() as f64;
    let (lo, hi) = instances.min_max();
    v.clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(v: &[f64]) -> InstanceVector {
        InstanceVector::new(v.iter().copied()).unwrap()
    }

    #[test]
    fn constant_input_is_fixed_point() {
        for &r in &[1.0, 2.0, 4.0, 37.0] {
            assert_eq!(gm_pool(&iv(&[0.3; 9]), r).unwrap(), 0.3);
        }
    }

    #[test]
    fn r_one_is_the_mean() {
        let v = iv(&[0.1, 0.2, 0.6]);
        assert_eq!(gm_pool(&v, 1.0).unwrap(), positiveness(&v));
        assert!((positiveness(&v) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_point_example() {
        // ((0.1^4 + 0.9^4) / 2)^(1/4)
        let got = gm_pool(&iv(&[0.1, 0.9]), 4.0).unwrap();
        assert!((got - 0.756_835_609_405_891_7).abs() < 1e-12, "{got}");
        let g = gm_pool_grad(&iv(&[0.1, 0.9]), 4.0).unwrap();
        assert!((g[1] - 0.841).abs() < 1e-3, "{g:?}");
    }

    #[test]
    fn rejects_empty_and_small_r() {
        assert!(InstanceVector::new(Vec::<f64>::new()).is_err());
        assert!(gm_pool(&iv(&[0.5]), 0.5).is_err());
        assert!(gm_pool(&iv(&[0.5]), f64::NAN).is_err());
        assert!(gm_pool_grad(&iv(&[0.5]), 0.0).is_err());
    }

    #[test]
    fn hard_max_and_positiveness_examples() {
        assert_eq!(hard_max_pool(&iv(&[0.1, 0.9])), 0.9);
        assert_eq!(hard_max_pool(&iv(&[0.4; 3])), 0.4);
        assert_eq!(positiveness(&iv(&[0.5; 4])), 0.5);
        assert!((positiveness(&iv(&[0.1, 0.9])) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inputs_are_clamped() {
        let v = iv(&[0.0, 1.0]);
        assert_eq!(v.probs(), &[PROB_EPS, 1.0 - PROB_EPS]);
        let g = gm_pool(&v, 64.0).unwrap();
        assert!(g.is_finite() && g > 0.0 && g < 1.0);
    }

    #[test]
    fn large_r_survives_tiny_probabilities() {
        let v = iv(&vec![1e-6; 1000]);
        assert_eq!(gm_pool(&v, 512.0).unwrap(), 1e-6);
        let mixed = iv(&[1e-6, 2e-6, 3e-6]);
        let g = gm_pool(&mixed, 512.0).unwrap();
        assert!(g > 2e-6 && g <= 3e-6);
        assert!(gm_pool_grad(&mixed, 512.0).unwrap().iter().all(|d| d.is_finite() && *d > 0.0));
    }
}
