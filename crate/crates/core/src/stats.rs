//! Summary statistics and Welch's unequal-variance t-test.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};

const CF_EPS: f64 = 1e-15;
const CF_TINY: f64 = 1e-300;
const CF_MAX_ITER: usize = 10_000;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

/// Continued fraction for the incomplete beta function, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64) -> Result<f64> {
    let guard = |v: f64| if v.abs() < CF_TINY { CF_TINY } else { v };
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + even * d);
        c = guard(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + odd * d);
        c = guard(1.0 + odd / c);
        let step = d * c;
        h *= step;
        if (step - 1.0).abs() < CF_EPS {
            return Ok(h);
        }
    }
    Err(VoltaError::numeric("incomplete beta", format!("no convergence for a={a}, b={b}, x={x}")))
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) || !(0.0..=1.0).contains(&x) {
        return Err(VoltaError::invalid(format!("I_x(a, b) undefined at a={a}, b={b}, x={x}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x)? / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x)? / b)
    }
}

/// Two-sided tail probability of Student's t with `dof` degrees of freedom.
pub fn t_two_sided_p(t: f64, dof: f64) -> Result<f64> {
    if t == 0.0 {
        return Ok(1.0);
    }
    Ok(reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t))?.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(VoltaError::invalid("each sample needs at least two values"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(VoltaError::invalid("non-finite sample value"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Err(VoltaError::Degenerate("both samples have zero variance".into()));
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let dof = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok(WelchResult {
        t,
        dof,
        p: t_two_sided_p(t, dof)?,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    use super::*;

    #[test]
    fn reference_example() {
        let r = welch_t_test(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((r.t + 1.224744871391589).abs() < 1e-12);
        assert!((r.dof - 4.0).abs() < 1e-12);
        assert!((r.p - 0.2878641347266908).abs() < 1e-9);
    }

    #[test]
    fn equal_means_give_unit_p() {
        let r = welch_t_test(&[1.0, 3.0], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]), Err(VoltaError::Degenerate(_))));
        assert!(welch_t_test(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x and I_x(a, 1) = x^a
        for x in [0.1, 0.5, 0.9] {
            assert!((reg_inc_beta(1.0, 1.0, x).unwrap() - x).abs() < 1e-14);
            assert!((reg_inc_beta(3.0, 1.0, x).unwrap() - x.powi(3)).abs() < 1e-14);
        }
    }

    fn oracle_p(t: f64, dof: f64) -> f64 {
        2.0 * StudentsT::new(0.0, 1.0, dof).unwrap().cdf(-t.abs())
    }

    proptest! {
        #[test]
        fn antisymmetric(a in proptest::collection::vec(-10.0f64..10.0, 2..8),
                         b in proptest::collection::vec(-10.0f64..10.0, 2..8)) {
            let ab = welch_t_test(&a, &b).unwrap();
            let ba = welch_t_test(&b, &a).unwrap();
            prop_assert_eq!(ab.t, -ba.t);
            prop_assert!((ab.p - ba.p).abs() < 1e-14);
            prop_assert!((0.0..=1.0).contains(&ab.p));
        }

        #[test]
        fn p_matches_reference_distribution(t in -20.0f64..20.0, dof in 1.0f64..60.0) {
            prop_assert!((t_two_sided_p(t, dof).unwrap() - oracle_p(t, dof)).abs() < 1e-10);
        }
    }
}
