//! Log-gamma and polygamma functions on the positive real line.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

// Below this the polygamma recurrences shift the argument upward before
// switching to the asymptotic series.
const ASYMPTOTIC_FROM: f64 = 10.0;

fn check_positive(op: &'static str, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op });
    }
    if x <= 0.0 {
        return Err(Error::domain(op, format!("argument must be > 0, got {x}")));
    }
    Ok(())
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine terms).
pub fn lgamma(x: f64) -> Result<f64> {
    check_positive("lgamma", x)?;
    Ok(lgamma_unchecked(x))
}

fn lgamma_unchecked(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x) = Γ(x + 1) / x keeps the series in its accurate range.
        return lgamma_unchecked(x + 1.0) - x.ln();
    }
    let z = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_FROM {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0))))));
    Ok(shift + x.ln() - 0.5 * inv - series)
}

/// `ψ'(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_FROM {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))));
    Ok(shift + series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lgamma_known_values() {
        assert!(lgamma(1.0).unwrap().abs() < 1e-14);
        assert!(lgamma(2.0).unwrap().abs() < 1e-14);
        assert!((lgamma(0.5).unwrap() - 0.572_364_942_924_700_1).abs() < 1e-12);
        // ln(9!) = ln 362880
        assert!((lgamma(10.0).unwrap() - 362_880f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn digamma_known_values() {
        let euler = 0.577_215_664_901_532_9;
        assert!((digamma(1.0).unwrap() + euler).abs() < 1e-13);
        assert!((digamma(2.0).unwrap() - (1.0 - euler)).abs() < 1e-13);
        // ψ(1/2) = -γ - 2 ln 2
        assert!((digamma(0.5).unwrap() + euler + 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn trigamma_known_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0).unwrap() - pi2_6).abs() < 1e-12);
        assert!((trigamma(0.5).unwrap() - 3.0 * pi2_6).abs() < 1e-11);
    }

    #[test]
    fn rejects_non_positive() {
        assert!(matches!(lgamma(0.0), Err(Error::Domain { .. })));
        assert!(matches!(digamma(-1.0), Err(Error::Domain { .. })));
        assert!(matches!(trigamma(0.0), Err(Error::Domain { .. })));
        assert!(matches!(lgamma(f64::NAN), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn derivative_chain_matches_differences() {
        for &x in &[0.3, 1.7, 4.2, 25.0, 80.0] {
            let h = 1e-5;
            let dl = (lgamma(x + h).unwrap() - lgamma(x - h).unwrap()) / (2.0 * h);
            assert!((dl - digamma(x).unwrap()).abs() < 1e-7 * dl.abs().max(1.0));
            let dd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
            assert!((dd - trigamma(x).unwrap()).abs() < 1e-6 * dd.abs().max(1.0));
        }
    }
}
