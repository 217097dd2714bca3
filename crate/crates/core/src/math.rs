//! Numerically stable scalar primitives shared by the loss and policy code.
//!
//! All probabilities elsewhere in this crate are carried in log space (nats);
//! exponentiation happens only at the loss/perplexity boundary. These helpers
//! keep that boundary overflow-free.

/// Logistic sigmoid, `1 / (1 + e^-x)`.
///
/// Evaluated branch-wise so that `sigmoid(x) + sigmoid(-x) == 1` holds to
/// within a couple of ulps for every finite `x`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for |x| up to at least 700.
///
/// Uses `-log1p(e^-x)` for nonnegative `x` and `x - log1p(e^x)` otherwise,
/// so the result tracks the asymptote `log_sigmoid(x) -> x` as `x -> -inf`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -log1p(exp(-x))
    } else {
        x - log1p(exp(x))
    }
}

// f64 math shims: std intrinsics when available, libm otherwise. The two
// backends agree to within 1 ulp, which is far below every tolerance used
// in this crate.

#[cfg(feature = "std")]
pub(crate) fn exp(x: f64) -> f64 {
    x.exp()
}
#[cfg(not(feature = "std"))]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[cfg(feature = "std")]
pub(crate) fn ln(x: f64) -> f64 {
    x.ln()
}
#[cfg(not(feature = "std"))]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[cfg(feature = "std")]
pub(crate) fn log1p(x: f64) -> f64 {
    x.ln_1p()
}
#[cfg(not(feature = "std"))]
pub(crate) fn log1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[cfg(feature = "std")]
pub(crate) fn sqrt(x: f64) -> f64 {
    x.sqrt()
}
#[cfg(not(feature = "std"))]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[cfg(feature = "std")]
pub(crate) fn abs(x: f64) -> f64 {
    x.abs()
}
#[cfg(not(feature = "std"))]
pub(crate) fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[cfg(feature = "std")]
pub(crate) fn powf(x: f64, y: f64) -> f64 {
    x.powf(y)
}
#[cfg(not(feature = "std"))]
pub(crate) fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_reference_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(0.5) - 0.622459).abs() < 1e-6);
        assert!((sigmoid(-0.5) - (1.0 - sigmoid(0.5))).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_pair_sums_to_one() {
        for i in -300..=300 {
            let x = i as f64 * 0.1;
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15, "x={x}");
        }
    }

    #[test]
    fn log_sigmoid_matches_reference_points() {
        assert!((log_sigmoid(0.0) + core::f64::consts::LN_2).abs() < 1e-6);
        // -log(1 + e^-50) evaluated at high precision.
        assert!((log_sigmoid(50.0) - (-1.928749847963918e-22)).abs() < 1e-28);
        // Asymptote: log_sigmoid(x) -> x for x -> -inf.
        assert!((log_sigmoid(-50.0) - (-50.0)).abs() < 1e-12);
    }

    #[test]
    fn log_sigmoid_has_no_overflow_at_700() {
        assert!(log_sigmoid(700.0).is_finite());
        assert!(log_sigmoid(-700.0).is_finite());
        assert!((log_sigmoid(-700.0) - (-700.0)).abs() < 1e-9);
    }

    #[test]
    fn log_sigmoid_is_monotone() {
        let mut prev = log_sigmoid(-700.0);
        for i in -6999..=7000 {
            let cur = log_sigmoid(i as f64 * 0.1);
            assert!(cur >= prev);
            prev = cur;
        }
    }

    #[test]
    fn exp_of_log_sigmoid_recovers_sigmoid() {
        for i in -300..=300 {
            let x = i as f64 * 0.1;
            assert!((exp(log_sigmoid(x)) - sigmoid(x)).abs() < 1e-12, "x={x}");
        }
    }
}
