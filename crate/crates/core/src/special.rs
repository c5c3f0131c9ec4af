//! Normal, chi-squared and Student-t distribution functions.
//!
//! Everything here is built on `libm` so the crate stays `no_std`. The normal
//! quantile uses Acklam's rational approximation followed by one Halley step
//! against `erfc`, which brings it to full double precision over (0, 1).

use core::f64::consts::{LN_10, PI, SQRT_2};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Median of the chi-squared distribution with one degree of freedom.
pub const CHISQ1_MEDIAN: f64 = 0.454_936_423_119_57;

pub fn norm_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / SQRT_2PI
}

/// Lower tail `P(Z <= x)`.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Upper tail `P(Z > x)`, accurate far into the tail.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Natural log of the lower tail, finite for every finite `x`.
pub fn ln_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return libm::log(norm_cdf(x));
    }
    // Mills-ratio asymptotic series; erfc underflows near x = -38.
    let x2 = x * x;
    let inv = 1.0 / x2;
    let series = 1.0 - inv + 3.0 * inv * inv - 15.0 * inv * inv * inv + 105.0 * inv * inv * inv * inv;
    -0.5 * x2 - LN_SQRT_2PI - libm::log(-x) + libm::log(series)
}

pub fn ln_norm_sf(x: f64) -> f64 {
    ln_norm_cdf(-x)
}

/// Inverse of [`norm_cdf`]. Returns `-inf`/`+inf` at 0 and 1.
pub fn norm_quantile(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        f64::NAN
    } else if p == 0.0 {
        f64::NEG_INFINITY
    } else if p == 1.0 {
        f64::INFINITY
    } else if p > 0.5 {
        // Work in the lower tail for precision, then reflect.
        -lower_quantile(1.0 - p)
    } else {
        lower_quantile(p)
    }
}

/// Inverse of [`norm_sf`]: the `x` with `P(Z > x) = p`.
pub fn norm_isf(p: f64) -> f64 {
    -norm_quantile(p)
}

// Quantile for p in (0, 0.5].
fn lower_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let x = if p < P_LOW {
        let q = libm::sqrt(-2.0 * libm::log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };

    // One Halley step. The residual is relative to p, so it stays accurate
    // for tiny p because norm_cdf(x) for x < 0 is computed through erfc.
    let e = norm_cdf(x) - p;
    let u = e * SQRT_2PI * libm::exp(0.5 * x * x);
    x - u / (1.0 + 0.5 * x * u)
}

/// |z| whose two-sided normal p-value equals `p`.
pub fn z_from_two_sided_p(p: f64) -> f64 {
    norm_isf(0.5 * p)
}

/// Two-sided p-value of a standard-normal statistic together with its
/// log10, which stays finite after the p-value itself has underflowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoSidedP {
    pub p: f64,
    pub log10_p: f64,
}

pub fn two_sided_p(z: f64) -> TwoSidedP {
    let a = libm::fabs(z);
    let log10_p = (core::f64::consts::LN_2 + ln_norm_sf(a)) / LN_10;
    let raw = 2.0 * norm_sf(a);
    let p = if raw > 0.0 { raw.min(1.0) } else { f64::MIN_POSITIVE };
    TwoSidedP {
        p,
        log10_p: log10_p.min(0.0),
    }
}

/// Upper tail of chi-squared with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if df == 1.0 {
        return libm::erfc(libm::sqrt(0.5 * x));
    }
    gamma_q(0.5 * df, 0.5 * x)
}

/// 1-df chi-squared statistic with upper-tail probability `p`.
pub fn chi2_1_isf(p: f64) -> f64 {
    let z = z_from_two_sided_p(p);
    z * z
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..10_000 {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if libm::fabs(del) < libm::fabs(sum) * 1e-16 {
            break;
        }
    }
    sum * libm::exp(-x + a * libm::log(x) - libm::lgamma(a))
}

fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = b + an / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if libm::fabs(del - 1.0) < 1e-16 {
            break;
        }
    }
    libm::exp(-x + a * libm::log(x) - libm::lgamma(a)) * h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if libm::fabs(d) < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if libm::fabs(d) < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if libm::fabs(c) < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if libm::fabs(del - 1.0) < 1e-16 {
            break;
        }
    }
    h
}

/// Student-t lower tail.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * beta_inc(0.5 * df, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

pub fn t_pdf(t: f64, df: f64) -> f64 {
    let ln = libm::lgamma(0.5 * (df + 1.0))
        - libm::lgamma(0.5 * df)
        - 0.5 * libm::log(df * PI)
        - 0.5 * (df + 1.0) * libm::log1p(t * t / df);
    libm::exp(ln)
}

/// Student-t quantile for `p` in (0, 1).
pub fn t_quantile(p: f64, df: f64) -> f64 {
    if p.is_nan() || df.is_nan() || df <= 0.0 || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p < 0.5 {
        return -t_quantile(1.0 - p, df);
    }
    if df == 1.0 {
        // cot(π(1-p)) avoids evaluating tan next to its pole.
        return 1.0 / libm::tan(PI * (1.0 - p));
    }
    if df == 2.0 {
        return (2.0 * p - 1.0) / libm::sqrt(2.0 * p * (1.0 - p));
    }

    // Cornish-Fisher start, then safeguarded Newton on the cdf.
    let z = norm_quantile(p);
    let z2 = z * z;
    let g1 = (z2 + 1.0) * z / 4.0;
    let g2 = ((5.0 * z2 + 16.0) * z2 + 3.0) * z / 96.0;
    let g3 = (((3.0 * z2 + 19.0) * z2 + 17.0) * z2 - 15.0) * z / 384.0;
    let mut x = z + g1 / df + g2 / (df * df) + g3 / (df * df * df);
    if !x.is_finite() || x <= 0.0 {
        x = z.max(1e-3);
    }

    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..100 {
        let f = t_cdf(x, df) - p;
        if f > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let step = f / t_pdf(x, df);
        let mut next = x - step;
        if !next.is_finite() || next <= lo || next >= hi {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if libm::fabs(next - x) <= 1e-14 * libm::fabs(x).max(1.0) {
            return next;
        }
        x = next;
    }
    x
}
