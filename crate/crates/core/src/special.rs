//! Digamma and low-order polygamma functions for positive real arguments.
//!
//! Small arguments are shifted upward with the recurrence
//! `psi^(m)(x) = psi^(m)(x + 1) - (-1)^m m! / x^(m+1)` and the asymptotic
//! Bernoulli expansion is applied once `x >= SHIFT`.

const SHIFT: f64 = 20.0;

// B_2k for k = 1..=8.
const BERNOULLI: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

/// `psi^(m)(x)` for `m <= 3` and `x > 0`.
pub fn polygamma(m: u32, x: f64) -> f64 {
    assert!(m <= 3, "polygamma order {m} not supported");
    debug_assert!(x > 0.0, "polygamma argument must be positive, got {x}");

    let mut x = x;
    let mut acc = 0.0;
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    let mfact = factorial(m);
    while x < SHIFT {
        acc -= sign * mfact / x.powi(m as i32 + 1);
        x += 1.0;
    }
    acc + asymptotic(m, x)
}

pub fn digamma(x: f64) -> f64 {
    polygamma(0, x)
}

pub fn trigamma(x: f64) -> f64 {
    polygamma(1, x)
}

fn asymptotic(m: u32, x: f64) -> f64 {
    let inv = 1.0 / x;
    if m == 0 {
        let inv2 = inv * inv;
        let mut series = 0.0;
        let mut p = inv2;
        for (k, b) in BERNOULLI.iter().enumerate() {
            let two_k = 2.0 * (k as f64 + 1.0);
            series += b / two_k * p;
            p *= inv2;
        }
        return x.ln() - 0.5 * inv - series;
    }

    // (-1)^(m+1) [ (m-1)!/x^m + m!/(2 x^(m+1)) + sum_k B_2k (2k+m-1)!/((2k)! x^(2k+m)) ]
    let mi = m as i32;
    let mut s = factorial(m - 1) * inv.powi(mi) + factorial(m) * 0.5 * inv.powi(mi + 1);
    for (k, b) in BERNOULLI.iter().enumerate() {
        let two_k = 2 * (k as u32 + 1);
        s += b * factorial(two_k + m - 1) / factorial(two_k) * inv.powi(two_k as i32 + mi);
    }
    if m % 2 == 1 {
        s
    } else {
        -s
    }
}
