//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

/// Modified Bessel function of the first kind, integer order, by its power
/// series Σ (x/2)^(2k+n) / (k! (k+n)!). All terms are positive, so the sum is
/// accurate for the moderate arguments used here.
pub fn bessel_i(n: u32, x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    for k in 1..=n {
        term *= half / k as f64;
    }
    let mut sum = term;
    let mut k = 0u32;
    loop {
        k += 1;
        term *= half * half / (k as f64 * (k + n) as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

/// I_n'(x) = (I_{n-1}(x) + I_{n+1}(x)) / 2, with I_{-1} = I_1.
pub fn bessel_i_prime(n: u32, x: f64) -> f64 {
    let lower = if n == 0 { bessel_i(1, x) } else { bessel_i(n - 1, x) };
    0.5 * (lower + bessel_i(n + 1, x))
}

/// Analytic Neumann solution on a disk of radius `r_disk` for
/// `D ∂u/∂r = cos(nθ)` and `−D Δu + μu = 0`: u = A I_n(κr) cos(nθ).
pub fn disk_solution(n: u32, d: f64, mu: f64, r_disk: f64, p: [f64; 2]) -> f64 {
    let kappa = (mu / d).sqrt();
    let amp = 1.0 / (d * kappa * bessel_i_prime(n, kappa * r_disk));
    let r = p[0].hypot(p[1]);
    let theta = p[1].atan2(p[0]);
    amp * bessel_i(n, kappa * r) * (n as f64 * theta).cos()
}

/// ∫₀^∞ xᵏ e^{−x²/2} dx by composite Simpson on [0, 12].
pub fn half_gaussian_moment(k: i32) -> f64 {
    let (a, b, n) = (0.0, 12.0, 20000);
    let h = (b - a) / n as f64;
    let f = |x: f64| x.powi(k) * (-0.5 * x * x).exp();
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

pub fn circle_snap(radius: f64) -> impl Fn([f64; 2]) -> [f64; 2] {
    move |p| {
        let r = p[0].hypot(p[1]);
        [p[0] * radius / r, p[1] * radius / r]
    }
}

pub fn two_pi() -> f64 {
    2.0 * PI
}
