//! Small numerical utilities shared across modules.

/// Points live in at most two dimensions; 1-d models leave the second
/// coordinate at zero.
pub type Point = [f64; 2];

/// `<y> = (1 + |y|^2)^{1/2}`, the polynomial weight used in growth bounds.
pub fn weight(y: Point, dim: usize) -> f64 {
    (1.0 + sq_norm(y, dim)).sqrt()
}

/// `<y>^n`.
pub fn weight_pow(y: Point, dim: usize, n: f64) -> f64 {
    if n == 0.0 {
        1.0
    } else {
        weight(y, dim).powf(n)
    }
}

/// Gradient of `<y>^n`: `n <y>^{n-2} y`.
pub fn weight_pow_grad(y: Point, dim: usize, n: f64) -> Point {
    if n == 0.0 {
        return [0.0, 0.0];
    }
    let c = n * weight(y, dim).powf(n - 2.0);
    let mut g = [0.0, 0.0];
    for d in 0..dim {
        g[d] = c * y[d];
    }
    g
}

/// Hessian of `<y>^n`: `n <y>^{n-4} (<y>^2 I + (n-2) y (x) y)`.
pub fn weight_pow_hessian(y: Point, dim: usize, n: f64) -> [[f64; 2]; 2] {
    let mut h = [[0.0; 2]; 2];
    if n == 0.0 {
        return h;
    }
    let w = weight(y, dim);
    let c = n * w.powf(n - 4.0);
    for i in 0..dim {
        for j in 0..dim {
            let mut v = (n - 2.0) * y[i] * y[j];
            if i == j {
                v += w * w;
            }
            h[i][j] = c * v;
        }
    }
    h
}

pub fn sq_norm(y: Point, dim: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..dim {
        s += y[d] * y[d];
    }
    s
}

pub fn norm(y: Point, dim: usize) -> f64 {
    sq_norm(y, dim).sqrt()
}

/// `(1+z)^{b} - 1 - b z`, the tail of the generalized binomial series
/// `sum_{k>=2} C(b, k) z^k` in closed form. Requires `z >= -1`.
pub fn binomial_tail(z: f64, b: f64) -> f64 {
    (1.0 + z).powf(b) - 1.0 - b * z
}

/// Generalized binomial coefficient `C(b, k)` by the product recurrence.
pub fn gen_binomial(b: f64, k: usize) -> f64 {
    let mut c = 1.0;
    for j in 0..k {
        c *= (b - j as f64) / (j as f64 + 1.0);
    }
    c
}

/// Natural log of the Gamma function (Lanczos approximation, g=7, n=9).
/// Accurate to ~1e-13 for positive arguments.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Euler Beta function `B(a, b)`.
pub fn beta_fn(a: f64, b: f64) -> f64 {
    (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)).exp()
}

/// Fixed-order pairwise summation; deterministic for a given slice regardless
/// of how the values were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Sample mean and standard error via pairwise sums.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Element `i` of the Halton low-discrepancy sequence in the given base.
pub fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Quasi-random point in a box: Halton bases 2 and 3 per coordinate.
pub fn halton_point(index: u64, lo: Point, hi: Point, dim: usize) -> Point {
    const BASES: [u64; 2] = [2, 3];
    let mut y = [0.0, 0.0];
    for d in 0..dim {
        // index + 1: element 0 of the Halton sequence is the origin corner
        y[d] = lo[d] + (hi[d] - lo[d]) * halton(index + 1, BASES[d]);
    }
    y
}

/// Least-squares slope and intercept of `ys` against `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
