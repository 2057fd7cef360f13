//! Small dense-f64 kernels shared by the inference and training paths.
//! Summation order is fixed so repeated runs are bit-identical.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Dot product with eight accumulator lanes; vectorizes well under
/// target-cpu=native without changing results between runs.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let pa = &a[i * 8..i * 8 + 8];
        let pb = &b[i * 8..i * 8 + 8];
        for lane in 0..8 {
            acc[lane] += pa[lane] * pb[lane];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// out = W x + b, W row-major `[rows x cols]`. Four rows at a time so the
/// x loads are shared across accumulators.
#[inline]
pub(crate) fn matvec(w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    let rows = out.len();
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(bias.len(), rows);
    let mut r = 0;
    while r + 4 <= rows {
        let r0 = &w[r * cols..(r + 1) * cols];
        let r1 = &w[(r + 1) * cols..(r + 2) * cols];
        let r2 = &w[(r + 2) * cols..(r + 3) * cols];
        let r3 = &w[(r + 3) * cols..(r + 4) * cols];
        let mut a0 = 0.0;
        let mut a1 = 0.0;
        let mut a2 = 0.0;
        let mut a3 = 0.0;
        for c in 0..cols {
            let xv = x[c];
            a0 += r0[c] * xv;
            a1 += r1[c] * xv;
            a2 += r2[c] * xv;
            a3 += r3[c] * xv;
        }
        out[r] = a0 + bias[r];
        out[r + 1] = a1 + bias[r + 1];
        out[r + 2] = a2 + bias[r + 2];
        out[r + 3] = a3 + bias[r + 3];
        r += 4;
    }
    while r < rows {
        out[r] = dot(&w[r * cols..(r + 1) * cols], x) + bias[r];
        r += 1;
    }
}

/// Layer norm over one vector; returns (mean, rstd) for reuse in backward.
#[inline]
pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * g[i] + b[i];
    }
    (mean, rstd)
}

/// In-place softmax over `v[..len]`.
#[inline]
pub(crate) fn softmax_inplace(v: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for x in v.iter() {
        if *x > max {
            max = *x;
        }
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// logits -> log-probabilities (log-sum-exp subtracted).
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for x in logits {
        if *x > max {
            max = *x;
        }
    }
    let mut sum = 0.0;
    for x in logits {
        sum += (x - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|x| x - lse).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Box-Muller normal sampling; two uniforms per pair of outputs.
pub(crate) fn fill_normal(v: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let mut i = 0;
    while i < v.len() {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        v[i] = std * r * theta.cos();
        i += 1;
        if i < v.len() {
            v[i] = std * r * theta.sin();
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64) * 0.1 - 1.0).collect();
        let b: Vec<f64> = (0..37).map(|i| ((i * 7 % 13) as f64) * 0.3).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[0.3, -2.0, 5.0, 0.0]);
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_deriv(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn normal_fill_has_plausible_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = vec![0.0; 100_000];
        fill_normal(&mut v, 0.02, &mut rng);
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.02).abs() < 1e-3);
    }
}
