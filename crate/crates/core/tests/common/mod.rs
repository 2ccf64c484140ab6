//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

/// Matérn 5/2 with ARD length scales, straight from the closed form.
pub fn matern52_ref(a: &[f64], b: &[f64], ls: &[f64], sigma2: f64) -> f64 {
    let mut r2 = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / ls[i];
        r2 += d * d;
    }
    let r = r2.sqrt();
    let s5 = 5f64.sqrt();
    sigma2 * (1.0 + s5 * r + 5.0 * r2 / 3.0) * (-s5 * r).exp()
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = a[i][col];
                if f != 0.0 {
                    for j in 0..n {
                        a[i][j] -= f * a[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    inv
}

/// GP posterior by explicit matrix inversion on standardized targets with a
/// constant prior mean at the sample mean. Returns `(mean, std)` in raw units.
pub fn gp_posterior_ref(xs: &[Vec<f64>], ys: &[f64], ls: &[f64], sigma2: f64, noise: f64, q: &[f64]) -> (f64, f64) {
    let n = ys.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n as f64;
    let sd = if n < 2 || var == 0.0 { 1.0 } else { var.sqrt() };
    let z: Vec<f64> = ys.iter().map(|y| (y - mean) / sd).collect();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| matern52_ref(&xs[i], &xs[j], ls, sigma2) + if i == j { noise } else { 0.0 }).collect())
        .collect();
    let kinv = invert(&k);
    let ks: Vec<f64> = xs.iter().map(|x| matern52_ref(q, x, ls, sigma2)).collect();
    let mut mu = 0.0;
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            mu += ks[i] * kinv[i][j] * z[j];
            quad += ks[i] * kinv[i][j] * ks[j];
        }
    }
    let v = (sigma2 - quad).max(0.0);
    (mean + sd * mu, sd * v.sqrt())
}

/// Mean and standard error of the paired differences `a[i] - b[i]`.
pub fn paired_diff(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let s = (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt();
    (m, s / n.sqrt())
}
