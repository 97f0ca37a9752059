//! Reference implementations shared by the integration suites.

use equipoise::pscore::DesignMatrix;

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let k = a.len();
    let mut inv: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for col in 0..k {
        let piv = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for j in 0..k {
            a[col][j] /= d;
            inv[col][j] /= d;
        }
        for i in 0..k {
            if i != col {
                let f = a[i][col];
                for j in 0..k {
                    a[i][j] -= f * a[col][j];
                    inv[i][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

pub fn rows(design: &DesignMatrix) -> Vec<Vec<f64>> {
    (0..design.nrows()).map(|i| design.columns().iter().map(|c| c[i]).collect()).collect()
}

/// Sandwich variance of the h = 1 estimator written out from its own
/// influence function: each arm's mean contributes `z (y - μ1)/e` and
/// `(1-z)(y - μ0)/(1-e)`, and the score model adds a projection on
/// `x (z - e)` through the derivatives of `1/e` and `1/(1-e)`.
pub fn ipw_sandwich_oracle(y: &[f64], z: &[bool], x: &[Vec<f64>], e: &[f64]) -> (f64, f64) {
    let n = y.len();
    let k = x[0].len();
    let (mut s1, mut a1, mut s0, mut a0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        if z[i] {
            s1 += 1.0 / e[i];
            a1 += y[i] / e[i];
        } else {
            s0 += 1.0 / (1.0 - e[i]);
            a0 += y[i] / (1.0 - e[i]);
        }
    }
    let (mu1, mu0) = (a1 / s1, a0 / s0);
    let nf = n as f64;
    let mut info = vec![vec![0.0; k]; k];
    let mut grad1 = vec![0.0; k];
    let mut grad0 = vec![0.0; k];
    for i in 0..n {
        let p = e[i];
        for a in 0..k {
            for b in 0..k {
                info[a][b] += p * (1.0 - p) * x[i][a] * x[i][b] / nf;
            }
            if z[i] {
                grad1[a] += (y[i] - mu1) * (1.0 - p) / p * x[i][a] / nf;
            } else {
                grad0[a] += (y[i] - mu0) * p / (1.0 - p) * x[i][a] / nf;
            }
        }
    }
    let inv = invert(info);
    let mut ss = 0.0;
    for i in 0..n {
        let p = e[i];
        let zi = f64::from(u8::from(z[i]));
        let mut proj = 0.0;
        for a in 0..k {
            for b in 0..k {
                proj += (grad1[a] + grad0[a]) * inv[a][b] * x[i][b] * (zi - p);
            }
        }
        let if1 = zi * (y[i] - mu1) / p;
        let if0 = (1.0 - zi) * (y[i] - mu0) / (1.0 - p);
        let infl = if1 - if0 - proj;
        ss += infl * infl;
    }
    (mu1 - mu0, ss / (nf * nf))
}
