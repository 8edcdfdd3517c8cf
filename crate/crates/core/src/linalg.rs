//! Normal-equation least squares shared by the linear estimators.

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

/// Relative pivot threshold below which the normal matrix counts as singular.
const PIVOT_TOL: f64 = 1e-12;

/// Solve `(DᵀD + ridge·I)·c = Dᵀy`.
///
/// Plain Cholesky first; if that breaks down, a diagonally pivoted Cholesky
/// that also detects rank deficiency. At `ridge = 0` a rank-deficient design
/// yields [`Error::Singular`].
pub fn least_squares(design: &FeatureMatrix, target: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let (n, p) = (design.rows(), design.cols());
    if target.len() != n {
        return Err(Error::dim(format!("design has {n} rows, target has {}", target.len())));
    }
    if n < p {
        return Err(Error::dim(format!("underdetermined: {n} rows < {p} columns")));
    }
    if !(ridge >= 0.0) {
        return Err(Error::param("ridge must be >= 0"));
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("non-finite target"));
    }
    let (mut a, b) = normal_equations(design, target);
    for i in 0..p {
        a[i * p + i] += ridge;
    }
    match cholesky_solve(&a, &b, p) {
        Some(c) => Ok(c),
        None => pivoted_cholesky_solve(&a, &b, p),
    }
}

/// `(DᵀD, Dᵀy)` with `DᵀD` dense row-major `p x p`.
pub(crate) fn normal_equations(design: &FeatureMatrix, target: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = design.cols();
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for (r, &y) in target.iter().enumerate() {
        let row = design.row(r);
        for i in 0..p {
            let ri = row[i];
            b[i] += ri * y;
            for j in i..p {
                a[i * p + j] += ri * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[i * p + j] = a[j * p + i];
        }
    }
    (a, b)
}

fn max_diag(a: &[f64], p: usize) -> f64 {
    (0..p).map(|i| a[i * p + i].abs()).fold(0.0, f64::max)
}

fn cholesky_solve(a: &[f64], b: &[f64], p: usize) -> Option<Vec<f64>> {
    let tol = PIVOT_TOL * max_diag(a, p).max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > tol) {
            return None;
        }
        let d = d.sqrt();
        l[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / d;
        }
    }
    Some(triangular_solves(&l, b, p))
}

/// Cholesky with symmetric diagonal pivoting: `P·A·Pᵀ = L·Lᵀ`.
fn pivoted_cholesky_solve(a: &[f64], b: &[f64], p: usize) -> Result<Vec<f64>> {
    let tol = PIVOT_TOL * max_diag(a, p).max(f64::MIN_POSITIVE);
    let mut w = a.to_vec();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        // pick the largest remaining Schur-complement diagonal
        let (piv, &best) = (j..p)
            .map(|k| (k, &w[perm[k] * p + perm[k]]))
            .max_by(|x, y| x.1.total_cmp(y.1))
            .expect("non-empty range");
        if !(best > tol) {
            return Err(Error::Singular);
        }
        perm.swap(j, piv);
        swap_rows(&mut l, j, piv, p);
        let pj = perm[j];
        let d = best.sqrt();
        l[j * p + j] = d;
        for i in j + 1..p {
            let pi = perm[i];
            l[i * p + j] = w[pi * p + pj] / d;
        }
        for i in j + 1..p {
            let pi = perm[i];
            for k in j + 1..p {
                let pk = perm[k];
                w[pi * p + pk] -= l[i * p + j] * l[k * p + j];
            }
        }
    }
    let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
    let z = triangular_solves(&l, &pb, p);
    let mut c = vec![0.0; p];
    for (k, &i) in perm.iter().enumerate() {
        c[i] = z[k];
    }
    Ok(c)
}

fn swap_rows(m: &mut [f64], a: usize, b: usize, p: usize) {
    if a != b {
        for k in 0..p {
            m.swap(a * p + k, b * p + k);
        }
    }
}

/// Solve `L·Lᵀ·x = b` for lower-triangular `L`.
fn triangular_solves(l: &[f64], b: &[f64], p: usize) -> Vec<f64> {
    let mut z = vec![0.0; p];
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * p + k] * z[k];
        }
        z[i] = s / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = z[i];
        for k in i + 1..p {
            s -= l[k * p + i] * x[k];
        }
        x[i] = s / l[i * p + i];
    }
    x
}

/// `y − D·c`.
pub fn residuals(design: &FeatureMatrix, target: &[f64], coef: &[f64]) -> Result<Vec<f64>> {
    let fit = design.mat_vec(coef)?;
    Ok(target.iter().zip(fit).map(|(y, f)| y - f).collect())
}

pub fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Pearson correlation; 0 when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Coefficient of determination of `pred` against `target`.
pub fn r_squared(target: &[f64], pred: &[f64]) -> f64 {
    let m = mean(target);
    let ss_tot: f64 = target.iter().map(|y| (y - m).powi(2)).sum();
    let ss_res: f64 = target.iter().zip(pred).map(|(y, f)| (y - f).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}
