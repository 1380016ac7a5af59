//! Small dense d×d matrix helpers (row-major `Vec<f64>` of length d²).

/// Identity matrix of size d.
pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

pub fn transpose(m: &[f64], d: usize) -> Vec<f64> {
    let mut t = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            t[j * d + i] = m[i * d + j];
        }
    }
    t
}

pub fn matvec(m: &[f64], x: &[f64], d: usize, out: &mut [f64]) {
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += m[i * d + j] * x[j];
        }
        out[i] = s;
    }
}

pub fn sym_part(m: &[f64], d: usize) -> Vec<f64> {
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = 0.5 * (m[i * d + j] + m[j * d + i]);
        }
    }
    s
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps (d is tiny here).
pub fn sym_eigenvalues(m: &[f64], d: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i]).collect()
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(m: &[f64], d: usize) -> f64 {
    sym_eigenvalues(&sym_part(m, d), d)
        .into_iter()
        .fold(f64::INFINITY, f64::min)
}

/// Spectral operator norm, via the largest eigenvalue of mᵀm.
pub fn operator_norm(m: &[f64], d: usize) -> f64 {
    let mut mtm = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += m[k * d + i] * m[k * d + j];
            }
            mtm[i * d + j] = s;
        }
    }
    sym_eigenvalues(&mtm, d)
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}
