//! Effective latent rank: the exponentiated Shannon entropy of the
//! normalized singular-value spectrum of a hidden-state matrix. Singular
//! values come from a cyclic Jacobi eigensolve of the Gram matrix on the
//! smaller side, which is plenty at desk scale and keeps the measurement
//! deterministic and dependency-free.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EffectiveRankReport {
    /// Retained singular values, descending.
    pub singular_values: Vec<f64>,
    /// Shannon entropy of the normalized spectrum, in nats.
    pub entropy: f64,
    pub effective_rank: f64,
    pub sv_floor: f64,
    /// Sample dimensions the hidden matrix was built from (recorded so
    /// scaled-down desk samples are visible in reports).
    pub rows: usize,
    pub cols: usize,
}

/// Effective rank of an `rows x cols` row-major matrix. Singular values
/// below `sv_floor` are discarded.
pub fn effective_rank(rows: usize, cols: usize, data: &[f64], sv_floor: f64) -> Result<EffectiveRankReport> {
    assert_eq!(data.len(), rows * cols, "matrix data does not match {rows}x{cols}");
    assert!(rows >= 1 && cols >= 1);
    if data.iter().all(|&v| v == 0.0) {
        return Err(Error::Dataset("effective rank of an all-zero matrix".into()));
    }
    // Gram matrix on the smaller side: eigenvalues are squared singular
    // values of the original.
    let n = rows.min(cols);
    let mut gram = vec![0.0f64; n * n];
    if cols <= rows {
        // G = XᵀX
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            for i in 0..cols {
                for j in i..cols {
                    gram[i * cols + j] += row[i] * row[j];
                }
            }
        }
    } else {
        // G = XXᵀ
        for i in 0..rows {
            for j in i..rows {
                let (a, b) = (&data[i * cols..(i + 1) * cols], &data[j * cols..(j + 1) * cols]);
                gram[i * rows + j] = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            gram[i * n + j] = gram[j * n + i];
        }
    }

    let eigen = jacobi_eigenvalues(&mut gram, n);
    let mut svs: Vec<f64> = eigen.into_iter().map(|l| l.max(0.0).sqrt()).collect();
    svs.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    // Values at the Gram eigensolve's noise level are numerical zeros;
    // discard them along with everything below the caller's floor.
    let noise = svs.first().copied().unwrap_or(0.0) * (n as f64 * f64::EPSILON).sqrt() * 4.0;
    svs.retain(|&s| s >= sv_floor && s > noise);
    if svs.is_empty() {
        return Err(Error::Dataset("no singular values above the floor".into()));
    }
    let z: f64 = svs.iter().sum();
    let mut entropy = 0.0;
    for &s in &svs {
        let p = s / z;
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(EffectiveRankReport {
        singular_values: svs,
        entropy,
        effective_rank: entropy.exp(),
        sv_floor,
        rows,
        cols,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. The matrix
/// is destroyed in place.
fn jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    let scale: f64 = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-15 * scale;
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}
