//! Dense singular value decomposition, one-sided Jacobi variant.
//!
//! Small and dependency-free: rotations are applied directly to the
//! columns of the matrix until they are pairwise orthogonal, at which
//! point the column norms are the singular values. Everything runs in
//! `f64` regardless of the model's compute precision — the factors feed
//! low-rank initialization, where half-precision Gram matrices would cost
//! real accuracy.
//!
//! For an `m×n` input with `m >= n` this produces the thin factorization
//! `A = U Σ Vᵀ` with `U` of shape `m×n`; wider-than-tall inputs are
//! handled by factoring the transpose and swapping the roles of `U`/`V`.

/// Relative off-diagonal threshold below which two columns count as
/// orthogonal.
pub const JACOBI_TOL: f64 = 1e-12;

/// Sweep cap; Jacobi converges quadratically, so hitting this means the
/// input was pathological (and the result is still usable, just less
/// orthogonal than promised).
pub const MAX_SWEEPS: usize = 60;

/// Thin SVD `A = U Σ Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub rows: usize,
    pub cols: usize,
    /// `rows × k` column-orthonormal factor, `k = min(rows, cols)`.
    pub u: Vec<f64>,
    /// Singular values, descending, non-negative. Length `k`.
    pub s: Vec<f64>,
    /// `k × cols` row-orthonormal factor.
    pub vt: Vec<f64>,
}

impl Svd {
    /// Number of retained singular triples.
    pub fn k(&self) -> usize {
        self.s.len()
    }

    /// Dense reconstruction `U Σ Vᵀ`, mostly for tests and diagnostics.
    pub fn reconstruct(&self, rank: usize) -> Vec<f64> {
        let r = rank.min(self.k());
        let (m, n, k) = (self.rows, self.cols, self.k());
        let mut out = vec![0.0; m * n];
        for t in 0..r {
            let sv = self.s[t];
            for i in 0..m {
                let ui = self.u[i * k + t] * sv;
                for j in 0..n {
                    out[i * n + j] += ui * self.vt[t * n + j];
                }
            }
        }
        out
    }
}

/// Factor a dense row-major `rows × cols` matrix.
pub fn svd(a: &[f64], rows: usize, cols: usize) -> Svd {
    assert_eq!(a.len(), rows * cols, "svd: {} values for {rows}×{cols}", a.len());
    assert!(rows > 0 && cols > 0, "svd: empty matrix");
    if rows >= cols {
        svd_tall(a, rows, cols)
    } else {
        // A = (Aᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let mut at = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                at[j * rows + i] = a[i * cols + j];
            }
        }
        let f = svd_tall(&at, cols, rows);
        let k = f.k();
        // u ← V' (rows×k): V'ᵀ is k×rows, so transpose it.
        let mut u = vec![0.0; rows * k];
        for t in 0..k {
            for i in 0..rows {
                u[i * k + t] = f.vt[t * rows + i];
            }
        }
        // vt ← U'ᵀ (k×cols): U' is cols×k.
        let mut vt = vec![0.0; k * cols];
        for t in 0..k {
            for j in 0..cols {
                vt[t * cols + j] = f.u[j * k + t];
            }
        }
        Svd { rows, cols, u, s: f.s, vt }
    }
}

fn svd_tall(a: &[f64], m: usize, n: usize) -> Svd {
    // Column-major working copy of A; rotations touch column pairs, so
    // keeping columns contiguous keeps the inner loops simple.
    let mut w = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            w[j * m + i] = a[i * n + j];
        }
    }
    // V accumulates the same rotations, starting from the identity.
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (w[p * m + i], w[q * m + i]);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                // Classic symmetric-eigenproblem rotation that zeroes the
                // (p,q) entry of the implicit Gram matrix.
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (w[p * m + i], w[q * m + i]);
                    w[p * m + i] = c * x - s * y;
                    w[q * m + i] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[p * n + i], v[q * n + i]);
                    v[p * n + i] = c * x - s * y;
                    v[q * n + i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; normalize U's columns.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| w[j * m + i] * w[j * m + i]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).expect("finite norms"));

    let mut u = vec![0.0; m * n];
    let mut s = Vec::with_capacity(n);
    let mut vt = vec![0.0; n * n];
    for (t, &j) in order.iter().enumerate() {
        let norm = norms[j];
        s.push(norm);
        if norm > 0.0 {
            for i in 0..m {
                u[i * n + t] = w[j * m + i] / norm;
            }
        }
        // else: leave the column zero; the triple contributes nothing.
        for i in 0..n {
            vt[t * n + i] = v[j * n + i];
        }
    }
    Svd { rows: m, cols: n, u, s, vt }
}
