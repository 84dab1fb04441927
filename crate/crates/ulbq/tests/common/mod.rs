//! Shared test utilities: the central-difference gradient oracle and a few
//! dense reference kernels that tests compare the library against.

#![allow(dead_code)] // not every integration test uses every helper

use ulbq::rng::Rng;
use ulbq::tensor::Tensor;

/// Step size for central differences; with f64 this keeps truncation and
/// cancellation error both well below the 1e-4 acceptance tolerance.
pub const FD_H: f64 = 1e-5;

/// Relative-error tolerance for autodiff-vs-finite-difference comparisons.
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a unit floor: |a - f| / max(1, |f|). The floor keeps
/// near-zero reference gradients from inflating the ratio while staying far
/// above central-difference noise (~1e-11 for FD_H = 1e-5).
pub fn rel_err(autodiff: f64, fd: f64) -> f64 {
    (autodiff - fd).abs() / fd.abs().max(1.0)
}

/// Check the gradient of `f` (a scalar-valued function of one leaf tensor)
/// at `point` against central finite differences. Returns the worst
/// relative error across elements.
pub fn check_grad_single(shape: &[usize], point: &[f64], f: impl Fn(&Tensor<f64>) -> Tensor<f64>) -> f64 {
    check_grad(&[(shape.to_vec(), point.to_vec())], |xs| f(&xs[0]))
}

/// Multi-input variant: every listed leaf gets `requires_grad` and every
/// element of every leaf is probed with a central difference.
pub fn check_grad(
    points: &[(Vec<usize>, Vec<f64>)],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    let leaves: Vec<Tensor<f64>> = points
        .iter()
        .map(|(shape, data)| Tensor::<f64>::from_f64(shape, data, true))
        .collect();
    let loss = f(&leaves);
    loss.backward();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |perturbed: &[(usize, usize, f64)]| -> f64 {
        let leaves: Vec<Tensor<f64>> = points
            .iter()
            .enumerate()
            .map(|(li, (shape, data))| {
                let mut d = data.clone();
                for &(pl, pi, dv) in perturbed {
                    if pl == li {
                        d[pi] += dv;
                    }
                }
                Tensor::<f64>::from_f64(shape, &d, false)
            })
            .collect();
        f(&leaves).item()
    };

    let mut worst = 0.0f64;
    for (li, (_, data)) in points.iter().enumerate() {
        for i in 0..data.len() {
            let up = eval(&[(li, i, FD_H)]);
            let down = eval(&[(li, i, -FD_H)]);
            let fd = (up - down) / (2.0 * FD_H);
            worst = worst.max(rel_err(grads[li][i], fd));
        }
    }
    worst
}

/// Random values in [-1, 1) — keeps gradients O(1) so the relative-error
/// measure is meaningful.
pub fn random_point(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
}

// ── Dense reference kernels (straight loops, no library code) ───────────────

/// Reference matmul: (m×k) @ (k×n).
pub fn dense_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Mean squared difference between two equal-length slices.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}
